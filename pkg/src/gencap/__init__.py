"""gencap: generative capsule models for scenes of geometric parts.

Inference of object templates, poses, and part assignments via annealed
variational inference (Sinkhorn-relaxed or mixture-style posterior) or a
RANSAC-style minimal-basis search, plus variational-EM template learning and
a clustering-metric suite for benchmark evaluation.
"""

from .core_model import (
    AppearanceBlock,
    ModelConfig,
    PartGeometry,
    Pose,
    Scene,
    Template,
    TemplateSet,
    build_feature_matrix,
    compose_poses,
    load_scenes,
    load_templates,
    part_log_likelihood,
    save_scenes,
    save_templates,
    transform_template,
)
from .eval_metrics import (
    Partition,
    adjusted_rand_index,
    predicted_partition,
    scene_accuracy,
    segmentation_accuracy,
    truth_partition,
    variation_of_information,
)
from .kernels import numba_enabled
from .ransac_engine import (
    CandidateInstantiation,
    DegenerateBasisError,
    combine_explanations,
    infer_appearance_from_subset,
    ransac_scene,
    solve_pose_from_pair,
    subset_match,
)
from .scene_gen import (
    GeneratorConfig,
    generate_dataset,
    generate_scene,
    generate_single_object_scenes,
    normalize_points,
    standard_constellation_set,
)
from .sinkhorn import StructurallyInfeasibleError, decode_permutation, sinkhorn_knopp
from .template_learning import (
    LearningConfig,
    exact_permutation_posterior,
    learn_template,
    normalize_template,
    procrustes_align,
    smse,
)
from .vi_engine import InferenceResult, decode_solution, run_inference

__version__ = "0.1.0"

__all__ = [
    "AppearanceBlock",
    "CandidateInstantiation",
    "DegenerateBasisError",
    "GeneratorConfig",
    "InferenceResult",
    "LearningConfig",
    "ModelConfig",
    "PartGeometry",
    "Partition",
    "Pose",
    "Scene",
    "StructurallyInfeasibleError",
    "Template",
    "TemplateSet",
    "adjusted_rand_index",
    "build_feature_matrix",
    "combine_explanations",
    "compose_poses",
    "decode_permutation",
    "decode_solution",
    "exact_permutation_posterior",
    "generate_dataset",
    "generate_scene",
    "generate_single_object_scenes",
    "infer_appearance_from_subset",
    "learn_template",
    "load_scenes",
    "load_templates",
    "normalize_points",
    "normalize_template",
    "numba_enabled",
    "part_log_likelihood",
    "predicted_partition",
    "procrustes_align",
    "ransac_scene",
    "run_inference",
    "save_scenes",
    "save_templates",
    "scene_accuracy",
    "segmentation_accuracy",
    "sinkhorn_knopp",
    "smse",
    "solve_pose_from_pair",
    "subset_match",
    "transform_template",
    "truth_partition",
    "variation_of_information",
]
