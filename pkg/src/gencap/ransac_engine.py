"""Minimal-basis (RANSAC-style) inference: solve a pose from a point pair, verify the rest."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core_model import (
    AppearanceBlock,
    Pose,
    Scene,
    Template,
    TemplateSet,
    build_feature_matrix,
    transform_template,
)

__all__ = [
    "DegenerateBasisError",
    "CandidateInstantiation",
    "solve_pose_from_pair",
    "subset_match",
    "ransac_scene",
    "combine_explanations",
    "infer_appearance_from_subset",
]

_NO_MATCH_COST = 1e9  # dominates any in-tolerance squared distance


class DegenerateBasisError(ValueError):
    """Basis parts too close to coincident to invert the pose equations."""


@dataclass(frozen=True)
class CandidateInstantiation:
    template_index: int
    pose: Pose
    matches: tuple  # (template part n, scene point m) pairs, injective both ways
    fit_error: float

    @property
    def n_matched(self) -> int:
        return len(self.matches)


def solve_pose_from_pair(
    template: Template, n1: int, n2: int, x_i: np.ndarray, x_j: np.ndarray
) -> Pose:
    """Exactly interpolate two part observations: pose = B^-1 [x_i; x_j]."""
    if n1 == n2:
        raise ValueError("basis parts must be distinct")
    B = np.vstack(
        [build_feature_matrix(template.parts[n1]), build_feature_matrix(template.parts[n2])]
    )
    if abs(np.linalg.det(B)) < 1e-9:
        raise DegenerateBasisError(f"basis parts {n1}, {n2} of {template.id!r} are coincident")
    y = np.linalg.solve(B, np.concatenate([np.asarray(x_i, float), np.asarray(x_j, float)]))
    return Pose.from_vector(y)


def subset_match(
    predicted: np.ndarray, scene_points: np.ndarray, tol: float = 0.1
) -> Optional[tuple[tuple, float]]:
    """Injective matching of predicted parts to scene points within ``tol``.

    Maximizes the number of matched parts, breaking ties by the minimum total
    squared distance.  Returns (matches, fit error) with matches as
    (part, point) pairs, or None when fewer than two parts can be matched.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    pred = np.atleast_2d(predicted)
    pts = np.atleast_2d(scene_points)
    d2 = ((pred[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    cost = np.where(d2 < tol * tol, d2, _NO_MATCH_COST)
    n_pred, n_pts = cost.shape
    if n_pred > n_pts:
        # pad with unmatched columns so the assignment stays feasible
        cost = np.hstack([cost, np.full((n_pred, n_pred - n_pts), _NO_MATCH_COST)])
    rows, cols = linear_sum_assignment(cost)
    matches = [
        (int(r), int(c))
        for r, c in zip(rows, cols)
        if c < n_pts and cost[r, c] < _NO_MATCH_COST
    ]
    if len(matches) < 2:
        return None
    err = float(sum(d2[r, c] for r, c in matches))
    return tuple(matches), err


def ransac_scene(
    scene: Scene, templates: TemplateSet, tol: float = 0.1
) -> list[CandidateInstantiation]:
    """All candidate instantiations over ordered point pairs and template bases.

    The basis is the first two parts of each template.  Candidates are emitted
    in (pair, template) order, so the output is deterministic and seed-free.
    """
    pts = scene.points
    M = len(pts)
    if M < 2:
        return []
    if np.max(np.abs(pts)) > 1.0 + 1e-9:
        warnings.warn(
            "scene coordinates exceed [-1, 1]; the match tolerance assumes normalized scenes",
            RuntimeWarning,
        )
    out = []
    for i in range(M):
        for j in range(M):
            if i == j:
                continue
            for k, template in enumerate(templates):
                try:
                    pose = solve_pose_from_pair(template, 0, 1, pts[i], pts[j])
                except DegenerateBasisError:
                    continue
                predicted = transform_template(template, pose)
                hit = subset_match(predicted, pts, tol)
                if hit is None:
                    continue
                matches, err = hit
                out.append(
                    CandidateInstantiation(
                        template_index=k, pose=pose, matches=matches, fit_error=err
                    )
                )
    return out


def combine_explanations(
    candidates: Sequence[CandidateInstantiation], scene: Scene, templates: TemplateSet
) -> tuple[tuple, dict]:
    """Greedy scene explanation: most matched points first, ties by fit error.

    Each template may be instantiated once and each point claimed once;
    leftover points stay unexplained (label -1).  Returns per-point labels and
    the selected pose per template index.
    """
    order = sorted(
        range(len(candidates)),
        key=lambda i: (-candidates[i].n_matched, candidates[i].fit_error, i),
    )
    labels = [-1] * scene.n_points
    poses: dict[int, Pose] = {}
    claimed = set()
    for idx in order:
        cand = candidates[idx]
        if cand.template_index in poses:
            continue
        pts = [m for _, m in cand.matches]
        if any(m in claimed for m in pts):
            continue
        for m in pts:
            labels[m] = cand.template_index
            claimed.add(m)
        poses[cand.template_index] = cand.pose
    return tuple(labels), poses


def infer_appearance_from_subset(
    blocks: Sequence[AppearanceBlock], observed: dict
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Factor-analysis conditioning on an observed subset of parts.

    ``observed`` maps part index -> appearance vector.  Returns the posterior
    mean and covariance of the shared latent and the completed appearance
    (posterior-mean prediction) for every part.
    """
    if not observed:
        raise ValueError("at least one part must be observed")
    latent_dim = blocks[0].latent_dim
    precision = np.eye(latent_dim)
    rhs = np.zeros(latent_dim)
    for n, x in observed.items():
        b = blocks[n]
        Fw = b.loading / b.variances[:, None]
        precision = precision + b.loading.T @ Fw
        rhs = rhs + Fw.T @ (np.asarray(x, float) - b.mean)
    cov = np.linalg.inv(precision)
    mean = cov @ rhs
    completed = [b.loading @ mean + b.mean for b in blocks]
    return mean, cov, completed
