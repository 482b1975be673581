"""Domain types and geometry/probability kernels shared by all inference engines.

Scenes are sets of observed 2D parts, templates are sets of model parts in a
canonical reference frame, and a pose is a similarity transform stored in the
linear (tx, ty, s*cos(theta), s*sin(theta)) parameterization.  Everything here
is an immutable value; engines never mutate shared state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "Pose",
    "PartGeometry",
    "AppearanceBlock",
    "Template",
    "TemplateSet",
    "ModelConfig",
    "Scene",
    "build_feature_matrix",
    "transform_template",
    "part_log_likelihood",
    "compose_poses",
]


def _frozen_array(a, shape=None) -> np.ndarray:
    out = np.array(a, dtype=float)
    if shape is not None:
        out = out.reshape(shape)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Pose:
    """Similarity transform: translate by (tx, ty), scale by s, rotate clockwise by theta.

    Stored as the linear 4-vector (tx, ty, sc, ss) with sc = s*cos(theta) and
    ss = s*sin(theta); (s, theta) exist only as conversion helpers so there is
    no angle wrapping anywhere.
    """

    tx: float
    ty: float
    sc: float
    ss: float

    @staticmethod
    def identity() -> "Pose":
        return Pose(0.0, 0.0, 1.0, 0.0)

    @staticmethod
    def from_params(tx: float, ty: float, s: float, theta: float) -> "Pose":
        return Pose(tx, ty, s * math.cos(theta), s * math.sin(theta))

    @staticmethod
    def from_vector(v: Sequence[float]) -> "Pose":
        tx, ty, sc, ss = (float(x) for x in np.asarray(v, dtype=float)[:4])
        return Pose(tx, ty, sc, ss)

    def as_vector(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.sc, self.ss], dtype=float)

    def scale(self) -> float:
        return math.hypot(self.sc, self.ss)

    def angle(self) -> float:
        return math.atan2(self.ss, self.sc)

    def params(self) -> tuple[float, float, float, float]:
        return self.tx, self.ty, self.scale(), self.angle()

    def rotation_matrix(self) -> np.ndarray:
        """2x2 linear part T with x = t + T p for a point part p."""
        return np.array([[self.sc, self.ss], [-self.ss, self.sc]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.array([self.tx, self.ty]) + pts @ self.rotation_matrix().T


def compose_poses(outer: Pose, inner: Pose) -> Pose:
    """Pose equivalent to applying ``inner`` first, then ``outer``."""
    a1, b1 = outer.sc, outer.ss
    a2, b2 = inner.sc, inner.ss
    t = outer.apply(np.array([[inner.tx, inner.ty]]))[0]
    return Pose(t[0], t[1], a1 * a2 - b1 * b2, a1 * b2 + b1 * a2)


@dataclass(frozen=True)
class PartGeometry:
    """A model part: 2D location, optionally with its own size and orientation."""

    px: float
    py: float
    size: Optional[float] = None
    orientation: Optional[float] = None

    def __post_init__(self):
        if (self.size is None) != (self.orientation is None):
            raise ValueError("size and orientation must be given together")
        if self.size is not None and self.size <= 0:
            raise ValueError("part size must be positive")

    @property
    def has_extent(self) -> bool:
        return self.size is not None

    def location(self) -> np.ndarray:
        return np.array([self.px, self.py])


@dataclass(frozen=True)
class AppearanceBlock:
    """Per-part factor-analysis block: x_a = loading @ y_a + mean + noise(variances)."""

    loading: np.ndarray  # (d, latent_dim)
    mean: np.ndarray  # (d,)
    variances: np.ndarray  # (d,) strictly positive

    def __post_init__(self):
        object.__setattr__(self, "loading", _frozen_array(np.atleast_2d(self.loading)))
        object.__setattr__(self, "mean", _frozen_array(self.mean).ravel())
        object.__setattr__(self, "variances", _frozen_array(self.variances).ravel())
        d, _ = self.loading.shape
        if d == 0:
            raise ValueError("appearance dimension must be positive")
        if self.mean.shape != (d,) or self.variances.shape != (d,):
            raise ValueError("appearance block dimensions disagree")
        if np.any(self.variances <= 0):
            raise ValueError("appearance variances must be strictly positive")

    @property
    def dim(self) -> int:
        return self.loading.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.loading.shape[1]


@dataclass(frozen=True)
class Template:
    """A model object: at least two parts, with all-or-none appearance blocks."""

    id: str
    parts: tuple[PartGeometry, ...]
    appearance: Optional[tuple[AppearanceBlock, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        if len(self.parts) < 2:
            raise ValueError("a template needs at least two parts; the pose is unidentifiable otherwise")
        if self.appearance is not None:
            object.__setattr__(self, "appearance", tuple(self.appearance))
            if len(self.appearance) != len(self.parts):
                raise ValueError("appearance blocks must cover all parts or none")
            dims = {b.latent_dim for b in self.appearance}
            if len(dims) != 1:
                raise ValueError("appearance blocks must share one latent dimension")

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    @property
    def latent_dim(self) -> int:
        """Appearance latent dimension (0 when the template is purely geometric)."""
        return self.appearance[0].latent_dim if self.appearance else 0

    def part_locations(self) -> np.ndarray:
        return np.array([[p.px, p.py] for p in self.parts])


@dataclass(frozen=True)
class TemplateSet:
    templates: tuple[Template, ...]

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        if not self.templates:
            raise ValueError("empty template set")

    def __iter__(self):
        return iter(self.templates)

    def __len__(self):
        return len(self.templates)

    def __getitem__(self, k: int) -> Template:
        return self.templates[k]

    @property
    def total_parts(self) -> int:
        """N: the number of (object, part) slots, i.e. assignment-matrix columns."""
        return sum(t.n_parts for t in self.templates)

    def columns(self) -> list[tuple[int, int]]:
        """Column labels (k, n) in template order."""
        return [(k, n) for k, t in enumerate(self.templates) for n in range(t.n_parts)]


@dataclass(frozen=True)
class ModelConfig:
    """Model hyperparameters and fitting tolerances (benchmark defaults)."""

    lam: float = 1e4  # geometric observation precision
    mu0: np.ndarray = field(default_factory=lambda: np.zeros(4))
    d0_diag: np.ndarray = field(default_factory=lambda: np.ones(4))
    beta_init: float = 0.05
    beta_max: float = 1.0
    beta_mult: float = 2.0
    restarts: int = 5
    elbo_rel_tol: float = 1e-6
    elbo_abs_tol: float = 1e-8
    max_iter: int = 500  # q(Y)/q(Z) update pairs per run
    sinkhorn_tol: float = 1e-8
    sinkhorn_max_iter: int = 1000
    sparsity_retries: int = 3

    def __post_init__(self):
        object.__setattr__(self, "mu0", _frozen_array(self.mu0, (4,)))
        object.__setattr__(self, "d0_diag", _frozen_array(self.d0_diag, (4,)))
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if not (0 < self.beta_init <= self.beta_max):
            raise ValueError("need 0 < beta_init <= beta_max")
        if np.any(self.d0_diag <= 0):
            raise ValueError("pose prior covariance must be positive")


@dataclass(frozen=True)
class Scene:
    """Observed parts, optionally with appearance vectors and ground truth.

    ``labels[m]`` is the generating template index for point m and
    ``templates_used`` lists the template indices present; both are None for
    scenes without ground truth.
    """

    points: np.ndarray  # (M, 2)
    appearance: Optional[tuple[np.ndarray, ...]] = None
    labels: Optional[tuple[int, ...]] = None
    templates_used: Optional[tuple[int, ...]] = None
    true_poses: Optional[tuple[Pose, ...]] = None

    def __post_init__(self):
        pts = _frozen_array(np.atleast_2d(self.points))
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("scene points must be (M, 2)")
        if not np.all(np.isfinite(pts)):
            raise ValueError("scene coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.appearance is not None:
            object.__setattr__(
                self, "appearance", tuple(_frozen_array(a).ravel() for a in self.appearance)
            )
            if len(self.appearance) != len(pts):
                raise ValueError("one appearance vector per point required")
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        if self.templates_used is not None:
            object.__setattr__(self, "templates_used", tuple(int(v) for v in self.templates_used))
        if self.true_poses is not None:
            object.__setattr__(self, "true_poses", tuple(self.true_poses))

    @property
    def n_points(self) -> int:
        return len(self.points)

    def to_dict(self) -> dict:
        return {
            "points": self.points.tolist(),
            "appearance": [a.tolist() for a in self.appearance] if self.appearance else None,
            "labels": list(self.labels) if self.labels is not None else None,
            "templates_used": list(self.templates_used) if self.templates_used is not None else None,
            "true_poses": [p.as_vector().tolist() for p in self.true_poses]
            if self.true_poses is not None
            else None,
        }

    @staticmethod
    def from_dict(d: dict) -> "Scene":
        return Scene(
            points=np.array(d["points"], dtype=float),
            appearance=tuple(np.array(a, dtype=float) for a in d["appearance"])
            if d.get("appearance")
            else None,
            labels=tuple(d["labels"]) if d.get("labels") is not None else None,
            templates_used=tuple(d["templates_used"])
            if d.get("templates_used") is not None
            else None,
            true_poses=tuple(Pose.from_vector(v) for v in d["true_poses"])
            if d.get("true_poses")
            else None,
        )


def build_feature_matrix(part: PartGeometry, mode: str = "point") -> np.ndarray:
    """Feature matrix F mapping a pose vector to the predicted part observation.

    ``point`` mode returns the 2x4 location rows; ``full`` mode appends the two
    size/orientation projection rows and requires the part to carry them.
    """
    top = np.array([[1.0, 0.0, part.px, part.py], [0.0, 1.0, part.py, -part.px]])
    if mode == "point":
        return top
    if mode != "full":
        raise ValueError(f"unknown mode {mode!r}")
    if not part.has_extent:
        raise ValueError("full mode requires a part with size and orientation")
    c = part.size * math.cos(part.orientation)
    s = part.size * math.sin(part.orientation)
    bottom = np.array([[0.0, 0.0, c, -s], [0.0, 0.0, s, c]])
    return np.vstack([top, bottom])


def transform_template(template: Template, pose: Pose, mode: str = "point") -> np.ndarray:
    """Predicted observations for every part of ``template`` under ``pose``."""
    y = pose.as_vector()
    return np.array([build_feature_matrix(p, mode) @ y for p in template.parts])


def part_log_likelihood(
    x: np.ndarray,
    part: PartGeometry,
    pose: Pose,
    beta: float,
    config: ModelConfig,
    appearance: Optional[AppearanceBlock] = None,
    x_appearance: Optional[np.ndarray] = None,
    y_appearance: Optional[np.ndarray] = None,
) -> float:
    """Gaussian log-density of an observed part given a pose value.

    Geometric features have covariance (beta*lam)^-1 I; appearance features,
    when present, use the part's factor-analysis block with covariance
    beta^-1 * variances.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    x = np.asarray(x, dtype=float).ravel()
    pred = build_feature_matrix(part) @ pose.as_vector()
    resid = x - pred
    var = np.full(2, 1.0 / (beta * config.lam))
    if appearance is not None:
        if x_appearance is None or y_appearance is None:
            raise ValueError("appearance block given without appearance data")
        resid_a = np.asarray(x_appearance, float) - (
            appearance.loading @ np.asarray(y_appearance, float) + appearance.mean
        )
        resid = np.concatenate([resid, resid_a])
        var = np.concatenate([var, appearance.variances / beta])
    return float(-0.5 * np.sum(np.log(2 * np.pi * var)) - 0.5 * np.sum(resid**2 / var))


def save_scenes(scenes: Sequence[Scene], path) -> None:
    with open(path, "w") as fh:
        json.dump([s.to_dict() for s in scenes], fh)


def load_scenes(path) -> list[Scene]:
    with open(path) as fh:
        data = json.load(fh)
    return [Scene.from_dict(d) for d in data]


def template_to_dict(t: Template) -> dict:
    d = {
        "id": t.id,
        "parts": [
            {"px": p.px, "py": p.py, "size": p.size, "orientation": p.orientation}
            for p in t.parts
        ],
    }
    if t.appearance is not None:
        d["appearance"] = [
            {"loading": b.loading.tolist(), "mean": b.mean.tolist(), "variances": b.variances.tolist()}
            for b in t.appearance
        ]
    return d


def template_from_dict(d: dict) -> Template:
    parts = tuple(
        PartGeometry(p["px"], p["py"], p.get("size"), p.get("orientation")) for p in d["parts"]
    )
    appearance = None
    if d.get("appearance"):
        appearance = tuple(
            AppearanceBlock(np.array(b["loading"]), np.array(b["mean"]), np.array(b["variances"]))
            for b in d["appearance"]
        )
    return Template(id=d["id"], parts=parts, appearance=appearance)


def save_templates(templates: TemplateSet, path) -> None:
    with open(path, "w") as fh:
        json.dump([template_to_dict(t) for t in templates], fh)


def load_templates(path) -> TemplateSet:
    with open(path) as fh:
        data = json.load(fh)
    return TemplateSet(tuple(template_from_dict(d) for d in data))
