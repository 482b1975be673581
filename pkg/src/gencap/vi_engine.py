"""Routing-by-agreement inference: alternating pose / assignment updates with annealing.

Two posterior families over the match matrix are supported: ``ds`` keeps the
responsibilities doubly stochastic via Sinkhorn balancing, ``gmm`` only
normalizes each observed row (an ordinary mixture responsibility).  Point-only
scenes run through the compiled kernels in :mod:`gencap.kernels`; scenes with
appearance features use the general numpy path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .core_model import ModelConfig, Pose, Scene, TemplateSet, build_feature_matrix, transform_template
from .sinkhorn import decode_permutation, sinkhorn_knopp

__all__ = [
    "PosePosterior",
    "InferenceResult",
    "match_prior",
    "update_pose_posterior",
    "update_responsibilities",
    "compute_elbo",
    "run_inference",
    "decode_solution",
]


@dataclass
class PosePosterior:
    """Gaussian q(y_k) per template: mean and precision over pose (+ appearance latent)."""

    means: list  # list of (4 + d_y,) arrays
    precisions: list  # list of SPD (4 + d_y, 4 + d_y) arrays


@dataclass
class InferenceResult:
    R: np.ndarray
    posterior: PosePosterior
    elbo: float
    labels: tuple  # per observed point: template index
    present: tuple  # template indices reported present
    poses: dict  # template index -> Pose
    reconstructions: dict  # template index -> (N_k, 2) predicted part locations
    restart_index: int
    trace: np.ndarray
    betas: np.ndarray
    converged: bool
    variant: str
    sparsity_ok: bool


# ---------------------------------------------------------------------------
# Column bookkeeping


def _columns(templates: TemplateSet):
    return templates.columns()


def _appearance_dim(scene: Scene, m: int) -> int:
    if scene.appearance is None:
        return 0
    return len(scene.appearance[m])


def _column_appearance_dim(templates: TemplateSet, k: int, n: int) -> int:
    t = templates[k]
    if t.appearance is None:
        return 0
    return t.appearance[n].dim


def match_prior(scene: Scene, templates: TemplateSet) -> np.ndarray:
    """Prior match matrix A: uniform 1/N, with structural zeros for type mismatches.

    A part type is identified by its appearance dimensionality; purely
    geometric scenes have no typing and the prior is uniform everywhere.
    Dummy rows are always uniform.
    """
    N = templates.total_parts
    M = scene.n_points
    cols = _columns(templates)
    A = np.full((N, N), 1.0 / N)
    if scene.appearance is not None:
        for m in range(M):
            dm = _appearance_dim(scene, m)
            for j, (k, n) in enumerate(cols):
                if _column_appearance_dim(templates, k, n) != dm:
                    A[m, j] = 0.0
    return A


def _template_latent(templates: TemplateSet, k: int, config: ModelConfig):
    """Prior mean / precision diagonal for template k's combined latent."""
    dy = templates[k].latent_dim
    mu0 = np.concatenate([config.mu0, np.zeros(dy)])
    d0 = np.concatenate([config.d0_diag, np.ones(dy)])
    return mu0, d0


def _column_model(scene: Scene, templates: TemplateSet, k: int, n: int, m: Optional[int]):
    """(F, mean, variance diagonal) for column (k, n), in template k's latent space.

    With ``m`` given, also returns the stacked observation vector for point m.
    """
    t = templates[k]
    dy = t.latent_dim
    Fg = build_feature_matrix(t.parts[n])
    if dy == 0:
        F = Fg
        mean = np.zeros(2)
        var = np.full(2, np.nan)  # filled with 1/lam by callers (lam is in config)
    else:
        block = t.appearance[n]
        F = np.zeros((2 + block.dim, 4 + dy))
        F[:2, :4] = Fg
        F[2:, 4:] = block.loading
        mean = np.concatenate([np.zeros(2), block.mean])
        var = np.concatenate([np.full(2, np.nan), block.variances])
    if m is None:
        return F, mean, var
    x = np.asarray(scene.points[m], dtype=float)
    if dy > 0:
        x = np.concatenate([x, scene.appearance[m]])
    return F, mean, var, x


def _fill_var(var: np.ndarray, lam: float) -> np.ndarray:
    out = var.copy()
    out[np.isnan(out)] = 1.0 / lam
    return out


# ---------------------------------------------------------------------------
# General (appearance-capable) updates


def update_pose_posterior(
    scene: Scene, templates: TemplateSet, R: np.ndarray, beta: float, config: ModelConfig
) -> PosePosterior:
    """Closed-form Gaussian q(y_k) given responsibilities (dummy rows contribute nothing)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    M = scene.n_points
    cols = _columns(templates)
    means = []
    precisions = []
    for k in range(len(templates)):
        mu0, d0 = _template_latent(templates, k, config)
        lam_k = np.diag(1.0 / d0)
        rhs = mu0 / d0
        for j, (kk, n) in enumerate(cols):
            if kk != k:
                continue
            F, mean, var = _column_model(scene, templates, k, n, None)
            var = _fill_var(var, config.lam)
            Fw = F / var[:, None]
            FtDF = F.T @ Fw
            for m in range(M):
                r = R[m, j]
                if r == 0.0:
                    continue
                x = np.asarray(scene.points[m], dtype=float)
                if templates[k].latent_dim > 0:
                    if _appearance_dim(scene, m) != _column_appearance_dim(templates, k, n):
                        continue
                    x = np.concatenate([x, scene.appearance[m]])
                lam_k = lam_k + beta * r * FtDF
                rhs = rhs + beta * r * (Fw.T @ (x - mean))
        means.append(np.linalg.solve(lam_k, rhs))
        precisions.append(lam_k)
    return PosePosterior(means=means, precisions=precisions)


def _log_rho_entry(scene, templates, posterior, beta, config, m, j, cols, log_a):
    k, n = cols[j]
    if log_a[m, j] == -np.inf:
        return -np.inf
    out = _column_model(scene, templates, k, n, m)
    F, mean, var, x = out
    var = _fill_var(var, config.lam)
    mu = posterior.means[k]
    lam_inv = np.linalg.inv(posterior.precisions[k])
    resid = x - F @ mu - mean
    quad = float(resid @ (resid / var))
    trace = float(np.trace((F.T @ (F / var[:, None])) @ lam_inv))
    d = len(x)
    return (
        log_a[m, j]
        - 0.5 * np.sum(np.log(var / beta))
        - 0.5 * d * np.log(2 * np.pi)
        - 0.5 * beta * (quad + trace)
    )


def update_responsibilities(
    scene: Scene,
    templates: TemplateSet,
    posterior: PosePosterior,
    beta: float,
    config: ModelConfig,
    variant: str = "ds",
    prior: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One q(Z) update: observed rows from the expected log-likelihood, dummy rows from the prior."""
    if variant not in ("ds", "gmm"):
        raise ValueError(f"unknown variant {variant!r}")
    N = templates.total_parts
    M = scene.n_points
    cols = _columns(templates)
    A = match_prior(scene, templates) if prior is None else prior
    with np.errstate(divide="ignore"):
        log_a = np.log(A)
    log_rho = np.full((M, N), -np.inf)
    for m in range(M):
        for j in range(N):
            log_rho[m, j] = _log_rho_entry(scene, templates, posterior, beta, config, m, j, cols, log_a)
    rho = np.zeros((N, N))
    for m in range(M):
        shifted = np.exp(log_rho[m] - log_rho[m].max())
        # keep structural zeros exact; floor only the genuinely tiny survivors
        pos = log_rho[m] > -np.inf
        shifted[pos] = np.maximum(shifted[pos], kernels.FLOOR)
        rho[m] = shifted
    rho[M:] = A[M:]
    if variant == "ds":
        return sinkhorn_knopp(rho, config.sinkhorn_tol, config.sinkhorn_max_iter)
    return rho / rho.sum(axis=1, keepdims=True)


def compute_elbo(
    scene: Scene,
    templates: TemplateSet,
    R: np.ndarray,
    posterior: PosePosterior,
    beta: float,
    config: ModelConfig,
    prior: Optional[np.ndarray] = None,
) -> float:
    """Three-term bound: expected data fit minus the pose and assignment divergences."""
    M = scene.n_points
    N = templates.total_parts
    cols = _columns(templates)
    A = match_prior(scene, templates) if prior is None else prior
    e_term = 0.0
    for m in range(M):
        for j in range(N):
            r = R[m, j]
            if r == 0.0:
                continue
            k, n = cols[j]
            F, mean, var, x = _column_model(scene, templates, k, n, m)
            var = _fill_var(var, config.lam)
            mu = posterior.means[k]
            lam_inv = np.linalg.inv(posterior.precisions[k])
            resid = x - F @ mu - mean
            quad = float(resid @ (resid / var))
            trace = float(np.trace((F.T @ (F / var[:, None])) @ lam_inv))
            d = len(x)
            e_term -= r * (
                0.5 * d * np.log(2 * np.pi)
                + 0.5 * np.sum(np.log(var / beta))
                + 0.5 * beta * (quad + trace)
            )
    kl_y = 0.0
    for k in range(len(templates)):
        mu0, d0 = _template_latent(templates, k, config)
        lam_inv = np.linalg.inv(posterior.precisions[k])
        diff = posterior.means[k] - mu0
        _, logdet = np.linalg.slogdet(posterior.precisions[k])
        kl_y += 0.5 * (
            np.trace(np.diag(1.0 / d0) @ lam_inv)
            - len(mu0)
            + float(diff @ (diff / d0))
            + float(np.sum(np.log(d0)))
            + logdet
        )
    kl_z = 0.0
    for m in range(N):
        for j in range(N):
            r = R[m, j]
            if r > 0.0:
                kl_z += r * (np.log(r) - np.log(A[m, j]))
    return float(e_term - kl_y - kl_z)


# ---------------------------------------------------------------------------
# Full runs


def _sparsity_violated(R: np.ndarray, templates: TemplateSet, M: int) -> bool:
    cols = _columns(templates)
    col_k = np.array([k for k, _ in cols])
    for k in range(len(templates)):
        sub = R[:M][:, col_k == k]
        if sub.size and sub.max() > 0.9 and sub.sum() < 2.0:
            return True
    return False


def _point_scene_inputs(scene: Scene, templates: TemplateSet, config: ModelConfig):
    cols = _columns(templates)
    Fs = np.array([build_feature_matrix(templates[k].parts[n]) for k, n in cols])
    FtF = np.einsum("jca,jcb->jab", Fs, Fs)
    col_k = np.array([k for k, _ in cols], dtype=np.int64)
    N = templates.total_parts
    log_a = np.full((N, N), -np.log(N))
    return Fs, FtF, col_k, log_a


def _run_single(scene, templates, config, variant, R0):
    """One annealed run from a fixed initial R; dispatches to the compiled kernel
    for point-only scenes and to the general numpy path otherwise."""
    M = scene.n_points
    point_only = scene.appearance is None and all(t.latent_dim == 0 for t in templates)
    if point_only:
        Fs, FtF, col_k, log_a = _point_scene_inputs(scene, templates, config)
        R, mus, lams, elbo, trace, betas, converged, _ = kernels.vi_run_point(
            np.ascontiguousarray(scene.points),
            Fs,
            FtF,
            col_k,
            len(templates),
            config.lam,
            np.asarray(config.d0_diag),
            np.asarray(config.mu0),
            log_a,
            np.ascontiguousarray(R0),
            config.beta_init,
            config.beta_max,
            config.beta_mult,
            config.elbo_rel_tol,
            config.elbo_abs_tol,
            config.max_iter,
            config.sinkhorn_tol,
            config.sinkhorn_max_iter,
            variant == "ds",
        )
        posterior = PosePosterior(means=[mus[k] for k in range(len(templates))],
                                  precisions=[lams[k] for k in range(len(templates))])
        return R, posterior, float(elbo), trace, betas, converged
    # general path
    A = match_prior(scene, templates)
    R = R0.copy()
    beta = config.beta_init
    prev = -np.inf
    trace = []
    betas = []
    converged = False
    posterior = None
    for _ in range(config.max_iter):
        posterior = update_pose_posterior(scene, templates, R, beta, config)
        R = update_responsibilities(scene, templates, posterior, beta, config, variant, prior=A)
        elbo = compute_elbo(scene, templates, R, posterior, beta, config, prior=A)
        trace.append(elbo)
        betas.append(beta)
        delta = elbo - prev
        settled = np.isfinite(prev) and (
            abs(delta) < config.elbo_abs_tol
            or abs(delta) <= config.elbo_rel_tol * abs(prev)
        )
        if settled:
            if beta < config.beta_max:
                beta = min(beta * config.beta_mult, config.beta_max)
                prev = -np.inf
            else:
                converged = True
                break
        else:
            prev = elbo
    return R, posterior, float(trace[-1]), np.array(trace), np.array(betas), converged


def run_inference(
    scene: Scene,
    templates: TemplateSet,
    config: ModelConfig = ModelConfig(),
    variant: str = "ds",
    seed: int = 0,
) -> InferenceResult:
    """Annealed inference with random restarts and the minimum-two-parts constraint.

    Runs ``config.restarts`` seeds, re-initializing within a restart (up to
    ``config.sparsity_retries`` times) whenever an object converges onto fewer
    than two scene parts, and keeps the best ELBO.
    """
    if scene.n_points == 0:
        raise ValueError("empty scene")
    N = templates.total_parts
    M = scene.n_points
    if M > N:
        raise ValueError(f"scene has {M} points but the templates only provide {N} slots")
    best = None
    for restart in range(config.restarts):
        rng = np.random.default_rng([seed, restart])
        chosen = None
        for _attempt in range(config.sparsity_retries + 1):
            R0 = sinkhorn_knopp(
                rng.uniform(size=(N, N)), config.sinkhorn_tol, config.sinkhorn_max_iter
            )
            out = _run_single(scene, templates, config, variant, R0)
            ok = not _sparsity_violated(out[0], templates, M)
            chosen = (out, ok)
            if ok:
                break
        out, ok = chosen
        key = (ok, out[2])  # prefer constraint-satisfying solutions, then ELBO
        if best is None or key > best[0]:
            best = (key, out, restart)
    (_, out, restart) = best
    R, posterior, elbo, trace, betas, converged = out
    labels, present, poses, recon = decode_solution(R, scene, templates, posterior)
    return InferenceResult(
        R=R,
        posterior=posterior,
        elbo=elbo,
        labels=labels,
        present=present,
        poses=poses,
        reconstructions=recon,
        restart_index=restart,
        trace=trace,
        betas=betas,
        converged=converged,
        variant=variant,
        sparsity_ok=best[0][0],
    )


def decode_solution(R: np.ndarray, scene: Scene, templates: TemplateSet, posterior: PosePosterior):
    """Hard partition from responsibilities.

    Points are matched bijectively to (object, part) slots; objects explaining
    fewer than two observed points are reported absent and their points move to
    the best column of a present object.
    """
    M = scene.n_points
    cols = _columns(templates)
    col_k = np.array([k for k, _ in cols])
    perm = decode_permutation(R)
    labels = [int(col_k[perm[m]]) for m in range(M)]
    counts = np.bincount(labels, minlength=len(templates))
    present = [k for k in range(len(templates)) if counts[k] >= 2]
    if not present:
        present = [int(np.argmax(counts))]
    present_set = set(present)
    for m in range(M):
        if labels[m] not in present_set:
            allowed = np.flatnonzero(np.isin(col_k, present))
            labels[m] = int(col_k[allowed[np.argmax(R[m, allowed])]])
    poses = {}
    recon = {}
    for k in present:
        pose = Pose.from_vector(posterior.means[k][:4])
        poses[k] = pose
        recon[k] = transform_template(templates[k], pose)
    return tuple(labels), tuple(sorted(present_set)), poses, recon
