"""Hot numeric kernels: Sinkhorn balancing and the point-scene routing loop.

Each kernel has a numba ``@njit`` build and a pure-numpy fallback.  The numpy
path is selected by setting the environment variable ``GENCAP_NO_NUMBA`` (any
non-empty value) before import; ``benchmarks/kernel_bench.py`` times the two
against each other.  Both builds are deterministic and must agree to float
precision (see tests/test_kernels.py).
"""

from __future__ import annotations

import os

import numpy as np

FLOOR = 1e-300  # keeps log/exp work away from -inf without disturbing structural zeros

_numba_disabled = bool(os.environ.get("GENCAP_NO_NUMBA"))

try:
    if _numba_disabled:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # fallback decorator: leave the function alone
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


def numba_enabled() -> bool:
    return HAVE_NUMBA


# ---------------------------------------------------------------------------
# Sinkhorn-Knopp balancing


def sinkhorn_core_numpy(mat: np.ndarray, tol: float, max_iter: int):
    """Alternate row/column normalization until row and column sums are 1.

    Returns (balanced matrix, iterations, final residual).  Assumes a square
    non-negative input with no all-zero row or column.
    """
    m = mat.astype(float).copy()
    resid = _residual_numpy(m)
    it = 0
    while resid > tol and it < max_iter:
        m /= m.sum(axis=1, keepdims=True)
        m /= m.sum(axis=0, keepdims=True)
        resid = _residual_numpy(m)
        it += 1
    return m, it, resid


def _residual_numpy(m: np.ndarray) -> float:
    r = np.abs(m.sum(axis=1) - 1.0).max()
    c = np.abs(m.sum(axis=0) - 1.0).max()
    return float(max(r, c))


@njit(cache=True)
def sinkhorn_core_numba(mat, tol, max_iter):
    n = mat.shape[0]
    m = mat.copy()
    it = 0
    resid = _residual_numba(m, n)
    while resid > tol and it < max_iter:
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += m[i, j]
            for j in range(n):
                m[i, j] /= s
        for j in range(n):
            s = 0.0
            for i in range(n):
                s += m[i, j]
            for i in range(n):
                m[i, j] /= s
        resid = _residual_numba(m, n)
        it += 1
    return m, it, resid


@njit(cache=True)
def _residual_numba(m, n):
    worst = 0.0
    for i in range(n):
        s = 0.0
        for j in range(n):
            s += m[i, j]
        d = abs(s - 1.0)
        if d > worst:
            worst = d
    for j in range(n):
        s = 0.0
        for i in range(n):
            s += m[i, j]
        d = abs(s - 1.0)
        if d > worst:
            worst = d
    return worst


def sinkhorn_core(mat, tol, max_iter):
    if HAVE_NUMBA:
        return sinkhorn_core_numba(np.ascontiguousarray(mat, dtype=np.float64), tol, max_iter)
    return sinkhorn_core_numpy(mat, tol, max_iter)


# ---------------------------------------------------------------------------
# Point-scene variational routing loop
#
# Inputs shared by both builds:
#   X        (M, 2)   observed points
#   Fs       (N, 2, 4) feature matrix per assignment column
#   FtF      (N, 4, 4) cached F^T F per column
#   col_k    (N,)     template index per column
#   log_a    (N, N)   log prior match matrix (rows: points then dummies)
#   R0       (N, N)   initial doubly-stochastic responsibilities
# Returns: R, mus (K,4), lams (K,4,4), elbo, trace (iters,), betas (iters,),
#          converged flag, iteration count.


def vi_run_point_numpy(
    X,
    Fs,
    FtF,
    col_k,
    n_templates,
    lam,
    d0_diag,
    mu0,
    log_a,
    R0,
    beta_init,
    beta_max,
    beta_mult,
    elbo_rel_tol,
    elbo_abs_tol,
    max_iter,
    sinkhorn_tol,
    sinkhorn_max_iter,
    ds_variant,
):
    M = X.shape[0]
    N = Fs.shape[0]
    K = n_templates
    d0_inv = 1.0 / d0_diag
    prior_rhs = d0_inv * mu0
    R = R0.copy()
    a = np.exp(log_a)

    beta = beta_init
    prev_elbo = -np.inf
    trace = np.zeros(max_iter)
    betas = np.zeros(max_iter)
    converged = False
    mus = np.zeros((K, 4))
    lams = np.zeros((K, 4, 4))
    it = 0
    while it < max_iter:
        # q(Y): weighted normal equations per template
        w = R[:M].sum(axis=0)  # (N,) column mass from observed rows
        xw = R[:M].T @ X  # (N, 2)
        for k in range(K):
            cols = np.where(col_k == k)[0]
            lam_k = np.diag(d0_inv) + beta * lam * np.einsum("j,jab->ab", w[cols], FtF[cols])
            rhs = prior_rhs + beta * lam * np.einsum("jba,jb->a", Fs[cols], xw[cols])
            mus[k] = np.linalg.solve(lam_k, rhs)
            lams[k] = lam_k

        # q(Z): unnormalized log responsibilities for observed rows
        lam_inv = np.linalg.inv(lams)  # (K,4,4)
        pred = np.einsum("jab,jb->ja", Fs, mus[col_k])  # (N, 2)
        tr_corr = lam * np.einsum("jab,jba->j", FtF, lam_inv[col_k])  # (N,)
        sq = ((X[:, None, :] - pred[None, :, :]) ** 2).sum(axis=2)  # (M, N)
        log_rho = (
            log_a[:M]
            + np.log(beta * lam)
            - np.log(2 * np.pi)
            - 0.5 * beta * (lam * sq + tr_corr[None, :])
        )
        rho = np.empty((N, N))
        rho[:M] = np.exp(log_rho - log_rho.max(axis=1, keepdims=True))
        rho[M:] = a[M:]
        rho = np.maximum(rho, FLOOR)
        if ds_variant:
            R, _, _ = sinkhorn_core_numpy(rho, sinkhorn_tol, sinkhorn_max_iter)
        else:
            R = rho / rho.sum(axis=1, keepdims=True)

        elbo = _elbo_point_numpy(X, R, log_a, sq, tr_corr, mus, lams, lam, beta, d0_inv, mu0)
        trace[it] = elbo
        betas[it] = beta
        it += 1
        delta = elbo - prev_elbo
        settled = prev_elbo > -np.inf and (
            abs(delta) < elbo_abs_tol or abs(delta) <= elbo_rel_tol * abs(prev_elbo)
        )
        if settled:
            if beta < beta_max:
                beta = min(beta * beta_mult, beta_max)
                prev_elbo = -np.inf
            else:
                converged = True
                break
        else:
            prev_elbo = elbo
    return R, mus, lams, trace[it - 1], trace[:it], betas[:it], converged, it


def _elbo_point_numpy(X, R, log_a, sq, tr_corr, mus, lams, lam, beta, d0_inv, mu0):
    M = X.shape[0]
    # E_q[log p(X|Y,Z)] over observed rows
    per = np.log(2 * np.pi) - np.log(beta * lam) + 0.5 * beta * (lam * sq + tr_corr[None, :])
    e_term = -(R[:M] * per).sum()
    # KL(q(Y) || p(Y)) with diagonal prior
    kl_y = 0.0
    for k in range(len(mus)):
        lam_inv_k = np.linalg.inv(lams[k])
        diff = mus[k] - mu0
        _, logdet = np.linalg.slogdet(lams[k])
        kl_y += 0.5 * (
            np.trace(np.diag(d0_inv) @ lam_inv_k)
            - 4.0
            + diff @ (d0_inv * diff)
            - np.sum(np.log(d0_inv))
            + logdet
        )
    # KL(q(Z) || p(Z)) over all rows
    Rs = np.maximum(R, FLOOR)
    kl_z = float((R * (np.log(Rs) - log_a)).sum())
    return float(e_term - kl_y - kl_z)


@njit(cache=True)
def vi_run_point_numba(
    X,
    Fs,
    FtF,
    col_k,
    n_templates,
    lam,
    d0_diag,
    mu0,
    log_a,
    R0,
    beta_init,
    beta_max,
    beta_mult,
    elbo_rel_tol,
    elbo_abs_tol,
    max_iter,
    sinkhorn_tol,
    sinkhorn_max_iter,
    ds_variant,
):
    M = X.shape[0]
    N = Fs.shape[0]
    K = n_templates
    d0_inv = 1.0 / d0_diag
    prior_rhs = d0_inv * mu0
    R = R0.copy()
    a = np.exp(log_a)

    beta = beta_init
    prev_elbo = -np.inf
    trace = np.zeros(max_iter)
    betas = np.zeros(max_iter)
    converged = False
    mus = np.zeros((K, 4))
    lams = np.zeros((K, 4, 4))
    lam_inv = np.zeros((K, 4, 4))
    pred = np.zeros((N, 2))
    tr_corr = np.zeros(N)
    sq = np.zeros((M, N))
    rho = np.zeros((N, N))
    it = 0
    while it < max_iter:
        # q(Y)
        for k in range(K):
            lam_k = np.zeros((4, 4))
            for d in range(4):
                lam_k[d, d] = d0_inv[d]
            rhs = prior_rhs.copy()
            for j in range(N):
                if col_k[j] != k:
                    continue
                wj = 0.0
                xw0 = 0.0
                xw1 = 0.0
                for m in range(M):
                    wj += R[m, j]
                    xw0 += R[m, j] * X[m, 0]
                    xw1 += R[m, j] * X[m, 1]
                for aa in range(4):
                    for bb in range(4):
                        lam_k[aa, bb] += beta * lam * wj * FtF[j, aa, bb]
                    rhs[aa] += beta * lam * (Fs[j, 0, aa] * xw0 + Fs[j, 1, aa] * xw1)
            mus[k] = np.linalg.solve(lam_k, rhs)
            lams[k] = lam_k
            lam_inv[k] = np.linalg.inv(lam_k)

        # q(Z)
        for j in range(N):
            k = col_k[j]
            for c in range(2):
                pred[j, c] = 0.0
                for d in range(4):
                    pred[j, c] += Fs[j, c, d] * mus[k, d]
            t = 0.0
            for aa in range(4):
                for bb in range(4):
                    t += FtF[j, aa, bb] * lam_inv[k, bb, aa]
            tr_corr[j] = lam * t
        log_norm = np.log(beta * lam) - np.log(2 * np.pi)
        for m in range(M):
            row_max = -np.inf
            for j in range(N):
                dx = X[m, 0] - pred[j, 0]
                dy = X[m, 1] - pred[j, 1]
                sq[m, j] = dx * dx + dy * dy
                v = log_a[m, j] + log_norm - 0.5 * beta * (lam * sq[m, j] + tr_corr[j])
                rho[m, j] = v
                if v > row_max:
                    row_max = v
            for j in range(N):
                e = np.exp(rho[m, j] - row_max)
                rho[m, j] = e if e > FLOOR else FLOOR
        for m in range(M, N):
            for j in range(N):
                v = a[m, j]
                rho[m, j] = v if v > FLOOR else FLOOR
        if ds_variant:
            R, _, _ = sinkhorn_core_numba(rho, sinkhorn_tol, sinkhorn_max_iter)
        else:
            R = rho.copy()
            for m in range(N):
                s = 0.0
                for j in range(N):
                    s += R[m, j]
                for j in range(N):
                    R[m, j] /= s

        # ELBO
        e_term = 0.0
        for m in range(M):
            for j in range(N):
                per = (
                    np.log(2 * np.pi)
                    - np.log(beta * lam)
                    + 0.5 * beta * (lam * sq[m, j] + tr_corr[j])
                )
                e_term -= R[m, j] * per
        kl_y = 0.0
        for k in range(K):
            tr = 0.0
            for d in range(4):
                tr += d0_inv[d] * lam_inv[k, d, d]
            quad = 0.0
            logdet_prior = 0.0
            for d in range(4):
                diff = mus[k, d] - mu0[d]
                quad += diff * d0_inv[d] * diff
                logdet_prior -= np.log(d0_inv[d])
            sign, logdet = np.linalg.slogdet(lams[k])
            kl_y += 0.5 * (tr - 4.0 + quad + logdet_prior + logdet)
        kl_z = 0.0
        for m in range(N):
            for j in range(N):
                r = R[m, j]
                if r > 0.0:
                    rs = r if r > FLOOR else FLOOR
                    kl_z += r * (np.log(rs) - log_a[m, j])
        elbo = e_term - kl_y - kl_z
        trace[it] = elbo
        betas[it] = beta
        it += 1
        delta = elbo - prev_elbo
        settled = prev_elbo > -np.inf and (
            abs(delta) < elbo_abs_tol or abs(delta) <= elbo_rel_tol * abs(prev_elbo)
        )
        if settled:
            if beta < beta_max:
                beta = beta * beta_mult
                if beta > beta_max:
                    beta = beta_max
                prev_elbo = -np.inf
            else:
                converged = True
                break
        else:
            prev_elbo = elbo
    return R, mus, lams, trace[it - 1], trace[:it], betas[:it], converged, it


def vi_run_point(*args):
    if HAVE_NUMBA:
        return vi_run_point_numba(*args)
    return vi_run_point_numpy(*args)
