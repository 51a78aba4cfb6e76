"""Loading, factor and component estimators for multi-order tensor factor models."""

from __future__ import annotations

from dataclasses import dataclass
from math import prod, sqrt
from typing import Optional, Sequence

import numpy as np

from motfm.covariance import require_peers, sigma_hat_global
from motfm.errors import (
    CollinearityError,
    DataError,
    DimensionError,
    MotfmError,
    NumericalError,
    RankError,
    StageError,
)
from motfm.model import Collection, FitResult, LoadingEstimates, RankProfile
from motfm.subsample import draw_index_sets, sigma_hat_global_sub
from motfm.tensor import multi_mode_product

COND_LIMIT = 1e12


@dataclass(frozen=True)
class LocalCovariance:
    matrix: np.ndarray
    thread: int
    mode: int
    variant: str  # "projected" (K_m > 1) or "sandwiched" (K_m == 1)


def sign_fix(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so that each column's largest-magnitude entry is positive.

    Ties go to the lowest row index.
    """
    if vectors.shape[1] == 0:
        return vectors
    rows = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[rows, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def eig_desc(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues in descending order and matching sign-fixed eigenvectors."""
    matrix = np.asarray(matrix, dtype=float)
    try:
        w, v = np.linalg.eigh((matrix + matrix.T) / 2)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"symmetric eigensolver failed: {exc}") from exc
    return w[::-1].copy(), sign_fix(v[:, ::-1])


def _matrix_of(sigma) -> np.ndarray:
    return sigma.matrix if hasattr(sigma, "matrix") else np.asarray(sigma, dtype=float)


def global_loading(sigma, r: int):
    """Return ``(A, A_perp, eigvals)`` from a global covariance.

    ``A`` is ``sqrt(p)`` times the ``r`` leading eigenvectors, ``A_perp`` the
    remaining ``p - r`` orthonormal eigenvectors.
    """
    s = _matrix_of(sigma)
    p = s.shape[0]
    if not 0 < r < p:
        raise RankError(f"global rank {r} must satisfy 0 < r < p = {p}")
    w, v = eig_desc(s)
    return sqrt(p) * v[:, :r], v[:, r:].copy(), w


def local_loading(sigma, u: int):
    """Return ``(B, eigvals)``: ``sqrt(p)`` times the ``u`` leading eigenvectors."""
    s = _matrix_of(sigma)
    p = s.shape[0]
    if not 0 < u < p:
        raise RankError(f"local rank {u} must satisfy 0 < u < p = {p}")
    w, v = eig_desc(s)
    return sqrt(p) * v[:, :u], w


def local_cov_projected(c: Collection, m: int, k: int, complements: Sequence[np.ndarray]) -> LocalCovariance:
    """Local covariance for mode ``k`` of a thread of order at least two.

    The other modes are projected on the global complements before the
    second moment is taken, which removes the global component.
    """
    thread = c[m]
    if thread.order < 2:
        raise DataError("local_cov_projected needs an order >= 2 thread; use local_cov_vec")
    proj = []
    for j, comp in enumerate(complements):
        if j == k:
            proj.append(None)
            continue
        if comp.shape[1] == 0:
            raise DimensionError(f"global complement of mode {j} is empty")
        proj.append(comp.T)
    y = multi_mode_product(thread.data, proj, offset=1)
    mat = np.moveaxis(y, k + 1, 0).reshape(thread.dims[k], -1)
    s = mat @ mat.T / (thread.T * thread.size)
    return LocalCovariance((s + s.T) / 2, m, k, "projected")


def local_cov_vec(c: Collection, m: int, complement: np.ndarray) -> LocalCovariance:
    """Local covariance of a vector thread, sandwiched between complement projectors."""
    thread = c[m]
    if thread.order != 1:
        raise DataError("local_cov_vec needs a vector thread; use local_cov_projected")
    x = thread.flat()
    q = complement @ complement.T
    s = q @ (x.T @ x) @ q / (thread.T * thread.dims[0])
    return LocalCovariance((s + s.T) / 2, m, 0, "sandwiched")


def _guarded_solve(gram: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise CollinearityError(f"{what} is singular (condition number {cond:.3g})")
    return np.linalg.solve(gram, rhs)


def _is_empty(mats) -> bool:
    return any(b.shape[1] == 0 for b in mats)


def local_factor_maps(complements, local_loadings):
    """Per-mode maps ``L_k`` with ``vec(F_t) = kron_desc(L) vec(X_t)``.

    With ``C_k = A_perp_k^T B_k`` the least squares map factorises over modes
    as ``L_k = (C_k^T C_k)^{-1} C_k^T A_perp_k^T``.
    """
    grams, rhs = [], []
    for k, (comp, b) in enumerate(zip(complements, local_loadings)):
        ck = comp.T @ b
        # a loading lying inside the global span projects to (near) zero
        if np.linalg.norm(ck, 2) <= np.linalg.norm(b, 2) / sqrt(COND_LIMIT):
            raise CollinearityError(f"local loading of mode {k} vanishes on the global complement")
        grams.append(ck.T @ ck)
        rhs.append(ck.T @ comp.T)
    # the condition number of a Kronecker product is the product of the factors'
    cond = prod(np.linalg.cond(g) for g in grams)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise CollinearityError(f"projected local loadings are collinear (condition number {cond:.3g})")
    return [np.linalg.solve(g, r) for g, r in zip(grams, rhs)]


def estimate_local_factors(c: Collection, m: int, complements, local_loadings) -> np.ndarray:
    """Least squares local factors, shape ``(T, u_1, ..., u_K)``."""
    thread = c[m]
    u = tuple(b.shape[1] for b in local_loadings)
    if _is_empty(local_loadings):
        return np.zeros((thread.T,) + u)
    return multi_mode_product(thread.data, local_factor_maps(complements, local_loadings), offset=1)


def estimate_global_factors(c: Collection, m: int, global_loadings, local_loadings, local_factors) -> np.ndarray:
    """Global factors from the observations with the estimated local component removed."""
    thread = c[m]
    resid = thread.data
    if local_factors.size:
        resid = resid - multi_mode_product(local_factors, local_loadings, offset=1)
    maps = []
    for k, a in enumerate(global_loadings):
        maps.append(_guarded_solve(a.T @ a, a.T, f"global loading Gram matrix of mode {k}"))
    return multi_mode_product(resid, maps, offset=1)


def _stage(label, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except MotfmError as exc:
        raise StageError(label, exc) from exc


def fit(
    c: Collection,
    ranks: RankProfile,
    *,
    method: str = "gram",
    budget: Optional[int] = None,
    seed: int = 0,
    materialize: bool = True,
) -> FitResult:
    """Estimate loadings, factors and components for every thread.

    ``budget`` switches the global covariance to the subsampled estimator with
    that many peer entries per thread, drawn from ``seed``.
    """
    _stage("validation", require_peers, c)
    _stage("validation", ranks.check, c)
    n_threads = c.M
    A = [[] for _ in range(n_threads)]
    A_perp = [[] for _ in range(n_threads)]
    B = [[] for _ in range(n_threads)]
    ev_g = [[] for _ in range(n_threads)]
    ev_l = [[] for _ in range(n_threads)]
    covariances = {}
    for m in range(n_threads):
        sets = None
        if budget is not None:
            sets = _stage(f"thread {m}: index sets", draw_index_sets, c, m, budget, seed)
        for k in range(c[m].order):
            label = f"thread {m} mode {k}: global covariance"
            if sets is None:
                sigma = _stage(label, sigma_hat_global, c, m, k, method)
            else:
                sigma = _stage(label, sigma_hat_global_sub, c, m, k, sets, method)
            covariances[m, k] = sigma
            a, a_perp, w = _stage(
                f"thread {m} mode {k}: global loading", global_loading, sigma, ranks.global_ranks[m][k]
            )
            A[m].append(a)
            A_perp[m].append(a_perp)
            ev_g[m].append(w)

    for m in range(n_threads):
        thread = c[m]
        for k in range(thread.order):
            u = ranks.local_ranks[m][k]
            p = thread.dims[k]
            if u == 0:
                B[m].append(np.zeros((p, 0)))
                ev_l[m].append(np.zeros(0))
                continue
            label = f"thread {m} mode {k}: local covariance"
            if thread.order == 1:
                sigma_b = _stage(label, local_cov_vec, c, m, A_perp[m][0])
            else:
                sigma_b = _stage(label, local_cov_projected, c, m, k, A_perp[m])
            b, w = _stage(f"thread {m} mode {k}: local loading", local_loading, sigma_b, u)
            B[m].append(b)
            ev_l[m].append(w)

    loadings = LoadingEstimates(A, A_perp, B, ev_g, ev_l)
    G, F, XG, XF, R = [], [], [], [], []
    for m in range(n_threads):
        f = _stage(f"thread {m}: local factors", estimate_local_factors, c, m, A_perp[m], B[m])
        g = _stage(f"thread {m}: global factors", estimate_global_factors, c, m, A[m], B[m], f)
        F.append(f)
        G.append(g)
        if materialize:
            xg = multi_mode_product(g, A[m], offset=1)
            xf = multi_mode_product(f, B[m], offset=1) if f.size else np.zeros_like(xg)
            XG.append(xg)
            XF.append(xf)
            R.append(c[m].data - xg - xf)
    info = {"method": method, "budget": budget, "seed": seed, "covariances": covariances}
    return FitResult(
        loadings=loadings,
        global_factors=G,
        local_factors=F,
        global_components=XG if materialize else None,
        local_components=XF if materialize else None,
        residuals=R if materialize else None,
        ranks=ranks,
        info=info,
    )
