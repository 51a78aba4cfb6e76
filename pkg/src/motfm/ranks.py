"""Factor number selection.

Totals ``s = r + u`` per mode come from an eigenvalue-ratio estimator on the
mode-wise sample covariance; global counts ``r`` from a perturbed ratio on
the cross-thread covariance; local counts by differencing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from math import sqrt
from typing import Optional

import numpy as np

from motfm.covariance import GlobalCovariance, sigma_hat_global, unfold_series
from motfm.errors import RankError
from motfm.model import Collection, RankProfile
from motfm.subsample import draw_index_sets, sigma_hat_global_sub

DEFAULT_C_XI = 0.2


class OverestimatedRankWarning(UserWarning):
    """Raised when the global count exceeds the total count for a mode."""


@dataclass(frozen=True)
class RatioDiagnostics:
    eigvals: np.ndarray
    ratios: np.ndarray
    xi: float
    argmin: int  # selected count, 1-based


def eigen_ratio(eigvals, r_max: int, xi: float = 0.0) -> RatioDiagnostics:
    """Minimise ``(lam_{i+1} + xi) / (lam_i + xi)`` over ``1 <= i <= r_max``.

    Ties resolve to the smallest ``i``. A ratio with a zero denominator is
    read as 1 (no drop).
    """
    lam = np.asarray(eigvals, dtype=float)
    if r_max < 1:
        raise RankError(f"r_max must be at least 1, got {r_max}")
    if lam.size < r_max + 1:
        raise RankError(f"need {r_max + 1} eigenvalues for r_max={r_max}, have {lam.size}")
    num = lam[1 : r_max + 1] + xi
    den = lam[:r_max] + xi
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(den != 0, num / den, 1.0)
    return RatioDiagnostics(lam, ratios, float(xi), int(np.argmin(ratios)) + 1)


def default_r_max(p: int) -> int:
    return p // 2


def mode_covariance(c: Collection, m: int, k: int) -> np.ndarray:
    """``(1/(T p_{-k})) sum_t unfold(X_t, k) unfold(X_t, k)^T``."""
    z = unfold_series(c[m].data, k)
    T, p_k, q = z.shape
    mat = z.transpose(1, 0, 2).reshape(p_k, T * q)
    return mat @ mat.T / (T * q)


def estimate_total_ranks(c: Collection, m: int, k: int, r_max: Optional[int] = None):
    """Total factor count ``s = r + u`` of mode ``k``; returns ``(s_hat, diagnostics)``."""
    p = c[m].dims[k]
    if p < 2:
        raise RankError(f"thread {m} mode {k} has p={p}; need p >= 2")
    r_max = default_r_max(p) if r_max is None else r_max
    if r_max > p // 2:
        raise RankError(f"r_max={r_max} exceeds floor(p/2)={p // 2}")
    w = np.linalg.eigvalsh(mode_covariance(c, m, k))[::-1]
    diag = eigen_ratio(w, r_max)
    return diag.argmin, diag


def xi_for(sigma: GlobalCovariance, c_xi: float = DEFAULT_C_XI) -> float:
    """Perturbation ``c_xi * p_m * (peer entries) / sqrt(T)``."""
    return c_xi * sigma.thread_size * sigma.peer_total / sqrt(sigma.T)


def estimate_global_ranks(
    sigma: GlobalCovariance,
    r_max: Optional[int] = None,
    c_xi: float = DEFAULT_C_XI,
    xi: Optional[float] = None,
):
    """Perturbed eigenvalue-ratio count of global factors; returns ``(r_hat, diagnostics)``.

    ``xi`` overrides the default perturbation; ``xi=0`` gives the plain ratio.
    """
    p = sigma.matrix.shape[0]
    r_max = default_r_max(p) if r_max is None else r_max
    xi = xi_for(sigma, c_xi) if xi is None else xi
    w = np.linalg.eigvalsh(sigma.matrix)[::-1]
    diag = eigen_ratio(w, r_max, xi)
    return diag.argmin, diag


def estimate_local_ranks(s_hat: int, r_hat: int) -> tuple[int, bool]:
    """``max(s - r, 0)`` plus a flag set when the global count exceeded the total."""
    over = r_hat > s_hat
    if over:
        warnings.warn(
            f"global count {r_hat} exceeds total count {s_hat}; local count clamped to 0",
            OverestimatedRankWarning,
            stacklevel=2,
        )
    return max(s_hat - r_hat, 0), over


@dataclass
class RankSelection:
    profile: RankProfile
    totals: list[list[int]]
    global_diagnostics: list[list[RatioDiagnostics]]
    total_diagnostics: list[list[Optional[RatioDiagnostics]]]
    clamped: list[list[bool]]


def select_ranks(
    c: Collection,
    *,
    budget: Optional[int] = None,
    seed: int = 0,
    c_xi: float = DEFAULT_C_XI,
    method: str = "gram",
    totals=None,
) -> RankSelection:
    """Totals, then global counts, then local counts, for every thread and mode.

    ``totals`` may supply externally estimated ``s`` values per thread/mode.
    """
    g_rows, l_rows, s_rows, gd_rows, sd_rows, clamp_rows = [], [], [], [], [], []
    for m in range(c.M):
        sets = draw_index_sets(c, m, budget, seed) if budget is not None else None
        g_row, l_row, s_row, gd_row, sd_row, clamp_row = [], [], [], [], [], []
        for k in range(c[m].order):
            if sets is None:
                sigma = sigma_hat_global(c, m, k, method)
            else:
                sigma = sigma_hat_global_sub(c, m, k, sets, method)
            r_hat, gdiag = estimate_global_ranks(sigma, c_xi=c_xi)
            if totals is not None:
                s_hat, sdiag = int(totals[m][k]), None
            else:
                s_hat, sdiag = estimate_total_ranks(c, m, k)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", OverestimatedRankWarning)
                u_hat, clamped = estimate_local_ranks(s_hat, r_hat)
            g_row.append(r_hat)
            l_row.append(u_hat)
            s_row.append(s_hat)
            gd_row.append(gdiag)
            sd_row.append(sdiag)
            clamp_row.append(clamped)
        g_rows.append(g_row)
        l_rows.append(l_row)
        s_rows.append(s_row)
        gd_rows.append(gd_row)
        sd_rows.append(sd_row)
        clamp_rows.append(clamp_row)
    return RankSelection(RankProfile(g_rows, l_rows), s_rows, gd_rows, sd_rows, clamp_rows)
