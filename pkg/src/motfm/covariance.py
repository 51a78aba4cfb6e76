"""Cross-thread second moments used to estimate global loadings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from motfm.errors import ConfigurationError, ModeIndexError, ThreadError
from motfm.model import Collection

METHODS = ("gram", "naive")


def unfold_series(data: np.ndarray, k: int) -> np.ndarray:
    """Stack of mode-``k`` unfoldings of a ``(T, *dims)`` series, shape ``(T, p_k, p_{-k})``."""
    data = np.asarray(data)
    if not 0 <= k < data.ndim - 1:
        raise ModeIndexError(f"mode {k} out of range for order-{data.ndim - 1} thread")
    T, p_k = data.shape[0], data.shape[k + 1]
    return np.moveaxis(data, k + 1, 1).reshape(T, p_k, -1, order="F")


@dataclass(frozen=True)
class GlobalCovariance:
    """Symmetric ``p_{m,k} x p_{m,k}`` matrix whose leading eigenvectors span the global loading.

    ``peer_total`` is the number of peer entries that entered the sum
    (``sum_n p_n`` for the full estimator, ``sum_n |S_n|`` when subsampled);
    it sets the scale of the eigenvalue-ratio perturbation.
    """

    matrix: np.ndarray
    thread: int
    mode: int
    thread_size: int
    peer_total: int
    T: int
    method: str = "gram"
    index_sets: Optional[object] = None

    @property
    def subsampled(self) -> bool:
        return self.index_sets is not None


def omega_from_arrays(x_m: np.ndarray, x_n: np.ndarray, k: int, i: Sequence[int]) -> np.ndarray:
    """``(1/T) sum_t unfold(X_t^(m), k) * X_t^(n)[i]`` for raw ``(T, *dims)`` arrays."""
    x_m = np.asarray(x_m, dtype=float)
    x_n = np.asarray(x_n, dtype=float)
    weights = x_n[(slice(None),) + tuple(i)]
    return np.tensordot(weights, unfold_series(x_m, k), axes=(0, 0)) / x_m.shape[0]


def omega_hat(c: Collection, m: int, k: int, n: int, i: Sequence[int]) -> np.ndarray:
    """Filtered unfolding of thread ``m`` weighted by entry ``i`` of thread ``n``."""
    if n == m:
        raise ThreadError("omega_hat needs two distinct threads")
    i = tuple(int(v) for v in i)
    if len(i) != c[n].order or any(not 0 <= v < p for v, p in zip(i, c[n].dims)):
        raise ModeIndexError(f"multi-index {i} invalid for thread {n} with dims {c[n].dims}")
    return omega_from_arrays(c[m].data, c[n].data, k, i)


def sigma_naive(z: np.ndarray, peers: Sequence[np.ndarray]) -> np.ndarray:
    """Sum of ``Omega_i Omega_i^T`` over every peer column, one column at a time.

    ``z`` is the ``(T, p_k, q)`` unfolding stack of the target thread and each
    entry of ``peers`` a ``(T, s_n)`` matrix of peer entries over time.
    """
    T, p_k, _ = z.shape
    out = np.zeros((p_k, p_k))
    for y in peers:
        for col in y.T:
            om = np.tensordot(col, z, axes=(0, 0)) / T
            out += om @ om.T
    return out


def sigma_gram(z: np.ndarray, peers: Sequence[np.ndarray]) -> np.ndarray:
    """Same matrix as :func:`sigma_naive` via the ``T x T`` Gram matrix of the peers.

    Costs ``O(p_m T^2)`` instead of ``O(p_m T sum_n s_n)``.
    """
    T, p_k, q = z.shape
    gram = np.zeros((T, T))
    for y in peers:
        gram += y @ y.T
    zr = np.ascontiguousarray(z.transpose(1, 2, 0))
    weighted = (zr @ gram).reshape(p_k, q * T)
    return weighted @ zr.reshape(p_k, q * T).T / T**2


def sigma_from_peers(z, peers, method="gram"):
    if method == "gram":
        s = sigma_gram(z, peers)
    elif method == "naive":
        s = sigma_naive(z, peers)
    else:
        raise ConfigurationError(f"unknown covariance method {method!r}; use one of {METHODS}")
    return (s + s.T) / 2


def require_peers(c: Collection) -> None:
    if c.M < 2:
        raise ThreadError("global estimation requires at least two threads")


def sigma_hat_global(c: Collection, m: int, k: int, method: str = "gram") -> GlobalCovariance:
    """Full cross-thread covariance for thread ``m``, mode ``k``."""
    require_peers(c)
    peers = [c[n].flat() for n in range(c.M) if n != m]
    z = unfold_series(c[m].data, k)
    return GlobalCovariance(
        matrix=sigma_from_peers(z, peers, method),
        thread=m,
        mode=k,
        thread_size=c[m].size,
        peer_total=sum(p.shape[1] for p in peers),
        T=c.T,
        method=method,
    )
