"""Global covariance from a random subset of peer multi-indices."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from motfm.covariance import (
    GlobalCovariance,
    require_peers,
    sigma_from_peers,
    unfold_series,
)
from motfm.errors import BudgetError, DataError
from motfm.model import Collection

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IndexSets:
    """Selected peer entries for thread ``thread``.

    ``offsets[n]`` holds sorted flat (first-mode-fastest) offsets into
    ``vec(X_t^(n))`` and is empty for ``n == thread``.
    """

    thread: int
    dims: tuple[tuple[int, ...], ...]
    offsets: tuple[np.ndarray, ...]
    seed: int

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(o) for o in self.offsets)

    @property
    def total(self) -> int:
        return sum(self.sizes)

    def multi_indices(self, n: int) -> np.ndarray:
        """``(|S_n|, K_n)`` array of 0-based multi-indices."""
        if not len(self.offsets[n]):
            return np.zeros((0, len(self.dims[n])), dtype=int)
        return np.stack(np.unravel_index(self.offsets[n], self.dims[n], order="F"), axis=1)

    def check(self, c: Collection) -> None:
        if tuple(c.dims) != self.dims:
            raise DataError("index sets were drawn for a collection with different dims")
        for n, (off, size) in enumerate(zip(self.offsets, (t.size for t in c.threads))):
            if n == self.thread:
                continue
            if len(off) < 1:
                raise BudgetError(f"peer {n} has an empty index set")
            if len(np.unique(off)) != len(off) or off.min() < 0 or off.max() >= size:
                raise DataError(f"index set for peer {n} has repeated or invalid offsets")


def split_budget(budget: int, sizes) -> list[int]:
    """Largest-remainder split of ``budget`` proportional to ``sizes``, each share in ``[1, size]``."""
    sizes = [int(s) for s in sizes]
    quotas = [budget * s / sum(sizes) for s in sizes]
    shares = [int(q) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda j: (-(quotas[j] - shares[j]), j))
    for j in order[: budget - sum(shares)]:
        shares[j] += 1
    # enforce the floor of one entry per peer by borrowing from the largest shares
    for j in range(len(shares)):
        while shares[j] < 1:
            donor = max(range(len(shares)), key=lambda d: (shares[d], -d))
            shares[donor] -= 1
            shares[j] += 1
    return shares


def draw_index_sets(c: Collection, m: int, budget: int, seed: int = 0) -> IndexSets:
    """Draw peer index sets with ``sum_n |S_n| == budget``.

    Each peer gets a substream spawned from ``(seed, m, n)`` so a draw never
    depends on the other peers or on worker scheduling.
    """
    require_peers(c)
    peer_ids = [n for n in range(c.M) if n != m]
    sizes = [c[n].size for n in peer_ids]
    if budget < len(peer_ids):
        raise BudgetError(f"budget {budget} is smaller than the number of peers {len(peer_ids)}")
    if budget > sum(sizes):
        log.info("budget %d exceeds %d peer entries; using every entry", budget, sum(sizes))
        budget = sum(sizes)
    shares = split_budget(budget, sizes)
    offsets = [np.zeros(0, dtype=np.int64) for _ in range(c.M)]
    for n, size, share in zip(peer_ids, sizes, shares):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(m, n))))
        offsets[n] = np.sort(rng.choice(size, size=share, replace=False)).astype(np.int64)
    return IndexSets(thread=m, dims=tuple(c.dims), offsets=tuple(offsets), seed=seed)


def full_index_sets(c: Collection, m: int) -> IndexSets:
    offsets = [
        np.zeros(0, dtype=np.int64) if n == m else np.arange(c[n].size, dtype=np.int64)
        for n in range(c.M)
    ]
    return IndexSets(thread=m, dims=tuple(c.dims), offsets=tuple(offsets), seed=-1)


def sigma_hat_global_sub(
    c: Collection, m: int, k: int, sets: IndexSets, method: str = "gram"
) -> GlobalCovariance:
    """Global covariance restricted to the peer entries in ``sets``."""
    require_peers(c)
    if sets.thread != m:
        raise DataError(f"index sets were drawn for thread {sets.thread}, not {m}")
    sets.check(c)
    peers = [c[n].flat()[:, sets.offsets[n]] for n in range(c.M) if n != m]
    z = unfold_series(c[m].data, k)
    return GlobalCovariance(
        matrix=sigma_from_peers(z, peers, method),
        thread=m,
        mode=k,
        thread_size=c[m].size,
        peer_total=sets.total,
        T=c.T,
        method=method,
        index_sets=sets,
    )
