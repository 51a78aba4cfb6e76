"""Containers for joint tensor time series and estimation output."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import Optional, Sequence

import numpy as np

from motfm.errors import AlignmentError, DataError, RankError


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ThreadSeries:
    """One tensor time series, stored as an array of shape ``(T, p_1, ..., p_K)``."""

    data: np.ndarray
    name: str = ""
    mode_labels: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim < 2:
            raise DataError("a thread needs a time axis and at least one mode")
        if data.shape[0] < 2:
            raise DataError(f"thread {self.name!r} has T={data.shape[0]}; need T >= 2")
        if min(data.shape[1:]) < 1:
            raise DataError(f"thread {self.name!r} has an empty mode: {data.shape[1:]}")
        object.__setattr__(self, "data", data)

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape[1:]

    @property
    def order(self) -> int:
        return self.data.ndim - 1

    @property
    def size(self) -> int:
        """Number of entries per observation, ``p_m``."""
        return prod(self.dims)

    def flat(self) -> np.ndarray:
        """``(T, p_m)`` matrix whose row ``t`` is ``vec(X_t)``."""
        return self.data.reshape(self.T, -1, order="F")


@dataclass(frozen=True)
class Collection:
    """A joint collection of threads sharing a time axis."""

    threads: tuple[ThreadSeries, ...]
    name: str = "collection"

    def __init__(self, threads: Sequence, name: str = "collection"):
        threads = tuple(
            t if isinstance(t, ThreadSeries) else ThreadSeries(t, name=f"x{i + 1}")
            for i, t in enumerate(threads)
        )
        if not threads:
            raise DataError("a collection needs at least one thread")
        lengths = {t.T for t in threads}
        if len(lengths) > 1:
            detail = ", ".join(f"{t.name or i}: T={t.T}" for i, t in enumerate(threads))
            raise AlignmentError(f"threads disagree on T ({detail})")
        object.__setattr__(self, "threads", threads)
        object.__setattr__(self, "name", name)

    @classmethod
    def from_arrays(cls, arrays, names=None, name="collection"):
        names = names or [f"x{i + 1}" for i in range(len(arrays))]
        return cls([ThreadSeries(a, name=n) for a, n in zip(arrays, names)], name=name)

    def __len__(self):
        return len(self.threads)

    def __getitem__(self, m) -> ThreadSeries:
        return self.threads[m]

    @property
    def M(self) -> int:
        return len(self.threads)

    @property
    def T(self) -> int:
        return self.threads[0].T

    @property
    def dims(self) -> list[tuple[int, ...]]:
        return [t.dims for t in self.threads]

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.threads]


def validate(c: Collection) -> list[dict]:
    """Check a collection and summarise each thread.

    Raises :class:`AlignmentError` on unequal ``T`` and :class:`DataError`
    naming thread, time and flat offset of the first non-finite value.
    """
    if len({t.T for t in c.threads}) > 1:
        raise AlignmentError("threads disagree on T")
    summary = []
    for m, thread in enumerate(c.threads):
        flat = thread.flat()
        bad = np.argwhere(~np.isfinite(flat))
        if bad.size:
            t, offset = bad[0]
            raise DataError(
                f"non-finite value in thread {m} ({thread.name!r}) at t={t}, flat offset {offset}"
            )
        summary.append(
            {"thread": m, "name": thread.name, "order": thread.order, "dims": thread.dims, "T": thread.T}
        )
    return summary


def demean(c: Collection) -> Collection:
    """Subtract each entry's time average from every thread."""
    return Collection(
        [
            ThreadSeries(t.data - t.data.mean(axis=0), name=t.name, mode_labels=t.mode_labels)
            for t in c.threads
        ],
        name=c.name,
    )


@dataclass(frozen=True)
class RankProfile:
    """Per-thread, per-mode global ranks ``r`` and local ranks ``u``."""

    global_ranks: tuple[tuple[int, ...], ...]
    local_ranks: tuple[tuple[int, ...], ...]

    def __init__(self, global_ranks, local_ranks):
        g = tuple(tuple(int(r) for r in row) for row in global_ranks)
        loc = tuple(tuple(int(u) for u in row) for row in local_ranks)
        if len(g) != len(loc) or any(len(a) != len(b) for a, b in zip(g, loc)):
            raise RankError("global and local rank tables have different shapes")
        if any(v < 0 for row in g + loc for v in row):
            raise RankError("ranks must be non-negative")
        object.__setattr__(self, "global_ranks", g)
        object.__setattr__(self, "local_ranks", loc)

    @classmethod
    def uniform(cls, dims, r=1, u=1):
        return cls([[r] * len(d) for d in dims], [[u] * len(d) for d in dims])

    @property
    def totals(self):
        return tuple(
            tuple(r + u for r, u in zip(g, loc))
            for g, loc in zip(self.global_ranks, self.local_ranks)
        )

    def check(self, c: Collection) -> None:
        if len(self.global_ranks) != c.M:
            raise RankError(f"rank profile covers {len(self.global_ranks)} threads, collection has {c.M}")
        for m, (dims, g, loc) in enumerate(zip(c.dims, self.global_ranks, self.local_ranks)):
            if len(g) != len(dims):
                raise RankError(f"thread {m}: {len(g)} ranks for an order-{len(dims)} tensor")
            for k, (p, r, u) in enumerate(zip(dims, g, loc)):
                if r + u > p:
                    raise RankError(f"thread {m} mode {k}: r + u = {r + u} exceeds p = {p}")


@dataclass
class LoadingEstimates:
    """Estimated loadings, indexed ``[m][k]``.

    Global loadings satisfy ``A.T @ A == p I``, complements are orthonormal
    and local loadings satisfy ``B.T @ B == p I``.
    """

    global_loadings: list[list[np.ndarray]]
    global_complements: list[list[np.ndarray]]
    local_loadings: list[list[np.ndarray]]
    eigvals_global: list[list[np.ndarray]]
    eigvals_local: list[list[np.ndarray]]


@dataclass
class FitResult:
    loadings: LoadingEstimates
    global_factors: list[np.ndarray]
    local_factors: list[np.ndarray]
    global_components: Optional[list[np.ndarray]] = None
    local_components: Optional[list[np.ndarray]] = None
    residuals: Optional[list[np.ndarray]] = None
    ranks: Optional[RankProfile] = None
    info: dict = field(default_factory=dict)
