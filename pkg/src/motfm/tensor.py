"""Dense multilinear kernel.

Tensors are plain :class:`numpy.ndarray` objects. The canonical flat layout is
lexicographic with the first mode varying fastest (Fortran order), so
``vectorize(x) == x.ravel(order="F")`` and element ``x[i_0, ..., i_{K-1}]``
sits at flat offset ``sum_k i_k * prod_{l<k} I_l``. Mode indices are 0-based.

With that layout the descending Kronecker convention lines up with the
unfolding identity::

    unfold(g x_0 A_0 ... x_{K-1} A_{K-1}, k)
        == A_k @ unfold(g, k) @ kron_desc([A_j for j != k]).T

Every function returns a new array and leaves its inputs untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from math import prod
from typing import Sequence

import numpy as np

from motfm.errors import DimensionError, ModeIndexError, PartitionError


def _check_mode(x: np.ndarray, k: int) -> None:
    if not 0 <= k < x.ndim:
        raise ModeIndexError(f"mode {k} out of range for order-{x.ndim} tensor")


def unfold(x: np.ndarray, k: int) -> np.ndarray:
    """Mode-``k`` matricisation, shape ``(I_k, prod_{j != k} I_j)``.

    Columns enumerate the remaining modes lexicographically, smallest
    remaining mode fastest.
    """
    x = np.asarray(x)
    _check_mode(x, k)
    return np.moveaxis(x, k, 0).reshape(x.shape[k], -1, order="F")


def fold(m: np.ndarray, k: int, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    m = np.asarray(m)
    dims = tuple(int(d) for d in dims)
    if not 0 <= k < len(dims):
        raise ModeIndexError(f"mode {k} out of range for order-{len(dims)} tensor")
    rest = dims[:k] + dims[k + 1:]
    if m.ndim != 2 or m.shape != (dims[k], prod(rest)):
        raise DimensionError(
            f"matrix of shape {m.shape} cannot fold into mode {k} of {dims}"
        )
    return np.moveaxis(m.reshape((dims[k],) + rest, order="F"), 0, k)


def mode_product(x: np.ndarray, k: int, a: np.ndarray) -> np.ndarray:
    """Mode-``k`` product ``x x_k a``; mode ``k`` changes size to ``a.shape[0]``."""
    x = np.asarray(x)
    a = np.asarray(a)
    _check_mode(x, k)
    if a.ndim != 2 or a.shape[1] != x.shape[k]:
        raise DimensionError(
            f"matrix with shape {a.shape} cannot multiply mode {k} of size {x.shape[k]}"
        )
    return np.moveaxis(np.tensordot(a, x, axes=(1, k)), 0, k)


def multi_mode_product(x, mats, skip=None, offset=0):
    """Apply ``mats[j]`` along mode ``j + offset`` for every ``j`` (except ``skip``).

    ``offset`` lets callers keep leading batch axes (e.g. time) untouched.
    A ``None`` entry in ``mats`` leaves that mode alone.
    """
    out = np.asarray(x)
    for j, a in enumerate(mats):
        if j == skip or a is None:
            continue
        out = mode_product(out, j + offset, a)
    return out


def kron_desc(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Kronecker product of ``mats`` taken in descending index order.

    ``kron_desc([A_0, A_1, A_2]) == A_2 (x) A_1 (x) A_0``; the empty product is
    the 1x1 matrix ``[[1.0]]``.
    """
    mats = [np.atleast_2d(np.asarray(a, dtype=float)) for a in mats]
    if not mats:
        return np.ones((1, 1))
    return reduce(np.kron, reversed(mats))


def vectorize(x: np.ndarray) -> np.ndarray:
    return np.asarray(x).ravel(order="F")


def unvectorize(v: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    v = np.asarray(v)
    dims = tuple(int(d) for d in dims)
    if v.size != prod(dims):
        raise DimensionError(f"{v.size} values cannot fill a tensor of shape {dims}")
    return v.reshape(dims, order="F")


def _check_group(v: Sequence[int], order: int) -> tuple[int, ...]:
    v = tuple(int(i) for i in v)
    if not v:
        raise PartitionError("index group must be nonempty")
    if any(b <= a for a, b in zip(v, v[1:])):
        raise PartitionError(f"index group {v} is not strictly increasing")
    if v[0] < 0 or v[-1] >= order:
        raise PartitionError(f"index group {v} out of range for order {order}")
    return v


def reshape_op(x: np.ndarray, v: Sequence[int]) -> np.ndarray:
    """Merge the modes in ``v`` into a new trailing mode.

    The remaining modes keep their relative order. The merged index runs over
    ``v`` lexicographically with the smallest mode in ``v`` fastest.
    """
    x = np.asarray(x)
    v = _check_group(v, x.ndim)
    rest = [j for j in range(x.ndim) if j not in v]
    y = np.transpose(x, rest + list(v))
    shape = tuple(x.shape[j] for j in rest) + (prod(x.shape[j] for j in v),)
    return y.reshape(shape, order="F")


@dataclass(frozen=True)
class Channel:
    """Ordered partition ``(v_1, ..., v_L)`` of the modes of a tensor.

    Mode ``l`` of ``map_op(x, channel)`` merges the modes in ``groups[l]``.
    """

    groups: tuple[tuple[int, ...], ...]

    def __init__(self, groups):
        object.__setattr__(self, "groups", tuple(tuple(int(i) for i in g) for g in groups))
        if not self.groups:
            raise PartitionError("channel needs at least one group")
        for g in self.groups:
            _check_group(g, self.order)
        flat = sorted(i for g in self.groups for i in g)
        if flat != list(range(len(flat))):
            raise PartitionError(f"groups {self.groups} do not partition the modes")

    @property
    def order(self) -> int:
        """Order of the tensors this channel applies to."""
        return sum(len(g) for g in self.groups)

    def __len__(self):
        return len(self.groups)

    @classmethod
    def identity(cls, order: int) -> "Channel":
        return cls([(j,) for j in range(order)])

    @classmethod
    def parse(cls, text: str) -> "Channel":
        """Parse ``"0,1;2"`` style text into a channel."""
        try:
            groups = [[int(i) for i in part.split(",")] for part in text.split(";")]
        except ValueError as exc:
            raise PartitionError(f"cannot parse channel {text!r}") from exc
        return cls(groups)

    def __str__(self):
        return ";".join(",".join(str(i) for i in g) for g in self.groups)

    def mapped_dims(self, dims: Sequence[int]) -> tuple[int, ...]:
        if len(dims) != self.order:
            raise DimensionError(f"channel of order {self.order} applied to dims {tuple(dims)}")
        return tuple(prod(dims[j] for j in g) for g in self.groups)


def _as_channel(channel) -> Channel:
    return channel if isinstance(channel, Channel) else Channel(channel)


def map_op(x: np.ndarray, channel) -> np.ndarray:
    """Tensor map: an order-``L`` tensor whose mode ``l`` merges ``channel.groups[l]``.

    The modes are first transposed so that earlier groups hold the larger
    mode labels; after that the merge is a plain loop of :func:`reshape_op`
    calls, one per group.
    """
    x = np.asarray(x)
    channel = _as_channel(channel)
    if channel.order != x.ndim:
        raise PartitionError(f"channel of order {channel.order} applied to order-{x.ndim} tensor")
    groups = channel.groups
    y = np.transpose(x, [j for g in reversed(groups) for j in g])
    # after the transpose group l occupies a contiguous run of leading modes
    # that later reshape calls never disturb
    start = sum(len(g) for g in groups)
    for g in groups:
        start -= len(g)
        y = reshape_op(y, range(start, start + len(g)))
    return y


def inverse_map(y: np.ndarray, channel, dims: Sequence[int]) -> np.ndarray:
    """Recover ``x`` from ``map_op(x, channel)`` given the original ``dims``."""
    y = np.asarray(y)
    channel = _as_channel(channel)
    dims = tuple(int(d) for d in dims)
    if y.shape != channel.mapped_dims(dims):
        raise DimensionError(
            f"tensor of shape {y.shape} is not a map of {dims} under channel {channel}"
        )
    order = [j for g in channel.groups for j in g]
    z = y.reshape(tuple(dims[j] for j in order), order="F")
    return np.transpose(z, np.argsort(order))
