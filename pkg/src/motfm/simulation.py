"""Data-generating processes, accuracy metrics and the Monte Carlo runner."""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from math import sqrt
from typing import Optional, Sequence

import numpy as np
from scipy.signal import lfilter
from threadpoolctl import threadpool_limits

from motfm.errors import (
    ConfigurationError,
    RankError,
    StationarityError,
    UndefinedMetricError,
)
from motfm.estimation import fit
from motfm.model import Collection, RankProfile, ThreadSeries
from motfm.ranks import estimate_global_ranks
from motfm.covariance import sigma_hat_global
from motfm.subsample import draw_index_sets, sigma_hat_global_sub
from motfm.tensor import Channel, map_op, multi_mode_product

log = logging.getLogger(__name__)

T6_BURN_IN = 100
INNOVATIONS = ("gaussian", "t6")
STRENGTHS = ("strong", "weak")


def _rng(seed, *key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def ar1_paths(rng, T, shape=(), coeff=0.5, innovation="gaussian", standardize=False):
    """Independent AR(1) paths, array of shape ``(T, *shape)``.

    Gaussian paths start from the stationary law. Student-t paths (6 degrees
    of freedom) run a burn-in of ``T6_BURN_IN`` steps instead; their
    innovations keep variance 1.5 unless ``standardize`` is set.
    """
    if not abs(coeff) < 1:
        raise StationarityError(f"AR coefficient {coeff} is not stationary")
    shape = tuple(shape)
    if innovation == "gaussian":
        eps = rng.standard_normal((T,) + shape)
        eps[0] /= sqrt(1 - coeff**2)
        burn = 0
    elif innovation == "t6":
        burn = T6_BURN_IN
        eps = rng.standard_t(6, size=(T + burn,) + shape)
        if standardize:
            eps /= sqrt(1.5)
    else:
        raise ConfigurationError(f"unknown innovation {innovation!r}; use one of {INNOVATIONS}")
    if coeff == 0:
        return eps[burn:]
    return lfilter([1.0], [1.0, -coeff], eps, axis=0)[burn:]


def ar1_path(T, coeff=0.5, innovation="gaussian", seed=0, standardize=False):
    return ar1_paths(_rng(seed), T, (), coeff, innovation, standardize)


def gen_loadings(p, r, u, strength="strong", rng=None):
    """Global loading ``A`` (``p x r``) and local loading ``B`` (``p x u``) with ``A^T B = 0``."""
    if r + u > p:
        raise RankError(f"r + u = {r + u} exceeds p = {p}")
    if strength not in STRENGTHS:
        raise ConfigurationError(f"unknown factor strength {strength!r}")
    rng = rng if rng is not None else _rng(0)
    a = rng.standard_normal((p, r))
    if strength == "weak":
        a *= p**-0.1
    q, _ = np.linalg.qr(a, mode="complete")
    scale = p**0.5 if strength == "strong" else p**0.4
    return a, scale * q[:, r : r + u]


def consecutive_channel(master_order: int, order: int) -> Channel:
    """Group the leading master modes together so that ``order`` groups remain."""
    if not 1 <= order <= master_order:
        raise ConfigurationError(f"cannot map an order-{master_order} core to order {order}")
    head = master_order - order + 1
    return Channel([tuple(range(head))] + [(j,) for j in range(head, master_order)])


@dataclass(frozen=True)
class DgpSpec:
    dims: tuple[tuple[int, ...], ...]
    master_ranks: tuple[int, ...]
    local_ranks: tuple[tuple[int, ...], ...]
    T: int = 100
    strength: str = "strong"
    noise: str = "gaussian"
    noise_ar: float = 0.5
    factor_ar: float = 0.5
    noise_scale: float = 1.0
    standardize_t: bool = False
    channels: Optional[tuple[Channel, ...]] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(tuple(int(p) for p in d) for d in self.dims))
        object.__setattr__(self, "master_ranks", tuple(int(r) for r in self.master_ranks))
        object.__setattr__(self, "local_ranks", tuple(tuple(int(u) for u in row) for row in self.local_ranks))
        K = len(self.master_ranks)
        if self.channels is None:
            chans = tuple(consecutive_channel(K, len(d)) for d in self.dims)
        else:
            chans = tuple(ch if isinstance(ch, Channel) else Channel(ch) for ch in self.channels)
        object.__setattr__(self, "channels", chans)
        if len(chans) != len(self.dims) or len(self.local_ranks) != len(self.dims):
            raise ConfigurationError("dims, local ranks and channels must list the same threads")
        for m, (d, ch, loc) in enumerate(zip(self.dims, chans, self.local_ranks)):
            if ch.order != K or len(ch) != len(d) or len(loc) != len(d):
                raise ConfigurationError(f"thread {m}: channel {ch} does not fit dims {d} and core order {K}")
            for p, r, u in zip(d, ch.mapped_dims(self.master_ranks), loc):
                if r < 1 or u < 0 or r + u > p:
                    raise ConfigurationError(f"thread {m}: ranks r={r}, u={u} invalid for p={p}")
        if self.T < 2:
            raise ConfigurationError("T must be at least 2")
        if self.strength not in STRENGTHS or self.noise not in INNOVATIONS:
            raise ConfigurationError(f"unknown strength/noise {self.strength!r}/{self.noise!r}")

    @property
    def global_ranks(self) -> tuple[tuple[int, ...], ...]:
        return tuple(ch.mapped_dims(self.master_ranks) for ch in self.channels)

    @property
    def ranks(self) -> RankProfile:
        return RankProfile(self.global_ranks, self.local_ranks)


@dataclass
class GroundTruth:
    global_loadings: list[list[np.ndarray]]
    local_loadings: list[list[np.ndarray]]
    master_factors: np.ndarray
    global_factors: list[np.ndarray]
    local_factors: list[np.ndarray]
    global_components: list[np.ndarray]
    local_components: list[np.ndarray]
    noise: list[np.ndarray]


def generate(spec: DgpSpec) -> tuple[Collection, GroundTruth]:
    """Simulate a collection whose per-thread global cores are maps of one master core."""
    T = spec.T
    master = ar1_paths(_rng(spec.seed, 1), T, spec.master_ranks, spec.factor_ar)
    A, B, G, F, XG, XF, E, threads = [], [], [], [], [], [], [], []
    for m, (dims, ch, loc) in enumerate(zip(spec.dims, spec.channels, spec.local_ranks)):
        rng_load = _rng(spec.seed, 0, m)
        pairs = [gen_loadings(p, r, u, spec.strength, rng_load)
                 for p, r, u in zip(dims, ch.mapped_dims(spec.master_ranks), loc)]
        a = [pr[0] for pr in pairs]
        b = [pr[1] for pr in pairs]
        g = np.stack([map_op(master[t], ch) for t in range(T)])
        f = ar1_paths(_rng(spec.seed, 2, m), T, loc, spec.factor_ar)
        e = spec.noise_scale * ar1_paths(
            _rng(spec.seed, 3, m), T, dims, spec.noise_ar, spec.noise, spec.standardize_t
        )
        xg = multi_mode_product(g, a, offset=1)
        xf = multi_mode_product(f, b, offset=1) if f.size else np.zeros_like(xg)
        A.append(a)
        B.append(b)
        G.append(g)
        F.append(f)
        XG.append(xg)
        XF.append(xf)
        E.append(e)
        threads.append(ThreadSeries(xg + xf + e, name=f"x{m + 1}"))
    truth = GroundTruth(A, B, master, G, F, XG, XF, E)
    return Collection(threads, name="simulated"), truth


def space_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Spectral norm of the difference of the column-space projectors of ``x`` and ``y``."""
    return float(np.linalg.norm(_projector(x) - _projector(y), 2))


def _projector(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    tol = (s[0] if s.size else 0.0) * max(x.shape) * np.finfo(float).eps
    if s.size == 0 or s[0] == 0 or np.sum(s > tol) < x.shape[1]:
        raise RankError(f"matrix of shape {x.shape} is not of full column rank")
    return u @ u.T


def rel_mse(estimate, truth) -> float:
    """``sum_t ||est_t - truth_t||_F^2 / sum_t ||truth_t||_F^2``."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    den = float(np.sum(truth**2))
    if den == 0:
        raise UndefinedMetricError("relative MSE is undefined for an all-zero truth")
    return float(np.sum((estimate - truth) ** 2)) / den


# ---------------------------------------------------------------- settings

@dataclass(frozen=True)
class Setting:
    name: str
    dims: tuple  # with a "p" grid every entry is replaced by the grid value
    master_ranks: tuple
    kind: str  # "loadings" or "ranks"
    budget: Optional[int]
    grid_name: str  # "T" or "p"
    grid: tuple
    T: int = 100
    strength: str = "strong"
    noise: str = "gaussian"
    noise_ar: float = 0.5
    description: str = ""

    def spec(self, value, seed, **overrides) -> DgpSpec:
        T = value if self.grid_name == "T" else self.T
        dims = self.dims
        if self.grid_name == "p":
            dims = tuple(tuple(value for _ in d) for d in dims)
        local = tuple((1,) * len(d) for d in dims)
        fields = dict(
            dims=dims, master_ranks=self.master_ranks, local_ranks=local, T=T,
            strength=self.strength, noise=self.noise, noise_ar=self.noise_ar, seed=seed,
        )
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return DgpSpec(**fields)


def _settings():
    a1 = Setting("A1", ((30,), (30,), (10, 10)), (1, 1), "loadings", 50, "T", (100, 400),
                 description="M=3, K=(1,1,2), p=(30,30,10), strong, Gaussian")
    b1 = Setting("B1", ((30,), (10, 10)), (1, 1), "loadings", 30, "T", (100, 400),
                 description="M=2, K=(1,2), p=(30,10), strong, Gaussian")
    c1 = Setting("C1", ((10, 10), (10, 10)), (1, 1), "loadings", None, "p", (10, 40), T=40, noise_ar=0.0,
                 description="M=2, K=(2,2), T=40, white noise, full covariance")
    out = {
        "A1": a1,
        "A2": replace(a1, name="A2", dims=((30,), (15, 15), (10, 10, 10)), master_ranks=(1, 1, 1),
                      description="M=3, K=(1,2,3), p=(30,15,10)"),
        "A3": replace(a1, name="A3", strength="weak", description="A1 with weak factors"),
        "A4": replace(a1, name="A4", noise="t6", description="A1 with t6 noise"),
        "B1": b1,
        "B2": replace(b1, name="B2", dims=((100,), (20, 20)), description="B1 with p=(100,20)"),
        "B3": replace(b1, name="B3", dims=((30,), (10, 10, 10)), master_ranks=(1, 1, 1),
                      description="M=2, K=(1,3), p=(30,10)"),
        "B4": replace(b1, name="B4", dims=((10, 10), (10, 10, 10)), master_ranks=(1, 1, 1),
                      description="M=2, K=(2,3), p=(10,10)"),
        "C1": c1,
        "C2": replace(c1, name="C2", noise_ar=0.5, description="C1 with AR(0.5) noise"),
        "D1": replace(b1, name="D1", master_ranks=(2, 2), kind="ranks",
                      description="B1 with two global factors per mode of thread 2"),
        "D2": replace(b1, name="D2", dims=((100,), (20, 20)), master_ranks=(2, 2), kind="ranks",
                      description="B2 with two global factors per mode of thread 2"),
    }
    return out


SETTINGS = _settings()


def get_setting(name: str) -> Setting:
    key = name.upper().replace(".", "")
    if key not in SETTINGS:
        raise ConfigurationError(f"unknown setting {name!r}; known: {', '.join(SETTINGS)}")
    return SETTINGS[key]


def _label(m, k=None):
    return f"{m + 1}" if k is None else f"{m + 1},{k + 1}"


def loading_metrics(truth: GroundTruth, result) -> dict[str, float]:
    out = {}
    est = result.loadings
    for m, mats in enumerate(truth.global_loadings):
        for k, a in enumerate(mats):
            out[f"D(A[{_label(m, k)}])"] = space_distance(a, est.global_loadings[m][k])
    for m, mats in enumerate(truth.local_loadings):
        for k, b in enumerate(mats):
            if b.shape[1] and est.local_loadings[m][k].shape[1]:
                out[f"D(B[{_label(m, k)}])"] = space_distance(b, est.local_loadings[m][k])
    for m, xf in enumerate(truth.local_components):
        if np.any(xf):
            out[f"MSE(XF[{_label(m)}])"] = rel_mse(result.local_components[m], xf)
    for m, xg in enumerate(truth.global_components):
        out[f"MSE(XG[{_label(m)}])"] = rel_mse(result.global_components[m], xg)
    return out


def _cheapest_method(T, peer_total):
    return "gram" if T < peer_total else "naive"


def rank_outcomes(c: Collection, spec: DgpSpec, budget, seed, c_xi=0.2):
    """Global-count selections with the default perturbation and with ``xi = 0``."""
    out = {}
    truth = spec.global_ranks
    for m in range(c.M):
        sets = draw_index_sets(c, m, budget, seed) if budget is not None else None
        peer_total = sets.total if sets is not None else sum(c[n].size for n in range(c.M) if n != m)
        method = _cheapest_method(c.T, peer_total)
        for k in range(c[m].order):
            if sets is None:
                sigma = sigma_hat_global(c, m, k, method)
            else:
                sigma = sigma_hat_global_sub(c, m, k, sets, method)
            r_hat, _ = estimate_global_ranks(sigma, c_xi=c_xi)
            r_zero, _ = estimate_global_ranks(sigma, xi=0.0)
            out[f"r[{_label(m, k)}]"] = (r_hat, truth[m][k])
            out[f"r[{_label(m, k)}] xi=0"] = (r_zero, truth[m][k])
    return out


def replicate(setting: Setting, value, seed, budget="default", c_xi=0.2, overrides=None):
    """One replication; returns a dict of measure -> value (or ``(estimate, truth)`` for counts)."""
    spec = setting.spec(value, seed, **(overrides or {}))
    budget = setting.budget if budget == "default" else budget
    c, truth = generate(spec)
    sub_seed = seed + 1
    if setting.kind == "ranks":
        return rank_outcomes(c, spec, budget, sub_seed, c_xi)
    method = "gram"
    if budget is not None:
        method = _cheapest_method(c.T, budget)
    result = fit(c, spec.ranks, method=method, budget=budget, seed=sub_seed)
    return loading_metrics(truth, result)


def replication_seed(seed: int, cell: int, rep: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(cell, rep)).generate_state(1)[0])


@dataclass
class RunReport:
    setting: str
    reps: int
    seed: int
    grid_name: str
    cells: list
    means: dict = field(default_factory=dict)  # (cell, measure) -> mean
    proportions: dict = field(default_factory=dict)  # (cell, measure) -> (correct, under, over)
    elapsed: float = 0.0

    def mean(self, cell, measure) -> float:
        return self.means[(cell, measure)]

    def proportion(self, cell, measure) -> tuple[float, float, float]:
        return self.proportions[(cell, measure)]

    def measures(self):
        seen = []
        for _, name in list(self.means) + list(self.proportions):
            if name not in seen:
                seen.append(name)
        return seen

    def rows(self):
        for (cell, measure), v in self.means.items():
            yield {"setting": self.setting, self.grid_name: cell, "measure": measure, "kind": "mean",
                   "value": v, "under": "", "over": "", "reps": self.reps}
        for (cell, measure), (hit, under, over) in self.proportions.items():
            yield {"setting": self.setting, self.grid_name: cell, "measure": measure, "kind": "correct",
                   "value": hit, "under": under, "over": over, "reps": self.reps}

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["setting", self.grid_name, "measure", "kind", "value", "under", "over", "reps"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            for key in ("value", "under", "over"):
                if isinstance(row[key], float):
                    row[key] = f"{row[key]:.17g}"
            writer.writerow(row)
        return buf.getvalue()

    def summary(self) -> str:
        """Plain-text table with one column per grid value, laid out like the published tables."""
        head = f"Setting {self.setting}: {self.reps} replications, seed {self.seed}"
        lines = [head, "", f"{'measure':<22}" + "".join(f"{self.grid_name}={c:<16}" for c in self.cells)]
        for name in self.measures():
            cells = []
            for c in self.cells:
                if (c, name) in self.means:
                    cells.append(f"{self.means[(c, name)]:<18.3f}")
                elif (c, name) in self.proportions:
                    hit, under, over = self.proportions[(c, name)]
                    cells.append(f"{100 * hit:5.1f} ({100 * under:4.1f}|{100 * over:4.1f}) ")
                else:
                    cells.append(f"{'-':<18}")
            lines.append(f"{name:<22}" + "".join(cells))
        return "\n".join(lines) + "\n"


def _job(args):
    setting, value, seed, budget, c_xi, overrides = args
    with threadpool_limits(limits=1):
        return replicate(setting, value, seed, budget, c_xi, overrides)


def run_setting(
    name: str,
    reps: int = 100,
    seed: int = 0,
    grid: Optional[Sequence] = None,
    *,
    budget="default",
    c_xi: float = 0.2,
    workers: int = 1,
    **overrides,
) -> RunReport:
    """Monte Carlo over ``reps`` replications for every grid value of a named setting.

    ``grid`` replaces the setting's ``T`` (or ``p``) values; ``overrides`` are
    passed to :class:`DgpSpec` (e.g. ``strength="weak"``, ``noise="t6"``).
    Aggregation is in replication order, so results do not depend on ``workers``.
    """
    setting = get_setting(name)
    if reps < 1:
        raise ConfigurationError("reps must be positive")
    cells = list(grid) if grid is not None else list(setting.grid)
    jobs = [
        (setting, value, replication_seed(seed, j, r), budget, c_xi, overrides)
        for j, value in enumerate(cells)
        for r in range(reps)
    ]
    start = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        outcomes = [_job(j) for j in jobs]
    report = RunReport(setting.name, reps, seed, setting.grid_name, cells)
    for j, value in enumerate(cells):
        block = outcomes[j * reps : (j + 1) * reps]
        for measure in block[0]:
            vals = [o[measure] for o in block]
            if isinstance(vals[0], tuple):
                est = np.array([v[0] for v in vals])
                true = np.array([v[1] for v in vals])
                report.proportions[(value, measure)] = (
                    float(np.mean(est == true)), float(np.mean(est < true)), float(np.mean(est > true))
                )
            else:
                report.means[(value, measure)] = float(np.mean(vals))
    report.elapsed = time.perf_counter() - start
    return report
