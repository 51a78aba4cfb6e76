"""Estimation, rank selection and simulation for multi-order tensor factor models."""

from motfm.covariance import GlobalCovariance, omega_hat, sigma_hat_global
from motfm.estimation import (
    fit,
    global_loading,
    local_cov_projected,
    local_cov_vec,
    local_loading,
    estimate_global_factors,
    estimate_local_factors,
)
from motfm.model import Collection, FitResult, RankProfile, ThreadSeries, demean, validate
from motfm.ranks import estimate_global_ranks, estimate_local_ranks, estimate_total_ranks, select_ranks
from motfm.subsample import IndexSets, draw_index_sets, sigma_hat_global_sub
from motfm.tensor import Channel, fold, inverse_map, kron_desc, map_op, mode_product, unfold, vectorize

__version__ = "0.1.0"

__all__ = [
    "Channel",
    "Collection",
    "FitResult",
    "GlobalCovariance",
    "IndexSets",
    "RankProfile",
    "ThreadSeries",
    "demean",
    "draw_index_sets",
    "estimate_global_factors",
    "estimate_global_ranks",
    "estimate_local_factors",
    "estimate_local_ranks",
    "estimate_total_ranks",
    "fit",
    "fold",
    "global_loading",
    "inverse_map",
    "kron_desc",
    "local_cov_projected",
    "local_cov_vec",
    "local_loading",
    "map_op",
    "mode_product",
    "omega_hat",
    "select_ranks",
    "sigma_hat_global",
    "sigma_hat_global_sub",
    "unfold",
    "validate",
    "vectorize",
]
