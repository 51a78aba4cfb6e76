import numpy as np
import pytest

from motfm.errors import CollinearityError, DataError, DimensionError, RankError, StageError
from motfm.estimation import (
    eig_desc,
    estimate_global_factors,
    estimate_local_factors,
    fit,
    global_loading,
    local_cov_projected,
    local_cov_vec,
    local_factor_maps,
    local_loading,
    sign_fix,
)
from motfm.model import Collection, RankProfile
from motfm.simulation import DgpSpec, generate, rel_mse, space_distance
from motfm.tensor import Channel, kron_desc, multi_mode_product, unfold, vectorize


def orthonormal(rng, p, r):
    q, _ = np.linalg.qr(rng.standard_normal((p, r)))
    return q


def orthogonal_model(rng, dims_list, master_ranks, channels, local_ranks, T=40):
    """Noise-free data with A_k^T B_k = 0 and time-orthogonal factor paths.

    Sample cross-moments between distinct factor entries vanish exactly, so
    both loading spaces are identified without error.
    """
    n_master = int(np.prod(master_ranks))
    n_local = [int(np.prod(u)) for u in local_ranks]
    paths, _ = np.linalg.qr(rng.standard_normal((T, n_master + sum(n_local))))
    paths *= np.sqrt(T) * np.linspace(3.0, 1.0, paths.shape[1])  # distinct factor variances
    master = paths[:, :n_master].reshape((T,) + tuple(master_ranks), order="F")
    start = n_master
    arrays, truth = [], []
    for dims, ch, u, nl in zip(dims_list, channels, local_ranks, n_local):
        ranks = ch.mapped_dims(master_ranks)
        A, B = [], []
        for p, r, uk in zip(dims, ranks, u):
            q = orthonormal(rng, p, r + uk)
            A.append(q[:, :r] @ rng.standard_normal((r, r)))
            B.append(np.sqrt(p) * q[:, r:])
        g = np.stack([_map(master[t], ch) for t in range(T)])
        f = paths[:, start : start + nl].reshape((T,) + tuple(u), order="F")
        start += nl
        xg = multi_mode_product(g, A, offset=1)
        xf = multi_mode_product(f, B, offset=1)
        arrays.append(xg + xf)
        truth.append({"A": A, "B": B, "G": g, "F": f, "XG": xg, "XF": xf, "r": ranks, "u": u})
    return Collection.from_arrays(arrays), truth


def _map(x, ch):
    from motfm.tensor import map_op

    return map_op(x, ch)


class TestEigen:
    def test_sign_fix_ties_to_lowest_index(self):
        v = np.array([[-1.0, 0.5], [1.0, -0.5]]) / np.sqrt(2)
        out = sign_fix(v)
        assert out[0, 0] > 0 and out[0, 1] > 0

    def test_global_diag(self):
        a, a_perp, w = global_loading(np.diag([4.0, 1.0]), 1)
        np.testing.assert_allclose(a, [[np.sqrt(2)], [0.0]])
        np.testing.assert_allclose(a_perp, [[0.0], [1.0]])
        np.testing.assert_allclose(w, [4.0, 1.0])

    def test_degenerate_is_deterministic(self):
        s = 3.0 * np.eye(4)
        a1 = global_loading(s, 1)[0]
        a2 = global_loading(s.copy(), 1)[0]
        assert a1.tobytes() == a2.tobytes()

    @pytest.mark.parametrize("r", [0, 2, 3])
    def test_global_rank_bounds(self, r):
        with pytest.raises(RankError):
            global_loading(np.eye(2), r)

    def test_local_diag(self):
        b, w = local_loading(np.diag([9.0, 4.0, 1.0]), 2)
        np.testing.assert_allclose(b, np.sqrt(3) * np.eye(3)[:, :2])
        np.testing.assert_allclose(w, [9.0, 4.0, 1.0])

    def test_local_exact_span(self, rng):
        b0 = rng.standard_normal((7, 2))
        b, _ = local_loading(b0 @ b0.T, 2)
        assert space_distance(b, b0) <= 1e-8
        b_again, _ = local_loading(b0 @ b0.T, 2)
        assert b.tobytes() == b_again.tobytes()

    def test_scaling(self, rng):
        x = rng.standard_normal((6, 6))
        a, a_perp, _ = global_loading(x @ x.T, 2)
        np.testing.assert_allclose(a.T @ a, 6 * np.eye(2), atol=1e-10)
        np.testing.assert_allclose(a_perp.T @ a_perp, np.eye(4), atol=1e-10)
        np.testing.assert_allclose(a.T @ a_perp, 0, atol=1e-10)

    def test_eig_desc_order(self, rng):
        x = rng.standard_normal((5, 5))
        w, _ = eig_desc(x @ x.T)
        assert np.all(np.diff(w) <= 0)


class TestLocalCovariance:
    def test_zero(self, rng):
        c = Collection.from_arrays([np.zeros((3, 3, 2)), np.zeros((3, 4))])
        comps = [orthonormal(rng, 3, 2), orthonormal(rng, 2, 1)]
        assert not np.any(local_cov_projected(c, 0, 0, comps).matrix)
        assert not np.any(local_cov_vec(c, 1, orthonormal(rng, 4, 3)).matrix)

    def test_projected_against_dense(self, rng):
        x = rng.standard_normal((5, 3, 4, 2))
        c = Collection.from_arrays([x, rng.standard_normal((5, 2))])
        comps = [orthonormal(rng, 3, 2), orthonormal(rng, 4, 3), orthonormal(rng, 2, 1)]
        for k in range(3):
            P = kron_desc([comps[j] for j in range(3) if j != k])
            want = sum(unfold(x[t], k) @ P @ P.T @ unfold(x[t], k).T for t in range(5)) / (5 * 24)
            got = local_cov_projected(c, 0, k, comps)
            np.testing.assert_allclose(got.matrix, want, atol=1e-10)
            assert got.variant == "projected"

    def test_vec_against_dense(self, rng):
        x = rng.standard_normal((6, 5))
        c = Collection.from_arrays([x, rng.standard_normal((6, 2, 2))])
        comp = orthonormal(rng, 5, 3)
        Q = comp @ comp.T
        want = sum(Q @ np.outer(x[t], x[t]) @ Q for t in range(6)) / (6 * 5)
        got = local_cov_vec(c, 0, comp)
        np.testing.assert_allclose(got.matrix, want, atol=1e-10)
        assert got.variant == "sandwiched"

    def test_vec_full_complement(self, rng):
        x = rng.standard_normal((6, 4))
        c = Collection.from_arrays([x, x])
        np.testing.assert_allclose(local_cov_vec(c, 0, np.eye(4)).matrix, x.T @ x / 24, atol=1e-12)

    def test_variant_errors(self, rng):
        c = Collection.from_arrays([rng.standard_normal((3, 3)), rng.standard_normal((3, 2, 2))])
        with pytest.raises(DataError):
            local_cov_projected(c, 0, 0, [np.eye(3)])
        with pytest.raises(DataError):
            local_cov_vec(c, 1, np.eye(2))

    def test_empty_complement(self, rng):
        c = Collection.from_arrays([rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2))])
        with pytest.raises(DimensionError):
            local_cov_projected(c, 0, 0, [np.eye(2), np.zeros((2, 0))])


class TestFactors:
    def test_local_against_normal_equations(self, rng):
        x = rng.standard_normal((4, 4, 3, 5))
        c = Collection.from_arrays([x, rng.standard_normal((4, 2))])
        comps = [orthonormal(rng, 4, 3), orthonormal(rng, 3, 2), orthonormal(rng, 5, 4)]
        Bs = [rng.standard_normal((4, 2)), rng.standard_normal((3, 1)), rng.standard_normal((5, 2))]
        P, Bk = kron_desc(comps), kron_desc(Bs)
        C = P.T @ Bk
        got = estimate_local_factors(c, 0, comps, Bs)
        assert got.shape == (4, 2, 1, 2)
        for t in range(4):
            want = np.linalg.solve(C.T @ C, C.T @ P.T @ vectorize(x[t]))
            np.testing.assert_allclose(vectorize(got[t]), want, atol=1e-10)

    def test_local_vector_thread(self, rng):
        x = rng.standard_normal((4, 6))
        c = Collection.from_arrays([x, x])
        comp, b = orthonormal(rng, 6, 4), rng.standard_normal((6, 2))
        C = comp.T @ b
        got = estimate_local_factors(c, 0, [comp], [b])
        want = np.linalg.solve(C.T @ C, C.T @ comp.T @ x.T).T
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_local_empty(self, rng):
        c = Collection.from_arrays([rng.standard_normal((4, 3, 3)), rng.standard_normal((4, 2))])
        f = estimate_local_factors(c, 0, [np.eye(3), np.eye(3)], [np.zeros((3, 0)), np.ones((3, 1))])
        assert f.shape == (4, 0, 1) and f.size == 0

    def test_collinear(self, rng):
        comp = orthonormal(rng, 5, 3)
        inside = np.linalg.svd(comp.T)[2][3:].T  # orthogonal to the complement
        b1 = comp[:, 0]
        b = np.stack([b1, b1 + inside[:, 0]], axis=1)  # identical after projection
        with pytest.raises(CollinearityError):
            local_factor_maps([comp], [b])

    def test_loading_inside_global_span(self, rng):
        comp = orthonormal(rng, 5, 3)
        inside = np.linalg.svd(comp.T)[2][3:].T
        with pytest.raises(CollinearityError):
            local_factor_maps([comp], [inside[:, :1]])

    def test_local_recovery(self, rng):
        # X_t = F_t x B, complements orthogonal to the global span contain span(B)
        p, u, T = (5, 4), (2, 1), 6
        q = [orthonormal(rng, pk, pk) for pk in p]
        comps = [qk[:, 1:] for qk in q]
        B = [comps[0][:, :2] @ rng.standard_normal((2, 2)), comps[1][:, :1] * 2.0]
        F = rng.standard_normal((T,) + u)
        X = multi_mode_product(F, B, offset=1)
        c = Collection.from_arrays([X, X])
        Fh = estimate_local_factors(c, 0, comps, B)
        np.testing.assert_allclose(multi_mode_product(Fh, B, offset=1), X, atol=1e-8)

    def test_global_against_normal_equations(self, rng):
        x = rng.standard_normal((4, 4, 3))
        c = Collection.from_arrays([x, rng.standard_normal((4, 2))])
        A = [rng.standard_normal((4, 2)), rng.standard_normal((3, 1))]
        B = [rng.standard_normal((4, 1)), rng.standard_normal((3, 2))]
        F = rng.standard_normal((4, 1, 2))
        K, KB = kron_desc(A), kron_desc(B)
        got = estimate_global_factors(c, 0, A, B, F)
        for t in range(4):
            want = np.linalg.solve(K.T @ K, K.T @ (vectorize(x[t]) - KB @ vectorize(F[t])))
            np.testing.assert_allclose(vectorize(got[t]), want, atol=1e-10)

    def test_global_zero(self, rng):
        c = Collection.from_arrays([np.zeros((3, 3, 2)), np.zeros((3, 2))])
        A = [rng.standard_normal((3, 1)), rng.standard_normal((2, 1))]
        g = estimate_global_factors(c, 0, A, [np.zeros((3, 0)), np.zeros((2, 0))], np.zeros((3, 0, 0)))
        assert not np.any(g)

    def test_global_exact(self, rng):
        A = [np.sqrt(5) * orthonormal(rng, 5, 2), np.sqrt(4) * orthonormal(rng, 4, 1)]
        G = rng.standard_normal((6, 2, 1))
        X = multi_mode_product(G, A, offset=1)
        c = Collection.from_arrays([X, X])
        empty = [np.zeros((5, 0)), np.zeros((4, 0))]
        got = estimate_global_factors(c, 0, A, empty, np.zeros((6, 0, 0)))
        np.testing.assert_allclose(got, G, atol=1e-10)


class TestFit:
    def test_global_only_exact_recovery(self):
        spec = DgpSpec(
            dims=((6,), (5, 5), (4, 4, 3)),
            master_ranks=(2, 2, 1),
            local_ranks=((0,), (0, 0), (0, 0, 0)),
            channels=(Channel([[0, 1, 2]]), Channel([[0, 1], [2]]), Channel.identity(3)),
            T=50,
            noise_scale=0.0,
            seed=4,
        )
        c, truth = generate(spec)
        res = fit(c, spec.ranks)
        for m in range(c.M):
            for k in range(c[m].order):
                assert space_distance(res.loadings.global_loadings[m][k], truth.global_loadings[m][k]) <= 1e-8
            assert rel_mse(res.global_components[m], truth.global_components[m]) <= 1e-10
            assert res.local_factors[m].size == 0
            assert not np.any(res.local_components[m])

    def test_full_model_exact_recovery(self, rng):
        dims = [(7,), (5, 6), (4, 5, 4)]
        channels = [Channel([[0, 1, 2]]), Channel([[0, 1], [2]]), Channel.identity(3)]
        local = [(2,), (1, 2), (1, 1, 2)]
        c, truth = orthogonal_model(rng, dims, (1, 2, 1), channels, local)
        prof = RankProfile([t["r"] for t in truth], [t["u"] for t in truth])
        res = fit(c, prof)
        for m, tr in enumerate(truth):
            for k in range(c[m].order):
                assert space_distance(res.loadings.global_loadings[m][k], tr["A"][k]) <= 1e-8
                assert space_distance(res.loadings.local_loadings[m][k], tr["B"][k]) <= 1e-8
            assert rel_mse(res.global_components[m], tr["XG"]) <= 1e-10
            assert rel_mse(res.local_components[m], tr["XF"]) <= 1e-10

    def test_scaling_and_components(self, rng):
        spec = DgpSpec(dims=((8,), (6, 5)), master_ranks=(1, 1), local_ranks=((1,), (1, 1)), T=30, seed=2)
        c, _ = generate(spec)
        res = fit(c, spec.ranks)
        est = res.loadings
        for m in range(c.M):
            for k, p in enumerate(c[m].dims):
                a, ap, b = est.global_loadings[m][k], est.global_complements[m][k], est.local_loadings[m][k]
                np.testing.assert_allclose(a.T @ a, p * np.eye(a.shape[1]), atol=1e-10)
                np.testing.assert_allclose(b.T @ b, p * np.eye(b.shape[1]), atol=1e-10)
                np.testing.assert_allclose(ap.T @ ap, np.eye(ap.shape[1]), atol=1e-10)
                np.testing.assert_allclose(a.T @ ap, 0, atol=1e-10)
            np.testing.assert_array_equal(
                res.global_components[m], multi_mode_product(res.global_factors[m], est.global_loadings[m], offset=1)
            )
            np.testing.assert_array_equal(
                res.local_components[m], multi_mode_product(res.local_factors[m], est.local_loadings[m], offset=1)
            )
            np.testing.assert_allclose(
                res.global_components[m] + res.local_components[m] + res.residuals[m], c[m].data, atol=1e-12
            )

    def test_zero_local_profile(self, rng):
        c = Collection.from_arrays([rng.standard_normal((10, 5)), rng.standard_normal((10, 3, 4))])
        res = fit(c, RankProfile([[1], [1, 1]], [[0], [0, 0]]))
        assert all(f.size == 0 for f in res.local_factors)
        assert all(b.shape[1] == 0 for row in res.loadings.local_loadings for b in row)

    def test_deterministic_subsampled(self, rng):
        spec = DgpSpec(dims=((10,), (12,), (4, 4)), master_ranks=(1, 1), local_ranks=((1,), (1,), (1, 1)), T=20)
        c, _ = generate(spec)
        a = fit(c, spec.ranks, budget=8, seed=3)
        b = fit(c, spec.ranks, budget=8, seed=3)
        for x, y in zip(a.global_factors, b.global_factors):
            assert x.tobytes() == y.tobytes()
        assert a.info["covariances"][0, 0].subsampled

    def test_stage_labels(self, rng):
        c = Collection.from_arrays([rng.standard_normal((5, 3)), rng.standard_normal((5, 3))])
        with pytest.raises(StageError) as info:
            fit(c, RankProfile([[3], [1]], [[0], [0]]))
        assert "global loading" in info.value.stage
        assert isinstance(info.value.cause, RankError)

    def test_single_thread(self, rng):
        c = Collection.from_arrays([rng.standard_normal((5, 3))])
        with pytest.raises(StageError, match="at least two threads"):
            fit(c, RankProfile([[1]], [[0]]))
