"""Bound-library validity: every min-bound below the brute-force minimum,
every spread bound above the exact spread, on batched random instances."""

import numpy as np
import pytest

from maxk import bounds
from maxk.linalg import row_diff_range, svd
from maxk.model import decompose_paths
from maxk.training import init_params, make_rng


def brute_min(f, g):
    """Triple-loop oracle for min_{x,y,z} f[x,y] + g[y,z]."""
    return min(
        f[x, y] + g[y, z]
        for x in range(f.shape[0])
        for y in range(f.shape[1])
        for z in range(g.shape[1])
    )


class TestMinBounds:
    def test_exact_when_f_ignores_x(self):
        rng = np.random.default_rng(0)
        row = rng.standard_normal(5)
        f = np.tile(row, (4, 1))
        g = rng.standard_normal((5, 3))
        got = bounds.mean_diff_min_bound(f, g)
        assert got == pytest.approx(brute_min(f, g), rel=1e-12)

    def test_beats_naive_bound_under_shared_variation(self):
        # f = k(y) + small noise, g = -k(y) + small noise with a large k
        # range: the mean+diff estimate stays near the true minimum while
        # min f + min g collapses by the full k range.
        rng = np.random.default_rng(1)
        k = 50.0 * rng.standard_normal(6)
        f = k[None, :] + 0.1 * rng.standard_normal((4, 6))
        g = -k[:, None] + 0.1 * rng.standard_normal((6, 5))
        exact = brute_min(f, g)
        clever = bounds.mean_diff_min_bound(f, g)
        naive = f.min() + g.min()
        assert clever <= exact + 1e-12
        assert clever > naive + 10.0

    def test_validity_on_1000_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            f = rng.standard_normal((4, 5)) * rng.uniform(0.1, 10)
            g = rng.standard_normal((5, 3)) * rng.uniform(0.1, 10)
            assert bounds.mean_diff_min_bound(f, g) <= brute_min(f, g) + 1e-9

    def test_zero_summary_is_the_naive_bound(self):
        rng = np.random.default_rng(3)
        f = rng.standard_normal((4, 5))
        g = rng.standard_normal((5, 3))
        got = bounds.summarize_diff_min_bound(f, g, np.zeros(5))
        assert got == pytest.approx(f.min() + g.min(), rel=1e-12)

    def test_mean_summary_specialisation(self):
        rng = np.random.default_rng(4)
        f = rng.standard_normal((4, 5))
        g = rng.standard_normal((5, 3))
        assert bounds.summarize_diff_min_bound(f, g, f.mean(axis=0)) == pytest.approx(
            bounds.mean_diff_min_bound(f, g)
        )

    def test_principal_component_summary_still_valid(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            f = rng.standard_normal((4, 5))
            g = rng.standard_normal((5, 3))
            u, s, v = svd(f, rank=1)
            h = s[0] * u[:, 0].mean() * v[:, 0]
            assert bounds.summarize_diff_min_bound(f, g, h) <= brute_min(f, g) + 1e-9

    def test_empty_axis_rejected(self):
        with pytest.raises(ValueError):
            bounds.mean_diff_min_bound(np.zeros((0, 3)), np.zeros((3, 2)))


def exact_max_row_diff(product):
    return float(row_diff_range(product).max())


class TestRowSpreadBounds:
    def test_identity_left_factor_is_exact(self):
        rng = np.random.default_rng(6)
        b = rng.standard_normal((4, 6))
        got = bounds.max_row_diff_bound(np.eye(4), b)
        assert got == pytest.approx(exact_max_row_diff(b), rel=1e-12)

    def test_validity_on_1000_random_products(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            a = rng.standard_normal((6, 4))
            b = rng.standard_normal((4, 6))
            assert bounds.max_row_diff_bound(a, b) >= exact_max_row_diff(a @ b) - 1e-9

    def test_single_matrix_chain_is_exact(self):
        rng = np.random.default_rng(8)
        m = rng.standard_normal((5, 7))
        assert bounds.recursive_max_row_diff_bound([m]) == pytest.approx(exact_max_row_diff(m))

    def test_two_matrix_chain_matches_pairwise_bound(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal((4, 6))
        assert bounds.recursive_max_row_diff_bound([a, b]) == pytest.approx(
            bounds.max_row_diff_bound(a, b)
        )

    def test_recursive_validity_on_chains(self):
        rng = np.random.default_rng(10)
        for _ in range(1000):
            chain = [
                rng.standard_normal((5, 3)),
                rng.standard_normal((3, 3)),
                rng.standard_normal((3, 3)),
                rng.standard_normal((3, 5)),
            ]
            product = chain[0] @ chain[1] @ chain[2] @ chain[3]
            assert bounds.recursive_max_row_diff_bound(chain) >= exact_max_row_diff(product) - 1e-9

    def test_zero_summaries_reduce_to_recursive(self):
        rng = np.random.default_rng(11)
        chain = [rng.standard_normal((4, 3)), rng.standard_normal((3, 3)), rng.standard_normal((3, 4))]
        plain = bounds.recursive_max_row_diff_bound(chain)
        combined = bounds.combined_mean_max_row_diff_bound(chain, [None, None])
        assert combined == pytest.approx(plain, rel=1e-12)

    def test_combined_validity_on_chains(self):
        rng = np.random.default_rng(12)
        for _ in range(1000):
            chain = [rng.standard_normal((5, 3)), rng.standard_normal((3, 3)), rng.standard_normal((3, 5))]
            product = chain[0] @ chain[1] @ chain[2]
            got = bounds.combined_mean_max_row_diff_bound(chain, bounds.mean_summaries(chain))
            assert got >= exact_max_row_diff(product) - 1e-9

    def test_sigma1_chain_dominates_exact_spread(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            a = rng.standard_normal((6, 4))
            b = rng.standard_normal((4, 6))
            product = a @ b
            s_prod = svd(product)[1][0]
            s_chain = svd(a)[1][0] * svd(b)[1][0]
            assert np.sqrt(2) * s_chain >= np.sqrt(2) * s_prod - 1e-9
            assert np.sqrt(2) * s_prod >= exact_max_row_diff(product) - 1e-9


def trained_like_paths(seed, d_vocab=10, d_model=6, n_ctx=3):
    return decompose_paths(init_params(make_rng(seed), d_vocab, d_model, n_ctx))


class TestAttentionDecompositions:
    def test_rank1_reconstruction(self):
        paths = trained_like_paths(0)
        decomp = bounds.eqke_rank1_decompose(paths, bounds.ERR_MAX_DIFF)
        full = paths.eqke * np.sqrt(paths.d_model)
        recon = decomp.exact_part() + decomp.residual()
        scale = np.abs(full).max()
        assert np.abs(recon - full).max() <= 1e-8 * scale

    def test_rank1_on_rank_one_matrix_has_tiny_residual(self):
        # when the score product is genuinely rank one the residual spread
        # bound collapses toward zero
        rng = np.random.default_rng(1)
        base = trained_like_paths(1)
        left = np.outer(rng.standard_normal(10), rng.standard_normal(6))
        from maxk.model import PathMatrices

        paths = PathMatrices(
            eu=base.eu, eqke=base.eqke, eqkp=base.eqkp, evou=base.evou,
            pvou=base.pvou, p_avg=base.p_avg, e_q=left, e_bar=left,
            w_q=np.eye(6), w_k=np.eye(6), w_u=base.w_u,
        )
        decomp = bounds.eqke_rank1_decompose(paths, bounds.ERR_MAX_DIFF)
        full = left @ np.eye(6) @ np.eye(6).T @ left.T
        assert decomp.error_bounds_vector(10).max() <= 1e-6 * np.abs(full).max()

    @pytest.mark.parametrize(
        "method", [bounds.ERR_SVD, bounds.ERR_MAX_DIFF, bounds.ERR_MEAN_MAX_DIFF, bounds.ERR_EXACT]
    )
    def test_rank1_error_bound_dominates_true_residual_spread(self, method):
        for seed in range(30):
            paths = trained_like_paths(seed)
            decomp = bounds.eqke_rank1_decompose(paths, method)
            true_spread = row_diff_range(decomp.residual())
            got = decomp.error_bounds_vector(paths.d_vocab)
            assert np.all(got >= true_spread - 1e-9)

    def test_rank2_reconstruction(self):
        for seed in range(10):
            paths = trained_like_paths(seed)
            decomp = bounds.eqke_rank2_decompose(paths, bounds.ERR_RECURSIVE)
            assert len(decomp.rank_one_terms) == 35
            full = paths.eqke * np.sqrt(paths.d_model)
            recon = decomp.exact_part() + decomp.residual()
            assert np.abs(recon - full).max() <= 1e-8 * np.abs(full).max()

    def test_rank2_zero_query_map_gives_zero_everything(self):
        base = trained_like_paths(2)
        from maxk.model import PathMatrices

        paths = PathMatrices(
            eu=base.eu, eqke=np.zeros_like(base.eqke), eqkp=base.eqkp,
            evou=base.evou, pvou=base.pvou, p_avg=base.p_avg, e_q=base.e_q,
            e_bar=base.e_bar, w_q=np.zeros_like(base.w_q), w_k=base.w_k, w_u=base.w_u,
        )
        decomp = bounds.eqke_rank2_decompose(paths, bounds.ERR_RECURSIVE)
        assert np.abs(decomp.exact_part()).max() <= 1e-12
        assert decomp.error_bounds_vector(paths.d_vocab).max() <= 1e-12

    @pytest.mark.parametrize(
        "method",
        [
            bounds.ERR_SUBPRODUCT,
            bounds.ERR_MEAN_SUBPRODUCT,
            bounds.ERR_RECURSIVE,
            bounds.ERR_MEAN_RECURSIVE,
            bounds.ERR_MEAN_RECURSIVE_ALL,
        ],
    )
    def test_rank2_error_bound_dominates_true_residual_spread(self, method):
        for seed in range(30):
            paths = trained_like_paths(seed)
            decomp = bounds.eqke_rank2_decompose(paths, method)
            true_spread = row_diff_range(decomp.residual())
            got = decomp.error_bounds_vector(paths.d_vocab)
            assert np.all(got >= true_spread - 1e-9)


class TestDirectPathBounds:
    def test_zero_unembedding_gives_zero_bounds(self):
        base = trained_like_paths(3)
        from maxk.model import PathMatrices

        paths = PathMatrices(
            eu=np.zeros_like(base.eu), eqke=base.eqke, eqkp=base.eqkp,
            evou=base.evou, pvou=base.pvou, p_avg=base.p_avg, e_q=base.e_q,
            e_bar=base.e_bar, w_q=base.w_q, w_k=base.w_k,
            w_u=np.zeros_like(base.w_u),
        )
        for variant in bounds.EU_VARIANTS:
            got = bounds.eu_bound(paths, variant)
            assert np.abs(got.per_query).max() <= 1e-12

    def test_per_row_exact_below_global_exact(self):
        paths = trained_like_paths(4)
        per = bounds.eu_bound(paths, bounds.EU_EXACT).per_query
        glob = bounds.eu_bound(paths, bounds.EU_GLOBAL_EXACT).per_query
        assert np.all(per <= glob + 1e-12)

    def test_every_cheap_variant_dominates_exact(self):
        for seed in range(50):
            paths = trained_like_paths(seed)
            exact = row_diff_range(paths.eu)
            for variant in bounds.EU_VARIANTS:
                got = bounds.eu_bound(paths, variant).per_query
                assert np.all(got >= exact - 1e-9), variant

    def test_centred_bounds_dominate_centred_spread(self):
        for seed in range(30):
            paths = trained_like_paths(seed)
            for variant in bounds.EU_VARIANTS:
                got = bounds.eu_bound(paths, variant)
                true_centred = row_diff_range(paths.eu - got.query_mean[None, :])
                assert np.all(got.centred_per_query >= true_centred - 1e-9), variant

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="unknown direct-path"):
            bounds.eu_bound(trained_like_paths(5), "bogus")
