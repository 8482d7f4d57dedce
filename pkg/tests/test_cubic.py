"""Cubic certifier: swap characterisation, relaxation domination against
exhaustive permutation oracles, and soundness against brute force."""

import itertools
from math import comb

import numpy as np
import pytest

from maxk.brute import brute_force_bound
from maxk.cubic import (
    CubicEvaluator,
    PureCase,
    check_swap_sign,
    compare_tokens,
    cubic_bound,
    full_sequence_score,
    model_behavior,
    model_behavior_relaxed,
    relaxed_sequence_scores,
    sequence_score,
)
from maxk.model import ModelParams, decompose_paths, forward, predict
from maxk.training import TrainConfig, init_params, make_rng, train


def random_params(seed, d_vocab=6, d_model=4, n_ctx=3):
    return init_params(make_rng(seed), d_vocab, d_model, n_ctx)


def zero_params(d_vocab=4, d_model=3, n_ctx=3):
    shapes = dict(
        e=(d_vocab, d_model), p=(n_ctx, d_model), q=(d_model, d_model),
        k=(d_model, d_model), v=(d_model, d_model), o=(d_model, d_model),
        u=(d_model, d_vocab),
    )
    return ModelParams(**{k: np.zeros(s) for k, s in shapes.items()})


class TestSwapCharacterisation:
    def test_identical_indices_give_zero(self):
        rng = np.random.default_rng(0)
        report = check_swap_sign(
            rng.standard_normal(5), rng.standard_normal(5), rng.standard_normal(4),
            rng.standard_normal(4), [0, 1, 2, 4], [2, 0, 3, 1], 2, 2,
        )
        assert report.closed_form_sign == 0
        assert report.delta == 0.0

    def test_equal_attention_case_matches_position_value_product(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            v = rng.standard_normal(5)
            a = rng.standard_normal(5)
            tokens = np.sort(rng.integers(0, 5, size=4))
            i, j = rng.choice(4, size=2, replace=False)
            a[tokens[j]] = a[tokens[i]]  # force the equal-attention branch
            b = rng.standard_normal(4)
            perm = rng.permutation(4)
            report = check_swap_sign(v, a, rng.standard_normal(4), b, tokens, perm, i, j)
            want = -np.sign(b[perm[i]] - b[perm[j]]) * np.sign(v[tokens[i]] - v[tokens[j]])
            assert report.closed_form_sign == int(want)
            assert report.agree

    def test_ten_thousand_random_instances_agree(self):
        rng = np.random.default_rng(2)
        disagreements = 0
        for _ in range(10_000):
            v = rng.standard_normal(6)
            a = rng.standard_normal(6)
            w = rng.standard_normal(4)
            b = rng.standard_normal(4)
            tokens = np.sort(rng.integers(0, 6, size=4))
            perm = rng.permutation(4)
            i, j = rng.integers(0, 4, size=2)
            report = check_swap_sign(v, a, w, b, tokens, perm, int(i), int(j))
            disagreements += not report.agree
        assert disagreements == 0


class TestRelaxedScores:
    def test_positional_floor_identity(self):
        # relaxed-minus-plain equals the positional minimum by construction
        rng = np.random.default_rng(3)
        for _ in range(100):
            v = rng.standard_normal(5)
            a = rng.standard_normal(5)
            w = rng.standard_normal(4)
            b = rng.standard_normal(4)
            tokens = np.sort(rng.integers(0, 5, size=4))
            perm = rng.permutation(4)
            s, r_min, r_max = relaxed_sequence_scores(v, a, w, b, tokens, perm)
            assert abs((r_min - s) - w.min()) <= 1e-12
            assert abs((r_max - s) - w.max()) <= 1e-12

    def test_relaxed_scores_bracket_full_score(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            v = rng.standard_normal(5)
            a = rng.standard_normal(5)
            w = rng.standard_normal(4)
            b = rng.standard_normal(4)
            tokens = np.sort(rng.integers(0, 5, size=4))
            perm = rng.permutation(4)
            s, r_min, r_max = relaxed_sequence_scores(v, a, w, b, tokens, perm)
            for other in itertools.permutations(range(4)):
                full = full_sequence_score(v, a, w, b, tokens, np.array(other))
                plain = sequence_score(v, a, b, tokens, np.array(other))
                assert r_min - s <= full - plain <= r_max - s + 1e-12


class TestCompareTokens:
    def _setup(self, rng, n_tokens=5, n_ctx=4, n_fixed=1):
        v = rng.standard_normal(n_tokens)
        a = rng.standard_normal(n_tokens)
        b = rng.standard_normal(n_ctx)
        fixed_positions = list(range(n_fixed))
        fixed_tokens = rng.integers(0, n_tokens, size=n_fixed)
        c = sum(v[t] * np.exp(a[t] + b[p]) for t, p in zip(fixed_tokens, fixed_positions))
        d = sum(np.exp(a[t] + b[p]) for t, p in zip(fixed_tokens, fixed_positions))
        f = sum(np.exp(b[p]) for p in range(n_fixed, n_ctx))
        return v, a, b, fixed_positions, fixed_tokens, c, d, f

    def test_matches_direct_score_difference(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            v, a, b, fpos, ftok, c, d, f = self._setup(rng)

            def pure_score(x):
                num = c + v[x] * np.exp(a[x]) * f
                den = d + np.exp(a[x]) * f
                return num / den

            for x in range(5):
                for y in range(5):
                    got = compare_tokens(x, y, v, a, c, d, f)
                    want = np.sign(pure_score(x) - pure_score(y))
                    if abs(pure_score(x) - pure_score(y)) > 1e-12:
                        assert got == int(want)

    def test_transitive_on_random_instances(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            v, a, b, fpos, ftok, c, d, f = self._setup(rng)
            le = lambda x, y: compare_tokens(x, y, v, a, c, d, f) <= 0
            for x, y, z in itertools.product(range(5), repeat=3):
                if le(x, y) and le(y, z):
                    assert le(x, z)


def enumerate_case_sequences(case: PureCase, n_ctx: int):
    """Every concrete sequence compatible with a pure case."""
    non_query = [case.t_prime] * case.c + [case.t_max] * (n_ctx - 1 - case.c)
    for perm in set(itertools.permutations(non_query)):
        yield np.array(list(perm) + [case.t_query], dtype=np.int64)


def iter_cases(d_vocab, n_ctx):
    for t_max in range(d_vocab):
        for t_query in range(t_max + 1):
            c_max = n_ctx - 1 if t_query == t_max else n_ctx - 2
            for c in range(c_max + 1):
                if c == 0:
                    yield PureCase(t_max, t_query, t_max, 0)
                else:
                    for t_prime in range(t_max):
                        yield PureCase(t_max, t_query, t_prime, c)


class TestRelaxationDomination:
    @pytest.mark.parametrize("seed", range(5))
    def test_dominates_exhaustive_maximum_on_tiny_configs(self, seed):
        params = random_params(seed, d_vocab=6, d_model=4, n_ctx=3)
        paths = decompose_paths(params)
        evaluator = CubicEvaluator(paths)
        for case in iter_cases(6, 3):
            relaxed = evaluator.case_value(case)
            worst = max(
                model_behavior(paths, seq) for seq in enumerate_case_sequences(case, 3)
            )
            assert relaxed >= worst - 1e-10, (case, relaxed, worst)

    def test_single_sequence_case_dominates(self):
        params = random_params(7, d_vocab=5, d_model=3, n_ctx=3)
        paths = decompose_paths(params)
        case = PureCase(t_max=3, t_query=3, t_prime=3, c=0)
        seq = np.array([3, 3, 3])
        assert model_behavior_relaxed(paths, case) >= model_behavior(paths, seq) - 1e-12


class TestCaseValidation:
    def test_rejects_query_above_max(self):
        with pytest.raises(ValueError):
            PureCase(t_max=2, t_query=3, t_prime=0, c=1)

    def test_rejects_third_token_at_max(self):
        with pytest.raises(ValueError):
            PureCase(t_max=2, t_query=1, t_prime=2, c=1)

    def test_rejects_too_many_copies(self):
        case = PureCase(t_max=3, t_query=1, t_prime=0, c=2)
        with pytest.raises(ValueError):
            case.validate_for(n_ctx=3)


class TestCubicBound:
    def test_sound_on_zero_model(self):
        params = zero_params()
        cert = cubic_bound(params)
        exact = brute_force_bound(params)
        assert cert.bound <= exact.bound

    @pytest.mark.parametrize("seed", range(6))
    def test_sound_and_not_vacuous_on_random_models(self, seed):
        params = random_params(seed, d_vocab=5, d_model=3, n_ctx=3)
        cert = cubic_bound(params)
        exact = brute_force_bound(params)
        assert cert.bound <= exact.bound + 1e-15

    @pytest.mark.parametrize("seed", [0, 1])
    def test_tight_on_trained_tiny_models(self, seed):
        config = TrainConfig(
            seed=seed, steps=900, batch_size=64, d_vocab=8, d_model=8, n_ctx=3
        )
        params = train(config).params
        cert = cubic_bound(params)
        exact = brute_force_bound(params)
        assert cert.bound <= exact.bound
        assert cert.bound >= 0.8 * exact.bound

    def test_counting_weights_cover_every_sequence(self):
        # sum over cases of (n-1 choose c) * t_max^c telescopes to v^n
        for v, n in [(4, 3), (6, 4), (8, 2)]:
            total = 0
            for t_max in range(v):
                for t_query in range(t_max + 1):
                    c_max = n - 1 if t_query == t_max else n - 2
                    for c in range(c_max + 1):
                        total += comb(n - 1, c) * t_max**c
            assert total == v**n

    def test_certificate_shape(self):
        params = random_params(9, d_vocab=5, d_model=3, n_ctx=3)
        cert = cubic_bound(params)
        assert cert.strategy_id == "cubic"
        assert 0 <= cert.bound <= 1
        assert cert.flops > 0
        assert cert.unexplained_dims == 3 * 25 + 2 * 3 * 5


class TestModelBehavior:
    def test_negative_iff_strictly_correct(self):
        params = random_params(10, d_vocab=6, d_model=4, n_ctx=3)
        paths = decompose_paths(params)
        rng = np.random.default_rng(10)
        for _ in range(200):
            seq = rng.integers(0, 6, size=3)
            gap = model_behavior(paths, seq)
            logits = forward(params, seq)
            if gap < 0:
                assert predict(logits) == seq.max()
