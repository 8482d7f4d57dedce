"""Brute-force certifier against a per-sequence loop oracle."""

import itertools

import numpy as np
import pytest

from maxk.brute import BudgetExceededError, brute_force_bound, sequences_from_indices
from maxk.model import ModelParams, forward, predict
from maxk.training import init_params, make_rng


def loop_oracle_accuracy(params):
    """Independent oracle: raw forward + argmax, one sequence at a time."""
    v, _, n = params.dims
    correct = 0
    for seq in itertools.product(range(v), repeat=n):
        arr = np.array(seq, dtype=np.int64)
        if predict(forward(params, arr)) == arr.max():
            correct += 1
    return correct, v**n


def test_zero_weight_two_by_two():
    # all logits zero -> always predicts token 0 -> correct only on (0, 0)
    params = ModelParams(
        e=np.zeros((2, 1)), p=np.zeros((2, 1)), q=np.zeros((1, 1)),
        k=np.zeros((1, 1)), v=np.zeros((1, 1)), o=np.zeros((1, 1)),
        u=np.zeros((1, 2)),
    )
    cert = brute_force_bound(params)
    assert cert.bound == 0.25
    assert cert.detail["correct_count"] == 1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matches_loop_oracle(seed):
    params = init_params(make_rng(seed), d_vocab=4, d_model=3, n_ctx=2)
    cert = brute_force_bound(params)
    correct, total = loop_oracle_accuracy(params)
    assert cert.detail["correct_count"] == correct
    assert cert.bound == correct / total


def test_chunked_and_threaded_counts_agree():
    params = init_params(make_rng(3), d_vocab=6, d_model=4, n_ctx=3)
    serial = brute_force_bound(params, chunk_size=7)
    whole = brute_force_bound(params, chunk_size=10**9)
    threaded = brute_force_bound(params, threads=4, chunk_size=13)
    assert serial.detail == whole.detail == threaded.detail


def test_budget_refusal_carries_estimate():
    params = init_params(make_rng(4), d_vocab=8, d_model=4, n_ctx=3)
    with pytest.raises(BudgetExceededError) as err:
        brute_force_bound(params, budget=100)
    assert err.value.sequences == 8**3
    assert err.value.estimated_flops > 0


def test_flops_are_per_forward_times_sequences():
    params = init_params(make_rng(5), d_vocab=5, d_model=3, n_ctx=2)
    cert = brute_force_bound(params)
    from maxk.brute import single_forward_flops

    assert cert.flops == single_forward_flops(params) * 5**2


def test_lexicographic_decode():
    seqs = sequences_from_indices(np.arange(6), d_vocab=2, n_ctx=3)
    want = [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1], [1, 0, 0], [1, 0, 1]]
    np.testing.assert_array_equal(seqs, want)
