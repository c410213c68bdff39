import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atomic_fsl import tensor as T
from atomic_fsl.ctc import (InfeasibleTargetError, LossConfig, beam_search_decode, classify_by_likelihood,
                            collapse, combined_loss, ctc_forward_backward, ctc_loss, ctc_loss_value,
                            extend_with_blanks, mse_loss)
from atomic_fsl.tensor import Tensor, grad_check

from oracles import brute_force_best_sequence, brute_force_ctc, random_distribution, sequence_masses


def test_single_admissible_path():
    assert ctc_loss_value(np.array([[0.7, 0.2, 0.1]]), [0]) == pytest.approx(-math.log(0.7), abs=1e-12)
    assert -math.log(0.7) == pytest.approx(0.35667, abs=1e-5)


def test_two_window_enumeration_example():
    probs = np.array([[0.6, 0.4], [0.5, 0.5]])
    # paths (0,0), (0,b), (b,0): 0.3 + 0.3 + 0.2
    assert brute_force_ctc(probs, [0]) == pytest.approx(-math.log(0.8), abs=1e-12)
    assert ctc_loss_value(probs, [0]) == pytest.approx(-math.log(0.8), abs=1e-12)
    assert -math.log(0.8) == pytest.approx(0.22314, abs=1e-5)


def _random_instance(rng):
    T_ = int(rng.integers(1, 7))
    K = int(rng.integers(1, 4))
    length = int(rng.integers(1, 3))
    target = [int(c) for c in rng.integers(0, K, size=length)]
    while sum(1 for _ in target) + sum(a == b for a, b in zip(target, target[1:])) > T_:
        target = target[:-1]
    return random_distribution(rng, T_, K + 1), target


def test_dp_equals_path_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(500):
        probs, target = _random_instance(rng)
        assert abs(ctc_loss_value(probs, target) - brute_force_ctc(probs, target)) < 1e-9


def test_repeated_label_needs_blank_between():
    probs = random_distribution(np.random.default_rng(1), 3, 3)
    assert ctc_loss_value(probs, [1, 1]) == pytest.approx(brute_force_ctc(probs, [1, 1]), abs=1e-12)
    with pytest.raises(InfeasibleTargetError):
        ctc_loss_value(probs[:1], [1, 1])
    with pytest.raises(InfeasibleTargetError):
        ctc_loss_value(probs[:2], [1, 1])


def test_zero_probability_symbol_is_inf_not_nan():
    probs = np.array([[0.0, 0.5, 0.5], [0.0, 0.5, 0.5]])
    loss, grad = ctc_forward_backward(probs, [0])
    assert loss == math.inf
    assert np.all(np.isfinite(grad))


def test_zero_probability_entries_keep_gradient_finite():
    probs = np.array([[0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])
    loss, grad = ctc_forward_backward(probs, [0])
    assert math.isfinite(loss) and np.all(np.isfinite(grad))


def test_gradient_wrt_probabilities_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = Tensor(random_distribution(rng, 4, 4, floor=0.1), requires_grad=True)
        target = [int(c) for c in rng.integers(0, 3, size=2)]
        assert grad_check(lambda: ctc_loss(p, target), [p], eps=1e-6) < 1e-6


def test_combined_loss_gradient_through_softmax():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    err = grad_check(lambda: combined_loss(T.softmax_rows(logits), [1], LossConfig(0.7))[0], [logits])
    assert err < 1e-5


def test_mse_examples():
    assert mse_loss(Tensor([[0.7, 0.3, 0.0]]), 0).item() == pytest.approx(0.18, abs=1e-12)
    assert mse_loss(Tensor([[1.0, 0.0, 0.0]]), 0).item() == 0.0
    third = 1.0 / 3.0
    val = mse_loss(Tensor([[third, third, third]]), 0).item()
    assert val == pytest.approx((1 - third) ** 2 + third ** 2, abs=1e-12)
    assert val == pytest.approx(0.5556, abs=1e-4)


def test_mse_ignores_blank_column():
    a = mse_loss(Tensor([[0.5, 0.2, 0.3]]), 1).item()
    b = mse_loss(Tensor([[0.5, 0.2, 0.0]]), 1).item()
    assert a == b


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 10 ** 6))
def test_mse_range(T_, K, seed):
    rng = np.random.default_rng(seed)
    probs = random_distribution(rng, T_, K + 1)
    v = mse_loss(Tensor(probs), int(rng.integers(K))).item()
    assert 0.0 <= v <= 2.0


def test_combined_lambda_zero_is_ctc():
    probs = Tensor(np.array([[0.6, 0.4], [0.5, 0.5]]))
    total, ctc, mse = combined_loss(probs, [0], LossConfig(0.0))
    assert total.item() == ctc == ctc_loss_value(probs.data, [0])


def test_combined_composes_oracles():
    probs = Tensor(np.array([[0.6, 0.4], [0.5, 0.5]]))
    total, ctc, mse = combined_loss(probs, [0], LossConfig(1.0))
    expected_mse = ((1 - 0.6) ** 2 + (1 - 0.5) ** 2) / 2
    assert mse == pytest.approx(expected_mse, abs=1e-12)
    assert total.item() == pytest.approx(-math.log(0.8) + expected_mse, abs=1e-12)


def test_loss_config_rejects_negative_lambda():
    with pytest.raises(ValueError):
        LossConfig(-1.0)


def test_classify_concentrated():
    probs = np.tile([0.05, 0.85, 0.05, 0.05], (5, 1))
    assert classify_by_likelihood(probs)[0] == 1


def test_classify_uniform_ties_to_lowest_index():
    assert classify_by_likelihood(np.full((4, 4), 0.25))[0] == 0


def test_classify_matches_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(50):
        T_, K = int(rng.integers(1, 6)), int(rng.integers(2, 4))
        probs = random_distribution(rng, T_, K + 1)
        mass = sequence_masses(probs)
        expect = int(np.argmax([mass[(c,)] for c in range(K)]))
        pred, scores = classify_by_likelihood(probs)
        assert pred == expect
        np.testing.assert_allclose(np.exp(scores), [mass[(c,)] for c in range(K)], rtol=1e-9)


def test_beam_single_frame():
    assert beam_search_decode(np.array([[0.6, 0.3, 0.1]]), 4) == [0]


def test_beam_all_blank():
    assert beam_search_decode(np.tile([0.1, 0.1, 0.8], (4, 1)), 4) == []


def test_beam_matches_exhaustive_search():
    rng = np.random.default_rng(5)
    for _ in range(20):
        probs = random_distribution(rng, 3, 3)
        assert beam_search_decode(probs, 64) == brute_force_best_sequence(probs)


def test_wide_beam_is_exact_on_longer_inputs():
    rng = np.random.default_rng(6)
    for _ in range(10):
        probs = random_distribution(rng, 5, 3)
        assert beam_search_decode(probs, 3 ** 5) == brute_force_best_sequence(probs)


def test_beam_width_validation():
    with pytest.raises(ValueError):
        beam_search_decode(np.full((2, 3), 1 / 3), 0)


def test_relabeling_invariance():
    rng = np.random.default_rng(7)
    for _ in range(50):
        probs = random_distribution(rng, 5, 4)
        target = [0, 2]
        perm = rng.permutation(3)  # new index of old class c is perm[c]
        relabeled = probs.copy()
        relabeled[:, perm] = probs[:, :3]
        new_target = [int(perm[c]) for c in target]
        assert ctc_loss_value(relabeled, new_target) == pytest.approx(ctc_loss_value(probs, target), abs=1e-12)


def test_time_order_matters():
    rng = np.random.default_rng(8)
    probs = random_distribution(rng, 5, 4)
    shuffled = probs[[4, 2, 0, 3, 1]]
    assert abs(ctc_loss_value(probs, [0, 1]) - ctc_loss_value(shuffled, [0, 1])) > 1e-6


def test_probability_conservation():
    rng = np.random.default_rng(9)
    for T_ in range(1, 5):
        probs = random_distribution(rng, T_, 3)
        K = 2
        single = sum(math.exp(-ctc_loss_value(probs, [c])) for c in range(K))
        blank_only = float(np.prod(probs[:, K]))
        longer = sum(m for seq, m in sequence_masses(probs).items() if len(seq) >= 2)
        assert single + blank_only <= 1 + 1e-9
        assert single + blank_only + longer == pytest.approx(1.0, abs=1e-12)
        if T_ == 1:
            assert single + blank_only == pytest.approx(1.0, abs=1e-12)


def test_extend_with_blanks_and_collapse():
    ext, skip = extend_with_blanks([1, 1, 0], blank=2)
    assert ext.tolist() == [2, 1, 2, 1, 2, 0, 2]
    assert skip.tolist() == [False, False, False, False, False, True, False]
    assert collapse([2, 1, 1, 2, 1, 0, 0, 2], blank=2) == [1, 1, 0]


def test_long_sequence_is_stable_in_log_space():
    rng = np.random.default_rng(10)
    probs = random_distribution(rng, 400, 4)
    loss, grad = ctc_forward_backward(probs, [1])
    assert math.isfinite(loss) and loss > 100
    assert np.all(np.isfinite(grad))
