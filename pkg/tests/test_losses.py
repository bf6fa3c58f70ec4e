import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dycelab import losses, oracle
from dycelab.losses import IGNORE_INDEX, BatchPrediction, DyCEConfig
from dycelab.numkern import ContractError, Rng

# frozen with mpmath at 30 digits
CE_HALF_THREEQ = 0.490414626505863118
DYCE_EXAMPLE = 1.484632281597999860
CONTRASTIVE_ORTHO = 0.626523375036445668
LN2 = 0.693147180559945309


def bp(probs, labels):
    return BatchPrediction(np.array(probs, dtype=float), np.array(labels))


def test_ce_perfect_prediction():
    res = losses.ce_loss(bp([[1.0, 1e-300]], [0]))
    assert res.value == 0.0
    assert res.grad_probs[0, 0] == -1.0


def test_ce_hand_value():
    res = losses.ce_loss(bp([[0.5, 0.5], [0.25, 0.75]], [0, 1]))
    assert res.value == pytest.approx(CE_HALF_THREEQ, abs=1e-15)
    np.testing.assert_allclose(res.grad_probs, [[-1.0, 0.0], [0.0, -1 / (2 * 0.75)]])


def test_ce_ignores_sentinel_and_rejects_empty():
    a = losses.ce_loss(bp([[0.5, 0.5], [0.1, 0.9]], [0, IGNORE_INDEX]))
    assert a.value == pytest.approx(LN2)
    assert (a.grad_probs[1] == 0).all()
    with pytest.raises(ContractError, match="empty effective batch"):
        losses.ce_loss(bp([[0.5, 0.5]], [IGNORE_INDEX]))


def test_ce_clamps_and_flags():
    res = losses.ce_loss(bp([[1.0, 0.0]], [1]))
    assert res.diagnostics["clamp_count"] == 1
    assert res.value == pytest.approx(-math.log(1e-300))


def test_mine_full_batch():
    b = oracle.random_batch(Rng(1), S=6, n_classes=3)
    sub = losses.mine_hard_subset(b, 1.0)
    assert sub.f_H == 6 and list(sub.indices) == list(range(6))


def _batch_with_losses(ls):
    p = np.exp(-np.array(ls))
    return bp(np.stack([p, 1 - p], axis=1), [0] * len(ls))


def test_mine_sort_oracle():
    sub = losses.mine_hard_subset(_batch_with_losses([0.1, 0.9, 1.2, 0.05]), 0.5)
    assert list(sub.indices) == [1, 2]


def test_mine_tie_break_lower_index():
    ls = [0.1, 0.2, 0.3, 0.7, 0.2, 0.05, 0.01, 0.7, 0.9, 0.1]
    sub = losses.mine_hard_subset(_batch_with_losses(ls), 0.2)
    assert list(sub.indices) == [3, 8]


def test_mine_counts_consistent():
    b = oracle.random_batch(Rng(2), S=8, n_classes=4)
    sub = losses.mine_hard_subset(b, 0.3)
    assert sub.f_H == math.ceil(0.3 * 8) == len(sub.indices)
    assert sub.f_c.sum() == sub.f_H and (sub.f_c <= sub.f_H).all()


def test_dyce_reduces_to_ce():
    b = oracle.random_batch(Rng(3))
    cfg = DyCEConfig(omega=1.0, hard_fraction=1.0, allow_boundary=True)
    assert losses.dyce_loss(b, cfg).value == pytest.approx(losses.ce_loss(b).value, abs=1e-12)


def test_dyce_hand_example():
    t = np.array([0.905, 0.407, 0.301, 0.951])
    labels = [0, 1, 0, 1]
    probs = np.zeros((4, 2))
    probs[np.arange(4), labels] = t
    probs[np.arange(4), 1 - np.array(labels)] = 1 - t
    res = losses.dyce_loss(bp(probs, labels), DyCEConfig(0.5, 0.5))
    assert list(res.diagnostics["indices"]) == [1, 2]
    assert res.diagnostics["f_H"] == 2
    assert list(res.diagnostics["f_c"]) == [1, 1]
    assert res.value == pytest.approx(DYCE_EXAMPLE, abs=1e-12)
    assert res.value == pytest.approx(1.4849, abs=1e-3)


def test_dyce_invalid_config():
    with pytest.raises(ContractError):
        DyCEConfig(omega=1.0)
    with pytest.raises(ContractError):
        DyCEConfig(hard_fraction=0.0)


def test_dyce_sparsity_and_lower_bound():
    rng = Rng(4)
    for _ in range(50):
        b = oracle.random_batch(rng)
        cfg = DyCEConfig(float(rng.uniform(None, 0.01, 0.99)), float(rng.uniform(None, 0.1, 1.0)))
        dy = losses.dyce_loss(b, cfg)
        ce = losses.ce_loss(b)
        H = set(dy.diagnostics["indices"].tolist())
        for i in range(len(b.labels)):
            for c in range(b.n_classes):
                if c != b.labels[i] or i not in H:
                    assert dy.grad_probs[i, c] == 0.0
                if c != b.labels[i]:
                    assert ce.grad_probs[i, c] == 0.0
            if i in H:
                y = b.labels[i]
                assert abs(dy.grad_probs[i, y]) >= abs(ce.grad_probs[i, y]) * (1 - 1e-12)


@settings(max_examples=200)
@given(st.integers(1, 64), st.integers(1, 64), st.floats(0.001, 0.999))
def test_tail_amplification_monotone(fa, fb, omega):
    if fa > fb:
        fa, fb = fb, fa
    w = losses.dyce_weights(max(fb, 1), [fa, fb], omega)
    assert w[0] >= w[1]


def test_dyce_absent_class_contributes_nothing():
    b = bp([[0.7, 0.2, 0.1], [0.6, 0.3, 0.1]], [0, 1])
    res = losses.dyce_loss(b, DyCEConfig(0.5, 1.0))
    assert res.diagnostics["f_c"][2] == 0 and res.diagnostics["per_class"][2] == 0.0
    assert math.isfinite(res.value)


def test_dyce_diagnostics_json():
    b = oracle.random_batch(Rng(5))
    payload = json.loads(losses.dyce_loss(b, DyCEConfig()).to_json())
    assert {"value", "clamp_count", "f_H", "f_c", "per_class"} <= set(payload)
    assert sum(payload["per_class"]) == pytest.approx(payload["value"])


def test_wce_cases():
    b = oracle.random_batch(Rng(6), n_classes=3)
    assert losses.wce_loss(b, np.ones(3)).value == pytest.approx(losses.ce_loss(b).value, abs=1e-15)
    res = losses.wce_loss(bp([[0.5, 0.5]], [0]), [2.0, 1.0])
    assert res.value == pytest.approx(2 * LN2, abs=1e-12)
    only0 = bp([[0.6, 0.4], [0.3, 0.7]], [0, 0])
    assert losses.wce_loss(only0, [1.5, 1e-9]).value == pytest.approx(losses.wce_loss(only0, [1.5, 7.0]).value)
    with pytest.raises(ContractError):
        losses.wce_loss(b, [1.0, 0.0, 1.0])


def test_focal_cases():
    b = oracle.random_batch(Rng(7))
    assert losses.focal_loss(b, 0.0).value == pytest.approx(losses.ce_loss(b).value, abs=1e-15)
    for g in (0.5, 1.0, 2.0):
        res = losses.focal_loss(bp([[1.0, 0.0]], [0]), g)
        assert res.value == 0.0 and np.isfinite(res.grad_probs).all()
    res = losses.focal_loss(bp([[0.5, 0.5]], [0]), 2.0)
    assert res.value == pytest.approx(0.25 * LN2, abs=1e-12)
    with pytest.raises(ContractError):
        losses.focal_loss(b, -1.0)


def test_contrastive_cases():
    rng = Rng(8)
    v, t = rng.normal((1, 3)), rng.normal((1, 3))
    assert losses.contrastive_loss(v, t, 0.3).value == 0.0
    e = np.eye(2)
    assert losses.contrastive_loss(e, e, 1.0).value == pytest.approx(CONTRASTIVE_ORTHO, abs=1e-12)
    with pytest.raises(ContractError, match="degenerate embedding"):
        losses.contrastive_loss(np.zeros((2, 2)), e, 1.0)
    r = losses.contrastive_loss(e, e, 1.0, normalize=True)
    assert r.value == pytest.approx(CONTRASTIVE_ORTHO / 2)


def test_contrastive_nonnegative_and_permutation_invariant():
    rng = Rng(9)
    for _ in range(30):
        n = int(rng.integers(1, 7))
        v, t = rng.normal((n, 4)), rng.normal((n, 4))
        tau = float(rng.uniform(None, 0.1, 2.0))
        val = losses.contrastive_loss(v, t, tau).value
        assert val >= 0
        perm = rng.permutation(n)
        assert losses.contrastive_loss(v[perm], t[perm], tau).value == pytest.approx(val, abs=1e-12)


def _pm(rows, shape=(1, 1)):
    return np.array(rows, dtype=float).reshape(1, *shape, -1)


def test_consistency_fully_masked():
    s = _pm([[0.6, 0.4], [0.5, 0.5]], (1, 2))
    t = _pm([[0.7, 0.3], [0.4, 0.6]], (1, 2))
    res = losses.consistency_loss(s, t, 0.95)
    assert res.value == 0.0 and (res.grad_probs == 0).all()


def test_consistency_one_hot_zero():
    oh = _pm([[1.0, 0.0], [0.0, 1.0]], (1, 2))
    assert losses.consistency_loss(oh, oh.copy(), 0.0).value == 0.0


@pytest.mark.parametrize("normalize, count", [("masked", 1), ("pixels", 2), ("images", 1)])
def test_consistency_hand_value(normalize, count):
    s = _pm([[0.5, 0.5], [0.9, 0.1]], (1, 2))
    t = _pm([[0.02, 0.98], [0.6, 0.4]], (1, 2))
    res = losses.consistency_loss(s, t, 0.95, normalize=normalize)
    assert res.value == pytest.approx(LN2 / count, abs=1e-15)
    g = res.grad_probs.reshape(2, 2)
    np.testing.assert_array_equal(g[1], 0.0)
    assert g[0, 1] == pytest.approx(-1 / (count * 0.5)) and g[0, 0] == 0.0


def test_consistency_student_gate():
    s = _pm([[0.97, 0.03], [0.5, 0.5]], (1, 2))
    t = _pm([[0.3, 0.7], [0.99, 0.01]], (1, 2))
    res = losses.consistency_loss(s, t, 0.95, gate="student")
    # only pixel 0 passes the student gate; its pseudo-label is the teacher argmax (class 1)
    assert res.value == pytest.approx(-math.log(0.03))
    assert res.diagnostics["n_masked"] == 1


def test_consistency_shape_mismatch():
    with pytest.raises(ContractError):
        losses.consistency_loss(np.ones((1, 2, 2, 3)) / 3, np.ones((1, 2, 1, 3)) / 3, 0.5)


def test_supervised_modes():
    oh = np.zeros((1, 2, 2, 3))
    labels = np.array([[[0, 1], [2, 0]]])
    for i, j in itertools.product(range(2), range(2)):
        oh[0, i, j, labels[0, i, j]] = 1.0
    assert losses.supervised_loss(oh, labels, "CE").value == 0.0
    assert losses.supervised_loss(oh, labels, "DyCE", DyCEConfig()).value == 0.0
    rng = Rng(10)
    raw = rng.uniform((1, 2, 2, 3), 0.1, 1.0)
    p = raw / raw.sum(-1, keepdims=True)
    cfg = DyCEConfig(1.0, 1.0, allow_boundary=True)
    ce = losses.supervised_loss(p, labels, "CE").value
    assert losses.supervised_loss(p, labels, "DyCE", cfg).value == pytest.approx(ce, abs=1e-12)
    brute = -sum(math.log(p[0, i, j, labels[0, i, j]]) for i in range(2) for j in range(2)) / 4
    assert ce == pytest.approx(brute, abs=1e-15)


def test_supervised_all_ignored():
    with pytest.raises(ContractError):
        losses.supervised_loss(np.full((1, 1, 2, 2), 0.5), np.full((1, 1, 2), IGNORE_INDEX))
