import math

import numpy as np
import pytest
from scipy.spatial.distance import jensenshannon

import numkernel as nk
from bag_data import SoftLabel
from errors import NumericError, ShapeError
from hierloss import (
    KLDirection, LossBreakdown, LossSettings, aggregate_fine_to_coarse, cross_entropy_hier, iha_loss,
    total_loss, uhd_adjust, uhd_loss,
)
from mil_model import ProbPair
from numkernel import check_gradients
from remix import soften_labels
from taxonomy import FineClass

UNIFORM3 = np.full(3, 1 / 3)
UNIFORM7 = np.full(7, 1 / 7)


def _random_simplex(rng, size):
    return nk.softmax(rng.normal(size=size))


# ---------- 交叉熵 ----------

def test_cross_entropy_perfect_prediction(taxonomy):
    target = SoftLabel.one_hot(FineClass.HP, taxonomy)
    assert float(cross_entropy_hier(ProbPair(target.coarse, target.fine), target)) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_uniform(taxonomy):
    value = cross_entropy_hier(ProbPair(UNIFORM3, UNIFORM7), SoftLabel.one_hot(FineClass.IP, taxonomy))
    assert float(value) == pytest.approx(0.5 * (math.log(3) + math.log(7)), abs=1e-12)
    assert float(value) == pytest.approx(1.52226, abs=1e-5)


def test_cross_entropy_example(taxonomy):
    probs = ProbPair(np.array([0.5, 0.3, 0.2]), UNIFORM7)
    value = cross_entropy_hier(probs, SoftLabel.one_hot(FineClass.TA, taxonomy))
    assert float(value) == pytest.approx(1.31952, abs=1e-5)


def test_cross_entropy_shape_error(taxonomy):
    with pytest.raises(ShapeError):
        cross_entropy_hier(ProbPair(np.full(2, 0.5), UNIFORM7), SoftLabel.one_hot(FineClass.TA, taxonomy))


def test_cross_entropy_minimized_at_targets(rng, taxonomy):
    target = soften_labels(0.3, 15, FineClass.TA, FineClass.HP, taxonomy)
    best = float(cross_entropy_hier(ProbPair(target.coarse, target.fine), target))
    for _ in range(50):
        coarse = target.coarse + rng.uniform(0, 0.05, size=3)
        fine = target.fine + rng.uniform(0, 0.05, size=7)
        perturbed = ProbPair(coarse / coarse.sum(), fine / fine.sum())
        assert best < float(cross_entropy_hier(perturbed, target))


# ---------- 聚合与 IHA ----------

def test_aggregate_examples(taxonomy):
    np.testing.assert_allclose(aggregate_fine_to_coarse(UNIFORM7, taxonomy), [3 / 7, 2 / 7, 2 / 7], atol=1e-15)
    np.testing.assert_array_equal(aggregate_fine_to_coarse(np.eye(7)[int(FineClass.SSL)], taxonomy), [0, 1, 0])
    np.testing.assert_allclose(
        aggregate_fine_to_coarse(np.array([0.1, 0.2, 0.3, 0.05, 0.15, 0.1, 0.1]), taxonomy),
        [0.6, 0.2, 0.2], atol=1e-15)


def test_aggregate_preserves_mass(rng, taxonomy):
    for _ in range(20):
        p = _random_simplex(rng, 7)
        assert math.fsum(aggregate_fine_to_coarse(p, taxonomy)) == pytest.approx(math.fsum(p), abs=1e-15)


def test_iha_identities(taxonomy):
    fine = np.array([0.1, 0.2, 0.3, 0.05, 0.15, 0.1, 0.1])
    assert float(iha_loss(np.array([0.6, 0.2, 0.2]), fine, taxonomy)) == pytest.approx(0.0, abs=1e-15)
    disjoint = iha_loss(np.array([1.0, 0.0, 0.0]), np.eye(7)[int(FineClass.HP)], taxonomy)
    assert float(disjoint) == pytest.approx(math.log(2), abs=1e-12)


def test_iha_matches_reference_jensen_shannon(taxonomy):
    p_coarse = np.array([0.5, 0.3, 0.2])
    value = float(iha_loss(p_coarse, UNIFORM7, taxonomy))
    reference = jensenshannon(p_coarse, [3 / 7, 2 / 7, 2 / 7]) ** 2
    assert value == pytest.approx(reference, abs=1e-12)
    assert value == pytest.approx(0.005264, abs=1e-5)


def test_iha_is_bounded_and_symmetric(rng, taxonomy):
    for _ in range(30):
        p_coarse = _random_simplex(rng, 3)
        p_fine = _random_simplex(rng, 7)
        value = float(iha_loss(p_coarse, p_fine, taxonomy))
        assert 0.0 <= value <= math.log(2)
        aggregated = aggregate_fine_to_coarse(p_fine, taxonomy)
        assert value == pytest.approx(jensenshannon(aggregated, p_coarse) ** 2, abs=1e-12)


# ---------- UHD ----------

def test_uhd_adjust_examples(rng, taxonomy):
    p_fine = _random_simplex(rng, 7)
    np.testing.assert_allclose(uhd_adjust(p_fine, UNIFORM3, taxonomy), p_fine, atol=1e-15)
    np.testing.assert_allclose(uhd_adjust(UNIFORM7, np.array([0.5, 0.3, 0.2]), taxonomy),
                               [0.2, 0.2, 0.2, 0.12, 0.12, 0.08, 0.08], atol=1e-15)
    np.testing.assert_array_equal(uhd_adjust(np.eye(7)[0], _random_simplex(rng, 3), taxonomy), np.eye(7)[0])


def test_uhd_adjust_then_aggregate_oracle(rng, taxonomy):
    for _ in range(20):
        p_fine = _random_simplex(rng, 7)
        p_coarse = _random_simplex(rng, 3)
        product = p_coarse * aggregate_fine_to_coarse(p_fine, taxonomy)
        np.testing.assert_allclose(aggregate_fine_to_coarse(uhd_adjust(p_fine, p_coarse, taxonomy), taxonomy),
                                   product / product.sum(), atol=1e-14)


def test_uhd_adjust_zero_product(taxonomy):
    with pytest.raises(NumericError):
        uhd_adjust(np.eye(7)[0], np.array([0.0, 1.0, 0.0]), taxonomy)


def test_uhd_loss_examples():
    p = np.array([0.1, 0.2, 0.3, 0.05, 0.15, 0.1, 0.1])
    assert float(uhd_loss(p, p)) == pytest.approx(0.0, abs=1e-15)
    assert float(uhd_loss(UNIFORM7, np.eye(7)[0])) == pytest.approx(math.log(7), abs=1e-12)
    adjusted = np.zeros(7)
    adjusted[[int(FineClass.TA), int(FineClass.LP)]] = 0.5
    target = np.zeros(7)
    target[int(FineClass.TA)], target[int(FineClass.LP)] = 0.8, 0.2
    assert float(uhd_loss(adjusted, target)) == pytest.approx(0.19274, abs=1e-5)


def test_uhd_loss_zero_on_support_of_target():
    target = np.zeros(7)
    target[[0, 6]] = 0.5
    assert float(uhd_loss(target, target)) == 0.0
    assert float(uhd_loss(UNIFORM7, target)) > 0.0


def test_literal_kl_direction_is_finite_for_hard_labels():
    value = float(uhd_loss(UNIFORM7, np.eye(7)[0], KLDirection.PRED_TO_TARGET))
    assert math.isfinite(value)
    assert value > float(uhd_loss(UNIFORM7, np.eye(7)[0], KLDirection.TARGET_TO_PRED))


# ---------- 总损失 ----------

def test_total_loss_perfect_prediction(taxonomy):
    target = SoftLabel.one_hot(FineClass.TSA, taxonomy)
    eps = 1e-13
    coarse = np.clip(target.coarse, eps, None)
    fine = np.clip(target.fine, eps, None)
    breakdown = total_loss(ProbPair(coarse / coarse.sum(), fine / fine.sum()), target, taxonomy)
    assert breakdown.ce == pytest.approx(0.0, abs=1e-9)
    assert breakdown.iha == pytest.approx(0.0, abs=1e-9)
    assert breakdown.uhd == pytest.approx(0.0, abs=1e-9)


def test_total_is_sum_of_terms(rng, taxonomy):
    for _ in range(20):
        probs = ProbPair(_random_simplex(rng, 3), _random_simplex(rng, 7))
        label = FineClass(int(rng.integers(7)))
        b = total_loss(probs, SoftLabel.one_hot(label, taxonomy), taxonomy)
        assert abs(b.total - (b.ce + b.iha + b.uhd)) <= 1e-12
        assert float(nk.value_of(b.node)) == pytest.approx(b.total, abs=1e-12)


def test_disabled_terms_are_exactly_zero(rng, taxonomy):
    probs = ProbPair(_random_simplex(rng, 3), _random_simplex(rng, 7))
    target = SoftLabel.one_hot(FineClass.TA, taxonomy)
    b = total_loss(probs, target, taxonomy, LossSettings(use_iha=False, use_uhd=False))
    assert b.iha == 0.0 and b.uhd == 0.0
    assert b.total == b.ce


def test_disabled_terms_are_excluded_from_gradient(rng, taxonomy):
    logits = {"c": rng.normal(size=3), "f": rng.normal(size=7)}
    target = SoftLabel.one_hot(FineClass.HP, taxonomy)

    def grads(settings):
        tape = nk.GradTape()
        c, f = tape.parameter("c", logits["c"]), tape.parameter("f", logits["f"])
        return tape.grad(total_loss(ProbPair(nk.softmax(c), nk.softmax(f)), target, taxonomy, settings).node)

    ce_only = grads(LossSettings(use_iha=False, use_uhd=False))
    tape = nk.GradTape()
    c, f = tape.parameter("c", logits["c"]), tape.parameter("f", logits["f"])
    reference = tape.grad(cross_entropy_hier(ProbPair(nk.softmax(c), nk.softmax(f)), target))
    np.testing.assert_array_equal(ce_only["c"], reference["c"])
    np.testing.assert_array_equal(ce_only["f"], reference["f"])


def test_breakdown_mean_is_order_invariant():
    items = [LossBreakdown(0.1 * i, 0.01 * i, 0.001 * i, 0.111 * i) for i in range(1, 8)]
    forward = LossBreakdown.mean(items)
    backward = LossBreakdown.mean(reversed(items))
    assert forward.to_dict() == backward.to_dict()
    assert LossBreakdown.mean([]).total == 0.0


# ---------- 梯度 ----------

def _logit_loss(fn):
    def build(p):
        return fn(ProbPair(nk.softmax(p["c"]), nk.softmax(p["f"])))
    return build


@pytest.mark.parametrize("which", ["ce", "iha", "uhd", "uhd_literal", "total"])
def test_loss_gradients_match_finite_differences(which, rng, taxonomy):
    target = soften_labels(0.4, 15, FineClass.TVA, FineClass.SSL, taxonomy)
    fns = {
        "ce": lambda probs: cross_entropy_hier(probs, target),
        "iha": lambda probs: iha_loss(probs.coarse, probs.fine, taxonomy),
        "uhd": lambda probs: uhd_loss(uhd_adjust(probs.fine, probs.coarse, taxonomy), target.fine),
        "uhd_literal": lambda probs: uhd_loss(uhd_adjust(probs.fine, probs.coarse, taxonomy), target.fine,
                                              KLDirection.PRED_TO_TARGET),
        "total": lambda probs: total_loss(probs, target, taxonomy).node,
    }
    for _ in range(20):
        params = {"c": rng.normal(size=3), "f": rng.normal(size=7)}
        assert check_gradients(_logit_loss(fns[which]), params) < 1e-4
