import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eapo.objectives import (
    EAPOWeights,
    FocalParams,
    bce,
    dpo,
    dpo_four_term,
    eapo_batch,
    focal,
)

LN2 = math.log(2.0)
NO_ALPHA = FocalParams(gamma=2.0, alpha=None)

logits = st.floats(-30, 30, allow_nan=False)
labels = st.sampled_from([0, 1])


def central_diff(f, z, h=1e-5):
    return (f(z + h) - f(z - h)) / (2 * h)


def close_rel(a, b, rel=1e-5, floor=1e-7):
    return abs(a - b) <= max(rel * max(abs(a), abs(b)), floor)


# -- bce -------------------------------------------------------------------


def test_bce_at_zero():
    lv = bce(0.0, 1)
    assert lv.value == pytest.approx(LN2, abs=1e-12)
    assert lv.dvalue_dlogit == pytest.approx(-0.5, abs=1e-12)


def test_bce_value_at_one():
    # ln(1 + e^-1)
    assert bce(1.0, 1).value == pytest.approx(0.31326168751822286, abs=1e-12)


@given(logits)
def test_bce_label_flip_symmetry(z):
    assert bce(z, 1).value == pytest.approx(bce(-z, 0).value, rel=1e-12, abs=1e-300)


def test_bce_no_overflow_for_large_logits():
    assert bce(800.0, 1).value == 0.0
    assert bce(-800.0, 1).value == pytest.approx(800.0)
    assert math.isfinite(bce(800.0, 0).dvalue_dlogit)


def test_bce_rejects_nonfinite():
    with pytest.raises(ValueError):
        bce(float("nan"), 1)
    with pytest.raises(ValueError):
        bce(float("inf"), 0)


# -- focal -----------------------------------------------------------------


@given(logits, labels)
def test_focal_gamma0_unweighted_is_bce(z, y):
    f = focal(z, y, FocalParams(gamma=0.0, alpha=None))
    b = bce(z, y)
    assert f.value == pytest.approx(b.value, abs=1e-12)
    assert f.dvalue_dlogit == pytest.approx(b.dvalue_dlogit, abs=1e-12)


def test_focal_gamma2_at_zero():
    # (1 - 0.5)^2 * ln 2
    assert focal(0.0, 1, NO_ALPHA).value == pytest.approx(0.17328679513998632, abs=1e-12)


@pytest.mark.parametrize("y,expected", [(1, 0.25), (0, 0.75)])
def test_focal_alpha_scales_by_alpha_t(y, expected):
    for z in (-2.0, 0.3, 4.0):
        weighted = focal(z, y, FocalParams(2.0, 0.25)).value
        plain = focal(z, y, NO_ALPHA).value
        assert weighted == pytest.approx(expected * plain, rel=1e-12)


def test_focal_params_validation():
    with pytest.raises(ValueError):
        FocalParams(gamma=-1.0)
    with pytest.raises(ValueError):
        FocalParams(alpha=0.0)
    with pytest.raises(ValueError):
        FocalParams(alpha=1.5)


# -- dpo -------------------------------------------------------------------


@given(logits, labels, st.floats(0.01, 5.0))
def test_dpo_equal_logits_is_ln2(z, y, beta):
    assert dpo(z, z, y, beta).value == pytest.approx(LN2, abs=1e-12)


@pytest.mark.parametrize(
    "y_plus,expected",
    [(1, 0.6443966600735709), (0, 0.744396660073571)],
)
def test_dpo_unit_margin_examples(y_plus, expected):
    # values from the four-log-term evaluation, frozen
    assert dpo(1.5, 0.5, y_plus, 0.1).value == pytest.approx(expected, abs=1e-9)
    assert dpo_four_term(1.5, 0.5, y_plus, 0.1) == pytest.approx(expected, abs=1e-9)


def test_dpo_matches_four_term_form_randomly():
    rng = np.random.default_rng(7)
    for _ in range(2000):
        zt, zr = rng.uniform(-20, 20, 2)
        y = int(rng.integers(2))
        beta = float(rng.uniform(0.01, 2.0))
        assert abs(dpo(zt, zr, y, beta).value - dpo_four_term(zt, zr, y, beta)) < 1e-9


@given(st.floats(-40, 40), st.floats(-40, 40), labels)
def test_dpo_strictly_decreasing_in_signed_margin(a, b, y):
    s = 2 * y - 1
    lo, hi = sorted((a, b))
    if hi - lo < 1e-3:
        return
    # larger s*(theta - ref) must give a strictly smaller loss
    v_lo = dpo(s * lo, 0.0, y, 0.5).value
    v_hi = dpo(s * hi, 0.0, y, 0.5).value
    assert v_hi < v_lo


def test_dpo_beta_must_be_positive():
    with pytest.raises(ValueError):
        dpo(0.0, 0.0, 1, 0.0)


# -- analytic gradients ------------------------------------------------------


def test_all_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    fp = FocalParams(gamma=2.0, alpha=0.25)
    for _ in range(1000):
        z = float(rng.uniform(-8, 8))
        zr = float(rng.uniform(-8, 8))
        y = int(rng.integers(2))
        beta = float(rng.uniform(0.05, 2.0))
        cases = [
            (bce(z, y).dvalue_dlogit, lambda t: bce(t, y).value),
            (focal(z, y, fp).dvalue_dlogit, lambda t: focal(t, y, fp).value),
            (focal(z, y, NO_ALPHA).dvalue_dlogit, lambda t: focal(t, y, NO_ALPHA).value),
            (dpo(z, zr, y, beta).dvalue_dlogit, lambda t: dpo(t, zr, y, beta).value),
        ]
        for analytic, f in cases:
            assert close_rel(analytic, central_diff(f, z)), (analytic, central_diff(f, z))


# -- combined objective -------------------------------------------------------


def test_eapo_batch_worked_example():
    res = eapo_batch(
        [(0.0, 1)],
        [(1.0, 0.0, 1)],
        [(-1.0, 0.0, 1)],
        EAPOWeights(beta=0.1, lambda1=1.0, lambda2=0.1),
        "bce",
    )
    assert res.value == pytest.approx(1.4119835066408735, abs=1e-9)


def test_eapo_batch_zero_lambdas_is_supervised_mean():
    rng = np.random.default_rng(0)
    z = rng.normal(size=9)
    y = rng.integers(0, 2, 9)
    sft = list(zip(z, y))
    pairs = list(zip(z, rng.normal(size=9), y))
    res = eapo_batch(sft, pairs, pairs[:3], EAPOWeights(0.1, 0.0, 0.0), "focal")
    expected = np.mean([focal(a, int(b)).value for a, b in sft])
    assert res.value == pytest.approx(expected, rel=1e-12)
    res_alone = eapo_batch(sft, [], [], EAPOWeights(0.1, 0.0, 0.0), "focal")
    assert res.value == res_alone.value


def test_eapo_batch_identical_logits_adds_lambda_ln2():
    sft = [(0.3, 1), (-1.2, 0)]
    pairs = [(0.3, 0.3, 1), (-1.2, -1.2, 0)]
    w = EAPOWeights(0.1, 1.0, 0.1)
    res = eapo_batch(sft, pairs, pairs[:1], w, "bce")
    l_sft = np.mean([bce(0.3, 1).value, bce(-1.2, 0).value])
    assert res.value == pytest.approx(l_sft + 1.1 * LN2, abs=1e-12)


def test_eapo_batch_empty_extreme_contributes_zero():
    with pytest.warns(UserWarning):
        res = eapo_batch([(0.0, 1)], [(0.0, 0.0, 1)], [], EAPOWeights(), "bce")
    assert res.value == pytest.approx(2 * LN2)
    assert res.extreme_grad.size == 0


def test_eapo_batch_gradients_are_scaled_per_term():
    w = EAPOWeights(0.5, 2.0, 0.3)
    sft = [(0.2, 1), (0.7, 0)]
    local = [(0.2, 0.1, 1), (0.7, -0.4, 0)]
    ext = [(1.1, 0.3, 1)]
    res = eapo_batch(sft, local, ext, w, "bce")
    np.testing.assert_allclose(res.sft_grad, [bce(z, y).dvalue_dlogit / 2 for z, y in sft])
    np.testing.assert_allclose(res.local_grad, [2.0 * dpo(a, b, y, 0.5).dvalue_dlogit / 2 for a, b, y in local])
    np.testing.assert_allclose(res.extreme_grad, [0.3 * dpo(1.1, 0.3, 1, 0.5).dvalue_dlogit])


def test_eapo_batch_all_empty_is_an_error():
    with pytest.raises(ValueError):
        eapo_batch([], [], [], EAPOWeights())


def test_eapo_weights_validation():
    with pytest.raises(ValueError):
        EAPOWeights(beta=0.0)
    with pytest.raises(ValueError):
        EAPOWeights(lambda1=-0.1)


@settings(max_examples=50)
@given(st.lists(st.tuples(logits, labels), min_size=1, max_size=20))
def test_losses_nonnegative_and_finite(items):
    for z, y in items:
        for lv in (bce(z, y), focal(z, y), dpo(z, -z, y, 0.1)):
            assert lv.value >= 0 and math.isfinite(lv.value)
            assert math.isfinite(lv.dvalue_dlogit)
