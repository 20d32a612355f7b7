import numpy as np
import pytest

from eapo.data import Dataset, SyntheticConfig, generate_synthetic
from eapo.evaluation import roc_auc
from eapo.model import freeze_reference, init_classifier
from eapo.objectives import EAPOWeights, FocalParams
from eapo.retrieval import build_local_manifold, extract_extreme
from eapo.training import (
    AdamState,
    FinetuneConfig,
    PretrainConfig,
    TrainingError,
    adam_step,
    eapo_param_gradient,
    finetune,
    pretrain,
)


def adam_oracle(grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam, unrolled from the textbook update."""
    m = v = 0.0
    theta = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    return theta


def small_problem(seed=0, n=400, dim=4, rate=0.2):
    cfg = SyntheticConfig(dim=dim, n_train=n, n_test=n // 2, positive_rate=rate, seed=seed)
    return generate_synthetic(cfg)


# -- adam ------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    _, out = adam_step(AdamState.zeros(2), p, np.zeros(2), 0.1)
    assert np.array_equal(out, p)


def test_adam_first_step_moves_against_gradient_by_lr():
    p = np.zeros(3)
    _, out = adam_step(AdamState.zeros(3), p, np.array([2.0, -0.5, 1e-3]), 0.01)
    np.testing.assert_allclose(out, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_two_steps_match_unrolled_oracle():
    state, p = AdamState.zeros(1), np.zeros(1)
    for _ in range(2):
        state, p = adam_step(state, p, np.ones(1), 0.1)
    assert p[0] == pytest.approx(adam_oracle([1.0, 1.0], 0.1), abs=1e-15)
    assert p[0] == pytest.approx(-0.2, abs=1e-7)
    assert state.step_count == 2


def test_adam_random_sequences_match_oracle():
    rng = np.random.default_rng(0)
    gs = rng.normal(size=(25, 3))
    state, p = AdamState.zeros(3), np.zeros(3)
    for g in gs:
        state, p = adam_step(state, p, g, 0.05)
    for j in range(3):
        assert p[j] == pytest.approx(adam_oracle(gs[:, j], 0.05), abs=1e-12)


def test_adam_is_functional_and_rejects_nan():
    s0 = AdamState.zeros(2)
    p = np.ones(2)
    adam_step(s0, p, np.ones(2), 0.1)
    assert s0.step_count == 0 and np.all(s0.m == 0) and np.all(p == 1)
    with pytest.raises(ValueError):
        adam_step(s0, p, np.array([np.nan, 0.0]), 0.1)
    with pytest.raises(ValueError):
        adam_step(s0, p, np.ones(3), 0.1)


# -- pretraining -------------------------------------------------------------


def test_pretrain_is_deterministic_and_pure():
    train, _ = small_problem()
    m0 = init_classifier("mlp", 4, [8], seed=1)
    before = m0.params.copy()
    cfg = PretrainConfig(loss="focal", epochs=3, learning_rate=0.01, batch_size=64, seed=2)
    a, ha = pretrain(m0, train, cfg)
    b, hb = pretrain(m0, train, cfg)
    assert np.array_equal(a.params, b.params) and ha.losses == hb.losses
    assert np.array_equal(m0.params, before)
    assert len(ha) == 3


def test_pretrain_learns_separable_problem():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 400)
    x = rng.normal(size=(400, 2)) + np.where(y[:, None] == 1, 3.0, -3.0)
    ds = Dataset(x, y, np.where(y == 1, 1e8, np.nan))
    cfg = PretrainConfig(loss="bce", epochs=50, learning_rate=0.05, batch_size=400, seed=0)
    model, hist = pretrain(init_classifier("logistic", 2, seed=0), ds, cfg)
    assert roc_auc(model.forward(x), y) > 0.99
    tail = hist.losses[-10:]
    assert all(b <= a + 1e-3 for a, b in zip(tail, tail[1:]))


def test_pretrain_zero_lr_is_a_no_op():
    train, _ = small_problem()
    m0 = init_classifier("mlp", 4, [5], seed=3)
    m1, _ = pretrain(m0, train, PretrainConfig(epochs=2, learning_rate=0.0, batch_size=50))
    assert np.array_equal(m0.params, m1.params)


def test_pretrain_monitor_and_history_csv(tmp_path):
    train, _ = small_problem()
    _, hist = pretrain(
        init_classifier("logistic", 4),
        train,
        PretrainConfig(epochs=4, batch_size=100),
        monitor=lambda m: roc_auc(m.forward(train.features), train.labels),
    )
    assert all(0 <= v <= 1 for v in hist.metrics)
    hist.write_csv(tmp_path / "h.csv")
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 5


def test_pretrain_nonfinite_loss_raises():
    x = np.array([[1e308, 1e308], [-1e308, -1e308]])
    ds = Dataset(x, [1, 0], [5.0, None])
    m = init_classifier("logistic", 2, seed=0)
    m.params[:] = [1.0, 1.0, 0.0]
    with np.errstate(over="ignore"), pytest.raises(TrainingError, match="epoch 0"):
        pretrain(m, ds, PretrainConfig(loss="bce", epochs=1))


def test_pretrain_dimension_mismatch():
    train, _ = small_problem()
    with pytest.raises(TrainingError):
        pretrain(init_classifier("logistic", 3), train, PretrainConfig(epochs=1))


# -- fine-tuning --------------------------------------------------------------


@pytest.fixture(scope="module")
def adapted_setup():
    train, test = small_problem(seed=4, n=600)
    base, _ = pretrain(
        init_classifier("mlp", 4, [8], seed=0), train, PretrainConfig(epochs=5, batch_size=64)
    )
    manifold = build_local_manifold(test.features, train, 3)
    return base, freeze_reference(base), manifold, extract_extreme(manifold)


def test_sft_only_equals_zero_lambda_eapo(adapted_setup):
    base, ref, man, ext = adapted_setup
    kw = dict(epochs=3, learning_rate=1e-3, batch_size=32, seed=5)
    a, _ = finetune(base, ref, man, ext, FinetuneConfig(mode="sft_only", **kw))
    b, _ = finetune(base, ref, man, ext, FinetuneConfig(weights=EAPOWeights(0.1, 0.0, 0.0), **kw))
    assert np.array_equal(a.params, b.params)


def test_empty_extreme_warns_and_matches_no_extreme_term(adapted_setup):
    base, ref, man, ext = adapted_setup
    empty = type(ext)(ext.data.subset(np.arange(0)), ext.source_indices[:0])
    kw = dict(epochs=2, learning_rate=1e-3, batch_size=32, seed=1)
    with pytest.warns(UserWarning, match="extreme"):
        a, _ = finetune(base, ref, man, empty, FinetuneConfig(weights=EAPOWeights(0.1, 1.0, 0.1), **kw))
    b, _ = finetune(base, ref, man, ext, FinetuneConfig(weights=EAPOWeights(0.1, 1.0, 0.0), **kw))
    assert np.array_equal(a.params, b.params)


def test_reference_is_untouched_by_finetuning(adapted_setup):
    base, ref, man, ext = adapted_setup
    h = ref.param_hash
    tuned, _ = finetune(base, ref, man, ext, FinetuneConfig(epochs=2, learning_rate=1e-2, batch_size=32))
    assert ref.snapshot.param_hash() == h
    assert tuned.param_hash() != h


def test_finetune_is_deterministic(adapted_setup):
    base, ref, man, ext = adapted_setup
    cfg = FinetuneConfig(epochs=2, learning_rate=1e-3, batch_size=16, seed=9)
    a, ha = finetune(base, ref, man, ext, cfg)
    b, hb = finetune(base, ref, man, ext, cfg)
    assert np.array_equal(a.params, b.params) and ha.losses == hb.losses


def test_one_full_batch_step_lowers_the_objective():
    train, test = small_problem(seed=7, n=200)
    w = EAPOWeights(0.1, 1.0, 0.1)
    checked = 0
    for seed in range(20):
        base = init_classifier("mlp", 4, [6], seed=seed)
        ref = freeze_reference(base)
        rng = np.random.default_rng(seed)
        # start away from the reference so the preference terms are active
        start = base.copy()
        start.params[:] += rng.normal(scale=0.05, size=start.params.size)
        man = build_local_manifold(test.features[:20], train, 2)
        ext = extract_extreme(man)
        args = (man.data.features, man.data.labels, ext.data.features, ext.data.labels, w, "focal", FocalParams())
        before, _ = eapo_param_gradient(start, ref, *args)
        cfg = FinetuneConfig(epochs=1, learning_rate=1e-4, batch_size=len(man) + len(ext), seed=seed)
        tuned, _ = finetune(start, ref, man, ext, cfg)
        after, _ = eapo_param_gradient(tuned, ref, *args)
        assert after < before
        checked += 1
    assert checked == 20


def test_full_batch_step_uses_the_assembled_gradient(adapted_setup):
    base, ref, man, ext = adapted_setup
    start = base.copy()
    start.params[:] += 0.01
    w = EAPOWeights(0.1, 1.0, 0.1)
    big = len(man) + len(ext)
    cfg = FinetuneConfig(weights=w, epochs=1, learning_rate=1e-3, batch_size=big)
    tuned, _ = finetune(start, ref, man, ext, cfg)
    _, g = eapo_param_gradient(
        start, ref, man.data.features, man.data.labels, ext.data.features, ext.data.labels, w, "focal", FocalParams()
    )
    _, expect = adam_step(AdamState.zeros(g.size), start.params, g, 1e-3)
    np.testing.assert_allclose(tuned.params, expect, rtol=1e-9, atol=1e-12)


def _fd(f, p, h=1e-6):
    g = np.empty_like(p)
    for i in range(p.size):
        up, dn = p.copy(), p.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


@pytest.mark.parametrize("loss", ["bce", "focal"])
def test_assembled_gradient_matches_finite_differences(loss):
    rng = np.random.default_rng(11)
    w = EAPOWeights(0.3, 1.0, 0.5)
    done = 0
    while done < 20:
        n = int(rng.integers(2, 9))
        m = init_classifier("mlp", 3, [4], seed=done)
        m.params[:] += rng.normal(scale=0.3, size=m.params.size)
        ref = freeze_reference(init_classifier("mlp", 3, [4], seed=100 + done))
        x = rng.normal(size=(n, 3))
        y = rng.integers(0, 2, n)
        xe = x[y == 1]
        ye = y[y == 1]
        pre = x @ m.layers()[0][0] + m.layers()[0][1]
        if np.min(np.abs(pre)) < 1e-3:
            continue
        value, g = eapo_param_gradient(m, ref, x, y, xe, ye, w, loss, FocalParams())

        def f(p):
            mm = m.copy()
            mm.params[:] = p
            return eapo_param_gradient(mm, ref, x, y, xe, ye, w, loss, FocalParams())[0]

        num = _fd(f, m.params.copy())
        err = np.abs(g - num)
        assert np.all(err <= np.maximum(1e-4 * np.maximum(np.abs(g), np.abs(num)), 1e-7))
        done += 1


def test_finetune_errors(adapted_setup):
    base, ref, man, ext = adapted_setup
    with pytest.raises(ValueError):
        FinetuneConfig(k=0).validate()
    with pytest.raises(ValueError):
        FinetuneConfig(mode="other").validate()
    with pytest.raises(TrainingError):
        finetune(init_classifier("logistic", 2), ref, man, ext, FinetuneConfig(epochs=1))
