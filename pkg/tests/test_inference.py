import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bhpeft.data import Dataset, generate
from bhpeft.errors import ConfigError, InputError
from bhpeft.inference import (
    Prediction,
    n_rejected,
    predict,
    predict_many,
    rejection_curve,
    sample_outputs,
    summarize,
)
from bhpeft.model import BHPeftModel, ModelConfig

CFG = ModelConfig(d=8, heads=2, layers=1, vocab=64, n_max=16, prefix_len=2, r_a=2, r_p=2)


@pytest.fixture
def model():
    return BHPeftModel.create(CFG, seed=0)


def test_summary_invariants(model):
    preds = predict_many(model, [[20, 21], [30, 31, 32]], 16, np.random.default_rng(0))
    for p in preds:
        assert p.mean_output.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(p.variance >= 0) and p.total_uncertainty >= 0
        assert p.predicted_label == int(np.argmax(p.mean_output))
        assert p.total_uncertainty == pytest.approx(p.variance.sum())
        assert p.s_eval == 16


def test_zero_g_gives_zero_uncertainty(model):
    for p in model.gaussian_params():
        p.g.value[...] = 0.0
    for s in (2, 7):
        assert predict(model, [20, 21, 22], s, np.random.default_rng(s)).total_uncertainty == 0.0


def test_regression_hand_variance():
    preds = summarize(np.array([[[1.0]], [[3.0]]]), "regression")
    assert preds[0].mean_output[0] == 2.0 and preds[0].variance[0] == 2.0
    assert preds[0].predicted_label is None


@given(hnp.arrays(np.float64, (5, 3), elements=st.floats(0.01, 1.0)))
def test_equal_samples_zero_variance(row):
    probs = row / row.sum(axis=1, keepdims=True)
    samples = np.repeat(probs[None], 4, axis=0)
    for p in summarize(samples, "classification"):
        assert np.all(p.variance == 0.0)


@given(st.integers(0, 1000))
def test_variance_invariant_to_sample_order(seed):
    rng = np.random.default_rng(seed)
    x = rng.dirichlet(np.ones(3), size=(6, 2))
    a = summarize(x, "classification")
    b = summarize(x[rng.permutation(6)], "classification")
    for p, q in zip(a, b):
        assert np.allclose(p.variance, q.variance, rtol=1e-12, atol=1e-15)


def test_tie_break_lowest_index():
    preds = summarize(np.array([[[0.5, 0.5]], [[0.5, 0.5]]]), "classification")
    assert preds[0].predicted_label == 0


def test_variance_needs_two_samples(model):
    with pytest.raises(ConfigError):
        predict(model, [20], 1, np.random.default_rng(0))
    p = predict(model, [20], 1, np.random.default_rng(0), with_variance=False)
    assert p.variance is None and p.total_uncertainty is None
    with pytest.raises(ConfigError):
        predict(model, [20], 0, np.random.default_rng(0), with_variance=False)


def test_sampling_is_seeded(model):
    a = sample_outputs(model, [[20, 21]], 5, np.random.default_rng(3))
    b = sample_outputs(model, [[20, 21]], 5, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_uncertainty_converges_with_s_eval():
    big = BHPeftModel.create(ModelConfig(d=8, heads=2, layers=1, vocab=64, delta=0.6), seed=1)
    toks = [20, 21, 22, 23]
    s256 = sample_outputs(big, [toks], 256, np.random.default_rng(0))[:, 0, :]
    s1024 = sample_outputs(big, [toks], 1024, np.random.default_rng(1))[:, 0, :]
    u256 = s256.var(axis=0, ddof=1).sum()
    u1024 = s1024.var(axis=0, ddof=1).sum()
    # standard error of a sum of per-class sample variances, from the 1024 draws
    dev = ((s1024 - s1024.mean(axis=0)) ** 2).sum(axis=1)
    se = np.sqrt(dev.var(ddof=1) / 256 + dev.var(ddof=1) / 1024)
    assert u1024 > 0
    assert abs(u256 - u1024) < 3 * se


# rejection -------------------------------------------------------------------


@given(st.floats(0, 0.99), st.integers(1, 500))
def test_n_kept_formula(rate, n):
    k = n_rejected(rate, n)
    assert k == int(np.ceil(np.round(rate * n, 9)))
    assert 0 <= k <= n


def test_n_rejected_float_guard():
    assert n_rejected(0.1, 30) == 3
    assert n_rejected(0.2, 10) == 2


def test_rejection_rows(model):
    ds = generate("noisy-region", 40, 1, vocab=64, max_len=12)
    rows = rejection_curve(model, ds, [0, 0.1, 0.2, 0.3, 0.4, 0.5], 4, np.random.default_rng(0))
    assert len(rows) == 6
    for r in rows:
        assert r.n_kept == 40 - n_rejected(r.rate, 40)
    preds = predict_many(model, ds.tokens, 4, np.random.default_rng(0))
    full = np.mean([p.predicted_label == y for p, y in zip(preds, ds.targets)])
    assert rows[0].metric_value == full


def test_rejection_removes_most_uncertain_and_ties_reject_later(model):
    ds = Dataset(tuple(((20 + i,), i % 2) for i in range(6)), "classification", 64)
    unc = [0.1, 0.5, 0.5, 0.0, 0.2, 0.5]
    preds = [Prediction(np.array([0.6, 0.4]), np.array([u / 2, u / 2]), u, 0, 2) for u in unc]
    rows = rejection_curve(model, ds, [0.0, 0.2, 0.5], 2, None, predictions=preds)
    # rate 0.2 drops ceil(1.2)=2: indices 5 then 2; rate 0.5 drops 3: 5, 2, 1
    assert [r.n_kept for r in rows] == [6, 4, 3]
    assert rows[1].metric_value == pytest.approx(np.mean([y == 0 for y in (0, 1, 1, 0)]))
    assert rows[2].metric_value == pytest.approx(np.mean([y == 0 for y in (0, 1, 0)]))


def test_uninformative_uncertainty_with_constant_labels(model):
    ds = Dataset(tuple(((20 + i,), 1) for i in range(10)), "classification", 64)
    preds = [Prediction(np.array([0.3, 0.7]), np.zeros(2), 0.0, 1, 2) for _ in range(10)]
    rows = rejection_curve(model, ds, [0.0, 0.3, 0.6], 2, None, predictions=preds)
    assert all(r.metric_value == 1.0 for r in rows)


def test_rejection_regression_metric():
    m = BHPeftModel.create(ModelConfig(d=8, heads=2, layers=1, vocab=64, task="regression"), seed=0)
    ds = generate("regression-count", 20, 0, vocab=64)
    rows = rejection_curve(m, ds, [0.0, 0.25], 3, np.random.default_rng(0))
    assert rows[0].metric_name == "mse" and rows[1].n_kept == 15


@pytest.mark.parametrize("rates", [[], [0.2, 0.1], [1.0], [-0.1], [0.99]])
def test_rejection_rate_errors(model, rates):
    ds = generate("keyword", 10, 0, vocab=64)
    with pytest.raises(InputError):
        rejection_curve(model, ds, rates, 2, np.random.default_rng(0))


@given(st.integers(2, 40), hnp.arrays(np.float64, (3, 4), elements=st.floats(0, 1)))
def test_identical_draws_have_exact_mean_and_zero_variance(s_eval, row):
    preds = summarize(np.broadcast_to(row, (s_eval, 3, 4)).copy(), "classification")
    for p, r in zip(preds, row):
        assert np.array_equal(p.mean_output, r) and p.total_uncertainty == 0.0
