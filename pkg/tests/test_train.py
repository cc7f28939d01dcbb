import itertools
import math

import numpy as np
import pytest

from glembed.core import DataMatrix, EmbeddingBank
from glembed.contexts import ExplicitContext, build_basket_context
from glembed.errors import ConfigError, NumericAbortError
from glembed.families import (
    Family,
    FamilySpec,
    Gradients,
    grad_additive_poisson,
    grad_bernoulli,
    grad_categorical,
    grad_gaussian,
    grad_nonneg_gaussian,
    grad_poisson,
    weighted_term_gradient,
)
from glembed.train import (
    OptimizerState,
    TrainConfig,
    adagrad_step,
    full_gradient,
    minibatch_gradient,
    objective,
    sparse_gradient,
    train,
)

from helpers import dense_matrix, family_instance, fd_gradient


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def test_objective_empty_data_is_zero():
    data = DataMatrix(2, 2, [], [], [], implicit_zero=False)
    bank = EmbeddingBank.zeros(2, 2)
    spec = FamilySpec(Family.GAUSSIAN)
    assert objective(data, ExplicitContext({}), bank, spec, 0.0) == 0.0


def test_objective_single_gaussian_point_at_mean():
    data = DataMatrix(1, 1, [0], [0], [0.0])
    bank = EmbeddingBank.zeros(1, 2)
    spec = FamilySpec(Family.GAUSSIAN, sigma2=1.0)
    got = objective(data, ExplicitContext({}), bank, spec, 0.0)
    assert got == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_objective_l2_convention():
    # with L2 the objective drops by (w/2)(|emb|^2 + |cv|^2), fixing the
    # lambda convention that pairs with -lambda*theta gradients
    data, ctx, bank, spec = family_instance(Family.GAUSSIAN, 21)
    base = objective(data, ctx, bank, spec, 0.0)
    reg = objective(data, ctx, bank, spec, 2.5)
    penalty = 0.5 * 2.5 * ((bank.embeddings ** 2).sum() + (bank.context_vectors ** 2).sum())
    assert reg == pytest.approx(base - penalty, rel=1e-12)


# ---------------------------------------------------------------------------
# full gradient delegates to the family forms
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("family,named", [
    (Family.GAUSSIAN, grad_gaussian),
    (Family.NONNEG_GAUSSIAN, grad_nonneg_gaussian),
    (Family.POISSON, grad_poisson),
    (Family.ADDITIVE_POISSON, grad_additive_poisson),
    (Family.BERNOULLI, grad_bernoulli),
    (Family.CATEGORICAL, grad_categorical),
])
def test_full_gradient_delegation(family, named):
    data, ctx, bank, spec = family_instance(family, 22)
    cfg = TrainConfig(reg_weight=0.8)
    g = full_gradient(data, ctx, bank, spec, cfg)
    ref = named(data, ctx, bank, spec, 0.8)
    np.testing.assert_array_equal(g.embeddings, ref.embeddings)
    np.testing.assert_array_equal(g.context_vectors, ref.context_vectors)


def test_full_gradient_matches_fd_on_random_instances():
    for seed in (41, 42):
        data, ctx, bank, spec = family_instance(Family.POISSON, seed)
        cfg = TrainConfig(reg_weight=1.0)
        g = full_gradient(data, ctx, bank, spec, cfg)
        fd_emb, fd_cv = fd_gradient(data, ctx, bank, spec, 1.0)
        np.testing.assert_allclose(g.embeddings, fd_emb, rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(g.context_vectors, fd_cv, rtol=1e-5, atol=1e-7)


def test_full_gradient_zero_at_constructed_stationary_point():
    data = DataMatrix(1, 1, [0], [0], [0.0])
    bank = EmbeddingBank.zeros(1, 3)
    spec = FamilySpec(Family.GAUSSIAN)
    g = full_gradient(data, ExplicitContext({}), bank, spec, TrainConfig(reg_weight=0.0))
    assert np.abs(g.embeddings).max() == 0.0
    assert np.abs(g.context_vectors).max() == 0.0


# ---------------------------------------------------------------------------
# minibatch estimator
# ---------------------------------------------------------------------------

def test_minibatch_full_size_equals_full_gradient():
    data, ctx, bank, spec = family_instance(Family.GAUSSIAN, 23)
    cfg = TrainConfig(reg_weight=0.5, estimator="minibatch", minibatch_size=data.n_terms)
    g = minibatch_gradient(data, ctx, bank, spec, cfg, np.random.default_rng(0))
    ref = full_gradient(data, ctx, bank, spec, cfg)
    np.testing.assert_allclose(g.embeddings, ref.embeddings, rtol=1e-12)
    np.testing.assert_allclose(g.context_vectors, ref.context_vectors, rtol=1e-12)


def test_minibatch_three_term_average_identity():
    # with I=3 and |S|=1 the average of the three possible estimates is the
    # full data-term gradient: (3a + 3b + 3c)/3 = a + b + c
    data = DataMatrix(3, 1, [0, 1, 2], [0, 0, 0], [1.0, -2.0, 0.5])
    ctx = ExplicitContext({(0, 0): [(1, 0)], (1, 0): [(2, 0)], (2, 0): [(0, 0)]})
    bank = EmbeddingBank.init_random(3, 2, seed=5)
    spec = FamilySpec(Family.GAUSSIAN)
    cfg = TrainConfig(reg_weight=0.7, estimator="minibatch", minibatch_size=1)
    acc = np.zeros_like(bank.embeddings)
    for term in range(3):
        acc += minibatch_gradient(data, ctx, bank, spec, cfg, None,
                                  draw=np.array([term])).embeddings
    full = full_gradient(data, ctx, bank, spec, cfg)
    np.testing.assert_allclose(acc / 3, full.embeddings, atol=1e-12)


def test_minibatch_enumeration_is_unbiased():
    data, ctx, bank, spec = family_instance(Family.GAUSSIAN, 24)
    total = data.n_terms
    cfg = TrainConfig(reg_weight=0.0, estimator="minibatch", minibatch_size=2)
    acc_e = np.zeros_like(bank.embeddings)
    acc_c = np.zeros_like(bank.context_vectors)
    subsets = list(itertools.combinations(range(total), 2))
    for s in subsets:
        g = minibatch_gradient(data, ctx, bank, spec, cfg, None, draw=np.array(s))
        acc_e += g.embeddings
        acc_c += g.context_vectors
    full = full_gradient(data, ctx, bank, spec, cfg)
    np.testing.assert_allclose(acc_e / len(subsets), full.embeddings, atol=1e-10)
    np.testing.assert_allclose(acc_c / len(subsets), full.context_vectors, atol=1e-10)


def test_minibatch_monte_carlo_mean_within_three_stderr():
    data, ctx, bank, spec = family_instance(Family.POISSON, 25)
    cfg = TrainConfig(reg_weight=0.0, estimator="minibatch", minibatch_size=5)
    rng = np.random.default_rng(77)
    draws = 10_000
    samples = np.empty((draws,) + bank.embeddings.shape)
    for i in range(draws):
        samples[i] = minibatch_gradient(data, ctx, bank, spec, cfg, rng).embeddings
    full = full_gradient(data, ctx, bank, spec, cfg).embeddings
    se = samples.std(axis=0) / math.sqrt(draws)
    gap = np.abs(samples.mean(axis=0) - full)
    assert (gap <= 3 * se + 1e-12).all()


# ---------------------------------------------------------------------------
# sparse zero/nonzero split estimator
# ---------------------------------------------------------------------------

def _sparse_fixture():
    # one nonzero cell and four zero cells in a single column
    data = DataMatrix(5, 1, [1], [0], [2.0], implicit_zero=True)
    ctx = build_basket_context(data)
    bank = EmbeddingBank.init_random(5, 2, seed=8, scale=0.8)
    spec = FamilySpec(Family.POISSON)
    return data, ctx, bank, spec


def test_sparse_all_nonzero_equals_full():
    vals = np.arange(1.0, 7.0).reshape(2, 3)
    data = dense_matrix(vals, implicit_zero=True)
    ctx = build_basket_context(data)
    bank = EmbeddingBank.init_random(2, 2, seed=9)
    spec = FamilySpec(Family.POISSON)
    cfg = TrainConfig(reg_weight=0.3, estimator="sparse", negative_samples=2)
    g = sparse_gradient(data, ctx, bank, spec, cfg, np.random.default_rng(0))
    ref = full_gradient(data, ctx, bank, spec, cfg)
    np.testing.assert_allclose(g.embeddings, ref.embeddings, rtol=1e-12)


def test_sparse_sampling_every_zero_equals_full_for_both_estimators():
    data, ctx, bank, spec = _sparse_fixture()
    zeros = np.array([(r, 0) for r in range(5) if r != 1])
    full = full_gradient(data, ctx, bank, spec, TrainConfig(reg_weight=0.4))
    for zero_estimator in ("unbiased", "negative_sampling"):
        cfg = TrainConfig(reg_weight=0.4, estimator="sparse",
                          zero_estimator=zero_estimator, negative_samples=4)
        g = sparse_gradient(data, ctx, bank, spec, cfg, None, zero_draw=zeros)
        np.testing.assert_allclose(g.embeddings, full.embeddings, rtol=1e-12)
        np.testing.assert_allclose(g.context_vectors, full.context_vectors, rtol=1e-12)


def test_sparse_enumeration_is_unbiased():
    data, ctx, bank, spec = _sparse_fixture()
    cfg = TrainConfig(reg_weight=0.0, estimator="sparse", negative_samples=2)
    zeros = [(r, 0) for r in range(5) if r != 1]
    acc = np.zeros_like(bank.embeddings)
    subsets = list(itertools.combinations(zeros, 2))
    for s in subsets:
        acc += sparse_gradient(data, ctx, bank, spec, cfg, None,
                               zero_draw=np.array(s)).embeddings
    full = full_gradient(data, ctx, bank, spec, cfg)
    np.testing.assert_allclose(acc / len(subsets), full.embeddings, atol=1e-10)


def test_negative_sampling_is_unbiased_with_zero_portion_rescaled():
    # shared draws: NS equals UB with the zero portion scaled by S/Z = 1/2,
    # which is exact in floating point
    data, ctx, bank, spec = _sparse_fixture()
    kw = dict(reg_weight=0.0, estimator="sparse", negative_samples=2, seed=3)
    g_ub = sparse_gradient(data, ctx, bank, spec,
                           TrainConfig(zero_estimator="unbiased", **kw),
                           np.random.default_rng(3))
    g_ns = sparse_gradient(data, ctx, bank, spec,
                           TrainConfig(zero_estimator="negative_sampling", **kw),
                           np.random.default_rng(3))
    nz = weighted_term_gradient(data, ctx, bank, spec, data.rows, data.cols,
                                data.vals, np.ones(1),
                                stored_mask=np.ones(1, dtype=bool))
    predicted = nz.embeddings + 0.5 * (g_ub.embeddings - nz.embeddings)
    np.testing.assert_array_equal(predicted, g_ns.embeddings)


def test_downweight_scales_zero_portion_by_gamma():
    data, ctx, bank, spec = _sparse_fixture()
    zeros = np.array([(0, 0), (3, 0)])
    kw = dict(reg_weight=0.0, estimator="sparse", negative_samples=2)
    g_ub = sparse_gradient(data, ctx, bank, spec,
                           TrainConfig(zero_estimator="unbiased", **kw),
                           None, zero_draw=zeros)
    g_dw = sparse_gradient(data, ctx, bank, spec,
                           TrainConfig(zero_estimator="downweight", downweight=0.25, **kw),
                           None, zero_draw=zeros)
    nz = weighted_term_gradient(data, ctx, bank, spec, data.rows, data.cols,
                                data.vals, np.ones(1),
                                stored_mask=np.ones(1, dtype=bool))
    predicted = nz.embeddings + 0.25 * (g_ub.embeddings - nz.embeddings)
    np.testing.assert_allclose(predicted, g_dw.embeddings, rtol=1e-12)


def test_sparse_requires_implicit_zero_data():
    data, ctx, bank, spec = family_instance(Family.GAUSSIAN, 26)
    cfg = TrainConfig(estimator="sparse")
    with pytest.raises(ConfigError):
        sparse_gradient(data, ctx, bank, spec, cfg, np.random.default_rng(0))


def test_sparse_no_zero_entries_contributes_nothing():
    vals = np.ones((2, 2))
    data = dense_matrix(vals, implicit_zero=True)
    ctx = build_basket_context(data)
    bank = EmbeddingBank.init_random(2, 2, seed=12)
    spec = FamilySpec(Family.POISSON)
    cfg = TrainConfig(reg_weight=0.0, estimator="sparse", negative_samples=3)
    g = sparse_gradient(data, ctx, bank, spec, cfg, np.random.default_rng(1))
    ref = full_gradient(data, ctx, bank, spec, cfg)
    np.testing.assert_allclose(g.embeddings, ref.embeddings, rtol=1e-12)


# ---------------------------------------------------------------------------
# adagrad
# ---------------------------------------------------------------------------

def _step_once(g_value, step_size=0.1, eps=1e-12, repeats=1):
    bank = EmbeddingBank.zeros(1, 1)
    state = OptimizerState.for_bank(bank)
    cfg = TrainConfig(step_size=step_size, adagrad_epsilon=eps)
    deltas = []
    for _ in range(repeats):
        before = bank.embeddings[0, 0]
        g = Gradients(np.full((1, 1), g_value), np.zeros((1, 1)))
        adagrad_step(g, state, bank, cfg)
        deltas.append(bank.embeddings[0, 0] - before)
    return deltas, state


def test_adagrad_first_step_is_signed_step_size():
    deltas, _ = _step_once(3.0, step_size=0.1)
    assert deltas[0] == pytest.approx(0.1, rel=1e-9)
    deltas, _ = _step_once(-3.0, step_size=0.1)
    assert deltas[0] == pytest.approx(-0.1, rel=1e-9)


def test_adagrad_zero_gradient_changes_nothing():
    deltas, state = _step_once(0.0)
    assert deltas[0] == 0.0
    assert state.accum_embeddings[0, 0] == 0.0


def test_adagrad_second_equal_step_shrinks_by_sqrt2():
    deltas, _ = _step_once(2.0, repeats=2)
    assert deltas[1] / deltas[0] == pytest.approx(1 / math.sqrt(2), rel=1e-9)


def test_adagrad_effective_steps_nonincreasing_and_accumulator_monotone():
    deltas, state = _step_once(1.5, repeats=20)
    mags = np.abs(deltas)
    assert (np.diff(mags) <= 1e-15).all()
    assert state.accum_embeddings[0, 0] == pytest.approx(20 * 1.5 ** 2)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_train_zero_iterations_returns_initialization():
    data, ctx, bank, spec = family_instance(Family.GAUSSIAN, 27)
    cfg = TrainConfig(dim=3, n_iterations=0, seed=5)
    fitted, log = train(data, ctx, spec, cfg)
    init = EmbeddingBank.init_random(data.n_rows, 3, seed=5)
    np.testing.assert_array_equal(fitted.embeddings, init.embeddings)
    np.testing.assert_array_equal(fitted.context_vectors, init.context_vectors)
    assert len(log) == 1


def test_train_ascends_on_smooth_objective():
    data, ctx, _, spec = family_instance(Family.GAUSSIAN, 28)
    cfg = TrainConfig(dim=3, n_iterations=500, step_size=0.1, estimator="full",
                      reg_weight=0.1, seed=2, log_every=100)
    _, log = train(data, ctx, spec, cfg)
    assert log[-1].objective >= log[0].objective


def test_train_is_bit_deterministic():
    data, ctx, _, spec = family_instance(Family.POISSON, 29)
    cfg = TrainConfig(dim=3, n_iterations=40, estimator="sparse",
                      negative_samples=2, seed=11, log_every=20)
    a, _ = train(data, ctx, spec, cfg)
    b, _ = train(data, ctx, spec, cfg)
    assert np.array_equal(a.embeddings, b.embeddings)
    assert np.array_equal(a.context_vectors, b.context_vectors)


def test_train_aborts_on_nonfinite_with_diagnostic():
    # a pathological step size overflows the Gaussian mean to inf, whose
    # residual turns the next update into nan
    data, ctx, _, spec = family_instance(Family.GAUSSIAN, 30)
    cfg = TrainConfig(dim=2, n_iterations=5, step_size=1e200, estimator="full",
                      reg_weight=0.0, seed=1, log_every=10)
    with np.errstate(all="ignore"), pytest.raises(NumericAbortError,
                                                  match=r"iteration \d+.*\[\d+,\d+\]"):
        train(data, ctx, spec, cfg)


def test_train_positive_effective_parameters_for_log_space_models():
    data, ctx, _, spec = family_instance(Family.ADDITIVE_POISSON, 36)
    seen = []
    cfg = TrainConfig(dim=2, n_iterations=60, estimator="sparse",
                      negative_samples=2, step_size=0.2, seed=4, log_every=20)
    train(data, ctx, spec, cfg,
          on_log=lambda it, bank, state: seen.append(
              min(bank.effective_embeddings().min(),
                  bank.effective_context_vectors().min())))
    assert seen and all(v > 0.0 for v in seen)


def test_train_binary_window_model_with_negative_sampling():
    # word-style training: binary indicators over window contexts, sparse
    # estimator without the unbiasedness rescale
    from glembed.synth import gen_cluster_corpus
    from glembed.contexts import WindowSpec, build_window_context

    data, truth = gen_cluster_corpus(vocab_size=12, n_clusters=2, length=800, seed=3)
    ctx = build_window_context(data.n_cols, WindowSpec(2), data)
    spec = FamilySpec(Family.BERNOULLI)
    cfg = TrainConfig(dim=4, step_size=0.5, estimator="sparse", n_iterations=200,
                      negative_samples=5, zero_estimator="negative_sampling",
                      reg_weight=0.1, seed=0, log_every=100)
    bank, log = train(data, ctx, spec, cfg)
    emb = bank.effective_embeddings()
    unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    cos = unit @ unit.T
    same = truth.cluster_of[:, None] == truth.cluster_of[None, :]
    off = ~np.eye(12, dtype=bool)
    assert cos[same & off].mean() > cos[~same & off].mean() + 0.3


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(step_size=-1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(zero_estimator="bogus").validate()
    with pytest.raises(ConfigError):
        TrainConfig(estimator="minibatch", minibatch_size=None).validate()
    with pytest.raises(ConfigError):
        TrainConfig(downweight=0.0).validate()
