"""Shared oracles and instance builders for the test suite.

The finite-difference gradient here is the independent oracle for every
analytic gradient: it only touches the objective function, never the
gradient code paths it checks.
"""

import numpy as np

from glembed.core import DataMatrix, EmbeddingBank, Link
from glembed.contexts import (
    SpatialLayout,
    WindowSpec,
    build_basket_context,
    build_knn_context,
    build_window_context,
)
from glembed.families import Family, FamilySpec
from glembed.train import objective


def fd_gradient(data, ctx, bank, spec, reg_weight, regularizer="l2",
                zero_weight=1.0, step=1e-6):
    """Central finite differences of the full objective in stored coordinates."""
    g_emb = np.zeros_like(bank.embeddings)
    g_cv = np.zeros_like(bank.context_vectors)
    for table, g in ((bank.embeddings, g_emb), (bank.context_vectors, g_cv)):
        for idx in np.ndindex(*table.shape):
            orig = table[idx]
            table[idx] = orig + step
            up = objective(data, ctx, bank, spec, reg_weight, regularizer, zero_weight)
            table[idx] = orig - step
            down = objective(data, ctx, bank, spec, reg_weight, regularizer, zero_weight)
            table[idx] = orig
            g[idx] = (up - down) / (2 * step)
        if bank.tied:
            return g_emb, g_emb
    return g_emb, g_cv


def assert_grad_close(analytic, fd_pair, rtol=1e-5, atol=1e-7):
    fd_emb, fd_cv = fd_pair
    np.testing.assert_allclose(analytic.embeddings, fd_emb, rtol=rtol, atol=atol)
    np.testing.assert_allclose(analytic.context_vectors, fd_cv, rtol=rtol, atol=atol)


def dense_matrix(values, implicit_zero=False):
    """DataMatrix from a dense 2-D array; zeros stored only when explicit."""
    values = np.asarray(values, dtype=np.float64)
    n, t = values.shape
    if implicit_zero:
        rows, cols = np.nonzero(values)
    else:
        rows, cols = np.indices(values.shape).reshape(2, -1)
    return DataMatrix(n, t, rows.ravel(), cols.ravel(),
                      values[rows.ravel(), cols.ravel()], implicit_zero=implicit_zero)


def gaussian_instance(seed, n=5, t=8, k=3, knn=2, log_space=False, scale=0.3):
    rng = np.random.default_rng(seed)
    data = dense_matrix(rng.normal(size=(n, t)))
    ctx = build_knn_context(SpatialLayout(rng.uniform(size=(n, 3)), knn), data)
    bank = EmbeddingBank(rng.normal(scale=scale, size=(n, k)),
                         rng.normal(scale=scale, size=(n, k)), log_space=log_space)
    return data, ctx, bank


def count_instance(seed, n=5, t=8, k=3, density=0.45, log_space=False, scale=0.25):
    rng = np.random.default_rng(seed)
    counts = np.where(rng.random((n, t)) < density, rng.poisson(1.5, (n, t)) + 1, 0)
    if counts.sum() == 0:
        counts[0, 0] = 1
    data = dense_matrix(counts.astype(np.float64), implicit_zero=True)
    ctx = build_basket_context(data)
    bank = EmbeddingBank(rng.normal(scale=scale, size=(n, k)),
                         rng.normal(scale=scale, size=(n, k)), log_space=log_space)
    return data, ctx, bank


def text_instance(seed, vocab=5, length=8, k=3, w=2, scale=0.3):
    rng = np.random.default_rng(seed)
    words = rng.integers(0, vocab, size=length)
    data = DataMatrix(vocab, length, words, np.arange(length), np.ones(length),
                      implicit_zero=True)
    ctx = build_window_context(length, WindowSpec(w), data)
    bank = EmbeddingBank(rng.normal(scale=scale, size=(vocab, k)),
                         rng.normal(scale=scale, size=(vocab, k)))
    return data, ctx, bank


def family_instance(family, seed, **kw):
    """Matched (data, ctx, bank, spec) for any family at test scale."""
    if family is Family.GAUSSIAN:
        data, ctx, bank = gaussian_instance(seed, **kw)
        return data, ctx, bank, FamilySpec(Family.GAUSSIAN, Link.IDENTITY, sigma2=0.8)
    if family is Family.NONNEG_GAUSSIAN:
        data, ctx, bank = gaussian_instance(seed, log_space=True, **kw)
        return data, ctx, bank, FamilySpec(Family.NONNEG_GAUSSIAN, Link.IDENTITY, sigma2=1.2)
    if family is Family.POISSON:
        data, ctx, bank = count_instance(seed, **kw)
        return data, ctx, bank, FamilySpec(Family.POISSON, Link.IDENTITY)
    if family is Family.ADDITIVE_POISSON:
        data, ctx, bank = count_instance(seed, log_space=True, **kw)
        return data, ctx, bank, FamilySpec(Family.ADDITIVE_POISSON, Link.LOG)
    if family is Family.BERNOULLI:
        data, ctx, bank = text_instance(seed, **kw)
        return data, ctx, bank, FamilySpec(Family.BERNOULLI, Link.IDENTITY)
    data, ctx, bank = text_instance(seed, **kw)
    return data, ctx, bank, FamilySpec(Family.CATEGORICAL, Link.IDENTITY,
                                       vocab_size=data.n_rows)
