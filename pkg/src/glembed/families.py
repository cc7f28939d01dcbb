"""Conditional families: log-likelihoods, moments, and analytic gradients.

Each observation x is scored under an exponential-family conditional whose
natural parameter comes from the context inner product (see core).  Scalar
families share one vectorized engine; the categorical family (softmax over a
vocabulary block, one active term per column) has its own.

Conventions fixed here:

* Gaussian: parameterized by the mean with fixed variance sigma2; the
  gradient residual is (x - mean) / sigma2.
* Poisson: the linear value is the log-rate (rate = exp(eta)); eta is
  clamped to +-ETA_CLAMP before exponentiation, with a counter.
* Additive Poisson: the linear value (of effective, positive parameters)
  is the rate itself; the gradient residual is x/rate - 1 with the rate
  floored at RATE_FLOOR, with a counter.
* Bernoulli: the linear value is the log-odds (canonical); the mean is
  logistic(eta) and the residual x - logistic(eta).
* Log-space banks (nonnegative Gaussian, additive Poisson) store logs of
  the effective parameters; gradients are returned in stored coordinates,
  i.e. the effective-parameter gradient times the effective parameter, and
  the L2 penalty applies to the effective parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import gammaln

from .core import DataMatrix, EmbeddingBank, Link
from .errors import ConfigError, DataError, DomainError, RateDomainError

ETA_CLAMP = 30.0
RATE_FLOOR = 1e-8
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Family(Enum):
    GAUSSIAN = "gaussian"
    NONNEG_GAUSSIAN = "nonneg_gaussian"
    POISSON = "poisson"
    ADDITIVE_POISSON = "additive_poisson"
    BERNOULLI = "bernoulli"
    CATEGORICAL = "categorical"


_LOG_SPACE_FAMILIES = (Family.NONNEG_GAUSSIAN, Family.ADDITIVE_POISSON)
_DEFAULT_LINKS = {
    Family.GAUSSIAN: Link.IDENTITY,
    Family.NONNEG_GAUSSIAN: Link.IDENTITY,
    Family.POISSON: Link.IDENTITY,
    Family.ADDITIVE_POISSON: Link.LOG,
    Family.BERNOULLI: Link.IDENTITY,
    Family.CATEGORICAL: Link.IDENTITY,
}


def default_link(family: Family) -> Link:
    return _DEFAULT_LINKS[family]


@dataclass(frozen=True)
class FamilySpec:
    """Which conditional family, its link, and fixed hyperparameters."""

    family: Family
    link: Link | None = None
    sigma2: float = 1.0
    vocab_size: int = 0

    def __post_init__(self):
        if self.link is None:
            object.__setattr__(self, "link", _DEFAULT_LINKS[self.family])
        if self.family in (Family.GAUSSIAN, Family.NONNEG_GAUSSIAN) and self.sigma2 <= 0:
            raise ConfigError("sigma2 must be positive")
        log_link = self.link.is_log
        if self.family is Family.ADDITIVE_POISSON and not log_link:
            raise ConfigError("additive Poisson requires a log link (rate = linear value)")
        if self.family is not Family.ADDITIVE_POISSON and log_link:
            raise ConfigError(f"{self.family.value} uses an identity-style link")
        if self.family is Family.CATEGORICAL and self.vocab_size < 2:
            raise ConfigError("categorical family needs vocab_size >= 2")

    @property
    def needs_log_space(self) -> bool:
        return self.family in _LOG_SPACE_FAMILIES


def validate_bank(spec: FamilySpec, bank: EmbeddingBank) -> None:
    if spec.needs_log_space and not bank.log_space:
        raise ConfigError(f"{spec.family.value} requires a log-space parameter bank")


def validate_data(spec: FamilySpec, data: DataMatrix) -> None:
    fam = spec.family
    if fam in (Family.POISSON, Family.ADDITIVE_POISSON) and len(data.vals) and data.vals.min() < 0:
        raise DataError(f"{fam.value} data must be nonnegative")
    if fam is Family.BERNOULLI and len(data.vals) and not np.isin(data.vals, (0.0, 1.0)).all():
        raise DataError("bernoulli data must be 0/1")
    if fam is Family.CATEGORICAL:
        if data.n_rows != spec.vocab_size:
            raise DataError("categorical data rows must equal vocab_size")
        counts = np.bincount(data.cols, minlength=data.n_cols)
        if not (counts == 1).all():
            raise DataError("categorical data needs exactly one active term per column")
        if len(data.vals) and not np.all(data.vals == 1.0):
            raise DataError("categorical entries must be indicator values 1")


@dataclass
class ClampCounters:
    """Telemetry for numerical guards hit during likelihood/gradient passes."""

    eta_clamped: int = 0
    rate_floored: int = 0
    mean_clamped: int = 0

    def merge(self, other: "ClampCounters") -> None:
        self.eta_clamped += other.eta_clamped
        self.rate_floored += other.rate_floored
        self.mean_clamped += other.mean_clamped

    def reset(self) -> None:
        self.eta_clamped = 0
        self.rate_floored = 0
        self.mean_clamped = 0


@dataclass
class Gradients:
    """Gradient tables shaped like the bank; for tied banks both fields
    reference one array holding the combined gradient."""

    embeddings: np.ndarray
    context_vectors: np.ndarray


# ---------------------------------------------------------------------------
# scalar reference operations
# ---------------------------------------------------------------------------

def log_likelihood(x: float, eta: float, spec: FamilySpec) -> float:
    """Log density/mass of one observation at natural parameter eta.

    Base-measure constants are included, so values are true log
    probabilities and comparable across models.
    """
    fam = spec.family
    if fam in (Family.GAUSSIAN, Family.NONNEG_GAUSSIAN):
        return float(-((x - eta) ** 2) / (2.0 * spec.sigma2)
                     - 0.5 * math.log(spec.sigma2) - _HALF_LOG_2PI)
    if fam is Family.POISSON:
        if x < 0:
            raise DomainError("Poisson support is nonnegative")
        eta_c = min(max(eta, -ETA_CLAMP), ETA_CLAMP)
        return float(x * eta_c - math.exp(eta_c) - gammaln(x + 1.0))
    if fam is Family.ADDITIVE_POISSON:
        if x < 0:
            raise DomainError("Poisson support is nonnegative")
        if not math.isfinite(eta):
            raise RateDomainError("additive Poisson rate must be positive")
        return float(x * eta - math.exp(eta) - gammaln(x + 1.0))
    if fam is Family.BERNOULLI:
        if x not in (0.0, 1.0):
            raise DomainError("Bernoulli support is {0, 1}")
        return float(x * eta - np.logaddexp(0.0, eta))
    raise ConfigError("use categorical_log_likelihood for the categorical family")


def expected_sufficient_statistic(eta: float, spec: FamilySpec) -> float:
    """Mean of the sufficient statistic, d a(eta) / d eta."""
    fam = spec.family
    if fam in (Family.GAUSSIAN, Family.NONNEG_GAUSSIAN):
        return float(eta)
    if fam in (Family.POISSON, Family.ADDITIVE_POISSON):
        return float(math.exp(min(max(eta, -ETA_CLAMP), ETA_CLAMP)))
    if fam is Family.BERNOULLI:
        return float(1.0 / (1.0 + math.exp(-eta)))
    raise ConfigError("categorical expected statistic is the softmax; see categorical paths")


def log_normalizer(eta: float, spec: FamilySpec) -> float:
    """a(eta) under the conventions above (mean convention for Gaussian)."""
    fam = spec.family
    if fam in (Family.GAUSSIAN, Family.NONNEG_GAUSSIAN):
        return float(eta * eta / 2.0)
    if fam in (Family.POISSON, Family.ADDITIVE_POISSON):
        return float(math.exp(min(max(eta, -ETA_CLAMP), ETA_CLAMP)))
    if fam is Family.BERNOULLI:
        return float(np.logaddexp(0.0, eta))
    raise ConfigError("categorical has no scalar log-normalizer")


def categorical_log_likelihood(etas: np.ndarray, active: int) -> float:
    """Softmax log mass of the active term given the block of etas."""
    etas = np.asarray(etas, dtype=np.float64)
    m = etas.max()
    return float(etas[active] - m - np.log(np.exp(etas - m).sum()))


# ---------------------------------------------------------------------------
# vectorized engine over batches of cells
# ---------------------------------------------------------------------------

def _linear_values(data, ctx, bank, spec, rows, cols, xvals, stored_mask, counters):
    """Linear values and context sums for a batch of cells.

    Returns (svals, S, counts, active) where active marks cells kept under
    the empty-context policy: mean links drop empty-context cells.
    """
    cv = bank.effective_context_vectors()
    emb = bank.effective_embeddings()
    S, counts = ctx.sums(data, cv, rows, cols, xvals=xvals, stored_mask=stored_mask)
    active = np.ones(len(rows), dtype=bool)
    if spec.link.rescales_by_count:
        active = counts > 0
        safe = np.maximum(counts, 1)
        S = S / safe[:, None]
    svals = np.einsum("ed,ed->e", emb[rows], S)
    if not active.all():
        # excluded cells get a placeholder linear value so the residual
        # formulas stay finite and do not pollute the clamp counters
        svals = np.where(active, svals, 1.0)
    return svals, S, counts, active


def _residuals_and_loglik(spec, svals, xvals, counters):
    """Per-cell residual r (d loglik / d linear value) and log-likelihood."""
    fam = spec.family
    if fam in (Family.GAUSSIAN, Family.NONNEG_GAUSSIAN):
        resid = (xvals - svals) / spec.sigma2
        ll = -((xvals - svals) ** 2) / (2.0 * spec.sigma2) \
            - 0.5 * math.log(spec.sigma2) - _HALF_LOG_2PI
        return resid, ll
    if fam is Family.POISSON:
        clipped = np.clip(svals, -ETA_CLAMP, ETA_CLAMP)
        if counters is not None:
            counters.eta_clamped += int((clipped != svals).sum())
        rate = np.exp(clipped)
        resid = xvals - rate
        ll = xvals * clipped - rate - gammaln(xvals + 1.0)
        return resid, ll
    if fam is Family.ADDITIVE_POISSON:
        rate = np.maximum(svals, RATE_FLOOR)
        if counters is not None:
            counters.rate_floored += int((rate != svals).sum())
        resid = xvals / rate - 1.0
        ll = xvals * np.log(rate) - rate - gammaln(xvals + 1.0)
        return resid, ll
    if fam is Family.BERNOULLI:
        mean = 1.0 / (1.0 + np.exp(-svals))
        resid = xvals - mean
        ll = xvals * svals - np.logaddexp(0.0, svals)
        return resid, ll
    raise ConfigError("categorical cells are scored per column block")


def term_log_likelihoods(data, ctx, bank, spec, rows, cols, xvals,
                         stored_mask=None, counters=None):
    """Log-likelihoods of a batch of cells given their contexts.

    Returns (ll, active); inactive cells (empty context under a mean link)
    carry ll = 0 and are excluded by the caller's bookkeeping.
    """
    svals, _, _, active = _linear_values(
        data, ctx, bank, spec, rows, cols, xvals, stored_mask, counters)
    _, ll = _residuals_and_loglik(spec, svals, np.asarray(xvals, dtype=np.float64), counters)
    ll = np.where(active, ll, 0.0)
    return ll, active


def weighted_term_gradient(data, ctx, bank, spec, rows, cols, xvals, weights,
                           stored_mask=None, counters=None) -> Gradients:
    """Gradient of sum_e weights[e] * loglik(cell e) in stored coordinates.

    The heavy lifting for every estimator: full, minibatch, and the sparse
    zero/nonzero split all reduce to weighted batches of cells.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    xvals = np.asarray(xvals, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    emb = bank.effective_embeddings()
    cv = bank.effective_context_vectors()
    g_emb = np.zeros_like(emb)
    g_cv = np.zeros_like(cv)
    if len(rows):
        svals, S, counts, active = _linear_values(
            data, ctx, bank, spec, rows, cols, xvals, stored_mask, counters)
        resid, _ = _residuals_and_loglik(spec, svals, xvals, counters)
        coef = np.where(active, weights * resid, 0.0)
        np.add.at(g_emb, rows, coef[:, None] * S)
        back = coef[:, None] * emb[rows]
        if spec.link.rescales_by_count:
            back = back / np.maximum(counts, 1)[:, None]
        ctx.scatter_add(data, rows, cols, back, g_cv, xvals=xvals, stored_mask=stored_mask)
    if bank.log_space:
        g_emb *= emb
        g_cv *= cv
    if bank.tied:
        total = g_emb + g_cv
        return Gradients(total, total)
    return Gradients(g_emb, g_cv)


def conditional_means(data, ctx, bank, spec, rows, cols, xvals=None,
                      stored_mask=None, counters=None):
    """Model means of a batch of cells given their contexts.

    Returns (means, active); the mean is the expected sufficient statistic
    at the cell's natural parameter.
    """
    if xvals is None:
        xvals = np.zeros(len(rows))
    svals, _, _, active = _linear_values(
        data, ctx, bank, spec, np.asarray(rows, dtype=np.int64),
        np.asarray(cols, dtype=np.int64), xvals, stored_mask, counters)
    fam = spec.family
    if fam in (Family.GAUSSIAN, Family.NONNEG_GAUSSIAN):
        return svals, active
    if fam is Family.POISSON:
        clipped = np.clip(svals, -ETA_CLAMP, ETA_CLAMP)
        if counters is not None:
            counters.eta_clamped += int(((clipped != svals) & active).sum())
        return np.exp(clipped), active
    if fam is Family.ADDITIVE_POISSON:
        rate = np.maximum(svals, RATE_FLOOR)
        if counters is not None:
            counters.rate_floored += int(((rate != svals) & active).sum())
        return rate, active
    if fam is Family.BERNOULLI:
        return 1.0 / (1.0 + np.exp(-svals)), active
    raise ConfigError("categorical means are softmax blocks; see categorical paths")


# ---------------------------------------------------------------------------
# categorical (softmax block per column)
# ---------------------------------------------------------------------------

def active_terms(data: DataMatrix) -> np.ndarray:
    """The single active row per column of categorical indicator data."""
    act = np.full(data.n_cols, -1, dtype=np.int64)
    act[data.cols] = data.rows
    if (act < 0).any():
        raise DataError("categorical data needs one active term per column")
    return act


def categorical_term_log_likelihoods(data, ctx, bank, spec, positions, counters=None):
    """Softmax log-likelihood of the active term at each listed column."""
    positions = np.asarray(positions, dtype=np.int64)
    emb = bank.effective_embeddings()
    cv = bank.effective_context_vectors()
    act = active_terms(data)[positions]
    S, counts = ctx.sums(data, cv, act, positions)
    active = np.ones(len(positions), dtype=bool)
    if spec.link.rescales_by_count:
        active = counts > 0
        S = S / np.maximum(counts, 1)[:, None]
    H = S @ emb.T                                   # (E, vocab)
    Hm = H - H.max(axis=1, keepdims=True)
    lse = np.log(np.exp(Hm).sum(axis=1)) + H.max(axis=1)
    ll = H[np.arange(len(positions)), act] - lse
    return np.where(active, ll, 0.0), active


def categorical_weighted_gradient(data, ctx, bank, spec, positions, weights,
                                  counters=None) -> Gradients:
    """Gradient of the weighted softmax log-likelihood over column blocks."""
    positions = np.asarray(positions, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    emb = bank.effective_embeddings()
    cv = bank.effective_context_vectors()
    g_emb = np.zeros_like(emb)
    g_cv = np.zeros_like(cv)
    if len(positions):
        act = active_terms(data)[positions]
        S, counts = ctx.sums(data, cv, act, positions)
        active = np.ones(len(positions), dtype=bool)
        if spec.link.rescales_by_count:
            active = counts > 0
            S = S / np.maximum(counts, 1)[:, None]
        w = np.where(active, weights, 0.0)
        H = S @ emb.T
        Hm = H - H.max(axis=1, keepdims=True)
        expH = np.exp(Hm)
        probs = expH / expH.sum(axis=1, keepdims=True)
        resid = -probs
        resid[np.arange(len(positions)), act] += 1.0  # one-hot minus softmax
        g_emb += (w[:, None] * resid).T @ S
        back = w[:, None] * (emb[act] - probs @ emb)
        if spec.link.rescales_by_count:
            back = back / np.maximum(counts, 1)[:, None]
        ctx.scatter_add(data, act, positions, back, g_cv)
    if bank.log_space:
        g_emb *= emb
        g_cv *= cv
    if bank.tied:
        total = g_emb + g_cv
        return Gradients(total, total)
    return Gradients(g_emb, g_cv)


# ---------------------------------------------------------------------------
# regularizers
# ---------------------------------------------------------------------------

def regularizer_penalty(bank: EmbeddingBank, reg_weight: float, regularizer: str) -> float:
    """Log-prior term of the objective under the -(w/2)||.||^2 convention."""
    if regularizer == "none" or reg_weight == 0.0:
        return 0.0
    if regularizer == "l2":
        emb = bank.effective_embeddings()
        total = float((emb ** 2).sum())
        if not bank.tied:
            total += float((bank.effective_context_vectors() ** 2).sum())
    elif regularizer == "lognormal":
        total = float((bank.embeddings ** 2).sum())
        if not bank.tied:
            total += float((bank.context_vectors ** 2).sum())
    else:
        raise ConfigError(f"unknown regularizer {regularizer!r}")
    return -0.5 * reg_weight * total


def regularizer_gradient(bank: EmbeddingBank, reg_weight: float, regularizer: str) -> Gradients:
    """Gradient of the log prior in stored coordinates, complete per table."""
    if regularizer == "none" or reg_weight == 0.0:
        g = np.zeros_like(bank.embeddings)
        return Gradients(g, g if bank.tied else np.zeros_like(bank.context_vectors))
    if regularizer == "l2":
        g_emb = -reg_weight * bank.effective_embeddings()
        g_cv = g_emb if bank.tied else -reg_weight * bank.effective_context_vectors()
        if bank.log_space:
            g_emb = g_emb * bank.effective_embeddings()
            g_cv = g_emb if bank.tied else g_cv * bank.effective_context_vectors()
    elif regularizer == "lognormal":
        g_emb = -reg_weight * bank.embeddings
        g_cv = g_emb if bank.tied else -reg_weight * bank.context_vectors
    else:
        raise ConfigError(f"unknown regularizer {regularizer!r}")
    return Gradients(g_emb, g_cv)


# ---------------------------------------------------------------------------
# named full-data gradients, one per family
# ---------------------------------------------------------------------------

def _all_cells(data: DataMatrix):
    """All data-term cells with values and storedness, vectorized."""
    if data.implicit_zero:
        n, t = data.n_rows, data.n_cols
        rows = np.repeat(np.arange(n, dtype=np.int64), t)
        cols = np.tile(np.arange(t, dtype=np.int64), n)
        x = data.dense().ravel()
        return rows, cols, x, x != 0.0
    return (data.rows, data.cols, data.vals,
            np.ones(data.nnz, dtype=bool))


def full_data_gradient(data, ctx, bank, spec, reg_weight, regularizer="l2",
                       zero_weight=1.0, counters=None) -> Gradients:
    """Exact gradient of the full objective (all data terms + regularizer)."""
    validate_bank(spec, bank)
    if spec.family is Family.CATEGORICAL:
        positions = np.arange(data.n_cols, dtype=np.int64)
        g = categorical_weighted_gradient(
            data, ctx, bank, spec, positions, np.ones(len(positions)), counters)
    else:
        rows, cols, xvals, stored = _all_cells(data)
        weights = np.ones(len(rows))
        if zero_weight != 1.0:
            weights = np.where(stored, 1.0, zero_weight)
        g = weighted_term_gradient(
            data, ctx, bank, spec, rows, cols, xvals, weights,
            stored_mask=stored, counters=counters)
    reg = regularizer_gradient(bank, reg_weight, regularizer)
    g.embeddings += reg.embeddings
    if not bank.tied:
        g.context_vectors += reg.context_vectors
    return g


def _named_gradient(family, data, ctx, bank, spec, reg_weight, regularizer, counters):
    if spec.family is not family:
        raise ConfigError(f"spec family {spec.family.value} does not match {family.value}")
    return full_data_gradient(data, ctx, bank, spec, reg_weight,
                              regularizer=regularizer, counters=counters)


def grad_gaussian(data, ctx, bank, spec, reg_weight, counters=None) -> Gradients:
    """Mean-parameterized Gaussian gradient with 1/sigma2 residual scaling."""
    return _named_gradient(Family.GAUSSIAN, data, ctx, bank, spec, reg_weight, "l2", counters)


def grad_nonneg_gaussian(data, ctx, bank, spec, reg_weight, counters=None) -> Gradients:
    """Gaussian gradient chained through exp for log-space banks."""
    validate_bank(spec, bank)
    return _named_gradient(Family.NONNEG_GAUSSIAN, data, ctx, bank, spec, reg_weight, "l2", counters)


def grad_poisson(data, ctx, bank, spec, reg_weight, counters=None) -> Gradients:
    """Multiplicative-rate Poisson gradient, residual x - exp(eta)."""
    return _named_gradient(Family.POISSON, data, ctx, bank, spec, reg_weight, "l2", counters)


def grad_additive_poisson(data, ctx, bank, spec, reg_weight, counters=None) -> Gradients:
    """Additive-rate Poisson gradient, residual x/rate - 1, log-space bank."""
    validate_bank(spec, bank)
    return _named_gradient(Family.ADDITIVE_POISSON, data, ctx, bank, spec, reg_weight, "l2", counters)


def grad_bernoulli(data, ctx, bank, spec, reg_weight, counters=None) -> Gradients:
    """Bernoulli gradient with residual x - logistic(eta)."""
    return _named_gradient(Family.BERNOULLI, data, ctx, bank, spec, reg_weight, "l2", counters)


def grad_categorical(data, ctx, bank, spec, reg_weight, counters=None) -> Gradients:
    """Softmax-regression gradient over one-active-term column blocks."""
    return _named_gradient(Family.CATEGORICAL, data, ctx, bank, spec, reg_weight, "l2", counters)
