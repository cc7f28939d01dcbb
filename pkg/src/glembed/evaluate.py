"""Held-out evaluation: splits, squared-error protocols, normalized
predictive log-likelihood, and the baselines that anchor the test suite.

Two split flavors: whole-column splits (time frames, shopping trips) and
per-entry holdout of nonzero ratings.  Both are deterministic per seed and
partition the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DataMatrix, EmbeddingBank
from .errors import ConfigError
from .families import Family, FamilySpec, conditional_means, validate_bank

MIN_BASKET_ITEMS = 2  # held-out baskets need at least two distinct items


@dataclass(frozen=True)
class SplitSpec:
    """How to carve train/validation/test out of one matrix."""

    variant: str = "columns"        # "columns" | "ratings"
    train_frac: float = 0.9
    valid_frac: float = 0.05
    test_frac: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("columns", "ratings"):
            raise ConfigError("split variant must be 'columns' or 'ratings'")
        for f in (self.train_frac, self.valid_frac, self.test_frac):
            if f < 0:
                raise ConfigError("split fractions must be nonnegative")
        if self.variant == "columns" and self.train_frac + self.valid_frac + self.test_frac > 1 + 1e-9:
            raise ConfigError("column split fractions must sum to <= 1")
        if self.variant == "ratings" and self.valid_frac + self.test_frac > 1 + 1e-9:
            raise ConfigError("ratings holdout fractions must sum to <= 1")


@dataclass
class SplitResult:
    train: DataMatrix
    valid: DataMatrix
    test: DataMatrix
    dropped_test_columns: int = 0


@dataclass
class EvalReport:
    """Point estimate with its standard error across test entries.

    stderr is population std / sqrt(n), so duplicating the test set scales
    it by exactly 1/sqrt(2).
    """

    metric: str
    estimate: float
    stderr: float
    n_entries: int
    excluded: int = 0

    @staticmethod
    def from_scores(metric: str, scores: np.ndarray, excluded: int = 0) -> "EvalReport":
        scores = np.asarray(scores, dtype=np.float64)
        n = len(scores)
        if n == 0:
            raise ConfigError(f"no entries left to score for {metric}")
        est = float(scores.mean())
        se = float(scores.std() / math.sqrt(n))
        return EvalReport(metric, est, se, n, excluded)

    def to_tsv(self) -> str:
        return (
            "metric\testimate\tstderr\tn\texcluded_count\n"
            f"{self.metric}\t{self.estimate:.6g}\t{self.stderr:.6g}"
            f"\t{self.n_entries}\t{self.excluded}\n"
        )


def make_split(data: DataMatrix, spec: SplitSpec) -> SplitResult:
    """Deterministic train/validation/test partition.

    Column splits assign whole columns with floor rounding, remainder to
    train; held-out basket columns with fewer than two distinct items are
    dropped (and counted).  Ratings holdout assigns individual nonzero
    entries; removed entries become implicit zeros of the training matrix.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.variant == "columns":
        t = data.n_cols
        n_test = int(t * spec.test_frac)
        n_valid = int(t * spec.valid_frac)
        order = rng.permutation(t)
        test_cols = sorted(order[:n_test].tolist())
        valid_cols = sorted(order[n_test:n_test + n_valid].tolist())
        train_cols = sorted(order[n_test + n_valid:].tolist())
        dropped = 0
        if data.implicit_zero:
            kept = [c for c in test_cols if len(data.column_entries(c)) >= MIN_BASKET_ITEMS]
            dropped = len(test_cols) - len(kept)
            test_cols = kept
        result = SplitResult(
            data.select_columns(train_cols),
            data.select_columns(valid_cols),
            data.select_columns(test_cols),
            dropped,
        )
    else:
        nnz = data.nnz
        n_test = int(nnz * spec.test_frac)
        n_valid = int(nnz * spec.valid_frac)
        order = rng.permutation(nnz)
        test_e = order[:n_test]
        valid_e = order[n_test:n_test + n_valid]
        train_e = order[n_test + n_valid:]
        result = SplitResult(
            data.select_entries(np.sort(train_e)),
            data.select_entries(np.sort(valid_e)),
            data.select_entries(np.sort(test_e)),
            0,
        )
    for name, frac, part in (
        ("train", spec.train_frac, result.train),
        ("validation", spec.valid_frac, result.valid),
        ("test", spec.test_frac, result.test),
    ):
        if frac > 0 and part.nnz == 0:
            raise ConfigError(f"{name} split came out empty; adjust fractions")
    return result


def _require_gaussian(spec: FamilySpec):
    if spec.family not in (Family.GAUSSIAN, Family.NONNEG_GAUSSIAN):
        raise ConfigError("squared-error protocols apply to Gaussian-family models")


def _require_poisson(spec: FamilySpec):
    if spec.family not in (Family.POISSON, Family.ADDITIVE_POISSON):
        raise ConfigError("normalized predictive log-likelihood applies to Poisson-family models")


def leave_one_out_mse(test_data: DataMatrix, ctx, bank: EmbeddingBank,
                      spec: FamilySpec) -> EvalReport:
    """Squared error of predicting each held-out entry from the true values
    of its context members.  Empty-context entries are excluded and counted."""
    _require_gaussian(spec)
    validate_bank(spec, bank)
    means, active = conditional_means(
        test_data, ctx, bank, spec, test_data.rows, test_data.cols,
        xvals=test_data.vals,
        stored_mask=np.ones(test_data.nnz, dtype=bool))
    counts = np.array([len(ctx.context_of(int(r), int(c)))
                       for r, c in zip(test_data.rows, test_data.cols)])
    keep = active & (counts > 0)
    err2 = (test_data.vals[keep] - means[keep]) ** 2
    return EvalReport.from_scores("leave_one_out_mse", err2, int((~keep).sum()))


def leave_fraction_out_mse(test_data: DataMatrix, ctx, bank: EmbeddingBank,
                           spec: FamilySpec, folds: int = 4, seed: int = 0) -> EvalReport:
    """Fold the entities, predict each entry with in-fold context members
    removed, and pool the squared errors over all folds."""
    _require_gaussian(spec)
    validate_bank(spec, bank)
    if folds < 2:
        raise ConfigError("fold count must be >= 2 (folds=1 would empty every context)")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(test_data.n_rows, dtype=np.int64)
    perm = rng.permutation(test_data.n_rows)
    for rank, row in enumerate(perm.tolist()):
        fold_of[row] = rank % folds
    emb = bank.effective_embeddings()
    cv = bank.effective_context_vectors()
    divide = spec.link.rescales_by_count
    err2 = []
    excluded = 0
    for r, c, x in zip(test_data.rows.tolist(), test_data.cols.tolist(),
                       test_data.vals.tolist()):
        members = [j for j in ctx.context_of(r, c) if fold_of[j.row] != fold_of[r]]
        if not members:
            excluded += 1
            continue
        total = np.zeros(bank.dim)
        for j in members:
            total += test_data.value(j.row, j.col) * cv[j.row]
        if divide:
            total /= len(members)
        pred = float(emb[r] @ total)
        err2.append((x - pred) ** 2)
    return EvalReport.from_scores("leave_25pct_out_mse" if folds == 4 else
                                  f"leave_fold_out_mse_{folds}", np.array(err2), excluded)


def normalized_predictive_ll(test_data: DataMatrix, ctx, bank: EmbeddingBank,
                             spec: FamilySpec) -> EvalReport:
    """Per held-out nonzero entry: log of its conditional mean over the sum
    of all entities' conditional means at the same column."""
    _require_poisson(spec)
    validate_bank(spec, bank)
    n = test_data.n_rows
    cols_with = np.unique(test_data.cols)
    col_pos = {int(c): i for i, c in enumerate(cols_with)}
    rows_all = np.tile(np.arange(n, dtype=np.int64), len(cols_with))
    cols_all = np.repeat(cols_with, n)
    x_dense = test_data.dense()
    xv = x_dense[rows_all, cols_all]
    means, active = conditional_means(
        test_data, ctx, bank, spec, rows_all, cols_all,
        xvals=xv, stored_mask=xv != 0.0)
    means = np.where(active, means, 0.0)
    mean_table = means.reshape(len(cols_with), n)
    normalizer = mean_table.sum(axis=1)
    scores = []
    excluded = 0
    for r, c in zip(test_data.rows.tolist(), test_data.cols.tolist()):
        i = col_pos[c]
        mu = mean_table[i, r]
        z = normalizer[i]
        if mu <= 0.0 or z <= 0.0 or not np.isfinite(z):
            excluded += 1
            continue
        scores.append(math.log(mu / z))
    return EvalReport.from_scores("normalized_predictive_ll", np.array(scores), excluded)


def popularity_npll(test_data: DataMatrix, train_data: DataMatrix,
                    smoothing: float = 1.0) -> EvalReport:
    """Item-popularity baseline for the normalized log-likelihood: each
    entity's score is its (smoothed) share of training units, context-free."""
    pop = np.zeros(train_data.n_rows)
    np.add.at(pop, train_data.rows, train_data.vals)
    pop = pop + smoothing
    logshare = np.log(pop / pop.sum())
    scores = logshare[test_data.rows]
    return EvalReport.from_scores("popularity_npll", scores)


def constant_predictor_mse(test_data: DataMatrix, value: float = 0.0) -> EvalReport:
    """Squared error of predicting every entry with one constant (the
    zero-predictor anchor when value=0)."""
    err2 = (test_data.vals - value) ** 2
    return EvalReport.from_scores("constant_predictor_mse", err2)
