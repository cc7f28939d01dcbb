"""Data model: sparse observation matrices, parameter banks, links.

Observations live in a sparse row/column matrix where the row indexes an
entity (neuron, item, vocabulary term) and the column indexes an occasion
(time frame, shopping trip, text position).  Each observation is modeled
conditional on the values at a set of other indices (its context), through
a natural parameter of the form

    eta = link( embedding[row] . sum_{j in context} context_vector[row_j] * x_j )

Mean-rescaled links divide the context sum by the number of members before
applying the base link.
"""

from __future__ import annotations

from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError, DegenerateContextError, RateDomainError


class DataIndex(NamedTuple):
    """Position of one observation: (entity row, occasion column)."""

    row: int
    col: int


class DataMatrix:
    """Sparse observations indexed by (row, col).

    When ``implicit_zero`` is true, absent cells are observations with value
    zero (count/binary data); the number of data terms is then
    ``n_rows * n_cols``.  When false, absent cells are missing and only the
    stored entries are data terms.
    """

    def __init__(
        self,
        n_rows: int,
        n_cols: int,
        rows: Sequence[int],
        cols: Sequence[int],
        vals: Sequence[float],
        implicit_zero: bool = False,
        row_labels: list[str] | None = None,
        col_labels: list[str] | None = None,
    ):
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.vals = np.asarray(vals, dtype=np.float64)
        self.implicit_zero = bool(implicit_zero)
        self.row_labels = row_labels
        self.col_labels = col_labels
        if not (len(self.rows) == len(self.cols) == len(self.vals)):
            raise DataError("rows, cols, vals must have equal length")
        if len(self.rows) and (
            self.rows.min() < 0
            or self.rows.max() >= self.n_rows
            or self.cols.min() < 0
            or self.cols.max() >= self.n_cols
        ):
            raise DataError("entry index outside matrix shape")
        if self.implicit_zero and len(self.vals) and np.any(self.vals == 0.0):
            raise DataError("implicit-zero matrix must not store explicit zeros")
        self._pos: dict[tuple[int, int], int] = {}
        for e, (r, c) in enumerate(zip(self.rows.tolist(), self.cols.tolist())):
            key = (r, c)
            if key in self._pos:
                raise DataError(f"duplicate entry at (row={r}, col={c})")
            self._pos[key] = e
        self._col_entries: list[np.ndarray] | None = None
        self._dense_cache: np.ndarray | None = None

    @property
    def nnz(self) -> int:
        return len(self.vals)

    @property
    def n_terms(self) -> int:
        """Number of data terms in the objective."""
        return self.n_rows * self.n_cols if self.implicit_zero else self.nnz

    def value(self, row: int, col: int) -> float:
        e = self._pos.get((row, col))
        if e is not None:
            return float(self.vals[e])
        if self.implicit_zero:
            return 0.0
        raise KeyError(f"no observation at (row={row}, col={col})")

    def has_entry(self, row: int, col: int) -> bool:
        return (row, col) in self._pos

    def column_entries(self, col: int) -> np.ndarray:
        """Positions (into rows/cols/vals) of stored entries in one column."""
        if self._col_entries is None:
            buckets: list[list[int]] = [[] for _ in range(self.n_cols)]
            for e, c in enumerate(self.cols.tolist()):
                buckets[c].append(e)
            self._col_entries = [np.asarray(b, dtype=np.int64) for b in buckets]
        return self._col_entries[col]

    def dense(self) -> np.ndarray:
        """Materialize as a dense (n_rows, n_cols) array, absent cells as 0.

        Cached; treat the result as read-only.
        """
        if self._dense_cache is None:
            x = np.zeros((self.n_rows, self.n_cols))
            x[self.rows, self.cols] = self.vals
            self._dense_cache = x
        return self._dense_cache

    def data_indices(self) -> list[DataIndex]:
        """All data-term indices: every cell if implicit_zero, else stored entries."""
        if self.implicit_zero:
            return [DataIndex(n, t) for n in range(self.n_rows) for t in range(self.n_cols)]
        return [DataIndex(int(r), int(c)) for r, c in zip(self.rows, self.cols)]

    def select_columns(self, keep: Sequence[int]) -> "DataMatrix":
        """New matrix over the given columns, reindexed 0..len(keep)-1."""
        keep = list(keep)
        remap = {old: new for new, old in enumerate(keep)}
        mask = np.isin(self.cols, keep)
        new_cols = np.array([remap[c] for c in self.cols[mask].tolist()], dtype=np.int64)
        labels = None
        if self.col_labels is not None:
            labels = [self.col_labels[c] for c in keep]
        return DataMatrix(
            self.n_rows,
            len(keep),
            self.rows[mask],
            new_cols,
            self.vals[mask],
            implicit_zero=self.implicit_zero,
            row_labels=self.row_labels,
            col_labels=labels,
        )

    def select_entries(self, positions: Sequence[int]) -> "DataMatrix":
        """New matrix with the same shape keeping only the given stored entries."""
        idx = np.asarray(positions, dtype=np.int64)
        return DataMatrix(
            self.n_rows,
            self.n_cols,
            self.rows[idx],
            self.cols[idx],
            self.vals[idx],
            implicit_zero=self.implicit_zero,
            row_labels=self.row_labels,
            col_labels=self.col_labels,
        )


class SharingScheme(Enum):
    """How data indices map to parameter rows.

    PER_ROW shares by entity row (one embedding per neuron/item).  GLOBAL is
    the vocabulary-table variant used by the text models; with terms stored
    as matrix rows it resolves identically to PER_ROW but records the intent.
    TIED aliases the context table to the embedding table.
    """

    PER_ROW = "per_row"
    GLOBAL = "global"
    TIED = "tied"


class EmbeddingBank:
    """Embedding and context-vector tables, one row per entity.

    With ``log_space`` set the stored values are logarithms and the effective
    parameters are their exponentials (strictly positive by construction).
    Under TIED sharing the two tables are the same array.
    """

    def __init__(self, embeddings: np.ndarray, context_vectors: np.ndarray, log_space: bool = False):
        self.embeddings = np.ascontiguousarray(embeddings, dtype=np.float64)
        self.context_vectors = (
            self.embeddings
            if context_vectors is embeddings
            else np.ascontiguousarray(context_vectors, dtype=np.float64)
        )
        self.log_space = bool(log_space)
        if self.embeddings.shape != self.context_vectors.shape:
            raise DataError("embedding and context tables must have equal shape")
        if not (np.isfinite(self.embeddings).all() and np.isfinite(self.context_vectors).all()):
            raise DataError("parameter banks must be finite")

    @classmethod
    def zeros(cls, n_rows: int, dim: int, log_space: bool = False, tied: bool = False) -> "EmbeddingBank":
        emb = np.zeros((n_rows, dim))
        return cls(emb, emb if tied else np.zeros((n_rows, dim)), log_space=log_space)

    @classmethod
    def init_random(
        cls,
        n_rows: int,
        dim: int,
        seed: int,
        log_space: bool = False,
        tied: bool = False,
        scale: float = 0.1,
    ) -> "EmbeddingBank":
        # i.i.d. uniform in [-scale/sqrt(dim), +scale/sqrt(dim)]; small symmetric
        # init keeps exp() in multiplicative models well away from overflow.
        rng = np.random.default_rng(seed)
        half = scale / np.sqrt(dim)
        emb = rng.uniform(-half, half, size=(n_rows, dim))
        cv = emb if tied else rng.uniform(-half, half, size=(n_rows, dim))
        return cls(emb, cv, log_space=log_space)

    @property
    def n_rows(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def tied(self) -> bool:
        return self.context_vectors is self.embeddings

    def effective_embeddings(self) -> np.ndarray:
        return np.exp(self.embeddings) if self.log_space else self.embeddings

    def effective_context_vectors(self) -> np.ndarray:
        return np.exp(self.context_vectors) if self.log_space else self.context_vectors

    def copy(self) -> "EmbeddingBank":
        emb = self.embeddings.copy()
        cv = emb if self.tied else self.context_vectors.copy()
        return EmbeddingBank(emb, cv, log_space=self.log_space)


class Link(Enum):
    """Map from the context inner product to the natural parameter."""

    IDENTITY = "identity"
    LOG = "log"
    MEAN_IDENTITY = "mean_identity"
    MEAN_LOG = "mean_log"

    @property
    def rescales_by_count(self) -> bool:
        return self in (Link.MEAN_IDENTITY, Link.MEAN_LOG)

    @property
    def is_log(self) -> bool:
        return self in (Link.LOG, Link.MEAN_LOG)


def resolve_params(i: DataIndex, scheme: SharingScheme, bank: EmbeddingBank):
    """Effective (exponentiated if log-space) parameter rows for a data index.

    Raises IndexError when the row is outside the bank.
    """
    n = i.row
    if not 0 <= n < bank.n_rows:
        raise IndexError(f"row {n} outside bank of {bank.n_rows} rows")
    emb = bank.effective_embeddings()[n]
    if scheme is SharingScheme.TIED:
        return emb, emb
    return emb, bank.effective_context_vectors()[n]


def context_inner_sum(
    i: DataIndex,
    data: DataMatrix,
    members: Sequence[DataIndex],
    bank: EmbeddingBank,
) -> np.ndarray:
    """sum_{j in context} context_vector[row_j] * x_j, as a dim-vector."""
    cv = bank.effective_context_vectors()
    total = np.zeros(bank.dim)
    for j in members:
        total += data.value(j.row, j.col) * cv[j.row]
    return total


def natural_parameter(
    i: DataIndex,
    data: DataMatrix,
    ctx,
    bank: EmbeddingBank,
    link: Link,
    scheme: SharingScheme = SharingScheme.PER_ROW,
) -> float:
    """Reference scalar evaluation of the natural parameter at one index.

    Empty contexts yield link(0) for plain links; mean-rescaled links raise
    DegenerateContextError.  A nonpositive value under a log link raises
    RateDomainError (training paths floor the rate instead; see families).
    """
    members = ctx.context_of(i.row, i.col)
    emb, _ = resolve_params(i, scheme, bank)
    total = context_inner_sum(i, data, members, bank)
    if link.rescales_by_count:
        if len(members) == 0:
            raise DegenerateContextError(f"empty context at {tuple(i)} under mean link")
        total = total / len(members)
    s = float(emb @ total)
    if link.is_log:
        if s <= 0.0:
            raise RateDomainError(f"nonpositive linear combination {s} under log link")
        return float(np.log(s))
    return s
