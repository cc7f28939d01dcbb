"""Context construction: which other observations condition each data point.

Three builders cover the application patterns:

* spatial k-nearest-neighbor contexts (same column, nearby entities),
* same-column basket contexts (the other stored entries of a column),
* sliding window contexts over column positions (text).

Each context map answers ``context_of(row, col)`` for any valid cell and
additionally provides vectorized context sums and gradient scatter used by
the training engine.  Maps are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataIndex, DataMatrix
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class SpatialLayout:
    """Per-entity coordinates (zero-fill unused axes) and neighbor count."""

    positions: np.ndarray  # (N, 3)
    k: int


@dataclass(frozen=True)
class WindowSpec:
    """Symmetric window half-size over column positions."""

    half_width: int

    def __post_init__(self):
        if self.half_width < 1:
            raise ConfigError("window half-width must be >= 1")


class ContextMap:
    """Base context map; subclasses define the membership rule.

    The vectorized hooks have generic (loop-based) implementations here;
    the knn/basket/window variants override them with array paths.
    """

    provenance = "explicit"

    def context_of(self, row: int, col: int) -> list[DataIndex]:
        raise NotImplementedError

    def sums(self, data: DataMatrix, cv: np.ndarray, rows, cols, xvals=None, stored_mask=None):
        """Context inner sums for a batch of cells.

        Returns (S, counts): S[e] = sum_{j in c_e} x_j * cv[row_j], and
        counts[e] = |c_e|.
        """
        dim = cv.shape[1]
        n = len(rows)
        S = np.zeros((n, dim))
        counts = np.zeros(n, dtype=np.int64)
        for e in range(n):
            members = self.context_of(int(rows[e]), int(cols[e]))
            counts[e] = len(members)
            for j in members:
                S[e] += data.value(j.row, j.col) * cv[j.row]
        return S, counts

    def scatter_add(self, data: DataMatrix, rows, cols, coef: np.ndarray, out: np.ndarray,
                    xvals=None, stored_mask=None) -> None:
        """out[row_j] += x_j * coef[e] for every member j of every batch cell e."""
        for e in range(len(rows)):
            for j in self.context_of(int(rows[e]), int(cols[e])):
                out[j.row] += data.value(j.row, j.col) * coef[e]


class ExplicitContext(ContextMap):
    """Context map given as an explicit cell -> members dictionary."""

    provenance = "explicit"

    def __init__(self, mapping: dict[tuple[int, int], list]):
        self._map = {k: [DataIndex(*j) for j in v] for k, v in mapping.items()}

    def context_of(self, row: int, col: int) -> list[DataIndex]:
        return self._map.get((row, col), [])


class KnnContext(ContextMap):
    """Same-column contexts over each entity's k nearest spatial neighbors."""

    provenance = "knn"

    def __init__(self, neighbors: np.ndarray):
        self.neighbors = np.asarray(neighbors, dtype=np.int64)  # (N, k)

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def context_of(self, row: int, col: int) -> list[DataIndex]:
        return [DataIndex(int(m), col) for m in self.neighbors[row]]

    def sums(self, data, cv, rows, cols, xvals=None, stored_mask=None):
        x = data.dense()
        nb = self.neighbors[rows]                      # (E, k)
        vals = x[nb, np.asarray(cols)[:, None]]        # (E, k)
        S = np.einsum("ek,ekd->ed", vals, cv[nb])
        counts = np.full(len(rows), self.k, dtype=np.int64)
        return S, counts

    def scatter_add(self, data, rows, cols, coef, out, xvals=None, stored_mask=None):
        x = data.dense()
        nb = self.neighbors[rows]
        vals = x[nb, np.asarray(cols)[:, None]]
        contrib = vals[:, :, None] * coef[:, None, :]
        np.add.at(out, nb.ravel(), contrib.reshape(-1, out.shape[1]))


class BasketContext(ContextMap):
    """Contexts are the other stored entries of the same column."""

    provenance = "basket"

    def __init__(self, data: DataMatrix):
        self._data = data

    def context_of(self, row: int, col: int) -> list[DataIndex]:
        d = self._data
        ids = d.column_entries(col)
        return [
            DataIndex(int(d.rows[e]), col) for e in ids if int(d.rows[e]) != row
        ]

    def _column_tables(self, data, cv):
        t = data.n_cols
        colsum = np.zeros((t, cv.shape[1]))
        np.add.at(colsum, data.cols, data.vals[:, None] * cv[data.rows])
        colcount = np.bincount(data.cols, minlength=t)
        return colsum, colcount

    def sums(self, data, cv, rows, cols, xvals=None, stored_mask=None):
        colsum, colcount = self._column_tables(data, cv)
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        if stored_mask is None:
            stored_mask = np.array(
                [data.has_entry(int(r), int(c)) for r, c in zip(rows, cols)], dtype=bool
            )
        if xvals is None:
            xvals = np.array([data.value(int(r), int(c)) for r, c in zip(rows, cols)])
        S = colsum[cols].copy()
        S[stored_mask] -= xvals[stored_mask, None] * cv[rows[stored_mask]]
        counts = colcount[cols] - stored_mask.astype(np.int64)
        return S, counts

    def scatter_add(self, data, rows, cols, coef, out, xvals=None, stored_mask=None):
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        R = np.zeros((data.n_cols, coef.shape[1]))
        np.add.at(R, cols, coef)
        # every stored entry j=(m,t) is in the context of every scored cell of
        # column t except itself
        np.add.at(out, data.rows, data.vals[:, None] * R[data.cols])
        if stored_mask is None:
            stored_mask = np.array(
                [data.has_entry(int(r), int(c)) for r, c in zip(rows, cols)], dtype=bool
            )
        if xvals is None:
            xvals = np.array([data.value(int(r), int(c)) for r, c in zip(rows, cols)])
        sm = stored_mask
        if sm.any():
            np.add.at(out, rows[sm], -(xvals[sm, None] * coef[sm]))


class WindowContext(ContextMap):
    """Contexts are the stored entries at other columns within a window.

    The positional rule (which columns surround position p) is independent of
    the data; ``window_positions`` exposes it.  Cell-level membership expands
    those columns through the stored entries of a bound matrix.
    """

    provenance = "window"

    def __init__(self, length: int, half_width: int, data: DataMatrix | None = None):
        if length < 1:
            raise ConfigError("sequence length must be >= 1")
        self.length = int(length)
        self.half_width = int(half_width)
        self._data = data
        if data is not None and data.n_cols != self.length:
            raise DataError("bound matrix length disagrees with window context")

    def window_positions(self, pos: int) -> list[int]:
        lo = max(0, pos - self.half_width)
        hi = min(self.length - 1, pos + self.half_width)
        return [j for j in range(lo, hi + 1) if j != pos]

    def context_of(self, row: int, col: int) -> list[DataIndex]:
        if self._data is None:
            raise ConfigError("window context not bound to data")
        d = self._data
        out = []
        for j in self.window_positions(col):
            for e in d.column_entries(j):
                out.append(DataIndex(int(d.rows[e]), j))
        return out

    def _window_table(self, table: np.ndarray) -> np.ndarray:
        """Per-position sum of `table` over the window, excluding the position."""
        w = self.half_width
        prefix = np.concatenate([np.zeros((1,) + table.shape[1:]), np.cumsum(table, axis=0)])
        p = np.arange(self.length)
        hi = np.minimum(p + w + 1, self.length)
        lo = np.maximum(p - w, 0)
        return prefix[hi] - prefix[lo] - table

    def _check(self, data):
        if data.n_cols != self.length:
            raise DataError("matrix length disagrees with window context")

    def sums(self, data, cv, rows, cols, xvals=None, stored_mask=None):
        self._check(data)
        colsum = np.zeros((data.n_cols, cv.shape[1]))
        np.add.at(colsum, data.cols, data.vals[:, None] * cv[data.rows])
        colcount = np.bincount(data.cols, minlength=data.n_cols).astype(np.float64)
        ws = self._window_table(colsum)
        wc = self._window_table(colcount[:, None])[:, 0]
        cols = np.asarray(cols)
        return ws[cols], wc[cols].astype(np.int64)

    def scatter_add(self, data, rows, cols, coef, out, xvals=None, stored_mask=None):
        self._check(data)
        R = np.zeros((data.n_cols, coef.shape[1]))
        np.add.at(R, np.asarray(cols), coef)
        rw = self._window_table(R)
        np.add.at(out, data.rows, data.vals[:, None] * rw[data.cols])


def knn_neighbors(positions: np.ndarray, k: int) -> np.ndarray:
    """k nearest entities per entity by Euclidean distance.

    All-pairs computation; distance ties broken by lower entity id so the
    result is deterministic.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if not 1 <= k < n:
        raise ConfigError(f"neighbor count k={k} must satisfy 1 <= k < N={n}")
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
    ids = np.arange(n)
    neighbors = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        order = np.lexsort((ids, d2[i]))
        order = order[order != i]
        neighbors[i] = order[:k]
    return neighbors


def build_knn_context(layout: SpatialLayout, data: DataMatrix) -> KnnContext:
    """Same-column context over each entity's k nearest neighbors."""
    pos = np.asarray(layout.positions, dtype=np.float64)
    if pos.shape[0] != data.n_rows:
        raise DataError(
            f"{pos.shape[0]} positions for {data.n_rows} entities"
        )
    return KnnContext(knn_neighbors(pos, layout.k))


def build_basket_context(data: DataMatrix) -> BasketContext:
    """Each cell's context is the other stored entries of its column."""
    if not data.implicit_zero:
        raise DataError("basket contexts require implicit-zero data")
    return BasketContext(data)


def build_window_context(length: int, spec: WindowSpec, data: DataMatrix | None = None) -> WindowContext:
    """Symmetric window of half-size w over positions, truncated at the ends."""
    return WindowContext(length, spec.half_width, data=data)
