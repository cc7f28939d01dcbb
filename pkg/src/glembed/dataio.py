"""File formats and ingestion: triplet data, entity locations, model
persistence, and run configuration.

All formats are line-oriented text.  Triplet and locations files carry a
header line whose delimiter (tab or comma) sets the delimiter for the rest
of the file.  Model files round-trip banks bit-exactly by printing floats
with 17 significant digits.  Writes go through a temp-and-rename so
readers never observe partial files.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass, fields

import numpy as np

from .core import DataMatrix, EmbeddingBank, Link, SharingScheme
from .errors import CompatibilityError, ConfigError, DataError
from .families import Family, FamilySpec, default_link
from .train import DEFAULT_STEP_GRID, TrainConfig

MODEL_MAGIC = "#glembed-model v1"


def atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-glembed-")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _detect_delimiter(header: str) -> str:
    return "\t" if "\t" in header else ","


# ---------------------------------------------------------------------------
# triplet files
# ---------------------------------------------------------------------------

def read_triplets(path: str):
    """Parse a (row_id, col_id, value) file.

    Ids may be arbitrary strings; they map to dense 0-based indices in
    first-seen order.  Returns (row_labels, col_labels, rows, cols, vals).
    """
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    delim = _detect_delimiter(lines[0])
    row_index: dict[str, int] = {}
    col_index: dict[str, int] = {}
    rows, cols, vals = [], [], []
    seen: set[tuple[int, int]] = set()
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(delim)
        if len(parts) != 3:
            raise DataError(f"{path}:{ln}: expected 3 fields, got {len(parts)}")
        rk, ck, vtext = (p.strip() for p in parts)
        try:
            v = float(vtext)
        except ValueError:
            raise DataError(f"{path}:{ln}: bad value {vtext!r}") from None
        r = row_index.setdefault(rk, len(row_index))
        c = col_index.setdefault(ck, len(col_index))
        if (r, c) in seen:
            raise DataError(f"{path}:{ln}: duplicate entry for ({rk}, {ck})")
        seen.add((r, c))
        rows.append(r)
        cols.append(c)
        vals.append(v)
    return (list(row_index), list(col_index),
            np.asarray(rows, np.int64), np.asarray(cols, np.int64),
            np.asarray(vals, np.float64))


def write_triplets(path: str, data: DataMatrix) -> None:
    rl = data.row_labels or [str(i) for i in range(data.n_rows)]
    cl = data.col_labels or [str(i) for i in range(data.n_cols)]
    lines = ["row\tcol\tvalue"]
    for r, c, v in zip(data.rows.tolist(), data.cols.tolist(), data.vals.tolist()):
        lines.append(f"{rl[r]}\t{cl[c]}\t{v:.17g}")
    atomic_write(path, "\n".join(lines) + "\n")


def ingest(path: str, *, implicit_zero=False, lag=False, rating_shift=False,
           min_row_count=0, min_col_count=0, row_vocab: list[str] | None = None) -> DataMatrix:
    """Load a triplet file and apply the preprocessing transforms in order:
    lag, rating shift-and-clamp, then minimum-count filters.

    ``row_vocab`` pins the row universe and ordering (evaluation against a
    trained model); unknown row ids then raise CompatibilityError.
    """
    row_labels, col_labels, rows, cols, vals = read_triplets(path)
    if row_vocab is not None:
        lookup = {k: i for i, k in enumerate(row_vocab)}
        try:
            remap = np.asarray([lookup[k] for k in row_labels], np.int64)
        except KeyError as e:
            raise CompatibilityError(f"row id {e.args[0]!r} not in the model vocabulary") from None
        rows = remap[rows]
        row_labels = list(row_vocab)
    n_rows, n_cols = len(row_labels), len(col_labels)

    if lag:
        # columns become successive differences in column-index order; the
        # first column is consumed
        if n_cols < 2:
            raise DataError("lag transform needs at least 2 columns")
        dense = np.zeros((n_rows, n_cols))
        dense[rows, cols] = vals
        dense = dense[:, 1:] - dense[:, :-1]
        col_labels = col_labels[1:]
        n_cols -= 1
        rr, cc = np.nonzero(dense) if implicit_zero else np.indices(dense.shape).reshape(2, -1)
        rows, cols = rr.ravel(), cc.ravel()
        vals = dense[rows, cols]

    if rating_shift:
        vals = vals - 2.0
        vals = np.where(vals < 0.0, 0.0, vals)

    if implicit_zero:
        keep = vals != 0.0
        rows, cols, vals = rows[keep], cols[keep], vals[keep]

    if min_row_count > 0 or min_col_count > 0:
        if min_row_count > 0:
            counts = np.bincount(rows, minlength=n_rows)
            keep_rows = np.flatnonzero(counts >= min_row_count)
            rmap = -np.ones(n_rows, np.int64)
            rmap[keep_rows] = np.arange(len(keep_rows))
            mask = rmap[rows] >= 0
            rows, cols, vals = rmap[rows[mask]], cols[mask], vals[mask]
            row_labels = [row_labels[i] for i in keep_rows]
            n_rows = len(keep_rows)
        if min_col_count > 0:
            counts = np.bincount(cols, minlength=n_cols)
            keep_cols = np.flatnonzero(counts >= min_col_count)
            cmap = -np.ones(n_cols, np.int64)
            cmap[keep_cols] = np.arange(len(keep_cols))
            mask = cmap[cols] >= 0
            rows, cols, vals = rows[mask], cmap[cols[mask]], vals[mask]
            col_labels = [col_labels[i] for i in keep_cols]
            n_cols = len(keep_cols)

    return DataMatrix(n_rows, n_cols, rows, cols, vals,
                      implicit_zero=implicit_zero,
                      row_labels=row_labels, col_labels=col_labels)


# ---------------------------------------------------------------------------
# locations files
# ---------------------------------------------------------------------------

def read_locations(path: str, row_labels: list[str]) -> np.ndarray:
    """Per-entity coordinates aligned with the given row order.

    Rows are (entity_id, x, y[, z]); missing axes are zero-filled.  Every
    modeled entity must appear exactly once.
    """
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    delim = _detect_delimiter(lines[0])
    seen: dict[str, np.ndarray] = {}
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(delim)]
        if len(parts) not in (3, 4):
            raise DataError(f"{path}:{ln}: expected entity_id plus 2 or 3 coordinates")
        key = parts[0]
        if key in seen:
            raise DataError(f"{path}:{ln}: duplicate location for {key!r}")
        try:
            coords = [float(p) for p in parts[1:]]
        except ValueError:
            raise DataError(f"{path}:{ln}: bad coordinate") from None
        vec = np.zeros(3)
        vec[: len(coords)] = coords
        seen[key] = vec
    out = np.zeros((len(row_labels), 3))
    for i, key in enumerate(row_labels):
        if key not in seen:
            raise DataError(f"{path}: no location for entity {key!r}")
        out[i] = seen[key]
    return out


def write_locations(path: str, positions: np.ndarray, row_labels: list[str] | None = None) -> None:
    labels = row_labels or [str(i) for i in range(len(positions))]
    lines = ["entity\tx\ty\tz"]
    for key, p in zip(labels, np.asarray(positions)):
        lines.append(f"{key}\t{p[0]:.17g}\t{p[1]:.17g}\t{p[2]:.17g}")
    atomic_write(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

@dataclass
class ModelMeta:
    family: str
    link: str
    sharing: str = "per_row"
    log_space: bool = False
    dim: int = 0
    n_entities: int = 0
    sigma2: float = 1.0
    vocab_size: int = 0
    seed: int = 0
    context: str = "basket"
    context_param: int = 0
    config_digest: str = ""

    def family_spec(self) -> FamilySpec:
        return FamilySpec(Family(self.family), Link(self.link),
                          sigma2=self.sigma2, vocab_size=self.vocab_size)


def store_model(path: str, bank: EmbeddingBank, meta: ModelMeta,
                row_labels: list[str] | None = None) -> None:
    labels = row_labels or [str(i) for i in range(bank.n_rows)]
    if len(labels) != bank.n_rows:
        raise DataError("one label per bank row required")
    head = [MODEL_MAGIC]
    for f in fields(ModelMeta):
        v = getattr(meta, f.name)
        if f.name == "log_space":
            v = int(v)
        head.append(f"{f.name}={v}")
    head.append("#entities")
    lines = head
    for i, key in enumerate(labels):
        nums = [f"{v:.17g}" for v in bank.embeddings[i]]
        nums += [f"{v:.17g}" for v in bank.context_vectors[i]]
        lines.append(key + "\t" + "\t".join(nums))
    atomic_write(path, "\n".join(lines) + "\n")


def load_model(path: str):
    """Read a model file back into (bank, meta, row_labels)."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != MODEL_MAGIC:
        raise DataError(f"{path}: not a glembed model file")
    kv = {}
    body_at = None
    for i, line in enumerate(lines[1:], start=1):
        if line == "#entities":
            body_at = i + 1
            break
        if "=" not in line:
            raise DataError(f"{path}:{i + 1}: bad header line {line!r}")
        k, v = line.split("=", 1)
        kv[k] = v
    if body_at is None:
        raise DataError(f"{path}: missing #entities section")
    casts = {"log_space": lambda s: bool(int(s)), "dim": int, "n_entities": int,
             "sigma2": float, "vocab_size": int, "seed": int, "context_param": int}
    meta_args = {}
    for f in fields(ModelMeta):
        if f.name not in kv:
            raise DataError(f"{path}: header missing {f.name}")
        meta_args[f.name] = casts.get(f.name, str)(kv[f.name])
    meta = ModelMeta(**meta_args)
    labels, emb_rows, cv_rows = [], [], []
    for ln, line in enumerate(lines[body_at:], start=body_at + 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 1 + 2 * meta.dim:
            raise DataError(f"{path}:{ln}: expected {1 + 2 * meta.dim} fields")
        labels.append(parts[0])
        nums = [float(p) for p in parts[1:]]
        emb_rows.append(nums[: meta.dim])
        cv_rows.append(nums[meta.dim:])
    if len(labels) != meta.n_entities:
        raise DataError(f"{path}: {len(labels)} entity rows, header says {meta.n_entities}")
    emb = np.asarray(emb_rows)
    cv = emb if meta.sharing == SharingScheme.TIED.value else np.asarray(cv_rows)
    bank = EmbeddingBank(emb, cv, log_space=meta.log_space)
    return bank, meta, labels


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_ARCHETYPE_DEFAULTS = {
    # family -> (reg weight, iterations, estimator, minibatch, regularizer)
    "gaussian": (10.0, 500, "minibatch", 100, "l2"),
    "nonneg_gaussian": (0.1, 500, "minibatch", 100, "l2"),
    "poisson": (1.0, 3000, "sparse", None, "l2"),
    "additive_poisson": (1.0, 3000, "sparse", None, "l2"),
    "bernoulli": (1.0, 3000, "sparse", None, "l2"),
    "categorical": (0.0, 1000, "full", None, "none"),
}
_DEFAULT_CONTEXT = {
    "gaussian": "knn", "nonneg_gaussian": "knn",
    "poisson": "basket", "additive_poisson": "basket",
    "bernoulli": "window", "categorical": "window",
}
_IMPLICIT_FAMILIES = ("poisson", "additive_poisson", "bernoulli", "categorical")


@dataclass
class RunConfig:
    """Flat key=value training configuration with per-family defaults."""

    family: str
    k: int = 10
    context: str = ""
    knn_k: int = 10
    window_w: int = 2
    link: str = ""
    sigma2: float = 1.0
    reg_weight: float = -1.0
    regularizer: str = ""
    estimator: str = ""
    zero_estimator: str = "unbiased"
    gamma: float = 0.1
    minibatch_size: int = 0
    iterations: int = -1
    negative_samples: int = 10
    step_size_grid: tuple[float, ...] = ()
    seed: int = 0
    split: str = ""
    train_frac: float = 0.9
    valid_frac: float = 0.05
    test_frac: float = 0.05
    implicit_zero: int = -1
    lag: bool = False
    rating_shift: bool = False
    min_row_count: int = 0
    min_col_count: int = 0

    def __post_init__(self):
        if self.family not in _ARCHETYPE_DEFAULTS:
            raise ConfigError(f"unknown family {self.family!r}")
        reg_w, iters, estim, mb, regzr = _ARCHETYPE_DEFAULTS[self.family]
        if self.reg_weight < 0:
            self.reg_weight = reg_w
        if self.iterations < 0:
            self.iterations = iters
        if not self.estimator:
            self.estimator = estim
        if self.minibatch_size <= 0:
            self.minibatch_size = mb or 0
        if not self.regularizer:
            self.regularizer = regzr
        if not self.context:
            self.context = _DEFAULT_CONTEXT[self.family]
        if not self.link:
            self.link = default_link(Family(self.family)).value
        if not self.step_size_grid:
            self.step_size_grid = DEFAULT_STEP_GRID
        if self.implicit_zero < 0:
            self.implicit_zero = int(self.family in _IMPLICIT_FAMILIES)
        if not self.split:
            self.split = "none" if self.context == "window" else "columns"
        if self.context not in ("knn", "basket", "window"):
            raise ConfigError(f"unknown context builder {self.context!r}")
        if self.split not in ("columns", "ratings", "none"):
            raise ConfigError(f"unknown split {self.split!r}")

    def family_spec(self, vocab_size: int = 0) -> FamilySpec:
        return FamilySpec(Family(self.family), Link(self.link),
                          sigma2=self.sigma2, vocab_size=vocab_size)

    def train_config(self, step_size: float) -> TrainConfig:
        return TrainConfig(
            dim=self.k,
            step_size=step_size,
            minibatch_size=self.minibatch_size or None,
            n_iterations=self.iterations,
            negative_samples=self.negative_samples,
            zero_estimator=self.zero_estimator,
            downweight=self.gamma,
            reg_weight=self.reg_weight,
            regularizer=self.regularizer,
            estimator=self.estimator,
            seed=self.seed,
            step_size_grid=self.step_size_grid,
        )

    def canonical_text(self) -> str:
        parts = []
        for f in fields(RunConfig):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(f"{x:g}" for x in v)
            parts.append(f"{f.name}={v}")
        return "\n".join(parts) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:12]


_BOOL_KEYS = {"lag", "rating_shift"}
_INT_KEYS = {"k", "knn_k", "window_w", "minibatch_size", "iterations",
             "negative_samples", "seed", "min_row_count", "min_col_count",
             "implicit_zero"}
_FLOAT_KEYS = {"sigma2", "reg_weight", "gamma", "train_frac", "valid_frac",
               "test_frac"}


def parse_run_config(text: str) -> RunConfig:
    """Parse key=value lines; '#' starts a comment.  Unknown keys fail."""
    known = {f.name for f in fields(RunConfig)}
    kv: dict[str, object] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {ln}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "lambda":  # accepted alias for the regularization weight
            key = "reg_weight"
        if key not in known:
            raise ConfigError(f"config line {ln}: unknown key {key!r}")
        if key in kv:
            raise ConfigError(f"config line {ln}: duplicate key {key!r}")
        try:
            if key in _BOOL_KEYS:
                kv[key] = val.lower() in ("1", "true", "yes")
            elif key in _INT_KEYS:
                kv[key] = int(val)
            elif key in _FLOAT_KEYS:
                kv[key] = float(val)
            elif key == "step_size_grid":
                kv[key] = tuple(float(s) for s in val.split(",") if s.strip())
            else:
                kv[key] = val
        except ValueError:
            raise ConfigError(f"config line {ln}: bad value for {key}: {val!r}") from None
    if "family" not in kv:
        raise ConfigError("config must set family")
    return RunConfig(**kv)  # type: ignore[arg-type]


def load_run_config(path: str) -> RunConfig:
    with open(path) as f:
        return parse_run_config(f.read())
