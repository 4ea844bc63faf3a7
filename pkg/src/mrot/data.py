"""Synthetic domain-shift datasets, CSV ingestion and regression metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

SOURCE = "source"
TARGET = "target"
VALIDATION = "validation"
TAG_COLUMN = "domain_tag"


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None
    domain_tag: str = SOURCE

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=float).ravel()
            if self.labels.shape[0] != self.features.shape[0]:
                raise ValueError("labels must align with feature rows")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx, domain_tag=None):
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.features[idx], labels, domain_tag or self.domain_tag)


def _label_function(d_in, rng):
    # y = w.x + sin(v.x); |v| < |w| keeps y monotone along w when d_in == 1
    w = rng.normal(size=d_in)
    w /= np.linalg.norm(w)
    v = rng.normal(size=d_in)
    v *= 0.8 / np.linalg.norm(v)
    return lambda x: x @ w + np.sin(x @ v)


def generate_semantic_shift(n, d_in, noise_sd=0.1, seed=0):
    """Low-label source, high-label target.

    Samples are sorted by label; the lowest 80% form the source, the highest
    10% the target and the remaining middle band the validation split.

    Returns
    -------
    source, target, validation : Dataset
    """
    if n < 10:
        raise ValueError(f"n must be >= 10 to give every split a sample, got {n}")
    rng = np.random.default_rng(seed)
    label_fn = _label_function(d_in, rng)
    x = rng.standard_normal((n, d_in))
    y = label_fn(x) + noise_sd * rng.standard_normal(n)
    order = np.argsort(y, kind="stable")
    x, y = x[order], y[order]
    n_src = int(0.8 * n)
    n_tgt = int(0.1 * n)
    n_val = n - n_src - n_tgt
    source = Dataset(x[:n_src], y[:n_src], SOURCE)
    validation = Dataset(x[n_src:n_src + n_val], y[n_src:n_src + n_val], VALIDATION)
    target = Dataset(x[n_src + n_val:], y[n_src + n_val:], TARGET)
    return source, target, validation


def generate_covariate_shift(n, d_in, shift_magnitude=1.0, seed=0, noise_sd=0.1):
    """Shared labeling function; target inputs shifted along a seeded unit direction.

    Returns
    -------
    source, target : Dataset
        ``n`` samples each.
    """
    if n < 4:
        raise ValueError(f"n must be >= 4, got {n}")
    rng = np.random.default_rng(seed)
    label_fn = _label_function(d_in, rng)
    direction = rng.normal(size=d_in)
    direction /= np.linalg.norm(direction)
    src_rng, tgt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    xs = src_rng.standard_normal((n, d_in))
    xt = tgt_rng.standard_normal((n, d_in)) + shift_magnitude * direction
    ys = label_fn(xs) + noise_sd * src_rng.standard_normal(n)
    yt = label_fn(xt) + noise_sd * tgt_rng.standard_normal(n)
    source = Dataset(xs, ys, SOURCE)
    target = Dataset(xt, yt, TARGET)
    source.shift_direction = target.shift_direction = direction
    return source, target


def split_labeled_target(target: Dataset, fraction, seed=0):
    """Random labeled/held-out split of a target set (at least one sample each side)."""
    n = len(target)
    if n < 2:
        raise ValueError("need at least two target samples to split")
    n_lab = min(max(1, int(round(fraction * n))), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return target.subset(np.sort(perm[:n_lab])), target.subset(np.sort(perm[n_lab:]))


def _read_rows(path):
    """CSV rows with their 1-based line numbers; ``#`` comment lines are skipped."""
    with open(path, newline="") as fh:
        lines = [(i, line) for i, line in enumerate(fh, start=1) if not line.lstrip().startswith("#")]
    rows = csv.reader(line for _, line in lines)
    return [(lineno, row) for (lineno, _), row in zip(lines, rows)]


def load_csv(path, label_column="y", domain_tag=SOURCE, require_labels=True) -> Dataset:
    """Read a numeric CSV with a header row.

    All columns other than the label (and an optional ``domain_tag`` column)
    become features, in file order. ``label_column`` is a header name or a
    zero-based column index. Lines starting with ``#`` are ignored. With
    ``require_labels=False`` a file without the label column loads with
    ``labels=None``.
    """
    numbered = _read_rows(path)
    if not numbered or not any(cell.strip() for cell in numbered[0][1]):
        raise ValueError(f"{path}: file is empty")
    header = [h.strip() for h in numbered[0][1]]
    if isinstance(label_column, int) or (isinstance(label_column, str) and label_column.isdigit()
                                        and label_column not in header):
        li = int(label_column)
        if not 0 <= li < len(header):
            raise ValueError(f"{path}: label column index {li} out of range; columns: {header}")
    elif label_column in header:
        li = header.index(label_column)
    elif not require_labels:
        li = None
    else:
        raise ValueError(f"{path}: label column {label_column!r} not found; available columns: {header}")
    tag_i = header.index(TAG_COLUMN) if TAG_COLUMN in header else None
    feat_cols = [i for i in range(len(header)) if i not in (li, tag_i)]
    feats, labels, tags = [], [], set()
    for lineno, row in numbered[1:]:
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            feats.append([float(row[i]) for i in feat_cols])
            if li is not None:
                labels.append(float(row[li]))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
        if tag_i is not None:
            tags.add(row[tag_i].strip())
    if not feats:
        raise ValueError(f"{path}: no data rows")
    if len(tags) == 1:
        domain_tag = tags.pop()
    return Dataset(np.array(feats), None if li is None else np.array(labels), domain_tag)


def read_matrix_csv(path) -> np.ndarray:
    """Headerless numeric CSV as a 2-D array (``#`` lines skipped)."""
    numbered = [(n, r) for n, r in _read_rows(path) if r and any(c.strip() for c in r)]
    if not numbered:
        raise ValueError(f"{path}: file is empty")
    width = len(numbered[0][1])
    out = []
    for lineno, row in numbered:
        if len(row) != width:
            raise ValueError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        try:
            out.append([float(c) for c in row])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    return np.array(out)


def write_csv(dataset: Dataset, path, label_column="y", comment=None):
    d = dataset.features.shape[1]
    with open(path, "w", newline="") as fh:
        if comment is not None:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(d)] + [label_column, TAG_COLUMN])
        labels = dataset.labels if dataset.labels is not None else np.full(len(dataset), np.nan)
        for x, y in zip(dataset.features, labels):
            writer.writerow([repr(float(v)) for v in x] + [repr(float(y)), dataset.domain_tag])


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    pearson: float
    spearman: float
    flags: list = field(default_factory=list)

    def as_dict(self):
        return {"mae": self.mae, "rmse": self.rmse, "pearson": self.pearson, "spearman": self.spearman}


def _correlation(a, b):
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
    if denom == 0:
        return None
    return float(np.clip(np.sum(da * db) / denom, -1.0, 1.0))


def evaluate(predictions, labels) -> MetricsReport:
    """MAE, RMSE, Pearson and Spearman (average ranks for ties).

    A correlation with a constant side is reported as 0 and flagged.
    """
    p = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if p.shape != y.shape or p.size == 0:
        raise ValueError("predictions and labels must be non-empty and of equal length")
    err = p - y
    flags = []
    pearson = _correlation(p, y)
    if pearson is None:
        pearson = 0.0
        flags.append("pearson_degenerate")
    spearman = _correlation(rankdata(p), rankdata(y))
    if spearman is None:
        spearman = 0.0
        flags.append("spearman_degenerate")
    return MetricsReport(float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err**2))),
                         pearson, spearman, flags)
