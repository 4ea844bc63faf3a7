"""Ground-space distances between source and target mini-batches.

Two metrics are provided: the plain Euclidean distance between embeddings
(unsupervised adaptation) and the Jensen-Shannon style feature/label metric
used when target labels are available (semi-supervised adaptation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UDA = "uda"
SEMI_DA = "semi"
MODES = (UDA, SEMI_DA)


@dataclass
class CostMatrix:
    """Pairwise source/target cost.

    Parameters
    ----------
    entries : ndarray of shape (b, b)
        Row i is the i-th source sample, column j the j-th target sample.
    mode : {"uda", "semi"}
        Which ground metric produced the entries.
    degenerate : bool
        Set by :func:`normalize_distances` when the input was all zeros.
    """

    entries: np.ndarray
    mode: str = UDA
    degenerate: bool = False

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        if self.entries.ndim != 2:
            raise ValueError(f"cost matrix must be 2-D, got shape {self.entries.shape}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")

    @property
    def shape(self):
        return self.entries.shape


@dataclass(frozen=True)
class JsCostParams:
    epsilon: float = 1.0
    kappa: float = 0.2
    zeta: float = 1e-3

    def __post_init__(self):
        if not self.zeta > 0:
            raise ValueError(f"zeta must be > 0, got {self.zeta}")
        if self.epsilon < 0 or self.kappa < 0:
            raise ValueError("epsilon and kappa must be non-negative")


def _as_points(x, name):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty (n, d) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise ValueError(f"{name} has a non-finite entry at index {tuple(bad)}")
    return arr


def pairwise_euclidean(a, b):
    """Dense Euclidean distance matrix between the rows of ``a`` and ``b``."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def euclidean_cost(source_features, target_features) -> CostMatrix:
    """Euclidean ground cost ``||f(x_i^s) - f(x_j^t)||`` for every pair.

    Raises
    ------
    ValueError
        On a dimension mismatch or non-finite input.
    """
    xs = _as_points(source_features, "source_features")
    xt = _as_points(target_features, "target_features")
    if xs.shape[1] != xt.shape[1]:
        raise ValueError(
            f"feature dimension mismatch: source has d={xs.shape[1]}, target has d={xt.shape[1]}"
        )
    return CostMatrix(pairwise_euclidean(xs, xt), mode=UDA)


def label_distances(source_labels, target_labels) -> CostMatrix:
    """Absolute label differences ``|y_i^s - y_j^t|``."""
    ys = _as_points(source_labels, "source_labels")
    yt = _as_points(target_labels, "target_labels")
    if ys.shape[1] != 1 or yt.shape[1] != 1:
        raise ValueError("labels must be scalar per sample")
    return CostMatrix(np.abs(ys - yt.T), mode=UDA)


def normalize_distances(raw: CostMatrix) -> CostMatrix:
    """Divide by the matrix maximum so that entries lie in [0, 1].

    An all-zero matrix is returned unchanged with ``degenerate=True``.
    """
    entries = raw.entries
    if np.any(entries < 0) or not np.all(np.isfinite(entries)):
        raise ValueError("distances must be finite and non-negative")
    top = entries.max() if entries.size else 0.0
    if top <= 0:
        return CostMatrix(entries.copy(), mode=raw.mode, degenerate=True)
    return CostMatrix(entries / top, mode=raw.mode)


def _xlogx_ratio(x, y):
    # x * log(x / y) with the convention 0 * log(0 / y) = 0
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(x[pos] / y[pos])
    return out


def js_penalty(dh, dy, zeta):
    """Symmetric bracket ``|dh log(dh/(dy+zeta))| + |dy log(dy/(dh+zeta))|``."""
    dh = np.asarray(dh, dtype=float)
    dy = np.asarray(dy, dtype=float)
    return np.abs(_xlogx_ratio(dh, dy + zeta)) + np.abs(_xlogx_ratio(dy, dh + zeta))


def js_cost_values(dh, dy, params: JsCostParams):
    """Array form of :func:`js_cost` on already normalized distances."""
    dh = np.asarray(dh, dtype=float)
    dy = np.asarray(dy, dtype=float)
    return dh + params.epsilon * dy + params.kappa * js_penalty(dh, dy, params.zeta)


def js_cost_grad_dh(dh, dy, params: JsCostParams):
    """Partial derivative of the JS cost with respect to the normalized feature distance.

    The ``dh log dh`` term contributes nothing where ``dh == 0``, matching the
    zero-log convention used for the value.
    """
    dh = np.asarray(dh, dtype=float)
    dy = np.asarray(dy, dtype=float)
    zeta = params.zeta
    a = _xlogx_ratio(dh, dy + zeta)
    b = _xlogx_ratio(dy, dh + zeta)
    da = np.zeros_like(dh)
    pos = dh > 0
    da[pos] = np.log(dh[pos] / (dy[pos] + zeta)) + 1.0
    db = -dy / (dh + zeta)
    return 1.0 + params.kappa * (np.sign(a) * da + np.sign(b) * db)


def js_cost(d_h_norm: CostMatrix, d_y_norm: CostMatrix, params: JsCostParams) -> CostMatrix:
    """Feature/label ground cost for semi-supervised adaptation.

    ``d_h_norm`` and ``d_y_norm`` must both be normalized to [0, 1], see
    :func:`normalize_distances`.
    """
    dh, dy = d_h_norm.entries, d_y_norm.entries
    if dh.shape != dy.shape:
        raise ValueError(f"shape mismatch: {dh.shape} vs {dy.shape}")
    for name, m in (("d_h_norm", dh), ("d_y_norm", dy)):
        if np.any(m < 0) or np.any(m > 1 + 1e-12):
            raise ValueError(f"{name} must be normalized to [0, 1]")
    return CostMatrix(js_cost_values(dh, dy, params), mode=SEMI_DA)


def semi_da_cost(source_features, target_features, source_labels, target_labels,
                 params: JsCostParams) -> CostMatrix:
    """Convenience pipeline: Euclidean + label distances, normalized, then JS-combined."""
    dh = normalize_distances(euclidean_cost(source_features, target_features))
    dy = normalize_distances(label_distances(source_labels, target_labels))
    return js_cost(dh, dy, params)
