"""Regressor, losses with hand-coded gradients, and the mini-batch training loop.

The regressor is ``g = h o f``: a tanh MLP feature extractor ``f`` followed by
a linear head ``h``. One training step on a batch

1. embeds the source and target batches,
2. assigns the pooled embeddings to the previous centroids, refreshes the
   centroids and rebuilds the merge tree over the cluster distances,
3. computes the regression loss and the hierarchical triplet loss,
4. solves the regularized OT plan on the ground cost,
5. takes an SGD step on ``L_reg + alpha * L_OT + beta * L_m``.

The plan, the cost normalizers, the clustering and the triplet margins are
held fixed while differentiating, so gradients flow only through the
embeddings entering the distance matrices.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from mrot.clustering import assign, kmeans_init, structure_from_assignments, update_centroids, write_cluster_dump
from mrot.config import TrainConfig
from mrot.ground_cost import SEMI_DA, js_cost_grad_dh, js_cost_values, pairwise_euclidean
from mrot.metric_loss import ramp_loss, select_triplets
from mrot.transport import solve_mrot_plan

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mrot-checkpoint"
CHECKPOINT_VERSION = 1
DIVERGENCE_LIMIT = 1e12


class TrainingDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class ModelParams:
    weights: list
    biases: list
    head_w: np.ndarray
    head_b: np.ndarray

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    @property
    def feature_dim(self):
        return self.head_w.shape[0]

    def blocks(self):
        """``(name, array)`` pairs in flattening order."""
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"extractor.{i}.weight", w), (f"extractor.{i}.bias", b)]
        out += [("head.weight", self.head_w), ("head.bias", self.head_b)]
        return out

    def shapes(self):
        return [list(a.shape) for _, a in self.blocks()]

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.blocks()])

    @classmethod
    def unflatten(cls, flat, shapes):
        arrays, pos = [], 0
        for shape in shapes:
            size = int(np.prod(shape))
            arrays.append(np.asarray(flat[pos:pos + size], dtype=float).reshape(shape))
            pos += size
        if pos != len(flat):
            raise ValueError(f"flat vector has {len(flat)} values, shapes need {pos}")
        n_layers = (len(arrays) - 2) // 2
        return cls(arrays[0:2 * n_layers:2], arrays[1:2 * n_layers:2], arrays[-2], arrays[-1])

    def copy(self):
        return ModelParams.unflatten(self.flatten(), self.shapes())

    def zeros_like(self):
        return ModelParams.unflatten(np.zeros_like(self.flatten()), self.shapes())


def init_params(input_dim, hidden, feature_dim, seed=0) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, feature_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    limit = np.sqrt(6.0 / (feature_dim + 1))
    return ModelParams(weights, biases, rng.uniform(-limit, limit, size=feature_dim), np.zeros(1))


def _forward_cache(params: ModelParams, x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"expected inputs of shape (n, {params.input_dim}), got {x.shape}")
    acts = [x]
    h = x
    for w, b in zip(params.weights, params.biases):
        h = np.tanh(h @ w + b)
        acts.append(h)
    preds = h @ params.head_w + params.head_b[0]
    return h, preds, acts


def forward(params: ModelParams, x):
    """Features ``f(x)`` and predictions ``h(f(x))``."""
    feats, preds, _ = _forward_cache(params, x)
    return feats, preds


def predict(params: ModelParams, x) -> np.ndarray:
    return forward(params, x)[1]


def _backprop(params, acts, g_feat, g_pred, grad: ModelParams):
    """Accumulate into ``grad`` given upstream gradients on features and predictions."""
    feats = acts[-1]
    grad.head_w += feats.T @ g_pred
    grad.head_b += g_pred.sum()
    g = g_feat + np.outer(g_pred, params.head_w)
    for layer in range(len(params.weights) - 1, -1, -1):
        h = acts[layer + 1]
        delta = g * (1.0 - h * h)
        grad.weights[layer] += acts[layer].T @ delta
        grad.biases[layer] += delta.sum(axis=0)
        g = delta @ params.weights[layer].T


def _euclid_backward(a, b, dist, upstream):
    coef = np.zeros_like(dist)
    pos = dist > 0
    coef[pos] = upstream[pos] / dist[pos]
    ga = coef.sum(axis=1)[:, None] * a - coef @ b
    gb = coef.sum(axis=0)[:, None] * b - coef.T @ a
    return ga, gb


def regression_loss(predictions, labels, mode="uda", has_target_labels=False,
                    target_predictions=None, target_labels=None) -> float:
    """Mean squared error over the labeled samples of the batch.

    In semi-supervised mode with target labels the target pairs are pooled
    with the source pairs; in unsupervised mode they are ignored.
    """
    p = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if p.shape != y.shape:
        raise ValueError("predictions and labels must align")
    if mode == SEMI_DA and has_target_labels and target_labels is not None:
        p = np.concatenate([p, np.asarray(target_predictions, dtype=float).ravel()])
        y = np.concatenate([y, np.asarray(target_labels, dtype=float).ravel()])
    return float(np.mean((p - y) ** 2))


def total_loss(l_reg, l_ot, l_m, alpha, beta) -> float:
    return l_reg + alpha * l_ot + beta * l_m


@dataclass
class Batch:
    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray
    yt: np.ndarray | None = None

    @property
    def size(self):
        return self.xs.shape[0]


@dataclass
class LossContext:
    """Quantities held constant while differentiating one batch loss."""

    plan: np.ndarray | None = None
    ot_scale: tuple = (1.0, 1.0)
    triplets: np.ndarray = field(default_factory=lambda: np.empty((0, 3), dtype=int))
    margins: np.ndarray = field(default_factory=lambda: np.empty(0))
    pool_scale: tuple = (1.0, 1.0)


@dataclass
class LossParts:
    l_reg: float
    l_ot: float
    l_m: float
    total: float


def _scale(m):
    top = float(m.max()) if m.size else 0.0
    return top if top > 0 else 1.0


def _label_dist(a, b):
    return np.abs(np.asarray(a, dtype=float)[:, None] - np.asarray(b, dtype=float)[None, :])


def ground_cost_matrix(fs, ft, ys, yt, config: TrainConfig, scale=None):
    """OT cost between embedded source/target batches, and the normalizers used."""
    dh = pairwise_euclidean(fs, ft)
    if config.mode != SEMI_DA:
        return dh, (1.0, 1.0)
    dy = _label_dist(ys, yt)
    scale = scale or (_scale(dh), _scale(dy))
    return js_cost_values(dh / scale[0], dy / scale[1], config.js_params), scale


def pooled_distance_matrix(z, y, config: TrainConfig, scale=None):
    """Ground distance among all pooled samples, used for clustering and triplets."""
    dh = pairwise_euclidean(z, z)
    if config.mode != SEMI_DA:
        return dh, (1.0, 1.0)
    dy = _label_dist(y, y)
    scale = scale or (_scale(dh), _scale(dy))
    return js_cost_values(dh / scale[0], dy / scale[1], config.js_params), scale


def _semi(config, batch):
    return config.mode == SEMI_DA and batch.yt is not None


def batch_loss(params: ModelParams, batch: Batch, ctx: LossContext, config: TrainConfig,
               with_grad=True):
    """Total loss of one batch under a frozen context, optionally with its gradient.

    Terms whose weight is zero, or whose frozen quantity is missing, are skipped
    and reported as 0.
    """
    fs, ps, acts_s = _forward_cache(params, batch.xs)
    ft, pt, acts_t = _forward_cache(params, batch.xt)
    semi = _semi(config, batch)
    n_reg = batch.size * (2 if semi else 1)

    l_reg = float(np.sum((ps - batch.ys) ** 2)) / n_reg
    g_ps = 2.0 * (ps - batch.ys) / n_reg
    g_pt = np.zeros_like(pt)
    if semi:
        l_reg += float(np.sum((pt - batch.yt) ** 2)) / n_reg
        g_pt = 2.0 * (pt - batch.yt) / n_reg
    g_fs = np.zeros_like(fs)
    g_ft = np.zeros_like(ft)
    target_flows = semi

    l_ot = 0.0
    if config.alpha > 0 and ctx.plan is not None:
        cost, _ = ground_cost_matrix(fs, ft, batch.ys, batch.yt, config, ctx.ot_scale)
        l_ot = float(np.sum(ctx.plan * cost))
        if with_grad:
            up = config.alpha * ctx.plan
            dh = pairwise_euclidean(fs, ft)
            if semi:
                dy = _label_dist(batch.ys, batch.yt)
                up = up * js_cost_grad_dh(dh / ctx.ot_scale[0], dy / ctx.ot_scale[1],
                                          config.js_params) / ctx.ot_scale[0]
            ga, gb = _euclid_backward(fs, ft, dh, up)
            g_fs += ga
            g_ft += gb
            target_flows = True

    l_m = 0.0
    if config.beta > 0 and ctx.triplets.shape[0] > 0:
        z = np.vstack([fs, ft])
        y = np.concatenate([batch.ys, batch.yt]) if semi else None
        pool, _ = pooled_distance_matrix(z, y, config, ctx.pool_scale)
        l_m, g_pool = ramp_loss(pool, ctx.triplets, ctx.margins, with_grad=True)
        if with_grad:
            up = config.beta * g_pool
            dh = pairwise_euclidean(z, z)
            if semi:
                dy = _label_dist(y, y)
                up = up * js_cost_grad_dh(dh / ctx.pool_scale[0], dy / ctx.pool_scale[1],
                                          config.js_params) / ctx.pool_scale[0]
            ga, gb = _euclid_backward(z, z, dh, up)
            gz = ga + gb
            b = batch.size
            g_fs += gz[:b]
            g_ft += gz[b:]
            target_flows = True

    parts = LossParts(l_reg, l_ot, l_m, total_loss(l_reg, l_ot, l_m, config.alpha, config.beta))
    if not with_grad:
        return parts
    grad = params.zeros_like()
    _backprop(params, acts_s, g_fs, g_ps, grad)
    if target_flows:
        _backprop(params, acts_t, g_ft, g_pt, grad)
    for name, arr in grad.blocks():
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name}")
    return parts, grad


def backward(params, batch, fixed_plan, cluster_context, config):
    """Gradient of the total loss with the plan and cluster structure held fixed.

    ``cluster_context`` is a :class:`LossContext`; its ``plan`` is replaced by
    ``fixed_plan``.
    """
    ctx = LossContext(
        plan=None if fixed_plan is None else getattr(fixed_plan, "plan", fixed_plan),
        ot_scale=cluster_context.ot_scale,
        triplets=cluster_context.triplets,
        margins=cluster_context.margins,
        pool_scale=cluster_context.pool_scale,
    )
    return batch_loss(params, batch, ctx, config, with_grad=True)[1]


def prepare_context(params, batch, config, cluster_state=None, triplet_seed=0):
    """Run the non-differentiable parts of a step: clustering update and OT solve.

    Returns
    -------
    ctx : LossContext
    cluster_state : ClusterState or None
        Updated state (assignments, centroids, hierarchy of this batch).
    """
    fs, _ = forward(params, batch.xs)
    ft, _ = forward(params, batch.xt)
    semi = _semi(config, batch)
    ctx = LossContext()

    if config.beta > 0 and cluster_state is not None:
        z = np.vstack([fs, ft])
        y = np.concatenate([batch.ys, batch.yt]) if semi else None
        points = np.column_stack([z, y]) if semi else z
        labels = assign(points, cluster_state.centroids)
        centroids = update_centroids(points, labels, cluster_state.k, cluster_state.centroids)
        pool, ctx.pool_scale = pooled_distance_matrix(z, y, config)
        hierarchy, counts = structure_from_assignments(pool, labels, cluster_state.k)
        cluster_state = type(cluster_state)(centroids, labels, hierarchy, counts)
        ctx.triplets, ctx.margins = select_triplets(labels, hierarchy, config.mu0,
                                                    config.max_triplets, triplet_seed)

    if config.alpha > 0:
        cost, ctx.ot_scale = ground_cost_matrix(fs, ft, batch.ys, batch.yt, config)
        coupling, _ = solve_mrot_plan(cost, batch.ys, config.ot_params)
        ctx.plan = coupling.plan
    return ctx, cluster_state


def initial_cluster_state(params, batch, config, seed):
    fs, _ = forward(params, batch.xs)
    ft, _ = forward(params, batch.xt)
    z = np.vstack([fs, ft])
    semi = _semi(config, batch)
    y = np.concatenate([batch.ys, batch.yt]) if semi else None
    points = np.column_stack([z, y]) if semi else z
    pool, _ = pooled_distance_matrix(z, y, config)
    k = min(config.n_clusters, points.shape[0])
    return kmeans_init(points, k, seed=seed, max_iter=config.kmeans_max_iter, pair_dist=pool)


@dataclass
class TrainResult:
    params: ModelParams
    trace: list  # rows of (batch, l_reg, l_ot, l_m, total)

    def totals(self):
        return np.array([row[4] for row in self.trace])


def _streams(seed):
    init, order, target, triplet, kmeans = np.random.SeedSequence(seed).spawn(5)
    return (int(init.generate_state(1)[0]), np.random.default_rng(order),
            np.random.default_rng(target), np.random.default_rng(triplet),
            int(kmeans.generate_state(1)[0]))


def _check_data(source, target, config):
    xs = np.asarray(source.features, dtype=float)
    xt = np.asarray(target.features, dtype=float)
    if xs.shape[0] < 2 * config.batch_size:
        raise ValueError(f"need at least 2 * batch_size = {2 * config.batch_size} source samples, got {xs.shape[0]}")
    if xt.shape[0] == 0:
        raise ValueError("target data is empty")
    if xs.shape[1] != xt.shape[1]:
        raise ValueError("source and target feature dimensions differ")
    if config.mode == SEMI_DA and target.labels is None:
        raise ValueError("semi-supervised mode needs labeled target data")
    return xs, np.asarray(source.labels, dtype=float), xt


def train(source, target, config: TrainConfig, cluster_dump=None) -> TrainResult:
    """Mini-batch training loop.

    ``source`` and ``target`` expose ``features`` and ``labels``. Each epoch
    walks a fresh permutation of the source in batches of ``batch_size``;
    the matching target batch is drawn uniformly from ``target`` (without
    replacement when it is large enough). The very first batch of the run
    only seeds the clusters and takes no gradient step; the cluster state then
    carries over from batch to batch and across epochs.
    """
    xs_all, ys_all, xt_all = _check_data(source, target, config)
    yt_all = None if config.mode != SEMI_DA else np.asarray(target.labels, dtype=float)
    init_seed, order_rng, target_rng, triplet_rng, kmeans_seed = _streams(config.seed)
    params = init_params(xs_all.shape[1], config.hidden, config.feature_dim, init_seed)
    b = config.batch_size
    n_batches = xs_all.shape[0] // b
    state = None
    trace = []
    step = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(xs_all.shape[0])
        for t in range(n_batches):
            idx = order[t * b:(t + 1) * b]
            tidx = target_rng.choice(xt_all.shape[0], size=b, replace=xt_all.shape[0] < b)
            batch = Batch(xs_all[idx], ys_all[idx], xt_all[tidx],
                          None if yt_all is None else yt_all[tidx])
            first = epoch == 0 and t == 0
            if config.beta > 0 and (first or (config.reinit_clusters_each_epoch and t == 0)):
                state = initial_cluster_state(params, batch, config, kmeans_seed + epoch)
                if cluster_dump is not None:
                    write_cluster_dump(cluster_dump, step, state.assignments,
                                       np.arange(2 * b) < b, append=step > 0)
            if first or (config.beta > 0 and config.reinit_clusters_each_epoch and t == 0):
                step += 1
                continue
            ctx, state = prepare_context(params, batch, config, state,
                                         int(triplet_rng.integers(2**31)))
            if cluster_dump is not None and state is not None:
                write_cluster_dump(cluster_dump, step, state.assignments, np.arange(2 * b) < b)
            parts, grad = batch_loss(params, batch, ctx, config)
            trace.append((step, parts.l_reg, parts.l_ot, parts.l_m, parts.total))
            if not np.isfinite(parts.total) or parts.total > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"loss {parts.total:.3g} at batch {step}", trace)
            _sgd_step(params, grad, config.learning_rate)
            step += 1
    return TrainResult(params, trace)


def _sgd_step(params, grad, lr):
    for (_, p), (_, g) in zip(params.blocks(), grad.blocks()):
        p -= lr * g


def sgd_regression(source, config: TrainConfig) -> TrainResult:
    """Plain MSE-SGD on the source data with the batch schedule of :func:`train`.

    Reference for the no-adaptation case: with ``alpha = beta = 0`` and
    unsupervised mode, :func:`train` must follow this trajectory exactly.
    """
    xs_all = np.asarray(source.features, dtype=float)
    ys_all = np.asarray(source.labels, dtype=float)
    init_seed, order_rng, _, _, _ = _streams(config.seed)
    params = init_params(xs_all.shape[1], config.hidden, config.feature_dim, init_seed)
    b = config.batch_size
    trace = []
    step = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(xs_all.shape[0])
        for t in range(xs_all.shape[0] // b):
            if epoch == 0 and t == 0:
                step += 1
                continue
            idx = order[t * b:(t + 1) * b]
            feats, preds, acts = _forward_cache(params, xs_all[idx])
            resid = preds - ys_all[idx]
            loss = float(np.sum(resid ** 2)) / b
            grad = params.zeros_like()
            _backprop(params, acts, np.zeros_like(feats), 2.0 * resid / b, grad)
            trace.append((step, loss, 0.0, 0.0, loss))
            _sgd_step(params, grad, config.learning_rate)
            step += 1
    return TrainResult(params, trace)


def write_trace_csv(path, trace, comment=None):
    with open(path, "w", newline="") as fh:
        if comment is not None:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["batch", "l_reg", "l_ot", "l_m", "total"])
        for row in trace:
            writer.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def save_checkpoint(params: ModelParams, path, config: TrainConfig | None = None, metadata=None):
    """JSON checkpoint: flat float64 values plus the block shapes.

    ``metadata`` is any JSON-serializable mapping stored alongside.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "shapes": params.shapes(),
        "values": [float(v) for v in params.flatten()],
    }
    if config is not None:
        payload["config"] = config.to_dict()
    if metadata is not None:
        payload["metadata"] = dict(metadata)
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path, with_metadata=False):
    """Returns ``(params, config_dict_or_None)``, plus the metadata dict if asked."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an mrot checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    params = ModelParams.unflatten(np.array(payload["values"], dtype=float), payload["shapes"])
    if with_metadata:
        return params, payload.get("config"), payload.get("metadata", {})
    return params, payload.get("config")
