"""Dynamic hierarchical triplet loss over a clustered mini-batch."""

from __future__ import annotations

import numpy as np

MAX_TRIPLETS = 20_000


def enumerate_triplets(assignments) -> np.ndarray:
    """All (anchor, positive, negative) index triples for a cluster labelling.

    Anchor and positive are distinct members of one cluster, the negative is
    any sample outside it. Rows are sorted lexicographically.

    Returns
    -------
    ndarray of shape (n_triplets, 3), dtype int
    """
    a = np.asarray(assignments, dtype=int).ravel()
    idx = np.arange(a.shape[0])
    blocks = []
    for c in np.unique(a):
        members = idx[a == c]
        others = idx[a != c]
        if members.size < 2 or others.size == 0:
            continue
        anc, pos = np.meshgrid(members, members, indexing="ij")
        keep = anc != pos
        pairs = np.stack([anc[keep], pos[keep]], axis=1)
        rep = np.repeat(pairs, others.size, axis=0)
        neg = np.tile(others, pairs.shape[0])
        blocks.append(np.column_stack([rep, neg]))
    if not blocks:
        return np.empty((0, 3), dtype=int)
    out = np.concatenate(blocks)
    order = np.lexsort((out[:, 2], out[:, 1], out[:, 0]))
    return out[order]


def hierarchical_margin(hierarchy, anchor_cluster, negative_cluster, mu0) -> float:
    """``mu0`` plus the merge height of the anchor and negative clusters."""
    if mu0 < 0:
        raise ValueError(f"mu0 must be >= 0, got {mu0}")
    return mu0 + hierarchy.merge_threshold(anchor_cluster, negative_cluster)


def select_triplets(assignments, hierarchy, mu0, max_triplets=MAX_TRIPLETS, seed=0):
    """Triplets for one batch together with their margins.

    Beyond ``max_triplets`` a seeded uniform subsample without replacement is
    kept, restored to sorted order.
    """
    a = np.asarray(assignments, dtype=int).ravel()
    triplets = enumerate_triplets(a)
    if triplets.shape[0] > max_triplets:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(triplets.shape[0], size=max_triplets, replace=False))
        triplets = triplets[keep]
    if triplets.shape[0] == 0:
        return triplets, np.empty(0)
    clusters = np.unique(a)
    table = np.zeros((clusters.max() + 1,) * 2)
    for p in clusters:
        for q in clusters:
            if p != q:
                table[p, q] = hierarchical_margin(hierarchy, p, q, mu0)
    margins = table[a[triplets[:, 0]], a[triplets[:, 2]]]
    return triplets, margins


def ramp_loss(pair_dist, triplets, margins, with_grad=False):
    """Mean of ``[d(anc, pos) - d(anc, neg) + margin]_+`` over the given triplets.

    With ``with_grad`` the derivative with respect to every entry of
    ``pair_dist`` is returned as well; an empty triplet set gives loss 0.
    """
    dist = np.asarray(pair_dist, dtype=float)
    if triplets.shape[0] == 0:
        return (0.0, np.zeros_like(dist)) if with_grad else 0.0
    anc, pos, neg = triplets.T
    viol = dist[anc, pos] - dist[anc, neg] + margins
    loss = float(np.maximum(viol, 0.0).mean())
    if not with_grad:
        return loss
    active = (viol > 0).astype(float) / triplets.shape[0]
    grad = np.zeros_like(dist)
    np.add.at(grad, (anc, pos), active)
    np.add.at(grad, (anc, neg), -active)
    return loss, grad


def triplet_loss(pair_dist, assignments, hierarchy, mu0, max_triplets=MAX_TRIPLETS, seed=0) -> float:
    """Hierarchical-margin triplet loss of one pooled batch.

    ``pair_dist`` is the (n, n) ground distance between pooled samples
    (feature-only or feature/label, matching the clustering).
    """
    triplets, margins = select_triplets(assignments, hierarchy, mu0, max_triplets, seed)
    return ramp_loss(pair_dist, triplets, margins)
