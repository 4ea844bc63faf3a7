import numpy as np
import pytest

from mrot.config import TrainConfig
from mrot.data import Dataset
from mrot.model import (
    Batch,
    LossContext,
    ModelParams,
    backward,
    batch_loss,
    forward,
    init_params,
    load_checkpoint,
    prepare_context,
    initial_cluster_state,
    regression_loss,
    save_checkpoint,
    sgd_regression,
    total_loss,
    train,
    write_trace_csv,
)
from mrot.transport import mrot_objective, solve_mrot_plan
from mrot.model import ground_cost_matrix


def make_batch(rng, b=4, d_in=3, semi=False):
    return Batch(rng.normal(size=(b, d_in)), rng.normal(size=b),
                 rng.normal(size=(b, d_in)) + 0.5, rng.normal(size=b) + 1.0 if semi else None)


def loss_of(params, batch, ctx, config, flat):
    p = ModelParams.unflatten(flat, params.shapes())
    return batch_loss(p, batch, ctx, config, with_grad=False).total


def max_rel_error(params, batch, ctx, config, h=1e-6):
    _, grad = batch_loss(params, batch, ctx, config)
    analytic = grad.flatten()
    flat = params.flatten()
    worst = 0.0
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        fd = (loss_of(params, batch, ctx, config, flat + e) - loss_of(params, batch, ctx, config, flat - e)) / (2 * h)
        a = analytic[i]
        if abs(a) < 1e-12 and abs(fd) < 1e-12:
            continue
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd)))
    return worst


def test_forward_zero_params():
    p = init_params(3, [5], 4, seed=0).zeros_like()
    feats, preds = forward(p, np.ones((2, 3)))
    assert not feats.any() and not preds.any()


def test_forward_small_argument_is_linear():
    p = init_params(3, [], 3, seed=0)
    p.weights[0] = np.eye(3)
    x = np.array([[1e-3, -5e-4, 2e-4]])
    feats, _ = forward(p, x)
    np.testing.assert_allclose(feats, x, atol=1e-9, rtol=0)


def test_forward_is_deterministic():
    p1 = init_params(4, [6, 5], 3, seed=42)
    p2 = init_params(4, [6, 5], 3, seed=42)
    x = np.random.default_rng(0).normal(size=(7, 4))
    np.testing.assert_array_equal(forward(p1, x)[1], forward(p2, x)[1])


def test_forward_shape_mismatch():
    with pytest.raises(ValueError, match="expected inputs"):
        forward(init_params(3, [4], 2), np.ones((2, 5)))


def test_regression_loss_values():
    assert regression_loss([1.0], [3.0]) == 4.0
    assert regression_loss([1.0, 2.0], [1.0, 2.0]) == 0.0


def test_regression_loss_uda_ignores_target():
    base = regression_loss([1.0, 2.0], [0.0, 2.0], "uda")
    assert regression_loss([1.0, 2.0], [0.0, 2.0], "uda", True, [9.0], [0.0]) == base
    assert regression_loss([1.0, 2.0], [0.0, 2.0], "semi", True, [3.0], [0.0]) == pytest.approx(10 / 3)


@pytest.mark.parametrize("parts,expected", [((1.0, 2.0, 3.0, 0.0, 0.0), 1.0),
                                            ((1.0, 2.0, 3.0, 0.5, 0.1), 2.3),
                                            ((0.0, 0.0, 0.0, 1.0, 1.0), 0.0)])
def test_total_loss(parts, expected):
    assert total_loss(*parts) == pytest.approx(expected)


def full_context(params, batch, config, seed):
    state = initial_cluster_state(params, batch, config, seed)
    ctx, _ = prepare_context(params, batch, config, state, triplet_seed=seed)
    return ctx


GRAD_CONFIGS = [
    dict(mode="uda", alpha=0.0, beta=0.0, lambda2=0.0),
    dict(mode="uda", alpha=1.0, beta=0.0, lambda2=0.0),
    dict(mode="uda", alpha=1.0, beta=0.5, lambda2=0.1, mu0=0.05),
    dict(mode="uda", alpha=0.3, beta=1.0, lambda2=1.0, mu0=0.2),
    dict(mode="semi", alpha=1.0, beta=0.0, lambda2=0.0, kappa=0.2),
    dict(mode="semi", alpha=1.0, beta=0.5, lambda2=0.1, kappa=0.2, mu0=0.05),
    dict(mode="semi", alpha=0.5, beta=0.5, lambda2=0.5, kappa=1.0, epsilon=2.0),
    dict(mode="semi", alpha=1.0, beta=0.2, lambda2=0.0, kappa=5.0, zeta=1e-2),
]


@pytest.mark.parametrize("overrides", GRAD_CONFIGS)
@pytest.mark.parametrize("seed", [0, 1])
def test_fixed_context_gradient_matches_finite_differences(overrides, seed):
    rng = np.random.default_rng(seed)
    config = TrainConfig(hidden=[5], feature_dim=3, n_clusters=2, batch_size=4, **overrides)
    params = init_params(3, config.hidden, config.feature_dim, seed=seed)
    batch = make_batch(rng, semi=config.mode == "semi")
    ctx = full_context(params, batch, config, seed)
    assert max_rel_error(params, batch, ctx, config) <= 1e-5


def test_backward_equals_batch_loss_gradient():
    rng = np.random.default_rng(3)
    config = TrainConfig(hidden=[4], feature_dim=3, n_clusters=2, batch_size=4)
    params = init_params(3, config.hidden, 3, seed=3)
    batch = make_batch(rng)
    ctx = full_context(params, batch, config, 3)
    g = backward(params, batch, ctx.plan, ctx, config)
    np.testing.assert_array_equal(g.flatten(), batch_loss(params, batch, ctx, config)[1].flatten())


def test_erm_gradient_is_plain_mse_gradient():
    rng = np.random.default_rng(4)
    config = TrainConfig(hidden=[4], feature_dim=3, alpha=0.0, beta=0.0, lambda2=0.0, batch_size=4)
    params = init_params(3, config.hidden, 3, seed=4)
    batch = make_batch(rng)
    _, grad = batch_loss(params, batch, LossContext(), config)
    flat = params.flatten()

    def mse(v):
        p = ModelParams.unflatten(v, params.shapes())
        return np.mean((forward(p, batch.xs)[1] - batch.ys) ** 2)

    h = 1e-6
    fd = np.array([(mse(flat + h * e) - mse(flat - h * e)) / (2 * h) for e in np.eye(flat.size)])
    np.testing.assert_allclose(grad.flatten(), fd, rtol=1e-5, atol=1e-10)


def test_end_to_end_gradient_with_resolved_plan():
    # Re-solving the plan at every perturbation: the envelope argument makes the
    # optimal value of the OT problem differentiable with the plan held fixed.
    rng = np.random.default_rng(5)
    config = TrainConfig(hidden=[2], feature_dim=3, n_clusters=2, batch_size=4, alpha=1.0, beta=0.5,
                         lambda1=0.1, lambda2=0.1, sinkhorn_tol=1e-13, sinkhorn_max_iter=10_000,
                         gcg_tol=1e-15, gcg_max_iter=500)
    params = init_params(3, config.hidden, 3, seed=5)
    batch = make_batch(rng)
    ctx = full_context(params, batch, config, 5)
    _, grad = batch_loss(params, batch, ctx, config)
    flat = params.flatten()

    def resolved(v):
        p = ModelParams.unflatten(v, params.shapes())
        fs, _ = forward(p, batch.xs)
        ft, _ = forward(p, batch.xt)
        cost, _ = ground_cost_matrix(fs, ft, batch.ys, batch.yt, config)
        plan, _ = solve_mrot_plan(cost, batch.ys, config.ot_params)
        ot_value = mrot_objective(plan, cost, batch.ys, config.lambda1, config.lambda2)
        rest = batch_loss(p, batch, LossContext(triplets=ctx.triplets, margins=ctx.margins),
                          config.replace(alpha=0.0), with_grad=False)
        return rest.l_reg + config.alpha * ot_value + config.beta * rest.l_m

    h = 1e-5
    for i, a in enumerate(grad.flatten()):
        e = np.zeros_like(flat)
        e[i] = h
        fd = (resolved(flat + e) - resolved(flat - e)) / (2 * h)
        if max(abs(a), abs(fd)) < 1e-12:
            continue
        assert abs(a - fd) <= 1e-3 * max(abs(a), abs(fd)), (i, a, fd)


def small_data(seed=0, n=64, d_in=3):
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=(n, d_in))
    xt = rng.normal(size=(n // 2, d_in)) + 0.7
    f = lambda x: x.sum(1) + np.sin(x[:, 0])
    return Dataset(xs, f(xs)), Dataset(xt, f(xt), "target")


def test_erm_training_is_bit_identical_to_plain_sgd():
    source, target = small_data()
    config = TrainConfig(alpha=0.0, beta=0.0, lambda2=0.0, epochs=3, batch_size=8, hidden=[6], feature_dim=4)
    a = train(source, target, config)
    b = sgd_regression(source, config)
    assert a.trace == b.trace
    np.testing.assert_array_equal(a.params.flatten(), b.params.flatten())


def test_training_is_deterministic_and_accounts_losses():
    source, target = small_data(1)
    config = TrainConfig(epochs=2, batch_size=8, hidden=[6], feature_dim=4, n_clusters=3)
    a = train(source, target, config)
    b = train(source, target, config)
    assert a.trace == b.trace
    for _, l_reg, l_ot, l_m, tot in a.trace:
        assert tot == l_reg + config.alpha * l_ot + config.beta * l_m
        assert np.isfinite(tot)


def test_semi_training_runs():
    source, target = small_data(2)
    config = TrainConfig(mode="semi", epochs=2, batch_size=8, hidden=[6], feature_dim=4, n_clusters=3)
    result = train(source, target, config)
    assert all(np.isfinite(r[4]) for r in result.trace)


def test_training_rejects_small_source():
    source, target = small_data(n=10)
    with pytest.raises(ValueError, match="2 \\* batch_size"):
        train(source, target, TrainConfig(batch_size=8))


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(3, [4, 5], 2, seed=1)
    path = tmp_path / "model.json"
    save_checkpoint(params, path, TrainConfig())
    loaded, cfg = load_checkpoint(path)
    np.testing.assert_array_equal(loaded.flatten(), params.flatten())
    assert loaded.shapes() == params.shapes()
    assert cfg["model"]["hidden"] == [16]


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError, match="not an mrot checkpoint"):
        load_checkpoint(path)


def test_trace_csv(tmp_path):
    path = tmp_path / "trace.csv"
    write_trace_csv(path, [(1, 0.5, 0.25, 0.125, 0.875)])
    assert path.read_text().splitlines() == ["batch,l_reg,l_ot,l_m,total", "1,0.5,0.25,0.125,0.875"]


def test_scale_sanity_of_plan_structure():
    from mrot.ground_cost import euclidean_cost
    from mrot.transport import sinkhorn
    rng = np.random.default_rng(6)
    fs, ft = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    c = 3.5
    d1 = euclidean_cost(fs, ft).entries
    d2 = euclidean_cost(c * fs, c * ft).entries
    np.testing.assert_allclose(d2, c * d1, rtol=1e-12)
    p1 = sinkhorn(d1, 0.1).plan
    p2 = sinkhorn(d2, 0.1 * c).plan
    np.testing.assert_array_equal(p1.argmax(1), p2.argmax(1))


def test_plan_does_not_depend_on_clustering_step():
    rng = np.random.default_rng(7)
    config = TrainConfig(hidden=[4], feature_dim=3, n_clusters=2, batch_size=4, lambda2=0.1)
    params = init_params(3, config.hidden, 3, seed=7)
    batch = make_batch(rng)
    with_clusters = full_context(params, batch, config, 7)
    fs, _ = forward(params, batch.xs)
    ft, _ = forward(params, batch.xt)
    cost, _ = ground_cost_matrix(fs, ft, batch.ys, batch.yt, config)
    alone, _ = solve_mrot_plan(cost, batch.ys, config.ot_params)
    np.testing.assert_array_equal(with_clusters.plan, alone.plan)
