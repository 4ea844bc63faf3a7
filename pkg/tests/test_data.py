import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mrot.data import (
    Dataset,
    evaluate,
    generate_covariate_shift,
    generate_semantic_shift,
    load_csv,
    split_labeled_target,
    write_csv,
)


def digest(*datasets):
    h = hashlib.sha256()
    for d in datasets:
        h.update(d.features.tobytes())
        h.update(d.labels.tobytes())
    return h.hexdigest()


def test_semantic_split_sizes_and_order():
    source, target, validation = generate_semantic_shift(100, 3, seed=1)
    assert (len(source), len(target), len(validation)) == (80, 10, 10)
    assert source.labels.max() <= validation.labels.min() <= target.labels.min()
    assert (source.domain_tag, target.domain_tag) == ("source", "target")


def test_semantic_split_rejects_tiny_n():
    with pytest.raises(ValueError, match="n must be >= 10"):
        generate_semantic_shift(9, 2)


def test_semantic_noiseless_one_dimensional_split_is_a_feature_threshold():
    source, target, validation = generate_semantic_shift(200, 1, noise_sd=0.0, seed=3)
    # y is monotone in x, so the split is a threshold in x (with either orientation)
    xs, xv, xt = (d.features[:, 0] for d in (source, validation, target))
    increasing = xs.max() <= xv.min() <= xv.max() <= xt.min()
    decreasing = xs.min() >= xv.max() >= xv.min() >= xt.max()
    assert increasing or decreasing


def test_semantic_is_deterministic():
    assert digest(*generate_semantic_shift(50, 4, seed=9)) == digest(*generate_semantic_shift(50, 4, seed=9))
    assert digest(*generate_semantic_shift(50, 4, seed=9)) != digest(*generate_semantic_shift(50, 4, seed=10))


def test_covariate_zero_shift_same_distribution():
    source, target = generate_covariate_shift(4000, 3, shift_magnitude=0.0, seed=2)
    assert not np.array_equal(source.features, target.features)
    np.testing.assert_allclose(source.features.mean(0), target.features.mean(0), atol=0.1)
    np.testing.assert_allclose(source.features.std(0), target.features.std(0), atol=0.1)


def test_covariate_large_shift_moves_target_mean():
    source, target = generate_covariate_shift(500, 4, shift_magnitude=5.0, seed=4)
    u = source.shift_direction
    ps, pt = source.features @ u, target.features @ u
    assert pt.mean() - ps.mean() >= 4 * ps.std()


def test_covariate_shift_is_a_pure_translation():
    s0, t0 = generate_covariate_shift(30, 2, shift_magnitude=0.0, seed=5, noise_sd=0.0)
    s3, t3 = generate_covariate_shift(30, 2, shift_magnitude=3.0, seed=5, noise_sd=0.0)
    np.testing.assert_array_equal(s0.features, s3.features)
    np.testing.assert_array_equal(s0.labels, s3.labels)
    np.testing.assert_allclose(t3.features - t0.features, np.tile(3.0 * s3.shift_direction, (30, 1)), atol=1e-12)


def test_covariate_is_deterministic():
    assert digest(*generate_covariate_shift(20, 3, 1.0, seed=1)) == digest(*generate_covariate_shift(20, 3, 1.0, seed=1))


def test_split_labeled_target():
    _, target = generate_covariate_shift(40, 2, seed=0)
    lab, rest = split_labeled_target(target, 0.25, seed=1)
    assert (len(lab), len(rest)) == (10, 30)
    both = np.vstack([lab.features, rest.features])
    assert sorted(map(tuple, both)) == sorted(map(tuple, target.features))


def test_load_csv_example(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x1,x2,y\n1,2,3\n4,5,6\n")
    ds = load_csv(path, "y")
    np.testing.assert_array_equal(ds.features, [[1, 2], [4, 5]])
    np.testing.assert_array_equal(ds.labels, [3, 6])
    assert ds.labels.dtype == np.float64


def test_load_csv_label_by_index(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("y,x1\n3,1\n6,4\n")
    np.testing.assert_array_equal(load_csv(path, 0).labels, [3, 6])


def test_load_csv_empty(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("")
    with pytest.raises(ValueError, match="empty"):
        load_csv(path)


def test_load_csv_missing_label_names_columns(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match=r"available columns: \['a', 'b'\]"):
        load_csv(path, "y")


def test_load_csv_non_numeric_reports_line(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x,y\n1,2\n3,oops\n")
    with pytest.raises(ValueError, match=":3:"):
        load_csv(path)


def test_load_csv_ragged_row_reports_line(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x,y\n1,2,3\n")
    with pytest.raises(ValueError, match=":2: expected 2 fields"):
        load_csv(path)


def test_csv_roundtrip(tmp_path):
    _, target, _ = generate_semantic_shift(30, 3, seed=2)
    path = tmp_path / "t.csv"
    write_csv(target, path)
    back = load_csv(path)
    np.testing.assert_array_equal(back.features, target.features)
    np.testing.assert_array_equal(back.labels, target.labels)
    assert back.domain_tag == "target"


def test_dataset_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        Dataset(np.array([[np.nan]]), np.array([1.0]))


def test_evaluate_perfect():
    r = evaluate([1, 2, 3], [1, 2, 3])
    assert (r.mae, r.rmse, r.pearson, r.spearman) == (0.0, 0.0, 1.0, 1.0)


def test_evaluate_reversal():
    r = evaluate([3, 2, 1], [1, 2, 3])
    assert r.spearman == pytest.approx(-1.0) and r.pearson == pytest.approx(-1.0)


def test_evaluate_arithmetic():
    r = evaluate([1, 2], [1, 4])
    assert r.mae == 1.0 and r.rmse == pytest.approx(np.sqrt(2))


def test_evaluate_constant_predictions_flagged():
    r = evaluate([2, 2, 2], [1, 2, 3])
    assert r.pearson == 0.0 and r.spearman == 0.0
    assert r.flags == ["pearson_degenerate", "spearman_degenerate"]


def test_evaluate_ties_use_average_ranks():
    # ranks of [1, 1, 2] are [1.5, 1.5, 3]
    r = evaluate([1, 1, 2], [1.5, 1.5, 3])
    assert r.spearman == pytest.approx(1.0)


def test_evaluate_length_mismatch():
    with pytest.raises(ValueError):
        evaluate([1, 2], [1])


pairs = st.integers(2, 30).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(-100, 100)),
    arrays(np.float64, n, elements=st.floats(-100, 100))))


@settings(max_examples=200, deadline=None)
@given(pairs)
def test_rmse_at_least_mae(pair):
    r = evaluate(*pair)
    assert r.rmse >= r.mae - 1e-12 * max(1.0, r.mae)
    assert -1 <= r.pearson <= 1 and -1 <= r.spearman <= 1


@settings(max_examples=50, deadline=None)
@given(pairs, st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_positive_affine_invariance(pair, a, c):
    p, y = pair
    base = evaluate(p, y)
    moved = evaluate(a * p + c, y)
    if not base.flags and not moved.flags:
        assert moved.pearson == pytest.approx(base.pearson, abs=1e-6)


def test_spearman_monotone_invariance():
    rng = np.random.default_rng(0)
    p, y = rng.normal(size=40), rng.normal(size=40)
    base = evaluate(p, y).spearman
    for f in (np.exp, np.tanh, lambda v: v**3 + v, lambda v: 2 * v - 7):
        assert evaluate(f(p), y).spearman == pytest.approx(base, abs=1e-12)
        assert evaluate(p, f(y)).spearman == pytest.approx(base, abs=1e-12)
