import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miwae.data import (DataError, MaskedMatrix, Standardizer, corrupt_mcar, impute_knn,
                        impute_mean, imputation_mse, load_csv, load_mask_csv, select_knn_k,
                        standardize, write_csv, write_mask_csv)


def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def complete(values):
    values = np.asarray(values, float)
    return MaskedMatrix(values, np.zeros(values.shape, np.uint8))


def test_load_small_file(tmp_path):
    data = load_csv(write(tmp_path, "a,b\n1,\n,4\n"))
    assert data.columns == ["a", "b"]
    np.testing.assert_array_equal(data.mask, [[0, 1], [1, 0]])
    assert data.values[0, 0] == 1.0 and data.values[1, 1] == 4.0


def test_load_complete_file(tmp_path):
    data = load_csv(write(tmp_path, "x,y,z\n1,2,3\n4,5,6\n"))
    assert not data.mask.any()


@pytest.mark.parametrize("token", ["NA", "NaN", "?", ""])
def test_missing_tokens(tmp_path, token):
    data = load_csv(write(tmp_path, f"a,b\n{token},2\n3,4\n"))
    assert data.mask[0, 0] == 1


def test_drop_columns(tmp_path):
    data = load_csv(write(tmp_path, "a,label,b\n1,0,2\n3,1,4\n"), drop_columns=["label"])
    assert data.columns == ["a", "b"]
    np.testing.assert_array_equal(data.values, [[1, 2], [3, 4]])


@pytest.mark.parametrize("text", [
    "a,b\n1,2\n3\n",          # ragged
    "a,b\n1,x\n3,4\n",        # non-numeric
    "a,b\n1,\n3,NA\n",        # column b never observed
    "",
])
def test_load_errors(tmp_path, text):
    with pytest.raises(DataError):
        load_csv(write(tmp_path, text))


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(5, 3))
    mask = rng.random((5, 3)) < 0.3
    mask[:, 0] = False
    write_csv(tmp_path / "o.csv", vals, ["a", "b", "c"], mask=mask)
    write_mask_csv(tmp_path / "o.mask.csv", mask, ["a", "b", "c"])
    back = load_csv(tmp_path / "o.csv")
    np.testing.assert_array_equal(back.mask, mask)
    np.testing.assert_array_equal(back.values[~mask], vals[~mask])
    np.testing.assert_array_equal(load_mask_csv(tmp_path / "o.mask.csv"), mask)


def test_bad_mask_file(tmp_path):
    with pytest.raises(DataError):
        load_mask_csv(write(tmp_path, "a,b\n0,2\n"))


def test_sentinels_are_nan_and_filled_hides_them():
    m = MaskedMatrix([[1.0, 99.0]], [[0, 1]])
    assert np.isnan(m.values[0, 1])
    np.testing.assert_array_equal(m.filled(), [[1.0, 0.0]])


def test_mcar_rate_zero_is_noop():
    data = complete(np.arange(12.0).reshape(4, 3))
    out, truth = corrupt_mcar(data, 0.0, 0)
    assert not out.mask.any()
    np.testing.assert_array_equal(truth, data.values)


def test_mcar_rate_concentration():
    data = complete(np.zeros((1000, 1000)))
    out, _ = corrupt_mcar(data, 0.5, 1)
    assert abs(out.missing_rate() - 0.5) <= 0.002


def test_mcar_deterministic_and_truth_exact():
    data = complete(np.random.default_rng(0).normal(size=(50, 4)))
    a, truth = corrupt_mcar(data, 0.5, 7)
    b, _ = corrupt_mcar(data, 0.5, 7)
    assert a.mask.tobytes() == b.mask.tobytes()
    assert truth.tobytes() == data.values.tobytes()
    assert not a.mask.all(axis=1).any()


def test_mcar_errors():
    data = complete(np.ones((3, 2)))
    with pytest.raises(DataError):
        corrupt_mcar(data, 1.0, 0)
    with pytest.raises(DataError):
        corrupt_mcar(MaskedMatrix(np.ones((2, 2)), [[0, 1], [0, 0]]), 0.5, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.floats(0.0, 0.95), st.integers(0, 2**32 - 1))
def test_mcar_keeps_an_observed_entry_per_row(p, rate, seed):
    data = complete(np.zeros((20, p)))
    out, _ = corrupt_mcar(data, rate, seed)
    assert np.all((1 - out.mask).sum(axis=1) >= 1)


def test_standardize_two_points():
    out, s = standardize(complete([[0.0], [2.0]]))
    np.testing.assert_array_equal(out.values[:, 0], [-1.0, 1.0])
    np.testing.assert_allclose(s.inverse_transform(out.values), [[0.0], [2.0]], atol=1e-12)


def test_standardize_uses_observed_entries_and_round_trips():
    rng = np.random.default_rng(0)
    vals = rng.normal(3, 5, size=(200, 4))
    mask = rng.random(vals.shape) < 0.4
    data = MaskedMatrix(vals, mask)
    out, s = standardize(data)
    for j in range(4):
        col = out.observed_column(j)
        assert col.mean() == pytest.approx(0.0, abs=1e-12)
        assert col.std() == pytest.approx(1.0, rel=1e-12)
    back = s.inverse_transform(out.values)
    np.testing.assert_allclose(back[~mask], vals[~mask], atol=1e-12)
    again, _ = standardize(out)
    np.testing.assert_allclose(again.values[~mask], out.values[~mask], atol=1e-12)
    s2 = Standardizer.from_dict(s.to_dict())
    assert s2.transform(vals).tobytes() == s.transform(vals).tobytes()


def test_standardize_rejects_constant_column():
    with pytest.raises(DataError):
        standardize(complete([[1.0, 2.0], [1.0, 3.0]]))


def test_mean_imputation_arithmetic():
    data = MaskedMatrix([[1.0, 0.0], [3.0, 1.0], [0.0, 2.0]], [[0, 0], [0, 0], [1, 0]])
    out = impute_mean(data)
    assert out[2, 0] == 2.0
    assert out[~data.missing].tobytes() == data.values[~data.missing].tobytes()


def test_mean_imputation_on_standardized_mcar():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(2000, 2))
    vals = z @ rng.normal(size=(2, 5)) + rng.normal(size=(2000, 5))
    corrupted, truth = corrupt_mcar(complete(vals), 0.5, 0)
    std, s = standardize(corrupted)
    imputed = impute_mean(std)
    assert np.abs(imputed[std.missing]).max() < 0.1
    assert imputation_mse(imputed, s.transform(truth), std.mask) == pytest.approx(1.0, abs=0.1)


def test_knn_duplicate_row():
    vals = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 7.5], [5.0, -1.0, 0.0], [9.0, 9.0, 9.0]])
    data = MaskedMatrix(vals, [[0, 0, 1], [0, 0, 0], [0, 0, 0], [0, 0, 0]])
    out = impute_knn(data, k_range=[1])
    assert out[0, 2] == 7.5


def test_knn_two_clusters():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.3, size=(60, 3))
    b = rng.normal(10, 0.3, size=(60, 3))
    vals = np.vstack([a, b])
    data, truth = corrupt_mcar(complete(vals), 0.3, 1)
    out = impute_knn(data, rng=0)
    top = data.missing[:60]
    bottom = data.missing[60:]
    assert out[:60][top].max() < 2 and out[60:][bottom].min() > 8


def test_knn_single_k_skips_selection():
    data = MaskedMatrix(np.random.default_rng(0).normal(size=(10, 3)),
                        np.eye(10, 3, dtype=np.uint8))
    assert select_knn_k(data, k_range=[1]) == (1, {})
    a = impute_knn(data, k_range=[1])
    b = impute_knn(data, k_range=[1])
    assert a.tobytes() == b.tobytes()


def test_knn_selection_scores_each_k():
    rng = np.random.default_rng(1)
    data, _ = corrupt_mcar(complete(rng.normal(size=(80, 4))), 0.3, 0)
    k, scores = select_knn_k(data, rng=0)
    assert set(scores) == set(range(5, 16)) and k in scores


def test_knn_keeps_observed_entries():
    rng = np.random.default_rng(2)
    data, _ = corrupt_mcar(complete(rng.normal(size=(40, 4))), 0.4, 0)
    out = impute_knn(data, rng=0)
    assert out[~data.missing].tobytes() == data.values[~data.missing].tobytes()
    assert np.all(np.isfinite(out))


def test_mse_properties():
    truth = np.arange(6.0).reshape(2, 3)
    mask = np.array([[1, 0, 0], [0, 1, 0]])
    assert imputation_mse(truth, truth, mask) == 0.0
    noisy = truth + np.array([[2.0, 100.0, -5.0], [0.0, -4.0, 1.0]])
    assert imputation_mse(noisy, truth, mask) == pytest.approx((4 + 16) / 2)
    with pytest.raises(DataError):
        imputation_mse(truth, truth, np.zeros((2, 3)))


def test_knn_orphan_entry_falls_back_to_mean(caplog):
    # row 0 shares no observed coordinate with any donor
    vals = np.array([[5.0, 0.0], [0.0, 1.0], [0.0, 3.0]])
    data = MaskedMatrix(vals, [[0, 1], [1, 0], [1, 0]])
    with caplog.at_level("WARNING", logger="miwae.data"):
        out = impute_knn(data, k_range=[1])
    assert out[0, 1] == 2.0
    assert "no donor" in caplog.text
