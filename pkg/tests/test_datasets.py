import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedhm.datasets import (
    CsvSchema,
    DatasetError,
    DeviceDataset,
    FederatedDataset,
    SyntheticCaseSpec,
    cmapss_schema,
    export_dataset,
    gen_case,
    gen_hm1_case,
    gen_hm2_case,
    gen_poly_surrogate,
    gen_uq_case,
    load_csv_federated,
    load_exported,
    polynomial_design,
    read_cmapss_txt,
    student_schema,
    train_test_split,
    unstandardize,
)


def residual_sd(ds):
    out = []
    for k, dev in enumerate(ds.train()):
        out.append(np.std(dev.Y - dev.X.T @ ds.true_theta[:, k]))
    return np.array(out)


class TestDeviceDataset:
    def test_shape_mismatch(self):
        with pytest.raises(DatasetError, match="3 columns but Y has 2"):
            DeviceDataset("a", np.zeros((2, 3)), np.zeros(2))

    def test_non_finite(self):
        with pytest.raises(DatasetError, match="non-finite"):
            DeviceDataset("a", np.array([[np.nan]]), [1.0])

    def test_federated_dimension_check(self):
        with pytest.raises(DatasetError, match="feature dimension"):
            FederatedDataset([DeviceDataset("a", np.zeros((2, 1)), [0]), DeviceDataset("b", np.zeros((3, 1)), [0])])


class TestHm1Cases:
    def test_case_one_defaults(self):
        ds = gen_hm1_case(SyntheticCaseSpec("HM1-I", seed=0))
        assert ds.K == 2 and ds.d == 5
        assert [d.n for d in ds.train()] == [20, 200]
        assert ds.true_omega[0, 1] == 0.7
        assert all(d.n == 1000 for d in ds.test())

    def test_case_three_sizes(self):
        ds = gen_hm1_case(SyntheticCaseSpec("HM1-III", seed=1))
        assert ds.K == 100 and ds.d == 8
        assert all(d.n == 20 for d in ds.train())

    def test_case_two_sizes(self):
        sizes = [d.n for d in gen_hm1_case(SyntheticCaseSpec("HM1-II", seed=1)).train()]
        assert sizes[:30] == [40] * 30 and sizes[30:] == [275] * 70

    def test_noise_free_override(self):
        ds = gen_hm1_case(SyntheticCaseSpec("HM1-IV", seed=2, overrides={"noise_sd": 0.0, "K": 5}))
        for k, dev in enumerate(ds.devices):
            assert np.allclose(dev.Y, dev.X.T @ ds.true_theta[:, k], atol=1e-12)

    def test_noise_level(self):
        ds = gen_hm1_case(SyntheticCaseSpec("HM1-IV", seed=3))
        sd = residual_sd(ds)
        assert np.all(np.abs(sd / 0.1 - 1) < 0.15)

    def test_unknown_case(self):
        with pytest.raises(DatasetError, match="HM1-V"):
            SyntheticCaseSpec("HM1-V")

    def test_override_consistency(self):
        with pytest.raises(DatasetError, match="sample_sizes"):
            SyntheticCaseSpec("HM1-II", overrides={"K": 3, "sample_sizes": [1, 2]})

    def test_pure_function_of_seed(self):
        a = gen_case(SyntheticCaseSpec("HM1-II", seed=7))
        b = gen_case(SyntheticCaseSpec("HM1-II", seed=7))
        c = gen_case(SyntheticCaseSpec("HM1-II", seed=8))
        assert all(np.array_equal(x.X, y.X) and np.array_equal(x.Y, y.Y) for x, y in zip(a.devices, b.devices))
        assert not np.array_equal(a.true_theta, c.true_theta)


class TestHm2Cases:
    def test_case_one_theta(self):
        ds = gen_hm2_case(SyntheticCaseSpec("HM2-I", seed=0))
        assert np.array_equal(ds.true_theta[:, 0], [3, 1.5, 0, 0, 2, 0, 0, 0])
        assert ds.K == 10 and all(d.n == 100 for d in ds.train())
        assert all(d.n == 1000 for d in ds.test())

    def test_case_two_sizes(self):
        sizes = [d.n for d in gen_hm2_case(SyntheticCaseSpec("HM2-II", seed=0)).train()]
        assert sizes[:2] == [20, 20] and set(sizes[2:]) == {200}

    def test_case_three_layout(self):
        ds = gen_hm2_case(SyntheticCaseSpec("HM2-III", seed=0))
        assert ds.d == 30 and ds.K == 20
        th = ds.true_phi["theta"]
        assert np.all(th[10:20] == 0) and np.all(th[:10] == 3) and np.all(th[20:] == 3)
        assert all(d.n == 40 for d in ds.train()) and all(d.n == 400 for d in ds.test())

    def test_normal_equations_recover_truth(self):
        ds = gen_hm2_case(SyntheticCaseSpec("HM2-I", seed=4, overrides={"noise_sd": 0.0}))
        for dev in ds.train():
            est = np.linalg.solve(dev.X @ dev.X.T, dev.X @ dev.Y)
            assert np.allclose(est, ds.true_phi["theta"], atol=1e-8)


class TestUqCase:
    def test_truth(self):
        ds = gen_uq_case(0)
        assert ds.true_phi["mu"][1] == 3 and ds.true_phi["tau"][3] == 0.67
        assert ds.K == 100 and all(d.n == 100 for d in ds.devices)

    def test_clt_band(self):
        ds = gen_uq_case(0)
        mean = ds.true_theta.mean(axis=1)
        band = 3 * np.sqrt(ds.true_phi["tau"]) / 10
        assert np.all(np.abs(mean - ds.true_phi["mu"]) < band)

    def test_standardized_means_over_seeds(self):
        # (mean - mu) / (sd / 10) is standard normal for each component
        z = np.array([
            (ds.true_theta.mean(axis=1) - ds.true_phi["mu"]) / np.sqrt(ds.true_phi["tau"]) * 10
            for ds in (gen_uq_case(s) for s in range(100))
        ])
        assert np.all(np.abs(z.mean(axis=0)) < 0.35)
        assert np.all(np.abs(z.std(axis=0) - 1) < 0.2)


class TestPolynomial:
    def test_zero(self):
        assert np.array_equal(polynomial_design([0.0], 3)[:, 0], [1, 0, 0, 0])

    def test_two(self):
        assert np.array_equal(polynomial_design([2.0], 3)[:, 0], [1, 2, 4, 8])

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.integers(1, 6))
    def test_intercept_row(self, t, order):
        m = polynomial_design(t, order, scale="auto")
        assert m.shape == (order + 1, len(t)) and np.all(m[0] == 1)
        assert np.all((m[1] >= 0) & (m[1] <= 1))

    def test_order_checked(self):
        with pytest.raises(DatasetError):
            polynomial_design([1.0], 0)


class TestSplit:
    def _ds(self, sizes):
        return FederatedDataset([DeviceDataset(str(i), np.ones((1, n)), np.arange(n)) for i, n in enumerate(sizes)])

    def test_time_prefix_ceiling(self):
        s = train_test_split(self._ds([10]), ("time_prefix", 0.6), 0).split["0"]
        assert list(s.train) == [0, 1, 2, 3, 4, 5] and list(s.test) == [6, 7, 8, 9]

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(2, 60), min_size=1, max_size=5), st.floats(0.05, 0.95), st.integers(0, 2**31), st.floats(0, 0.5))
    def test_partition(self, sizes, p, seed, val):
        ds = train_test_split(self._ds(sizes), ("fraction", p), seed, validation=val)
        for n, dev_id in zip(sizes, ds.device_ids):
            s = ds.split[dev_id]
            parts = np.concatenate([s.train, s.test, s.validation])
            assert sorted(parts.tolist()) == list(range(n))
            assert s.train.size >= 1 and s.test.size >= 1

    def test_deterministic(self):
        a = train_test_split(self._ds([30, 40]), ("fraction", 0.6), 3)
        b = train_test_split(self._ds([30, 40]), ("fraction", 0.6), 3)
        assert all(np.array_equal(a.split[k].train, b.split[k].train) for k in a.split)

    def test_too_small(self):
        with pytest.raises(DatasetError, match="fewer than 2"):
            train_test_split(self._ds([1]), ("fraction", 0.5), 0)

    def test_bad_fraction(self):
        with pytest.raises(DatasetError):
            train_test_split(self._ds([5]), ("fraction", 1.0), 0)


def student_frame(n=80, seed=0):
    rng = np.random.default_rng(seed)
    pick = lambda levels: rng.choice(levels, n).tolist()
    binary = {
        "sex": ["F", "M"], "address": ["R", "U"], "famsize": ["GT3", "LE3"], "Pstatus": ["A", "T"],
        "schoolsup": ["no", "yes"], "famsup": ["no", "yes"], "paid": ["no", "yes"],
        "activities": ["no", "yes"], "nursery": ["no", "yes"], "higher": ["no", "yes"],
        "internet": ["no", "yes"], "romantic": ["no", "yes"],
    }
    nominal = {
        "Mjob": ["at_home", "health", "other", "services", "teacher"],
        "Fjob": ["at_home", "health", "other", "services", "teacher"],
        "reason": ["course", "home", "other", "reputation"],
        "guardian": ["father", "mother", "other"],
    }
    numeric = ["age", "Medu", "Fedu", "traveltime", "studytime", "failures", "famrel",
               "freetime", "goout", "Dalc", "Walc", "health", "absences"]
    df = {"school": pick(["GP", "MS"])}
    for col, lv in {**binary, **nominal}.items():
        # every level appears at least once
        df[col] = (lv + pick(lv))[:n]
    for col in numeric:
        df[col] = rng.integers(0, 5, n)
    for g in ("G1", "G2", "G3"):
        df[g] = rng.integers(0, 20, n)
    return pd.DataFrame(df)


class TestCsv:
    def test_student_encoding(self, tmp_path):
        path = tmp_path / "student.csv"
        student_frame().to_csv(path, sep=";", index=False)
        ds = load_csv_federated(path, student_schema(), ("fraction", 0.6), seed=0)
        assert ds.K == 2 and ds.d - 1 == 38
        assert ds.feature_names[0] == "intercept"
        assert np.all(np.concatenate([d.X[0] for d in ds.devices]) == 1)

    def test_cmapss_engines(self, tmp_path):
        rows = []
        rng = np.random.default_rng(1)
        for unit in range(1, 101):
            for cycle in range(1, int(rng.integers(5, 12))):
                rows.append(" ".join(map(str, [unit, cycle, 0.1, 0.2, 100.0] + list(rng.normal(size=21)))))
        path = tmp_path / "train_FD001.txt"
        path.write_text("\n".join(rows) + "\n")
        ds = load_csv_federated(read_cmapss_txt(path), cmapss_schema("s2"), ("time_prefix", 0.6))
        assert ds.K == 100 and ds.d == 4

    def test_raw_columns_plus_intercept(self, tmp_path):
        path = tmp_path / "one.csv"
        pd.DataFrame({"dev": ["a"] * 4, "x": [1.0, 2, 3, 5], "z": [0.5, 0, 1, 2], "y": [1.0, 2, 3, 4]}).to_csv(path, index=False)
        ds = load_csv_federated(path, CsvSchema("dev", "y", standardize=False))
        X = ds.devices[0].X
        assert np.array_equal(X, [[1, 1, 1, 1], [1, 2, 3, 5], [0.5, 0, 1, 2]])
        assert np.array_equal(ds.devices[0].Y, [1, 2, 3, 4])

    def test_unstandardize_round_trip(self):
        df = pd.DataFrame({"dev": list("aabbb"), "x": [1.5, 2.0, -3.0, 7.25, 0.0], "y": [3.0, 1, 4, 1, 5]})
        ds = load_csv_federated(df, CsvSchema("dev", "y"))
        back = unstandardize(ds)
        assert np.allclose(back["a"]["x"], [1.5, 2.0], atol=1e-10)
        assert np.allclose(back["b"]["x"], [-3.0, 7.25, 0.0], atol=1e-10)
        assert np.allclose(back["b"]["y"], [4, 1, 5], atol=1e-10)

    def test_standardization_uses_training_rows(self):
        df = pd.DataFrame({"dev": ["a"] * 10, "x": np.arange(10.0), "y": np.arange(10.0)})
        ds = load_csv_federated(df, CsvSchema("dev", "y", standardize_target=False), ("time_prefix", 0.5))
        train = ds.train()[0]
        assert abs(train.X[1].mean()) < 1e-12 and abs(train.X[1].std() - 1) < 1e-12

    def test_errors_name_offender(self, tmp_path):
        df = pd.DataFrame({"dev": ["a", "b"], "x": [1.0, 2.0], "y": ["1", "oops"]})
        with pytest.raises(DatasetError, match="'unit'"):
            load_csv_federated(df, CsvSchema("unit", "y"))
        with pytest.raises(DatasetError, match="non-numeric target column 'y'"):
            load_csv_federated(df, CsvSchema("dev", "y"))
        with pytest.raises(DatasetError, match="file not found"):
            load_csv_federated(tmp_path / "missing.csv", CsvSchema("dev", "y"))


def test_poly_surrogate_structure():
    ds = gen_poly_surrogate(0)
    assert ds.K == 100 and ds.d == 4
    for dev in ds.devices:
        s = ds.split[dev.device_id]
        # training and validation rows precede every test row
        assert max(s.train.max(), s.validation.max()) < s.test.min()


def test_export_round_trip(tmp_path):
    ds = gen_hm1_case(SyntheticCaseSpec("HM1-I", seed=3, overrides={"n_test": 7}))
    export_dataset(ds, tmp_path)
    back = load_exported(tmp_path)
    assert back.device_ids == ds.device_ids
    for a, b in zip(ds.train() + ds.test(), back.train() + back.test()):
        assert np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y)
    assert np.array_equal(back.true_theta, ds.true_theta)


def test_validation_rows_leave_other_rows_unchanged():
    base = gen_case(SyntheticCaseSpec("HM1-III", seed=3, overrides={"K": 4}))
    more = gen_case(SyntheticCaseSpec("HM1-III", seed=3, overrides={"K": 4, "n_validation": 15}))
    for a, b in zip(base.train() + base.test(), more.train() + more.test()):
        assert np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y)
    val = more.validation()
    assert all(v.n == 15 for v in val)
    # validation rows are noisy draws from the device's own model
    resid = np.concatenate([v.Y - v.X.T @ more.true_theta[:, k] for k, v in enumerate(val)])
    assert 0.05 < resid.std() < 0.2
