"""Federated datasets: synthetic cases, CSV ingestion, splits and export.

Design matrices follow the columns-as-observations convention: a device's
``X`` has shape ``(d, N_k)`` and ``Y`` has length ``N_k``, so a linear model
predicts ``X.T @ theta``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .gaussian import MatrixNormalSpec, random_pd, sample_matrix_normal
from .seeding import stream

__all__ = [
    "DatasetError",
    "DeviceDataset",
    "Split",
    "FederatedDataset",
    "SyntheticCaseSpec",
    "CsvSchema",
    "HM1_CASES",
    "HM2_CASES",
    "gen_case",
    "gen_hm1_case",
    "gen_hm2_case",
    "gen_uq_case",
    "gen_poly_surrogate",
    "polynomial_design",
    "train_test_split",
    "load_csv_federated",
    "read_cmapss_txt",
    "student_schema",
    "cmapss_schema",
    "unstandardize",
    "export_dataset",
    "load_exported",
]


class DatasetError(ValueError):
    """Invalid dataset contents or loader input."""


@dataclass(frozen=True)
class DeviceDataset:
    device_id: str
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        if X.shape[1] != Y.size:
            raise DatasetError(
                f"device {self.device_id}: X has {X.shape[1]} columns but Y has {Y.size} entries"
            )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise DatasetError(f"device {self.device_id}: non-finite entries")
        object.__setattr__(self, "device_id", str(self.device_id))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def d(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.Y.size

    def subset(self, idx) -> "DeviceDataset":
        idx = np.asarray(idx, dtype=int)
        return DeviceDataset(self.device_id, self.X[:, idx], self.Y[idx])


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    test: np.ndarray
    validation: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


@dataclass
class FederatedDataset:
    """Ordered devices plus optional ground truth and split indices."""

    devices: list[DeviceDataset]
    true_theta: np.ndarray | None = None
    true_omega: np.ndarray | None = None
    true_phi: dict[str, np.ndarray] | None = None
    split: dict[str, Split] | None = None
    feature_names: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.devices:
            raise DatasetError("a federated dataset needs at least one device")
        d = {dev.d for dev in self.devices}
        if len(d) != 1:
            raise DatasetError(f"devices disagree on feature dimension: {sorted(d)}")
        ids = [dev.device_id for dev in self.devices]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate device ids")
        if self.true_theta is not None and self.true_theta.shape != (self.d, self.K):
            raise DatasetError(
                f"true_theta shape {self.true_theta.shape} != {(self.d, self.K)}"
            )
        if self.true_omega is not None and self.true_omega.shape != (self.K, self.K):
            raise DatasetError(f"true_omega shape {self.true_omega.shape} != {(self.K, self.K)}")

    @property
    def K(self) -> int:
        return len(self.devices)

    @property
    def d(self) -> int:
        return self.devices[0].d

    @property
    def device_ids(self) -> list[str]:
        return [dev.device_id for dev in self.devices]

    def _part(self, name: str) -> list[DeviceDataset]:
        if self.split is None:
            if name == "train":
                return list(self.devices)
            raise DatasetError("dataset has no split")
        return [dev.subset(getattr(self.split[dev.device_id], name)) for dev in self.devices]

    def train(self) -> list[DeviceDataset]:
        return self._part("train")

    def test(self) -> list[DeviceDataset]:
        return self._part("test")

    def validation(self) -> list[DeviceDataset]:
        return self._part("validation")

    def train_only(self) -> "FederatedDataset":
        """Copy whose devices hold only their training rows."""
        return replace(self, devices=self.train(), split=None)


CASE_IDS = ("HM1-I", "HM1-II", "HM1-III", "HM1-IV", "HM2-I", "HM2-II", "HM2-III", "UQ-100", "POLY")
HM1_CASES = CASE_IDS[:4]
HM2_CASES = CASE_IDS[4:7]
_OVERRIDE_KEYS = {"K", "d", "sample_sizes", "noise_sd", "n_test", "noisy_test", "n_validation", "order"}


@dataclass(frozen=True)
class SyntheticCaseSpec:
    case_id: str
    seed: int = 0
    overrides: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.case_id not in CASE_IDS:
            raise DatasetError(f"unknown case id {self.case_id!r}")
        bad = set(self.overrides) - _OVERRIDE_KEYS
        if bad:
            raise DatasetError(f"unknown overrides {sorted(bad)}")
        sizes = self.overrides.get("sample_sizes")
        K = self.overrides.get("K")
        if sizes is not None and K is not None and len(sizes) != K:
            raise DatasetError(f"sample_sizes has {len(sizes)} entries but K={K}")


def _device_ids(K: int) -> list[str]:
    return [str(k + 1) for k in range(K)]


def _linear_devices(theta, sizes, n_test, noise_sd, noisy_test, seed, case_id, n_validation=0):
    """Standard-normal inputs, ``y = x^T theta_k + noise``; test rows appended.

    ``n_validation`` extra noisy rows per device come from their own stream
    after the test rows, so asking for them leaves the other rows unchanged.
    """
    d, K = theta.shape
    devices, split = [], {}
    for k, dev_id in enumerate(_device_ids(K)):
        rng = stream(seed, case_id, "device", dev_id)
        n = int(sizes[k])
        X = rng.standard_normal((d, n + n_test))
        noise = noise_sd * rng.standard_normal(n + n_test)
        if not noisy_test:
            noise[n:] = 0.0
        if n_validation:
            vrng = stream(seed, case_id, "validation", dev_id)
            Xv = vrng.standard_normal((d, n_validation))
            X = np.concatenate([X, Xv], axis=1)
            noise = np.concatenate([noise, noise_sd * vrng.standard_normal(n_validation)])
        Y = X.T @ theta[:, k] + noise
        devices.append(DeviceDataset(dev_id, X, Y))
        m = n + n_test
        split[dev_id] = Split(np.arange(n), np.arange(n, m), np.arange(m, m + n_validation))
    return devices, split


def gen_hm1_case(spec: SyntheticCaseSpec) -> FederatedDataset:
    """Matrix-normal device parameters with a cross-device covariance.

    Test rows carry the noise-free regression function unless
    ``noisy_test`` is overridden.
    """
    if spec.case_id not in HM1_CASES:
        raise DatasetError(f"{spec.case_id} is not an HM1 case")
    o = dict(spec.overrides)
    truth_rng = stream(spec.seed, spec.case_id, "truth")
    if spec.case_id == "HM1-I":
        K = o.get("K", 2)
        d = o.get("d", 5)
        omega = np.array([[1.0, 0.7], [0.7, 1.0]]) if K == 2 else random_pd(K, truth_rng)
        sizes = o.get("sample_sizes", [20, 200] if K == 2 else [20] * K)
        noise = o.get("noise_sd", 0.05)
    else:
        K = o.get("K", 100)
        d = o.get("d", 8)
        omega = random_pd(K, truth_rng)
        default = {
            "HM1-II": [40] * min(30, K) + [275] * max(0, K - 30),
            "HM1-III": [20] * K,
            "HM1-IV": [200] * K,
        }[spec.case_id]
        sizes = o.get("sample_sizes", default)
        noise = o.get("noise_sd", 0.1)
    if len(sizes) != K:
        raise DatasetError(f"sample_sizes has {len(sizes)} entries but K={K}")
    theta = sample_matrix_normal(MatrixNormalSpec(np.zeros((d, K)), np.eye(d), omega), truth_rng)
    devices, split = _linear_devices(
        theta, sizes, o.get("n_test", 1000), noise, o.get("noisy_test", False), spec.seed, spec.case_id,
        o.get("n_validation", 0),
    )
    return FederatedDataset(
        devices,
        true_theta=theta,
        true_omega=omega,
        split=split,
        meta={"case_id": spec.case_id, "seed": spec.seed, "noise_sd": noise},
    )


HM2_THETA = {
    "HM2-I": np.array([3, 1.5, 0, 0, 2, 0, 0, 0], dtype=float),
    "HM2-II": np.array([3, 1.5, 0, 0, 2, 0, 0, 0], dtype=float),
    "HM2-III": np.array([3.0] * 10 + [0.0] * 10 + [3.0] * 10),
}


def gen_hm2_case(spec: SyntheticCaseSpec) -> FederatedDataset:
    """One shared sparse coefficient vector on every device."""
    if spec.case_id not in HM2_CASES:
        raise DatasetError(f"{spec.case_id} is not an HM2 case")
    o = dict(spec.overrides)
    theta_true = HM2_THETA[spec.case_id]
    if "d" in o and o["d"] != theta_true.size:
        raise DatasetError(f"{spec.case_id} has d={theta_true.size}")
    if spec.case_id == "HM2-I":
        K, sizes, n_test = o.get("K", 10), None, 1000
    elif spec.case_id == "HM2-II":
        K, sizes, n_test = o.get("K", 10), None, 1000
    else:
        K, sizes, n_test = o.get("K", 20), None, 400
    if sizes is None:
        sizes = {
            "HM2-I": [100] * K,
            "HM2-II": [20] * min(2, K) + [200] * max(0, K - 2),
            "HM2-III": [40] * K,
        }[spec.case_id]
    sizes = o.get("sample_sizes", sizes)
    if len(sizes) != K:
        raise DatasetError(f"sample_sizes has {len(sizes)} entries but K={K}")
    noise = o.get("noise_sd", 0.05)
    theta = np.tile(theta_true[:, None], (1, K))
    devices, split = _linear_devices(
        theta, sizes, o.get("n_test", n_test), noise, o.get("noisy_test", False), spec.seed, spec.case_id,
        o.get("n_validation", 0),
    )
    return FederatedDataset(
        devices,
        true_theta=theta,
        true_phi={"theta": theta_true.copy()},
        split=split,
        meta={"case_id": spec.case_id, "seed": spec.seed, "noise_sd": noise},
    )


UQ_MU = np.array([1.0, 3.0, 0.5, 2.0])
UQ_VAR = np.array([1.17, 2.35, 2.52, 0.67])


def gen_uq_case(seed: int, overrides: Mapping | None = None) -> FederatedDataset:
    """Device parameters drawn around a known population mean and variance."""
    o = dict(overrides or {})
    K = o.get("K", 100)
    sizes = o.get("sample_sizes", [100] * K)
    if len(sizes) != K:
        raise DatasetError(f"sample_sizes has {len(sizes)} entries but K={K}")
    noise = o.get("noise_sd", 0.5)
    truth_rng = stream(seed, "UQ-100", "truth")
    theta = UQ_MU[:, None] + np.sqrt(UQ_VAR)[:, None] * truth_rng.standard_normal((4, K))
    n_test = o.get("n_test", 0)
    n_val = o.get("n_validation", 0)
    devices, split = _linear_devices(theta, sizes, n_test, noise, o.get("noisy_test", False), seed, "UQ-100", n_val)
    return FederatedDataset(
        devices,
        true_theta=theta,
        true_phi={"mu": UQ_MU.copy(), "tau": UQ_VAR.copy()},
        split=split if n_test or n_val else None,
        meta={"case_id": "UQ-100", "seed": seed, "noise_sd": noise},
    )


def polynomial_design(t, order: int, scale=None) -> np.ndarray:
    """``(order + 1) x N`` matrix whose row ``j`` holds ``t**j``.

    ``scale`` is ``None`` (use ``t`` as given), ``"auto"`` (min-max to
    ``[0, 1]`` using ``t`` itself) or a ``(lo, hi)`` pair.
    """
    if order < 1:
        raise DatasetError("polynomial order must be at least 1")
    t = np.asarray(t, dtype=float).reshape(-1)
    if scale is not None:
        lo, hi = (t.min(), t.max()) if isinstance(scale, str) else scale
        t = (t - lo) / (hi - lo) if hi > lo else np.zeros_like(t)
    return np.vstack([t**j for j in range(order + 1)])


def gen_poly_surrogate(seed: int, overrides: Mapping | None = None) -> FederatedDataset:
    """Heterogeneous polynomial degradation signals, one series per device.

    Stands in for a turbofan sensor when the real data are unavailable:
    per-device cubic coefficients share a common trend and deviate from it
    with a random cross-device covariance.  Each series is split by time
    (first 60% train, of which 20% is held out for validation).
    """
    o = dict(overrides or {})
    K = o.get("K", 100)
    order = o.get("order", 3)
    noise = o.get("noise_sd", 0.3)
    truth_rng = stream(seed, "POLY", "truth")
    lengths = o.get("sample_sizes") or truth_rng.integers(128, 363, size=K).tolist()
    if len(lengths) != K:
        raise DatasetError(f"sample_sizes has {len(lengths)} entries but K={K}")
    t_max = float(max(lengths))
    omega = random_pd(K, truth_rng)
    trend = np.array([0.0, 0.5, 1.0, 1.5, 0.5, 0.25, 0.1][: order + 1])
    dev = sample_matrix_normal(MatrixNormalSpec(np.zeros((order + 1, K)), np.eye(order + 1), omega), truth_rng)
    theta = trend[:, None] + dev
    devices = []
    for k, dev_id in enumerate(_device_ids(K)):
        rng = stream(seed, "POLY", "device", dev_id)
        cycles = np.arange(1, lengths[k] + 1)
        X = polynomial_design(cycles, order, scale=(0.0, t_max))
        Y = X.T @ theta[:, k] + noise * rng.standard_normal(cycles.size)
        devices.append(DeviceDataset(dev_id, X, Y))
    ds = FederatedDataset(
        devices,
        true_theta=theta,
        true_omega=omega,
        meta={"case_id": "POLY", "seed": seed, "noise_sd": noise, "order": order},
    )
    return train_test_split(ds, ("time_prefix", 0.6), seed, validation=0.2)


def gen_case(spec: SyntheticCaseSpec) -> FederatedDataset:
    if spec.case_id in HM1_CASES:
        return gen_hm1_case(spec)
    if spec.case_id in HM2_CASES:
        return gen_hm2_case(spec)
    if spec.case_id == "UQ-100":
        return gen_uq_case(spec.seed, spec.overrides)
    return gen_poly_surrogate(spec.seed, spec.overrides)


def train_test_split(ds: FederatedDataset, policy, seed: int, validation: float = 0.0) -> FederatedDataset:
    """Attach per-device train/test (and optional validation) indices.

    ``policy`` is ``("fraction", p)`` for a uniform random split or
    ``("time_prefix", p)`` to train on the first ``ceil(p * N_k)`` rows.
    ``validation`` moves that fraction of each training set, sampled
    uniformly, into a validation set.
    """
    kind, p = policy
    if not 0 < p < 1:
        raise DatasetError(f"split fraction must lie in (0, 1), got {p}")
    if kind not in ("fraction", "time_prefix"):
        raise DatasetError(f"unknown split policy {kind!r}")
    split = {}
    for dev in ds.devices:
        n = dev.n
        if n < 2:
            raise DatasetError(f"device {dev.device_id} has fewer than 2 observations")
        rng = stream(seed, "split", dev.device_id)
        n_train = min(n - 1, max(1, math.ceil(p * n)))
        if kind == "fraction":
            perm = rng.permutation(n)
            train, test = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        else:
            train, test = np.arange(n_train), np.arange(n_train, n)
        val = np.zeros(0, dtype=int)
        if validation > 0:
            n_val = int(round(validation * train.size))
            if 0 < n_val < train.size:
                pick = rng.permutation(train.size)[:n_val]
                val = np.sort(train[pick])
                train = np.setdiff1d(train, val)
        split[dev.device_id] = Split(train, test, val)
    return replace(ds, split=split)


@dataclass(frozen=True)
class CsvSchema:
    """How to turn a flat CSV into devices.

    With ``time_column`` set, the only features are a polynomial in time
    of degree ``order`` (time scaled to ``[0, 1]`` by ``time_scale`` or,
    when that is ``None``, by the largest time value in the file).
    """

    device_column: str
    target_column: str
    dummy_encode: frozenset = frozenset()
    standardize: bool = True
    standardize_target: bool | None = None
    drop: frozenset = frozenset()
    time_column: str | None = None
    order: int = 3
    time_scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "dummy_encode", frozenset(self.dummy_encode))
        object.__setattr__(self, "drop", frozenset(self.drop))
        if self.standardize_target is None:
            object.__setattr__(self, "standardize_target", self.standardize)


def student_schema() -> CsvSchema:
    """School as device and final grade ``G3`` as target.

    The period grades ``G1`` and ``G2`` are left out.  Every text column is
    dummy encoded with its first level dropped and the remaining numeric
    columns are standardized, which leaves 38 predictors after the
    intercept.
    """
    return CsvSchema("school", "G3", drop=frozenset({"G1", "G2"}))


def cmapss_schema(sensor: str = "s2", order: int = 3) -> CsvSchema:
    """Engine unit as device, one sensor as target, polynomial in cycle."""
    return CsvSchema("unit", sensor, time_column="cycle", order=order)


def _read_frame(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"file not found: {path}")
    return pd.read_csv(path, sep=None, engine="python", encoding="utf-8")


def read_cmapss_txt(path) -> pd.DataFrame:
    """Read a raw whitespace-delimited C-MAPSS file and name its columns."""
    raw = pd.read_csv(path, sep=r"\s+", header=None, engine="python")
    names = ["unit", "cycle", "setting1", "setting2", "setting3"]
    names += [f"s{i}" for i in range(1, raw.shape[1] - len(names) + 1)]
    raw.columns = names
    return raw


def load_csv_federated(
    source,
    schema: CsvSchema,
    split_policy=None,
    seed: int = 0,
    validation: float = 0.0,
) -> FederatedDataset:
    """Group rows by device and build an intercept-first design matrix.

    ``source`` is a path or a ``DataFrame``.  Nominal columns become
    first-level-dropped dummies; numeric predictors (and the target, unless
    disabled) are standardized with statistics pooled over training rows.
    """
    df = source.copy() if isinstance(source, pd.DataFrame) else _read_frame(source)
    for col in [schema.device_column, schema.target_column, schema.time_column]:
        if col is not None and col not in df.columns:
            raise DatasetError(f"missing column {col!r}")
    missing = (schema.dummy_encode | schema.drop) - set(df.columns)
    if missing:
        raise DatasetError(f"missing column {sorted(missing)[0]!r}")
    target = pd.to_numeric(df[schema.target_column], errors="coerce")
    if target.isna().any():
        raise DatasetError(f"non-numeric target column {schema.target_column!r}")
    df[schema.target_column] = target.astype(float)

    groups = list(df.groupby(schema.device_column, sort=False))
    if split_policy is not None:
        sizes = {str(g): len(frame) for g, frame in groups}
        stub = FederatedDataset(
            [DeviceDataset(g, np.zeros((1, n)), np.zeros(n)) for g, n in sizes.items()]
        )
        split = train_test_split(stub, split_policy, seed, validation).split
    else:
        split = None

    if schema.time_column is not None:
        feats = pd.DataFrame(index=df.index)
        t = pd.to_numeric(df[schema.time_column], errors="raise").astype(float)
        scale = schema.time_scale or float(t.max())
        design = polynomial_design(t.to_numpy(), schema.order, scale=(0.0, scale))
        for j in range(1, schema.order + 1):
            feats[f"t^{j}"] = design[j]
        numeric = []
    else:
        skip = {schema.device_column, schema.target_column} | set(schema.drop)
        cols = [c for c in df.columns if c not in skip]
        parts, numeric = [], []
        for c in cols:
            if c in schema.dummy_encode or not pd.api.types.is_numeric_dtype(df[c]):
                levels = sorted(df[c].astype(str).unique())
                dummies = pd.get_dummies(
                    pd.Categorical(df[c].astype(str), categories=levels), prefix=c, prefix_sep="_"
                ).astype(float)
                dummies.index = df.index
                parts.append(dummies.iloc[:, 1:])
            else:
                parts.append(df[[c]].astype(float))
                numeric.append(c)
        feats = pd.concat(parts, axis=1) if parts else pd.DataFrame(index=df.index)

    # pooled training rows define standardization statistics
    train_mask = np.ones(len(df), dtype=bool)
    if split is not None:
        train_mask[:] = False
        for g, frame in groups:
            train_mask[df.index.get_indexer(frame.index[split[str(g)].train])] = True
    stats = {}
    to_scale = list(numeric) if schema.standardize else []
    if schema.standardize_target:
        to_scale.append(schema.target_column)
    for c in to_scale:
        src = feats[c] if c in feats.columns else df[c]
        mu = float(src[train_mask].mean())
        sd = float(src[train_mask].std(ddof=0))
        sd = sd if sd > 0 else 1.0
        stats[c] = (mu, sd)
        if c in feats.columns:
            feats[c] = (feats[c] - mu) / sd
    y_all = df[schema.target_column].to_numpy(dtype=float)
    if schema.target_column in stats:
        mu, sd = stats[schema.target_column]
        y_all = (y_all - mu) / sd

    names = ["intercept"] + list(feats.columns)
    F = feats.to_numpy(dtype=float)
    devices = []
    for g, frame in groups:
        pos = df.index.get_indexer(frame.index)
        if pos.size == 0:
            raise DatasetError(f"empty device group {g!r}")
        X = np.vstack([np.ones(pos.size), F[pos].T])
        devices.append(DeviceDataset(str(g), X, y_all[pos]))
    return FederatedDataset(
        devices,
        split=split,
        feature_names=names,
        meta={"standardization": stats, "numeric_columns": numeric, "target": schema.target_column},
    )


def unstandardize(ds: FederatedDataset) -> dict[str, dict[str, np.ndarray]]:
    """Original scale of standardized numeric predictors, per device."""
    stats = ds.meta.get("standardization", {})
    out = {}
    for dev in ds.devices:
        cols = {}
        for j, name in enumerate(ds.feature_names or []):
            if name in stats:
                mu, sd = stats[name]
                cols[name] = dev.X[j] * sd + mu
        tgt = ds.meta.get("target")
        if tgt in stats:
            mu, sd = stats[tgt]
            cols[tgt] = dev.Y * sd + mu
        out[dev.device_id] = cols
    return out


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def _write_rows(path: Path, dev: DeviceDataset) -> None:
    cols = {f"x{j + 1}": dev.X[j] for j in range(dev.d)}
    cols["y"] = dev.Y
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def export_dataset(ds: FederatedDataset, out_dir) -> Path:
    """Write ``devices/<id>.csv`` (training rows), ``test/<id>.csv`` and ``manifest.json``."""
    out = Path(out_dir)
    (out / "devices").mkdir(parents=True, exist_ok=True)
    train = ds.train()
    test = ds.test() if ds.split is not None else []
    for dev in train:
        _write_rows(out / "devices" / f"{dev.device_id}.csv", dev)
    if test:
        (out / "test").mkdir(exist_ok=True)
        for dev in test:
            _write_rows(out / "test" / f"{dev.device_id}.csv", dev)
    manifest = {
        "devices": ds.device_ids,
        "meta": _jsonable(ds.meta),
        "true_theta": _jsonable(ds.true_theta),
        "true_omega": _jsonable(ds.true_omega),
        "true_phi": _jsonable(ds.true_phi),
        "feature_names": ds.feature_names,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def load_exported(out_dir) -> FederatedDataset:
    """Inverse of :func:`export_dataset`."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    devices, split = [], {}
    for dev_id in manifest["devices"]:
        tr = pd.read_csv(out / "devices" / f"{dev_id}.csv", float_precision="round_trip")
        parts = [tr]
        te_path = out / "test" / f"{dev_id}.csv"
        if te_path.exists():
            parts.append(pd.read_csv(te_path, float_precision="round_trip"))
        frame = pd.concat(parts, ignore_index=True)
        X = frame.drop(columns="y").to_numpy(dtype=float).T
        devices.append(DeviceDataset(dev_id, X, frame["y"].to_numpy(dtype=float)))
        split[dev_id] = Split(np.arange(len(tr)), np.arange(len(tr), len(frame)))
    arr = lambda v: None if v is None else np.asarray(v, dtype=float)
    phi = manifest.get("true_phi")
    return FederatedDataset(
        devices,
        true_theta=arr(manifest.get("true_theta")),
        true_omega=arr(manifest.get("true_omega")),
        true_phi=None if phi is None else {k: np.asarray(v) for k, v in phi.items()},
        split=split if (out / "test").exists() else None,
        feature_names=manifest.get("feature_names"),
        meta=manifest.get("meta", {}),
    )
