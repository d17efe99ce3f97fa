"""Evaluation quantities: A-RMSE, parameter error, inclusion rates and coverage."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hm1 import param_error

__all__ = [
    "EvalReport",
    "rmse",
    "per_device_rmse",
    "a_rmse",
    "param_error",
    "inclusion_rates",
    "ci_coverage",
    "mean_sd",
    "write_reports_csv",
]


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, float)
    truth = np.asarray(truth, float)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.size == 0:
        raise ValueError("no points to evaluate")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def per_device_rmse(Theta, devices) -> dict[str, float]:
    """Test RMSE of column ``k`` of ``Theta`` on device ``k`` (a vector is shared by all)."""
    Theta = np.asarray(Theta, float)
    out = {}
    for k, dev in enumerate(devices):
        theta = Theta if Theta.ndim == 1 else Theta[:, k]
        out[dev.device_id] = rmse(dev.X.T @ theta, dev.Y)
    return out


def a_rmse(predictions, truths, device_set=None) -> float:
    """Mean over devices of per-device RMSE.

    ``predictions`` and ``truths`` are mappings (or sequences) keyed by
    device; ``device_set`` restricts the average.
    """
    if not isinstance(predictions, dict):
        predictions = dict(enumerate(predictions))
        truths = dict(enumerate(truths))
    keys = list(predictions) if device_set is None else list(device_set)
    if not keys:
        raise ValueError("empty device set")
    return float(np.mean([rmse(predictions[k], truths[k]) for k in keys]))


def inclusion_rates(masks, true_support) -> tuple[float, float]:
    """Average over devices of the correct and false inclusion fractions.

    ``masks`` has one boolean row per device; ``true_support`` is one row
    shared by every device or one row per device.  A rate whose
    denominator is empty is NaN.
    """
    masks = np.atleast_2d(np.asarray(masks, bool))
    sup = np.broadcast_to(np.asarray(true_support, bool), masks.shape)
    correct, false = [], []
    for m, s in zip(masks, sup):
        correct.append(m[s].mean() if s.any() else np.nan)
        false.append(m[~s].mean() if (~s).any() else np.nan)
    with np.errstate(all="ignore"):
        c = float(np.nanmean(correct)) if not np.all(np.isnan(correct)) else float("nan")
        f = float(np.nanmean(false)) if not np.all(np.isnan(false)) else float("nan")
    return c, f


def ci_coverage(intervals, truths) -> float:
    """Fraction of truths inside their ``(lo, hi)`` intervals (inclusive)."""
    lo, hi = (np.asarray(a, float) for a in intervals)
    t = np.asarray(truths, float)
    if not (lo.shape == hi.shape == t.shape):
        raise ValueError("intervals and truths must have matching shapes")
    return float(np.mean((lo <= t) & (t <= hi)))


def mean_sd(values) -> tuple[float, float]:
    """Mean and sample standard deviation (``ddof=1``; 0 for one value)."""
    v = np.asarray(values, float)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class EvalReport:
    algorithm: str
    run: int
    seed: int
    per_device_rmse: dict[str, float]
    eval_devices: list[str] | None = None
    param_error: float | None = None
    inclusion: tuple[float, float] | None = None
    coverage: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def a_rmse(self) -> float:
        keys = self.eval_devices if self.eval_devices is not None else list(self.per_device_rmse)
        return float(np.mean([self.per_device_rmse[k] for k in keys]))

    def summary(self) -> dict:
        out = {"algorithm": self.algorithm, "run": self.run, "seed": self.seed, "a_rmse": self.a_rmse}
        if self.param_error is not None:
            out["param_error"] = self.param_error
        if self.inclusion is not None:
            out["correct_rate"], out["false_rate"] = self.inclusion
        if self.coverage is not None:
            out["coverage"] = self.coverage
        out.update(self.extra)
        return out

    def rows(self) -> list[dict]:
        evaluated = set(self.eval_devices or self.per_device_rmse)
        return [
            {"algorithm": self.algorithm, "run": self.run, "seed": self.seed, "device": dev,
             "rmse": r, "in_a_rmse": int(dev in evaluated)}
            for dev, r in self.per_device_rmse.items()
        ]


def write_reports_csv(reports: list[EvalReport], path) -> Path:
    """Flat CSV with one row per device per run."""
    path = Path(path)
    cols = ["algorithm", "run", "seed", "device", "rmse", "in_a_rmse"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            for row in rep.rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path
