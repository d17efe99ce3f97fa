"""Comparison methods: FedAvg, Ditto, Separate and pooled penalized regression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .datasets import DeviceDataset, FederatedDataset
from .hm1 import ParamUpload, local_sgd
from .runtime import FedAlgorithm

__all__ = [
    "BaselineConfig",
    "ParamBroadcast",
    "FedAvgAlgorithm",
    "fedavg_aggregate",
    "ditto_personalize",
    "separate_fit",
    "central_penalized",
    "lasso_cd",
    "lasso_kkt_violation",
    "pool",
]

BASELINE_KINDS = ("fedAvg", "ditto", "separate", "centralLasso", "centralRidge")


@dataclass(frozen=True)
class BaselineConfig:
    kind: str
    eta: float = 0.01
    local_steps: int = 20
    batch_size: int | str | None = None
    lambda_ditto: float = 1.0
    ditto_steps: int = 200
    ditto_eta: float | None = None
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline {self.kind!r}")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.local_steps < 1:
            raise ValueError("local_steps must be positive")
        if self.lambda_ditto < 0:
            raise ValueError("lambda_ditto must be non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.ditto_steps < 1:
            raise ValueError("ditto_steps must be positive")

    def batch_for(self, n: int) -> int:
        if self.batch_size == "full":
            return n
        if self.batch_size is None:
            return min(32, n)
        return min(int(self.batch_size), n)


def fedavg_aggregate(uploads) -> np.ndarray:
    """Arithmetic mean of parameter vectors."""
    vecs = [np.asarray(u, dtype=float) for u in uploads]
    if not vecs:
        raise ValueError("no uploads to average")
    if len({v.shape for v in vecs}) != 1:
        raise ValueError("uploads have different shapes")
    return np.mean(np.stack(vecs), axis=0)


@dataclass(frozen=True)
class ParamBroadcast:
    theta: np.ndarray


class FedAvgAlgorithm(FedAlgorithm):
    """Local SGD from the global model, then averaging over participants."""

    name = "fedavg"
    broadcast_message = ParamBroadcast
    upload_message = ParamUpload

    def __init__(self, config: BaselineConfig | None = None):
        self.config = config or BaselineConfig("fedAvg")

    def hyper_parameters(self) -> dict:
        c = self.config
        return {"eta": c.eta, "local_steps": c.local_steps,
                "batch_size": c.batch_size if c.batch_size is not None else "min(32,N)"}

    def init_server(self, data, rng) -> np.ndarray:
        return np.zeros(data.d)

    def broadcast(self, server, participants):
        return {k: ParamBroadcast(server.copy()) for k in participants}

    def device_update(self, index, state, device, payload, rng):
        c = self.config
        theta = local_sgd(payload.theta, device, c.local_steps, c.eta, c.batch_for(device.n), rng)
        return theta, ParamUpload(theta)

    def aggregate(self, server, uploads, round_index):
        return fedavg_aggregate([uploads[k].theta for k in sorted(uploads)])

    def monitors(self, server, device_states, data):
        if data.true_theta is None:
            return {}
        diff = data.true_theta - server[:, None]
        return {"param_error": float(np.linalg.norm(diff) / np.sqrt(data.K))}


def ditto_personalize(theta_bar, device: DeviceDataset, lambda_ditto: float, eta: float | None = None,
                      steps: int = 200) -> np.ndarray:
    """Minimize ``||Y - X^T v||^2 + (lambda/2) ||v - theta_bar||^2`` from ``v = theta_bar``.

    Each step is a gradient step on the squared loss followed by the exact
    proximal map of the penalty, which is stable for any ``lambda``.  The
    default step is ``1 / (2 lambda_max(X X^T))``.
    """
    theta_bar = np.asarray(theta_bar, dtype=float)
    A = device.X @ device.X.T
    b = device.X @ device.Y
    if eta is None:
        top = float(np.linalg.eigvalsh(A)[-1]) if device.n else 0.0
        eta = 0.5 / top if top > 0 else 1.0
    v = theta_bar.copy()
    shrink = 1.0 / (1.0 + eta * lambda_ditto)
    for _ in range(steps):
        z = v + 2.0 * eta * (b - A @ v)
        v = shrink * (z + eta * lambda_ditto * theta_bar)
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"Ditto personalization diverged on device {device.device_id}")
    return v


def separate_fit(device: DeviceDataset, eta: float, steps: int, rng, batch_size=None,
                 theta0=None) -> np.ndarray:
    """Purely local SGD from zero (no communication)."""
    theta = np.zeros(device.d) if theta0 is None else np.asarray(theta0, float)
    if batch_size == "full":
        batch = device.n
    elif batch_size is None:
        batch = min(32, device.n)
    else:
        batch = min(int(batch_size), device.n)
    return local_sgd(theta, device, steps, eta, batch, rng)


def pool(devices: list[DeviceDataset]) -> DeviceDataset:
    return DeviceDataset("pooled", np.concatenate([d.X for d in devices], axis=1),
                         np.concatenate([d.Y for d in devices]))


def lasso_cd(X, Y, lam: float, penalized=None, tol: float = 1e-8, max_sweeps: int = 100000,
             theta0=None) -> np.ndarray:
    """Cyclic coordinate descent for ``0.5 ||Y - X^T theta||^2 + lam sum_{j pen} |theta_j|``.

    Stops when no coefficient moved by more than ``tol`` in a full sweep.
    """
    A = X @ X.T
    b = X @ Y
    d = b.size
    pen = np.ones(d, bool) if penalized is None else np.asarray(penalized, bool)
    theta = np.zeros(d) if theta0 is None else np.array(theta0, float)
    diag = np.diag(A).copy()
    grad = b - A @ theta  # X (Y - X^T theta)
    for _ in range(max_sweeps):
        max_change = 0.0
        for j in range(d):
            if diag[j] <= 0:
                continue
            old = theta[j]
            rho = grad[j] + diag[j] * old
            if pen[j]:
                new = np.sign(rho) * max(abs(rho) - lam, 0.0) / diag[j]
            else:
                new = rho / diag[j]
            if new != old:
                grad -= A[:, j] * (new - old)
                theta[j] = new
                max_change = max(max_change, abs(new - old))
        if max_change < tol:
            return theta
    raise RuntimeError(f"coordinate descent did not converge in {max_sweeps} sweeps")


def lasso_kkt_violation(X, Y, theta, lam: float, penalized=None) -> float:
    """Largest violation of the subgradient optimality conditions."""
    g = X @ (Y - X.T @ theta)
    d = g.size
    pen = np.ones(d, bool) if penalized is None else np.asarray(penalized, bool)
    viol = np.where(~pen, np.abs(g), 0.0)
    nz = pen & (theta != 0)
    z = pen & (theta == 0)
    viol = np.where(nz, np.abs(g - lam * np.sign(theta)), viol)
    viol = np.where(z, np.maximum(np.abs(g) - lam, 0.0), viol)
    return float(np.max(viol)) if d else 0.0


def central_penalized(data, kind: str, lam: float, intercept: bool = False) -> np.ndarray:
    """Ridge or Lasso on pooled data.

    Ridge solves ``(X X^T + lam P) theta = X Y``; Lasso minimizes
    ``0.5 ||Y - X^T theta||^2 + lam ||theta||_1``.  With ``intercept`` the
    first coefficient is left unpenalized (``P`` has a zero there).
    """
    if isinstance(data, FederatedDataset):
        data = data.devices
    dev = pool(list(data)) if isinstance(data, (list, tuple)) else data
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    pen = np.ones(dev.d, bool)
    if intercept:
        pen[0] = False
    if kind in ("ridge", "centralRidge"):
        A = dev.X @ dev.X.T + lam * np.diag(pen.astype(float))
        return linalg.solve(A, dev.X @ dev.Y, assume_a="sym")
    if kind in ("lasso", "centralLasso"):
        return lasso_cd(dev.X, dev.Y, lam, pen)
    raise ValueError(f"unknown penalized kind {kind!r}")
