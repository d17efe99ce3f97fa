"""Cross-device covariance model: local SGD, prior shrinkage, graph learning.

Device parameters are the columns of a ``d x K`` matrix ``Theta`` with a
matrix-normal prior ``MN(0, I, Omega)``.  Each round a device runs ``T``
local SGD steps and then one prior-shrinkage step using an aggregate the
server computes from ``Theta`` and ``Omega^{-1}``; the server then blends
``Omega`` toward ``Theta.T @ Theta / d``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .datasets import DeviceDataset, FederatedDataset
from .gaussian import nearest_jitter_pd, sqrtm_psd
from .runtime import FedAlgorithm

__all__ = [
    "Hm1Config",
    "Hm1Server",
    "Hm1Broadcast",
    "ParamUpload",
    "Hm1Algorithm",
    "local_sgd_step",
    "shrinkage_vector",
    "prior_shrinkage",
    "update_omega",
    "hm1_objective",
    "zhang_omega",
    "closed_form_map",
    "param_error",
]


def local_sgd_step(theta, Xb, Yb, eta2: float) -> np.ndarray:
    """One step ``theta + 2 eta2 Xb (Yb - Xb^T theta)`` (summed, not averaged)."""
    out = theta + 2.0 * eta2 * (Xb @ (Yb - Xb.T @ theta))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("local SGD step produced non-finite parameters")
    return out


def shrinkage_vector(Theta: np.ndarray, omega_inv: np.ndarray, k: int) -> np.ndarray:
    """``sum_i theta_i [Omega^{-1}]_{i,k}``, the server aggregate for device ``k``."""
    K = Theta.shape[1]
    if not 0 <= k < K:
        raise IndexError(f"device index {k} out of range for K={K}")
    return Theta @ omega_inv[:, k]


def prior_shrinkage(theta_k, aggregate, eta2: float) -> np.ndarray:
    out = np.asarray(theta_k, dtype=float) - 2.0 * eta2 * np.asarray(aggregate, dtype=float)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("prior shrinkage produced non-finite parameters")
    return out


def update_omega(Omega, Theta, alpha: float, d: int | None = None, floor: float = 0.0) -> np.ndarray:
    """``(1 - alpha) Omega + (alpha / d) Theta^T Theta``, kept symmetric PD.

    Eigenvalues are raised to ``floor`` when it is positive; rounding-level
    negative eigenvalues are repaired with jitter.
    """
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    d = Theta.shape[0] if d is None else d
    M = (1.0 - alpha) * Omega + (alpha / d) * (Theta.T @ Theta)
    M = 0.5 * (M + M.T)
    if floor > 0:
        w, V = np.linalg.eigh(M)
        if w[0] < floor:
            M = (V * np.maximum(w, floor)) @ V.T
            M = 0.5 * (M + M.T)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        M = nearest_jitter_pd(M, jitter=1e-12 * max(1.0, float(np.trace(M)) / M.shape[0]))
    return M


def _omega_inverse(Omega: np.ndarray) -> np.ndarray:
    c = linalg.cho_factor(Omega, lower=True)
    inv = linalg.cho_solve(c, np.eye(Omega.shape[0]))
    return 0.5 * (inv + inv.T)


def hm1_objective(Theta, Omega, devices: list[DeviceDataset], sigma_sq=None) -> float:
    """Negative log posterior ``sum ||Y_k - X_k^T theta_k||^2 / s_k + Tr(Theta Omega^-1 Theta^T) + d log|Omega|``."""
    d, K = Theta.shape
    sigma_sq = np.ones(K) if sigma_sq is None else np.broadcast_to(np.asarray(sigma_sq, float), (K,))
    try:
        c = linalg.cho_factor(Omega, lower=True)
    except np.linalg.LinAlgError:
        raise ValueError("Omega is not positive definite") from None
    fit = sum(
        float(np.sum((dev.Y - dev.X.T @ Theta[:, k]) ** 2)) / sigma_sq[k]
        for k, dev in enumerate(devices)
    )
    prior = float(np.trace(Theta @ linalg.cho_solve(c, Theta.T)))
    logdet = 2.0 * float(np.sum(np.log(np.diag(c[0]))))
    return fit + prior + d * logdet


def zhang_omega(Theta: np.ndarray) -> np.ndarray:
    """Trace-normalized ``(Theta^T Theta)^{1/2}``.

    A zero ``Theta`` has no direction to normalize; the uniform ``I / K`` is
    returned in that case.
    """
    S = sqrtm_psd(Theta.T @ Theta)
    tr = float(np.trace(S))
    K = Theta.shape[1]
    return S / tr if tr > 0 else np.eye(K) / K


def closed_form_map(devices: list[DeviceDataset], Omega, sigma_sq=None) -> np.ndarray:
    """Minimizer of the HM1 objective in ``Theta`` for a fixed ``Omega``."""
    K = len(devices)
    d = devices[0].d
    sigma_sq = np.ones(K) if sigma_sq is None else np.broadcast_to(np.asarray(sigma_sq, float), (K,))
    A = np.kron(_omega_inverse(Omega), np.eye(d))
    b = np.zeros(d * K)
    for k, dev in enumerate(devices):
        sl = slice(k * d, (k + 1) * d)
        A[sl, sl] += dev.X @ dev.X.T / sigma_sq[k]
        b[sl] = dev.X @ dev.Y / sigma_sq[k]
    try:
        sol = linalg.solve(A, b, assume_a="pos")
    except (linalg.LinAlgError, ValueError) as exc:
        raise np.linalg.LinAlgError(f"MAP system is singular: {exc}") from None
    return sol.reshape(K, d).T


def param_error(Theta_hat, Theta_star) -> float:
    """``||Theta_hat - Theta_star||_F / sqrt(K)``."""
    Theta_hat = np.atleast_2d(Theta_hat)
    return float(np.linalg.norm(Theta_hat - Theta_star) / np.sqrt(Theta_hat.shape[1]))


@dataclass(frozen=True)
class Hm1Broadcast:
    theta: np.ndarray
    aggregate: np.ndarray


@dataclass(frozen=True)
class ParamUpload:
    theta: np.ndarray


@dataclass(frozen=True)
class Hm1Config:
    """Hyper-parameters of the HM1 federated loop.

    ``eta_shrink`` defaults to ``eta2``.  ``omega_floor`` bounds the
    eigenvalues of ``Omega`` from below so that the shrinkage step
    ``Theta (I - 2 eta_shrink Omega^{-1})`` stays a contraction; the default
    ``4 * eta_shrink`` keeps every shrink factor in ``[0.5, 1)``.
    """

    eta2: float = 0.01
    alpha: float = 0.1
    local_steps: int = 20
    batch_size: int | str | None = None
    eta_shrink: float | None = None
    omega_floor: float | None = None
    init_scale: float = 0.01
    fixed_omega: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.eta2 <= 0:
            raise ValueError("eta2 must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.local_steps < 1:
            raise ValueError("local_steps must be positive")
        if isinstance(self.batch_size, str) and self.batch_size != "full":
            raise ValueError("batch_size must be a positive integer or 'full'")
        if isinstance(self.batch_size, int) and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def shrink_rate(self) -> float:
        return self.eta2 if self.eta_shrink is None else self.eta_shrink

    @property
    def floor(self) -> float:
        return 4.0 * self.shrink_rate if self.omega_floor is None else self.omega_floor

    def batch_for(self, n: int) -> int:
        if self.batch_size == "full":
            return n
        if self.batch_size is None:
            return min(32, n)
        return min(int(self.batch_size), n)


@dataclass
class Hm1Server:
    Theta: np.ndarray
    Omega: np.ndarray


def local_sgd(theta, device: DeviceDataset, steps: int, eta2: float, batch: int, rng) -> np.ndarray:
    """``steps`` SGD steps over batches cut from a fresh permutation of the rows."""
    n = device.n
    perm = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch > n:
            perm = rng.permutation(n)
            pos = 0
        idx = perm[pos:pos + batch]
        pos += batch
        theta = local_sgd_step(theta, device.X[:, idx], device.Y[idx], eta2)
    return theta


class Hm1Algorithm(FedAlgorithm):
    name = "hm1"
    broadcast_message = Hm1Broadcast
    upload_message = ParamUpload

    def __init__(self, config: Hm1Config | None = None):
        self.config = config or Hm1Config()

    def hyper_parameters(self) -> dict:
        c = self.config
        return {
            "eta2": c.eta2,
            "eta_shrink": c.shrink_rate,
            "alpha": c.alpha,
            "local_steps": c.local_steps,
            "batch_size": c.batch_size if c.batch_size is not None else "min(32,N)",
            "omega_floor": c.floor,
            "init_scale": c.init_scale,
            "fixed_omega": c.fixed_omega is not None,
        }

    def init_server(self, data: FederatedDataset, rng) -> Hm1Server:
        Theta = self.config.init_scale * rng.standard_normal((data.d, data.K))
        if self.config.fixed_omega is not None:
            Omega = np.array(self.config.fixed_omega, dtype=float)
        else:
            Omega = np.eye(data.K)
        return Hm1Server(Theta, Omega)

    def broadcast(self, server: Hm1Server, participants):
        agg = server.Theta @ _omega_inverse(server.Omega)
        return {k: Hm1Broadcast(server.Theta[:, k].copy(), agg[:, k].copy()) for k in participants}

    def device_update(self, index, state, device, payload: Hm1Broadcast, rng):
        c = self.config
        theta = local_sgd(payload.theta, device, c.local_steps, c.eta2, c.batch_for(device.n), rng)
        theta = prior_shrinkage(theta, payload.aggregate, c.shrink_rate)
        return theta, ParamUpload(theta)

    def aggregate(self, server: Hm1Server, uploads, round_index) -> Hm1Server:
        Theta = server.Theta.copy()
        for k, up in uploads.items():
            Theta[:, k] = up.theta
        if self.config.fixed_omega is not None:
            return Hm1Server(Theta, server.Omega)
        Omega = update_omega(server.Omega, Theta, self.config.alpha, floor=self.config.floor)
        return Hm1Server(Theta, Omega)

    def monitors(self, server: Hm1Server, device_states, data: FederatedDataset) -> dict:
        out = {"objective": hm1_objective(server.Theta, server.Omega, data.devices)}
        if data.true_theta is not None:
            out["param_error"] = param_error(server.Theta, data.true_theta)
        out["omega_min_eig"] = float(np.linalg.eigvalsh(server.Omega)[0])
        return out
