"""Hierarchical model kinds over global hyper-parameters ``phi``.

Every kind ties device parameters ``theta_k`` to a global ``phi`` that lives
on a transformed scale (positive quantities enter as logs) so that Gaussian
approximations of ``phi`` are meaningful.  The per-device factor

    f_k(phi) = integral of p(Y_k | theta, phi) p(theta | phi) d theta

is exact for the Gaussian-prior kinds and estimated by importance sampling
for the Laplace kind.  All computations use the sufficient statistics
``X X^T``, ``X Y``, ``Y^T Y`` and ``N`` of a device.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg, optimize
from scipy.special import logsumexp

from .datasets import DeviceDataset
from .gaussian import NaturalGaussian

__all__ = [
    "KINDS",
    "GAUSSIAN_KINDS",
    "HyperBlock",
    "HyperLayout",
    "HierModelSpec",
    "DeviceStats",
    "make_spec",
    "log_marginal_gaussian",
    "log_marginal_laplace",
    "log_factor",
    "prior_moments",
    "plugin_noise_var",
]

KINDS = ("meanFieldNormal", "lassoLaplace", "ridgeNormal", "uqModel")
GAUSSIAN_KINDS = ("meanFieldNormal", "ridgeNormal", "uqModel")
_LOG_CLIP = 60.0
LOG_2PI = float(np.log(2 * np.pi))


@dataclass(frozen=True)
class HyperBlock:
    name: str
    length: int
    transform: str = "identity"

    def __post_init__(self):
        if self.length < 1:
            raise ValueError(f"block {self.name!r} must have positive length")
        if self.transform not in ("identity", "log"):
            raise ValueError(f"unknown transform {self.transform!r}")


@dataclass(frozen=True)
class HyperLayout:
    """Ordered named blocks of the transformed hyper-parameter vector."""

    blocks: tuple[HyperBlock, ...]

    def __post_init__(self):
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ValueError("duplicate block names")
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @property
    def total_dim(self) -> int:
        return sum(b.length for b in self.blocks)

    def slice(self, name: str) -> slice:
        start = 0
        for b in self.blocks:
            if b.name == name:
                return slice(start, start + b.length)
            start += b.length
        raise KeyError(name)

    def labels(self) -> list[str]:
        out = []
        for b in self.blocks:
            prefix = f"log_{b.name}" if b.transform == "log" else b.name
            out.extend(f"{prefix}[{i}]" for i in range(b.length))
        return out

    def to_model(self, phi) -> dict[str, np.ndarray]:
        """Model-scale values per block (``exp`` applied to log blocks)."""
        phi = np.asarray(phi, dtype=float)
        out = {}
        for b in self.blocks:
            v = phi[..., self.slice(b.name)]
            out[b.name] = np.exp(np.clip(v, -_LOG_CLIP, _LOG_CLIP)) if b.transform == "log" else v
        return out

    def from_model(self, **values) -> np.ndarray:
        """Transformed vector from model-scale block values."""
        missing = {b.name for b in self.blocks} - set(values)
        if missing:
            raise KeyError(f"missing blocks {sorted(missing)}")
        parts = []
        for b in self.blocks:
            v = np.broadcast_to(np.asarray(values[b.name], dtype=float), (b.length,))
            if b.transform == "log":
                if np.any(v <= 0):
                    raise ValueError(f"block {b.name!r} must be positive on the model scale")
                v = np.log(v)
            parts.append(v)
        return np.concatenate(parts)


@dataclass(frozen=True)
class HierModelSpec:
    """One hierarchical model: kind, layout, prior on ``phi`` and noise handling.

    ``noise_var`` applies to the mean-field kinds, where the observation
    noise is device-local: ``"plugin"`` uses the residual variance of a
    local least-squares fit, a positive number fixes it.  The penalized
    kinds carry ``log sigma^2`` inside ``phi``.  ``theta_draws`` is the
    Monte Carlo size of the Laplace marginal estimator.
    """

    kind: str
    d: int
    layout: HyperLayout
    prior: NaturalGaussian
    noise_var: str | float = "plugin"
    theta_draws: int = 2048

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.prior.dim != self.layout.total_dim:
            raise ValueError("prior dimension does not match the layout")
        if not self.prior.is_proper():
            raise ValueError("prior on phi must be proper")
        expected = _layout_for(self.kind, self.d)
        if expected != self.layout:
            raise ValueError(f"layout inconsistent with kind {self.kind!r}")
        if isinstance(self.noise_var, str):
            if self.noise_var != "plugin":
                raise ValueError("noise_var must be 'plugin' or a positive number")
        elif not self.noise_var > 0:
            raise ValueError("noise_var must be positive")
        if self.theta_draws < 2:
            raise ValueError("theta_draws must be at least 2")

    @property
    def dim(self) -> int:
        return self.layout.total_dim

    @property
    def gaussian_prior(self) -> bool:
        return self.kind in GAUSSIAN_KINDS


def _layout_for(kind: str, d: int) -> HyperLayout:
    if kind in ("meanFieldNormal", "uqModel"):
        return HyperLayout((HyperBlock("mu", d), HyperBlock("tau", d, "log")))
    return HyperLayout((HyperBlock("lambda", 1, "log"), HyperBlock("sigma2", 1, "log")))


def make_spec(
    kind: str,
    d: int,
    prior_mean=None,
    prior_sd=None,
    noise_var: str | float = "plugin",
    theta_draws: int = 2048,
) -> HierModelSpec:
    """Spec with a diagonal Gaussian prior on the transformed ``phi``.

    Defaults: ``mu ~ N(0, I)`` and ``log tau_i ~ N(0, 1)`` for the
    mean-field kinds; ``log lambda ~ N(0, 3^2)`` and ``log sigma^2 ~
    N(0, 3^2)`` for the penalized kinds.
    """
    layout = _layout_for(kind, d)
    D = layout.total_dim
    if prior_mean is None:
        prior_mean = np.zeros(D)
    if prior_sd is None:
        prior_sd = np.ones(D) if kind in ("meanFieldNormal", "uqModel") else np.full(D, 3.0)
    mean = np.broadcast_to(np.asarray(prior_mean, float), (D,))
    sd = np.broadcast_to(np.asarray(prior_sd, float), (D,))
    prior = NaturalGaussian.from_moments(mean, np.diag(sd**2))
    return HierModelSpec(kind, d, layout, prior, noise_var, theta_draws)


@dataclass(frozen=True)
class DeviceStats:
    """Sufficient statistics of one device."""

    A: np.ndarray
    b: np.ndarray
    yy: float
    n: int
    device_id: str = ""

    @classmethod
    def of(cls, data) -> "DeviceStats":
        if isinstance(data, DeviceStats):
            return data
        X, Y = data.X, data.Y
        return cls(X @ X.T, X @ Y, float(Y @ Y), int(Y.size), getattr(data, "device_id", ""))

    @property
    def d(self) -> int:
        return self.b.size

    def least_squares(self) -> tuple[np.ndarray, float]:
        """Minimum-norm least-squares fit and its residual sum of squares."""
        if self.n == 0:
            return np.zeros(self.d), 0.0
        theta, *_ = np.linalg.lstsq(self.A, self.b, rcond=None)
        rss = max(self.yy - float(theta @ self.b), 0.0)
        return theta, rss


def plugin_noise_var(stats: DeviceStats) -> float:
    """Residual variance ``RSS / (N - d)`` of the local least-squares fit."""
    if stats.n <= stats.d:
        raise ValueError(
            f"device {stats.device_id}: plug-in noise variance needs more than d={stats.d} "
            f"observations (has {stats.n}); set noise_var explicitly"
        )
    _, rss = stats.least_squares()
    return max(rss / (stats.n - stats.d), 1e-12)


def _noise_var(spec: HierModelSpec, stats: DeviceStats) -> float:
    if spec.noise_var == "plugin":
        return plugin_noise_var(stats)
    return float(spec.noise_var)


def prior_moments(phi, spec: HierModelSpec, stats: DeviceStats | None = None):
    """``(mean, variance, noise variance)`` of ``theta | phi`` for Gaussian kinds.

    Arrays are batched over the leading axis of ``phi``; variances are
    per-coefficient (the prior covariance is diagonal).
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    vals = spec.layout.to_model(phi)
    M = phi.shape[0]
    if spec.kind in ("meanFieldNormal", "uqModel"):
        s2 = _noise_var(spec, stats) if stats is not None else float("nan")
        return vals["mu"], vals["tau"], np.full(M, s2)
    if spec.kind == "ridgeNormal":
        s2 = vals["sigma2"][:, 0]
        lam = vals["lambda"][:, 0]
        v = np.repeat((s2 / lam**2)[:, None], spec.d, axis=1)
        return np.zeros((M, spec.d)), v, s2
    raise ValueError(f"kind {spec.kind!r} has no Gaussian theta prior")


def log_marginal_gaussian(phi, data, spec: HierModelSpec) -> np.ndarray | float:
    """Exact ``log N(Y; X^T m, s2 I + X^T diag(v) X)`` for transformed ``phi``.

    ``phi`` is one transformed vector or a batch of them (rows); the
    model-scale values come from ``spec.layout.to_model``.  The
    ``N x N`` covariance is never formed: determinant and quadratic form
    go through the ``d x d`` matrix ``diag(1/v) + X X^T / s2``.
    """
    if not spec.gaussian_prior:
        raise ValueError(f"kind {spec.kind!r} has no Gaussian theta prior")
    single = np.asarray(phi).ndim == 1
    stats = DeviceStats.of(data)
    if stats.n == 0:
        out = np.zeros(np.atleast_2d(phi).shape[0])
        return float(out[0]) if single else out
    m, v, s2 = prior_moments(phi, spec, stats)
    d = spec.d
    P = stats.A[None] / s2[:, None, None] + np.einsum("mi,ij->mij", 1.0 / v, np.eye(d))
    L = _batched_cholesky(P, phi)
    rr = stats.yy - 2.0 * m @ stats.b + np.einsum("mi,ij,mj->m", m, stats.A, m)
    xr = stats.b[None] - m @ stats.A
    z = np.linalg.solve(L, xr[..., None])[..., 0]
    logdetP = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    logdet = stats.n * np.log(s2) + np.sum(np.log(v), axis=1) + logdetP
    quad = rr / s2 - np.sum(z * z, axis=1) / s2**2
    out = -0.5 * (stats.n * LOG_2PI + logdet + quad)
    return float(out[0]) if single else out


def _batched_cholesky(P, phi):
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(P)
    for i, p in enumerate(P):
        j = 1e-10 * max(1.0, float(np.trace(p)) / p.shape[0])
        for _ in range(21):
            try:
                out[i] = np.linalg.cholesky(p + j * np.eye(p.shape[0]))
                break
            except np.linalg.LinAlgError:
                j *= 2.0
        else:
            raise np.linalg.LinAlgError(
                f"marginal covariance not positive definite at phi={np.atleast_2d(phi)[i]}"
            )
    return out


@dataclass(frozen=True)
class _LaplaceDraws:
    """Common random numbers for the Laplace marginal estimator."""

    Z: np.ndarray  # standard normal, proposal around the least-squares fit
    E: np.ndarray  # standard Laplace, prior draws
    W: np.ndarray = field(repr=False)
    qW_A: np.ndarray = field(repr=False)
    zz: np.ndarray = field(repr=False)
    eAe: np.ndarray = field(repr=False)
    eAt: np.ndarray = field(repr=False)
    eRe: np.ndarray = field(repr=False)
    eRt: np.ndarray = field(repr=False)


def _laplace_setup(stats: DeviceStats, draws: int, rng):
    d = stats.d
    theta_hat, rss = stats.least_squares()
    tr = float(np.trace(stats.A)) / d
    eps = 1e-6 * tr if tr > 0 else 1.0
    Areg = stats.A + eps * np.eye(d)
    Lr = linalg.cholesky(Areg, lower=True)
    h1 = draws // 2
    h2 = draws - h1
    Z = rng.standard_normal((h1, d))
    E = rng.laplace(size=(h2, d))
    # theta = theta_hat + sigma * W with W ~ N(0, Areg^{-1})
    W = linalg.solve_triangular(Lr.T, Z.T, lower=False).T
    draws_ = _LaplaceDraws(
        Z=Z,
        E=E,
        W=W,
        qW_A=np.einsum("ni,ij,nj->n", W, stats.A, W),
        zz=np.sum(Z * Z, axis=1),
        eAe=np.einsum("ni,ij,nj->n", E, stats.A, E),
        eAt=E @ (stats.A @ theta_hat),
        eRe=np.einsum("ni,ij,nj->n", E, Areg, E),
        eRt=E @ (Areg @ theta_hat),
    )
    consts = {
        "theta_hat": theta_hat,
        "rss": rss,
        "tAt": float(theta_hat @ stats.A @ theta_hat),
        "tRt": float(theta_hat @ Areg @ theta_hat),
        "logdet_reg": 2.0 * float(np.sum(np.log(np.diag(Lr)))),
    }
    return draws_, consts


def log_marginal_laplace(phi, data, spec: HierModelSpec, rng=None, draws: int | None = None):
    """Monte Carlo ``log f_k(phi)`` for Laplace priors ``theta_i ~ Laplace(0, sigma/lambda)``.

    Half of the draws come from the prior ``p(theta | phi)`` and half from a
    Gaussian shaped like the likelihood, ``N(theta_ls, sigma^2 (X X^T)^{-1})``;
    the estimator is the importance-weighted mean of the likelihood under
    this defensive mixture.  Prior draws alone are hopeless when the data
    are informative; the mixture keeps the weights bounded by twice the
    prior-only weights.  The same base draws are reused for every row of
    ``phi``, so differences across ``phi`` carry little Monte Carlo noise.
    """
    if spec.kind != "lassoLaplace":
        raise ValueError("log_marginal_laplace requires the lassoLaplace kind")
    rng = np.random.default_rng() if rng is None else rng
    single = np.asarray(phi).ndim == 1
    phi2 = np.atleast_2d(np.asarray(phi, dtype=float))
    stats = DeviceStats.of(data)
    if stats.n == 0:
        out = np.zeros(phi2.shape[0])
        return float(out[0]) if single else out
    n_draws = spec.theta_draws if draws is None else int(draws)
    D, c = _laplace_setup(stats, n_draws, rng)
    vals = spec.layout.to_model(phi2)
    lam = vals["lambda"][:, 0]
    s2 = vals["sigma2"][:, 0]
    sig = np.sqrt(s2)
    d, N = stats.d, stats.n
    n_total = D.Z.shape[0] + D.E.shape[0]

    loglik_const = -0.5 * N * (LOG_2PI + np.log(s2)) - c["rss"] / (2 * s2)
    logprior_const = d * np.log(lam / (2 * sig))
    logg_const = -0.5 * d * (LOG_2PI + np.log(s2)) + 0.5 * c["logdet_reg"]

    # draws around the least-squares fit: theta = theta_hat + sig * W
    absum = np.abs(c["theta_hat"][None, None, :] + sig[:, None, None] * D.W[None]).sum(axis=2)
    lp1 = logprior_const[:, None] - (lam / sig)[:, None] * absum
    ll1 = loglik_const[:, None] - 0.5 * D.qW_A[None]
    lg1 = logg_const[:, None] - 0.5 * D.zz[None]

    # prior draws: theta = (sig / lam) * E, offset u = theta - theta_hat
    lp2 = logprior_const[:, None] - np.sum(np.abs(D.E), axis=1)[None]
    a = 1.0 / lam[:, None]
    qA = (a**2 * D.eAe[None] - 2 * a * D.eAt[None] / sig[:, None] + c["tAt"] / s2[:, None])
    qR = (a**2 * D.eRe[None] - 2 * a * D.eRt[None] / sig[:, None] + c["tRt"] / s2[:, None])
    ll2 = loglik_const[:, None] - 0.5 * np.maximum(qA, 0.0)
    lg2 = logg_const[:, None] - 0.5 * np.maximum(qR, 0.0)

    lp = np.concatenate([lp1, lp2], axis=1)
    ll = np.concatenate([ll1, ll2], axis=1)
    lg = np.concatenate([lg1, lg2], axis=1)
    lmix = np.logaddexp(lg, lp) - np.log(2.0)
    logw = ll + lp - lmix
    if not np.all(np.any(np.isfinite(logw), axis=1)):
        bad = np.where(~np.any(np.isfinite(logw), axis=1))[0][0]
        raise FloatingPointError(f"all importance weights vanished at phi={phi2[bad]}")
    out = logsumexp(logw, axis=1) - np.log(n_total)
    return float(out[0]) if single else out


LogFactor = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def log_factor(spec: HierModelSpec, data) -> LogFactor:
    """``phi -> log f_k(phi)`` closure over one device's sufficient statistics."""
    stats = DeviceStats.of(data)
    if spec.gaussian_prior:
        if spec.kind in ("meanFieldNormal", "uqModel") and stats.n > 0:
            _noise_var(spec, stats)  # fail early when the plug-in is unavailable
        return lambda phi, rng: log_marginal_gaussian(phi, stats, spec)
    return lambda phi, rng: log_marginal_laplace(phi, stats, spec, rng)


def type2_noise_var(phi, data, spec: HierModelSpec) -> float:
    """Noise variance maximizing the exact marginal likelihood at fixed ``phi``."""
    stats = DeviceStats.of(data)

    def nll(log_s2):
        tmp = HierModelSpec(spec.kind, spec.d, spec.layout, spec.prior, float(np.exp(log_s2)))
        return -log_marginal_gaussian(phi, stats, tmp)

    res = optimize.minimize_scalar(nll, bounds=(-20.0, 10.0), method="bounded")
    return float(np.exp(res.x))
