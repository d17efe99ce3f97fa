"""Device-level posterior inference given the global approximation.

After federated EP, device ``k`` samples ``(theta_k, phi)`` from

    q_{-k}(phi) p(Y_k | theta_k, phi) p(theta_k | phi)

with an adaptive random-walk Metropolis chain and keeps the ``theta``
columns.  Credible intervals from those draws drive variable selection.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .gaussian import MomentGaussian, NaturalGaussian
from .models import DeviceStats, HierModelSpec, _noise_var, type2_noise_var

__all__ = [
    "ChainResult",
    "ThetaPosterior",
    "adaptive_rwm",
    "device_log_target",
    "device_posterior_sample",
    "sample_devices",
    "credible_interval",
    "select_variables",
    "adapt_new_device",
    "export_posterior_samples",
]

ACCEPT_RANGE = (0.05, 0.7)


@dataclass
class ChainResult:
    """Post burn-in draws, one row per iteration (``theta`` columns first)."""

    samples: np.ndarray
    acceptance: float
    warning: str | None = None

    def theta(self, d: int) -> np.ndarray:
        return self.samples[:, :d]


def adaptive_rwm(
    log_target: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    cov0: np.ndarray,
    draws: int,
    burn_in: int,
    rng: np.random.Generator,
    adapt_start: int = 500,
    adapt_every: int = 50,
) -> tuple[np.ndarray, np.ndarray]:
    """Adaptive Metropolis (Haario et al.) on ``C`` independent chains at once.

    ``x0`` has shape ``(C, D)`` and ``cov0`` shape ``(C, D, D)``.  During
    burn-in the proposal covariance becomes ``2.38^2 / D`` times the
    running covariance of the chain; after burn-in it is frozen, so the
    returned draws come from a fixed Metropolis kernel.

    Returns the draws ``(C, draws, D)`` and acceptance rates ``(C,)``
    measured after burn-in.
    """
    x = np.array(x0, dtype=float)
    C, D = x.shape
    sd = 2.38**2 / D
    L = np.linalg.cholesky(cov0)
    lp = log_target(x)
    if not np.all(np.isfinite(lp)):
        raise ValueError("log target is not finite at the initial state")
    mean = x.copy()
    M2 = np.zeros((C, D, D))
    count = 1
    out = np.empty((C, draws, D))
    accepted = np.zeros(C)
    eye = np.eye(D)
    for it in range(burn_in + draws):
        prop = x + np.einsum("cij,cj->ci", L, rng.standard_normal((C, D)))
        lq = log_target(prop)
        accept = np.log(rng.random(C)) < lq - lp
        x = np.where(accept[:, None], prop, x)
        lp = np.where(accept, lq, lp)
        if it < burn_in:
            count += 1
            delta = x - mean
            mean += delta / count
            M2 += np.einsum("ci,cj->cij", delta, x - mean)
            if it >= adapt_start and it % adapt_every == 0:
                emp = M2 / (count - 1)
                scale = np.einsum("cii->c", emp) / D
                cov = sd * (emp + (1e-10 * scale + 1e-14)[:, None, None] * eye)
                try:
                    L = np.linalg.cholesky(cov)
                except np.linalg.LinAlgError:
                    pass
        else:
            out[:, it - burn_in] = x
            accepted += accept
    return out, accepted / max(draws, 1)


def _theta_prior_moments(spec: HierModelSpec, phi_vals: dict, s2):
    """Mean and per-coefficient variance of ``theta | phi``."""
    if spec.kind in ("meanFieldNormal", "uqModel"):
        return phi_vals["mu"], phi_vals["tau"]
    scale2 = phi_vals["sigma2"][..., :1] / phi_vals["lambda"][..., :1] ** 2
    var = scale2 if spec.kind == "ridgeNormal" else 2.0 * scale2
    return np.zeros(phi_vals["sigma2"].shape[:-1] + (spec.d,)), np.broadcast_to(
        var, phi_vals["sigma2"].shape[:-1] + (spec.d,)
    )


def device_log_target(spec: HierModelSpec, stats: list[DeviceStats], cavities: list[NaturalGaussian] | None,
                      fixed_phi: np.ndarray | None = None, noise_var=None):
    """Batched unnormalized log density over chains, one chain per device.

    The state is ``(theta, phi)`` unless ``fixed_phi`` is given, in which
    case it is ``theta`` alone.
    """
    d = spec.d
    C = len(stats)
    A = np.stack([s.A for s in stats])
    b = np.stack([s.b for s in stats])
    yy = np.array([s.yy for s in stats])
    n = np.array([s.n for s in stats], dtype=float)
    plugin = None
    if spec.kind in ("meanFieldNormal", "uqModel"):
        if noise_var is not None:
            plugin = np.broadcast_to(np.asarray(noise_var, float), (C,)).copy()
        else:
            plugin = np.array([_noise_var(spec, s) if s.n > 0 else 1.0 for s in stats])
    if fixed_phi is None:
        cm = [c.to_moments() for c in cavities]
        cav_mu = np.stack([m.mu for m in cm])
        cav_Q = np.stack([c.Q for c in cavities])

    def log_target(x):
        theta = x[:, :d]
        phi = np.broadcast_to(fixed_phi, (C, spec.dim)) if fixed_phi is not None else x[:, d:]
        vals = spec.layout.to_model(phi)
        s2 = plugin if plugin is not None else vals["sigma2"][:, 0]
        quad = yy - 2 * np.sum(theta * b, axis=1) + np.einsum("ci,cij,cj->c", theta, A, theta)
        ll = -0.5 * n * np.log(s2) - 0.5 * quad / s2
        if spec.kind == "lassoLaplace":
            lam, sig = vals["lambda"][:, 0], np.sqrt(vals["sigma2"][:, 0])
            lprior = d * np.log(lam / (2 * sig)) - (lam / sig) * np.sum(np.abs(theta), axis=1)
        else:
            m, v = _theta_prior_moments(spec, vals, s2)
            lprior = -0.5 * np.sum(np.log(v) + (theta - m) ** 2 / v, axis=1)
        out = ll + lprior
        if fixed_phi is None:
            dphi = phi - cav_mu
            out = out - 0.5 * np.einsum("ci,cij,cj->c", dphi, cav_Q, dphi)
        return np.where(np.isfinite(out), out, -np.inf)

    return log_target, plugin


def _initial_state(spec, stats, phi0, plugin):
    """Conditional posterior mean and covariance of ``theta`` at ``phi0``."""
    vals = spec.layout.to_model(phi0)
    s2 = plugin if plugin is not None else vals["sigma2"][:, 0]
    m, v = _theta_prior_moments(spec, vals, s2)
    xs, covs = [], []
    for c, st in enumerate(stats):
        P = st.A / s2[c] + np.diag(1.0 / v[c])
        cov = np.linalg.inv(P)
        cov = 0.5 * (cov + cov.T)
        xs.append(cov @ (st.b / s2[c] + m[c] / v[c]))
        covs.append(cov)
    return np.stack(xs), np.stack(covs)


def sample_devices(data, spec: HierModelSpec, cavities: list[NaturalGaussian], draws: int = 20000,
                   burn_in: int = 5000, rng=None, fixed_phi=None, noise_var=None) -> list[ChainResult]:
    """Joint ``(theta_k, phi)`` chains for several devices, run side by side."""
    rng = np.random.default_rng() if rng is None else rng
    stats = [DeviceStats.of(x) for x in data]
    if fixed_phi is None:
        for c in cavities:
            if not c.is_proper():
                raise ValueError("cavity must be proper for device posterior sampling")
        phi0 = np.stack([c.to_moments().mu for c in cavities])
        phi_cov = np.stack([c.to_moments().sigma for c in cavities])
    else:
        fixed_phi = np.asarray(fixed_phi, dtype=float)
        phi0 = np.broadcast_to(fixed_phi, (len(stats), spec.dim))
    log_target, plugin = device_log_target(spec, stats, cavities, fixed_phi, noise_var)
    th0, th_cov = _initial_state(spec, stats, phi0, plugin)
    d = spec.d
    if fixed_phi is None:
        D = d + spec.dim
        x0 = np.concatenate([th0, phi0], axis=1)
        cov0 = np.zeros((len(stats), D, D))
        cov0[:, :d, :d] = th_cov
        cov0[:, d:, d:] = phi_cov
    else:
        D = d
        x0, cov0 = th0, th_cov
    cov0 = (2.38**2 / D) * cov0 + 1e-12 * np.eye(D)
    out, acc = adaptive_rwm(log_target, x0, cov0, draws, burn_in, rng)
    results = []
    for c in range(len(stats)):
        warn = None
        if not ACCEPT_RANGE[0] <= acc[c] <= ACCEPT_RANGE[1]:
            warn = f"device {stats[c].device_id}: acceptance rate {acc[c]:.3f} outside {ACCEPT_RANGE}"
        results.append(ChainResult(out[c], float(acc[c]), warn))
    return results


def device_posterior_sample(data, spec: HierModelSpec, cav: NaturalGaussian, draws: int = 20000,
                            burn_in: int = 5000, rng=None) -> ChainResult:
    """Draws of ``(theta_k, phi)`` for one device; ``theta`` occupies the first ``d`` columns."""
    return sample_devices([data], spec, [cav], draws, burn_in, rng)[0]


def credible_interval(samples, level: float = 0.9) -> tuple:
    """Equal-tailed interval from empirical quantiles (linear interpolation).

    ``samples`` may be a vector or a ``(draws, p)`` matrix; in the latter
    case arrays of lower and upper bounds are returned.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    x = np.asarray(samples, dtype=float)
    if x.shape[0] < 100:
        raise ValueError(f"need at least 100 samples, got {x.shape[0]}")
    a = (1 - level) / 2
    lo, hi = np.quantile(x, [a, 1 - a], axis=0)
    if x.ndim == 1:
        return float(lo), float(hi)
    return lo, hi


def select_variables(samples, level: float = 0.9) -> np.ndarray:
    """Include a coefficient when its credible interval excludes zero."""
    lo, hi = credible_interval(np.atleast_2d(np.asarray(samples, float).T).T, level)
    return (np.atleast_1d(lo) > 0) | (np.atleast_1d(hi) < 0)


@dataclass
class ThetaPosterior:
    mean: np.ndarray
    cov: np.ndarray
    phi_hat: np.ndarray
    noise_var: float | None = None
    samples: np.ndarray | None = None


def adapt_new_device(q: NaturalGaussian, data, spec: HierModelSpec, noise_var: float | None = None,
                     rng=None, draws: int = 20000, burn_in: int = 5000) -> ThetaPosterior:
    """Posterior of a new device's ``theta`` with ``phi`` fixed at the mean of ``q``.

    Gaussian-prior kinds give the exact conjugate posterior.  For the
    mean-field kinds the noise variance is ``noise_var`` if given, the
    spec's fixed value otherwise, or, under the plug-in rule, the value
    that maximizes the device's marginal likelihood at ``phi_hat`` (the
    least-squares residual is useless on a handful of points).  The
    Laplace kind is sampled.
    """
    phi_hat = q.to_moments().mu
    stats = DeviceStats.of(data)
    vals = spec.layout.to_model(phi_hat[None])
    if spec.kind == "lassoLaplace":
        ch = sample_devices([stats], spec, [q], draws, burn_in, rng, fixed_phi=phi_hat)[0]
        th = ch.samples
        return ThetaPosterior(th.mean(axis=0), np.cov(th.T), phi_hat, float(vals["sigma2"][0, 0]), th)
    if spec.kind == "ridgeNormal":
        s2 = float(vals["sigma2"][0, 0])
    elif noise_var is not None:
        s2 = float(noise_var)
    elif spec.noise_var != "plugin":
        s2 = float(spec.noise_var)
    elif stats.n == 0:
        s2 = 1.0
    else:
        s2 = type2_noise_var(phi_hat, stats, spec)
    m, v = _theta_prior_moments(spec, vals, np.array([s2]))
    m, v = m[0], v[0]
    P = stats.A / s2 + np.diag(1.0 / v)
    cov = np.linalg.inv(P)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (stats.b / s2 + m / v)
    MomentGaussian(mean, cov)  # validates positive definiteness
    return ThetaPosterior(mean, cov, phi_hat, s2)


def export_posterior_samples(samples: dict[str, np.ndarray], path, names: list[str] | None = None) -> Path:
    """CSV with one column per (device, coefficient) and one row per draw."""
    if not samples:
        raise ValueError("no samples to export")
    lengths = {v.shape[0] for v in samples.values()}
    if len(lengths) != 1:
        raise ValueError("all devices must have the same number of draws")
    path = Path(path)
    cols, header = [], []
    for dev, s in samples.items():
        p = s.shape[1]
        labels = names if names is not None else [f"theta{i}" for i in range(p)]
        header.extend(f"{dev}:{lab}" for lab in labels)
        cols.append(s)
    table = np.concatenate(cols, axis=1)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in table:
            w.writerow([repr(float(v)) for v in row])
    return path
