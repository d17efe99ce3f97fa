"""Federated expectation propagation over global hyper-parameters.

The server holds ``q(phi) = p(phi) prod_k q_k(phi)`` in natural parameters.
Each round a participating device removes its site to form the cavity,
projects ``f_k(phi) * cavity(phi)`` onto a Gaussian by importance sampling,
and uploads the damped change ``eta * (q_new - q)``.  The server adds the
changes and keeps ``q = prior + sum of sites`` exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .datasets import FederatedDataset
from .gaussian import (
    ImproperDensityError,
    MomentGaussian,
    NaturalGaussian,
    gaussian_quotient,
    nearest_jitter_pd,
)
from .models import DeviceStats, HierModelSpec, log_factor
from .runtime import FedAlgorithm

__all__ = [
    "DegenerateTiltError",
    "EpAggregationError",
    "EpConfig",
    "EpState",
    "EpDeviceState",
    "EpBroadcast",
    "EpUpload",
    "EpAlgorithm",
    "TiltResult",
    "cavity",
    "tilted_project",
    "tilt",
    "site_delta",
    "server_aggregate",
    "reconcile_sites",
]

SKIP_NONE, SKIP_IMPROPER, SKIP_DEGENERATE = 0, 1, 2
_SKIP_TEXT = {SKIP_IMPROPER: "improper cavity", SKIP_DEGENERATE: "degenerate tilt"}


class DegenerateTiltError(RuntimeError):
    """Importance weights collapsed onto too few draws."""


class EpAggregationError(RuntimeError):
    """The global approximation stayed improper after rescaling the deltas."""


def cavity(q: NaturalGaussian, site: NaturalGaussian) -> tuple[NaturalGaussian, bool]:
    """``q / site`` and whether it is proper."""
    c = gaussian_quotient(q, site)
    return c, c.is_proper()


@dataclass(frozen=True)
class TiltResult:
    q_new: NaturalGaussian
    ess: float
    refinements: int


def _weighted_moments(x, w):
    mean = w @ x
    xc = x - mean
    cov = (w[:, None] * xc).T @ xc
    return mean, 0.5 * (cov + cov.T)


def _to_natural(mean, cov) -> NaturalGaussian:
    try:
        return NaturalGaussian.from_moments(mean, cov)
    except (ImproperDensityError, np.linalg.LinAlgError):
        scale = max(1e-12, float(np.trace(cov)) / cov.shape[0])
        return NaturalGaussian.from_moments(mean, nearest_jitter_pd(cov, 1e-10 * scale))


def _ess(logw) -> float:
    w = np.exp(logw - logsumexp(logw))
    return float(1.0 / np.sum(w * w))


def tilt(
    cav: NaturalGaussian,
    log_f: Callable[[np.ndarray, np.random.Generator], np.ndarray],
    draws: int,
    rng: np.random.Generator,
    ess_floor: float = 0.01,
    refine: int = 3,
    refine_below: float = 0.1,
) -> TiltResult:
    """Gaussian projection of ``f(phi) * cav(phi)`` by self-normalized importance sampling.

    The cavity is the first proposal.  When the weights are very uneven
    (effective sample size under ``refine_below * draws``) the proposal is
    replaced by the weighted Gaussian fit with doubled covariance, up to
    ``refine`` times.  With the cavity as proposal the cavity moments are
    also estimated from the same draws and the site is taken as the
    difference of the two estimates, which cancels most of the Monte
    Carlo noise when ``f`` is weak relative to the cavity.
    """
    if draws < 2:
        raise ValueError("draws must be at least 2")
    cm = cav.to_moments()
    prop = cm
    refinements = 0
    while True:
        phi = prop.sample(draws, rng)
        lf = np.asarray(log_f(phi, rng), dtype=float)
        if lf.shape != (draws,):
            raise ValueError(f"log factor returned shape {lf.shape}, expected {(draws,)}")
        lf = np.where(np.isnan(lf), -np.inf, lf)
        lcav_over_prop = 0.0 if prop is cm else cm.logpdf(phi) - prop.logpdf(phi)
        logw = lf + lcav_over_prop
        if not np.any(np.isfinite(logw)):
            raise DegenerateTiltError("all importance weights are zero")
        ess = _ess(logw)
        if ess >= refine_below * draws or refinements >= refine:
            break
        w = np.exp(logw - logsumexp(logw))
        mean, cov = _weighted_moments(phi, w)
        cov = 2.0 * cov + 1e-12 * np.eye(cav.dim)
        try:
            prop = MomentGaussian(mean, cov)
        except ImproperDensityError:
            prop = MomentGaussian(mean, nearest_jitter_pd(cov, 1e-10))
        refinements += 1
    if ess < ess_floor * draws:
        raise DegenerateTiltError(
            f"degenerate tilt: effective sample size {ess:.1f} of {draws} draws"
        )
    w = np.exp(logw - logsumexp(logw))
    tilted = _to_natural(*_weighted_moments(phi, w))
    if prop is cm:
        base = _to_natural(*_weighted_moments(phi, np.full(draws, 1.0 / draws)))
        q_new = NaturalGaussian(cav.r + tilted.r - base.r, cav.Q + tilted.Q - base.Q)
    else:
        q_new = tilted
    return TiltResult(q_new, ess, refinements)


def tilted_project(cav, spec_or_log_f, data=None, mc_draws: int = 2048, rng=None, **kw) -> NaturalGaussian:
    """Projection of ``f_k * cavity`` for a model spec and device, or a log-factor callable."""
    rng = np.random.default_rng() if rng is None else rng
    if isinstance(spec_or_log_f, HierModelSpec):
        if data is None:
            raise ValueError("a model spec needs device data")
        stats = DeviceStats.of(data)
        if stats.n == 0:
            return cav
        log_f = log_factor(spec_or_log_f, stats)
    else:
        log_f = spec_or_log_f
    if not cav.is_proper():
        raise ImproperDensityError("cavity is improper; skip this device")
    return tilt(cav, log_f, mc_draws, rng, **kw).q_new


def site_delta(q_new: NaturalGaussian, q: NaturalGaussian, damping: float) -> NaturalGaussian:
    """Damped change ``damping * (q_new - q)`` in natural parameters."""
    if not 0 < damping <= 1:
        raise ValueError(f"damping must lie in (0, 1], got {damping}")
    return gaussian_quotient(q_new, q).scaled(damping)


@dataclass
class EpState:
    """Server view: global approximation, prior and a mirror of every site."""

    q: NaturalGaussian
    prior: NaturalGaussian
    sites: list[NaturalGaussian]
    damping: float = 0.5
    pending_scale: list[float] = field(default_factory=list)
    last_scale: float = 1.0

    @classmethod
    def initial(cls, prior: NaturalGaussian, K: int, damping: float = 0.5) -> "EpState":
        return cls(prior, prior, [NaturalGaussian.zeros(prior.dim)] * K, damping, [1.0] * K)

    def bookkeeping_gap(self) -> float:
        r = self.prior.r + sum(s.r for s in self.sites)
        Q = self.prior.Q + sum(s.Q for s in self.sites)
        return float(max(np.max(np.abs(self.q.r - r)), np.max(np.abs(self.q.Q - Q))))


def _precision_retained(old: NaturalGaussian, new: NaturalGaussian) -> float:
    """Smallest generalized eigenvalue of ``new.Q`` relative to ``old.Q``."""
    try:
        return float(linalg.eigvalsh(new.Q, old.Q)[0])
    except (linalg.LinAlgError, ValueError):
        return -np.inf


def server_aggregate(state: EpState, deltas: dict[int, NaturalGaussian], max_halvings: int = 6,
                     min_retained: float = 0.5) -> EpState:
    """Add the deltas to the sites and rebuild ``q = prior + sum(sites)``.

    The deltas of this round are halved, up to ``max_halvings`` times,
    while the result is improper or keeps less than ``min_retained`` of the
    current precision in some direction.  The second rule guards parallel
    updates: many sites computed against the same cavity can each lose a
    little precision and jointly wipe it out.  After the last halving a
    proper result is accepted; an improper one is an error.  Sites are
    summed in device order, so the result does not depend on the order in
    which deltas arrived.
    """
    if not deltas:
        return state
    keys = sorted(deltas)
    scale = 1.0
    for attempt in range(max_halvings + 1):
        sites = list(state.sites)
        for k in keys:
            sites[k] = NaturalGaussian(sites[k].r + scale * deltas[k].r, sites[k].Q + scale * deltas[k].Q)
        r = state.prior.r + np.sum([s.r for s in sites], axis=0)
        Q = state.prior.Q + np.sum([s.Q for s in sites], axis=0)
        q = NaturalGaussian(r, Q)
        last = attempt == max_halvings
        if q.is_proper() and (last or _precision_retained(state.q, q) >= min_retained):
            pending = list(state.pending_scale)
            for k in keys:
                pending[k] = scale
            return EpState(q, state.prior, sites, state.damping, pending, scale)
        scale *= 0.5
    raise EpAggregationError(
        f"global approximation improper after {max_halvings} halvings "
        f"(smallest precision eigenvalue {q.min_eigenvalue():.3e})"
    )


@dataclass(frozen=True)
class EpConfig:
    damping: float = 0.5
    mc_draws: int = 2048
    ess_floor: float = 0.01
    max_halvings: int = 6
    min_retained: float = 0.5
    refine: int = 3

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.mc_draws < 16:
            raise ValueError("mc_draws must be at least 16")
        if not 0 <= self.ess_floor < 1:
            raise ValueError("ess_floor must lie in [0, 1)")
        if not 0 <= self.min_retained < 1:
            raise ValueError("min_retained must lie in [0, 1)")


@dataclass(frozen=True)
class EpBroadcast:
    r: np.ndarray
    Q: np.ndarray
    pending_scale: float


@dataclass(frozen=True)
class EpUpload:
    delta_r: np.ndarray
    delta_Q: np.ndarray
    status: int
    ess: float


@dataclass
class EpDeviceState:
    site: NaturalGaussian
    last_delta: NaturalGaussian | None = None


class EpAlgorithm(FedAlgorithm):
    """Synchronous federated EP on a :class:`HierModelSpec`."""

    name = "hm2-ep"
    broadcast_message = EpBroadcast
    upload_message = EpUpload

    def __init__(self, spec: HierModelSpec, config: EpConfig | None = None):
        self.spec = spec
        self.config = config or EpConfig()
        self._stats: dict[str, DeviceStats] = {}

    def hyper_parameters(self) -> dict:
        c = self.config
        return {
            "kind": self.spec.kind,
            "damping": c.damping,
            "mc_draws": c.mc_draws,
            "ess_floor": c.ess_floor,
            "min_retained": c.min_retained,
            "theta_draws": self.spec.theta_draws,
            "noise_var": self.spec.noise_var,
            "prior_mean": self.spec.prior.to_moments().mu,
            "prior_sd": np.sqrt(np.diag(self.spec.prior.to_moments().sigma)),
        }

    def param_shapes(self, data):
        D = self.spec.dim
        return {(D,), (D, D)}

    def init_server(self, data: FederatedDataset, rng) -> EpState:
        if data.d != self.spec.d:
            raise ValueError(f"spec has d={self.spec.d} but data has d={data.d}")
        return EpState.initial(self.spec.prior, data.K, self.config.damping)

    def init_device(self, index, device) -> EpDeviceState:
        self._stats[device.device_id] = DeviceStats.of(device)
        return EpDeviceState(NaturalGaussian.zeros(self.spec.dim))

    def broadcast(self, server: EpState, participants):
        return {
            k: EpBroadcast(server.q.r.copy(), server.q.Q.copy(), float(server.pending_scale[k]))
            for k in participants
        }

    def device_update(self, index, state: EpDeviceState, device, payload: EpBroadcast, rng):
        site = state.site
        if payload.pending_scale != 1.0 and state.last_delta is not None:
            site = NaturalGaussian(
                site.r - (1.0 - payload.pending_scale) * state.last_delta.r,
                site.Q - (1.0 - payload.pending_scale) * state.last_delta.Q,
            )
        q = NaturalGaussian(payload.r, payload.Q)
        D = self.spec.dim
        zero = EpUpload(np.zeros(D), np.zeros((D, D)), SKIP_NONE, 0.0)
        cav, proper = cavity(q, site)
        if not proper:
            return EpDeviceState(site, None), EpUpload(zero.delta_r, zero.delta_Q, SKIP_IMPROPER, 0.0)
        stats = self._stats.get(device.device_id) or DeviceStats.of(device)
        try:
            res = tilt(cav, log_factor(self.spec, stats), self.config.mc_draws, rng,
                       self.config.ess_floor, self.config.refine)
        except DegenerateTiltError:
            return EpDeviceState(site, None), EpUpload(zero.delta_r, zero.delta_Q, SKIP_DEGENERATE, 0.0)
        delta = site_delta(res.q_new, q, self.config.damping)
        new_site = NaturalGaussian(site.r + delta.r, site.Q + delta.Q)
        return EpDeviceState(new_site, delta), EpUpload(
            delta.r, delta.Q, SKIP_NONE, res.ess / self.config.mc_draws
        )

    def aggregate(self, server: EpState, uploads, round_index) -> EpState:
        deltas = {k: NaturalGaussian(u.delta_r, u.delta_Q) for k, u in uploads.items()
                  if u.status == SKIP_NONE}
        new = server_aggregate(server, deltas, self.config.max_halvings, self.config.min_retained)
        pending = list(new.pending_scale)
        for k, u in uploads.items():
            if u.status != SKIP_NONE:
                pending[k] = 1.0
        new.pending_scale = pending
        return new

    def round_events(self, uploads, data, server=None) -> list[str]:
        events = [
            f"device {data.devices[k].device_id} skipped: {_SKIP_TEXT[u.status]}"
            for k, u in sorted(uploads.items()) if u.status != SKIP_NONE
        ]
        if server is not None and server.last_scale < 1.0:
            events.append(f"deltas scaled by {server.last_scale:g} to keep q proper and stable")
        return events

    def monitors(self, server: EpState, device_states, data) -> dict:
        m = server.q.to_moments()
        labels = self.spec.layout.labels()
        out = {f"phi_mean.{lab}": float(v) for lab, v in zip(labels, m.mu)}
        out.update({f"phi_sd.{lab}": float(v) for lab, v in zip(labels, np.sqrt(np.diag(m.sigma)))})
        return out


def reconcile_sites(device_states: list[EpDeviceState], server: EpState) -> list[NaturalGaussian]:
    """Device sites after applying scale corrections still pending on the server."""
    out = []
    for st, s in zip(device_states, server.pending_scale):
        site = st.site
        if s != 1.0 and st.last_delta is not None:
            site = NaturalGaussian(site.r - (1 - s) * st.last_delta.r, site.Q - (1 - s) * st.last_delta.Q)
        out.append(site)
    return out
