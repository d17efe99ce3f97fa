"""Synchronous round-based federation simulator.

One server and ``K`` devices exchange typed messages.  Every message is a
frozen dataclass whose array fields must have parameter-space shapes, which
is checked on every transfer; raw observations never leave a device.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from .datasets import DeviceDataset, FederatedDataset
from .seeding import stream

__all__ = [
    "RoundConfig",
    "RoundError",
    "PrivacyViolation",
    "FedAlgorithm",
    "RunManifest",
    "RunResult",
    "OBSERVATION_FIELD_NAMES",
    "audit_message",
    "audit_message_type",
    "sample_participants",
    "run_rounds",
]

OBSERVATION_FIELD_NAMES = frozenset(
    {"x", "y", "X", "Y", "data", "dataset", "observations", "inputs", "targets", "features", "rows"}
)


class RoundError(RuntimeError):
    """A device update failed or produced unusable values."""


class PrivacyViolation(RuntimeError):
    """A message could carry raw observations."""


@dataclass(frozen=True)
class RoundConfig:
    rounds: int
    local_steps: int = 1
    participation: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.local_steps < 1:
            raise ValueError("local_steps must be at least 1")
        if self.participation is not None and self.participation < 1:
            raise ValueError("participation subset size must be at least 1")


def sample_participants(K: int, participation: int | None, round_index: int, seed: int) -> list[int]:
    """Device indices (0-based, sorted) taking part in ``round_index``.

    Subsets are uniform without replacement, drawn from a stream keyed by
    ``(seed, round_index)`` only.
    """
    if participation is None or participation == K:
        if participation is not None and participation > K:
            raise ValueError(f"subset size {participation} exceeds K={K}")
        return list(range(K))
    if participation > K:
        raise ValueError(f"subset size {participation} exceeds K={K}")
    rng = stream(seed, "participants", round_index)
    return sorted(rng.choice(K, size=participation, replace=False).tolist())


def audit_message_type(cls) -> None:
    """Reject message schemas with observation-like field names."""
    if not dataclasses.is_dataclass(cls):
        raise PrivacyViolation(f"{cls.__name__} is not a dataclass message")
    for f in dataclasses.fields(cls):
        if f.name in OBSERVATION_FIELD_NAMES:
            raise PrivacyViolation(f"{cls.__name__}.{f.name} looks like raw data")


def audit_message(msg, allowed_shapes: Iterable[tuple]) -> None:
    """Check every field holds a scalar or a parameter-shaped array."""
    allowed = set(map(tuple, allowed_shapes))
    audit_message_type(type(msg))
    for f in dataclasses.fields(msg):
        v = getattr(msg, f.name)
        if isinstance(v, (bool, int, float, np.integer, np.floating)) or v is None:
            continue
        if isinstance(v, np.ndarray):
            if v.shape not in allowed:
                raise PrivacyViolation(
                    f"{type(msg).__name__}.{f.name} has shape {v.shape}, not a parameter shape"
                )
            continue
        raise PrivacyViolation(f"{type(msg).__name__}.{f.name} has unsupported type {type(v).__name__}")


def _finite(msg) -> bool:
    for f in dataclasses.fields(msg):
        v = getattr(msg, f.name)
        if isinstance(v, (np.ndarray, float, np.floating)) and not np.all(np.isfinite(v)):
            return False
    return True


class FedAlgorithm(ABC):
    """Server/device callbacks for one federated algorithm.

    Subclasses set ``broadcast_message`` and ``upload_message`` to the
    dataclasses they exchange and report the admissible array shapes via
    :meth:`param_shapes`.
    """

    name = "abstract"
    broadcast_message: type = None
    upload_message: type = None

    def hyper_parameters(self) -> dict:
        return {}

    def param_shapes(self, data: FederatedDataset) -> set[tuple]:
        return {(data.d,)}

    @abstractmethod
    def init_server(self, data: FederatedDataset, rng: np.random.Generator) -> Any: ...

    def init_device(self, index: int, device: DeviceDataset) -> Any:
        return None

    @abstractmethod
    def broadcast(self, server, participants: list[int]) -> dict[int, Any]: ...

    @abstractmethod
    def device_update(self, index: int, state, device: DeviceDataset, payload, rng: np.random.Generator):
        """Return ``(new_device_state, upload_message)``."""

    @abstractmethod
    def aggregate(self, server, uploads: dict[int, Any], round_index: int) -> Any: ...

    def monitors(self, server, device_states: list, data: FederatedDataset) -> dict[str, float]:
        return {}

    def round_events(self, uploads: dict[int, Any], data: FederatedDataset, server=None) -> list[str]:
        """Notable per-round events (skipped devices, warnings) for the manifest.

        Called after aggregation; ``server`` is the new server state.
        """
        return []


@dataclass
class RunManifest:
    algorithm_id: str
    case_id: str | None
    seed: int
    hyper_parameters: dict
    per_round: list[dict] = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _clean(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def monitor_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "name", "value"])
        for entry in self.per_round:
            for name in sorted(entry.get("monitors", {})):
                w.writerow([entry["round"], name, repr(float(entry["monitors"][name]))])
        return buf.getvalue()


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


@dataclass
class RunResult:
    server: Any
    devices: list
    manifest: RunManifest


def run_rounds(
    alg: FedAlgorithm,
    data: FederatedDataset,
    cfg: RoundConfig,
    monitor: bool = True,
    executor=None,
) -> RunResult:
    """Run ``cfg.rounds`` rounds of broadcast, local update and aggregation.

    ``data`` should hold training rows only.  ``executor`` (anything with a
    ``map`` method) may run the device updates of one round in parallel;
    each device draws from its own ``(seed, device, round)`` stream so the
    result does not depend on scheduling.
    """
    if data.K < 1:
        raise ValueError("no devices")
    K = data.K
    shapes = alg.param_shapes(data)
    for cls in (alg.broadcast_message, alg.upload_message):
        audit_message_type(cls)
    server = alg.init_server(data, stream(cfg.seed, "init", alg.name))
    devices = [alg.init_device(k, dev) for k, dev in enumerate(data.devices)]
    manifest = RunManifest(
        algorithm_id=alg.name,
        case_id=data.meta.get("case_id"),
        seed=cfg.seed,
        hyper_parameters={**alg.hyper_parameters(), "rounds": cfg.rounds,
                          "participation": cfg.participation or "full"},
    )
    for c in range(cfg.rounds):
        participants = sample_participants(K, cfg.participation, c, cfg.seed)
        payloads = alg.broadcast(server, participants)
        for k in participants:
            audit_message(payloads[k], shapes)

        def work(k):
            dev = data.devices[k]
            rng = stream(cfg.seed, "device", dev.device_id, c)
            try:
                return alg.device_update(k, devices[k], dev, payloads[k], rng)
            except Exception as exc:  # noqa: BLE001 - re-raised with context
                raise RoundError(f"device {dev.device_id} failed in round {c}: {exc}") from exc

        mapper = executor.map if executor is not None else map
        results = list(mapper(work, participants))
        uploads = {}
        for k, (state, up) in zip(participants, results):
            audit_message(up, shapes)
            if not _finite(up):
                raise RoundError(
                    f"non-finite upload from device {data.devices[k].device_id} in round {c}"
                )
            devices[k] = state
            uploads[k] = up
        server = alg.aggregate(server, uploads, c)
        events = alg.round_events(uploads, data, server)
        entry = {"round": c, "participants": [data.devices[k].device_id for k in participants]}
        if monitor:
            entry["monitors"] = {k: float(v) for k, v in alg.monitors(server, devices, data).items()}
        if events:
            entry["events"] = events
        manifest.per_round.append(entry)
    return RunResult(server, devices, manifest)
