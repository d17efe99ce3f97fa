"""Experiment configuration files.

A configuration is a single YAML (or JSON) document.  Every section is
validated, and every numeric hyper-parameter is checked against its
documented range, before any computation starts.  Unknown keys are
rejected so that a typo never silently falls back to a default.

Top-level keys::

    data:        where the devices come from (a synthetic case or a CSV file)
    algorithm:   id plus hyper-parameters
    rounds:      number of communication rounds and devices per round
    repeats:     number of independent seeded runs (seeds master_seed + i)
    master_seed: seed of the first run
    output_dir:  where files are written
    selection:   credible-interval settings (``select`` only)
    bench:       algorithms compared by ``bench``
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .baselines import BaselineConfig
from .datasets import (
    CASE_IDS,
    CsvSchema,
    FederatedDataset,
    SyntheticCaseSpec,
    cmapss_schema,
    gen_case,
    load_csv_federated,
    read_cmapss_txt,
    student_schema,
)
from .ep import EpConfig
from .hm1 import Hm1Config
from .models import KINDS, HierModelSpec, make_spec

__all__ = [
    "ConfigError",
    "DataConfig",
    "RoundsConfig",
    "SelectionConfig",
    "AlgorithmConfig",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "ALGORITHM_IDS",
    "ep_spec",
]

ALGORITHM_IDS = ("hm1", "fedAvg", "ditto", "separate", "centralLasso", "centralRidge", "ep")
BENCH_IDS = ("hm1", "fedAvg", "ditto", "separate")


class ConfigError(ValueError):
    """The configuration file is malformed or out of range."""


def _check_keys(section: Mapping, allowed, where: str) -> None:
    if not isinstance(section, Mapping):
        raise ConfigError(f"{where} must be a mapping, got {type(section).__name__}")
    bad = sorted(set(section) - set(allowed))
    if bad:
        raise ConfigError(f"unknown key{'s' if len(bad) > 1 else ''} in {where}: {', '.join(map(str, bad))}")


def _number(value, where: str, lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    if lo is not None and (value < lo or (lo_open and value == lo)):
        raise ConfigError(f"{where}={value} is below its allowed range")
    if hi is not None and (value > hi or (hi_open and value == hi)):
        raise ConfigError(f"{where}={value} is above its allowed range")
    return int(value) if integer else float(value)


def _batch(value, where: str):
    if value is None or value == "full":
        return value
    return _number(value, where, lo=1, integer=True)


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class DataConfig:
    """A synthetic case or a CSV source.

    CSV sources take a ``preset`` (``student`` or ``cmapss``) or explicit
    column names.  Relative paths are resolved against the directory of
    the configuration file.
    """

    case: str | None = None
    overrides: Mapping = field(default_factory=dict)
    path: Path | None = None
    file_format: str = "csv"
    schema: CsvSchema | None = None
    split: tuple = ("fraction", 0.6)
    validation: float = 0.0

    def load(self, seed: int) -> FederatedDataset:
        if self.case is not None:
            return gen_case(SyntheticCaseSpec(self.case, seed, dict(self.overrides)))
        source = read_cmapss_txt(self.path) if self.file_format == "cmapss" else self.path
        ds = load_csv_federated(source, self.schema, self.split, seed, self.validation)
        ds.meta["case_id"] = None
        return ds


_CSV_KEYS = {"path", "format", "preset", "device_column", "target_column", "time_column", "order",
             "dummy_encode", "drop", "standardize", "standardize_target", "split", "sensor"}


def _parse_data(sec, base: Path) -> DataConfig:
    _check_keys(sec, {"case", "overrides", "csv"}, "data")
    if ("case" in sec) == ("csv" in sec):
        raise ConfigError("data needs exactly one of 'case' or 'csv'")
    if "case" in sec:
        if sec["case"] not in CASE_IDS:
            raise ConfigError(f"data.case must be one of {', '.join(CASE_IDS)}")
        overrides = sec.get("overrides") or {}
        try:
            SyntheticCaseSpec(sec["case"], 0, dict(overrides))
        except ValueError as exc:
            raise ConfigError(f"data.overrides: {exc}") from None
        return DataConfig(case=sec["case"], overrides=dict(overrides))
    if "overrides" in sec:
        raise ConfigError("data.overrides only applies to synthetic cases")
    c = sec["csv"]
    _check_keys(c, _CSV_KEYS, "data.csv")
    if "path" not in c:
        raise ConfigError("data.csv.path is required")
    path = Path(c["path"])
    path = path if path.is_absolute() else base / path
    fmt = c.get("format", "csv")
    if fmt not in ("csv", "cmapss"):
        raise ConfigError("data.csv.format must be 'csv' or 'cmapss'")
    preset = c.get("preset")
    order = _number(c.get("order", 3), "data.csv.order", lo=1, hi=10, integer=True)
    if preset == "student":
        schema = student_schema()
    elif preset == "cmapss":
        schema = cmapss_schema(c.get("sensor", "s2"), order)
    elif preset is None:
        for key in ("device_column", "target_column"):
            if key not in c:
                raise ConfigError(f"data.csv.{key} is required without a preset")
        schema = CsvSchema(
            c["device_column"], c["target_column"],
            dummy_encode=frozenset(c.get("dummy_encode", ())), drop=frozenset(c.get("drop", ())),
            standardize=bool(c.get("standardize", True)), standardize_target=c.get("standardize_target"),
            time_column=c.get("time_column"), order=order,
        )
    else:
        raise ConfigError("data.csv.preset must be 'student' or 'cmapss'")
    if "sensor" in c and preset != "cmapss":
        raise ConfigError("data.csv.sensor only applies to the cmapss preset")
    sp = c.get("split", {"policy": "fraction", "train": 0.6})
    _check_keys(sp, {"policy", "train", "validation"}, "data.csv.split")
    policy = sp.get("policy", "fraction")
    if policy not in ("fraction", "time_prefix"):
        raise ConfigError("data.csv.split.policy must be 'fraction' or 'time_prefix'")
    train = _number(sp.get("train", 0.6), "data.csv.split.train", 0, 1, lo_open=True, hi_open=True)
    val = _number(sp.get("validation", 0.0), "data.csv.split.validation", 0, 1, hi_open=True)
    return DataConfig(path=path, file_format=fmt, schema=schema, split=(policy, train), validation=val)


# ---------------------------------------------------------------- rounds and selection


@dataclass(frozen=True)
class RoundsConfig:
    count: int = 30
    participation: int | None = None


def _parse_rounds(sec) -> RoundsConfig:
    _check_keys(sec, {"count", "participation"}, "rounds")
    count = _number(sec.get("count", 30), "rounds.count", lo=1, integer=True)
    part = sec.get("participation")
    if part is not None:
        part = _number(part, "rounds.participation", lo=1, integer=True)
    return RoundsConfig(count, part)


@dataclass(frozen=True)
class SelectionConfig:
    level: float = 0.9
    draws: int = 10000
    burn_in: int = 5000


def _parse_selection(sec) -> SelectionConfig:
    _check_keys(sec, {"level", "draws", "burn_in"}, "selection")
    return SelectionConfig(
        _number(sec.get("level", 0.9), "selection.level", 0, 1, lo_open=True, hi_open=True),
        _number(sec.get("draws", 10000), "selection.draws", lo=100, integer=True),
        _number(sec.get("burn_in", 5000), "selection.burn_in", lo=0, integer=True),
    )


# ---------------------------------------------------------------- algorithms


@dataclass(frozen=True)
class AlgorithmConfig:
    """Validated algorithm id and its typed hyper-parameters.

    ``settings`` is an :class:`Hm1Config`, a :class:`BaselineConfig`, or
    for ``ep`` the tuple ``(kind, noise_var, prior_sd, theta_draws,
    EpConfig)`` that :func:`ep_spec` completes once ``d`` is known.  ``params`` keeps the
    user-facing values for the manifest.
    """

    id: str
    settings: Any
    params: Mapping


_SGD_KEYS = {"eta", "local_steps", "batch_size"}
_ALG_KEYS = {
    "hm1": {"eta2", "eta_shrink", "alpha", "local_steps", "batch_size", "omega_floor", "init_scale"},
    "fedAvg": _SGD_KEYS,
    "ditto": _SGD_KEYS | {"lambda_ditto", "ditto_steps", "ditto_eta"},
    "separate": _SGD_KEYS,
    "centralLasso": {"lam", "intercept"},
    "centralRidge": {"lam", "intercept"},
    "ep": {"kind", "damping", "mc_draws", "theta_draws", "noise_var", "prior_sd", "ess_floor",
           "max_halvings", "min_retained", "refine"},
}


def _parse_algorithm(sec, where: str) -> AlgorithmConfig:
    if not isinstance(sec, Mapping) or "id" not in sec:
        raise ConfigError(f"{where}.id is required")
    alg = sec["id"]
    if alg not in ALGORITHM_IDS:
        raise ConfigError(f"{where}.id must be one of {', '.join(ALGORITHM_IDS)}")
    _check_keys(sec, _ALG_KEYS[alg] | {"id"}, where)
    p = {k: v for k, v in sec.items() if k != "id"}
    if alg == "hm1":
        settings = Hm1Config(
            eta2=_number(p.get("eta2", 0.01), f"{where}.eta2", 0, 1, lo_open=True),
            eta_shrink=None if p.get("eta_shrink") is None
            else _number(p["eta_shrink"], f"{where}.eta_shrink", 0, 1, lo_open=True),
            alpha=_number(p.get("alpha", 0.1), f"{where}.alpha", 0, 1, lo_open=True),
            local_steps=_number(p.get("local_steps", 20), f"{where}.local_steps", lo=1, integer=True),
            batch_size=_batch(p.get("batch_size"), f"{where}.batch_size"),
            omega_floor=None if p.get("omega_floor") is None
            else _number(p["omega_floor"], f"{where}.omega_floor", lo=0),
            init_scale=_number(p.get("init_scale", 0.01), f"{where}.init_scale", lo=0),
        )
    elif alg == "ep":
        kind = p.get("kind", "meanFieldNormal")
        if kind not in KINDS:
            raise ConfigError(f"{where}.kind must be one of {', '.join(KINDS)}")
        noise = p.get("noise_var", "plugin")
        if noise != "plugin":
            noise = _number(noise, f"{where}.noise_var", 0, lo_open=True)
        prior_sd = p.get("prior_sd")
        if prior_sd is not None:
            prior_sd = _number(prior_sd, f"{where}.prior_sd", 0, lo_open=True)
        ep = EpConfig(
            damping=_number(p.get("damping", 0.5), f"{where}.damping", 0, 1, lo_open=True),
            mc_draws=_number(p.get("mc_draws", 2048), f"{where}.mc_draws", lo=16, integer=True),
            ess_floor=_number(p.get("ess_floor", 0.01), f"{where}.ess_floor", 0, 1, hi_open=True),
            max_halvings=_number(p.get("max_halvings", 6), f"{where}.max_halvings", 0, 30, integer=True),
            min_retained=_number(p.get("min_retained", 0.5), f"{where}.min_retained", 0, 1, hi_open=True),
            refine=_number(p.get("refine", 3), f"{where}.refine", 0, 10, integer=True),
        )
        theta_draws = _number(p.get("theta_draws", 2048), f"{where}.theta_draws", lo=16, integer=True)
        settings = (kind, noise, prior_sd, theta_draws, ep)
    else:
        lam = _number(p.get("lam", 0.0), f"{where}.lam", lo=0)
        if alg.startswith("central"):
            if not isinstance(p.get("intercept", False), bool):
                raise ConfigError(f"{where}.intercept must be true or false")
            settings = BaselineConfig(alg, lam=lam)
        else:
            settings = BaselineConfig(
                alg,
                eta=_number(p.get("eta", 0.01), f"{where}.eta", 0, 1, lo_open=True),
                local_steps=_number(p.get("local_steps", 20), f"{where}.local_steps", lo=1, integer=True),
                batch_size=_batch(p.get("batch_size"), f"{where}.batch_size"),
                lambda_ditto=_number(p.get("lambda_ditto", 1.0), f"{where}.lambda_ditto", lo=0),
                ditto_steps=_number(p.get("ditto_steps", 200), f"{where}.ditto_steps", lo=1, integer=True),
                ditto_eta=None if p.get("ditto_eta") is None
                else _number(p["ditto_eta"], f"{where}.ditto_eta", 0, lo_open=True),
            )
    return AlgorithmConfig(alg, settings, dict(sorted(p.items())))


def ep_spec(alg: AlgorithmConfig, d: int) -> tuple[HierModelSpec, EpConfig]:
    """Model spec and EP settings once the dimension of the data is known."""
    kind, noise, prior_sd, theta_draws, ep = alg.settings
    return make_spec(kind, d, prior_sd=prior_sd, noise_var=noise, theta_draws=theta_draws), ep


# ---------------------------------------------------------------- experiment


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig
    algorithm: AlgorithmConfig | None
    rounds: RoundsConfig = RoundsConfig()
    repeats: int = 1
    master_seed: int = 0
    output_dir: Path = Path("out")
    selection: SelectionConfig = SelectionConfig()
    bench: Mapping[str, list[AlgorithmConfig]] = field(default_factory=dict)
    source: Mapping = field(default_factory=dict, compare=False, repr=False)

    def seeds(self) -> list[int]:
        return [self.master_seed + i for i in range(self.repeats)]

    def with_overrides(self, seed=None, repeats=None, out=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, master_seed=_number(seed, "--seed", lo=0, integer=True))
        if repeats is not None:
            cfg = replace(cfg, repeats=_number(repeats, "--repeats", lo=1, integer=True))
        if out is not None:
            cfg = replace(cfg, output_dir=Path(out))
        return cfg


def _expand_grid(sec, where: str) -> list[dict]:
    """Cartesian product over list-valued hyper-parameters (a documented grid)."""
    if not isinstance(sec, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    keys = sorted(k for k, v in sec.items() if isinstance(v, list))
    for k in keys:
        if not sec[k]:
            raise ConfigError(f"{where}.{k} is an empty grid")
    if not keys:
        return [dict(sec)]
    return [{**sec, **dict(zip(keys, combo))} for combo in itertools.product(*(sec[k] for k in keys))]


_TOP_KEYS = {"data", "algorithm", "rounds", "repeats", "master_seed", "output_dir", "selection", "bench"}


def parse_config(doc: Mapping, base: Path | str = ".", command: str | None = None) -> ExperimentConfig:
    """Validate a parsed document; ``command`` enforces the sections it needs."""
    base = Path(base)
    _check_keys(doc, _TOP_KEYS, "config")
    if "data" not in doc:
        raise ConfigError("config.data is required")
    data = _parse_data(doc["data"], base)
    algorithm = _parse_algorithm(doc["algorithm"], "algorithm") if "algorithm" in doc else None
    bench = {}
    if "bench" in doc:
        sec = doc["bench"]
        _check_keys(sec, {"algorithms"}, "bench")
        algs = sec.get("algorithms") or []
        if not isinstance(algs, list) or not algs:
            raise ConfigError("bench.algorithms must be a non-empty list")
        for i, a in enumerate(algs):
            where = f"bench.algorithms[{i}]"
            cands = [_parse_algorithm(g, where) for g in _expand_grid(a, where)]
            aid = cands[0].id
            if aid not in BENCH_IDS:
                raise ConfigError(f"{where}.id must be one of {', '.join(BENCH_IDS)}")
            if aid in bench:
                raise ConfigError(f"bench lists {aid} twice")
            bench[aid] = cands
    if command in ("fit", "select") and algorithm is None:
        raise ConfigError(f"'{command}' needs an algorithm section")
    if command == "select" and (algorithm.id != "ep"):
        raise ConfigError("'select' needs algorithm.id: ep")
    if command == "bench" and not bench:
        raise ConfigError("'bench' needs a bench.algorithms list")
    out = doc.get("output_dir", "out")
    if not isinstance(out, str):
        raise ConfigError("output_dir must be a path string")
    return ExperimentConfig(
        data=data,
        algorithm=algorithm,
        rounds=_parse_rounds(doc.get("rounds") or {}),
        repeats=_number(doc.get("repeats", 1), "repeats", lo=1, integer=True),
        master_seed=_number(doc.get("master_seed", 0), "master_seed", lo=0, integer=True),
        output_dir=Path(out) if Path(out).is_absolute() else base / out,
        selection=_parse_selection(doc.get("selection") or {}),
        bench=bench,
        source=json.loads(json.dumps(doc, sort_keys=True, default=str)),
    )


def load_config(path, command: str | None = None) -> ExperimentConfig:
    """Read and validate a YAML or JSON configuration file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML or JSON: {exc}") from None
    if doc is None:
        raise ConfigError(f"config {path} is empty")
    return parse_config(doc, path.parent, command)
