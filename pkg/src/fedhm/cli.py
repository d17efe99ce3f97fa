"""Command line entry point: ``fedhm {gen,fit,select,bench} --config FILE``.

Exit codes: 0 on success, 2 when the configuration (or a file it refers
to) is invalid, 3 when a computation fails numerically.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .baselines import central_penalized
from .config import ConfigError, ExperimentConfig, ep_spec, load_config
from .datasets import DatasetError, FederatedDataset, export_dataset
from .ep import DegenerateTiltError, EpAggregationError, EpAlgorithm
from .experiments import (
    _report,
    eval_devices_for,
    fit_ditto,
    fit_fedavg,
    fit_hm1,
    fit_separate,
    run_bench,
    run_selection,
)
from .gaussian import ImproperDensityError, SingularMatrixError
from .metrics import EvalReport, mean_sd, write_reports_csv
from .posterior import adapt_new_device
from .runtime import RoundConfig, RoundError, RunManifest, run_rounds

__all__ = ["main", "cmd_gen", "cmd_fit", "cmd_select", "cmd_bench", "EXIT_CONFIG", "EXIT_NUMERIC"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (
    FloatingPointError,
    np.linalg.LinAlgError,
    ImproperDensityError,
    SingularMatrixError,
    EpAggregationError,
    DegenerateTiltError,
    RoundError,
    RuntimeError,
)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else v


def _write_csv(path: Path, header: list[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def _run_dir(cfg: ExperimentConfig, run: int) -> Path:
    return cfg.output_dir / "runs" / f"run_{run:03d}"


def _map_runs(fn, cfg: ExperimentConfig, workers: int):
    jobs = [(cfg, i, s) for i, s in enumerate(cfg.seeds())]
    if workers <= 1 or len(jobs) == 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _load(cfg: ExperimentConfig, seed: int) -> FederatedDataset:
    ds = cfg.data.load(seed)
    part = cfg.rounds.participation
    if part is not None and part > ds.K:
        raise ConfigError(f"rounds.participation={part} exceeds the {ds.K} devices in the data")
    return ds


def _has_test(ds: FederatedDataset) -> bool:
    return ds.split is not None and all(len(s.test) for s in ds.split.values())


# ---------------------------------------------------------------- gen


def cmd_gen(cfg: ExperimentConfig, workers: int = 1) -> list[Path]:
    """Write per-device CSVs and a truth manifest for every seed."""
    paths = []
    for seed in cfg.seeds():
        out = cfg.output_dir if cfg.repeats == 1 else cfg.output_dir / f"seed_{seed}"
        paths.append(export_dataset(_load(cfg, seed), out))
    return paths


# ---------------------------------------------------------------- fit


def _phi_rows(q, spec, ds, run, seed, level=0.9):
    m = q.to_moments()
    sd = np.sqrt(np.diag(m.sigma))
    z = norm.ppf(0.5 + level / 2)
    rows, j = [], 0
    for block in spec.layout.blocks:
        truth = None
        if ds.true_phi and block.name in ds.true_phi:
            truth = np.asarray(ds.true_phi[block.name], float).ravel()
            truth = np.log(truth) if block.transform == "log" else truth
        for i in range(block.length):
            lo, hi = m.mu[j] - z * sd[j], m.mu[j] + z * sd[j]
            t = None if truth is None or truth.size != block.length else float(truth[i])
            covered = "" if t is None else int(lo <= t <= hi)
            rows.append([run, seed, spec.layout.labels()[j], m.mu[j], sd[j], lo, hi, t, covered])
            j += 1
    return rows


def _fit_one(cfg: ExperimentConfig, run: int, seed: int):
    alg = cfg.algorithm
    ds = _load(cfg, seed)
    tr = ds.train_only()
    rounds, part = cfg.rounds.count, cfg.rounds.participation
    phi_rows = []
    Theta = None
    if alg.id == "hm1":
        Theta, manifest = fit_hm1(ds, alg.settings, rounds, seed, part)
    elif alg.id == "fedAvg":
        Theta, manifest = fit_fedavg(ds, alg.settings, rounds, seed, part)
    elif alg.id == "ditto":
        Theta, manifest = fit_ditto(ds, alg.settings, rounds, seed, part)
        manifest.algorithm_id = "ditto"
        manifest.hyper_parameters.update(lambda_ditto=alg.settings.lambda_ditto,
                                         ditto_steps=alg.settings.ditto_steps)
    elif alg.id == "separate":
        s = alg.settings
        Theta = fit_separate(ds, s.eta, s.local_steps, seed, s.batch_size)
        manifest = RunManifest("separate", ds.meta.get("case_id"), seed, dict(alg.params))
    elif alg.id in ("centralLasso", "centralRidge"):
        Theta = central_penalized(tr, alg.id, alg.settings.lam, bool(alg.params.get("intercept", False)))
        manifest = RunManifest(alg.id, ds.meta.get("case_id"), seed, dict(alg.params))
    else:
        spec, ep = ep_spec(alg, ds.d)
        res = run_rounds(EpAlgorithm(spec, ep), tr, RoundConfig(rounds, 1, part, seed))
        manifest = res.manifest
        q = res.server.q
        phi_rows = _phi_rows(q, spec, ds, run, seed, cfg.selection.level)
        if _has_test(ds):
            Theta = np.stack([adapt_new_device(q, dev, spec, rng=np.random.default_rng(seed)).mean
                              for dev in tr.devices], axis=1)
    report = None
    if Theta is not None and _has_test(ds):
        report = _report(alg.id, run, seed, Theta, ds, eval_devices_for(ds))
        manifest.final_metrics = report.summary()
    elif phi_rows:
        manifest.final_metrics = {"phi": [dict(zip(("label", "mean", "sd"), r[2:5])) for r in phi_rows]}
    return run, seed, manifest, report, phi_rows


def cmd_fit(cfg: ExperimentConfig, workers: int = 1) -> Path:
    """Seeded runs of one algorithm; manifests, monitors and metrics CSVs."""
    results = _map_runs(_fit_one, cfg, workers)
    reports, summary, phi = [], [], []
    for run, seed, manifest, report, phi_rows in results:
        d = _run_dir(cfg, run)
        _write_json(d / "manifest.json", manifest.to_dict())
        (d / "monitor.csv").write_text(manifest.monitor_csv(), encoding="utf-8")
        if report is not None:
            reports.append(report)
            summary.append([run, seed, report.a_rmse, report.param_error])
        phi.extend(phi_rows)
    if reports:
        write_reports_csv(reports, cfg.output_dir / "metrics.csv")
        _write_csv(cfg.output_dir / "summary.csv", ["run", "seed", "a_rmse", "param_error"],
                   summary + _summary_rows(summary, [2, 3]))
    if phi:
        _write_csv(cfg.output_dir / "phi.csv",
                   ["run", "seed", "label", "mean", "sd", "lo", "hi", "truth", "covered"], phi)
    return _write_json(cfg.output_dir / "manifest.json", {
        "command": "fit",
        "config": cfg.source,
        "seeds": cfg.seeds(),
        "runs": [m.to_dict() for _, _, m, _, _ in results],
    })


def _summary_rows(rows, cols):
    """``mean`` and ``sd`` rows over runs for the numeric columns ``cols``."""
    mean_row, sd_row = ["mean", ""], ["sd", ""]
    for c in range(2, len(rows[0])):
        vals = [r[c] for r in rows if r[c] is not None] if c in cols else []
        if vals:
            m, s = mean_sd(vals)
            mean_row.append(m)
            sd_row.append(s)
        else:
            mean_row.append("")
            sd_row.append("")
    return [mean_row, sd_row]


# ---------------------------------------------------------------- select


def _select_one(cfg: ExperimentConfig, run: int, seed: int):
    ds = _load(cfg, seed)
    spec, ep = ep_spec(cfg.algorithm, ds.d)
    sel = cfg.selection
    res = run_selection(ds, spec, ep, cfg.rounds.count, seed, sel.level, sel.draws, sel.burn_in,
                        cfg.rounds.participation, run)
    names = ds.feature_names or [f"x{j + 1}" for j in range(ds.d)]
    lo, hi = res.intervals
    mask_rows, count_rows = [], []
    for k, dev in enumerate(ds.device_ids):
        for j, name in enumerate(names):
            truth = "" if ds.true_theta is None else int(ds.true_theta[j, k] != 0)
            mask_rows.append([run, seed, dev, name, int(res.masks[k, j]), res.theta_mean[j, k],
                              lo[k, j], hi[k, j], truth])
        keep = [j for j, n in enumerate(names) if n != "intercept"]
        count_rows.append([run, seed, dev, int(res.masks[k, keep].sum())])
    rates = res.report.inclusion or (float("nan"), float("nan"))
    rate_row = [run, seed, rates[0], rates[1], res.report.a_rmse]
    return run, res.manifest, res.report, mask_rows, count_rows, rate_row


def cmd_select(cfg: ExperimentConfig, workers: int = 1) -> Path:
    """Federated EP, device posterior sampling and credible-interval selection."""
    results = _map_runs(_select_one, cfg, workers)
    masks, counts, rates, reports = [], [], [], []
    for run, manifest, report, m, c, r in results:
        d = _run_dir(cfg, run)
        _write_json(d / "manifest.json", manifest.to_dict())
        (d / "monitor.csv").write_text(manifest.monitor_csv(), encoding="utf-8")
        masks += m
        counts += c
        rates.append(r)
        reports.append(report)
    out = cfg.output_dir
    _write_csv(out / "masks.csv",
               ["run", "seed", "device", "coefficient", "included", "posterior_mean", "lo", "hi", "true_nonzero"],
               masks)
    _write_csv(out / "predictor_counts.csv", ["run", "seed", "device", "included_predictors"], counts)
    _write_csv(out / "rates.csv", ["run", "seed", "correct_rate", "false_rate", "a_rmse"],
               rates + _summary_rows(rates, [2, 3, 4]))
    write_reports_csv(reports, out / "metrics.csv")
    return _write_json(out / "manifest.json", {
        "command": "select",
        "config": cfg.source,
        "seeds": cfg.seeds(),
        "runs": [r[1].to_dict() for r in results],
    })


# ---------------------------------------------------------------- bench


def _bench_one(cfg: ExperimentConfig, run: int, seed: int) -> dict[str, EvalReport]:
    ds = _load(cfg, seed)
    configs = {name: [ac.settings for ac in cands] for name, cands in cfg.bench.items()}
    return run_bench(ds, seed, configs, cfg.rounds.count, run, participation=cfg.rounds.participation)


def cmd_bench(cfg: ExperimentConfig, workers: int = 1) -> Path:
    """Every listed algorithm under one seed schedule; one row per run plus a summary."""
    results = _map_runs(_bench_one, cfg, workers)
    rows, summary, reports = [], [], []
    for name, cands in cfg.bench.items():
        vals = []
        for run, (seed, reps) in enumerate(zip(cfg.seeds(), results)):
            rep = reps[name]
            chosen = cands[rep.extra.get("selected", 0)].params
            rows.append([name, run, seed, rep.a_rmse, "", json.dumps(dict(chosen), sort_keys=True)])
            vals.append(rep.a_rmse)
            reports.append(rep)
        m, s = mean_sd(vals)
        summary.append([name, "summary", "", m, s, ""])
    out = cfg.output_dir
    _write_csv(out / "bench.csv", ["algorithm", "run", "seed", "a_rmse", "sd", "hyper_parameters"],
               rows + summary)
    write_reports_csv(reports, out / "metrics.csv")
    return _write_json(out / "manifest.json", {
        "command": "bench",
        "config": cfg.source,
        "seeds": cfg.seeds(),
        "summary": {r[0]: {"mean": r[3], "sd": r[4]} for r in summary},
    })


COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "select": cmd_select, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedhm", description="Federated hierarchical regression experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "generate or ingest a dataset and write per-device CSVs",
        "fit": "run one algorithm over seeded repeats",
        "select": "federated variable selection with credible intervals",
        "bench": "compare algorithms on one dataset",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, type=Path, help="YAML or JSON experiment file")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides master_seed)")
        p.add_argument("--repeats", type=int, help="number of seeded runs (overrides repeats)")
        p.add_argument("--workers", type=int, default=1, help="processes used for repeats")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.command).with_overrides(args.seed, args.repeats, args.out)
        if args.workers < 1:
            raise ConfigError("--workers must be positive")
        path = COMMANDS[args.command](cfg, args.workers)
    except (ConfigError, DatasetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if isinstance(path, Path):
        print(path)
    else:
        for p in path:
            print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
