"""Command-line interface.

Subcommands::

    foil synth      sample an SCM series and its ground truth
    foil train      train FOIL (or the ERM control with --erm) into a run directory
    foil eval       score a trained checkpoint
    foil infer-env  dump inferred environment labels as CSV (t,label)
    foil ablate     FOIL vs its ablations vs ERM over a seed sweep
    foil grid       parallel grid search over config keys

Every run directory holds one ``manifest.json`` recording the command, the
fully resolved configuration, the seed, SHA-256 digests of input files,
timestamps and artifact paths. ``foil train --manifest M`` replays a run.
Run directories are append-only: writing into a non-empty one needs
``--force``. Without ``--out`` runs go under ``$FOIL_RUN_ROOT`` (default
``./runs``) in a directory named after the resolved configuration.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__, scm
from .benchmark import ARMS, BENCHMARK_CONFIG, BenchmarkData, run_arm
from .config import DataConfig, build_run_config, build_scm_spec, parse_value, read_toml
from .data import SplitSpec, apply_normalization, load_csv, window_arrays, write_csv, zero_mean_normalize
from .envinfer import EnvironmentAssignment, e_step_assign, label_propagate, mean_run_length
from .errors import ConfigError, DataError, FoilError, UsageError
from .evaluation import attach_env_stats, env_recovery_score, evaluate_forecasts, format_table, percent_improvement
from .trainer import FoilConfig, FoilModel, forecast, train_erm, train_foil

log = logging.getLogger("foil")

RUN_ROOT_ENV = "FOIL_RUN_ROOT"
MANIFEST = "manifest.json"


# ---------------------------------------------------------------- helpers


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _jsonable(obj):
    """Replace non-finite floats by None so logs stay valid JSON."""
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def parse_seeds(text: Optional[str]) -> List[int]:
    """``"0,1,2"`` or ``"0-4"``."""
    if not text:
        return []
    seeds: List[int] = []
    try:
        for part in text.split(","):
            if "-" in part.strip()[1:]:
                lo, hi = part.split("-", 1)
                seeds += list(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse seeds {text!r}; expected e.g. 0,1,2 or 0-4") from None
    return seeds


def prepare_run_dir(out: Optional[str], command: str, resolved: dict, force: bool) -> Path:
    if out is None:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        run_dir = root / f"{command}-{_digest(resolved)[:10]}"
    else:
        run_dir = Path(out)
    if run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise UsageError(f"{run_dir} already holds a run; pass --force or choose a fresh directory")
        if not (run_dir / MANIFEST).exists():
            raise UsageError(f"{run_dir} is not empty and is not a run directory; refusing to overwrite it")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def write_manifest(run_dir: Path, command: str, argv, resolved: dict, seed, inputs: dict, started: str, artifacts) -> None:
    _dump_json(
        run_dir / MANIFEST,
        {
            "schema": "foil-manifest/1",
            "version": __version__,
            "command": command,
            "argv": list(argv),
            "resolved": resolved,
            "seed": seed,
            "inputs": inputs,
            "started": started,
            "finished": _now(),
            "artifacts": {name: name for name in artifacts},
        },
    )


# ---------------------------------------------------------------- config / data resolution


def _flag_overrides(args) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for flag, key in (
        ("envs", "n_envs"),
        ("radius", "radius"),
        ("lookback", "lookback"),
        ("horizon", "horizon"),
        ("lambda1", "lambda1"),
        ("lambda2", "lambda2"),
        ("epochs", "epochs"),
        ("rounds", "outer_rounds"),
        ("seed", "seed"),
        ("target", "data.target"),
        ("split", "data.split"),
        ("protocol", "data.protocol"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    if getattr(args, "revin", None) is not None:
        out["revin"] = args.revin == "on"
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value.strip())
    return out


def resolve_source(args, seed: int):
    """``(source, inputs)``: a replayable description of the data and input-file digests."""
    inputs = {}
    if getattr(args, "data", None):
        path = Path(args.data).resolve()
        if not path.exists():
            raise DataError(f"{path}: no such file")
        inputs[str(path)] = sha256_file(path)
        return {"kind": "csv", "path": str(path)}, inputs
    if getattr(args, "synth", None):
        path = Path(args.synth).resolve()
        spec = build_scm_spec(read_toml(path), seed)
        inputs[str(path)] = sha256_file(path)
        return {"kind": "scm", "spec": scm.spec_to_dict(spec), "follow_seed": False}, inputs
    if getattr(args, "preset", None):
        spec = scm.preset(args.preset, seed)
        return {"kind": "scm", "spec": scm.spec_to_dict(spec), "preset": args.preset, "follow_seed": True}, inputs
    raise UsageError("a data source is required: --data CSV, --synth SPEC.toml or --preset NAME")


def source_for_seed(source: dict, seed: int) -> dict:
    if source.get("follow_seed"):
        source = json.loads(json.dumps(source))
        source["spec"]["seed"] = seed
    return source


def resolve_run(args):
    if getattr(args, "defaults", "foil") == "benchmark":
        base = dict(BENCHMARK_CONFIG)
    else:
        base = None
    raw = read_toml(args.config) if getattr(args, "config", None) else {}
    config, data_cfg = build_run_config(raw, _flag_overrides(args), base)
    source, inputs = resolve_source(args, config.seed)
    if args.config:
        p = Path(args.config).resolve()
        inputs[str(p)] = sha256_file(p)
    return config, data_cfg, source, inputs


def _spec_from_dict(d: dict) -> scm.ScmSpec:
    d = dict(d)
    for key in ("alpha_range", "beta_range", "test_alpha_range", "test_beta_range"):
        if d.get(key) is not None:
            d[key] = tuple(d[key])
    return scm.ScmSpec(**d)


def load_series(source: dict, data_cfg: DataConfig):
    truth = None
    if source["kind"] == "csv":
        series = load_csv(source["path"], data_cfg.target, data_cfg.has_header)
    else:
        series, truth = scm.generate(_spec_from_dict(source["spec"]))
        if data_cfg.target is not None:
            if data_cfg.target not in series.columns:
                raise DataError(f"target column {data_cfg.target!r} not in {list(series.columns)}")
            from dataclasses import replace

            series = replace(series, target=series.columns.index(data_cfg.target))
    return series, truth


def load_bundle(source: dict, data_cfg: DataConfig, config: FoilConfig) -> BenchmarkData:
    series, truth = load_series(source, data_cfg)
    if data_cfg.protocol == "none":
        split = SplitSpec.parse(data_cfg.split, series.length)
    else:
        if truth is None:
            raise ConfigError(f"data.protocol={data_cfg.protocol!r} needs a synthetic source with ground truth")
        split = scm.ood_split(series, truth, data_cfg.protocol, data_cfg.val_fraction)
    if data_cfg.normalize == "global":
        series = zero_mean_normalize(series, split)
    parts = [window_arrays(series, config.lookback, config.horizon, split, p) for p in ("train", "val", "test")]
    if len(parts[0]) == 0:
        raise DataError(
            f"train split ({split.train_end} rows) is too short for lookback={config.lookback}, horizon={config.horizon}"
        )
    return BenchmarkData(series, truth, split, *parts)


def _resolved(config: FoilConfig, data_cfg: DataConfig, source: dict) -> dict:
    return {"config": config.to_dict(), "data": asdict(data_cfg), "source": source}


def _from_resolved(resolved: dict):
    return FoilConfig.from_dict(resolved["config"]), DataConfig(**resolved["data"]).validate(), resolved["source"]


# ---------------------------------------------------------------- train


def run_train(run_dir: Path, config: FoilConfig, data_cfg: DataConfig, source: dict, erm: bool,
              argv=(), inputs=None) -> dict:
    """Train one model into ``run_dir``; returns the metrics dict."""
    started = _now()
    resolved = _resolved(config, data_cfg, source)
    resolved["arm"] = "erm" if erm else "foil"
    bundle = load_bundle(source, data_cfg, config)
    trainer = train_erm if erm else train_foil
    model, trace = trainer(bundle.train, config, bundle.val, bundle.series.target)
    if bundle.series.normalized:
        model.norm_mean, model.norm_std = bundle.series.mean, bundle.series.std

    meta = {"resolved": resolved, "columns": list(bundle.series.columns), "target": bundle.series.target}
    model.save(run_dir / "checkpoint.bin", meta)
    _dump_json(run_dir / "config.json", resolved)

    metrics = {}
    for name in ("train", "val", "test"):
        part = getattr(bundle, name)
        if len(part) == 0:
            continue
        report = evaluate_forecasts(forecast(model, part.X), part.Y, name, "normalized" if bundle.series.normalized else "raw")
        metrics[name] = report.to_dict()
    artifacts = ["checkpoint.bin", "config.json", "log.jsonl", "metrics.json"]
    if trace.assignment is not None and trace.assignment.n_envs > 1:
        if bundle.truth is not None:
            rep = attach_env_stats(evaluate_forecasts(np.zeros(1), np.zeros(1), "train"), trace.assignment,
                                   bundle.truth.labels[bundle.train.t])
            metrics["environments"] = {"accuracy": rep.env_accuracy, "mean_run_length": rep.mean_run_length}
        else:
            metrics["environments"] = {"mean_run_length": mean_run_length(trace.assignment.labels)}
        _write_labels(run_dir / "assignment.csv", bundle.train.t, trace.assignment.labels)
        artifacts.append("assignment.csv")

    with open(run_dir / "log.jsonl", "w") as fh:
        for rec in trace.records:
            fh.write(json.dumps(_jsonable({"type": "round", **rec}), sort_keys=True) + "\n")
        fh.write(json.dumps(_jsonable({"type": "metrics", **metrics}), sort_keys=True) + "\n")
    _dump_json(run_dir / "metrics.json", _jsonable(metrics))
    write_manifest(run_dir, "train", argv, resolved, config.seed, inputs or {}, started, artifacts + [MANIFEST])
    return metrics


def _write_labels(path: Path, t, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "label"])
        w.writerows(zip(np.asarray(t).tolist(), np.asarray(labels).tolist()))


def cmd_train(args) -> int:
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        if manifest.get("command") != "train":
            raise UsageError(f"{args.manifest} is not a train manifest")
        config, data_cfg, source = _from_resolved(manifest["resolved"])
        erm = manifest["resolved"].get("arm") == "erm"
        inputs = manifest.get("inputs", {})
        for path, digest in inputs.items():
            if Path(path).exists() and sha256_file(path) != digest:
                log.warning("input %s changed since the manifest was written", path)
    else:
        config, data_cfg, source, inputs = resolve_run(args)
        erm = args.erm
    seeds = parse_seeds(args.seeds)
    argv = sys.argv if args.argv is None else args.argv
    if not seeds:
        run_dir = prepare_run_dir(args.out, "train", _resolved(config, data_cfg, source), args.force)
        metrics = run_train(run_dir, config, data_cfg, source, erm, argv, inputs)
        print(json.dumps({"run_dir": str(run_dir), **{k: v.get("mse") for k, v in metrics.items() if "mse" in v}}))
        return 0
    sweep_dir = prepare_run_dir(args.out, "sweep", {"seeds": seeds, **_resolved(config, data_cfg, source)}, args.force)
    started, rows = _now(), []
    for seed in seeds:
        cfg = FoilConfig.from_dict({**config.to_dict(), "seed": seed})
        sub = sweep_dir / f"seed-{seed}"
        sub.mkdir()
        metrics = run_train(sub, cfg, data_cfg, source_for_seed(source, seed), erm, argv, inputs)
        rows.append({"seed": seed, **{f"{k}_mse": v["mse"] for k, v in metrics.items() if "mse" in v}})
    summary = {"runs": rows}
    for key in sorted({k for r in rows for k in r if k.endswith("_mse")}):
        vals = [r[key] for r in rows if key in r]
        summary[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "median": float(np.median(vals))}
    _dump_json(sweep_dir / "sweep.json", summary)
    write_manifest(sweep_dir, "train", argv, {"seeds": seeds, **_resolved(config, data_cfg, source)}, seeds,
                   inputs, started, ["sweep.json", MANIFEST] + [f"seed-{s}" for s in seeds])
    print(format_table(rows, list(rows[0])))
    return 0


# ---------------------------------------------------------------- eval / infer-env


def _load_checkpoint(path):
    path = Path(path)
    ckpt = path / "checkpoint.bin" if path.is_dir() else path
    if not ckpt.exists():
        raise DataError(f"{ckpt}: no checkpoint")
    model, meta = FoilModel.load(ckpt)
    if "resolved" not in meta:
        raise DataError(f"{ckpt}: checkpoint lacks run metadata")
    return model, meta, ckpt.parent


def _eval_windows(model: FoilModel, meta: dict, args, default_part: str):
    """Windows for eval/infer-env: either a new CSV or the run's own data source."""
    config, data_cfg, source = _from_resolved(meta["resolved"])
    if args.data:
        series = load_csv(args.data, meta["columns"][meta["target"]], data_cfg.has_header)
        if list(series.columns) != meta["columns"]:
            raise DataError(f"{args.data}: columns {list(series.columns)} differ from training columns {meta['columns']}")
        if model.norm_mean is not None:
            series = apply_normalization(series, model.norm_mean, model.norm_std)
        part = args.part or "all"
        split = SplitSpec.parse(args.split, series.length) if args.split else None
        if split is None and part != "all":
            raise UsageError("--part other than 'all' needs --split when --data is given")
        return series, window_arrays(series, model.lookback, model.horizon, split, part), None, part, config
    bundle = load_bundle(source, data_cfg, config)
    part = args.part or default_part
    windows = getattr(bundle, part) if part != "all" else window_arrays(bundle.series, model.lookback, model.horizon)
    return bundle.series, windows, bundle.truth, part, config


def _refuse_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def cmd_eval(args) -> int:
    model, meta, run_dir = _load_checkpoint(args.checkpoint)
    series, windows, _, part, _ = _eval_windows(model, meta, args, "test")
    if len(windows) == 0:
        raise DataError(f"no {part} windows to evaluate")
    pred, true = forecast(model, windows.X), windows.Y
    scale = "normalized" if series.normalized else "raw"
    if args.raw_scale:
        pred, true, scale = series.denormalize_target(pred), series.denormalize_target(true), "raw"
    report = evaluate_forecasts(pred, true, part, scale).to_dict()
    report["checkpoint"] = str(run_dir)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        _refuse_overwrite(out, args.force)
        out.write_text(text + "\n")
    print(format_table([report], ["split", "scale", "n_samples", "mse", "mae"]))
    return 0


def cmd_infer_env(args) -> int:
    model, meta, run_dir = _load_checkpoint(args.checkpoint)
    if model.heads is None:
        raise UsageError("checkpoint has no environment heads (ERM or single-environment run)")
    series, windows, truth, part, config = _eval_windows(model, meta, args, "train")
    if len(windows) == 0:
        raise DataError(f"no {part} windows")
    reps = model.representations(windows.X)
    start = EnvironmentAssignment(np.zeros(len(windows), dtype=np.int64), len(model.heads))
    assigned = e_step_assign(model.heads, reps, windows.Y, start, config.base_loss)
    labels = label_propagate(assigned, config.effective_radius).labels
    out = Path(args.out) if args.out else run_dir / f"environments-{part}.csv"
    _refuse_overwrite(out, args.force)
    _write_labels(out, windows.t, labels)
    summary = {"out": str(out), "n": int(len(labels)), "counts": np.bincount(labels, minlength=len(model.heads)).tolist(),
               "mean_run_length": mean_run_length(labels)}
    if truth is not None and not args.data:
        summary["accuracy"] = env_recovery_score(labels, truth.labels[windows.t])
    print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------- ablate


def _ablation_summary(results: Dict[str, list], seeds, status: str, error: Optional[str] = None) -> dict:
    med = {}
    for arm, rs in results.items():
        if rs:
            med[arm] = {m: float(np.median([r[m] for r in rs])) for m in ("val_mse", "test_mse", "test_mae")}
            if all("env_accuracy" in r for r in rs):
                med[arm]["env_accuracy"] = float(np.median([r["env_accuracy"] for r in rs]))
    ranking = sorted(med, key=lambda a: med[a]["test_mse"])
    checks = {}
    if "foil" in med:
        checks["foil_first"] = bool(ranking and ranking[0] == "foil")
        for arm in ("foil-suf", "foil-tei", "foil-lp", "erm"):
            if arm in med:
                checks[f"foil_le_{arm}"] = med["foil"]["test_mse"] <= med[arm]["test_mse"]
        if "erm" in med:
            checks["improvement_over_erm_pct"] = percent_improvement(med["erm"]["test_mse"], med["foil"]["test_mse"])
    if "foil-tei" in med and "foil-lp" in med:
        # reported only: the ordering between these two ablations is not a requirement
        checks["foil_tei_le_foil_lp"] = med["foil-tei"]["test_mse"] <= med["foil-lp"]["test_mse"]
    ablations = [a for a in ("foil-suf", "foil-tei", "foil-lp") if a in med]
    if ablations:
        checks["most_degraded_ablation"] = max(ablations, key=lambda a: med[a]["test_mse"])
    out = {"schema": "foil-ablation/1", "status": status, "seeds": list(seeds), "arms": list(results),
           "medians": med, "ranking": ranking, "checks": checks,
           "runs": {a: [{k: v for k, v in r.items() if k != "seconds"} for r in rs] for a, rs in results.items()}}
    if error:
        out["error"] = error
    return out


def _ablation_table(summary: dict) -> str:
    rows = []
    base = summary["medians"].get("erm", {}).get("test_mse")
    for arm in summary["ranking"]:
        m = summary["medians"][arm]
        row = {"arm": arm, "val_mse": m["val_mse"], "test_mse": m["test_mse"], "test_mae": m["test_mae"],
               "env_acc": m.get("env_accuracy")}
        if base:
            row["imp_vs_erm_%"] = percent_improvement(base, m["test_mse"])
        rows.append(row)
    cols = ["arm", "val_mse", "test_mse", "test_mae", "env_acc"] + (["imp_vs_erm_%"] if base else [])
    return format_table(rows, cols)


def cmd_ablate(args) -> int:
    config, data_cfg, source, inputs = resolve_run(args)
    seeds = parse_seeds(args.seeds) or [config.seed]
    arms = args.arms.split(",") if args.arms else list(ARMS)
    unknown = sorted(set(arms) - set(ARMS))
    if unknown:
        raise ConfigError(f"unknown arms {unknown}; expected any of {list(ARMS)}")
    resolved = {"seeds": seeds, "arms": arms, **_resolved(config, data_cfg, source)}
    run_dir = prepare_run_dir(args.out, "ablate", resolved, args.force)
    started = _now()
    results: Dict[str, list] = {a: [] for a in arms}
    artifacts = ["results.jsonl", "summary.json", "table.txt", MANIFEST]
    argv = sys.argv if args.argv is None else args.argv

    def finish(status, error=None):
        summary = _ablation_summary(results, seeds, status, error)
        _dump_json(run_dir / "summary.json", _jsonable(summary))
        table = _ablation_table(summary) if summary["ranking"] else "(no completed runs)"
        (run_dir / "table.txt").write_text(table + "\n")
        write_manifest(run_dir, "ablate", argv, resolved, seeds, inputs, started, artifacts)
        return summary, table

    with open(run_dir / "results.jsonl", "w") as fh:
        try:
            for seed in seeds:
                cfg = FoilConfig.from_dict({**config.to_dict(), "seed": seed})
                bundle = load_bundle(source_for_seed(source, seed), data_cfg, cfg)
                for arm in arms:
                    r = run_arm(arm, bundle, cfg)
                    r.pop("model"), r.pop("log")
                    r["seed"] = seed
                    results[arm].append(r)
                    fh.write(json.dumps(_jsonable(r), sort_keys=True) + "\n")
                    fh.flush()
                    log.info("seed %d %s test_mse %.4f", seed, arm, r["test_mse"])
        except FoilError as exc:
            finish("failed", str(exc))
            raise
    summary, table = finish("complete")
    print(table)
    print(json.dumps(summary["checks"], sort_keys=True))
    return 0


# ---------------------------------------------------------------- grid


def _grid_worker(payload) -> dict:
    run_dir, config_d, data_d, source, erm, argv = payload
    config = FoilConfig.from_dict(config_d)
    metrics = run_train(Path(run_dir), config, DataConfig(**data_d), source, erm, argv)
    return {k: v["mse"] for k, v in metrics.items() if "mse" in v}


def cmd_grid(args) -> int:
    config, data_cfg, source, inputs = resolve_run(args)
    grid = read_toml(args.grid)
    inputs[str(Path(args.grid).resolve())] = sha256_file(args.grid)
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"grid.{k}: expected a non-empty list of values")
    combos = [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]
    payloads, resolved_runs = [], []
    for combo in combos:
        raw = {**config.to_dict(), **{k: v for k, v in combo.items() if not k.startswith("data.")}}
        data_over = {k: v for k, v in combo.items() if k.startswith("data.")}
        cfg, dcfg = build_run_config({**raw, "data": asdict(data_cfg)}, data_over)
        resolved_runs.append((cfg, dcfg, source_for_seed(source, cfg.seed)))
    resolved = {"grid": grid, **_resolved(config, data_cfg, source)}
    run_dir = prepare_run_dir(args.out, "grid", resolved, args.force)
    started = _now()
    argv = sys.argv if args.argv is None else args.argv
    for i, (cfg, dcfg, src) in enumerate(resolved_runs):
        sub = run_dir / f"run-{i:03d}"
        sub.mkdir()
        payloads.append((str(sub), cfg.to_dict(), asdict(dcfg), src, args.erm, argv))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_grid_worker, payloads))
    else:
        outcomes = [_grid_worker(p) for p in payloads]
    rows = [{"run": f"run-{i:03d}", **combo, **{f"{k}_mse": v for k, v in out.items()}}
            for i, (combo, out) in enumerate(zip(combos, outcomes))]
    scored = [r for r in rows if r.get("val_mse") is not None]
    best = min(scored, key=lambda r: r["val_mse"]) if scored else None
    _dump_json(run_dir / "grid.json", _jsonable({"schema": "foil-grid/1", "keys": keys, "runs": rows, "best": best}))
    table = format_table(rows, ["run", *keys, *[c for c in ("train_mse", "val_mse", "test_mse") if any(c in r for r in rows)]])
    (run_dir / "table.txt").write_text(table + "\n")
    write_manifest(run_dir, "grid", argv, resolved, None, inputs, started,
                   ["grid.json", "table.txt", MANIFEST] + [r["run"] for r in rows])
    print(table)
    if best:
        print(f"best by val_mse: {best['run']}")
    return 0


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    if args.spec:
        spec = build_scm_spec(read_toml(args.spec), args.seed)
    else:
        spec = scm.preset(args.preset or "default", args.seed or 0)
    out, truth_path = Path(args.out), Path(args.truth) if args.truth else None
    for p in (out, truth_path):
        if p is not None:
            _refuse_overwrite(p, args.force)
    series, truth = scm.generate(spec)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(series, out)
    if truth_path is not None:
        truth_path.parent.mkdir(parents=True, exist_ok=True)
        truth.save(truth_path)
    print(json.dumps({"out": str(out), "truth": str(truth_path) if truth_path else None, "rows": series.length,
                      "columns": list(series.columns), "environments": int(spec.n_envs)}))
    return 0


# ---------------------------------------------------------------- parser


def _add_source(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--data", help="CSV series (a leading date column is passed through)")
    g.add_argument("--synth", metavar="SPEC.toml", help="generate the series from an SCM spec file")
    g.add_argument("--preset", choices=["default", "heldout"], help="built-in SCM spec; its seed follows the run seed")


def _add_config(p):
    p.add_argument("--config", metavar="CFG.toml", help="run config (model keys + optional [data] table)")
    p.add_argument("--defaults", choices=["foil", "benchmark"], default="foil",
                   help="base values before the config file: library defaults or the synthetic-benchmark setup")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("--envs", type=int, help="number of environments K")
    p.add_argument("--radius", type=int, help="label-propagation radius r")
    p.add_argument("--lookback", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--epochs", type=int, help="Stage-1 epochs per outer round")
    p.add_argument("--rounds", type=int, help="outer rounds")
    p.add_argument("--seed", type=int)
    p.add_argument("--revin", choices=["on", "off"])
    p.add_argument("--target", help="target column name")
    p.add_argument("--split", help="train:val:test fractions, e.g. 0.7:0.1:0.2")
    p.add_argument("--protocol", choices=["none", *scm.OOD_PROTOCOLS], help="OOD split for synthetic sources")


def _add_out(p, what="run directory"):
    p.add_argument("--out", help=f"{what} (default: under ${RUN_ROOT_ENV} or ./runs)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foil", description="Invariant learning for OOD time-series forecasting.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=f"foil {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample an SCM series and its ground truth")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--spec", metavar="SPEC.toml")
    g.add_argument("--preset", choices=["default", "heldout"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="series CSV")
    p.add_argument("--truth", help="ground-truth JSON")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train FOIL (or ERM) into a run directory")
    _add_source(p)
    _add_config(p)
    _add_out(p)
    p.add_argument("--erm", action="store_true", help="train the plain-MSE control arm instead")
    p.add_argument("--seeds", help="seed sweep, e.g. 0,1,2 or 0-4; one sub-run per seed")
    p.add_argument("--manifest", help="replay the run recorded in this manifest")
    p.set_defaults(func=cmd_train, argv=None)

    for name, func, default_part, help_ in (
        ("eval", cmd_eval, "test", "score a checkpoint"),
        ("infer-env", cmd_infer_env, "train", "write inferred environment labels as CSV (t,label)"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True, help="run directory or checkpoint file")
        p.add_argument("--data", help="CSV to score instead of the run's own data")
        p.add_argument("--split", help="split fractions applied to --data")
        p.add_argument("--part", choices=["train", "val", "test", "all"], help=f"windows to use (default {default_part})")
        p.add_argument("--out", help="output file")
        p.add_argument("--force", action="store_true")
        if name == "eval":
            p.add_argument("--raw-scale", action="store_true", help="denormalize predictions and targets first")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="FOIL vs FOIL\\Suf, FOIL\\TEI, FOIL\\LP and ERM")
    _add_source(p)
    _add_config(p)
    _add_out(p)
    p.add_argument("--seeds", help="seeds, e.g. 0-4 (default: the config seed)")
    p.add_argument("--arms", help=f"comma-separated subset of {','.join(ARMS)}")
    p.set_defaults(func=cmd_ablate, argv=None)

    p = sub.add_parser("grid", help="parallel grid search")
    _add_source(p)
    _add_config(p)
    _add_out(p)
    p.add_argument("--grid", required=True, metavar="GRID.toml", help="key = [values, ...] per searched key")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--erm", action="store_true")
    p.set_defaults(func=cmd_grid, argv=None)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "argv"):
        args.argv = ["foil", *(sys.argv[1:] if argv is None else argv)]
    logging.basicConfig(level=max(logging.WARNING - 10 * args.verbose, logging.DEBUG),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except FoilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
