"""Experiment harness: config parsing with env-keyed defaults, the single-run
pipeline, the resumable ablation grid, aggregation, and curve/plot emission.

Configs are JSON. Every published default lives in DEFAULTS below and is
echoed verbatim into persisted records; a config is addressed by the hash of
its canonical serialization (eval.seeds excluded), which makes grid cells
idempotent and grids resumable.
"""

import copy
import hashlib
import json
import multiprocessing
import os
import time
from pathlib import Path

import numpy as np

from . import envs
from .dataset import (Dataset, collect_dataset, compute_stats, load_dataset,
                      quality_collectors, save_dataset, split)
from .errors import ConfigError
from .evaluation import (MetricReport, discrepancy_stats, divergence_rate,
                         kstep_nmse, merge_discrepancy, normalized_reward)
from .models import TrueModel, make_model, save_model
from .numerics import Rng
from .planner import PlannerConfig, mpc_episode
from .training import TrainConfig, curves_to_csv_rows, train

# ---------------------------------------------------------------------------
# Defaults (env-keyed). The cartpole column mirrors the published
# hyperparameter table; pendulum / reacher2 are desk-scale calibrations.
# ---------------------------------------------------------------------------

DEFAULT_MIX = [
    {"kind": "random", "episodes": 0.35},
    {"kind": "smoothed", "episodes": 0.25, "beta": 2.0, "amplitude": 0.8},
    {"kind": "mpc_true", "episodes": 0.2, "particles": 60},
    {"kind": "mpc_true", "episodes": 0.2, "particles": 120},
]

DEFAULTS = {
    "pendulum": {
        "episode_length": 1000,
        "model": {
            "deterministic": {"hidden": [64, 64], "activation": "swish",
                              "learning_rate": 5e-4, "batch_size": 128,
                              "multistep_horizon": 5, "input_noise": 0.0},
            "stochastic": {"hidden": [64, 64], "activation": "elu",
                           "learning_rate": 5e-4, "batch_size": 64,
                           "multistep_horizon": 1, "input_noise": 1e-2},
        },
        "planner": {"horizon_s": 1.0, "control_spacing_s": 0.04,
                    "particles": 150, "iterations": 1, "elite_frac": 0.1,
                    "sigma_explore": 0.5, "beta": 2.0, "argmax": True,
                    "replan_s": 0.02, "warm_start": True},
    },
    "cartpole_swingup": {
        "episode_length": 1000,
        "model": {
            "deterministic": {"hidden": [128, 128], "activation": "swish",
                              "learning_rate": 5e-4, "batch_size": 256,
                              "multistep_horizon": 20, "input_noise": 0.0},
            "stochastic": {"hidden": [256, 256, 256], "activation": "relu",
                           "learning_rate": 1e-4, "batch_size": 64,
                           "multistep_horizon": 1, "input_noise": 1e-3},
        },
        "planner": {"horizon_s": 1.25, "control_spacing_s": 0.02,
                    "particles": 200, "iterations": 1, "elite_frac": 0.1,
                    "sigma_explore": 0.5, "beta": 2.0, "argmax": True,
                    "replan_s": 0.01, "warm_start": True},
    },
    "reacher2": {
        "episode_length": 1000,
        "model": {
            "deterministic": {"hidden": [96, 96], "activation": "swish",
                              "learning_rate": 5e-4, "batch_size": 128,
                              "multistep_horizon": 5, "input_noise": 0.0},
            "stochastic": {"hidden": [96, 96], "activation": "elu",
                           "learning_rate": 5e-4, "batch_size": 64,
                           "multistep_horizon": 1, "input_noise": 1e-2},
        },
        "planner": {"horizon_s": 0.75, "control_spacing_s": 0.04,
                    "particles": 100, "iterations": 1, "elite_frac": 0.1,
                    "sigma_explore": 0.75, "beta": 2.0, "argmax": True,
                    "replan_s": 0.02, "warm_start": True},
    },
}

_SCHEMA = {
    "env": str,
    "task": str,
    "env_overrides": dict,
    "reward_overrides": dict,
    "episode_length": int,
    "dataset": {
        "seed": int, "episodes": int, "quality": (int, type(None)),
        "collectors": (list, type(None)), "test_fraction": float,
    },
    "model": {
        "kind": str, "hidden": list, "activation": str, "dt_multiple": int,
        "ensemble_size": int, "sigma_min": float, "sigma_max": float,
        "sigma_param": str,
    },
    "train": {
        "loss": str, "multistep_horizon": int, "schedule": str,
        "input_noise": float, "batch_size": int, "learning_rate": float,
        "updates": int, "checkpoint_interval": int, "grad_clip": float,
        "nmse_eval_windows": int,
    },
    "planner": {
        "horizon_s": float, "control_spacing_s": float, "particles": int,
        "iterations": int, "elite_frac": float, "sigma_explore": float,
        "beta": float, "argmax": bool, "replan_s": float, "warm_start": bool,
    },
    "eval": {
        "seeds": list, "episodes_per_seed": int, "nmse_duration_s": float,
        "nmse_max_windows": int,
    },
}


def default_config(env_name: str, model_kind: str = "deterministic") -> dict:
    if env_name not in DEFAULTS:
        raise ConfigError(f"env: unknown env {env_name!r}")
    if model_kind not in ("deterministic", "stochastic"):
        raise ConfigError(f"model.kind: unknown kind {model_kind!r}")
    d = DEFAULTS[env_name]
    m = d["model"][model_kind]
    return {
        "env": env_name,
        "task": envs.ENV_TASKS[env_name][0],
        "env_overrides": {},
        "reward_overrides": {},
        "episode_length": d["episode_length"],
        "dataset": {"seed": 1234, "episodes": 100, "quality": None,
                    "collectors": None, "test_fraction": 0.2},
        "model": {"kind": model_kind, "hidden": list(m["hidden"]),
                  "activation": m["activation"], "dt_multiple": 1,
                  "ensemble_size": 5, "sigma_min": 1e-4, "sigma_max": 10.0,
                  "sigma_param": "raw"},
        "train": {"loss": "nll1" if model_kind == "stochastic" else "nmse_multi",
                  "multistep_horizon": m["multistep_horizon"],
                  "schedule": "none", "input_noise": m["input_noise"],
                  "batch_size": m["batch_size"],
                  "learning_rate": m["learning_rate"], "updates": 20000,
                  "checkpoint_interval": 1000, "grad_clip": 100.0,
                  "nmse_eval_windows": 512},
        "planner": dict(d["planner"]),
        "eval": {"seeds": [0, 1, 2, 3, 4], "episodes_per_seed": 1,
                 "nmse_duration_s": 0.5, "nmse_max_windows": 2000},
    }


def _check_keys(user, schema, path):
    for key, value in user.items():
        if key not in schema:
            raise ConfigError(f"{path}{key}: unknown key")
        expect = schema[key]
        if isinstance(expect, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key}: expected an object")
            _check_keys(value, expect, f"{path}{key}.")
        else:
            kinds = expect if isinstance(expect, tuple) else (expect,)
            if float in kinds and isinstance(value, int) \
                    and not isinstance(value, bool):
                continue
            if not isinstance(value, kinds) or (isinstance(value, bool)
                                                and bool not in kinds):
                names = "/".join(k.__name__ for k in kinds)
                raise ConfigError(f"{path}{key}: expected {names}, "
                                  f"got {type(value).__name__}")


def resolve_config(user: dict) -> dict:
    """Validate a user config and fill every omitted field from the env-keyed
    defaults. Unknown keys are rejected with their path."""
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(user, _SCHEMA, "")
    env_name = user.get("env")
    if env_name is None:
        raise ConfigError("env: required")
    kind = user.get("model", {}).get("kind", "deterministic")
    cfg = default_config(env_name, kind)
    for section, value in user.items():
        if isinstance(value, dict):
            cfg[section].update(value)
        else:
            cfg[section] = value
    _validate_resolved(cfg)
    return cfg


def _validate_resolved(cfg):
    spec = envs.make_env_spec(cfg["env"], cfg["env_overrides"])
    envs.make_reward_fn(cfg["env"], cfg["task"], cfg["reward_overrides"])
    if not cfg["eval"]["seeds"]:
        raise ConfigError("eval.seeds: must be non-empty")
    model = cfg["model"]
    if model["kind"] not in ("deterministic", "stochastic"):
        raise ConfigError(f"model.kind: unknown kind {model['kind']!r}")
    if model["dt_multiple"] < 1:
        raise ConfigError("model.dt_multiple: must be >= 1")
    if model["ensemble_size"] < 1:
        raise ConfigError("model.ensemble_size: must be >= 1")
    dt_model = model["dt_multiple"] * spec.dt_base
    spacing = cfg["planner"]["control_spacing_s"]
    ratio = spacing / dt_model
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ConfigError("planner.control_spacing_s: must be a positive "
                          "multiple of the model dt")
    replan = cfg["planner"]["replan_s"]
    ratio = replan / spec.dt_base
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ConfigError("planner.replan_s: must be a positive multiple of "
                          "the base dt")
    TrainConfig(**{**cfg["train"], "seed": 0})  # field-level validation
    PlannerConfig(**cfg["planner"])
    ds = cfg["dataset"]
    if ds["quality"] is not None and not 0 <= ds["quality"] <= 4:
        raise ConfigError("dataset.quality: must be 0..4 or null")
    if ds["episodes"] < 5:
        raise ConfigError("dataset.episodes: need at least 5")
    loss = cfg["train"]["loss"]
    if model["kind"] == "stochastic" and loss != "nll1":
        raise ConfigError("train.loss: stochastic models require nll1")
    if model["kind"] == "deterministic" and loss == "nll1":
        raise ConfigError("train.loss: nll1 requires a stochastic model")


def parse_config(text: str) -> dict:
    """Parse and fully resolve a JSON config document."""
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return resolve_config(user)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    """Digest of the resolved config, excluding eval.seeds (the per-run seed
    keys the record; the seed list must not invalidate completed cells)."""
    stripped = copy.deepcopy(cfg)
    stripped["eval"]["seeds"] = []
    return hashlib.sha256(canonical_json(stripped).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Pipeline pieces
# ---------------------------------------------------------------------------

def output_root(explicit=None) -> Path:
    root = explicit or os.environ.get("DYNABENCH_OUT") or "runs"
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def resolved_collectors(cfg) -> list:
    ds = cfg["dataset"]
    if ds["quality"] is not None:
        return quality_collectors(ds["quality"], ds["episodes"])
    if ds["collectors"] is not None:
        return ds["collectors"]
    out = []
    assigned = 0
    for i, coll in enumerate(DEFAULT_MIX):
        c = dict(coll)
        if i == len(DEFAULT_MIX) - 1:
            c["episodes"] = ds["episodes"] - assigned
        else:
            c["episodes"] = int(round(coll["episodes"] * ds["episodes"]))
        assigned += c["episodes"]
        out.append(c)
    return out


def dataset_cache_key(cfg) -> str:
    payload = {"env": cfg["env"], "task": cfg["task"],
               "env_overrides": cfg["env_overrides"],
               "reward_overrides": cfg["reward_overrides"],
               "episode_length": cfg["episode_length"],
               "seed": cfg["dataset"]["seed"],
               "collectors": resolved_collectors(cfg)}
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:16]


def get_dataset(cfg, out_root: Path) -> Dataset:
    """Collect the configured dataset, or load it from the shared cache. The
    dataset seed is independent of the run seed, so all run seeds share one
    deterministic collection."""
    cache_dir = out_root / "datasets"
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{dataset_cache_key(cfg)}.dynd"
    if path.exists():
        return load_dataset(path)[0]
    spec = envs.make_env_spec(cfg["env"], cfg["env_overrides"])
    reward_fn = envs.make_reward_fn(cfg["env"], cfg["task"],
                                    cfg["reward_overrides"])
    ds = collect_dataset(spec, reward_fn, resolved_collectors(cfg),
                         Rng(cfg["dataset"]["seed"]),
                         episode_length=cfg["episode_length"])
    tmp = path.with_suffix(".tmp")
    save_dataset(ds, tmp, env_name=cfg["env"])
    os.replace(tmp, path)  # atomic: concurrent collectors write identical bytes
    return ds


def build_model(cfg, stats, rng: Rng):
    spec = envs.make_env_spec(cfg["env"], cfg["env_overrides"])
    m = cfg["model"]
    return make_model(m["kind"], spec, m["hidden"], m["activation"],
                      m["dt_multiple"] * spec.dt_base, stats, rng,
                      ensemble_size=m["ensemble_size"],
                      sigma_min=m["sigma_min"], sigma_max=m["sigma_max"],
                      sigma_param=m["sigma_param"])


def _write_curves_csv(path, curves):
    with open(path, "w") as fh:
        fh.write("update,member,train_loss,test_nmse,planner_reward\n")
        for row in curves_to_csv_rows(curves):
            fh.write(",".join(str(v) for v in row) + "\n")


def run_experiment(cfg: dict, seed: int, out_root=None, force: bool = False) -> dict:
    """Full pipeline for one (config, seed): dataset -> stats -> train ->
    evaluate -> persist. Idempotent: an existing complete record is returned
    unless ``force``. BLAS pools are pinned to one thread so the metrics are
    bit-identical regardless of the surrounding process topology."""
    from threadpoolctl import threadpool_limits

    root = output_root(out_root)
    chash = config_hash(cfg)
    run_dir = root / chash / f"seed{seed}"
    record_path = run_dir / "record.json"
    if record_path.exists() and not force:
        try:
            with open(record_path) as fh:
                record = json.load(fh)
            if record.get("status") in ("ok", "train_aborted"):
                return record
        except (json.JSONDecodeError, OSError):
            pass  # corrupted record: recompute below
    run_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    with threadpool_limits(limits=1):
        record = _run_pipeline(cfg, seed, root, run_dir, chash)
    record["wall_seconds"] = time.perf_counter() - t_start
    tmp = record_path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        json.dump(record, fh, indent=1)
    os.replace(tmp, record_path)
    return record


def _run_pipeline(cfg, seed, root, run_dir, chash):
    spec = envs.make_env_spec(cfg["env"], cfg["env_overrides"])
    reward_fn = envs.make_reward_fn(cfg["env"], cfg["task"],
                                    cfg["reward_overrides"])
    data = get_dataset(cfg, root)
    split_rng = Rng(cfg["dataset"]["seed"])
    train_ds, test_ds = split(data, cfg["dataset"]["test_fraction"], split_rng)
    stats = compute_stats(train_ds)

    record = {"config_hash": chash, "seed": seed, "env": cfg["env"],
              "task": cfg["task"], "config": cfg, "status": "ok",
              "dataset_episodes": data.n_episodes,
              "dataset_mean_reward": float(np.mean(
                  [ep.rewards.mean() for ep in data.episodes]))}
    run_rng = Rng(seed)
    model = build_model(cfg, stats, run_rng.fork("model_init"))
    tcfg = TrainConfig(**{**cfg["train"], "seed": seed,
                          "nmse_duration_s": cfg["eval"]["nmse_duration_s"]})
    model, curves = train(model, train_ds, tcfg, test_ds=test_ds)
    _write_curves_csv(run_dir / "curves.csv", curves)
    save_model(model, run_dir / "model.dynm")
    record["curves"] = str(run_dir / "curves.csv")
    record["checkpoint"] = str(run_dir / "model.dynm")
    record["horizon_trace"] = [list(t) for t in curves[0].horizon_transitions]
    if any(c.aborted for c in curves):
        record["status"] = "train_aborted"
        record["abort_reasons"] = [c.abort_reason for c in curves if c.aborted]
        return record

    pcfg = PlannerConfig(**cfg["planner"])
    report = MetricReport()
    report.kstep_nmse = kstep_nmse(model, test_ds,
                                   duration=cfg["eval"]["nmse_duration_s"],
                                   max_windows=cfg["eval"]["nmse_max_windows"])
    report.divergence_rate = divergence_rate(model, test_ds)
    disc = []
    logs = []
    for i in range(cfg["eval"]["episodes_per_seed"]):
        episode, log = mpc_episode(pcfg, spec, reward_fn, model,
                                   episode_len=cfg["episode_length"],
                                   rng=run_rng.fork(f"eval/{i}"))
        report.normalized_rewards.append(normalized_reward(episode))
        report.partial = report.partial or log.aborted
        disc.append(discrepancy_stats(log))
        logs.append(log)
    report.discrepancy = merge_discrepancy(disc)
    record["metrics"] = report.to_dict()
    with open(run_dir / "discrepancy.json", "w") as fh:
        json.dump([{"t": e["t"],
                    "expected": [float(x) for x in e["expected"]],
                    "realized": [float(x) for x in e["realized"]]}
                   for log in logs for e in log.entries], fh)
    return record


def true_model_baseline(cfg: dict, seed: int, out_root=None,
                        force: bool = False) -> dict:
    """Ground-truth-model planning run (no dataset, no training); persisted
    and cached like any other cell under a derived config hash."""
    from threadpoolctl import threadpool_limits

    root = output_root(out_root)
    chash = "true-" + config_hash(cfg)
    run_dir = root / chash / f"seed{seed}"
    record_path = run_dir / "record.json"
    if record_path.exists() and not force:
        try:
            with open(record_path) as fh:
                record = json.load(fh)
            if record.get("status") == "ok":
                return record
        except (json.JSONDecodeError, OSError):
            pass
    run_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        spec = envs.make_env_spec(cfg["env"], cfg["env_overrides"])
        reward_fn = envs.make_reward_fn(cfg["env"], cfg["task"],
                                        cfg["reward_overrides"])
        model = TrueModel(spec, cfg["model"]["dt_multiple"] * spec.dt_base)
        pcfg = PlannerConfig(**cfg["planner"])
        run_rng = Rng(seed)
        report = MetricReport()
        disc = []
        for i in range(cfg["eval"]["episodes_per_seed"]):
            episode, log = mpc_episode(pcfg, spec, reward_fn, model,
                                       episode_len=cfg["episode_length"],
                                       rng=run_rng.fork(f"eval/{i}"))
            report.normalized_rewards.append(normalized_reward(episode))
            disc.append(discrepancy_stats(log))
        report.discrepancy = merge_discrepancy(disc)
    record = {"config_hash": chash, "seed": seed, "env": cfg["env"],
              "task": cfg["task"], "config": cfg, "status": "ok",
              "model": "true", "metrics": report.to_dict(),
              "wall_seconds": time.perf_counter() - t0}
    tmp = record_path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        json.dump(record, fh, indent=1)
    os.replace(tmp, record_path)
    return record


# ---------------------------------------------------------------------------
# Grid runner
# ---------------------------------------------------------------------------

def set_config_field(cfg: dict, dotted: str, value):
    """Set one configurable field by dotted path, e.g. train.multistep_horizon."""
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"axis {dotted!r}: no such config field")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"axis {dotted!r}: no such config field")
    node[parts[-1]] = value


def _grid_cell(args):
    cfg_json, seed, out_root, force, use_true_model = args
    cfg = json.loads(cfg_json)
    try:
        if use_true_model:
            return true_model_baseline(cfg, seed, out_root, force)
        return run_experiment(cfg, seed, out_root, force)
    except Exception as exc:  # a failed cell must not kill the grid
        return {"config_hash": config_hash(cfg), "seed": seed,
                "status": "failed", "error": f"{type(exc).__name__}: {exc}",
                "config": cfg}


def run_grid(base_cfg: dict, axis: str, values, seeds, out_root=None,
             workers: int = 1, force: bool = False,
             use_true_model: bool = False) -> list:
    """Cross-product of axis values x seeds, resumable, one worker process per
    cell when workers > 1. Returns the list of records and writes the
    aggregate table."""
    root = output_root(out_root)
    cells = []
    for value in values:
        cfg = copy.deepcopy(base_cfg)
        set_config_field(cfg, axis, value)
        cfg = resolve_config(cfg)
        for seed in seeds:
            cells.append((canonical_json(cfg), seed, str(root), force,
                          use_true_model))
    if workers > 1:
        # spawned children inherit single-thread BLAS from this env tweak
        old = {k: os.environ.get(k) for k in
               ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")}
        for k in old:
            os.environ[k] = "1"
        try:
            ctx = multiprocessing.get_context("spawn")
            with ctx.Pool(workers) as pool:
                records = pool.map(_grid_cell, cells)
        finally:
            for k, v in old.items():
                if v is None:
                    os.environ.pop(k, None)
                else:
                    os.environ[k] = v
    else:
        records = [_grid_cell(c) for c in cells]
    write_records(root, axis, values, seeds, base_cfg, use_true_model)
    return records


def _iter_run_records(root: Path):
    for record_path in sorted(root.glob("*/seed*/record.json")):
        try:
            with open(record_path) as fh:
                yield json.load(fh)
        except (json.JSONDecodeError, OSError):
            continue


def write_records(root: Path, axis=None, values=None, seeds=None,
                  base_cfg=None, use_true_model=False):
    """Rebuild records.jsonl and the per-axis summary table from the cell
    records on disk (never shared-mutated; safe to rerun)."""
    records = list(_iter_run_records(root))
    records.sort(key=lambda r: (r.get("config_hash", ""), r.get("seed", 0)))
    with open(root / "records.jsonl", "w") as fh:
        for r in records:
            fh.write(canonical_json(r) + "\n")
    if axis is None:
        return records
    # summary CSV for the requested sweep
    rows = []
    for value in values:
        cfg = copy.deepcopy(base_cfg)
        set_config_field(cfg, axis, value)
        cfg = resolve_config(cfg)
        chash = ("true-" if use_true_model else "") + config_hash(cfg)
        cell = [r for r in records if r.get("config_hash") == chash
                and r.get("seed") in set(seeds)]
        rewards = [r["metrics"]["reward_mean"] for r in cell
                   if r.get("status") == "ok" and r.get("metrics")]
        nmses = [r["metrics"]["kstep_nmse"] for r in cell
                 if r.get("status") == "ok" and r.get("metrics")
                 and r["metrics"]["kstep_nmse"] is not None]
        row = {"axis": axis, "value": value, "n_ok": len(rewards),
               "n_cells": len(cell)}
        if rewards:
            row.update(reward_median=float(np.median(rewards)),
                       reward_p20=float(np.percentile(rewards, 20)),
                       reward_p80=float(np.percentile(rewards, 80)))
        if nmses:
            row.update(nmse_median=float(np.median(nmses)),
                       nmse_p20=float(np.percentile(nmses, 20)),
                       nmse_p80=float(np.percentile(nmses, 80)))
        rows.append(row)
    fields = ["axis", "value", "n_ok", "n_cells", "reward_median",
              "reward_p20", "reward_p80", "nmse_median", "nmse_p20",
              "nmse_p80"]
    safe_axis = axis.replace(".", "_")
    with open(root / f"grid_{safe_axis}.csv", "w") as fh:
        fh.write(",".join(fields) + "\n")
        for row in rows:
            fh.write(",".join(str(row.get(f, "")) for f in fields) + "\n")
    return records


# ---------------------------------------------------------------------------
# Curve CSV + SVG emission
# ---------------------------------------------------------------------------

def _percentile_band(series):
    """series: list of (x, y) lists aligned on x. Returns x, mean, p20, p80."""
    xs = sorted({x for s in series for x, _ in s})
    mean, p20, p80 = [], [], []
    for x in xs:
        ys = [y for s in series for sx, y in s if sx == x and y is not None]
        if not ys:
            mean.append(None), p20.append(None), p80.append(None)
            continue
        mean.append(float(np.mean(ys)))
        p20.append(float(np.percentile(ys, 20)))
        p80.append(float(np.percentile(ys, 80)))
    keep = [i for i, m in enumerate(mean) if m is not None]
    return ([xs[i] for i in keep], [mean[i] for i in keep],
            [p20[i] for i in keep], [p80[i] for i in keep])


def _svg_chart(path, title, xlabel, ylabel, series_by_label):
    """Minimal static SVG line chart: mean line + 20/80 percentile band per
    labelled series. Structure is deliberately stable for golden tests."""
    width, height = 640, 400
    margin = {"l": 70, "r": 20, "t": 40, "b": 50}
    plot_w = width - margin["l"] - margin["r"]
    plot_h = height - margin["t"] - margin["b"]
    all_x = [x for s in series_by_label.values() for x in s[0]]
    all_y = [y for s in series_by_label.values() for band in s[1:] for y in band]
    if not all_x:
        return
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y), max(all_y)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(x):
        return margin["l"] + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y):
        return margin["t"] + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
               "#8c564b", "#e377c2", "#7f7f7f"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<text class="title" x="{width / 2}" y="20" '
             f'text-anchor="middle">{title}</text>',
             f'<line class="axis" x1="{margin["l"]}" y1="{margin["t"] + plot_h}" '
             f'x2="{margin["l"] + plot_w}" y2="{margin["t"] + plot_h}" '
             f'stroke="black"/>',
             f'<line class="axis" x1="{margin["l"]}" y1="{margin["t"]}" '
             f'x2="{margin["l"]}" y2="{margin["t"] + plot_h}" stroke="black"/>',
             f'<text class="xlabel" x="{margin["l"] + plot_w / 2}" '
             f'y="{height - 12}" text-anchor="middle">{xlabel}</text>',
             f'<text class="ylabel" x="16" y="{margin["t"] + plot_h / 2}" '
             f'text-anchor="middle" transform="rotate(-90 16 '
             f'{margin["t"] + plot_h / 2})">{ylabel}</text>']
    for i, (lo_v, hi_v) in enumerate([(x_lo, x_hi)]):
        parts.append(f'<text class="tick" x="{sx(lo_v)}" '
                     f'y="{margin["t"] + plot_h + 16}" text-anchor="middle">'
                     f'{lo_v:g}</text>')
        parts.append(f'<text class="tick" x="{sx(hi_v)}" '
                     f'y="{margin["t"] + plot_h + 16}" text-anchor="middle">'
                     f'{hi_v:g}</text>')
    parts.append(f'<text class="tick" x="{margin["l"] - 6}" '
                 f'y="{sy(y_lo):.1f}" text-anchor="end">{y_lo:.4g}</text>')
    parts.append(f'<text class="tick" x="{margin["l"] - 6}" '
                 f'y="{sy(y_hi):.1f}" text-anchor="end">{y_hi:.4g}</text>')
    for idx, (label, (xs, mean, p20, p80)) in enumerate(series_by_label.items()):
        color = palette[idx % len(palette)]
        band = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, p80))
        band += " " + " ".join(f"{sx(x):.1f},{sy(y):.1f}"
                               for x, y in zip(reversed(xs), reversed(p20)))
        parts.append(f'<polygon class="band" points="{band}" fill="{color}" '
                     f'opacity="0.2"/>')
        line = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, mean))
        parts.append(f'<polyline class="mean" points="{line}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text class="legend" x="{margin["l"] + plot_w - 8}" '
                     f'y="{margin["t"] + 14 + 14 * idx}" text-anchor="end" '
                     f'fill="{color}">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def emit_curves(out_root=None) -> list:
    """Per-sweep CSV plus one SVG per metric (mean line, 20/80 band).

    Returns the list of files written; a no-op with a message when there are
    no records yet."""
    root = output_root(out_root)
    records = [r for r in _iter_run_records(root) if r.get("status") == "ok"]
    if not records:
        print("emit_curves: no records found, nothing to do")
        return []
    curves_dir = root / "curves"
    plots_dir = root / "plots"
    curves_dir.mkdir(exist_ok=True)
    plots_dir.mkdir(exist_ok=True)
    written = []

    csv_path = curves_dir / "learning_curves.csv"
    by_cfg_nmse = {}
    by_cfg_loss = {}
    with open(csv_path, "w") as fh:
        fh.write("config_hash,seed,update,member,train_loss,test_nmse,"
                 "planner_reward\n")
        for r in records:
            curve_file = r.get("curves")
            if not curve_file or not Path(curve_file).exists():
                continue
            with open(curve_file) as cf:
                header = cf.readline()
                for line in cf:
                    update, member, loss, nmse, prew = line.rstrip("\n").split(",")
                    fh.write(f'{r["config_hash"]},{r["seed"]},{update},'
                             f'{member},{loss},{nmse},{prew}\n')
                    label = r["config_hash"][:8]
                    if nmse:
                        by_cfg_nmse.setdefault(label, []).append(
                            (int(update), float(nmse)))
                    by_cfg_loss.setdefault(label, []).append(
                        (int(update), float(loss)))
    written.append(str(csv_path))

    rewards_csv = curves_dir / "rewards.csv"
    by_cfg_reward = {}
    with open(rewards_csv, "w") as fh:
        fh.write("config_hash,seed,reward_mean,kstep_nmse\n")
        for r in records:
            m = r.get("metrics") or {}
            fh.write(f'{r["config_hash"]},{r["seed"]},'
                     f'{m.get("reward_mean", "")},{m.get("kstep_nmse", "")}\n')
            if m.get("reward_mean") is not None:
                by_cfg_reward.setdefault(r["config_hash"][:8], []).append(
                    (r["seed"], m["reward_mean"]))
    written.append(str(rewards_csv))

    for name, by_cfg, xlabel in (("test_nmse", by_cfg_nmse, "updates"),
                                 ("train_loss", by_cfg_loss, "updates")):
        series = {}
        for label, points in sorted(by_cfg.items()):
            series[label] = _percentile_band([points])
        if not series:
            continue
        path = plots_dir / f"{name}.svg"
        _svg_chart(path, name, xlabel, name, series)
        written.append(str(path))
    if by_cfg_reward:
        series = {}
        for label, pairs in sorted(by_cfg_reward.items()):
            series[label] = _percentile_band([pairs])
        path = plots_dir / "reward.svg"
        _svg_chart(path, "normalized reward", "seed", "reward", series)
        written.append(str(path))
    return written
