"""Command-line entry point: collect / train / plan / eval / grid / plot."""

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .errors import ConfigError
from .numerics import Rng


def _load_config(path):
    with open(path) as fh:
        return harness.parse_config(fh.read())


def _parse_values(raw):
    out = []
    for token in raw.split(","):
        token = token.strip()
        try:
            out.append(json.loads(token))
        except json.JSONDecodeError:
            out.append(token)
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="dynabench",
        description="Learned dynamics models evaluated by CEM-MPC planning")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", default=None, help="output root "
                       "(default: $DYNABENCH_OUT or ./runs)")
        p.add_argument("--force", action="store_true",
                       help="recompute even if a record exists")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="run seed (default: every eval seed)")

    p = sub.add_parser("collect", help="collect and cache the dataset")
    common(p, seed=False)

    p = sub.add_parser("train", help="train a model (no planner evaluation)")
    common(p)

    p = sub.add_parser("plan", help="run one MPC episode with a trained model")
    common(p)
    p.add_argument("--true-model", action="store_true",
                   help="plan with the ground-truth model instead")

    p = sub.add_parser("eval", help="full pipeline: dataset, train, evaluate")
    common(p)
    p.add_argument("--true-model", action="store_true",
                   help="ground-truth planning baseline (skips training)")

    p = sub.add_parser("grid", help="run an ablation grid over one config field")
    common(p, seed=False)
    p.add_argument("--axis", required=True,
                   help="dotted config field, e.g. train.multistep_horizon")
    p.add_argument("--values", required=True,
                   help="comma-separated values for the axis")
    p.add_argument("--seeds", default=None,
                   help="comma-separated seeds (default: config eval.seeds)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--true-model", action="store_true")

    p = sub.add_parser("plot", help="emit curve CSVs and SVG charts")
    p.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args):
    if args.command == "plot":
        for path in harness.emit_curves(args.out):
            print(path)
        return 0

    cfg = _load_config(args.config)
    root = harness.output_root(args.out)

    if args.command == "collect":
        ds = harness.get_dataset(cfg, root)
        print(f"dataset ready: {ds.n_episodes} episodes, "
              f"{ds.n_transitions} transitions "
              f"({root / 'datasets' / (harness.dataset_cache_key(cfg) + '.dynd')})")
        return 0

    seeds = cfg["eval"]["seeds"] if args.seed is None else [args.seed]

    if args.command == "grid":
        if args.seeds is not None:
            seeds = [int(s) for s in args.seeds.split(",")]
        records = harness.run_grid(cfg, args.axis, _parse_values(args.values),
                                   seeds, out_root=root, workers=args.workers,
                                   force=args.force,
                                   use_true_model=args.true_model)
        ok = sum(1 for r in records if r.get("status") == "ok")
        print(f"grid complete: {ok}/{len(records)} cells ok "
              f"(table: {root / ('grid_' + args.axis.replace('.', '_') + '.csv')})")
        return 0 if ok == len(records) else 1

    if args.command == "train":
        cfg = dict(cfg)
        cfg["eval"] = dict(cfg["eval"], episodes_per_seed=0)
        for seed in seeds:
            record = harness.run_experiment(cfg, seed, root, force=args.force)
            print(f"seed {seed}: status={record['status']} "
                  f"checkpoint={record.get('checkpoint')}")
        return 0

    if args.command == "plan":
        from . import envs
        from .evaluation import discrepancy_stats, normalized_reward
        from .models import TrueModel, load_model
        from .planner import PlannerConfig, mpc_episode

        spec = envs.make_env_spec(cfg["env"], cfg["env_overrides"])
        reward_fn = envs.make_reward_fn(cfg["env"], cfg["task"],
                                        cfg["reward_overrides"])
        for seed in seeds:
            if args.true_model:
                model = TrueModel(spec, cfg["model"]["dt_multiple"] * spec.dt_base)
            else:
                ckpt = root / harness.config_hash(cfg) / f"seed{seed}" / "model.dynm"
                if not ckpt.exists():
                    print(f"seed {seed}: no checkpoint at {ckpt}; "
                          f"run `dynabench train` first", file=sys.stderr)
                    return 1
                model = load_model(ckpt)
            episode, log = mpc_episode(
                PlannerConfig(**cfg["planner"]), spec, reward_fn, model,
                episode_len=cfg["episode_length"], rng=Rng(seed).fork("eval/0"))
            stats = discrepancy_stats(log)
            print(f"seed {seed}: normalized reward "
                  f"{normalized_reward(episode):.1f}, discrepancy mean "
                  f"{stats['mean']:+.4f} (frac>0 {stats['fraction_positive']:.2f})")
        return 0

    # eval
    for seed in seeds:
        if args.true_model:
            record = harness.true_model_baseline(cfg, seed, root,
                                                 force=args.force)
        else:
            record = harness.run_experiment(cfg, seed, root, force=args.force)
        metrics = record.get("metrics") or {}
        print(f"seed {seed}: status={record['status']} "
              f"reward={metrics.get('reward_mean')} "
              f"nmse={metrics.get('kstep_nmse')}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
