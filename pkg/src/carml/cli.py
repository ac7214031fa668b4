"""Command-line entry point.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import artifacts
from .config import ConfigError, RunConfig, build_config, parse_config, serialize_config
from .curriculum import CarmlTrainer, derive_rng
from .env import fixed_layout, make_test_tasks
from .evaluation import (
    direct_transfer,
    finetune,
    random_action_transfer,
    render_records,
    render_svg,
    skill_map,
)
from .metapolicy import MetaPolicy
from .scaffold import TaskScaffold, assign_trajectories, fit_scaffold

COMMANDS = ("train", "eval", "skillmap", "cluster", "variants")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with overrides")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", help="run directory (overrides out_dir)")
    common.add_argument("--workers", type=int, default=1, help="rollout workers (results do not depend on it)")

    p = argparse.ArgumentParser(prog="carml", description="Unsupervised meta-RL curriculum on a landmark room.")
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")

    t = sub.add_parser("train", parents=[common], help="run the curriculum")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", parents=[common], help="direct transfer (and optional fine-tuning)")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--finetune", type=int, default=0, metavar="UPDATES")
    e.add_argument("--task", type=int, default=0, help="test task index used for fine-tuning")

    s = sub.add_parser("skillmap", parents=[common], help="per-component trajectory panels")
    s.add_argument("--checkpoint", required=True)

    c = sub.add_parser("cluster", parents=[common], help="assign dumped trajectories to components")
    c.add_argument("--trajectories", required=True, help="trajectory dump (jsonl)")
    c.add_argument("--checkpoint", help="use this run's scaffold instead of fitting one")

    v = sub.add_parser("variants", parents=[common], help="comparison learners")
    v.add_argument("--which", choices=("discriminator", "pipelined", "lambda"), required=True)
    return p


def resolve_config(args) -> RunConfig:
    cfg = parse_config(Path(args.config) if args.config else None)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(out_dir=args.out)
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    return cfg


def _write_new(path: Path, text: str) -> Path:
    """Write without clobbering: identical content is a no-op, otherwise pick a fresh name."""
    if path.exists():
        if path.read_text() == text:
            return path
        i = 1
        while (alt := path.with_name(f"{path.stem}.{i}{path.suffix}")).exists():
            if alt.read_text() == text:
                return alt
            i += 1
        path = alt
    path.write_text(text)
    return path


def _fresh(path: Path) -> Path:
    i = 0
    cand = path
    while cand.exists():
        i += 1
        cand = path.with_name(f"{path.stem}.{i}{path.suffix}")
    return cand


def _load_checkpoint(path):
    arrays, meta = artifacts.load_npz(path)
    if not meta.get("scaffold_history"):
        raise ValueError(f"{path}: checkpoint holds no scaffold")
    scaffold = TaskScaffold.from_dict(meta["scaffold_history"][-1])
    return arrays, meta, scaffold


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    if args.resume:
        trainer = CarmlTrainer.load(args.resume, run_dir=out)
    else:
        if (out / "metrics.jsonl").exists():
            raise UsageError(f"{out} already holds a run; pass --resume or choose another --out")
        trainer = CarmlTrainer(cfg, run_dir=out)
    trainer.run()
    print(f"trained {len(trainer.scaffold_history)} iteration(s); artifacts in {out}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    arrays, meta, _ = _load_checkpoint(args.checkpoint)
    run_cfg = build_config(meta["config"])
    if run_cfg.curriculum.learner != "rl2":
        raise UsageError("eval needs a recurrent meta-policy checkpoint")
    policy = MetaPolicy({k[len("param_"):]: v for k, v in arrays.items() if k.startswith("param_")})
    ec, pc = run_cfg.env, run_cfg.policy
    rng = derive_rng(cfg.seed, "eval")
    tasks = make_test_tasks(ec, rng)
    rep = direct_transfer(policy, tasks, pc.episodes_per_trial, rng, ec, repeats=cfg.eval.test_repeats)
    base = random_action_transfer(tasks, pc.episodes_per_trial, rng, ec, repeats=cfg.eval.test_repeats)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with artifacts.JsonlWriter(_fresh(out / "eval.jsonl"), "eval") as w:
        w.write({"method": "policy", **rep.to_dict()})
        w.write({"method": "random", **base.to_dict()})
        if args.finetune > 0:
            if not 0 <= args.task < len(tasks):
                raise UsageError(f"--task must lie in [0, {len(tasks)})")
            curve = finetune(policy, tasks[args.task], args.finetune, pc, ec, rng,
                             cfg.eval.finetune_tasks_per_update)
            for point in curve:
                w.write({"method": "finetune", "task": args.task, **point})
    print(f"{'method':<10}{'success':>10}{'samples':>10}")
    for name, r in (("policy", rep), ("random", base)):
        print(f"{name:<10}{r.success_rate:>10.3f}{r.sample_count:>10d}")
    return 0


def load_trainer(path) -> CarmlTrainer:
    from .variants import DiscriminatorTrainer

    kind = artifacts.load_npz(path)[1].get("kind")
    for cls in (CarmlTrainer, DiscriminatorTrainer):
        if cls.kind == kind:
            return cls.load(path)
    raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")


def cmd_skillmap(cfg: RunConfig, args) -> int:
    trainer = load_trainer(args.checkpoint)
    if trainer.scaffold is None or trainer.reservoir is None:
        raise ValueError("skillmap needs a curriculum checkpoint with a scaffold and reservoir")
    m = skill_map(trainer.scaffold, trainer.reservoir.items)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_new(out / "skillmap.jsonl", render_records(m))
    landmarks = fixed_layout(trainer.cfg.env).positions if trainer.cfg.env.layout_mode == "fixed" else None
    _write_new(out / "skillmap.svg", render_svg(m, trainer.cfg.env.room_size, landmarks))
    print("component sizes:", [len(p) for p in m.panels])
    return 0


def cmd_cluster(cfg: RunConfig, args) -> int:
    trajs = artifacts.load_trajectories(args.trajectories)
    if not trajs:
        raise ValueError("no trajectories in file")
    obs = np.stack([t.obs for t in trajs])
    if args.checkpoint:
        _, _, scaffold = _load_checkpoint(args.checkpoint)
    else:
        scaffold = fit_scaffold(obs, cfg.scaffold, derive_rng(cfg.seed, "cluster"))
    labels = assign_trajectories(scaffold, obs)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with artifacts.JsonlWriter(_fresh(out / "assignments.jsonl"), "assignments") as w:
        for tr, k in zip(trajs, labels):
            w.write({"episode_id": int(tr.episode_id), "component": int(k)})
    print(f"assigned {len(trajs)} trajectories to {len(set(labels.tolist()))} component(s)")
    return 0


def cmd_variants(cfg: RunConfig, args) -> int:
    from . import variants

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.which == "discriminator":
        rows.append({"variant": "discriminator", **variants.run_variant_online_discriminator(
            cfg, out / "discriminator")["diversity"].to_dict()})
    elif args.which == "pipelined":
        rows.append({"variant": "pipelined", **variants.run_variant_pipelined(
            cfg, run_dir=out / "pipelined")["diversity"].to_dict()})
    else:
        for (lam, seed), d in variants.lambda_study(cfg, seeds=(cfg.seed,)).items():
            rows.append({"variant": "lambda", "lambda": lam, "seed": seed, **d.to_dict()})
    with artifacts.JsonlWriter(_fresh(out / f"variants_{args.which}.jsonl"), "variants") as w:
        for r in rows:
            w.write(r)
    for r in rows:
        print({k: (round(v, 4) if isinstance(v, float) else v) for k, v in r.items()})
    return 0


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "skillmap": cmd_skillmap, "cluster": cmd_cluster,
            "variants": cmd_variants}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        cfg = resolve_config(args)
        if args.command != "train":  # the trainer snapshots its own config
            out = Path(cfg.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            _write_new(out / f"config_{args.command}.toml", serialize_config(cfg))
        return HANDLERS[args.command](cfg, args)
    except (ConfigError, UsageError) as e:
        print(f"carml: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - surface any module failure as exit 1
        print(f"carml: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
