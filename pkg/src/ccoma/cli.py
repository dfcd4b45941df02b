"""Command-line entry points: ``ccoma train | eval | analyze``.

Exit codes: 0 success, 2 configuration or I/O error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .critic import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("ccoma")


def _overrides(args) -> dict[str, str]:
    ov = {}
    for flag, key in (("algo", "train.algo"), ("env", "env.name"), ("mode", "env.mode"),
                      ("seed", "train.seed"), ("steps", "train.total_steps")):
        value = getattr(args, flag, None)
        if value is not None:
            ov[key] = str(value)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        ov[key.strip()] = value.strip()
    return ov


def cmd_train(args) -> int:
    from .trainer import Trainer

    cfg = load_config(args.config, _overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text())
    metrics = out / "metrics.jsonl"
    metrics.write_text("")
    trainer = Trainer(cfg)
    trainer.save(out / "initial.ccoma")
    try:
        trainer.train(cfg.train.total_steps, metrics_path=metrics, out_dir=out)
    except NumericalError as exc:
        print(f"numerical abort: {exc} (batch dumped to {out / 'nan_batch.npz'})", file=sys.stderr)
        return EXIT_NUMERIC
    trainer.save(out / "final.ccoma")
    if trainer.best_params is not None:
        trainer.save(out / "best.ccoma", trainer.best_params)
    print(f"trained {trainer.step} steps; artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import load_trainer

    trainer = load_trainer(args.checkpoint)
    metrics = trainer.evaluate(n=args.episodes, greedy=args.greedy)
    summary = {
        "checkpoint": str(args.checkpoint),
        "algo": trainer.algo,
        "step": trainer.step,
        "greedy": args.greedy,
        "n_episodes": metrics["n_episodes"],
        "success_rate": metrics["success_rate"],
        "mean_return": metrics["mean_return"],
    }
    print(json.dumps(summary))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(json.dumps(summary) + "\n")
            for i, ret in enumerate(metrics["returns"]):
                rec = {"episode": i, "return": ret}
                if metrics["successes"] is not None:
                    rec["success"] = bool(metrics["successes"][i])
                fh.write(json.dumps(rec) + "\n")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import analyze_traffic, write_grid_csv
    from .trainer import load_trainer

    trainer = load_trainer(args.checkpoint)
    if args.env != "traffic" or trainer.cfg.env.name != "traffic":
        raise ConfigError("analyze supports traffic checkpoints only")
    grid = analyze_traffic(trainer.policy, trainer.env_factory, args.episodes, seed=args.seed,
                           greedy=args.greedy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_grid_csv(out / "brake_probability.csv", grid.brake_probability())
    write_grid_csv(out / "message_norm.csv", grid.mean_message_norm())
    print(f"wrote {out / 'brake_probability.csv'} and {out / 'message_norm.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccoma", description="Communicating COMA for multi-agent control")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write metrics and checkpoints")
    t.add_argument("--config", type=Path)
    t.add_argument("--algo")
    t.add_argument("--env")
    t.add_argument("--mode")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--out", default="runs/latest")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--episodes", type=int, default=96)
    g = e.add_mutually_exclusive_group()
    g.add_argument("--greedy", dest="greedy", action="store_true", default=True)
    g.add_argument("--sample", dest="greedy", action="store_false")
    e.add_argument("--out", type=Path, help="JSON-lines file: summary then one record per episode")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="per-cell brake probability and message norm grids")
    a.add_argument("--checkpoint", type=Path, required=True)
    a.add_argument("--env", default="traffic")
    a.add_argument("--episodes", type=int, default=96)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--greedy", action="store_true", help="act greedily instead of sampling")
    a.add_argument("--out", default="analysis")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
