"""Command-line entry point: generate, train, eval, ablate, compare."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from kaprompt.checkpoint import load_checkpoint
from kaprompt.errors import ConfigError, KAPromptError

from kaprompt.harness.ablation import checkpoint_test_sets, shuffle_ablation, write_ablation
from kaprompt.harness.config import ExperimentConfig, dump_config, load_config
from kaprompt.harness.data import generate_stream, write_stream
from kaprompt.harness.experiment import avg_acc, evaluate, run_experiment

USAGE_EXIT = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() controls the exit code."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "method", None):
        changes["method"] = args.method
    if getattr(args, "output_dir", None):
        changes["output_dir"] = args.output_dir
    return ExperimentConfig.from_dict({**cfg.to_dict(), **changes}) if changes else cfg


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out or Path(cfg.output_dir) / "data")
    paths = write_stream(generate_stream(cfg), out)
    print(f"wrote {len(paths)} files to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    dump_config(cfg, Path(cfg.output_dir) / "config.yaml")
    result = run_experiment(cfg)
    print(f"method={cfg.method} seed={cfg.seed} avg_acc={result.avg_acc:.4f} out={cfg.output_dir}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config, test_sets = checkpoint_test_sets(ckpt)
    accs = evaluate(ckpt.pool, ckpt.backbone, ckpt.head, test_sets, config.top_k)
    for i, a in enumerate(accs, start=1):
        print(f"domain {i}: {a:.4f}")
    print(f"avg_acc={avg_acc(accs):.4f}")
    return 0


def cmd_ablate(args) -> int:
    rows = shuffle_ablation(args.checkpoint, n_shuffles=args.shuffles,
                            seed=0 if args.seed is None else args.seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent.parent / "ablation.csv"
    write_ablation(rows, out)
    for r in rows:
        print(f"{r.condition}: {r.avg_acc:.4f}")
    print(f"wrote {out}")
    return 0


def compare_arms(base: ExperimentConfig, seeds, out_dir=None):
    """Final Avg-ACC of both arms for each seed: list of (seed, ka, baseline)."""
    results = []
    for s in seeds:
        accs = {}
        for method in ("ka_prompt", "baseline_independent"):
            cfg = base.replace(seed=s, method=method,
                               output_dir=str(Path(out_dir or base.output_dir) / f"seed_{s}" / method))
            accs[method] = run_experiment(cfg, write_outputs=out_dir is not None).avg_acc
        results.append((s, accs["ka_prompt"], accs["baseline_independent"]))
    return results


def cmd_compare(args) -> int:
    cfg = _config(args)
    first = cfg.seed
    seeds = list(range(first, first + args.seeds))
    rows = compare_arms(cfg, seeds, out_dir=cfg.output_dir)
    out = Path(cfg.output_dir) / "compare.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "ka_prompt", "baseline_independent", "margin"])
        for s, ka, bl in rows:
            w.writerow([s, repr(ka), repr(bl), repr(ka - bl)])
            print(f"seed {s}: ka_prompt={ka:.4f} baseline_independent={bl:.4f}")
    mean_ka = avg_acc([r[1] for r in rows])
    mean_bl = avg_acc([r[2] for r in rows])
    wins = sum(ka > bl for _, ka, bl in rows)
    print(f"mean: ka_prompt={mean_ka:.4f} baseline_independent={mean_bl:.4f} "
          f"margin={mean_ka - mean_bl:+.4f} wins={wins}/{len(rows)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML file of experiment settings")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="kaprompt", description="Prompt-pool domain-incremental learning experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write the synthetic domains as CSV")
    g.add_argument("--out", help="output directory (default: <output_dir>/data)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="run one sequential experiment")
    t.add_argument("--method", choices=("ka_prompt", "baseline_independent"))
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on its test sets")
    e.add_argument("checkpoint")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="prompt-component shuffle ablation")
    a.add_argument("checkpoint")
    a.add_argument("--shuffles", type=int, default=4)
    a.add_argument("--out", help="CSV path (default: ablation.csv next to the run)")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("compare", parents=[common], help="both arms over several seeds")
    c.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds from --seed")
    c.add_argument("--output-dir")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (KAPromptError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
