"""Command-line experiment driver.

Subcommands: generate, train-base, continual, sweep-memory, full-training.
Exit codes: 0 success, 2 usage error, 1 runtime error. All diagnostics go to
stderr; all data goes to files under --out.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .data import CorpusConfig, TASKS, build_corpus, load_corpus, save_corpus
from .experiment import (ExperimentConfig, run_base_training, run_continual,
                         run_full_training, steps_to_accuracy)
from .model import ConvNetClassifier
from .validation import ConfigError

DEFAULT_SWEEP_SIZES = (16, 32, 64, 80, 128, 160)


def _read_config_file(path):
    """Flat `key = value` config file; flags override its values."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _add_common(p):
    p.add_argument("--config", help="flat key = value config file (flags override)")
    p.add_argument("--seed", type=int, default=100, help="first seed")
    p.add_argument("--seeds", type=int, default=5, help="number of seeded repetitions")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")


def _add_corpus_flags(p):
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--base-n", type=int, default=600, help="base split size (task A)")
    p.add_argument("--cont-a", type=int, default=600)
    p.add_argument("--cont-b", type=int, default=400)
    p.add_argument("--cont-c", type=int, default=950)
    p.add_argument("--eval-n", type=int, default=150,
                   help="validation/test size per task")
    p.add_argument("--ramp-fraction", type=float, default=0.15)


def _add_training_flags(p):
    p.add_argument("--corpus", type=Path, required=True, help="corpus directory")
    p.add_argument("--batch", type=int, default=8, help="input-mini-batch size B")
    p.add_argument("--train-batch", type=int, default=8, help="training-mini-batch size T")
    p.add_argument("--lr", type=float, default=3e-3,
                   help="learning rate for base and full training")
    p.add_argument("--stream-lr", type=float, default=5e-4,
                   help="learning rate for the continual stream phase")
    p.add_argument("--base-epochs", type=int, default=6)
    p.add_argument("--full-epochs", type=int, default=12)
    p.add_argument("--probe-every", type=int, default=30)


def build_parser():
    parser = argparse.ArgumentParser(prog="dynmem",
                                     description="Continual-learning experiments with a "
                                                 "gram-distance dynamic rehearsal memory.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate the synthetic corpus")
    _add_common(p)
    _add_corpus_flags(p)

    p = sub.add_parser("train-base", help="train the base model on task A (per seed)")
    _add_common(p)
    _add_training_flags(p)
    p.add_argument("--no-ewc", action="store_true",
                   help="skip Fisher/anchor computation in the checkpoint")

    p = sub.add_parser("continual", help="run a continual strategy over the stream")
    _add_common(p)
    _add_training_flags(p)
    p.add_argument("--strategy", required=True, choices=("naive", "ewc", "ewc-fbn", "dm"))
    p.add_argument("--memory", type=int, default=32, help="memory size M")
    p.add_argument("--lambda", dest="ewc_lambda", type=float, default=3000.0,
                   help="EWC penalty weight")
    p.add_argument("--base", type=Path, default=None,
                   help="directory holding base checkpoints (default: --out)")
    p.add_argument("--recompute-signatures", action="store_true")

    p = sub.add_parser("sweep-memory", help="run the dm strategy across memory sizes")
    _add_common(p)
    _add_training_flags(p)
    p.add_argument("--sizes", type=int, nargs="+", default=list(DEFAULT_SWEEP_SIZES))
    p.add_argument("--base", type=Path, default=None)

    p = sub.add_parser("full-training", help="epoch-based upper bound on all data")
    _add_common(p)
    _add_training_flags(p)
    return parser


def _experiment_config(args):
    return ExperimentConfig(
        seed=args.seed, n_seeds=args.seeds,
        input_batch_size=args.batch, train_batch_size=args.train_batch,
        memory_size=getattr(args, "memory", 32),
        ewc_lambda=getattr(args, "ewc_lambda", 3000.0),
        learning_rate=args.lr, stream_learning_rate=args.stream_lr,
        base_epochs=args.base_epochs,
        full_epochs=args.full_epochs, probe_every=args.probe_every,
        recompute_signatures=getattr(args, "recompute_signatures", False),
    )


def _load_corpus(args, cfg):
    corpus = load_corpus(args.corpus)
    cfg.image_size = corpus.config.image_size
    return corpus


def _write_rows(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ev.rows_to_csv(rows).encode())


def _write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _base_checkpoint(base_dir, seed):
    path = base_dir / f"base_seed{seed}.ckpt"
    if not path.exists():
        raise ConfigError(f"no base checkpoint at {path}; run train-base first")
    return ConvNetClassifier.load(path)


def cmd_generate(args):
    cfg = CorpusConfig(image_size=args.image_size, base_count=args.base_n,
                       continuous_counts=(args.cont_a, args.cont_b, args.cont_c),
                       eval_count=args.eval_n, ramp_fraction=args.ramp_fraction)
    corpus = build_corpus(cfg, seed=args.seed)
    save_corpus(corpus, args.out)
    print(f"corpus written to {args.out}", file=sys.stderr)
    return 0


def cmd_train_base(args):
    cfg = _experiment_config(args)
    corpus = _load_corpus(args, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds():
        model, rows = run_base_training(corpus, cfg, seed, with_ewc=not args.no_ewc)
        model.save(args.out / f"base_seed{seed}.ckpt",
                   seed_provenance={"seed": seed, "corpus_seed": corpus.seed})
        _write_rows(args.out / f"metrics_base_seed{seed}.csv", rows)
        final_acc = rows[-len(TASKS)]["value"]
        print(f"seed {seed}: task-A val accuracy {final_acc:.3f}", file=sys.stderr)
    return 0


def _continual_runs(args, cfg, corpus, strategy, memory_size, out_dir):
    cfg.memory_size = memory_size
    summaries = []
    for seed in cfg.seeds():
        base_dir = getattr(args, "base", None) or args.out
        base_model = _base_checkpoint(base_dir, seed)
        if strategy in ("ewc", "ewc-fbn") and base_model.fisher is None:
            raise ConfigError(f"strategy {strategy} needs a checkpoint with Fisher "
                              f"information (re-run train-base without --no-ewc)")
        result = run_continual(corpus, base_model, strategy, cfg, seed)
        run_dir = out_dir / f"seed{seed}"
        _write_rows(run_dir / "metrics.csv", result.rows)
        summary = dict(result.summary)
        summary["steps_to_c"] = steps_to_accuracy(result.rows, "C")
        _write_json(run_dir / "summary.json", summary)
        if result.memory_dump is not None:
            (run_dir / "memory_dump.txt").write_text(result.memory_dump)
        summaries.append(summary)
        print(f"{strategy} seed {seed}: accA={summary['acc_A']:.3f} "
              f"bwt={summary['bwt']:.3f}", file=sys.stderr)
    agg = ev.aggregate_summaries(summaries, ("acc_A", "acc_B", "acc_C", "bwt", "fwt"))
    _write_json(out_dir / "summary.json",
                {"strategy": strategy, "memory_size": memory_size,
                 "seeds": cfg.seeds(), "aggregate": agg})
    return summaries, agg


def cmd_continual(args):
    cfg = _experiment_config(args)
    corpus = _load_corpus(args, cfg)
    out_dir = args.out / f"{args.strategy}_M{args.memory}" if args.strategy == "dm" \
        else args.out / args.strategy
    _continual_runs(args, cfg, corpus, args.strategy, args.memory, out_dir)
    return 0


def cmd_sweep_memory(args):
    cfg = _experiment_config(args)
    corpus = _load_corpus(args, cfg)
    table_rows = []
    for size in args.sizes:
        out_dir = args.out / f"dm_M{size}"
        summaries, agg = _continual_runs(args, cfg, corpus, "dm", size, out_dir)
        accs = [agg[f"acc_{t}"]["mean"] for t in TASKS]
        steps_c = [s["steps_to_c"] for s in summaries]
        table_rows.append({
            "M": size, "acc_A": accs[0], "acc_B": accs[1], "acc_C": accs[2],
            "acc_avg": float(np.mean(accs)),
            "steps_to_c": float(np.mean(steps_c)),
        })
    lines = ["M,acc_A,acc_B,acc_C,acc_avg,steps_to_c"]
    for r in table_rows:
        lines.append(f"{r['M']},{r['acc_A']},{r['acc_B']},{r['acc_C']},"
                     f"{r['acc_avg']},{r['steps_to_c']}")
    (args.out / "memory_sweep.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_full_training(args):
    cfg = _experiment_config(args)
    corpus = _load_corpus(args, cfg)
    summaries = []
    for seed in cfg.seeds():
        result = run_full_training(corpus, cfg, seed)
        run_dir = args.out / "full" / f"seed{seed}"
        _write_rows(run_dir / "metrics.csv", result.rows)
        _write_json(run_dir / "summary.json", result.summary)
        summaries.append(result.summary)
    agg = ev.aggregate_summaries(summaries, ("acc_A", "acc_B", "acc_C"))
    _write_json(args.out / "full" / "summary.json",
                {"strategy": "full", "seeds": cfg.seeds(), "aggregate": agg})
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train-base": cmd_train_base,
    "continual": cmd_continual,
    "sweep-memory": cmd_sweep_memory,
    "full-training": cmd_full_training,
}


def main(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    # apply config-file values as defaults before parsing flags
    if "--config" in argv:
        cfg_path = argv[argv.index("--config") + 1]
        try:
            file_values = _read_config_file(cfg_path)
        except (OSError, ConfigError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        known = {a.dest: a for sp in parser._subparsers._group_actions
                 for a in sp.choices.values() for a in a._actions}
        defaults = {}
        for key, raw in file_values.items():
            if key not in known:
                print(f"error: unknown config key {key!r}", file=sys.stderr)
                return 2
            action = known[key]
            if action.type is not None:
                defaults[key] = action.type(raw)
            elif isinstance(action.const, bool) or isinstance(action.default, bool):
                defaults[key] = raw.lower() in ("1", "true", "yes")
            else:
                defaults[key] = raw
        for sp in parser._subparsers._group_actions:
            for sub in sp.choices.values():
                sub.set_defaults(**{k: v for k, v in defaults.items()
                                    if any(a.dest == k for a in sub._actions)})
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
