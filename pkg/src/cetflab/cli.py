"""Command-line entry point: ``cetflab <subcommand> [--config F] [--seed S] [--out D] [--threads N]``.

Every subcommand works on one run directory and reuses whatever earlier
subcommands left there, so ``train``, ``detect`` and ``repair`` can be run one
at a time or all at once through ``run-all``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .cetf import AuxPool
from .errors import ConfigError, LabError
from .harness import (
    CLEAN_ID_OFFSET,
    ExperimentConfig,
    StageError,
    Workspace,
    histogram_csv,
    load_config,
    run_experiment,
    sweep,
    sweep_csv,
    transition_histogram,
    verify,
)
from .poison import save_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 2, 3, 4

DEFAULT_SWEEPS = {"individuals": "10,20,30,40,50", "alpha": "0.1,0.3,0.5,0.7,0.9"}


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "preset", None) is not None:
        cfg.attack.preset = args.preset
    if getattr(args, "method", None) is not None:
        cfg.repair.method = args.method
    return cfg.validate()


def _workspace(args) -> Workspace:
    return Workspace(_config(args), threads=args.threads, cache_dir=args.cache_dir)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_synth(args) -> int:
    ws = _workspace(args)
    s = ws.splits
    save_dataset(s.clean_train, ws.out / "train_clean.cbds")
    _print({"train": len(s.clean_train), "val": len(s.val), "eval": len(s.eval)})
    return EXIT_OK


def cmd_poison(args) -> int:
    ws = _workspace(args)
    s = ws.splits
    save_dataset(s.train, ws.out / "train_poisoned.cbds")
    _print({"poisoned_train": int(s.train.poisoned_flags.sum()), "triggered_eval": len(s.triggered)})
    return EXIT_OK


def cmd_train(args) -> int:
    ws = _workspace(args)
    ws.net
    print(ws.out / "model.ckpt")
    return EXIT_OK


def cmd_eval(args) -> int:
    ws = _workspace(args)
    _print(ws.attack_eval(ws.net).to_record())
    return EXIT_OK


def cmd_detect(args) -> int:
    ws = _workspace(args)
    ws.screen()
    filtered = ws.filtered()
    _print(filtered.to_record() if filtered else {"screened": 0})
    return EXIT_OK


def cmd_repair(args) -> int:
    ws = _workspace(args)
    _, rec = ws.repair()
    if rec is None:
        print("no trigger extracted; nothing repaired", file=sys.stderr)
        return EXIT_OK
    _print({k: rec[k] for k in ("method", "accu_before", "accu_after", "asr_before", "asr_after", "changed")})
    return EXIT_OK


def _values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"cannot parse sweep values {text!r}") from e


def cmd_sweep(args) -> int:
    ws = _workspace(args)
    net, s = ws.net, ws.splits
    hits, _ = ws.screened_rows()
    pool = AuxPool.from_images(net, s.val.images)
    values = _values(args.values or DEFAULT_SWEEPS[args.parameter])
    rows = sweep(net, s.triggered.images[hits], pool, ws.cfg.detect_config(), args.parameter, values, args.threads)
    text = sweep_csv(rows)
    (ws.out / f"sweep_{args.parameter}.csv").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_histogram(args) -> int:
    ws = _workspace(args)
    net, s = ws.net, ws.splits
    hits, clean_rows = ws.screened_rows()
    pool = AuxPool.from_images(net, s.val.images)
    clean, poisoned = transition_histogram(
        net, s.eval.images[clean_rows], s.triggered.images[hits], ws.cfg.detect_config(), pool, args.threads
    )
    text = histogram_csv(clean, poisoned)
    (ws.out / "histogram.csv").write_text(text, encoding="utf-8")
    with open(ws.out / "ratios.jsonl", "w", encoding="utf-8") as fh:
        for kind, ids, ratios in (("clean", clean_rows + CLEAN_ID_OFFSET, clean), ("poisoned", hits, poisoned)):
            for i, r in zip(ids, ratios):
                fh.write(json.dumps({"set": kind, "input_id": int(i), "transition_ratio": float(r)}) + "\n")
    print(text, end="")
    return EXIT_OK


def cmd_run_all(args) -> int:
    cfg = _config(args)
    out = run_experiment(cfg, threads=args.threads, cache_dir=args.cache_dir)
    _print(json.loads((out / "report.json").read_text(encoding="utf-8")))
    return EXIT_OK


def cmd_verify(args) -> int:
    run = Path(args.out if args.out is not None else (_config(args).out))
    problems = verify(run)
    for p in problems:
        print(f"MISMATCH {p}")
    print(f"verify {run}: {'ok' if not problems else f'{len(problems)} mismatches'}")
    return EXIT_OK if not problems else EXIT_VERIFY


COMMANDS = {
    "synth": (cmd_synth, "generate the clean synthetic datasets"),
    "poison": (cmd_poison, "poison the training set and trigger the evaluation set"),
    "train": (cmd_train, "train the backdoored model"),
    "eval": (cmd_eval, "clean accuracy and attack success rate"),
    "detect": (cmd_detect, "screen poisoned and clean inputs with the trigger filter"),
    "repair": (cmd_repair, "remove the backdoor with the extracted trigger"),
    "sweep": (cmd_sweep, "post-defense ASR over a detector parameter"),
    "histogram": (cmd_histogram, "transition-ratio histogram of clean and poisoned inputs"),
    "run-all": (cmd_run_all, "every stage, then report and summary row"),
    "verify": (cmd_verify, "recompute a run's numbers from its artifacts"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="root seed, overrides [run] seed")
    common.add_argument("--out", help="run directory, overrides [run] out")
    common.add_argument("--threads", type=int, default=1, help="detection worker threads")
    common.add_argument("--cache-dir", help="reuse trained models keyed by their training config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cetflab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=fn)
        if name in ("synth", "poison", "train", "eval", "detect", "repair", "sweep", "histogram", "run-all"):
            p.add_argument("--preset", help="trigger preset, overrides [attack] preset")
        if name in ("repair", "run-all"):
            p.add_argument("--method", help="repair method, overrides [repair] method")
        if name == "sweep":
            p.add_argument("--parameter", choices=sorted(DEFAULT_SWEEPS), default="individuals")
            p.add_argument("--values", help="comma-separated values")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(e.cause, ConfigError) else EXIT_DATA
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except LabError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
