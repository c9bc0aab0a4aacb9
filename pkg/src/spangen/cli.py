"""Command-line surface: corpus-build, corpus-filter, train, generate,
evaluate, one2many.

Every command resolves a RunConfig (flags > file > defaults), echoes it to
<run-dir>/config.json, writes a `<artifact>.config.json` sidecar next to
each artifact, and holds a lock file so concurrent invocations cannot
share a run directory. Reports are written as JSON plus a delimited CSV
and matplotlib figures.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import corpus as corpus_mod
from . import figures, metrics
from .config import ConfigError, RunConfig, load_config, write_config_echo
from .generation import generate_log
from .metrics import build_report, load_generation_log, one2many_ratios, save_generation_log
from .nets import load_checkpoint
from .training import derive_seed, run_training

LOCK_NAME = ".lock"


def _timestamped(name: str) -> Path:
    stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%d-%H%M%S")
    return Path("runs") / f"{name}-{stamp}"


def _acquire_lock(run_dir: Path) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"run directory {run_dir} is locked by another invocation ({lock} exists)"
        ) from None
    os.close(fd)
    return lock


def _sidecar(artifact: Path, cfg: RunConfig) -> None:
    write_config_echo(artifact.with_name(artifact.name + ".config.json"), cfg)


def _write_json(path: Path, payload, cfg: RunConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _sidecar(path, cfg)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _collect_overrides(args: argparse.Namespace, mapping: dict[str, str]) -> dict:
    overrides = {}
    for dest, dotted in mapping.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[dotted] = value
    for dest, dotted in (
        ("no_discriminator", "train.use_discriminator"),
        ("no_rec_reward", "train.use_rec_reward"),
        ("no_ground_reward", "train.use_ground_reward"),
        ("no_baseline", "train.baseline"),
        ("no_figures", "metrics.figures"),
    ):
        if getattr(args, dest, False):
            overrides[dotted] = False
    return overrides


_COMMON_MAP = {"seed": "seed"}
_PATH_MAP = {
    "corpus": "paths.corpus",
    "splits": "paths.splits",
    "checkpoint": "paths.checkpoint",
    "log": "paths.log",
    "split": "paths.split_name",
}
_TRAIN_MAP = {
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "lambda_aug": "train.lambda_aug",
    "alpha": "train.alpha",
    "mu": "train.mu",
    "rollouts": "train.n_rollouts",
    "augment_cases": "train.augment_cases",
    "grounding_steps": "train.grounding_pretrain_steps",
    "eval_cases": "train.eval_cases",
    "d_model": "model.d_model",
    "max_seq_len": "model.max_len",
}
_DECODE_MAP = {
    "beam_width": "decode.beam_width",
    "min_len": "decode.min_len",
    "max_len": "decode.max_len",
    "repetition_penalty": "decode.repetition_penalty",
}
_CORPUS_MAP = {
    "cases": "corpus.cases",
    "vocab_size": "corpus.vocab_size",
    "focused_fraction": "corpus.focused_fraction",
    "ratios": "corpus.ratios",
}
_METRIC_MAP = {"repetitions": "metrics.repetitions", "mode": "metrics.mode"}


def _resolve(args: argparse.Namespace, *maps: dict[str, str]) -> RunConfig:
    overrides: dict = {}
    for m in maps:
        overrides.update(_collect_overrides(args, m))
    return load_config(args.config, overrides)


def _need(cfg_value, flag: str):
    if cfg_value is None:
        raise ConfigError(f"missing required path: set {flag} (flag) or the matching paths.* key")
    return Path(cfg_value)


def _load_split_cases(cfg: RunConfig) -> list[corpus_mod.DialogueCase]:
    cases = corpus_mod.load_corpus(_need(cfg.paths.corpus, "--corpus"))
    manifest = corpus_mod.load_manifest(_need(cfg.paths.splits, "--splits"))
    return corpus_mod.select_split(cases, manifest, cfg.paths.split_name)


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------


def _cmd_corpus_build(args, cfg: RunConfig, run_dir: Path) -> int:
    cases = corpus_mod.synth_corpus(cfg.corpus.synth_config(derive_seed(cfg.seed, "corpus")))
    split = corpus_mod.split_corpus(cases, tuple(cfg.corpus.ratios), derive_seed(cfg.seed, "split"))
    corpus_path = run_dir / "corpus.jsonl"
    corpus_mod.save_corpus(cases, corpus_path)
    _sidecar(corpus_path, cfg)
    splits_path = run_dir / "splits.json"
    corpus_mod.save_manifest(split, splits_path)
    _sidecar(splits_path, cfg)
    print(f"wrote {corpus_path} ({len(cases)} cases)")
    print(
        f"wrote {splits_path} (train={len(split.train)} valid={len(split.valid)} "
        f"general_test={len(split.general_test)} focused_test={len(split.focused_test)})"
    )
    return 0


def _cmd_corpus_filter(args, cfg: RunConfig, run_dir: Path) -> int:
    cases = corpus_mod.load_corpus(_need(cfg.paths.corpus, "--corpus"))
    kept, report = corpus_mod.filter_corpus(cases)
    out_path = run_dir / "filtered.jsonl"
    corpus_mod.save_corpus(kept, out_path)
    _sidecar(out_path, cfg)
    _write_json(run_dir / "reports" / "filter_report.json", report.as_dict(), cfg)
    print(f"wrote {out_path} (accepted {report.accepted}/{report.total}, rejected {report.rejected})")
    return 0


def _cmd_train(args, cfg: RunConfig, run_dir: Path) -> int:
    cases = corpus_mod.load_corpus(_need(cfg.paths.corpus, "--corpus"))
    manifest = corpus_mod.load_manifest(_need(cfg.paths.splits, "--splits"))
    split = corpus_mod.CorpusSplit(
        train=corpus_mod.select_split(cases, manifest, "train"),
        valid=corpus_mod.select_split(cases, manifest, "valid"),
        general_test=corpus_mod.select_split(cases, manifest, "general_test"),
        focused_test=corpus_mod.select_split(cases, manifest, "focused_test"),
    )
    result = run_training(
        split, cfg.model, cfg.train, cfg.decode, cfg.seed, run_dir,
        config_fingerprint=cfg.fingerprint(),
    )
    _sidecar(run_dir / "logs" / "metrics.jsonl", cfg)
    rows = [
        [r["epoch"], r["sleep_bce"], r["wake_elbo"], r["kl"], r["mean_reward"],
         r["val_metrics"]["elbo"], r["val_metrics"]["kl"]]
        for r in result.metrics
    ]
    _write_csv(run_dir / "logs" / "metrics.csv",
               ["epoch", "sleep_bce", "wake_elbo", "kl", "mean_reward", "val_elbo", "val_kl"], rows)
    if cfg.metrics.figures:
        fig_dir = run_dir / "reports" / "figures"
        fig_dir.mkdir(parents=True, exist_ok=True)
        figures.save_training_curves(result.metrics, fig_dir / "training_curves.png")
    print(f"trained {cfg.train.epochs} epochs on {len(split.train)} cases")
    print(f"validation ELBO: {result.initial_validation['elbo']:.4f} -> {result.final_validation['elbo']:.4f}")
    print(f"checkpoints: {result.checkpoints[-1]}")
    return 0


def _cmd_generate(args, cfg: RunConfig, run_dir: Path) -> int:
    split_cases = _load_split_cases(cfg)
    model, _ = load_checkpoint(_need(cfg.paths.checkpoint, "--checkpoint"))
    rng = np.random.default_rng(derive_seed(cfg.seed, f"generate:{cfg.metrics.mode}"))
    log = generate_log(split_cases, model, cfg.metrics.repetitions, cfg.metrics.mode, cfg.decode, rng)
    out_path = run_dir / "generations.jsonl"
    save_generation_log(log, out_path)
    _sidecar(out_path, cfg)
    print(
        f"wrote {out_path} ({len(log.records)} cases x {log.repetition_count} repetitions, "
        f"mode={cfg.metrics.mode})"
    )
    return 0


def _cmd_evaluate(args, cfg: RunConfig, run_dir: Path) -> int:
    log = load_generation_log(_need(cfg.paths.log, "--log"))
    cases = {c.case_id: c for c in corpus_mod.load_corpus(_need(cfg.paths.corpus, "--corpus"))}
    report = build_report(log, cases)
    _write_json(run_dir / "reports" / "report.json", report, cfg)
    rows = []
    for key in metrics.METRIC_KEYS:
        value = report[key]
        if isinstance(value, dict):
            rows.append([key, "", value["absent"]])
        else:
            rows.append([key, repr(value), ""])
    _write_csv(run_dir / "reports" / "report.csv", ["metric", "value", "absent_reason"], rows)
    if cfg.metrics.figures:
        fig_dir = run_dir / "reports" / "figures"
        fig_dir.mkdir(parents=True, exist_ok=True)
        figures.save_metric_bars(report, fig_dir / "metrics_overview.png")
    print(f"wrote {run_dir / 'reports' / 'report.json'}")
    return 0


def _cmd_one2many(args, cfg: RunConfig, run_dir: Path) -> int:
    log = load_generation_log(_need(cfg.paths.log, "--log"))
    ratios = one2many_ratios(log)
    _write_json(run_dir / "reports" / "one2many.json", ratios, cfg)
    _write_csv(
        run_dir / "reports" / "one2many.csv",
        ["metric", "value"],
        [[k, repr(v)] for k, v in ratios.items()],
    )
    if cfg.metrics.figures:
        fig_dir = run_dir / "reports" / "figures"
        fig_dir.mkdir(parents=True, exist_ok=True)
        figures.save_one2many_bars(ratios, fig_dir / "one2many_ratios.png")
    for key in ("unique_grounding_ratio", "unique_generation_ratio", "effect_of_grounding"):
        print(f"{key} {ratios[key]:.4g}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="JSON config file")
    p.add_argument("--run-dir", type=str, default=None, help="output directory (default: runs/<cmd>-<utc>)")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spangen",
        description="Span-grounded multi-reference dialogue generation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus-build", help="synthesize a corpus and split manifest")
    _add_common(p)
    p.add_argument("--cases", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--focused-fraction", type=float)
    p.add_argument("--ratios", type=float, nargs=3, metavar=("TRAIN", "VALID", "TEST"))
    p.set_defaults(handler=_cmd_corpus_build, maps=(_COMMON_MAP, _CORPUS_MAP))

    p = sub.add_parser("corpus-filter", help="apply the general filter cascade to a corpus")
    _add_common(p)
    p.add_argument("--corpus", type=str)
    p.set_defaults(handler=_cmd_corpus_filter, maps=(_COMMON_MAP, _PATH_MAP))

    p = sub.add_parser("train", help="wake-sleep training on a corpus split")
    _add_common(p)
    p.add_argument("--corpus", type=str)
    p.add_argument("--splits", type=str)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-aug", type=int, help="augmented responses per case")
    p.add_argument("--alpha", type=float, help="reconstruction reward weight")
    p.add_argument("--mu", type=float, help="grounding margin")
    p.add_argument("--rollouts", type=int)
    p.add_argument("--augment-cases", type=int)
    p.add_argument("--grounding-steps", type=int)
    p.add_argument("--eval-cases", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--beam-width", type=int)
    p.add_argument("--min-len", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--repetition-penalty", type=float)
    p.add_argument("--no-discriminator", action="store_true", help="vanilla ELBO ablation")
    p.add_argument("--no-rec-reward", action="store_true")
    p.add_argument("--no-ground-reward", action="store_true")
    p.add_argument("--no-baseline", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(handler=_cmd_train, maps=(_COMMON_MAP, _PATH_MAP, _TRAIN_MAP, _DECODE_MAP))

    p = sub.add_parser("generate", help="repeated generation over a split")
    _add_common(p)
    p.add_argument("--corpus", type=str)
    p.add_argument("--splits", type=str)
    p.add_argument("--split", type=str, help="split name (default general_test)")
    p.add_argument("--checkpoint", type=str)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--mode", choices=["span", "sentence"])
    p.add_argument("--beam-width", type=int)
    p.add_argument("--min-len", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--repetition-penalty", type=float)
    p.set_defaults(handler=_cmd_generate, maps=(_COMMON_MAP, _PATH_MAP, _METRIC_MAP, _DECODE_MAP))

    p = sub.add_parser("evaluate", help="metrics report for a generation log")
    _add_common(p)
    p.add_argument("--corpus", type=str)
    p.add_argument("--log", type=str)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(handler=_cmd_evaluate, maps=(_COMMON_MAP, _PATH_MAP))

    p = sub.add_parser("one2many", help="one-to-many ratio triple for a generation log")
    _add_common(p)
    p.add_argument("--log", type=str)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(handler=_cmd_one2many, maps=(_COMMON_MAP, _PATH_MAP))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    lock = None
    try:
        cfg = _resolve(args, *args.maps)
        run_dir = Path(args.run_dir) if args.run_dir else _timestamped(args.command)
        lock = _acquire_lock(run_dir)
        write_config_echo(run_dir / "config.json", cfg)
        return args.handler(args, cfg, run_dir)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    finally:
        if lock is not None and lock.exists():
            lock.unlink()


if __name__ == "__main__":
    sys.exit(main())
