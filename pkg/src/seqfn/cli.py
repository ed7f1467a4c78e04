"""Command-line entry point: ``seqfn {ingest,pretrain,finetune,evaluate,predict}``.

Exit codes: 0 success, 2 numeric failure (divergence), 64 usage error,
65 data format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .checkpoint import load_checkpoint, save_checkpoint
from .cnn import CnnSpec
from .data import encode, load_labeled_csv, normalize, parse_fasta, parse_pdb, vocab_frequencies, write_fasta
from .errors import CheckpointError, FormatError, SpecMismatchError, TrainingDiverged
from .mamba import ModelSpec
from .train import TrainConfig, evaluate, finetune, predict, pretrain

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE, EXIT_DATA = 0, 2, 64, 65
ARCHS = ("mamba", "cnn")
MODES = ("reference", "fast")

log = logging.getLogger("seqfn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- run configuration -----------------------------------------------------


@dataclass
class RunConfig:
    """Resolved run configuration: model + training + data paths + mode flags.

    Every field is optional in the JSON file. ``train.max_epochs`` defaults to
    100 for pretraining and 50 for fine-tuning.
    """

    arch: str = "mamba"
    seed: int = 0
    mode: str = "reference"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    def model_spec(self, head: str):
        cls = CnnSpec if self.arch == "cnn" else ModelSpec
        try:
            return cls.from_dict({**self.model, "head": head})
        except (TypeError, ValueError) as e:
            raise UsageError(f"invalid model config for arch {self.arch!r}: {e}") from None

    def train_config(self, stage: str) -> TrainConfig:
        base = TrainConfig.pretraining if stage == "pretrain" else TrainConfig.finetuning
        return base(**{"seed": self.seed, **self.train})

    def to_dict(self) -> dict:
        return {"arch": self.arch, "seed": self.seed, "mode": self.mode, "model": dict(self.model),
                "train": dict(self.train), "data": dict(self.data)}


_DATA_KEYS = {"corpus", "csv", "checkpoint", "fasta", "column_map"}


def parse_run_config(obj: dict, arch: str | None = None) -> RunConfig:
    """Validate a config document; unknown keys at any level raise UsageError.

    ``arch`` (from the command line) overrides the document's own value.
    """
    if not isinstance(obj, dict):
        raise UsageError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = RunConfig(**obj)
    if arch is not None:
        cfg.arch = arch
    if cfg.arch not in ARCHS:
        raise UsageError(f"arch must be one of {ARCHS}, got {cfg.arch!r}")
    if cfg.mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}, got {cfg.mode!r}")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise UsageError(f"seed must be an integer, got {cfg.seed!r}")
    for name in ("model", "train", "data"):
        if not isinstance(getattr(cfg, name), dict):
            raise UsageError(f"{name} must be a JSON object")
    bad = sorted(set(cfg.data) - _DATA_KEYS)
    if bad:
        raise UsageError(f"unknown data key(s): {', '.join(bad)}")
    if "head" in cfg.model:
        raise UsageError("model.head is chosen by the command, not the config")
    try:
        cfg.model_spec("regression")
        TrainConfig.from_dict(cfg.train)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from None
    return cfg


def load_run_config(path: str | None, seed: int | None = None, arch: str | None = None) -> RunConfig:
    obj = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                obj = json.load(f)
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}") from None
    cfg = parse_run_config(obj, arch)
    if seed is not None:
        cfg.seed = seed
    env_mode = os.environ.get("SEQFN_MODE")
    if path is None or "mode" not in obj:
        if env_mode:
            cfg.mode = env_mode.strip().lower()
            if cfg.mode not in MODES:
                raise UsageError(f"SEQFN_MODE must be one of {MODES}, got {env_mode!r}")
    return cfg


def _resolved(cfg: RunConfig, stage: str, head: str) -> dict:
    out = cfg.to_dict()
    out["model"] = cfg.model_spec(head).to_dict()
    del out["model"]["head"]
    out["train"] = cfg.train_config(stage).to_dict()
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _existing(path: str | None, what: str) -> str:
    if path is None:
        raise UsageError(f"missing {what}")
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _read_text(path: str) -> str:
    with open(path, "rb") as f:
        return f.read().decode("utf-8", errors="replace")


# -- commands --------------------------------------------------------------


def cmd_ingest(args) -> int:
    records: list[tuple[str, str]] = []
    problems: list[str] = []
    if args.pdb_dir:
        root = Path(_existing(args.pdb_dir, "PDB directory"))
        if not root.is_dir():
            raise UsageError(f"not a directory: {root}")
        files = sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in (".pdb", ".ent"))
        for path in files:
            try:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always")
                    chains = parse_pdb(path.read_bytes())
                for w in caught:
                    problems.append(f"{path.name}: {w.message}")
            except OSError as e:
                problems.append(f"{path.name}: unreadable ({e.strerror})")
                continue
            if not chains:
                problems.append(f"{path.name}: no SEQRES records")
                continue
            if args.single_chain_only and len(chains) > 1:
                continue
            records.extend((f"{path.stem}_{cid}", seq) for cid, seq in chains)
    else:
        fasta = _existing(args.fasta, "FASTA file")
        for header, seq in parse_fasta(_read_text(fasta)):
            if not seq:
                problems.append(f"{header}: empty sequence")
                continue
            records.append((header, seq))

    corpus = []
    for header, seq in records:
        try:
            corpus.append((header, normalize(seq)))
        except FormatError as e:
            problems.append(f"{header}: {e}")
    for p in problems:
        print(f"warning: {p}", file=sys.stderr)
    if not corpus:
        print("error: no sequences produced", file=sys.stderr)
        return EXIT_DATA
    Path(args.out).write_text(write_fasta(corpus), encoding="utf-8")
    print(f"sequences: {len(corpus)}")
    print(vocab_frequencies(s for _, s in corpus).table())
    return EXIT_OK


def _load_corpus(path: str) -> list[str]:
    return [normalize(s) for _, s in parse_fasta(_read_text(path)) if s]


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    corpus_path = args.corpus or cfg.data.get("corpus")
    _existing(corpus_path, "corpus")
    cfg.data["corpus"] = corpus_path
    resolved = _resolved(cfg, "pretrain", "lm")
    if args.dry_run:
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return EXIT_OK
    if cfg.arch != "mamba":
        raise UsageError("pretraining is defined for the mamba architecture only")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", resolved)
    corpus = _load_corpus(corpus_path)
    if not corpus:
        print(f"error: corpus {corpus_path} has no sequences", file=sys.stderr)
        return EXIT_DATA
    with tn.precision(cfg.mode), open(out / "train_log.jsonl", "w", encoding="utf-8") as logf:
        try:
            ckpt = pretrain(corpus, cfg.model_spec("lm"), cfg.train_config("pretrain"), logf)
        except TrainingDiverged as e:
            save_checkpoint(out / "checkpoint.ckpt", e.checkpoint)
            print(f"error: training diverged: {e}; last good checkpoint saved", file=sys.stderr)
            return EXIT_NUMERIC
    save_checkpoint(out / "checkpoint.ckpt", ckpt)
    print(f"best valid loss {ckpt.metadata.get('best_metric')} at epoch {ckpt.metadata.get('epoch')}")
    return EXIT_OK


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def _finetune_one(cfg: RunConfig, args, examples, out: Path) -> float | None:
    head = "binary_classification" if args.task == "classification" else "regression"
    out.mkdir(parents=True, exist_ok=True)
    resolved = _resolved(cfg, "finetune", head)
    resolved["task"] = args.task
    _write_json(out / "config.json", resolved)
    ckpt_path = args.checkpoint or cfg.data.get("checkpoint")
    base = load_checkpoint(_existing(ckpt_path, "checkpoint")) if ckpt_path else None
    spec = cfg.model_spec(head) if (base is None or cfg.model) else None
    if base is not None and base.arch != cfg.arch:
        raise UsageError(f"checkpoint architecture {base.arch!r} does not match --arch {cfg.arch!r}")
    with tn.precision(cfg.mode), open(out / "train_log.jsonl", "w", encoding="utf-8") as logf:
        ckpt = finetune(base, examples, cfg.train_config("finetune"), args.task, spec=spec, arch=cfg.arch,
                        log_stream=logf)
    save_checkpoint(out / "checkpoint.ckpt", ckpt)
    with tn.precision(cfg.mode):
        report = evaluate(ckpt, examples, "valid", args.task)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_json())
    return report.value


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config, args.seed, args.arch)
    data_path = args.data or cfg.data.get("csv")
    _existing(data_path, "labeled CSV")
    cfg.data["csv"] = data_path
    if args.dry_run:
        head = "binary_classification" if args.task == "classification" else "regression"
        print(json.dumps(_resolved(cfg, "finetune", head), indent=2, sort_keys=True))
        return EXIT_OK
    examples = load_labeled_csv(_read_text(data_path), args.task, cfg.data.get("column_map"))
    out = Path(args.out_dir)
    if not args.seeds:
        _finetune_one(cfg, args, examples, out)
        return EXIT_OK
    values = []
    for seed in _parse_seeds(args.seeds):
        cfg.seed = seed
        values.append(_finetune_one(cfg, args, examples, out / f"seed_{seed}"))
    mean, std = float(np.mean(values)), float(np.std(values))
    summary = {"seeds": _parse_seeds(args.seeds), "values": values, "mean": mean, "std": std}
    _write_json(out / "summary.json", summary)
    print(f"{mean:.3f}({std:.3f})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    if args.arch and args.arch != ckpt.arch:
        raise UsageError(f"checkpoint architecture {ckpt.arch!r} does not match --arch {args.arch!r}")
    task = "classification" if ckpt.spec.head == "binary_classification" else "regression"
    examples = load_labeled_csv(_read_text(_existing(args.data, "labeled CSV")), task)
    with tn.precision(_mode_from_env()):
        report = evaluate(ckpt, examples, args.split, args.task_name)
    print(report.to_json() if args.format == "json" else report.table())
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    if ckpt.spec.head == "lm":
        raise UsageError("predict needs a fine-tuned task checkpoint, got a language-model checkpoint")
    records = parse_fasta(_read_text(_existing(args.fasta, "FASTA file")))
    for header, seq in records:
        encode(seq)  # raises FormatError naming the bad position
    with tn.precision(_mode_from_env()):
        preds = predict(ckpt.to_params(), [s for _, s in records])
    for (header, _), value in zip(records, preds):
        name = header.split()[0] if header.split() else header
        sys.stdout.write(f"{name}\t{value:.6g}\n")
    return EXIT_OK


def _mode_from_env() -> str:
    mode = os.environ.get("SEQFN_MODE", "reference").strip().lower() or "reference"
    if mode not in MODES:
        raise UsageError(f"SEQFN_MODE must be one of {MODES}, got {mode!r}")
    return mode


# -- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seqfn", description="Selective state-space protein sequence models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="build a normalized FASTA corpus from PDB or FASTA files")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--pdb-dir")
    src.add_argument("--fasta")
    s.add_argument("--out", required=True)
    s.add_argument("--single-chain-only", action="store_true")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("pretrain", help="next-token pretraining on a FASTA corpus")
    s.add_argument("--config")
    s.add_argument("--corpus")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="fine-tune (or train from scratch) on a labeled CSV")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--task", choices=("regression", "classification"), required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--arch", choices=ARCHS)
    s.add_argument("--seed", type=int)
    s.add_argument("--seeds", help="comma-separated seeds; reports mean(std)")
    s.add_argument("--dry-run", action="store_true")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", help="metric of a task checkpoint on one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "valid", "test"))
    s.add_argument("--arch", choices=ARCHS)
    s.add_argument("--task-name")
    s.add_argument("--format", choices=("json", "table"), default="json")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="per-sequence predictions for a FASTA file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--fasta", required=True)
    s.set_defaults(func=cmd_predict)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"seqfn {args.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SpecMismatchError as e:
        print(f"seqfn {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, CheckpointError) as e:
        print(f"seqfn {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"seqfn {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"seqfn {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
