"""Losses, pretraining and fine-tuning loops with early stopping."""

from __future__ import annotations

import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence, TextIO

import numpy as np

from . import tensor as tn
from .checkpoint import Checkpoint
from .cnn import CnnSpec, forward_cnn, init_cnn
from .data import PAD, LabeledExample, make_batches, split_examples
from .errors import NonFiniteError, SpecMismatchError, TrainingDiverged, UndefinedMetricError
from .mamba import ModelParams, ModelSpec, backbone, forward_lm, forward_task, init_head, init_params
from .metrics import EvalReport, compute_metric, metric_for
from .optim import OptimState, adam_step, clip_grad_norm
from .tensor import Tensor

log = logging.getLogger(__name__)

HEAD_FOR_TASK = {"regression": "regression", "classification": "binary_classification"}


@dataclass
class TrainConfig:
    max_epochs: int = 100
    patience: int = 5
    max_tokens: int = 4096
    seed: int = 0
    eval_every: int = 1
    lr: float = 1e-3
    clip_norm: float | None = 1.0
    valid_fraction: float = 0.05
    scan_method: str = "parallel"

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.scan_method not in ("parallel", "sequential"):
            raise ValueError("scan_method must be 'parallel' or 'sequential'")

    @classmethod
    def pretraining(cls, **overrides) -> TrainConfig:
        return cls(**{"max_epochs": 100, **overrides})

    @classmethod
    def finetuning(cls, **overrides) -> TrainConfig:
        return cls(**{"max_epochs": 50, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)


# -- losses ----------------------------------------------------------------


def lm_targets(ids: np.ndarray) -> np.ndarray:
    """Next-token targets: the input shifted left by one, PAD at the end."""
    ids = np.asarray(getattr(ids, "ids", ids), dtype=np.int64)
    targets = np.full_like(ids, PAD)
    targets[..., :-1] = ids[..., 1:]
    return targets


def lm_loss(logits: Tensor, tokens) -> Tensor:
    """Mean next-token cross-entropy (nats) of ``logits`` for input ``tokens``.

    ``logits[t]`` is scored against ``tokens[t+1]``; positions whose target is
    PAD (including the last one) are masked out.
    """
    targets = lm_targets(tokens)
    return tn.cross_entropy(logits, targets, targets != PAD)


def task_loss(pred: Tensor, labels, head: str) -> Tensor:
    """MSE on raw outputs for regression, BCE on logits for classification."""
    labels = np.asarray(labels, dtype=pred.data.dtype).reshape(pred.shape)
    if head in ("binary_classification", "classification"):
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("classification labels must be 0 or 1")
        return tn.bce_with_logits(pred, labels)
    if head != "regression":
        raise ValueError(f"no task loss for head {head!r}")
    diff = pred - tn.Tensor(labels)
    return (diff * diff).mean()


# -- shared helpers --------------------------------------------------------


def task_forward(params: ModelParams, ids: np.ndarray, mask: np.ndarray | None = None,
                 scan_method: str = "parallel") -> Tensor:
    if isinstance(params.spec, CnnSpec):
        return forward_cnn(ids, params, mask)
    return forward_task(ids, params, mask, scan_method)


def predict(params: ModelParams, sequences: Sequence, max_tokens: int = 4096) -> np.ndarray:
    """Outputs in input order: regression values or class-1 probabilities."""
    out = np.empty(len(sequences), dtype=np.float64)
    if not len(sequences):
        return out
    with tn.no_grad():
        for batch in make_batches(list(sequences), max(max_tokens, _longest(sequences)), shuffle=False):
            out[batch.indices] = task_forward(params, batch.ids, batch.mask).data
    if params.spec.head == "binary_classification":
        out = tn._sigmoid(out)
    return out


def _longest(sequences) -> int:
    return max(len(getattr(s, "sequence", s)) for s in sequences) + 2


def _grads(params: ModelParams) -> dict[str, np.ndarray | None]:
    return {k: t.grad for k, t in params.items()}


def _epoch_seed(seed: int, epoch: int) -> list[int]:
    return [int(seed), int(epoch)]


def _hash_fraction(seq: str) -> float:
    return zlib.crc32(seq.encode("utf-8")) / 2**32


def split_corpus(corpus: Sequence[str], valid_fraction: float) -> tuple[list[str], list[str]]:
    """Stable train/valid split by CRC32 of each sequence.

    A sequence goes to validation when its hash falls below ``valid_fraction``.
    Corpora too small to hit the fraction still give one validation
    sequence (the lowest hash) as long as two or more sequences exist.
    """
    train, valid = [], []
    for s in corpus:
        (valid if _hash_fraction(s) < valid_fraction else train).append(s)
    if not valid and len(corpus) >= 2 and valid_fraction > 0:
        pick = min(range(len(train)), key=lambda i: (_hash_fraction(train[i]), i))
        valid.append(train.pop(pick))
    if not train:
        train, valid = valid, []
    return train, valid


class _EarlyStopper:
    def __init__(self, patience: int, higher_is_better: bool):
        self.patience = patience
        self.sign = 1.0 if higher_is_better else -1.0
        self.best = -math.inf
        self.best_value = math.nan
        self.best_epoch = 0
        self.bad = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record an evaluation; True if it is a strict improvement."""
        score = self.sign * value if math.isfinite(value) else -math.inf
        if score > self.best:
            self.best, self.best_value, self.best_epoch, self.bad = score, value, epoch, 0
            return True
        self.bad += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad >= self.patience


def _write_log(stream: TextIO | None, record: dict) -> None:
    if stream is not None:
        stream.write(json.dumps(record, sort_keys=True) + "\n")
        stream.flush()


def _train_step(params: ModelParams, loss: Tensor, state: OptimState, clip_norm: float | None) -> bool:
    params.zero_grad()
    loss.backward()
    grads = _grads(params)
    clipped = False
    if clip_norm is not None:
        norm, clipped = clip_grad_norm(grads, clip_norm)
        if clipped:
            log.debug("gradient norm %.4g clipped to %.4g", norm, clip_norm)
    adam_step(params.tensors, grads, state)
    return clipped


# -- pretraining -----------------------------------------------------------


def lm_eval_loss(params: ModelParams, corpus: Sequence[str], max_tokens: int = 4096,
                 scan_method: str = "parallel") -> float:
    """Token-weighted mean next-token loss over a corpus (no gradients)."""
    total, count = 0.0, 0
    with tn.no_grad():
        for batch in make_batches(list(corpus), max(max_tokens, _longest(corpus)), shuffle=False):
            n = int((lm_targets(batch.ids) != PAD).sum())
            total += float(lm_loss(forward_lm(batch.ids, params, scan_method), batch.ids).data) * n
            count += n
    return total / count


def pretrain(corpus: Sequence[str], spec: ModelSpec, config: TrainConfig, log_stream: TextIO | None = None,
             on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Next-token pretraining with early stopping on held-out loss; returns the best checkpoint."""
    if not corpus:
        raise ValueError("pretrain needs a non-empty corpus")
    if spec.head != "lm":
        spec = spec.with_head("lm")
    train, valid = split_corpus(list(corpus), config.valid_fraction)
    params = init_params(spec, config.seed)
    state = OptimState(lr=config.lr)
    stopper = _EarlyStopper(config.patience, higher_is_better=False)
    best = Checkpoint.from_params(params, None, {"stage": "pretrain", "epoch": 0})
    log.info("pretraining on %d sequences (%d held out), %d parameters", len(train), len(valid), params.n_parameters())

    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        batches = make_batches(train, config.max_tokens, seed=_epoch_seed(config.seed, epoch))
        total, tokens, clipped = 0.0, 0, 0
        for batch in batches:
            loss = lm_loss(forward_lm(batch.ids, params, config.scan_method), batch.ids)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}", best)
            try:
                clipped += _train_step(params, loss, state, config.clip_norm)
            except NonFiniteError as e:
                raise TrainingDiverged(f"epoch {epoch}: {e}", best) from e
            n = int((lm_targets(batch.ids) != PAD).sum())
            total += value * n
            tokens += n
        train_loss = total / max(tokens, 1)
        elapsed = time.perf_counter() - start

        record = {"epoch": epoch, "train_loss": train_loss, "clipped_steps": clipped, "tokens": tokens}
        if epoch % config.eval_every == 0 or epoch == config.max_epochs:
            valid_loss = lm_eval_loss(params, valid or train, config.max_tokens, config.scan_method)
            if not math.isfinite(valid_loss):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", best)
            improved = stopper.update(valid_loss, epoch)
            record.update(valid_loss=valid_loss, improved=improved)
            if improved:
                best = Checkpoint.from_params(params, _copy_state(state), {
                    "stage": "pretrain", "epoch": epoch, "best_metric": valid_loss, "metric": "valid_loss"})
        _write_log(log_stream, record)
        log.info("epoch %d train_loss %.4f valid_loss %s tokens/sec %.0f", epoch, train_loss,
                 f"{record['valid_loss']:.4f}" if "valid_loss" in record else "-", tokens / max(elapsed, 1e-9))
        if on_epoch is not None:
            on_epoch(record)
        if stopper.should_stop:
            log.info("early stop after epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break
    best.metadata["epochs_run"] = epoch
    return best


def _copy_state(state: OptimState) -> OptimState:
    return OptimState(state.lr, state.beta1, state.beta2, state.eps, state.step,
                      {k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()})


# -- fine-tuning -----------------------------------------------------------

_STRUCTURAL = ("vocab_size", "d_model", "n_layers", "d_state", "expand", "conv_kernel",
               "embed_dim", "filters", "kernels")


def check_compatible(ckpt_spec, requested) -> None:
    """Raise SpecMismatchError naming the first structural field that differs."""
    if type(ckpt_spec) is not type(requested):
        raise SpecMismatchError("arch", type(ckpt_spec).__name__, type(requested).__name__)
    for name in _STRUCTURAL:
        if hasattr(ckpt_spec, name) and getattr(ckpt_spec, name) != getattr(requested, name):
            raise SpecMismatchError(name, getattr(ckpt_spec, name), getattr(requested, name))


def build_task_model(checkpoint: Checkpoint | None, head: str, seed: int, spec=None, arch: str = "mamba") -> ModelParams:
    """Backbone from ``checkpoint`` (LM head dropped) plus a freshly initialised task head.

    Without a checkpoint the whole network is initialised from ``spec``.
    """
    if checkpoint is None:
        if spec is None:
            spec = CnnSpec() if arch == "cnn" else ModelSpec()
        spec = spec.with_head(head)
        return init_cnn(spec, seed) if isinstance(spec, CnnSpec) else init_params(spec, seed)
    if spec is not None:
        check_compatible(checkpoint.spec, spec)
    spec = checkpoint.spec.with_head(head)
    arrays = {k: v for k, v in checkpoint.params.items() if not k.startswith(("lm_head.", "head."))}
    if isinstance(spec, CnnSpec):
        fresh = init_cnn(spec, seed)
        arrays.update({k: v.data for k, v in fresh.items() if k.startswith("head.")})
    else:
        arrays.update(init_head(spec, np.random.default_rng([seed, 1])))
    return ModelParams(spec, {k: tn.parameter(v) for k, v in arrays.items()})


def evaluate_params(params: ModelParams, examples: Sequence[LabeledExample], task: str,
                    max_tokens: int = 4096) -> float:
    preds = predict(params, [e.sequence for e in examples], max_tokens)
    return compute_metric(task, preds, [e.label for e in examples])


def finetune(checkpoint: Checkpoint | None, examples: Sequence[LabeledExample], config: TrainConfig, task: str,
             spec=None, arch: str = "mamba", log_stream: TextIO | None = None,
             on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Train every parameter on the labeled train split; early-stop on the valid-split metric.

    ``checkpoint=None`` trains from scratch (the no-pretraining arm).
    Returns the checkpoint with the best validation metric.
    """
    if task not in HEAD_FOR_TASK:
        raise ValueError(f"task must be regression or classification, got {task!r}")
    head = HEAD_FOR_TASK[task]
    train, valid = split_examples(examples, "train"), split_examples(examples, "valid")
    if not train:
        raise ValueError("dataset has no 'train' examples")
    if not valid:
        raise ValueError("dataset has no 'valid' examples")
    if task == "classification":
        bad = [e.label for e in train + valid if e.label not in (0.0, 1.0)]
        if bad:
            raise ValueError(f"classification labels must be 0 or 1, got {bad[0]!r}")

    params = build_task_model(checkpoint, head, config.seed, spec, arch)
    metric = metric_for(task)
    state = OptimState(lr=config.lr)
    stopper = _EarlyStopper(config.patience, higher_is_better=True)
    base = {"stage": "finetune", "task": task, "metric": metric,
            "pretrained": checkpoint is not None}
    best = Checkpoint.from_params(params, None, {**base, "epoch": 0})

    for epoch in range(1, config.max_epochs + 1):
        batches = make_batches(train, config.max_tokens, seed=_epoch_seed(config.seed, epoch))
        total, count, clipped = 0.0, 0, 0
        for batch in batches:
            pred = task_forward(params, batch.ids, batch.mask, config.scan_method)
            loss = task_loss(pred, batch.labels, head)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}", best)
            try:
                clipped += _train_step(params, loss, state, config.clip_norm)
            except NonFiniteError as e:
                raise TrainingDiverged(f"epoch {epoch}: {e}", best) from e
            total += value * len(batch.indices)
            count += len(batch.indices)
        record = {"epoch": epoch, "train_loss": total / max(count, 1), "clipped_steps": clipped}
        if epoch % config.eval_every == 0 or epoch == config.max_epochs:
            try:
                value = evaluate_params(params, valid, task, config.max_tokens)
            except UndefinedMetricError:
                value = math.nan
            improved = stopper.update(value, epoch)
            record.update({f"valid_{metric}": value if math.isfinite(value) else None, "improved": improved})
            if improved:
                best = Checkpoint.from_params(params, _copy_state(state),
                                              {**base, "epoch": epoch, "best_metric": value})
        _write_log(log_stream, record)
        log.info("epoch %d train_loss %.4f valid_%s %s", epoch, record["train_loss"], metric,
                 record.get(f"valid_{metric}"))
        if on_epoch is not None:
            on_epoch(record)
        if stopper.should_stop:
            break
    best.metadata["epochs_run"] = epoch
    return best


def evaluate(checkpoint: Checkpoint, examples: Sequence[LabeledExample], split: str = "test",
             task_name: str | None = None, max_tokens: int = 4096) -> EvalReport:
    """Metric of ``checkpoint`` on one split, with a per-split breakdown of every split present."""
    head = checkpoint.spec.head
    if head not in ("regression", "binary_classification"):
        raise ValueError(f"checkpoint has a {head!r} head; evaluate needs a fine-tuned task model")
    task = "classification" if head == "binary_classification" else "regression"
    params = checkpoint.to_params()
    metric = metric_for(task)
    per_split = {}
    for name in sorted({e.split for e in examples}):
        subset = split_examples(examples, name)
        try:
            v = evaluate_params(params, subset, task, max_tokens)
        except UndefinedMetricError:
            continue
        per_split[name] = {"value": v, "n_examples": len(subset)}
    chosen = split_examples(examples, split)
    if not chosen:
        raise ValueError(f"no examples in split {split!r}")
    value = evaluate_params(params, chosen, task, max_tokens)
    return EvalReport(task_name or task, metric, value, len(chosen), per_split)


def backbone_features(params: ModelParams, ids: np.ndarray) -> np.ndarray:
    with tn.no_grad():
        return backbone(ids, params).data
