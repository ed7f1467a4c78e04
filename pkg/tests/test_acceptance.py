"""End-to-end acceptance checks, one test per criterion, each at its stated tolerance and time budget.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdicts are
repeated in an "acceptance criteria" section at the end of the report.
"""

import json
import math
import os
import time

import numpy as np
import pytest

from helpers import FIXTURES, TINY, a_fraction_sequences, a_fraction_task, generic_point, memorizable_corpus
from seqfn.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from seqfn.cli import main
from seqfn.cnn import CnnSpec, forward_cnn, init_cnn
from seqfn.data import (CANONICAL, decode, encode, flip_to_labeled_csv, load_labeled_csv, pad_batch, parse_pdb,
                        write_fasta)
from seqfn.errors import FormatError
from seqfn.gradcheck import check_params
from seqfn.mamba import ModelSpec, forward_lm, init_params, mamba_block
from seqfn.metrics import spearman
from seqfn import tensor as tn
from seqfn.scan import parallel_scan, sequential_scan
from seqfn.train import TrainConfig, finetune, lm_eval_loss, lm_loss, pretrain

T_GRAD = 6


@pytest.mark.criterion(1, "gradient correctness, Mamba block + model and CNN, rel err < 1e-4, < 60 s")
def test_gradient_correctness(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    errors = {}

    # one residual block, every parameter plus its input
    params = generic_point(init_params(TINY, 0))
    u = tn.parameter(rng.standard_normal((T_GRAD, TINY.d_model)))
    w = tn.Tensor(rng.standard_normal((T_GRAD, TINY.d_model)))
    layer = {k: t for k, t in params.items() if k.startswith("layers.0.")}
    for name, err in check_params(lambda: (mamba_block(u, params, 0) * w).sum(), {**layer, "u": u}).items():
        errors[f"block/{name}"] = err

    # whole language model (embedding, both blocks, final norm, head) through the LM loss
    ids = np.array(encode("MKVA").ids)
    assert len(ids) == T_GRAD
    for name, err in check_params(lambda: lm_loss(forward_lm(ids, params), ids), dict(params.items())).items():
        errors[f"model/{name}"] = err

    # CNN: real kernel sizes, width-8 embedding, tiny filter counts; every entry probed
    cnn = init_cnn(CnnSpec(embed_dim=8, filters=(3, 4, 5, 6)), 1)
    for name, t in cnn.items():
        if name.endswith("bias"):
            t.data[...] = rng.uniform(-0.3, 0.3, t.shape)
    cnn_ids, cnn_mask = pad_batch([encode("MKVA"), encode("GW")])
    cw = rng.standard_normal(2)
    for name, err in check_params(lambda: (forward_cnn(cnn_ids, cnn, cnn_mask) * cw).sum(), dict(cnn.items())).items():
        errors[f"cnn/{name}"] = err

    # CNN at its default widths, 40 sampled entries per tensor
    big = init_cnn(CnnSpec(), 2)
    for name, t in big.items():
        if name.endswith("bias"):
            t.data[...] = rng.uniform(-0.3, 0.3, t.shape)
    big_ids = np.array(encode("MKVA").ids)
    for name, err in check_params(lambda: forward_cnn(big_ids, big) * 1.0, dict(big.items()), max_entries=40).items():
        errors[f"cnn-default/{name}"] = err

    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    criterion.check(errors[worst] < 1e-4 and elapsed < 60,
                    f"{len(errors)} tensors, worst {worst} = {errors[worst]:.2e}, {elapsed:.1f} s")


@pytest.mark.criterion(2, "parallel vs sequential scan, max abs diff < 1e-12, < 30 s")
def test_scan_equivalence(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    lengths = [1, 2, 3, 8, 17, 256, 2048]
    worst = 0.0
    for i in range(100):
        T = lengths[i % len(lengths)]
        a = rng.uniform(0.0, 1.0, (T, 4, 4))
        b = rng.standard_normal((T, 4, 4))
        worst = max(worst, float(np.max(np.abs(parallel_scan(a, b) - sequential_scan(a, b)))))
    elapsed = time.perf_counter() - start
    criterion.check(worst < 1e-12 and elapsed < 30, f"100 sets, max abs diff {worst:.2e}, {elapsed:.1f} s")


@pytest.mark.criterion(3, "strict causality of LM logits, T=64, 20 probes")
def test_causality(criterion):
    params = generic_point(init_params(TINY, 3))
    rng = np.random.default_rng(3)
    worst_before, min_at = 0.0, math.inf
    for _ in range(20):
        ids = rng.integers(3, 24, size=64)
        t = int(rng.integers(0, 64))
        changed = ids.copy()
        changed[t] = 3 + (ids[t] - 3 + int(rng.integers(1, 21))) % 21
        a, b = forward_lm(ids, params).data, forward_lm(changed, params).data
        worst_before = max(worst_before, float(np.max(np.abs(a[:t] - b[:t]), initial=0.0)))
        min_at = min(min_at, float(np.max(np.abs(a[t] - b[t]))))
    criterion.check(worst_before < 1e-12 and min_at > 0,
                    f"max change before t {worst_before:.1e}, min change at t {min_at:.1e}")


def _brute_spearman(p, t):
    def ranks(x):
        return np.array([1 + np.sum(x < v) + (np.sum(x == v) - 1) / 2 for v in x])

    rp, rt = ranks(p), ranks(t)
    dp, dt = rp - rp.mean(), rt - rt.mean()
    return float(np.sum(dp * dt) / math.sqrt(np.sum(dp * dp) * np.sum(dt * dt)))


@pytest.mark.criterion(4, "Spearman equals the brute-force definition to 1e-12; identities hold exactly")
def test_spearman_oracle(criterion):
    rng = np.random.default_rng(4)
    worst, identities = 0.0, True
    for i in range(1000):
        n = int(rng.integers(2, 60))
        if i % 2:
            p, t = rng.integers(0, 5, n).astype(float), rng.integers(0, 5, n).astype(float)
        else:
            p, t = rng.standard_normal(n), rng.standard_normal(n)
        if np.all(p == p[0]) or np.all(t == t[0]):
            continue
        value = spearman(p, t)
        worst = max(worst, abs(value - _brute_spearman(p, t)))
        identities &= spearman(p, p) == 1.0
        identities &= spearman(np.exp(p / 4), t) == value and spearman(p, 2.5 * t + 1.0) == value
    criterion.check(worst < 1e-12 and identities, f"max deviation {worst:.1e}, identities {'hold' if identities else 'broken'}")


@pytest.mark.criterion(5, "overfit pretraining: train loss < 0.1 nats/token within 200 epochs, < 5 min")
def test_overfit_pretraining(criterion):
    corpus = memorizable_corpus(50, 40)
    spec = ModelSpec(d_model=16, n_layers=2, d_state=8)
    initial = lm_eval_loss(init_params(spec, 0), corpus)
    start = time.perf_counter()
    losses = []
    config = TrainConfig(max_epochs=200, patience=200, lr=1e-2, max_tokens=420, valid_fraction=0.0)
    ckpt = pretrain(corpus, spec, config, on_epoch=lambda r: losses.append(r["train_loss"]))
    elapsed = time.perf_counter() - start
    final = lm_eval_loss(ckpt.to_params(), corpus)
    ratio = abs(initial - math.log(25)) / math.log(25)
    criterion.check(final < 0.1 and len(losses) <= 200 and elapsed < 300 and ratio < 0.2,
                    f"initial {initial:.3f} ({ratio:.1%} from ln 25), final {final:.4f} after {len(losses)} epochs, "
                    f"{elapsed:.0f} s")


@pytest.mark.criterion(6, "fine-tune learnability: Spearman > 0.95 and accuracy > 0.9 within 50 epochs, < 5 min each")
def test_finetune_learnability(criterion):
    spec = ModelSpec(d_model=16, n_layers=2, d_state=8)
    config = TrainConfig(max_epochs=50, lr=3e-3, max_tokens=1024)
    results = {}
    for task in ("regression", "classification"):
        start = time.perf_counter()
        ckpt = finetune(None, a_fraction_task(0, 500, 100, task), config, task, spec=spec)
        results[task] = (ckpt.metadata["best_metric"], time.perf_counter() - start)
    (rho, t_reg), (acc, t_cls) = results["regression"], results["classification"]
    criterion.check(rho > 0.95 and acc > 0.9 and t_reg < 300 and t_cls < 300,
                    f"valid Spearman {rho:.3f} ({t_reg:.0f} s), valid accuracy {acc:.3f} ({t_cls:.0f} s)")


@pytest.mark.criterion(7, "pretrained >= from-scratch validation Spearman with 50 training examples, mean of 3 seeds")
def test_pretraining_benefit(criterion):
    spec = ModelSpec(d_model=16, n_layers=2, d_state=8)
    corpus = a_fraction_sequences(np.random.default_rng(100), 2000)
    base = pretrain(corpus, spec, TrainConfig(max_epochs=30, lr=3e-3, max_tokens=1024, seed=0))
    pre, scratch = [], []
    for seed in range(3):
        examples = a_fraction_task(seed, 50, 100)
        config = TrainConfig(max_epochs=50, lr=1e-3, max_tokens=1024, seed=seed)
        pre.append(finetune(base, examples, config, "regression").metadata["best_metric"])
        scratch.append(finetune(None, examples, config, "regression", spec=spec).metadata["best_metric"])
    criterion.check(np.mean(pre) >= np.mean(scratch),
                    f"pretrained {np.mean(pre):.3f} {np.round(pre, 3).tolist()} vs "
                    f"scratch {np.mean(scratch):.3f} {np.round(scratch, 3).tolist()}")


@pytest.mark.criterion(8, "real-data smoke on a user-supplied GB1 CSV: Spearman > 0.2 within 50 epochs, < 15 min")
def test_gb1_smoke(criterion):
    path = os.environ.get("SEQFN_GB1_CSV")
    if not path:
        criterion.skip("set SEQFN_GB1_CSV to a GB1 split file (FLIP or sequence,label,split) to run")
    with open(path, encoding="utf-8") as f:
        text = f.read()
    header = text.splitlines()[0].lower()
    if "target" in header and "set" in header:
        text = flip_to_labeled_csv(text)
    examples = [e for e in load_labeled_csv(text, "regression") if e.split in ("train", "valid")]
    start = time.perf_counter()
    ckpt = finetune(None, examples, TrainConfig(max_epochs=50), "regression",
                    spec=ModelSpec(d_model=64, n_layers=2))
    elapsed = time.perf_counter() - start
    rho = ckpt.metadata["best_metric"]
    criterion.check(rho > 0.2 and elapsed < 900, f"valid Spearman {rho:.3f}, {elapsed:.0f} s")


@pytest.mark.criterion(9, "data pipeline: SEQRES parse, 10,000 round trips, byte-identical checkpoint, CSV line numbers")
def test_data_pipeline(criterion, tmp_path):
    pdb_ok = parse_pdb((FIXTURES / "pdb" / "1gav.pdb").read_bytes()) == [("A", "GAV")]

    rng = np.random.default_rng(9)
    round_trip = all(decode(encode(s)) == s for s in
                     ("".join(rng.choice(list(CANONICAL), int(rng.integers(1, 80)))) for _ in range(10_000)))

    params = init_params(TINY, 0)
    save_checkpoint(tmp_path / "a.ckpt", Checkpoint.from_params(params, metadata={"epoch": 1}))
    save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(tmp_path / "a.ckpt"))
    ckpt_ok = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    ckpt_ok &= to_bytes(from_bytes((tmp_path / "a.ckpt").read_bytes())) == (tmp_path / "a.ckpt").read_bytes()

    lines = []
    for bad_line in (2, 4):
        rows = ["sequence,label,split", "MKV,1,train", "GAV,2,valid", "WWY,3,test"]
        rows[bad_line - 1] = rows[bad_line - 1].rsplit(",", 1)[0] + ",dev"
        try:
            load_labeled_csv("\n".join(rows) + "\n")
        except FormatError as e:
            lines.append(e.line)
    csv_ok = lines == [2, 4]
    criterion.check(pdb_ok and round_trip and ckpt_ok and csv_ok,
                    f"pdb {pdb_ok}, round trip {round_trip}, checkpoint {ckpt_ok}, csv lines {lines}")


@pytest.mark.criterion(10, "determinism: two seeded pretrain runs give byte-identical logs and checkpoints")
def test_determinism(criterion, tmp_path):
    (tmp_path / "corpus.fasta").write_text(write_fasta((f"s{i}", s) for i, s in enumerate(memorizable_corpus(40, 24))))
    (tmp_path / "cfg.json").write_text(json.dumps({"mode": "reference", "model": {"d_model": 8, "n_layers": 2, "d_state": 4},
                                                   "train": {"max_epochs": 4, "max_tokens": 256}}))
    codes = [main(["pretrain", "--config", str(tmp_path / "cfg.json"), "--corpus", str(tmp_path / "corpus.fasta"),
                   "--out-dir", str(tmp_path / run), "--seed", "11"]) for run in ("a", "b")]
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("train_log.jsonl", "checkpoint.ckpt")}
    criterion.check(codes == [0, 0] and all(same.values()), f"exit codes {codes}, identical {same}")
