"""Shared builders for the test suite: tiny specs, synthetic corpora, generic parameter points."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from seqfn.data import CANONICAL, LabeledExample
from seqfn.mamba import ModelParams, ModelSpec, _inverse_softplus

FIXTURES = Path(__file__).parent / "fixtures"

TINY = ModelSpec(vocab_size=25, d_model=8, n_layers=2, d_state=4)


def generic_point(params: ModelParams, seed: int = 0) -> ModelParams:
    """Move a freshly initialised model to a generic point for finite-difference checks.

    At initialisation the step sizes sit in [1e-3, 1e-1], so gradients for the
    step projection and A_log are ~1e-7 and central differences with h=1e-5
    are dominated by rounding. Raising the steps to O(1) and jittering the
    unit/zero vectors keeps every gradient well above that floor.
    """
    rng = np.random.default_rng([seed, 99])
    for name, t in params.items():
        if name.endswith("dt_bias"):
            t.data[...] = _inverse_softplus(rng.uniform(0.3, 1.5, t.shape))
        elif name.endswith(("norm", "norm_f", ".D")):
            t.data[...] = rng.uniform(0.5, 1.5, t.shape)
        elif t.ndim == 1:
            t.data[...] = rng.uniform(-0.3, 0.3, t.shape)
    return params


def random_protein(rng: np.random.Generator, length: int, alphabet: str = CANONICAL) -> str:
    return "".join(rng.choice(list(alphabet), size=length))


def memorizable_corpus(n: int = 50, length: int = 40, n_templates: int = 5, seed: int = 0) -> list[str]:
    """``n`` sequences of ``length`` residues over A/C/D/E, cycling through a few periodic templates.

    Each template repeats a 4-residue motif, so after the first few residues
    every next token is determined. The per-token entropy floor is
    ln(n_templates) / (length + 1).
    """
    rng = np.random.default_rng(seed)
    motifs: list[str] = []
    while len(motifs) < n_templates:
        m = random_protein(rng, 4, "ACDE")
        if len(set(m)) >= 3 and m not in motifs:
            motifs.append(m)
    reps = -(-length // 4)
    return [(motifs[i % n_templates] * reps)[:length] for i in range(n)]


def a_fraction_sequences(rng: np.random.Generator, n: int, min_len: int = 20, max_len: int = 40):
    """Random proteins whose share of 'A' varies from sequence to sequence (uniform rate in [0, 0.6])."""
    others = list(CANONICAL.replace("A", ""))
    out = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        rate = rng.uniform(0.0, 0.6)
        out.append("".join("A" if rng.random() < rate else rng.choice(others) for _ in range(length)))
    return out


def a_fraction(seq: str) -> float:
    return seq.count("A") / len(seq)


def a_fraction_task(seed: int, n_train: int, n_valid: int, task: str = "regression") -> list[LabeledExample]:
    """Labeled examples: label = fraction of 'A' (regression) or fraction > 0.3 (classification)."""
    rng = np.random.default_rng(seed)
    examples = []
    for split, n in (("train", n_train), ("valid", n_valid)):
        for s in a_fraction_sequences(rng, n):
            f = a_fraction(s)
            examples.append(LabeledExample(s, f if task == "regression" else float(f > 0.3), split))
    return examples
