"""Amino-acid vocabulary, tokenization and the file readers for corpora and labeled sets."""

from __future__ import annotations

import csv
import io
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import FormatError


CANONICAL = "ACDEFGHIKLMNPQRSTVWY"
PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>")
# id 24 is reserved and never produced by encode(); it keeps vocab_size at 25
RESERVED = "<mask>"


class Vocabulary:
    """Fixed 25-token vocabulary: PAD=0, BOS=1, EOS=2, X=3, the 20 residues alphabetically, then a reserved id."""

    def __init__(self):
        self.symbols: tuple[str, ...] = SPECIALS + ("X",) + tuple(CANONICAL) + (RESERVED,)
        self.index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def id_of(self, symbol: str) -> int:
        return self.index[symbol]

    def symbol_of(self, token_id: int) -> str:
        return self.symbols[token_id]


VOCAB = Vocabulary()
VOCAB_SIZE = len(VOCAB)
_RESIDUE_IDS = {aa: VOCAB.id_of(aa) for aa in CANONICAL}

THREE_TO_ONE = {
    "ALA": "A", "ARG": "R", "ASN": "N", "ASP": "D", "CYS": "C", "GLN": "Q", "GLU": "E",
    "GLY": "G", "HIS": "H", "ILE": "I", "LEU": "L", "LYS": "K", "MET": "M", "PHE": "F",
    "PRO": "P", "SER": "S", "THR": "T", "TRP": "W", "TYR": "Y", "VAL": "V",
}


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    original_length: int

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class LabeledExample:
    sequence: str
    label: float
    split: str


SPLITS = ("train", "valid", "test")


# -- tokenization ----------------------------------------------------------


def encode(seq: str) -> TokenSequence:
    """BOS + residue ids + EOS. Letters outside the 20 canonical residues become X."""
    if not seq:
        raise FormatError("empty sequence")
    ids = [BOS]
    for pos, ch in enumerate(seq):
        if not ch.isascii() or not ch.isalpha():
            raise FormatError(f"non-alphabetic character {ch!r} in sequence", position=pos)
        ids.append(_RESIDUE_IDS.get(ch.upper(), UNK))
    ids.append(EOS)
    return TokenSequence(tuple(ids), len(seq))


def decode(tokens) -> str:
    """Residue string of a token sequence; PAD/BOS/EOS are dropped."""
    ids = getattr(tokens, "ids", tokens)
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < VOCAB_SIZE or VOCAB.symbols[i] == RESERVED:
            raise ValueError(f"unknown token id {i}")
        if i > EOS:
            out.append(VOCAB.symbols[i])
    if not out:
        raise ValueError("token sequence contains no residues")
    return "".join(out)


def normalize(seq: str) -> str:
    """Uppercase, with every non-canonical letter replaced by X."""
    return decode(encode(seq))


# -- PDB -----------------------------------------------------------------


def _as_text(data) -> str:
    if isinstance(data, (bytes, bytearray)):
        return data.decode("utf-8", errors="replace")
    return data


def parse_pdb(data) -> list[tuple[str, str]]:
    """Per-chain sequences from SEQRES records, as (chain_id, sequence) in file order.

    Residue names come from columns 20 onward; the chain id is column 12.
    Unknown residue codes (MSE, nucleotides, ligands) become X. Malformed
    SEQRES lines are skipped with a warning.
    """
    chains: dict[str, list[str]] = {}
    for lineno, line in enumerate(_as_text(data).splitlines(), start=1):
        if not line.startswith("SEQRES"):
            continue
        serial, chain, count = line[7:10].strip(), line[11:12], line[13:17].strip()
        residues = line[19:].split()
        if len(line) < 20 or not serial.isdigit() or not count.isdigit() or not chain.strip() or not residues:
            warnings.warn(f"skipping malformed SEQRES record at line {lineno}: {line.rstrip()!r}", stacklevel=2)
            continue
        chains.setdefault(chain, []).extend(THREE_TO_ONE.get(r.upper(), "X") for r in residues)
    return [(cid, "".join(res)) for cid, res in chains.items()]


# -- FASTA ---------------------------------------------------------------


def parse_fasta(data) -> list[tuple[str, str]]:
    records: list[tuple[str, str]] = []
    header = None
    chunks: list[str] = []
    for lineno, raw in enumerate(_as_text(data).splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            if header is not None:
                records.append((header, "".join(chunks)))
            header, chunks = line[1:].strip(), []
        elif header is None:
            raise FormatError("sequence data before the first '>' header", line=lineno)
        else:
            chunks.append("".join(line.split()))
    if header is not None:
        records.append((header, "".join(chunks)))
    return records


def write_fasta(records: Iterable[tuple[str, str]], width: int = 60) -> str:
    out = []
    for header, seq in records:
        out.append(f">{header}\n")
        for i in range(0, len(seq), width):
            out.append(seq[i : i + width] + "\n")
    return "".join(out)


# -- labeled CSV ---------------------------------------------------------

TASKS = ("regression", "classification")


def load_labeled_csv(data, task: str | None = None, column_map: dict[str, str] | None = None) -> list[LabeledExample]:
    """Rows of a ``sequence,label,split`` CSV.

    ``column_map`` renames source columns first, e.g. ``{"target": "label"}``.
    With ``task="classification"`` every label must be 0 or 1. Errors carry
    the 1-based line number (the header is line 1).
    """
    if task is not None and task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    reader = csv.reader(io.StringIO(_as_text(data).lstrip("﻿"), newline=""))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise FormatError("empty CSV, expected header sequence,label,split", line=1) from None
    if column_map:
        header = [column_map.get(h, h) for h in header]
    missing = [c for c in ("sequence", "label", "split") if c not in header]
    if missing:
        raise FormatError(f"missing column(s) {', '.join(missing)} in header {header}", line=1)
    col = {name: header.index(name) for name in ("sequence", "label", "split")}

    examples = []
    for row in reader:
        lineno = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            raise FormatError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        seq = row[col["sequence"]].strip()
        if not seq:
            raise FormatError("empty sequence", line=lineno)
        raw_label = row[col["label"]].strip()
        try:
            label = float(raw_label)
        except ValueError:
            raise FormatError(f"unparsable label {raw_label!r}", line=lineno) from None
        if not math.isfinite(label):
            raise FormatError(f"non-finite label {raw_label!r}", line=lineno)
        if task == "classification" and label not in (0.0, 1.0):
            raise FormatError(f"classification label must be 0 or 1, got {raw_label!r}", line=lineno)
        split = row[col["split"]].strip().lower()
        if split not in SPLITS:
            raise FormatError(f"bad split {row[col['split']]!r}, expected one of {SPLITS}", line=lineno)
        examples.append(LabeledExample(seq, label, split))
    return examples


def flip_to_labeled_csv(data) -> str:
    """Convert a FLIP split file (sequence,target,set[,validation]) to sequence,label,split.

    FLIP marks validation rows with ``validation=True`` inside ``set=train``.
    """
    reader = csv.DictReader(io.StringIO(_as_text(data).lstrip("﻿"), newline=""))
    out = io.StringIO(newline="")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["sequence", "label", "split"])
    for lineno, row in enumerate(reader, start=2):
        try:
            seq, target, part = row["sequence"], row["target"], row["set"].strip().lower()
        except KeyError as e:
            raise FormatError(f"missing FLIP column {e.args[0]!r}", line=1) from None
        is_valid = str(row.get("validation", "")).strip().lower() in ("true", "1")
        if part == "test":
            split = "test"
        elif part == "train":
            split = "valid" if is_valid else "train"
        else:
            raise FormatError(f"unknown FLIP set {part!r}", line=lineno)
        writer.writerow([seq, target, split])
    return out.getvalue()


def split_examples(examples: Sequence[LabeledExample], split: str) -> list[LabeledExample]:
    return [e for e in examples if e.split == split]


# -- batching ------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray  # (B, T) int64, PAD-filled
    mask: np.ndarray  # (B, T) bool, True on real tokens (BOS/EOS included)
    labels: np.ndarray | None  # (B,) float or None
    indices: np.ndarray  # positions in the input list

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


def pad_batch(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for row, s in enumerate(seqs):
        ids[row, : len(s)] = s.ids
    return ids, ids != PAD


@dataclass
class Batches:
    """Iterable of padded batches; ``skipped`` counts sequences that did not fit ``max_tokens``."""

    batches: list[Batch]
    skipped: int = 0
    skipped_indices: list[int] = field(default_factory=list)

    def __iter__(self) -> Iterator[Batch]:
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)


def make_batches(examples, max_tokens: int, seed: int | None = 0, shuffle: bool = True,
                 bucket_size: int = 64) -> Batches:
    """Group sequences into padded batches of at most ``max_tokens`` (rows x padded width).

    ``examples`` are raw strings, TokenSequences or LabeledExamples. With
    ``shuffle`` the order is permuted by ``seed``, then sorted by length
    inside buckets of ``bucket_size`` to limit padding, and the batch order
    is permuted again. Without it, input order is kept.
    """
    seqs, labels = [], []
    for ex in examples:
        if isinstance(ex, LabeledExample):
            seqs.append(encode(ex.sequence))
            labels.append(ex.label)
        elif isinstance(ex, TokenSequence):
            seqs.append(ex)
        else:
            seqs.append(encode(ex))
    has_labels = bool(labels)

    order = np.arange(len(seqs))
    rng = np.random.default_rng(seed)
    if shuffle:
        order = rng.permutation(len(seqs))
    kept, skipped = [], []
    for i in order:
        (kept if len(seqs[i]) <= max_tokens else skipped).append(int(i))
    if skipped:
        warnings.warn(f"skipped {len(skipped)} sequence(s) longer than max_tokens={max_tokens}", stacklevel=2)
    if shuffle:
        buckets = [kept[i : i + bucket_size] for i in range(0, len(kept), bucket_size)]
        kept = [i for b in buckets for i in sorted(b, key=lambda j: len(seqs[j]))]

    groups: list[list[int]] = []
    current: list[int] = []
    width = 0
    for i in kept:
        n = len(seqs[i])
        if current and max(width, n) * (len(current) + 1) > max_tokens:
            groups.append(current)
            current, width = [], 0
        current.append(i)
        width = max(width, n)
    if current:
        groups.append(current)
    if shuffle:
        groups = [groups[j] for j in rng.permutation(len(groups))]

    batches = []
    for g in groups:
        ids, mask = pad_batch([seqs[i] for i in g])
        lab = np.asarray([labels[i] for i in g], dtype=np.float64) if has_labels else None
        batches.append(Batch(ids, mask, lab, np.asarray(g, dtype=np.int64)))
    return Batches(batches, len(skipped), sorted(skipped))


# -- composition statistics ----------------------------------------------


@dataclass
class FrequencyReport:
    counts: dict[str, int]
    percent_all: dict[str, float]  # denominator: all residues, X included
    percent_canonical: dict[str, float]  # denominator: canonical residues only
    n_sequences: int
    n_residues: int

    def table(self) -> str:
        lines = [f"{'residue':<8}{'count':>12}{'% all':>10}{'% canon':>10}"]
        for aa in CANONICAL + "X":
            canon = f"{self.percent_canonical[aa]:>10.2f}" if aa in self.percent_canonical else f"{'-':>10}"
            lines.append(f"{aa:<8}{self.counts[aa]:>12}{self.percent_all[aa]:>10.2f}{canon}")
        lines.append(f"{'total':<8}{self.n_residues:>12}  ({self.n_sequences} sequences)")
        return "\n".join(lines)


def vocab_frequencies(corpus: Iterable[str]) -> FrequencyReport:
    """Per-residue percentages, reported with and without X in the denominator."""
    counts: Counter = Counter()
    n_seq = 0
    for seq in corpus:
        counts.update(normalize(seq))
        n_seq += 1
    total = sum(counts.values())
    if total == 0:
        raise ValueError("vocab_frequencies needs a non-empty corpus")
    canon_total = total - counts["X"]
    full = {aa: counts[aa] for aa in CANONICAL + "X"}
    percent_all = {aa: 100.0 * c / total for aa, c in full.items()}
    percent_canon = {aa: (100.0 * full[aa] / canon_total if canon_total else 0.0) for aa in CANONICAL}
    return FrequencyReport(full, percent_all, percent_canon, n_seq, total)
