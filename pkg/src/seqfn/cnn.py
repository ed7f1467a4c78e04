"""1D-CNN baseline: embedding, four same-padded convolutions with ReLU, global max pool, linear head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tn
from .errors import ShapeError
from .mamba import ModelParams, _ids_array, pool_mask, scalar_head
from .tensor import Tensor


@dataclass(frozen=True)
class CnnSpec:
    vocab_size: int = 25
    embed_dim: int = 32
    filters: tuple[int, ...] = (32, 64, 96, 128)
    kernels: tuple[int, ...] = (6, 8, 10, 12)
    head: str = "regression"

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if len(self.filters) != len(self.kernels) or not self.filters:
            raise ValueError("CnnSpec: filters and kernels must be non-empty lists of equal length")
        if min(self.filters + self.kernels) < 1 or self.vocab_size < 1 or self.embed_dim < 1:
            raise ValueError("CnnSpec: sizes must be positive")
        if self.head not in ("regression", "binary_classification"):
            raise ValueError(f"CnnSpec.head must be regression or binary_classification, got {self.head!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"], d["kernels"] = list(self.filters), list(self.kernels)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> CnnSpec:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown CnnSpec fields: {sorted(unknown)}")
        return cls(**data)

    def with_head(self, head: str) -> CnnSpec:
        return CnnSpec(**{**asdict(self), "head": head})


def init_cnn(spec: CnnSpec, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays = {"embedding": rng.standard_normal((spec.vocab_size, spec.embed_dim))}
    cin = spec.embed_dim
    for i, (cout, k) in enumerate(zip(spec.filters, spec.kernels)):
        bound = 1.0 / np.sqrt(cin * k)
        arrays[f"conv{i}.weight"] = rng.uniform(-bound, bound, (cout, cin, k))
        arrays[f"conv{i}.bias"] = np.zeros(cout)
        cin = cout
    arrays["head.weight"] = rng.uniform(-1 / np.sqrt(cin), 1 / np.sqrt(cin), (cin, 1))
    arrays["head.bias"] = np.zeros(1)
    return ModelParams(spec, {name: tn.parameter(a) for name, a in arrays.items()})


def conv_features(tokens, params: ModelParams, mask: np.ndarray | None = None) -> list[Tensor]:
    """Post-ReLU activations of every conv layer, each (..., T, filters[i]).

    PAD positions are zeroed before each convolution, so trailing batch
    padding acts exactly like the zero "same" padding.
    """
    ids = _ids_array(tokens)
    if ids.shape[-1] == 0:
        raise ShapeError("forward_cnn: empty sequence")
    m = pool_mask(ids) if mask is None else np.asarray(mask, dtype=bool)
    keep = tn.Tensor(m[..., None])
    h = tn.embedding(params["embedding"], ids)
    outs = []
    for i in range(len(params.spec.filters)):
        h = tn.relu(tn.conv1d_same(h * keep, params[f"conv{i}.weight"], params[f"conv{i}.bias"]))
        outs.append(h)
    return outs


def forward_cnn(tokens, params: ModelParams, mask: np.ndarray | None = None) -> Tensor:
    """Scalar output per sequence (logit for classification)."""
    ids = _ids_array(tokens)
    m = pool_mask(ids) if mask is None else np.asarray(mask, dtype=bool)
    if np.any(m.sum(axis=-1) == 0):
        raise ShapeError("forward_cnn: sequence with no non-PAD positions")
    h = conv_features(ids, params, m)[-1]
    pooled = tn.where(m[..., None], h, -np.inf).max(axis=-2)
    return scalar_head(pooled, params)
