"""Selective state-space (Mamba-style) backbone with language-model and task heads.

Each block:

    v = rmsnorm(u)
    x, z = v @ W_x, v @ W_z
    x = silu(causal_conv(x))
    delta = softplus(x @ W_dt + b_dt);  B = x @ W_B;  C = x @ W_C
    h = scan(a = exp(delta * A), b = delta * B * x)      with A = -exp(A_log)
    y = sum_n h[..., n] * C[..., n] + D * x
    out = (y * silu(z)) @ W_out + u
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import tensor as tn
from .errors import ShapeError
from .scan import ScanCoeffs, linear_recurrence
from .tensor import Tensor

HEADS = ("lm", "regression", "binary_classification")


@dataclass(frozen=True)
class ModelSpec:
    vocab_size: int = 25
    d_model: int = 300
    n_layers: int = 8
    d_state: int = 16
    expand: int = 2
    conv_kernel: int = 4
    head: str = "lm"
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "d_state", "expand", "conv_kernel"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ValueError(f"ModelSpec.{name} must be a positive integer, got {value!r}")
        if self.head not in HEADS:
            raise ValueError(f"ModelSpec.head must be one of {HEADS}, got {self.head!r}")
        if self.norm_eps <= 0:
            raise ValueError("ModelSpec.norm_eps must be positive")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**data)

    def with_head(self, head: str) -> ModelSpec:
        return ModelSpec(**{**asdict(self), "head": head})


class ModelParams:
    """Named parameter tensors of one network, in a fixed order."""

    def __init__(self, spec, tensors: dict[str, Tensor]):
        self.spec = spec
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> ModelParams:
        return ModelParams(self.spec, {k: tn.parameter(v.data.copy()) for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def layer_names(i: int) -> list[str]:
    p = f"layers.{i}."
    return [p + n for n in ("norm", "in_x", "in_z", "conv_weight", "conv_bias", "dt_weight", "dt_bias",
                            "B_proj", "C_proj", "A_log", "D", "out_proj")]


def init_head(spec: ModelSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = spec.d_model
    if spec.head == "lm":
        return {"lm_head.weight": _uniform(rng, (d, spec.vocab_size), d), "lm_head.bias": np.zeros(spec.vocab_size)}
    return {"head.weight": _uniform(rng, (d, 1), d), "head.bias": np.zeros(1)}


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Deterministic initialisation.

    Linear and convolution weights are uniform in +-1/sqrt(fan_in), biases
    zero. A_log = log(1..N) on every channel so A = -1..-N; D = 1; the step
    bias is set so softplus(b_dt) is log-uniform in [1e-3, 1e-1].
    """
    rng = np.random.default_rng(seed)
    d, e, n, k = spec.d_model, spec.d_inner, spec.d_state, spec.conv_kernel
    arrays: dict[str, np.ndarray] = {"embedding": rng.standard_normal((spec.vocab_size, d))}
    for i in range(spec.n_layers):
        p = f"layers.{i}."
        arrays[p + "norm"] = np.ones(d)
        arrays[p + "in_x"] = _uniform(rng, (d, e), d)
        arrays[p + "in_z"] = _uniform(rng, (d, e), d)
        arrays[p + "conv_weight"] = _uniform(rng, (e, k), k)
        arrays[p + "conv_bias"] = np.zeros(e)
        arrays[p + "dt_weight"] = _uniform(rng, (e, e), e)
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=e))
        arrays[p + "dt_bias"] = _inverse_softplus(dt)
        arrays[p + "B_proj"] = _uniform(rng, (e, n), e)
        arrays[p + "C_proj"] = _uniform(rng, (e, n), e)
        arrays[p + "A_log"] = np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (e, 1))
        arrays[p + "D"] = np.ones(e)
        arrays[p + "out_proj"] = _uniform(rng, (e, d), e)
    arrays["norm_f"] = np.ones(d)
    arrays.update(init_head(spec, rng))
    return ModelParams(spec, {name: tn.parameter(a) for name, a in arrays.items()})


def discretize(delta, A, B, x) -> ScanCoeffs:
    """Zero-order-hold decay with an Euler input term.

    a[t,c,n] = exp(delta[t,c] * A[c,n]);  b[t,c,n] = delta[t,c] * B[t,n] * x[t,c]
    """
    delta, A, B, x = (tn.as_tensor(v) for v in (delta, A, B, x))
    if delta.shape != x.shape or A.ndim != 2 or A.shape[0] != delta.shape[-1] \
            or B.shape[:-1] != delta.shape[:-1] or B.shape[-1] != A.shape[1]:
        raise ShapeError(f"discretize: incompatible shapes delta {delta.shape}, A {A.shape}, B {B.shape}, x {x.shape}")
    lead = delta.shape
    n = A.shape[1]
    d4 = delta.reshape(lead + (1,))
    a = tn.exp(d4 * A)
    b = d4 * B.reshape(lead[:-1] + (1, n)) * x.reshape(lead + (1,))
    return ScanCoeffs(a, b)


def mamba_block(u, params: ModelParams, layer: int, scan_method: str = "parallel") -> Tensor:
    """One residual block. ``u`` is (T, d_model) or (batch, T, d_model)."""
    spec = params.spec
    u = tn.as_tensor(u)
    if u.shape[-1] != spec.d_model:
        raise ShapeError(f"mamba_block: input feature size {u.shape[-1]} != d_model {spec.d_model}")
    p = f"layers.{layer}."
    P = params.tensors
    v = tn.rmsnorm(u, P[p + "norm"], spec.norm_eps)
    x = v @ P[p + "in_x"]
    z = v @ P[p + "in_z"]
    x = tn.silu(tn.causal_depthwise_conv1d(x, P[p + "conv_weight"], P[p + "conv_bias"]))
    delta = tn.softplus(x @ P[p + "dt_weight"] + P[p + "dt_bias"])
    Bm = x @ P[p + "B_proj"]
    Cm = x @ P[p + "C_proj"]
    A = -tn.exp(P[p + "A_log"])
    coeffs = discretize(delta, A, Bm, x)
    h = linear_recurrence(coeffs.a, coeffs.b, method=scan_method)
    lead = x.shape
    y = (h * Cm.reshape(lead[:-1] + (1, spec.d_state))).sum(axis=-1) + P[p + "D"] * x
    return (y * tn.silu(z)) @ P[p + "out_proj"] + u


def _ids_array(tokens) -> np.ndarray:
    ids = getattr(tokens, "ids", tokens)
    return np.asarray(ids, dtype=np.int64)


def backbone(tokens, params: ModelParams, scan_method: str = "parallel") -> Tensor:
    """Embedding, all blocks and the final norm: (..., T) ids -> (..., T, d_model)."""
    spec = params.spec
    h = tn.embedding(params["embedding"], _ids_array(tokens))
    for i in range(spec.n_layers):
        h = mamba_block(h, params, i, scan_method)
    return tn.rmsnorm(h, params["norm_f"], spec.norm_eps)


def forward_lm(tokens, params: ModelParams, scan_method: str = "parallel") -> Tensor:
    """Next-token logits; position t scores token t+1. Shape (..., T, vocab)."""
    if params.spec.head != "lm":
        raise ValueError(f"forward_lm needs an lm head, model has {params.spec.head!r}")
    h = backbone(tokens, params, scan_method)
    return h @ params["lm_head.weight"] + params["lm_head.bias"]


def pool_mask(ids: np.ndarray, pad_id: int = 0) -> np.ndarray:
    return ids != pad_id


def forward_task(tokens, params: ModelParams, mask: np.ndarray | None = None, scan_method: str = "parallel") -> Tensor:
    """Raw scalar output per sequence: shape () for one sequence, (batch,) for a batch.

    Hidden states are mean-pooled over non-PAD positions. For the
    classification head this is a logit; see :func:`predict_task`.
    """
    if params.spec.head not in ("regression", "binary_classification"):
        raise ValueError(f"forward_task needs a regression or classification head, model has {params.spec.head!r}")
    ids = _ids_array(tokens)
    h = backbone(ids, params, scan_method)
    m = pool_mask(ids) if mask is None else np.asarray(mask, dtype=bool)
    counts = m.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("forward_task: sequence with no non-PAD positions")
    weights = tn.Tensor(m / counts)
    pooled = (h * weights.reshape(weights.shape + (1,))).sum(axis=-2)
    return scalar_head(pooled, params)


def scalar_head(pooled: Tensor, params: ModelParams) -> Tensor:
    """Linear map of pooled features (..., d) to one value per sequence (...)."""
    lead = pooled.shape[:-1]
    flat = pooled.reshape(-1, pooled.shape[-1])
    out = flat @ params["head.weight"] + params["head.bias"]
    return out.reshape(lead)


def predict_task(tokens, params: ModelParams, mask: np.ndarray | None = None) -> np.ndarray:
    """Inference output: regression value, or probability for classification."""
    with tn.no_grad():
        raw = forward_task(tokens, params, mask).data
    if params.spec.head == "binary_classification":
        raw = tn._sigmoid(raw)
    return raw
