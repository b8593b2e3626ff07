"""Layer norm, linear/MLP layers, multi-head attention and pooling."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

LN_EPS = 1e-5
MASK_FILL = -1e9


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = LN_EPS

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise DimensionError(f"layer norm gamma {self.gamma.shape} / beta {self.beta.shape}")
        if not self.eps > 0:
            raise ContractError("layer norm eps must be positive")


@dataclass
class LinearParams:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(f"linear weight {self.weight.shape} / bias {self.bias.shape}")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpParams:
    fc1: LinearParams
    fc2: LinearParams

    def __post_init__(self):
        if self.fc1.out_features != self.fc2.in_features:
            raise DimensionError("mlp hidden widths disagree")

    @property
    def hidden(self) -> int:
        return self.fc1.out_features


@dataclass
class MhaParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    out: LinearParams
    heads: int

    def __post_init__(self):
        d = self.q.out_features
        if d % self.heads:
            raise DimensionError(f"width {d} not divisible by {self.heads} heads")
        for lin in (self.k, self.v, self.out):
            if lin.weight.shape != (d, d):
                raise DimensionError("attention projections must all be d x d")

    @property
    def dim(self) -> int:
        return self.q.out_features

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


# ---------------------------------------------------------------- parameter trees


def named_parameters(tree, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(path, tensor)`` for every Tensor inside nested dataclasses/lists/dicts."""
    if isinstance(tree, Tensor):
        yield prefix, tree
    elif dataclasses.is_dataclass(tree):
        for f in dataclasses.fields(tree):
            yield from named_parameters(getattr(tree, f.name), _join(prefix, f.name))
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            yield from named_parameters(item, _join(prefix, str(i)))
    elif isinstance(tree, dict):
        for key in sorted(tree):
            yield from named_parameters(tree[key], _join(prefix, str(key)))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}/{name}" if prefix else name


def set_requires_grad(tree, flag: bool) -> None:
    for _, t in named_parameters(tree):
        t.requires_grad = flag


def param_count(tree) -> int:
    return int(np.sum([t.size for _, t in named_parameters(tree)]))


# ---------------------------------------------------------------- init


def init_layer_norm(dim: int) -> LayerNormParams:
    return LayerNormParams(Tensor(np.ones(dim)), Tensor(np.zeros(dim)))


def init_linear(rng: np.random.Generator, n_in: int, n_out: int, bound: float | None = None) -> LinearParams:
    """Uniform(-b, b) weights with b = 1/sqrt(fan_in) unless given; zero bias."""
    b = 1.0 / np.sqrt(n_in) if bound is None else bound
    return LinearParams(Tensor(rng.uniform(-b, b, size=(n_out, n_in))), Tensor(np.zeros(n_out)))


def zero_linear(n_in: int, n_out: int) -> LinearParams:
    return LinearParams(Tensor(np.zeros((n_out, n_in))), Tensor(np.zeros(n_out)))


def init_mlp(rng: np.random.Generator, n_in: int, hidden: int, n_out: int, zero_last: bool = False) -> MlpParams:
    fc2 = zero_linear(hidden, n_out) if zero_last else init_linear(rng, hidden, n_out)
    return MlpParams(init_linear(rng, n_in, hidden), fc2)


def init_mha(rng: np.random.Generator, dim: int, heads: int) -> MhaParams:
    return MhaParams(*(init_linear(rng, dim, dim) for _ in range(4)), heads=heads)


# ---------------------------------------------------------------- ops


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    d = p.gamma.shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"layer_norm: last extent {x.shape[-1]} != {d}")
    xhat = ad.normalize_last_dim(x, p.eps)
    return xhat * ad.expand(p.gamma, x.shape) + ad.expand(p.beta, x.shape)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    if x.shape[-1] != p.in_features:
        raise DimensionError(f"linear: input {x.shape} vs weight {p.weight.shape}")
    y = ad.matmul(x, ad.transpose(p.weight)) if x.ndim == 2 else _batched_linear(x, p)
    return y + ad.expand(p.bias, y.shape)


def _batched_linear(x: Tensor, p: LinearParams) -> Tensor:
    lead = x.shape[:-1]
    flat = ad.reshape(x, (int(np.prod(lead)), x.shape[-1]))
    return ad.reshape(ad.matmul(flat, ad.transpose(p.weight)), lead + (p.out_features,))


def mlp(x: Tensor, p: MlpParams) -> Tensor:
    return linear(ad.gelu(linear(x, p.fc1)), p.fc2)


def key_mask_bias(mask: Sequence[bool], n_q: int) -> np.ndarray:
    """Additive logit bias [n_q, n_k]: 0 for valid keys, MASK_FILL for masked keys."""
    row = np.where(np.asarray(mask, dtype=bool), 0.0, MASK_FILL)
    return np.broadcast_to(row, (n_q, row.size)).copy()


def causal_bias(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), MASK_FILL), k=1)


def attention_weights(q: Tensor, k: Tensor, p: MhaParams, bias: np.ndarray | None = None) -> Tensor:
    """Per-head attention probabilities [h, n_q, n_k] after projecting q and k."""
    h, hd = p.heads, p.head_dim
    qh = _heads(linear(q, p.q), h, hd)
    kh = _heads(linear(k, p.k), h, hd)
    logits = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(hd))
    if bias is not None:
        logits = logits + Tensor(np.broadcast_to(bias, logits.shape))
    return ad.softmax_last_dim(logits)


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    p: MhaParams,
    mask: Sequence[bool] | None = None,
    bias: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention with ``p.heads`` heads.

    ``mask`` is a key-padding mask (True = valid key). ``bias`` is an extra
    additive [n_q, n_k] logit term, used for causal masking. If every key is
    masked the result is the zero matrix rather than an average over junk.
    """
    d = p.dim
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("multi_head_attention expects 2-D q, k, v")
    if q.shape[1] != d or k.shape[1] != d or v.shape[1] != d:
        raise DimensionError(f"attention width {d} vs q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"keys {k.shape} and values {v.shape} differ in length")
    n_q, n_k = q.shape[0], k.shape[0]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n_k,):
            raise DimensionError(f"key mask length {mask.shape} != {n_k} keys")
        if not mask.any():
            return ad.zeros((n_q, d))
        mb = key_mask_bias(mask, n_q)
        bias = mb if bias is None else bias + mb
    w = attention_weights(q, k, p, bias)
    vh = _heads(linear(v, p.v), p.heads, p.head_dim)
    ctx = ad.matmul(w, vh)  # [h, n_q, hd]
    ctx = ad.reshape(ad.permute(ctx, (1, 0, 2)), (n_q, d))
    return linear(ctx, p.out)


def _heads(x: Tensor, h: int, hd: int) -> Tensor:
    n = x.shape[0]
    return ad.permute(ad.reshape(x, (n, h, hd)), (1, 0, 2))


def mean_pool(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[0] == 0:
        raise DimensionError(f"mean_pool expects a non-empty [n, d] tensor, got {x.shape}")
    return ad.mean(x, axis=0)


def masked_mean_pool(x: Tensor, mask: Sequence[bool]) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x.shape[0],):
        raise DimensionError(f"pool mask length {mask.shape} != {x.shape[0]} rows")
    if not mask.any():
        raise ContractError("masked_mean_pool: every position is masked")
    return ad.mean(ad.take_rows(x, np.flatnonzero(mask)), axis=0)
