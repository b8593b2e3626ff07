"""Text-guided dual-attention fusion with a token-gated residual into the RGB stream.

Thermal tokens attend to the projected prompt and to the RGB tokens, the two
contexts are merged back into the thermal stream, and the merged thermal
representation predicts a residual ``delta`` and a per-token gate ``alpha``.
The output is ``R + alpha * delta``; the RGB tokens are never replaced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ContractError, DimensionError, Tensor


@dataclass
class FusionParameters:
    w_p: nn.LinearParams  # d_p -> d
    ln_r: nn.LayerNormParams
    ln_t: nn.LayerNormParams
    ln_p: nn.LayerNormParams
    mha_txt: nn.MhaParams
    mha_rgb: nn.MhaParams
    mlp_m: nn.MlpParams  # 3d -> d
    ln_merge: nn.LayerNormParams
    ln_res: nn.LayerNormParams
    mlp_r: nn.MlpParams  # d -> d
    ln_gate: nn.LayerNormParams  # over 2d
    mlp_g: nn.MlpParams  # 2d -> 1

    @property
    def dim(self) -> int:
        return self.w_p.out_features

    @property
    def prompt_dim(self) -> int:
        return self.w_p.in_features


@dataclass
class AblationFlags:
    text_attn: bool = True
    rgb_attn: bool = True
    gated: bool = True
    # test hook: force every gate to this value (0.0 gives R_fused == R)
    gate_override: float | None = None
    keep_intermediates: bool = False


@dataclass
class FusionOutput:
    fused: Tensor  # [N, d]
    gates: Tensor  # [N, 1]
    intermediates: dict = field(default_factory=dict)


def init_fusion(rng: np.random.Generator, dim: int, prompt_dim: int, heads: int = 4, hidden_mult: int = 2) -> FusionParameters:
    h = hidden_mult * dim
    return FusionParameters(
        w_p=nn.init_linear(rng, prompt_dim, dim),
        ln_r=nn.init_layer_norm(dim),
        ln_t=nn.init_layer_norm(dim),
        ln_p=nn.init_layer_norm(dim),
        mha_txt=nn.init_mha(rng, dim, heads),
        mha_rgb=nn.init_mha(rng, dim, heads),
        mlp_m=nn.init_mlp(rng, 3 * dim, h, dim),
        ln_merge=nn.init_layer_norm(dim),
        ln_res=nn.init_layer_norm(dim),
        mlp_r=nn.init_mlp(rng, dim, h, dim, zero_last=True),
        ln_gate=nn.init_layer_norm(2 * dim),
        mlp_g=nn.init_mlp(rng, 2 * dim, h, 1),
    )


def fuse(
    R: Tensor,
    T: Tensor,
    P: Tensor,
    mask_p: Sequence[bool],
    params: FusionParameters,
    flags: AblationFlags | None = None,
) -> FusionOutput:
    flags = flags or AblationFlags()
    d = params.dim
    if R.shape != T.shape or R.ndim != 2 or R.shape[1] != d:
        raise DimensionError(f"fuse: RGB {R.shape} and thermal {T.shape} must both be [N, {d}]")
    if P.ndim != 2 or P.shape[1] != params.prompt_dim:
        raise DimensionError(f"fuse: prompt {P.shape} must be [L, {params.prompt_dim}]")
    mask_p = np.asarray(mask_p, dtype=bool)
    if mask_p.shape != (P.shape[0],):
        raise DimensionError(f"fuse: prompt mask length {mask_p.shape} != {P.shape[0]}")
    if not mask_p.any():
        raise ContractError("fuse: prompt mask has no valid position")
    n = R.shape[0]

    r_bar = nn.layer_norm(R, params.ln_r)
    t_bar = nn.layer_norm(T, params.ln_t)
    p_bar = nn.layer_norm(nn.linear(P, params.w_p), params.ln_p)

    if flags.text_attn:
        t_txt = nn.multi_head_attention(t_bar, p_bar, p_bar, params.mha_txt, mask=mask_p)
    else:
        t_txt = ad.zeros((n, d))
    if flags.rgb_attn:
        t_rgb = nn.multi_head_attention(t_bar, r_bar, r_bar, params.mha_rgb)
    else:
        t_rgb = ad.zeros((n, d))

    merged = nn.mlp(ad.concat([t_bar, t_txt, t_rgb], axis=-1), params.mlp_m)
    t_hat = nn.layer_norm(T + merged, params.ln_merge)
    delta = nn.mlp(nn.layer_norm(t_hat, params.ln_res), params.mlp_r)
    logits = nn.mlp(nn.layer_norm(ad.concat([r_bar, t_hat], axis=-1), params.ln_gate), params.mlp_g)
    alpha = ad.sigmoid(logits)

    if flags.gate_override is not None:
        applied = Tensor(np.full((n, 1), float(flags.gate_override)))
    elif not flags.gated:
        applied = ad.ones((n, 1))
    else:
        applied = alpha
    fused = R + ad.expand(applied, (n, d)) * delta

    inter = {}
    if flags.keep_intermediates:
        inter = {"t_txt": t_txt, "t_rgb": t_rgb, "t_hat": t_hat, "delta": delta, "gate_logits": logits}
    return FusionOutput(fused, alpha, inter)


# ---------------------------------------------------------------- fixture files
#
# One entry per line: ``<key> <extent> [<extent> ...] : <v0> <v1> ...``, values
# row-major. Blank lines and ``#`` comments are ignored. Parameter keys follow
# the ``named_parameters`` paths (``mlp_m/fc1/weight`` ...); attention head
# counts are given as ``heads/mha_txt : 1``.


def read_fixture(path) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ValueError(f"{path}:{lineno}: missing ':'")
        head, vals = line.split(":", 1)
        key, *dims = head.split()
        values = np.array([float(v) for v in vals.split()])
        shape = tuple(int(x) for x in dims)
        if int(np.prod(shape)) != values.size:
            raise ValueError(f"{path}:{lineno}: {key} declares {shape} but lists {values.size} values")
        entries[key] = values.reshape(shape)
    return entries


def write_fixture(path, entries: dict[str, np.ndarray]) -> None:
    lines = []
    for key, arr in entries.items():
        arr = np.asarray(arr, dtype=np.float64)
        dims = " ".join(str(x) for x in arr.shape)
        vals = " ".join(repr(float(v)) for v in arr.ravel())
        lines.append(f"{key} {dims} : {vals}".replace("  :", " :"))
    Path(path).write_text("\n".join(lines) + "\n")


def fusion_from_fixture(entries: dict[str, np.ndarray]) -> FusionParameters:
    """Build FusionParameters from fixture entries keyed by parameter path."""

    def lin(prefix):
        return nn.LinearParams(Tensor(entries[f"{prefix}/weight"]), Tensor(entries[f"{prefix}/bias"]))

    def ln(prefix):
        return nn.LayerNormParams(Tensor(entries[f"{prefix}/gamma"]), Tensor(entries[f"{prefix}/beta"]))

    def mha(prefix):
        heads = int(entries[f"heads/{prefix}"].ravel()[0])
        return nn.MhaParams(lin(f"{prefix}/q"), lin(f"{prefix}/k"), lin(f"{prefix}/v"), lin(f"{prefix}/out"), heads)

    def mlp(prefix):
        return nn.MlpParams(lin(f"{prefix}/fc1"), lin(f"{prefix}/fc2"))

    return FusionParameters(
        w_p=lin("w_p"),
        ln_r=ln("ln_r"),
        ln_t=ln("ln_t"),
        ln_p=ln("ln_p"),
        mha_txt=mha("mha_txt"),
        mha_rgb=mha("mha_rgb"),
        mlp_m=mlp("mlp_m"),
        ln_merge=ln("ln_merge"),
        ln_res=ln("ln_res"),
        mlp_r=mlp("mlp_r"),
        ln_gate=ln("ln_gate"),
        mlp_g=mlp("mlp_g"),
    )


def fixture_entries(params: FusionParameters) -> dict[str, np.ndarray]:
    out = {f"heads/{name}": np.array([getattr(params, name).heads], dtype=float) for name in ("mha_txt", "mha_rgb")}
    out.update({name: t.data for name, t in nn.named_parameters(params)})
    return out
