"""Toy ViT patch encoders, trainable-suffix split and MAE pretraining."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ContractError, DimensionError, Tensor
from .imaging import ImagePlane, round_half_up


@dataclass
class VitBlock:
    ln1: nn.LayerNormParams
    attn: nn.MhaParams
    ln2: nn.LayerNormParams
    mlp: nn.MlpParams


@dataclass
class VitEncoderParams:
    patch_embed: nn.LinearParams  # [d, ps*ps*C]
    pos_embed: Tensor  # [N, d]
    blocks: list[VitBlock]
    final_ln: nn.LayerNormParams
    patch_size: int = 14
    # fixed input standardisation; removes the shared background level from every patch
    pixel_mean: float = 0.0
    pixel_std: float = 1.0

    def __post_init__(self):
        if not self.pixel_std > 0:
            raise ContractError(f"pixel_std must be positive, got {self.pixel_std}")

    @property
    def dim(self) -> int:
        return self.pos_embed.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.pos_embed.shape[0]


@dataclass
class FreezeSplit:
    """The last ``n_trainable`` of ``n_blocks`` encoder blocks are trainable."""

    n_blocks: int
    n_trainable: int

    def __post_init__(self):
        if not 0 <= self.n_trainable <= self.n_blocks:
            raise ContractError(f"trainable block count {self.n_trainable} outside [0, {self.n_blocks}]")

    @property
    def trainable(self) -> list[int]:
        return list(range(self.n_blocks - self.n_trainable, self.n_blocks))

    @property
    def frozen(self) -> list[int]:
        return list(range(self.n_blocks - self.n_trainable))


@dataclass
class MaeMask:
    indices: np.ndarray  # sorted masked token ids
    n_tokens: int
    ratio: float

    @property
    def visible(self) -> np.ndarray:
        keep = np.ones(self.n_tokens, dtype=bool)
        keep[self.indices] = False
        return np.flatnonzero(keep)


@dataclass
class MaeDecoderParams:
    embed: nn.LinearParams  # encoder width -> decoder width
    mask_token: Tensor  # [d_dec]
    pos_embed: Tensor  # [N, d_dec]
    blocks: list[VitBlock]
    final_ln: nn.LayerNormParams
    pred: nn.LinearParams  # d_dec -> ps*ps*C


# ---------------------------------------------------------------- init


def init_block(rng: np.random.Generator, dim: int, heads: int, mlp_ratio: int) -> VitBlock:
    return VitBlock(
        nn.init_layer_norm(dim),
        nn.init_mha(rng, dim, heads),
        nn.init_layer_norm(dim),
        nn.init_mlp(rng, dim, mlp_ratio * dim, dim),
    )


def init_encoder(
    rng: np.random.Generator,
    image_size: int = 56,
    patch_size: int = 14,
    channels: int = 3,
    dim: int = 64,
    depth: int = 6,
    heads: int = 4,
    mlp_ratio: int = 2,
    pixel_mean: float = 0.0,
    pixel_std: float = 1.0,
) -> VitEncoderParams:
    if image_size % patch_size:
        raise DimensionError(f"image size {image_size} not divisible by patch size {patch_size}")
    n = (image_size // patch_size) ** 2
    return VitEncoderParams(
        patch_embed=nn.init_linear(rng, patch_size * patch_size * channels, dim),
        pos_embed=Tensor(rng.normal(0.0, 0.02, size=(n, dim))),
        blocks=[init_block(rng, dim, heads, mlp_ratio) for _ in range(depth)],
        final_ln=nn.init_layer_norm(dim),
        patch_size=patch_size,
        pixel_mean=pixel_mean,
        pixel_std=pixel_std,
    )


def init_mae_decoder(
    rng: np.random.Generator,
    enc: VitEncoderParams,
    channels: int = 3,
    depth: int = 2,
    heads: int = 4,
    mlp_ratio: int = 2,
) -> MaeDecoderParams:
    d_dec = enc.dim // 2
    ps = enc.patch_size
    return MaeDecoderParams(
        embed=nn.init_linear(rng, enc.dim, d_dec),
        mask_token=Tensor(rng.normal(0.0, 0.02, size=d_dec)),
        pos_embed=Tensor(rng.normal(0.0, 0.02, size=(enc.n_tokens, d_dec))),
        blocks=[init_block(rng, d_dec, heads, mlp_ratio) for _ in range(depth)],
        final_ln=nn.init_layer_norm(d_dec),
        pred=nn.init_linear(rng, d_dec, ps * ps * channels),
    )


# ---------------------------------------------------------------- forward


def patchify(img: ImagePlane, patch_size: int) -> np.ndarray:
    """Non-overlapping patches in row-major grid order, each flattened (ps, ps, C)."""
    h, w, c = img.pixels.shape
    ps = patch_size
    if h % ps or w % ps:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {ps}")
    grid = img.pixels.reshape(h // ps, ps, w // ps, ps, c).transpose(0, 2, 1, 3, 4)
    return grid.reshape(-1, ps * ps * c)


def encoder_patches(img: ImagePlane, enc: VitEncoderParams) -> np.ndarray:
    """Standardised patches as the encoder consumes them (also the MAE target space)."""
    return (patchify(img, enc.patch_size) - enc.pixel_mean) / enc.pixel_std


def block_forward(x: Tensor, blk: VitBlock, bias: np.ndarray | None = None) -> Tensor:
    h = nn.layer_norm(x, blk.ln1)
    x = x + nn.multi_head_attention(h, h, h, blk.attn, bias=bias)
    return x + nn.mlp(nn.layer_norm(x, blk.ln2), blk.mlp)


def embed_patches(img: ImagePlane, enc: VitEncoderParams, rows: Sequence[int] | None = None) -> Tensor:
    """Patch embedding plus position embedding, before any transformer block."""
    patches = encoder_patches(img, enc)
    if patches.shape[0] != enc.n_tokens:
        raise DimensionError(f"image yields {patches.shape[0]} patches, encoder expects {enc.n_tokens}")
    if patches.shape[1] != enc.patch_embed.in_features:
        raise DimensionError(f"patch width {patches.shape[1]} vs embed {enc.patch_embed.weight.shape}")
    pos = enc.pos_embed
    if rows is not None:
        patches = patches[np.asarray(rows)]
        pos = ad.take_rows(pos, rows)
    return nn.linear(Tensor(patches), enc.patch_embed) + pos


def encode_tokens(x: Tensor, enc: VitEncoderParams, final_norm: bool = True) -> Tensor:
    for blk in enc.blocks:
        x = block_forward(x, blk)
    return nn.layer_norm(x, enc.final_ln) if final_norm else x


def patchify_encode(img: ImagePlane, enc: VitEncoderParams) -> Tensor:
    return encode_tokens(embed_patches(img, enc), enc)


def sample_mae_mask(n_tokens: int, ratio: float, seed) -> MaeMask:
    if not 0.0 <= ratio < 1.0:
        raise ContractError(f"mask ratio must be in [0, 1), got {ratio}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = round_half_up(ratio * n_tokens)
    idx = np.sort(rng.permutation(n_tokens)[:k])
    return MaeMask(idx, n_tokens, ratio)


def masked_patch_loss(pred: Tensor, target: np.ndarray, mask: MaeMask) -> Tensor:
    """Mean over masked patches of the squared L2 reconstruction error."""
    if mask.indices.size == 0:
        raise ContractError("MAE loss is undefined for an empty mask")
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    diff = ad.take_rows(pred, mask.indices) - Tensor(target[mask.indices])
    return ad.sum(diff * diff) / float(mask.indices.size)


def mae_reconstruct(img: ImagePlane, enc: VitEncoderParams, dec: MaeDecoderParams, mask: MaeMask) -> Tensor:
    """Predict every patch from the visible ones; returns [N, ps*ps*C]."""
    if mask.n_tokens != enc.n_tokens:
        raise DimensionError(f"mask sized for {mask.n_tokens} tokens, encoder has {enc.n_tokens}")
    vis = mask.visible
    if vis.size == 0:
        raise ContractError("MAE mask hides every token; the encoder needs at least one")
    latent = encode_tokens(embed_patches(img, enc, rows=vis), enc)
    z = nn.linear(latent, dec.embed)
    n_mask = mask.indices.size
    d_dec = dec.mask_token.shape[0]
    seq = ad.concat([z, ad.expand(dec.mask_token, (n_mask, d_dec))], axis=0) if n_mask else z
    # seq holds [visible..., masked...]; gather puts each token back at its grid slot
    order = np.concatenate([vis, mask.indices])
    restore = np.argsort(order)
    x = ad.take_rows(seq, restore) + dec.pos_embed
    for blk in dec.blocks:
        x = block_forward(x, blk)
    return nn.linear(nn.layer_norm(x, dec.final_ln), dec.pred)


def mae_forward_loss(img: ImagePlane, enc: VitEncoderParams, dec: MaeDecoderParams, mask: MaeMask) -> Tensor:
    if mask.indices.size == 0:
        raise ContractError("MAE loss is undefined for an empty mask")
    pred = mae_reconstruct(img, enc, dec, mask)
    return masked_patch_loss(pred, encoder_patches(img, enc), mask)


def pretrain_mae(
    images: Sequence[ImagePlane],
    enc: VitEncoderParams,
    dec: MaeDecoderParams,
    steps: int = 300,
    batch_size: int = 8,
    ratio: float = 0.75,
    lr: float = 1e-3,
    weight_decay: float = 0.0,
    seed: int = 0,
    log=None,
) -> list[float]:
    """Train encoder and decoder on masked-patch reconstruction.

    Images must already be 3-channel (thermal planes replicated). Returns the
    mean loss of every step.
    """
    from .optim import AdamW, ParamGroup

    if not images:
        raise ContractError("MAE pretraining needs at least one image")
    rng = np.random.default_rng(seed)
    params = list(nn.named_parameters(enc, "encoder")) + list(nn.named_parameters(dec, "decoder"))
    for _, t in params:
        t.requires_grad = True
    opt = AdamW([ParamGroup("mae", params, lr=lr, weight_decay=weight_decay)])
    history = []
    for step in range(steps):
        opt.zero_grad()
        pick = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        total = 0.0
        for i in pick:
            mask = sample_mae_mask(enc.n_tokens, ratio, rng)
            loss = mae_forward_loss(images[i], enc, dec, mask) / float(len(pick))
            ad.backward(loss)
            total += loss.item()
        opt.step()
        history.append(total)
        if log is not None:
            log(step, total)
    return history
