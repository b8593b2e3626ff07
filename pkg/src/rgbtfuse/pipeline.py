"""Model assembly, the training step, answer decoding, evaluation and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ContractError, Tensor
from .config import TrainConfig
from .data import BOS, PAD, QUESTIONS, GeneratedItem, QaItem, Vocab, generate_items, load_split, score_benchmark
from .decoder import FrozenDecoder, decoder_logits, embed_tokens, init_decoder, pretrain_decoder, text_corpus
from .encoders import (
    FreezeSplit,
    VitEncoderParams,
    init_encoder,
    init_mae_decoder,
    patchify_encode,
    pretrain_mae,
)
from .fusion import AblationFlags, FusionOutput, FusionParameters, fuse, init_fusion
from .imaging import ImagePlane, block_mask_rgb, replicate_channels
from .objectives import (
    LossBreakdown,
    align_loss,
    contrastive_loss,
    gate_entropy_loss,
    lm_loss,
    total_loss,
)
from .optim import AdamW, FreezeRegistry, ParamGroup
from .tensor_io import ParseError, decode_array, encode_array

MODALITY_SUBSETS = ("rgb", "thermal", "rgb+thermal")
TAG_TO_SUBSET = {"rgb": "rgb", "ir": "thermal", "rgb+ir": "rgb+thermal"}
QUESTION_KIND = {q: k for k, q in QUESTIONS.items()}


@dataclass
class PairedSample:
    id: str
    rgb: ImagePlane  # 3 channels
    thermal: ImagePlane  # 1 channel
    prompt_ids: list[int]
    answer_ids: list[int]
    modality: str  # dataset tag: rgb | ir | rgb+ir
    kind: str = ""


@dataclass
class ModalityNulls:
    """Learned token grids that stand in for an absent modality."""

    rgb: Tensor  # [N, d]
    thermal: Tensor  # [N, d]


@dataclass
class Model:
    rgb_encoder: VitEncoderParams
    thermal_encoder: VitEncoderParams
    fusion: FusionParameters
    nulls: ModalityNulls
    decoder: FrozenDecoder

    def named_parameters(self):
        return nn.named_parameters(self)


def make_sample(item: QaItem, rgb: ImagePlane, thermal: ImagePlane, vocab: Vocab) -> PairedSample:
    return PairedSample(
        item.id,
        rgb,
        thermal,
        [BOS] + vocab.encode(item.question),
        vocab.encode(item.answer),
        item.modality,
        item.kind or QUESTION_KIND.get(item.question, ""),
    )


def samples_from_generated(items: Sequence[GeneratedItem], vocab: Vocab) -> list[PairedSample]:
    return [make_sample(g.item, g.rgb, g.thermal, vocab) for g in items]


def load_samples(data_dir, split: str, vocab: Vocab) -> list[PairedSample]:
    return [make_sample(it, rgb, th, vocab) for it, rgb, th in load_split(data_dir, split)]


def synthetic_splits(cfg: TrainConfig, vocab: Vocab) -> tuple[list[PairedSample], list[PairedSample]]:
    """In-memory train and held-out splits drawn from disjoint seeds."""
    train = generate_items(cfg.train_samples, seed=cfg.seed, size=cfg.image_size, prefix="tr")
    held = generate_items(cfg.eval_samples, seed=cfg.seed + 1_000_003, size=cfg.image_size, prefix="ev")
    return samples_from_generated(train, vocab), samples_from_generated(held, vocab)


# ---------------------------------------------------------------- construction


def init_model(cfg: TrainConfig, rng: np.random.Generator | None = None) -> Model:
    cfg.validate()
    rng = rng or np.random.default_rng(cfg.seed)
    geom = dict(
        image_size=cfg.image_size, patch_size=cfg.patch_size, dim=cfg.d_model, heads=cfg.heads,
        mlp_ratio=cfg.mlp_ratio, pixel_mean=cfg.pixel_mean, pixel_std=cfg.pixel_std,
    )
    rgb_enc = init_encoder(rng, depth=cfg.encoder_blocks, **geom)
    th_enc = init_encoder(rng, depth=cfg.encoder_blocks, **geom)
    fusion = init_fusion(rng, cfg.d_model, cfg.d_prompt, heads=cfg.heads)
    n = cfg.n_tokens
    nulls = ModalityNulls(Tensor(rng.normal(0.0, 0.02, (n, cfg.d_model))), Tensor(rng.normal(0.0, 0.02, (n, cfg.d_model))))
    dec = init_decoder(rng, cfg.vocab_size, cfg.d_prompt, cfg.decoder_blocks, cfg.heads, n, cfg.decoder_max_text, cfg.mlp_ratio)
    model = Model(rgb_enc, th_enc, fusion, nulls, dec)
    nn.set_requires_grad(model, False)
    return model


def mae_images(cfg: TrainConfig, count: int, seed: int) -> list[ImagePlane]:
    """Replicated thermal planes from synthetic scenes, for MAE pretraining."""
    items = generate_items(count, seed=seed, size=cfg.image_size, prefix="mae")
    return [replicate_channels(g.thermal) for g in items]


def pretrain_language(model: Model, cfg: TrainConfig, vocab: Vocab, log: Callable | None = None) -> list[float]:
    """Text-only next-token training of the decoder, which is frozen afterwards."""
    corpus = text_corpus(vocab, seed=cfg.seed, n_slots=cfg.n_tokens, dim=cfg.d_model)
    hist = pretrain_decoder(model.decoder, corpus, cfg.lm_steps, cfg.lm_batch, cfg.lm_lr, seed=cfg.seed)
    if log and hist:
        log(f"decoder pretraining: loss {hist[0]:.3f} -> {hist[-1]:.3f}")
    return hist


def pretrain_vision(model: Model, cfg: TrainConfig, log: Callable | None = None) -> dict[str, list[float]]:
    """MAE pretraining of the thermal encoder (and optionally the RGB encoder)."""
    hist = {}
    rng = np.random.default_rng(cfg.seed + 1)
    dec = init_mae_decoder(rng, model.thermal_encoder, heads=cfg.heads, mlp_ratio=cfg.mlp_ratio)
    imgs = mae_images(cfg, cfg.mae_images, seed=cfg.seed + 101)
    hist["thermal"] = pretrain_mae(imgs, model.thermal_encoder, dec, cfg.mae_steps, cfg.mae_batch, cfg.mae_ratio, cfg.mae_lr, seed=cfg.seed)
    nn.set_requires_grad(model.thermal_encoder, False)
    if log and hist["thermal"]:
        log(f"thermal MAE: loss {hist['thermal'][0]:.4f} -> {hist['thermal'][-1]:.4f}")
    if cfg.pretrain_rgb_mae:
        dec = init_mae_decoder(rng, model.rgb_encoder, heads=cfg.heads, mlp_ratio=cfg.mlp_ratio)
        rgb_imgs = [g.rgb for g in generate_items(cfg.mae_images, seed=cfg.seed + 202, size=cfg.image_size, prefix="rmae")]
        hist["rgb"] = pretrain_mae(rgb_imgs, model.rgb_encoder, dec, cfg.mae_steps, cfg.mae_batch, cfg.mae_ratio, cfg.mae_lr, seed=cfg.seed)
        nn.set_requires_grad(model.rgb_encoder, False)
        if log and hist["rgb"]:
            log(f"rgb MAE: loss {hist['rgb'][0]:.4f} -> {hist['rgb'][-1]:.4f}")
    return hist


def pretrain_components(model: Model, cfg: TrainConfig, vocab: Vocab, log: Callable | None = None) -> dict:
    hist = {}
    if cfg.lm_steps > 0:
        hist["lm"] = pretrain_language(model, cfg, vocab, log)
    if cfg.mae_steps > 0:
        hist["mae"] = pretrain_vision(model, cfg, log)
    return hist


@dataclass
class ParamSplit:
    group_t: list[tuple[str, Tensor]]
    group_f: list[tuple[str, Tensor]]
    frozen: list[tuple[str, Tensor]]


def split_parameters(model: Model, n_trainable: int) -> ParamSplit:
    """Group-T: trailing thermal blocks. Group-F: fusion, null grids, thermal final LN."""
    split = FreezeSplit(len(model.thermal_encoder.blocks), n_trainable)
    t_prefixes = tuple(f"thermal_encoder/blocks/{i}/" for i in split.trainable)
    group_t, group_f, frozen = [], [], []
    for name, t in model.named_parameters():
        if name.startswith(t_prefixes):
            group_t.append((name, t))
        elif name.startswith(("fusion/", "nulls/", "thermal_encoder/final_ln/")):
            group_f.append((name, t))
        else:
            frozen.append((name, t))
    return ParamSplit(group_t, group_f, frozen)


def flags_from_config(cfg: TrainConfig, **extra) -> AblationFlags:
    return AblationFlags(text_attn=cfg.text_attn, rgb_attn=cfg.rgb_attn, gated=cfg.gated, **extra)


# ---------------------------------------------------------------- forward


@dataclass
class SampleForward:
    R: Tensor
    T: Tensor
    P: Tensor
    prompt_mask: np.ndarray
    fusion: FusionOutput
    logits: Tensor  # rows at answer-prediction positions, [len(answer), V]
    lm: Tensor
    has_rgb: bool
    has_thermal: bool


def padded_prompt(ids: Sequence[int], length: int) -> tuple[list[int], np.ndarray]:
    if len(ids) > length:
        raise ContractError(f"prompt of {len(ids)} tokens exceeds prompt_len {length}")
    pad = length - len(ids)
    return list(ids) + [PAD] * pad, np.array([True] * len(ids) + [False] * pad)


def forward_sample(
    model: Model,
    sample: PairedSample,
    cfg: TrainConfig,
    *,
    training: bool,
    rng: np.random.Generator | None = None,
    subset: str = "rgb+thermal",
    flags: AblationFlags | None = None,
    clean_rgb_tokens: bool = False,
) -> SampleForward:
    if subset not in MODALITY_SUBSETS:
        raise ContractError(f"unknown modality subset {subset!r}; expected one of {MODALITY_SUBSETS}")
    flags = flags or flags_from_config(cfg)
    has_rgb = subset in ("rgb", "rgb+thermal")
    has_th = subset in ("thermal", "rgb+thermal")

    if has_rgb:
        img = sample.rgb
        if training and cfg.mask_ratio > 0:
            img = block_mask_rgb(img, cfg.mask_ratio, rng)
        R = patchify_encode(img, model.rgb_encoder)
    else:
        R = model.nulls.rgb
    if has_th:
        T = patchify_encode(replicate_channels(sample.thermal), model.thermal_encoder)
    else:
        T = model.nulls.thermal

    ids, mask = padded_prompt(sample.prompt_ids, cfg.prompt_len)
    P = embed_tokens(model.decoder, ids)
    out = fuse(R, T, P, mask, model.fusion, flags)

    answer = list(sample.answer_ids)
    text = list(sample.prompt_ids) + answer[:-1]
    full = decoder_logits(model.decoder, text, visual=out.fused)
    first = out.fused.shape[0] + len(sample.prompt_ids) - 1
    logits = ad.split(full, [first, len(answer), full.shape[0] - first - len(answer)], axis=0)[1]
    lm = lm_loss(logits, answer)
    if clean_rgb_tokens and has_rgb:
        with ad.no_grad():
            R = patchify_encode(sample.rgb, model.rgb_encoder)
    return SampleForward(R, T, P, mask, out, logits, lm, has_rgb, has_th)


def batch_losses(fwds: Sequence[SampleForward], cfg: TrainConfig) -> LossBreakdown:
    b = float(len(fwds))
    lm = ad.sum(ad.stack([f.lm for f in fwds])) / b
    paired = [f for f in fwds if f.has_rgb and f.has_thermal]
    if paired:
        align = ad.sum(ad.stack([align_loss(f.R, f.T) for f in paired])) / float(len(paired))
    else:
        align = Tensor(0.0)
    p_r = ad.stack([nn.mean_pool(f.fusion.fused) for f in fwds])
    p_t = ad.stack([nn.mean_pool(f.T) for f in fwds])
    p_p = ad.stack([nn.masked_mean_pool(f.P, f.prompt_mask) for f in fwds])
    contr = contrastive_loss(p_r, p_t, p_p, cfg.tau, cfg.nce_symmetric)
    gate = ad.sum(ad.stack([gate_entropy_loss(f.fusion.gates) for f in fwds])) / b
    return total_loss(lm, align, contr, gate, cfg.weights)


class Trainer:
    """Owns the model's mutable state during fine-tuning."""

    def __init__(self, model: Model, cfg: TrainConfig, flags: AblationFlags | None = None):
        self.model = model
        self.cfg = cfg.validate()
        self.flags = flags or flags_from_config(cfg)
        self.split = split_parameters(model, cfg.n_trainable_blocks)
        nn.set_requires_grad(model, False)
        for _, t in self.split.group_t + self.split.group_f:
            t.requires_grad = True
        common = dict(weight_decay=cfg.weight_decay, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps, warmup_steps=cfg.warmup_steps)
        self.opt = AdamW([
            ParamGroup("group_t", self.split.group_t, lr=cfg.lr_therm, **common),
            ParamGroup("group_f", self.split.group_f, lr=cfg.lr_fusion, **common),
        ])
        self.registry = FreezeRegistry()
        self.registry.register(self.split.frozen)
        self.rng = np.random.default_rng(cfg.seed + 7)
        self.step = 0

    def draw_subset(self) -> str:
        p = self.cfg.modality_dropout
        u = self.rng.random()
        if u < p:
            return "thermal"
        if u < 2 * p:
            return "rgb"
        return "rgb+thermal"

    def train_step(self, batch: Sequence[PairedSample]) -> LossBreakdown:
        if not batch:
            raise ContractError("train_step needs a non-empty batch")
        self.opt.zero_grad()
        try:
            fwds = [
                forward_sample(
                    self.model, s, self.cfg, training=True, rng=self.rng, subset=self.draw_subset(),
                    flags=self.flags, clean_rgb_tokens=self.cfg.align_clean_rgb,
                )
                for s in batch
            ]
            parts = batch_losses(fwds, self.cfg)
            ad.backward(parts.total)
            self.opt.step()
        except (ContractError, ValueError) as exc:
            raise type(exc)(f"train step {self.step}: {exc}") from exc
        self.step += 1
        return parts

    def fit(
        self,
        samples: Sequence[PairedSample],
        epochs: int | None = None,
        max_steps: int | None = None,
        log_file=None,
        progress: Callable | None = None,
    ) -> list[dict]:
        epochs = self.cfg.epochs if epochs is None else epochs
        max_steps = self.cfg.max_steps if max_steps is None else max_steps
        history = []
        bs = self.cfg.batch_size
        for _ in range(epochs):
            order = self.rng.permutation(len(samples))
            for start in range(0, len(order) - bs + 1, bs):
                parts = self.train_step([samples[i] for i in order[start:start + bs]])
                row = {"step": self.step, **parts.as_dict()}
                history.append(row)
                if log_file is not None:
                    log_file.write(json.dumps(row) + "\n")
                if progress is not None:
                    progress(row)
                if max_steps and self.step >= max_steps:
                    return history
        return history


def build_trained_components(cfg: TrainConfig, vocab: Vocab | None = None, log: Callable | None = None) -> Model:
    vocab = vocab or Vocab(size=cfg.vocab_size)
    model = init_model(cfg)
    pretrain_components(model, cfg, vocab, log)
    nn.set_requires_grad(model, False)
    return model


# ---------------------------------------------------------------- inference


def answer_logits(
    model: Model,
    sample: PairedSample,
    cfg: TrainConfig,
    subset: str = "rgb+thermal",
    flags: AblationFlags | None = None,
) -> np.ndarray:
    """Logits over the vocabulary at the first answer position (no masking, no tape)."""
    probe = PairedSample(sample.id, sample.rgb, sample.thermal, sample.prompt_ids, [PAD], sample.modality)
    with ad.no_grad():
        fwd = forward_sample(model, probe, cfg, training=False, subset=subset, flags=flags)
    return fwd.logits.data[0].copy()


def infer_answer(
    model: Model,
    sample: PairedSample,
    cfg: TrainConfig,
    subset: str = "rgb+thermal",
    flags: AblationFlags | None = None,
    vocab: Vocab | None = None,
) -> str:
    """Greedy first answer token restricted to {yes, no}."""
    vocab = vocab or Vocab(size=cfg.vocab_size)
    logits = answer_logits(model, sample, cfg, subset, flags)
    return "yes" if logits[vocab.yes] >= logits[vocab.no] else "no"


def predict(
    model: Model,
    samples: Sequence[PairedSample],
    cfg: TrainConfig,
    subset: str | None = None,
    flags: AblationFlags | None = None,
) -> dict[str, str]:
    """Answers keyed by id. ``subset=None`` feeds each item the modalities its tag names."""
    vocab = Vocab(size=cfg.vocab_size)
    return {
        s.id: infer_answer(model, s, cfg, subset or TAG_TO_SUBSET[s.modality], flags, vocab)
        for s in samples
    }


def evaluate(model, samples, cfg, subset=None, flags=None):
    preds = predict(model, samples, cfg, subset, flags)
    gold = [QaItem(s.id, "", "yes" if s.answer_ids == [Vocab(size=cfg.vocab_size).yes] else "no", s.modality) for s in samples]
    return score_benchmark(preds, gold), preds


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"TVLB"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointBundle:
    version: int
    fingerprint: str
    config: dict
    step: int
    tensors: dict[str, np.ndarray]
    optim_meta: dict = field(default_factory=dict)
    optim_state: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None


def save_checkpoint(path, model: Model, cfg: TrainConfig, trainer: Trainer | None = None) -> None:
    header = {
        "fingerprint": cfg.fingerprint(),
        "config": cfg.to_dict(),
        "step": trainer.step if trainer else 0,
        "optim": trainer.opt.state_meta() if trainer else {},
        "rng": trainer.rng.bit_generator.state if trainer else None,
    }
    records = [(f"param/{name}", t.data) for name, t in model.named_parameters()]
    if trainer:
        records += [(f"optim/{k}", v) for k, v in trainer.opt.state_arrays().items()]
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hbytes)), hbytes, struct.pack("<I", len(records))]
    for key, arr in records:
        kb = key.encode()
        parts.append(struct.pack("<I", len(kb)) + kb + encode_array(arr))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path, expect_fingerprint: str | None = None) -> CheckpointBundle:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ParseError("not a checkpoint: bad magic", 0)
    if len(buf) < 12:
        raise ParseError("truncated checkpoint header", 4)
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CKPT_VERSION})")
    pos = 12
    if len(buf) < pos + hlen + 4:
        raise ParseError("truncated checkpoint header", pos)
    try:
        header = json.loads(buf[pos:pos + hlen])
    except ValueError as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}", pos) from exc
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors, optim = {}, {}
    for _ in range(count):
        if len(buf) < pos + 4:
            raise ParseError("truncated record key", pos)
        (klen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) < pos + klen:
            raise ParseError("truncated record key", pos)
        key = buf[pos:pos + klen].decode()
        pos += klen
        arr, pos = decode_array(buf, pos)
        if key.startswith("param/"):
            tensors[key[6:]] = arr
        elif key.startswith("optim/"):
            optim[key[6:]] = arr
        else:
            raise ParseError(f"unknown record key {key!r}", pos)
    if pos != len(buf):
        raise ParseError("trailing bytes after last record", pos)
    if expect_fingerprint is not None and header["fingerprint"] != expect_fingerprint:
        raise CheckpointError(
            f"config fingerprint mismatch: checkpoint has {header['fingerprint']}, expected {expect_fingerprint}"
        )
    return CheckpointBundle(version, header["fingerprint"], header["config"], header["step"], tensors, header["optim"], optim, header["rng"])


def apply_checkpoint(model: Model, bundle: CheckpointBundle, prefixes: Sequence[str] | None = None) -> None:
    """Copy checkpoint tensors into ``model``; all checks run before anything is written.

    With ``prefixes`` only parameters under those path prefixes are copied.
    """
    named = dict(model.named_parameters())
    stored = bundle.tensors
    if prefixes is not None:
        keep = tuple(prefixes)
        named = {k: t for k, t in named.items() if k.startswith(keep)}
        stored = {k: a for k, a in stored.items() if k.startswith(keep)}
    missing = sorted(set(named) - set(stored))
    extra = sorted(set(stored) - set(named))
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match model: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, t in named.items():
        arr = stored[name]
        if arr.shape != t.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
    for name, t in named.items():
        t.data = stored[name].copy()


def restore(path, expect_fingerprint: str | None = None) -> tuple[Model, TrainConfig, CheckpointBundle]:
    bundle = load_checkpoint(path, expect_fingerprint)
    cfg = TrainConfig(**bundle.config).validate()
    model = init_model(cfg)
    apply_checkpoint(model, bundle)
    return model, cfg, bundle


def restore_trainer(trainer: Trainer, bundle: CheckpointBundle) -> None:
    trainer.opt.load_state(bundle.optim_meta, bundle.optim_state)
    trainer.step = bundle.step
    if bundle.rng_state is not None:
        trainer.rng.bit_generator.state = bundle.rng_state
