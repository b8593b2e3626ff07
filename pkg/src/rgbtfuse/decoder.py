"""Tiny causal decoder that stands in for the frozen language model.

Text positions always start at ``n_visual``. During text-only pretraining the
visual slots hold word embeddings of scene evidence ("warm", "light", ...),
so the frozen decoder learns to answer from whatever occupies those slots.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ContractError, DimensionError, Tensor
from .data import BOS, EOS, PAD, QUESTIONS, TOY_SENTENCES, Vocab
from .encoders import VitBlock, block_forward, init_block
from .objectives import lm_loss


@dataclass
class FrozenDecoder:
    tok_embed: Tensor  # [V, d]
    pos_embed: Tensor  # [n_visual + max_text, d]
    type_embed: Tensor  # [d], added to every visual token
    blocks: list[VitBlock]
    final_ln: nn.LayerNormParams
    head: nn.LinearParams  # d -> V
    n_visual: int = 16

    @property
    def dim(self) -> int:
        return self.tok_embed.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.tok_embed.shape[0]

    @property
    def max_text(self) -> int:
        return self.pos_embed.shape[0] - self.n_visual


def init_decoder(
    rng: np.random.Generator,
    vocab_size: int = 64,
    dim: int = 64,
    depth: int = 2,
    heads: int = 4,
    n_visual: int = 16,
    max_text: int = 24,
    mlp_ratio: int = 2,
) -> FrozenDecoder:
    return FrozenDecoder(
        tok_embed=Tensor(rng.normal(0.0, 0.5, size=(vocab_size, dim))),
        pos_embed=Tensor(rng.normal(0.0, 0.02, size=(n_visual + max_text, dim))),
        type_embed=Tensor(rng.normal(0.0, 0.02, size=dim)),
        blocks=[init_block(rng, dim, heads, mlp_ratio) for _ in range(depth)],
        final_ln=nn.init_layer_norm(dim),
        head=nn.init_linear(rng, dim, vocab_size),
        n_visual=n_visual,
    )


def embed_tokens(dec: FrozenDecoder, ids: Sequence[int]) -> Tensor:
    return ad.take_rows(dec.tok_embed, list(ids))


def decoder_logits(dec: FrozenDecoder, ids: Sequence[int], visual: Tensor | None = None) -> Tensor:
    """Logits [n_vis + len(ids), V] for the sequence ``[visual; embed(ids)]``."""
    ids = list(ids)
    if not ids:
        raise ContractError("decoder needs at least one text token")
    if len(ids) > dec.max_text:
        raise DimensionError(f"text of {len(ids)} tokens exceeds decoder limit {dec.max_text}")
    d = dec.dim
    text = embed_tokens(dec, ids) + ad.take_rows(dec.pos_embed, range(dec.n_visual, dec.n_visual + len(ids)))
    if visual is not None:
        n_vis = visual.shape[0]
        if visual.shape != (n_vis, d) or n_vis > dec.n_visual:
            raise DimensionError(f"visual tokens {visual.shape} do not fit decoder width {d} / {dec.n_visual} slots")
        vis = visual + ad.expand(dec.type_embed, (n_vis, d)) + ad.take_rows(dec.pos_embed, range(n_vis))
        x = ad.concat([vis, text], axis=0)
    else:
        x = text
    causal = nn.causal_bias(x.shape[0])
    for blk in dec.blocks:
        x = block_forward(x, blk, bias=causal)
    return nn.linear(nn.layer_norm(x, dec.final_ln), dec.head)


@dataclass
class TextExample:
    """One pretraining sequence.

    ``slots`` holds word ids for the visual-token positions (``<pad>`` = no word)
    and ``background`` the dense vectors they sit on.
    """

    ids: list[int]
    slots: list[int] | None = None
    background: np.ndarray | None = None


def slot_tokens(dec: FrozenDecoder, slots: Sequence[int], background: np.ndarray) -> Tensor:
    """Background vectors plus the embedding of each non-pad slot word."""
    present = (np.asarray(slots) != PAD).astype(float)[:, None]
    words = embed_tokens(dec, slots) * Tensor(np.broadcast_to(present, (len(slots), dec.dim)).copy())
    return Tensor(background) + words


def sequence_loss(
    dec: FrozenDecoder,
    ids: Sequence[int],
    slots: Sequence[int] | None = None,
    background: np.ndarray | None = None,
) -> Tensor:
    """Next-token cross-entropy over the text, optionally reading evidence from the visual slots."""
    if len(ids) < 2:
        raise ContractError("need at least two tokens for next-token loss")
    if slots:
        bg = np.zeros((len(slots), dec.dim)) if background is None else background
        visual = slot_tokens(dec, slots, bg)
    else:
        visual = None
    logits = decoder_logits(dec, ids[:-1], visual=visual)
    if visual is not None:
        logits = ad.split(logits, [len(slots), len(ids) - 1], axis=0)[1]
    return lm_loss(logits, ids[1:])


EVIDENCE_WORDS = {"warm-body": "warm", "light-source": "light", "cold-object": "cold"}


def _evidence_example(vocab: Vocab, rng: np.random.Generator, n_slots: int, dim: int) -> TextExample:
    """Evidence words scattered over noisy slots; the answer follows from the evidence."""
    n_warm = int(rng.choice([0, 0, 1, 1, 2, 3]))
    n_light = int(rng.integers(0, 2))
    n_cold = int(rng.integers(0, 2))
    words = ["warm"] * n_warm + ["light"] * n_light + ["cold"] * n_cold
    words.append("dark" if rng.random() < 0.5 else "bright")
    slots = [PAD] * n_slots
    for w, pos in zip(words, rng.choice(n_slots, size=len(words), replace=False)):
        slots[int(pos)] = vocab.index[w]
    kind = list(QUESTIONS)[int(rng.integers(len(QUESTIONS)))]
    truth = {
        "warm": n_warm > 0,
        "count_warm": n_warm == 2,
        "light": n_light > 0,
        "warm_and_light": n_warm > 0 and n_light > 0,
        "warm_or_light": n_warm > 0 or n_light > 0,
    }[kind]
    ids = [BOS] + vocab.encode(QUESTIONS[kind]) + vocab.encode("yes" if truth else "no") + [EOS]
    return TextExample(ids, slots, rng.normal(0.0, 1.0, size=(n_slots, dim)))


def text_corpus(
    vocab: Vocab,
    seed: int = 0,
    n_qa: int = 2000,
    toy_repeats: int = 20,
    n_slots: int = 16,
    dim: int = 64,
) -> list[TextExample]:
    """Evidence-grounded question/answer sequences plus repeated plain toy sentences.

    Slot backgrounds are unit Gaussian vectors, roughly the statistics of
    layer-normalised encoder tokens, so the decoder learns to pick evidence
    out of dense visual-like input.
    """
    rng = np.random.default_rng(seed)
    corpus = [_evidence_example(vocab, rng, n_slots, dim) for _ in range(n_qa)]
    for _ in range(toy_repeats):
        for s in TOY_SENTENCES:
            corpus.append(TextExample([BOS] + vocab.encode(s) + [EOS]))
    order = rng.permutation(len(corpus))
    return [corpus[i] for i in order]


def pretrain_decoder(
    dec: FrozenDecoder,
    corpus: Sequence[TextExample],
    steps: int = 400,
    batch_size: int = 8,
    lr: float = 3e-3,
    seed: int = 0,
    log=None,
) -> list[float]:
    """Text-only next-token training. The caller freezes the decoder afterwards."""
    from .optim import AdamW, ParamGroup

    if not corpus:
        raise ContractError("decoder pretraining corpus is empty")
    rng = np.random.default_rng(seed)
    params = list(nn.named_parameters(dec, "decoder"))
    for _, t in params:
        t.requires_grad = True
    opt = AdamW([ParamGroup("lm", params, lr=lr, weight_decay=0.0)])
    history = []
    for step in range(steps):
        opt.zero_grad()
        pick = rng.choice(len(corpus), size=min(batch_size, len(corpus)), replace=False)
        total = 0.0
        for i in pick:
            ex = corpus[i]
            loss = sequence_loss(dec, ex.ids, ex.slots, ex.background) / float(len(pick))
            ad.backward(loss)
            total += loss.item()
        opt.step()
        history.append(total)
        if log is not None:
            log(step, total)
    nn.set_requires_grad(dec, False)
    return history
