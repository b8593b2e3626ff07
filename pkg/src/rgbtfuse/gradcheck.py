"""Central finite-difference checks of the reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-8


@dataclass
class ElementCheck:
    param: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def abs_err(self) -> float:
        return abs(self.analytic - self.numeric)

    @property
    def rel_err(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return self.abs_err / scale if scale > 0 else 0.0

    def passed(self, rtol: float = REL_TOL, atol: float = ABS_FLOOR) -> bool:
        return self.abs_err <= atol or self.rel_err < rtol


@dataclass
class GradcheckReport:
    label: str
    checks: list[ElementCheck] = field(default_factory=list)

    @property
    def failures(self) -> list[ElementCheck]:
        return [c for c in self.checks if not c.passed()]

    @property
    def ok(self) -> bool:
        return bool(self.checks) and not self.failures

    @property
    def worst_rel(self) -> float:
        """Largest relative error among elements whose absolute error exceeds the floor."""
        return max((c.rel_err for c in self.checks if c.abs_err > ABS_FLOOR), default=0.0)

    @property
    def max_abs(self) -> float:
        return max((c.abs_err for c in self.checks), default=0.0)

    @property
    def nonzero(self) -> int:
        return sum(abs(c.analytic) > 0 for c in self.checks)

    def summary(self) -> str:
        status = "ok" if self.ok else f"{len(self.failures)} FAILED"
        return (f"{self.label}: {len(self.checks)} elements ({self.nonzero} nonzero), "
                f"max abs err {self.max_abs:.1e}, worst rel err above floor {self.worst_rel:.1e}, {status}")


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    per_param: int = 4,
    seed: int = 0,
    h: float = STEP,
    label: str = "gradcheck",
) -> GradcheckReport:
    """Compare backward() against central differences on a few random elements per parameter.

    ``loss_fn`` must be deterministic and rebuild its graph on every call.
    """
    rng = np.random.default_rng(seed)
    flags = [t.requires_grad for _, t in params]
    for _, t in params:
        t.requires_grad = True
        t.grad = None
    ad.backward(loss_fn())
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in params}
    report = GradcheckReport(label)
    with ad.no_grad():
        for name, t in params:
            flat = t.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
            for k in picks:
                orig = flat[k]
                flat[k] = orig + h
                up = loss_fn().item()
                flat[k] = orig - h
                down = loss_fn().item()
                flat[k] = orig
                idx = np.unravel_index(int(k), t.shape)
                report.checks.append(ElementCheck(name, tuple(int(i) for i in idx), float(analytic[name][idx]), (up - down) / (2 * h)))
    for (_, t), flag in zip(params, flags):
        t.requires_grad = flag
        t.grad = None
    return report


def gradcheck_suite(per_param: int = 3, seed: int = 0) -> list[GradcheckReport]:
    """Every trainable parameter class at toy dimensions (16 tokens, width 64)."""
    from .config import TrainConfig
    from .data import Vocab, generate_items
    from .decoder import sequence_loss, text_corpus
    from .encoders import init_mae_decoder, mae_forward_loss, sample_mae_mask
    from .imaging import replicate_channels
    from .pipeline import Trainer, batch_losses, forward_sample, init_model, samples_from_generated

    cfg = TrainConfig(lm_steps=0, mae_steps=0, batch_size=2, mask_ratio=0.0, modality_dropout=0.0, seed=seed)
    vocab = Vocab(size=cfg.vocab_size)
    model = init_model(cfg)
    # move the residual MLP off its zero init so every fusion path carries gradient
    rng = np.random.default_rng(seed + 1)
    last = model.fusion.mlp_r.fc2
    last.weight.data = rng.normal(0.0, 0.05, last.weight.shape)
    last.bias.data = rng.normal(0.0, 0.05, last.bias.shape)
    samples = samples_from_generated(generate_items(4, seed=seed, size=cfg.image_size), vocab)[:2]
    trainer = Trainer(model, cfg)

    def fine_tune_loss():
        fwds = [forward_sample(model, s, cfg, training=False) for s in samples]
        return batch_losses(fwds, cfg).total

    group_t = trainer.split.group_t
    fusion = [(n, t) for n, t in trainer.split.group_f if n.startswith("fusion/")]
    ln_t = [(n, t) for n, t in trainer.split.group_f if n.startswith("thermal_encoder/final_ln/")]
    reports = [
        gradcheck(fine_tune_loss, fusion, per_param, seed, label="fusion block"),
        gradcheck(fine_tune_loss, group_t, per_param, seed, label=f"last {cfg.n_trainable_blocks} thermal blocks"),
        gradcheck(fine_tune_loss, ln_t, per_param, seed, label="thermal final LayerNorm"),
    ]

    null_sample = samples[0]

    def null_loss():
        fwd = forward_sample(model, null_sample, cfg, training=False, subset="thermal")
        return fwd.lm

    reports.append(gradcheck(null_loss, [(n, t) for n, t in trainer.split.group_f if n.startswith("nulls/rgb")], per_param, seed, label="null token grid"))

    enc = model.thermal_encoder
    mae_dec = init_mae_decoder(rng, enc, heads=cfg.heads, mlp_ratio=cfg.mlp_ratio)
    img = replicate_channels(samples[0].thermal)
    mask = sample_mae_mask(enc.n_tokens, 0.75, seed)
    mae_params = list(nn.named_parameters(mae_dec, "mae_decoder"))
    reports.append(gradcheck(lambda: mae_forward_loss(img, enc, mae_dec, mask), mae_params, per_param, seed, label="MAE decoder"))

    ex = next(e for e in text_corpus(vocab, seed=seed, n_qa=4, toy_repeats=0) if e.slots)
    dec_params = list(nn.named_parameters(model.decoder, "decoder"))
    reports.append(gradcheck(lambda: sequence_loss(model.decoder, ex.ids, ex.slots, ex.background), dec_params, per_param, seed, label="toy decoder (pretraining)"))
    return reports
