"""Fusion-design ablation variants and a runner that trains each one from shared pretrained parts."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, Sequence

from .config import TrainConfig, apply_overrides
from .data import PROMPT_DEPENDENT_KINDS, QaItem, score_benchmark
from .pipeline import Model, PairedSample, Trainer, predict

# variant name -> config overrides applied on top of the base config
VARIANTS: dict[str, dict[str, str]] = {
    "full": {},
    "no-text-attn": {"text_attn": "false"},
    "no-rgb-attn": {"rgb_attn": "false"},
    "direct-fusion": {"gated": "false"},
    "no-align-loss": {"lambda_align": "0"},
    "no-contrastive-loss": {"lambda_contr": "0"},
    "no-gate-loss": {"lambda_gate": "0"},
    "trainable-blocks-2": {"n_trainable_blocks": "2"},
    "trainable-blocks-4": {"n_trainable_blocks": "4"},
    "trainable-blocks-all": {"n_trainable_blocks": "-1"},
    "no-masking": {"mask_ratio": "0"},
}


def variant_config(base: TrainConfig, name: str) -> TrainConfig:
    if name not in VARIANTS:
        raise KeyError(f"unknown ablation variant {name!r}; choose from {', '.join(VARIANTS)}")
    overrides = dict(VARIANTS[name])
    if overrides.get("n_trainable_blocks") == "-1":
        overrides["n_trainable_blocks"] = str(base.encoder_blocks)
    return apply_overrides(base, overrides.items())


@dataclass
class VariantResult:
    name: str
    accuracy: dict[str, float]  # subset tag -> accuracy, plus "overall" and "rgb+ir/prompt"

    def row(self) -> dict:
        return {"variant": self.name, **self.accuracy}


def accuracy_table(preds: dict[str, str], samples: Sequence[PairedSample], yes_id: int) -> dict[str, float]:
    gold = [QaItem(s.id, "", "yes" if s.answer_ids == [yes_id] else "no", s.modality) for s in samples]
    report = score_benchmark(preds, gold)
    out = {k: v.accuracy for k, v in report.subsets.items()}
    out["overall"] = report.overall
    dep = [g for g, s in zip(gold, samples) if s.modality == "rgb+ir" and s.kind in PROMPT_DEPENDENT_KINDS]
    if dep:
        out["rgb+ir/prompt"] = sum(preds[g.id] == g.answer for g in dep) / len(dep)
    return out


def run_variants(
    base_cfg: TrainConfig,
    pretrained: Model,
    train: Sequence[PairedSample],
    held_out: Sequence[PairedSample],
    names: Sequence[str],
    yes_id: int,
    log: Callable | None = None,
) -> list[VariantResult]:
    """Train every named variant from a copy of the same pretrained components."""
    results = []
    for name in names:
        cfg = variant_config(base_cfg, name)
        model = copy.deepcopy(pretrained)
        trainer = Trainer(model, cfg)
        trainer.fit(train)
        acc = accuracy_table(predict(model, held_out, cfg), held_out, yes_id)
        results.append(VariantResult(name, acc))
        if log:
            log(f"{name}: " + ", ".join(f"{k} {v:.3f}" for k, v in acc.items()))
    return results


def format_table(results: Sequence[VariantResult]) -> str:
    cols = ["rgb", "ir", "rgb+ir", "rgb+ir/prompt", "overall"]
    lines = ["variant," + ",".join(cols)]
    for r in results:
        lines.append(r.name + "," + ",".join(f"{r.accuracy.get(c, float('nan')):.4f}" for c in cols))
    return "\n".join(lines) + "\n"
