"""Training configuration: a flat dataclass loaded from ``key = value`` text files."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .autodiff import ContractError
from .objectives import LossWeights


@dataclass
class TrainConfig:
    # geometry
    image_size: int = 56
    patch_size: int = 14
    d_model: int = 64
    d_prompt: int = 64
    heads: int = 4
    encoder_blocks: int = 6
    mlp_ratio: int = 2
    prompt_len: int = 12
    vocab_size: int = 64
    decoder_blocks: int = 2
    decoder_max_text: int = 24
    pixel_mean: float = 0.0
    pixel_std: float = 1.0
    # trainable split and masking
    n_trainable_blocks: int = 4
    mask_ratio: float = 0.10
    # objective (placeholders: the weights and temperature are tuned at desk scale)
    lambda_align: float = 0.1
    lambda_contr: float = 0.1
    lambda_gate: float = 0.01
    tau: float = 0.07
    nce_symmetric: bool = True
    align_clean_rgb: bool = False
    # optimisation
    lr_therm: float = 1e-4
    lr_fusion: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 0
    batch_size: int = 4
    epochs: int = 1
    max_steps: int = 0
    modality_dropout: float = 0.1
    # fusion ablation switches
    text_attn: bool = True
    rgb_attn: bool = True
    gated: bool = True
    # pretraining stages
    mae_ratio: float = 0.75
    mae_steps: int = 300
    mae_batch: int = 8
    mae_lr: float = 1e-3
    mae_images: int = 64
    lm_steps: int = 400
    lm_batch: int = 8
    lm_lr: float = 3e-3
    pretrain_rgb_mae: bool = False
    # data
    train_samples: int = 2000
    eval_samples: int = 300
    seed: int = 0
    data_dir: str = ""
    mae_checkpoint: str = ""
    lm_checkpoint: str = ""

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_align, self.lambda_contr, self.lambda_gate, self.tau)

    def validate(self) -> TrainConfig:
        problems = []
        if self.image_size % self.patch_size:
            problems.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.heads or (self.d_model // 2) % self.heads:
            problems.append(f"d_model {self.d_model} (and d_model/2) must be divisible by heads {self.heads}")
        if self.d_prompt != self.d_model:
            problems.append("d_prompt must equal d_model: prompts are decoder token embeddings")
        if not 0 <= self.n_trainable_blocks <= self.encoder_blocks:
            problems.append(f"n_trainable_blocks {self.n_trainable_blocks} outside [0, {self.encoder_blocks}]")
        if not 0.0 <= self.mask_ratio < 1.0:
            problems.append(f"mask_ratio {self.mask_ratio} outside [0, 1)")
        if not 0.0 <= self.mae_ratio < 1.0:
            problems.append(f"mae_ratio {self.mae_ratio} outside [0, 1)")
        if not 0.0 <= self.modality_dropout < 0.5:
            problems.append("modality_dropout must be in [0, 0.5)")
        if not self.pixel_std > 0:
            problems.append("pixel_std must be positive")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        try:
            self.weights
        except ContractError as exc:
            problems.append(str(exc))
        if problems:
            raise ContractError("invalid config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes).validate()


def _fmt(v) -> str:
    return ("true" if v else "false") if isinstance(v, bool) else str(v)


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError as exc:
        raise ContractError(f"{name}: cannot parse {raw!r}") from exc
    return raw


def apply_overrides(cfg: TrainConfig, pairs) -> TrainConfig:
    """Apply ``key=value`` strings (or (key, value) pairs); unknown keys are rejected."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    changes = {}
    for pair in pairs:
        key, value = pair.split("=", 1) if isinstance(pair, str) else pair
        key = key.strip()
        if key not in fields:
            raise ContractError(f"unknown config key {key!r}")
        changes[key] = _coerce(key, fields[key], str(value))
    return dataclasses.replace(cfg, **changes).validate()


def parse_config_text(text: str, source: str = "<string>") -> TrainConfig:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{source}:{lineno}: expected key = value")
        pairs.append(line)
    return apply_overrides(TrainConfig(), pairs)


def load_config(path) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), str(p))
