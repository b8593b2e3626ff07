"""AdamW with independent parameter groups, plus digest-based freeze checks."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, Tensor


@dataclass
class ParamGroup:
    name: str
    params: list[tuple[str, Tensor]]
    lr: float
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        if self.warmup_steps > 0 and self.step <= self.warmup_steps:
            return self.lr * self.step / self.warmup_steps
        return self.lr


def adamw_step(groups: list[ParamGroup]) -> None:
    """One decoupled-weight-decay Adam update per group, then clear gradients.

    Every group member must carry a gradient; call :func:`zero_grad` before
    the forward pass so members untouched by the loss get explicit zeros.
    """
    for g in groups:
        missing = [name for name, t in g.params if t.grad is None]
        if missing:
            raise ContractError(f"group {g.name!r}: no gradient for {missing[:5]}")
    for g in groups:
        g.step += 1
        b1, b2 = g.betas
        lr = g.current_lr()
        c1 = 1.0 - b1 ** g.step
        c2 = 1.0 - b2 ** g.step
        for name, t in g.params:
            grad = t.grad
            m = g.m.get(name)
            if m is None:
                m = np.zeros_like(t.data)
                g.v[name] = np.zeros_like(t.data)
            v = g.v[name]
            m = b1 * m + (1.0 - b1) * grad
            v = b2 * v + (1.0 - b2) * grad * grad
            g.m[name], g.v[name] = m, v
            if g.weight_decay:
                t.data = t.data - lr * g.weight_decay * t.data
            t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + g.eps)
            t.grad = None


class AdamW:
    def __init__(self, groups: list[ParamGroup]):
        seen = set()
        for g in groups:
            for name, t in g.params:
                if id(t) in seen:
                    raise ContractError(f"parameter {name} appears in more than one group")
                seen.add(id(t))
        self.groups = groups

    def zero_grad(self) -> None:
        for g in self.groups:
            for _, t in g.params:
                t.grad = np.zeros_like(t.data)

    def step(self) -> None:
        adamw_step(self.groups)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for g in self.groups:
            for name in sorted(g.m):
                out[f"{g.name}/m/{name}"] = g.m[name]
                out[f"{g.name}/v/{name}"] = g.v[name]
        return out

    def state_meta(self) -> dict:
        return {g.name: {"step": g.step, "lr": g.lr, "weight_decay": g.weight_decay} for g in self.groups}

    def load_state(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        for g in self.groups:
            g.step = int(meta.get(g.name, {}).get("step", 0))
            g.m.clear()
            g.v.clear()
            for name, _ in g.params:
                mk, vk = f"{g.name}/m/{name}", f"{g.name}/v/{name}"
                if mk in arrays:
                    g.m[name] = arrays[mk].copy()
                    g.v[name] = arrays[vk].copy()


# ---------------------------------------------------------------- freeze registry


def digest(t: Tensor | np.ndarray) -> str:
    arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    h = hashlib.sha256(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class FreezeReport:
    checked: int
    drifted: list[str]

    @property
    def ok(self) -> bool:
        return not self.drifted


class FreezeRegistry:
    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.digests: dict[str, str] = {}

    def register(self, named) -> None:
        for name, t in named:
            if t.requires_grad:
                raise ContractError(f"cannot freeze {name}: it still requires grad")
            self.tensors[name] = t
            self.digests[name] = digest(t)

    def __len__(self) -> int:
        return len(self.tensors)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors


def verify_frozen(reg: FreezeRegistry) -> FreezeReport:
    drifted = [name for name, t in reg.tensors.items() if digest(t) != reg.digests[name]]
    return FreezeReport(len(reg.tensors), drifted)
