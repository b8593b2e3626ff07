"""Synthetic paired RGB/thermal scenes, yes/no QA items, dataset files and scoring.

Scenes are Gaussian blobs on a flat or lightly textured background. Warm
bodies glow in thermal at any illumination but are not drawn in RGB below
``DARK_LEVEL``; light sources are drawn in RGB only. That makes "is there a
warm object" in a dark scene answerable from thermal alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractError
from .imaging import ImagePlane, quantize, read_image, write_netpbm

GENERATOR_VERSION = "1"
DARK_LEVEL = 0.3
SUBSETS = ("rgb", "ir", "rgb+ir")

THERMAL_BACKGROUND = 0.25
WARM_PEAK = 0.95
COLD_LEVEL = 0.05
RGB_BACKGROUND_TINT = np.array([1.0, 0.95, 0.9])
RGB_BACKGROUND_GAIN = 0.6
WARM_COLOR = np.array([0.8, 0.55, 0.45])
COLD_COLOR = np.array([0.3, 0.5, 0.85])
LIGHT_COLOR = np.array([1.0, 0.95, 0.6])

# ---------------------------------------------------------------- vocabulary

SPECIALS = ["<pad>", "<bos>", "<eos>", "<unk>"]
WORDS = (
    "yes no is there a an any warm object objects light source sources and or ? . are two three one "
    "cold in the dark scene image thermal color view glows shines bright person-like how many visible "
    "night day see i can at shows"
).split()
VOCAB = SPECIALS + WORDS
PAD, BOS, EOS, UNK = 0, 1, 2, 3

QUESTIONS = {
    "warm": "is there a warm object ?",
    "count_warm": "are there two warm objects ?",
    "light": "is there a light source ?",
    "warm_and_light": "is there a warm object and a light source ?",
    "warm_or_light": "is there a warm object or a light source ?",
}
KIND_SUBSET = {"warm": "ir", "count_warm": "ir", "light": "rgb", "warm_and_light": "rgb+ir", "warm_or_light": "rgb+ir"}
# rgb+ir items whose gold answer changes if "and" and "or" are swapped
PROMPT_DEPENDENT_KINDS = ("warm_and_light", "warm_or_light")

TOY_SENTENCES = [
    "the warm object glows in the thermal view .",
    "a light source shines in the color view .",
    "i can see a cold object in the bright scene .",
]


class Vocab:
    def __init__(self, words: Sequence[str] = VOCAB, size: int = 64):
        if len(words) > size:
            raise ContractError(f"vocabulary of {len(words)} words exceeds size {size}")
        self.words = list(words)
        self.size = size
        self.index = {w: i for i, w in enumerate(self.words)}

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK) for w in text.lower().split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.words[i] if i < len(self.words) else "<unk>" for i in ids)

    @property
    def yes(self) -> int:
        return self.index["yes"]

    @property
    def no(self) -> int:
        return self.index["no"]


# ---------------------------------------------------------------- scenes


@dataclass
class SceneObject:
    kind: str  # "warm-body" | "cold-object" | "light-source"
    cy: float
    cx: float
    radius: float


@dataclass
class SceneSpec:
    height: int = 56
    width: int = 56
    objects: list[SceneObject] = field(default_factory=list)
    illumination: float = 0.5
    seed: int = 0
    texture: float = 0.03

    def __post_init__(self):
        if not 0.0 <= self.illumination <= 1.0:
            raise ContractError("illumination must be in [0, 1]")
        for o in self.objects:
            if o.kind not in ("warm-body", "cold-object", "light-source"):
                raise ContractError(f"unknown object kind {o.kind!r}")
            if not (0 <= o.cy < self.height and 0 <= o.cx < self.width and o.radius > 0):
                raise ContractError(f"object {o} lies outside the {self.height}x{self.width} image")

    def count(self, kind: str) -> int:
        return sum(o.kind == kind for o in self.objects)


def _blob(spec: SceneSpec, o: SceneObject) -> np.ndarray:
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    sigma = o.radius / 2.0
    return np.exp(-((yy - o.cy) ** 2 + (xx - o.cx) ** 2) / (2.0 * sigma * sigma))


def generate_pair(spec: SceneSpec) -> tuple[ImagePlane, ImagePlane]:
    """Render (rgb 3ch, thermal 1ch) for a scene; deterministic in ``spec``."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    tex_rgb = spec.texture * rng.uniform(-1.0, 1.0, size=(h, w)) if spec.texture else np.zeros((h, w))
    tex_th = spec.texture * rng.uniform(-1.0, 1.0, size=(h, w)) if spec.texture else np.zeros((h, w))

    level = RGB_BACKGROUND_GAIN * spec.illumination
    rgb = (level * RGB_BACKGROUND_TINT)[None, None, :] * (1.0 + tex_rgb[:, :, None])
    rgb = np.broadcast_to(rgb, (h, w, 3)).copy()
    th = THERMAL_BACKGROUND * (1.0 + tex_th)

    for o in spec.objects:
        g = _blob(spec, o)
        g3 = g[:, :, None]
        if o.kind == "warm-body":
            th = np.maximum(th, THERMAL_BACKGROUND + (WARM_PEAK - THERMAL_BACKGROUND) * g)
            if spec.illumination >= DARK_LEVEL:
                rgb = rgb * (1 - g3) + (WARM_COLOR * spec.illumination)[None, None, :] * g3
        elif o.kind == "cold-object":
            th = th * (1 - g) + COLD_LEVEL * g
            rgb = rgb * (1 - g3) + (COLD_COLOR * spec.illumination)[None, None, :] * g3
        else:
            rgb = rgb * (1 - g3) + LIGHT_COLOR[None, None, :] * g3
    return ImagePlane(np.clip(rgb, 0.0, 1.0)), ImagePlane(np.clip(th, 0.0, 1.0)[:, :, None])


# ---------------------------------------------------------------- QA items


@dataclass
class QaItem:
    id: str
    question: str
    answer: str  # "yes" | "no"
    modality: str  # "rgb" | "ir" | "rgb+ir"
    rgb: str = ""  # relative path
    thermal: str = ""
    kind: str = ""

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in ("id", "rgb", "thermal", "question", "answer", "modality")}


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def scene_seed(master: int, index: int) -> int:
    return splitmix64(splitmix64(master) ^ index)


def answer_for(kind: str, spec: SceneSpec) -> str:
    warm = spec.count("warm-body")
    light = spec.count("light-source")
    truth = {
        "warm": warm > 0,
        "count_warm": warm == 2,
        "light": light > 0,
        "warm_and_light": warm > 0 and light > 0,
        "warm_or_light": warm > 0 or light > 0,
    }[kind]
    return "yes" if truth else "no"


def _place(rng: np.random.Generator, spec_hw: tuple[int, int], kind: str, taken: list[SceneObject]) -> SceneObject:
    h, w = spec_hw
    radius = float(rng.uniform(4.0, 7.0)) if kind != "light-source" else float(rng.uniform(3.0, 5.0))
    for _ in range(100):
        cy = float(rng.uniform(radius, h - radius))
        cx = float(rng.uniform(radius, w - radius))
        if all((cy - o.cy) ** 2 + (cx - o.cx) ** 2 > (radius + o.radius + 2.0) ** 2 for o in taken):
            break
    return SceneObject(kind, cy, cx, radius)


def _presence(kind: str, answer: str, rng: np.random.Generator) -> tuple[int, int]:
    """(warm count, light count) consistent with the wanted answer."""
    yes = answer == "yes"
    if kind == "warm":
        return (1 if yes else 0), int(rng.random() < 0.5)
    if kind == "count_warm":
        return (2 if yes else int(rng.choice([0, 1, 3]))), int(rng.random() < 0.5)
    if kind == "light":
        return int(rng.random() < 0.5), (1 if yes else 0)
    one = [(1, 0), (0, 1)][int(rng.integers(2))]
    if kind == "warm_and_light":
        if yes:
            return 1, 1
        return one if rng.random() < 0.75 else (0, 0)
    if kind == "warm_or_light":
        if not yes:
            return 0, 0
        return one if rng.random() < 0.75 else (1, 1)
    raise ContractError(f"unknown question kind {kind!r}")


def make_scene(kind: str, answer: str, seed: int, size: int = 56, texture: float = 0.03) -> SceneSpec:
    rng = np.random.default_rng(seed)
    subset = KIND_SUBSET[kind]
    if subset == "rgb":
        illum = float(rng.uniform(0.45, 1.0))
    else:
        illum = float(rng.uniform(0.02, 0.25))
    n_warm, n_light = _presence(kind, answer, rng)
    n_cold = int(rng.integers(0, 2))
    objects: list[SceneObject] = []
    for k, n in (("warm-body", n_warm), ("light-source", n_light), ("cold-object", n_cold)):
        for _ in range(n):
            objects.append(_place(rng, (size, size), k, objects))
    spec = SceneSpec(size, size, objects, illum, seed=int(rng.integers(2**31)), texture=texture)
    assert answer_for(kind, spec) == answer
    return spec


def flip_thermal_evidence(spec: SceneSpec, seed: int = 0) -> SceneSpec:
    """Toggle warm-body presence: drop every warm body, or add one if there is none."""
    rng = np.random.default_rng(seed)
    others = [o for o in spec.objects if o.kind != "warm-body"]
    if spec.count("warm-body"):
        objects = others
    else:
        objects = others + [_place(rng, (spec.height, spec.width), "warm-body", others)]
    return SceneSpec(spec.height, spec.width, objects, spec.illumination, spec.seed, spec.texture)


DEFAULT_KINDS = {
    "rgb": ("light",),
    "ir": ("warm",),
    "rgb+ir": ("warm_and_light", "warm_or_light"),
}


def _subset_quota(n: int, balance: dict[str, float], seed: int) -> list[str]:
    weights = np.array([balance.get(s, 0.0) for s in SUBSETS], dtype=float)
    if weights.sum() <= 0:
        raise ContractError("subset balance must have positive total weight")
    raw = weights / weights.sum() * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    out = [s for s, c in zip(SUBSETS, counts) for _ in range(c)]
    np.random.default_rng(seed).shuffle(out)
    return out


@dataclass
class GeneratedItem:
    item: QaItem
    spec: SceneSpec
    rgb: ImagePlane
    thermal: ImagePlane


def generate_items(
    n: int,
    seed: int = 0,
    balance: dict[str, float] | None = None,
    kinds: dict[str, Sequence[str]] | None = None,
    size: int = 56,
    prefix: str = "s",
    texture: float = 0.03,
) -> list[GeneratedItem]:
    """In-memory QA items with exactly alternating yes/no answers inside each subset."""
    balance = balance or {s: 1.0 for s in SUBSETS}
    kinds = kinds or DEFAULT_KINDS
    subsets = _subset_quota(n, balance, seed)
    seen = {s: 0 for s in SUBSETS}
    out = []
    for i, subset in enumerate(subsets):
        k = seen[subset]
        seen[subset] += 1
        ks = kinds[subset]
        kind = ks[(k // 2) % len(ks)]
        answer = "yes" if k % 2 == 0 else "no"
        s_seed = scene_seed(seed, i)
        spec = make_scene(kind, answer, s_seed, size=size, texture=texture)
        rgb, th = generate_pair(spec)
        item_id = f"{prefix}{i:06d}"
        qa = QaItem(item_id, QUESTIONS[kind], answer, subset, f"rgb/{item_id}.ppm", f"thermal/{item_id}.pgm", kind)
        out.append(GeneratedItem(qa, spec, quantize(rgb), quantize(th)))
    return out


@dataclass
class Manifest:
    seed: int
    generator_version: str
    counts: dict
    train: list[QaItem]
    eval: list[QaItem]

    @property
    def rows(self) -> int:
        return len(self.train) + len(self.eval)


def emit_dataset(
    n_scenes: int,
    balance: dict[str, float] | None,
    seed: int,
    out_dir,
    eval_fraction: float = 0.2,
    size: int = 56,
) -> Manifest:
    """Write PPM/PGM pairs plus train/eval JSONL files; one QA item per image pair."""
    out = Path(out_dir)
    try:
        (out / "rgb").mkdir(parents=True, exist_ok=True)
        (out / "thermal").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    n_eval = int(round(n_scenes * eval_fraction))
    n_train = n_scenes - n_eval
    train = generate_items(n_train, seed=seed, balance=balance, size=size, prefix="tr")
    held = generate_items(n_eval, seed=splitmix64(seed), balance=balance, size=size, prefix="ev")
    for g in train + held:
        write_netpbm(out / g.item.rgb, g.rgb)
        write_netpbm(out / g.item.thermal, g.thermal)
    for name, items in (("train", train), ("eval", held)):
        with open(out / f"{name}.jsonl", "w") as fh:
            for g in items:
                fh.write(json.dumps(g.item.to_json()) + "\n")
    counts = {
        split: {s: sum(g.item.modality == s for g in items) for s in SUBSETS}
        for split, items in (("train", train), ("eval", held))
    }
    manifest = Manifest(seed, GENERATOR_VERSION, counts, [g.item for g in train], [g.item for g in held])
    header = {"seed": seed, "generator_version": GENERATOR_VERSION, "counts": counts, "n_scenes": n_scenes, "image_size": size}
    (out / "manifest.json").write_text(json.dumps(header, indent=2) + "\n")
    return manifest


def read_jsonl(path) -> list[QaItem]:
    items = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                items.append(QaItem(row["id"], row["question"], row["answer"], row["modality"], row["rgb"], row["thermal"]))
    return items


def load_split(data_dir, split: str) -> list[tuple[QaItem, ImagePlane, ImagePlane]]:
    base = Path(data_dir)
    path = base / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no {split} split at {path}")
    return [(it, read_image(base / it.rgb), read_image(base / it.thermal)) for it in read_jsonl(path)]


# ---------------------------------------------------------------- scoring


@dataclass
class SubsetScore:
    count: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.count if self.count else 0.0


@dataclass
class BenchReport:
    subsets: dict[str, SubsetScore]
    overall: float

    def to_json(self) -> dict:
        return {
            "subsets": {k: {"count": v.count, "accuracy": v.accuracy} for k, v in self.subsets.items()},
            "overall": self.overall,
        }


def normalize_answer(text: str) -> str:
    parts = text.strip().lower().split()
    return parts[0] if parts else ""


def score_benchmark(predictions: dict[str, str], gold: Sequence[QaItem]) -> BenchReport:
    missing = [g.id for g in gold if g.id not in predictions]
    if missing:
        raise ContractError(f"missing predictions for {len(missing)} items: {missing[:10]}")
    subsets: dict[str, SubsetScore] = {}
    for g in gold:
        s = subsets.setdefault(g.modality, SubsetScore(0, 0))
        s.count += 1
        pred = normalize_answer(predictions[g.id])
        s.correct += int(pred in ("yes", "no") and pred == g.answer)
    total = sum(s.count for s in subsets.values())
    overall = sum(s.correct for s in subsets.values()) / total if total else 0.0
    return BenchReport({k: subsets[k] for k in sorted(subsets)}, overall)
