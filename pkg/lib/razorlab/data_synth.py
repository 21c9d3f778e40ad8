"""
RazorLab - Synthetic identity dataset

Each class ("identity") has an orthogonal prototype pattern over the
patch grid and a prompt [BOS, class, style, EOS]. A pair's image is the
class prototype plus a style pattern plus Gaussian noise; its prompt
names the class and the style.

Token ids: 0 PAD, 1 BOS, 2 EOS, then n_styles style tokens, then one
token per class.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from razorlab.errors import InputError, SpecError
from razorlab.log import get_logger
from razorlab.model import ModelConfig
from razorlab.seeding import DATA, NOISE, stream

logger = get_logger('data')

PAD, BOS, EOS = 0, 1, 2
FIRST_STYLE_TOKEN = 3


@dataclass(frozen=True)
class SplitSpec:
    n_classes: int = 10
    forget_classes: Tuple[int, ...] = (0,)
    pairs_per_class: int = 64
    noise_sigma: float = 0.1
    seed: int = 0
    val_fraction: float = 0.2
    n_styles: int = 4
    style_amplitude: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, 'forget_classes', tuple(sorted(set(int(c) for c in self.forget_classes))))

    def validate(self, config: Optional[ModelConfig] = None) -> 'SplitSpec':
        if self.n_classes < 2:
            raise SpecError(f"split.n_classes must be >= 2, got {self.n_classes}")
        if not self.forget_classes:
            raise SpecError("split.forget_classes must not be empty")
        if any(c < 0 or c >= self.n_classes for c in self.forget_classes):
            raise SpecError(f"split.forget_classes {self.forget_classes} outside [0, {self.n_classes})")
        if len(self.forget_classes) == self.n_classes:
            raise SpecError("split.forget_classes must leave at least one retain class")
        if self.pairs_per_class < 1:
            raise SpecError("split.pairs_per_class must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise SpecError(f"split.val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.train_per_class < 1:
            raise SpecError("split.val_fraction leaves no training pairs per class")
        if self.noise_sigma < 0 or self.style_amplitude < 0:
            raise SpecError("split.noise_sigma and split.style_amplitude must be >= 0")
        if self.n_styles < 1:
            raise SpecError("split.n_styles must be >= 1")
        if self.seed < 0:
            raise SpecError("seed must be >= 0")
        if config is not None:
            needed = FIRST_STYLE_TOKEN + self.n_styles + self.n_classes
            if config.vocab_size < needed:
                raise SpecError(f"model.vocab_size {config.vocab_size} too small, need {needed}")
            if config.max_text_len < 4:
                raise SpecError("model.max_text_len must be >= 4 for [BOS, class, style, EOS]")
            if config.n_patches * config.patch_dim < self.n_classes + self.n_styles:
                raise SpecError("patch grid too small for orthogonal prototypes")
        return self

    @property
    def train_per_class(self) -> int:
        return int(math.floor(self.pairs_per_class * (1.0 - self.val_fraction)))

    def class_token(self, class_id: int) -> int:
        return FIRST_STYLE_TOKEN + self.n_styles + class_id

    def style_token(self, style_id: int) -> int:
        return FIRST_STYLE_TOKEN + style_id

    def prompt(self, class_id: int, style_id: int = 0) -> Tuple[int, ...]:
        return (BOS, self.class_token(class_id), self.style_token(style_id), EOS)


@dataclass(frozen=True)
class Identity:
    class_id: int
    prototype: np.ndarray
    prompt_template: Tuple[int, ...]


@dataclass(frozen=True)
class Pair:
    index: int
    class_id: int
    style_id: int
    image: np.ndarray
    tokens: Tuple[int, ...]


@dataclass(frozen=True)
class PairBatch:
    """Dense view of a list of pairs"""

    images: np.ndarray
    tokens: List[Tuple[int, ...]]
    class_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_pairs(cls, pairs: Sequence[Pair]) -> 'PairBatch':
        if not pairs:
            raise InputError("empty batch")
        return cls(
            images=np.stack([p.image for p in pairs]),
            tokens=[p.tokens for p in pairs],
            class_ids=np.array([p.class_id for p in pairs], dtype=np.int64),
        )


@dataclass(frozen=True)
class Splits:
    spec: SplitSpec
    forget: List[Pair]
    retain: List[Pair]
    val: List[Pair]
    identities: List[Identity] = field(default_factory=list)

    @property
    def forget_classes(self) -> Tuple[int, ...]:
        return self.spec.forget_classes

    @property
    def prompt_bank(self) -> List[Tuple[int, ...]]:
        """One canonical prompt per class, indexed by class id"""
        return [self.spec.prompt(c) for c in range(self.spec.n_classes)]

    @property
    def val_forget(self) -> List[Pair]:
        return [p for p in self.val if p.class_id in self.forget_classes]

    @property
    def val_retain(self) -> List[Pair]:
        return [p for p in self.val if p.class_id not in self.forget_classes]


def _orthonormal_patterns(rng: np.random.Generator, count: int, shape: Tuple[int, int]) -> np.ndarray:
    dim = shape[0] * shape[1]
    basis, _ = np.linalg.qr(rng.standard_normal((dim, count)))
    # per-element RMS 1
    return (basis.T * math.sqrt(dim)).reshape((count,) + shape)


def generate(spec: SplitSpec, config: Optional[ModelConfig] = None) -> Splits:
    """Forget, retain and validation splits, fully determined by spec.seed"""
    config = config or ModelConfig()
    spec.validate(config)
    shape = (config.n_patches, config.patch_dim)

    data_rng = stream(spec.seed, DATA)
    noise_rng = stream(spec.seed, NOISE)
    patterns = _orthonormal_patterns(data_rng, spec.n_classes + spec.n_styles, shape)
    prototypes, styles = patterns[:spec.n_classes], patterns[spec.n_classes:]

    identities = [Identity(c, prototypes[c], spec.prompt(c)) for c in range(spec.n_classes)]
    forget, retain, val = [], [], []
    index = 0
    for c in range(spec.n_classes):
        for j in range(spec.pairs_per_class):
            style = int(data_rng.integers(spec.n_styles))
            noise = noise_rng.normal(0.0, 1.0, size=shape) * spec.noise_sigma
            image = prototypes[c] + styles[style] * spec.style_amplitude + noise
            image.setflags(write=False)
            pair = Pair(index, c, style, image, spec.prompt(c, style))
            index += 1
            if j >= spec.train_per_class:
                val.append(pair)
            elif c in spec.forget_classes:
                forget.append(pair)
            else:
                retain.append(pair)

    logger.debug("generated %d forget, %d retain, %d val pairs", len(forget), len(retain), len(val))
    return Splits(spec, forget, retain, val, identities)


def nearest_prototype(identities: Sequence[Identity], images: np.ndarray) -> np.ndarray:
    """Class of the closest prototype (Euclidean) for each image"""
    protos = np.stack([i.prototype.reshape(-1) for i in identities])
    flat = np.asarray(images).reshape(len(images), -1)
    dists = ((flat[:, None, :] - protos[None, :, :]) ** 2).sum(axis=-1)
    return np.array([identities[k].class_id for k in dists.argmin(axis=1)])


# =============================================================================
# Audit dumps
# =============================================================================

def _spec_record(spec: SplitSpec) -> Dict:
    return {
        'kind': 'spec',
        'n_classes': spec.n_classes,
        'forget_classes': list(spec.forget_classes),
        'pairs_per_class': spec.pairs_per_class,
        'noise_sigma': spec.noise_sigma,
        'seed': spec.seed,
        'val_fraction': spec.val_fraction,
        'n_styles': spec.n_styles,
        'style_amplitude': spec.style_amplitude,
    }


def dump_splits(splits: Splits, path: Path) -> Path:
    """JSON lines: one spec record, one record per identity, one per pair"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as fh:
        fh.write(json.dumps(_spec_record(splits.spec)) + '\n')
        for ident in splits.identities:
            fh.write(json.dumps({
                'kind': 'identity',
                'class_id': ident.class_id,
                'prompt': list(ident.prompt_template),
                'prototype': ident.prototype.tolist(),
            }) + '\n')
        for name in ('forget', 'retain', 'val'):
            for pair in getattr(splits, name):
                fh.write(json.dumps({
                    'kind': 'pair',
                    'split': name,
                    'index': pair.index,
                    'class_id': pair.class_id,
                    'style_id': pair.style_id,
                    'tokens': list(pair.tokens),
                    'image': pair.image.tolist(),
                }) + '\n')
    return path


def load_splits(path: Path) -> Splits:
    spec = None
    identities: List[Identity] = []
    parts: Dict[str, List[Pair]] = {'forget': [], 'retain': [], 'val': []}
    with open(path, encoding='utf-8') as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                kind = record.pop('kind')
            except (json.JSONDecodeError, KeyError) as exc:
                raise InputError(f"{path}:{lineno}: not a split record") from exc
            if kind == 'spec':
                spec = SplitSpec(**record)
            elif kind == 'identity':
                proto = np.array(record['prototype'], dtype=np.float64)
                identities.append(Identity(record['class_id'], proto, tuple(record['prompt'])))
            elif kind == 'pair':
                image = np.array(record['image'], dtype=np.float64)
                image.setflags(write=False)
                parts[record['split']].append(Pair(
                    record['index'], record['class_id'], record['style_id'], image, tuple(record['tokens'])
                ))
    if spec is None:
        raise InputError(f"{path}: missing spec record")
    return Splits(spec, parts['forget'], parts['retain'], parts['val'], identities)


def render_prototype_sheet(identities: Sequence[Identity], path: Path, scale: int = 8) -> Path:
    """Grayscale PNG with one tile per class prototype, left to right"""
    from PIL import Image

    if not identities:
        raise InputError("no identities to render")
    tiles = []
    for ident in identities:
        proto = ident.prototype
        lo, hi = proto.min(), proto.max()
        norm = (proto - lo) / (hi - lo) if hi > lo else np.zeros_like(proto)
        tile = np.kron((norm * 255).round().astype(np.uint8), np.ones((scale, scale), dtype=np.uint8))
        tiles.append(tile)
        tiles.append(np.zeros((tile.shape[0], scale), dtype=np.uint8))
    sheet = np.concatenate(tiles[:-1], axis=1)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sheet).convert('L').save(path)
    return path
