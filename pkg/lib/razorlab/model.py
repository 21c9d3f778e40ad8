"""
RazorLab - Two-tower contrastive encoder

A CLIP-shaped toy model: an image tower over patch grids and a text tower
over token sequences, both pre-norm transformers with mean pooling and a
linear projection into a shared unit-norm embedding space.

Editable components are single attention heads and whole MLP blocks.
Head h owns rows [h*dh, (h+1)*dh) of the Q/K/V weights and the matching
columns of the output projection.
"""

import dataclasses
import math
import types
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from razorlab import autodiff as ad
from razorlab.autodiff import Tensor
from razorlab.errors import (
    ComponentLookupError,
    ConfigError,
    ContractError,
    DimensionError,
    InputError,
)
from razorlab.seeding import INIT, stream

FORMAT_VERSION = 1

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    n_blocks: int = 4
    n_heads: int = 4
    mlp_hidden: int = 64
    vocab_size: int = 64
    n_patches: int = 16
    patch_dim: int = 16
    max_text_len: int = 8
    init_std: float = 0.02

    def __post_init__(self):
        for name in ('embed_dim', 'n_blocks', 'n_heads', 'mlp_hidden',
                     'vocab_size', 'n_patches', 'patch_dim', 'max_text_len'):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"model.{name} must be an integer >= 1, got {value!r}")
        if self.embed_dim % self.n_heads:
            raise ConfigError(
                f"model.embed_dim ({self.embed_dim}) must be divisible by model.n_heads ({self.n_heads})"
            )
        if not (math.isfinite(self.init_std) and self.init_std > 0):
            raise ConfigError(f"model.init_std must be positive, got {self.init_std!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def items(self) -> List[Tuple[str, str]]:
        """Canonical (key, text) pairs, field order"""
        out = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            out.append((f.name, repr(float(value)) if f.type in (float, 'float') else str(value)))
        return out

    @classmethod
    def from_items(cls, items: Mapping[str, str]) -> 'ModelConfig':
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            try:
                kwargs[f.name] = float(raw) if f.type in (float, 'float') else int(raw)
            except ValueError as exc:
                raise ConfigError(f"model.{f.name}: cannot parse {raw!r}") from exc
        return cls(**kwargs)


class Tower(str, Enum):
    IMAGE = 'image'
    TEXT = 'text'


class ComponentKind(str, Enum):
    MSA_HEAD = 'msa_head'
    MLP = 'mlp'


@dataclass(frozen=True)
class ComponentId:
    tower: Tower
    block_index: int
    kind: ComponentKind
    head_index: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'tower', Tower(self.tower))
        object.__setattr__(self, 'kind', ComponentKind(self.kind))
        if (self.kind is ComponentKind.MSA_HEAD) != (self.head_index is not None):
            raise ComponentLookupError(f"head_index must be set iff kind is msa_head: {self!r}")

    @property
    def label(self) -> str:
        if self.kind is ComponentKind.MSA_HEAD:
            return f"{self.tower.value}.b{self.block_index}.head{self.head_index}"
        return f"{self.tower.value}.b{self.block_index}.mlp"

    def __str__(self) -> str:
        return self.label

    @classmethod
    def parse(cls, label: str) -> 'ComponentId':
        """Inverse of ``label``"""
        parts = label.split('.')
        try:
            if len(parts) == 3 and parts[1].startswith('b'):
                tower, block_index = Tower(parts[0]), int(parts[1][1:])
                if parts[2] == 'mlp':
                    return cls(tower, block_index, ComponentKind.MLP)
                if parts[2].startswith('head'):
                    return cls(tower, block_index, ComponentKind.MSA_HEAD, int(parts[2][4:]))
        except ValueError:
            pass
        raise ComponentLookupError(f"not a component label: {label!r}")


HEAD_KEYS = ('q_weight', 'k_weight', 'v_weight', 'o_weight')
MLP_KEYS = ('fc1_weight', 'fc1_bias', 'fc2_weight', 'fc2_bias')


@dataclass(frozen=True)
class ParamRef:
    """Slice of one checkpoint tensor owned by a component"""

    key: str
    index: Tuple[slice, ...]


# =============================================================================
# Parameter layout
# =============================================================================

def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every parameter name and shape, in canonical order"""
    d, hidden = config.embed_dim, config.mlp_hidden
    shapes: Dict[str, Tuple[int, ...]] = {
        'image.patch_embed.weight': (d, config.patch_dim),
        'image.patch_embed.bias': (d,),
        'image.pos_embed': (config.n_patches, d),
        'text.token_embed': (config.vocab_size, d),
        'text.pos_embed': (config.max_text_len, d),
    }
    for tower in Tower:
        for b in range(config.n_blocks):
            prefix = f"{tower.value}.blocks.{b}"
            shapes[f"{prefix}.ln1.gain"] = (d,)
            shapes[f"{prefix}.ln1.bias"] = (d,)
            for name in HEAD_KEYS:
                shapes[f"{prefix}.attn.{name}"] = (d, d)
            shapes[f"{prefix}.ln2.gain"] = (d,)
            shapes[f"{prefix}.ln2.bias"] = (d,)
            shapes[f"{prefix}.mlp.fc1_weight"] = (hidden, d)
            shapes[f"{prefix}.mlp.fc1_bias"] = (hidden,)
            shapes[f"{prefix}.mlp.fc2_weight"] = (d, hidden)
            shapes[f"{prefix}.mlp.fc2_bias"] = (d,)
        shapes[f"{tower.value}.ln_final.gain"] = (d,)
        shapes[f"{tower.value}.ln_final.bias"] = (d,)
        shapes[f"{tower.value}.proj"] = (d, d)
    return shapes


def is_layer_norm_key(key: str) -> bool:
    parts = key.split('.')
    return len(parts) >= 2 and parts[-2] in ('ln1', 'ln2', 'ln_final')


def _check_component(config: ModelConfig, cid: ComponentId) -> None:
    if not 0 <= cid.block_index < config.n_blocks:
        raise ComponentLookupError(f"{cid.label}: block index out of range (n_blocks={config.n_blocks})")
    if cid.kind is ComponentKind.MSA_HEAD and not 0 <= cid.head_index < config.n_heads:
        raise ComponentLookupError(f"{cid.label}: head index out of range (n_heads={config.n_heads})")


def enumerate_components(config: ModelConfig) -> List[ComponentId]:
    """Image tower first, then text; per block the heads, then the MLP"""
    out = []
    for tower in Tower:
        for b in range(config.n_blocks):
            for h in range(config.n_heads):
                out.append(ComponentId(tower, b, ComponentKind.MSA_HEAD, h))
            out.append(ComponentId(tower, b, ComponentKind.MLP))
    return out


def component_refs(config: ModelConfig, cid: ComponentId) -> Dict[str, ParamRef]:
    """Local name -> ParamRef, canonical local order"""
    _check_component(config, cid)
    prefix = f"{cid.tower.value}.blocks.{cid.block_index}"
    everything = (slice(None),)
    if cid.kind is ComponentKind.MLP:
        return {name: ParamRef(f"{prefix}.mlp.{name}", everything) for name in MLP_KEYS}
    dh = config.head_dim
    rows = slice(cid.head_index * dh, (cid.head_index + 1) * dh)
    refs = {
        name: ParamRef(f"{prefix}.attn.{name}", (rows, slice(None)))
        for name in ('q_weight', 'k_weight', 'v_weight')
    }
    refs['o_weight'] = ParamRef(f"{prefix}.attn.o_weight", (slice(None), rows))
    return refs


def editable_parameter_keys(config: ModelConfig) -> List[str]:
    keys = []
    for cid in enumerate_components(config):
        for ref in component_refs(config, cid).values():
            if ref.key not in keys:
                keys.append(ref.key)
    return keys


# =============================================================================
# Checkpoint
# =============================================================================

@dataclass(frozen=True)
class CheckpointMeta:
    seed: int = 0
    step: int = 0
    format_version: int = FORMAT_VERSION
    tags: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'tags', types.MappingProxyType(dict(self.tags)))

    def with_tags(self, **tags: str) -> 'CheckpointMeta':
        merged = dict(self.tags)
        merged.update({k: str(v) for k, v in tags.items()})
        return dataclasses.replace(self, tags=merged)


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """
    Immutable parameter set.

    Arrays are stored read-only; edits go through ``apply_delta`` or
    ``replace_tensors`` and produce a new Checkpoint sharing untouched
    arrays with the original.
    """

    config: ModelConfig
    tensors: Mapping[str, np.ndarray]
    meta: CheckpointMeta = field(default_factory=CheckpointMeta)

    def __post_init__(self):
        shapes = parameter_shapes(self.config)
        missing = [k for k in shapes if k not in self.tensors]
        extra = [k for k in self.tensors if k not in shapes]
        if missing or extra:
            raise ContractError(
                f"checkpoint keys do not match the architecture (missing={missing[:3]}, extra={extra[:3]})"
            )
        frozen = {}
        for key, shape in shapes.items():
            array = self.tensors[key]
            if array.shape != shape:
                raise DimensionError(f"{key}: expected shape {shape}, got {array.shape}")
            if array.dtype != np.float64 or array.flags.writeable:
                array = np.array(array, dtype=np.float64)
                array.setflags(write=False)
            frozen[key] = array
        object.__setattr__(self, 'tensors', types.MappingProxyType(frozen))

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    def keys(self) -> List[str]:
        return list(self.tensors.keys())

    def replace_tensors(self, updates: Mapping[str, np.ndarray]) -> 'Checkpoint':
        merged = dict(self.tensors)
        merged.update(updates)
        return Checkpoint(self.config, merged, self.meta)

    def with_meta(self, **changes) -> 'Checkpoint':
        return Checkpoint(self.config, self.tensors, dataclasses.replace(self.meta, **changes))

    def equals(self, other: 'Checkpoint') -> bool:
        """Bit-level equality of config and tensors"""
        return self.config == other.config and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def init_checkpoint(config: ModelConfig, seed: int) -> Checkpoint:
    """Gaussian init from the 'init' stream; gains 1, biases 0"""
    rng = stream(seed, INIT)
    tensors = {}
    for key, shape in parameter_shapes(config).items():
        if key.endswith('.gain'):
            tensors[key] = np.ones(shape)
        elif key.endswith('bias'):
            tensors[key] = np.zeros(shape)
        else:
            tensors[key] = rng.normal(0.0, config.init_std, size=shape)
    return Checkpoint(config, tensors, CheckpointMeta(seed=seed, step=0))


def component_params(checkpoint: Checkpoint, cid: ComponentId) -> Dict[str, np.ndarray]:
    """Read-only views of the tensors a component owns"""
    return {
        name: checkpoint.tensors[ref.key][ref.index]
        for name, ref in component_refs(checkpoint.config, cid).items()
    }


def flatten(values: Mapping[str, np.ndarray], order: Sequence[str]) -> np.ndarray:
    return np.concatenate([np.asarray(values[name]).reshape(-1) for name in order])


def apply_delta(checkpoint: Checkpoint, cid: ComponentId, delta: Mapping[str, np.ndarray]) -> Checkpoint:
    """theta_l + delta inside one component; every other tensor is shared unchanged"""
    refs = component_refs(checkpoint.config, cid)
    unknown = [name for name in delta if name not in refs]
    if unknown:
        raise ContractError(f"{cid.label}: delta keys {unknown} are outside the component")
    updates: Dict[str, np.ndarray] = {}
    for name, value in delta.items():
        ref = refs[name]
        value = np.asarray(value, dtype=np.float64)
        target = checkpoint.tensors[ref.key][ref.index]
        if value.shape != target.shape:
            raise DimensionError(f"{cid.label}.{name}: delta shape {value.shape} != {target.shape}")
        if not np.any(value):
            continue
        array = updates.get(ref.key)
        if array is None:
            array = np.array(checkpoint.tensors[ref.key])
            updates[ref.key] = array
        array[ref.index] = array[ref.index] + value
    if not updates:
        return checkpoint
    return checkpoint.replace_tensors(updates)


def slice_gradients(config: ModelConfig, grads: Mapping[str, np.ndarray], cid: ComponentId) -> Dict[str, np.ndarray]:
    """Per-component gradient map from a full name -> gradient map"""
    return {
        name: np.array(grads[ref.key][ref.index])
        for name, ref in component_refs(config, cid).items()
    }


# =============================================================================
# Forward passes
# =============================================================================

def as_tensors(checkpoint: Checkpoint, trainable: Iterable[str] = ()) -> Dict[str, Tensor]:
    """Tensor view of a checkpoint; keys in ``trainable`` become named leaves"""
    trainable = set(trainable)
    out = {}
    for key, array in checkpoint.tensors.items():
        if key in trainable:
            out[key] = ad.parameter(array, name=key)
        else:
            out[key] = Tensor._wrap(array)
    return out


class TrackedParams:
    """Checkpoint wrapped as tensors for one graph; ``trainable`` keys are named leaves"""

    def __init__(self, checkpoint: Checkpoint, trainable: Iterable[str] = ()):
        self.checkpoint = checkpoint
        self.config = checkpoint.config
        self.tensors = as_tensors(checkpoint, trainable)

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    @classmethod
    def of(cls, source) -> 'TrackedParams':
        if isinstance(source, cls):
            return source
        if isinstance(source, Checkpoint):
            return cls(source)
        raise ContractError(f"expected a Checkpoint or TrackedParams, got {type(source).__name__}")


def _linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    y = ad.matmul(x, ad.transpose(weight))
    return y if bias is None else ad.add(y, bias)


def _attention(params: Mapping[str, Tensor], prefix: str, h: Tensor, config: ModelConfig) -> Tensor:
    q = _linear(h, params[f"{prefix}.q_weight"])
    k = _linear(h, params[f"{prefix}.k_weight"])
    v = _linear(h, params[f"{prefix}.v_weight"])
    dh = config.head_dim
    scale = 1.0 / math.sqrt(dh)
    heads = []
    for i in range(config.n_heads):
        lo, hi = i * dh, (i + 1) * dh
        q_h = ad.slice_axis(q, -1, lo, hi)
        k_h = ad.slice_axis(k, -1, lo, hi)
        v_h = ad.slice_axis(v, -1, lo, hi)
        scores = ad.scale(ad.matmul(q_h, ad.transpose(k_h, (0, 2, 1))), scale)
        heads.append(ad.matmul(ad.softmax_rows(scores), v_h))
    mixed = heads[0] if len(heads) == 1 else ad.concat(heads, axis=-1)
    return _linear(mixed, params[f"{prefix}.o_weight"])


def _mlp(params: Mapping[str, Tensor], prefix: str, h: Tensor) -> Tensor:
    hidden = ad.gelu(_linear(h, params[f"{prefix}.fc1_weight"], params[f"{prefix}.fc1_bias"]))
    return _linear(hidden, params[f"{prefix}.fc2_weight"], params[f"{prefix}.fc2_bias"])


def _trunk(params: Mapping[str, Tensor], tower: Tower, x: Tensor, config: ModelConfig) -> Tensor:
    t = tower.value
    for b in range(config.n_blocks):
        prefix = f"{t}.blocks.{b}"
        h = ad.layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"], LN_EPS)
        x = ad.add(x, _attention(params, f"{prefix}.attn", h, config))
        h = ad.layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"], LN_EPS)
        x = ad.add(x, _mlp(params, f"{prefix}.mlp", h))
    x = ad.layer_norm(x, params[f"{t}.ln_final.gain"], params[f"{t}.ln_final.bias"], LN_EPS)
    pooled = ad.mean(x, axis=1)
    return ad.l2_normalize(_linear(pooled, params[f"{t}.proj"]))


def check_images(config: ModelConfig, images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    expected = (config.n_patches, config.patch_dim)
    if images.ndim != 3 or images.shape[1:] != expected:
        raise DimensionError(f"images must have shape (batch, {expected[0]}, {expected[1]}), got {images.shape}")
    if images.shape[0] == 0:
        raise InputError("empty image batch")
    return images


def check_tokens(config: ModelConfig, tokens: Sequence[Sequence[int]]) -> List[np.ndarray]:
    if len(tokens) == 0:
        raise InputError("empty token batch")
    out = []
    for seq in tokens:
        seq = np.asarray(seq, dtype=np.int64).reshape(-1)
        if not 1 <= seq.size <= config.max_text_len:
            raise InputError(f"token sequence length {seq.size} outside [1, {config.max_text_len}]")
        if seq.min() < 0 or seq.max() >= config.vocab_size:
            raise InputError(f"token id outside vocabulary [0, {config.vocab_size})")
        out.append(seq)
    return out


def forward_images(params: Mapping[str, Tensor], config: ModelConfig, images) -> Tensor:
    """(B, n_patches, patch_dim) -> (B, d) unit rows"""
    images = check_images(config, images)
    x = _linear(Tensor._wrap(images), params['image.patch_embed.weight'], params['image.patch_embed.bias'])
    x = ad.add(x, params['image.pos_embed'])
    return _trunk(params, Tower.IMAGE, x, config)


def forward_texts(params: Mapping[str, Tensor], config: ModelConfig, tokens: Sequence[Sequence[int]]) -> Tensor:
    """
    Token sequences -> (B, d) unit rows.

    Sequences are grouped by length and run as dense batches; rows come
    back in input order.
    """
    seqs = check_tokens(config, tokens)
    groups: Dict[int, List[int]] = {}
    for i, seq in enumerate(seqs):
        groups.setdefault(seq.size, []).append(i)

    outputs, order = [], []
    for length in sorted(groups):
        members = groups[length]
        ids = np.stack([seqs[i] for i in members])
        x = ad.take_rows(params['text.token_embed'], ids)
        x = ad.add(x, ad.slice_axis(params['text.pos_embed'], 0, 0, length))
        outputs.append(_trunk(params, Tower.TEXT, x, config))
        order.extend(members)

    if len(outputs) == 1:
        return outputs[0]
    stacked = ad.concat(outputs, axis=0)
    inverse = np.argsort(np.asarray(order))
    return ad.take_rows(stacked, inverse)


def encode_images(checkpoint: Checkpoint, images) -> np.ndarray:
    return forward_images(as_tensors(checkpoint), checkpoint.config, images).data


def encode_texts(checkpoint: Checkpoint, tokens: Sequence[Sequence[int]]) -> np.ndarray:
    return forward_texts(as_tensors(checkpoint), checkpoint.config, tokens).data


def encode_image(checkpoint: Checkpoint, image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    expected = (checkpoint.config.n_patches, checkpoint.config.patch_dim)
    if image.shape != expected:
        raise DimensionError(f"image must have shape {expected}, got {image.shape}")
    return encode_images(checkpoint, image[None])[0]


def encode_text(checkpoint: Checkpoint, tokens: Sequence[int]) -> np.ndarray:
    return encode_texts(checkpoint, [tokens])[0]
