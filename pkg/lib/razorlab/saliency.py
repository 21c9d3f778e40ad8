"""
RazorLab - Ratio-aware component saliency

    phi(l) = |g_f| / (|theta_l| + eps) * (1 - cos(g_f, g_r)) ** alpha

g_f and g_r are the forget and retain loss gradients restricted to
component l, flattened in canonical key order. A missing direction
(zero vector) counts as orthogonal: cos = 0.

The squared variant uses |g_f|^2 / (|theta_l|^2 + eps).
"""

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from razorlab.data_synth import PairBatch
from razorlab.errors import ConfigError, InputError
from razorlab.log import get_logger
from razorlab.losses import (
    SIGNED,
    BaselineSims,
    forget_loss,
    mismatch_loss,
    retain_loss,
    value_and_grad,
)
from razorlab.model import (
    Checkpoint,
    ComponentId,
    ComponentKind,
    component_params,
    enumerate_components,
    flatten,
    slice_gradients,
)

logger = get_logger('saliency')

RATIO = 'ratio'
SQUARED_RATIO = 'squared_ratio'
VARIANTS = (RATIO, SQUARED_RATIO)

# unit vectors this close (per element, scaled by sqrt(n)) share a direction
ALIGNED_ULPS = 16
_EPS = float(np.finfo(np.float64).eps)

GradMap = Dict[str, np.ndarray]


@dataclass(frozen=True)
class ComponentGradients:
    id: ComponentId
    g_f: GradMap
    g_r: GradMap
    g_m: Optional[GradMap] = None
    order: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.order:
            object.__setattr__(self, 'order', tuple(self.g_f))
        if set(self.g_f) != set(self.g_r):
            raise ConfigError(f"{self.id}: forget and retain gradient keys differ")

    @property
    def flattened_f(self) -> np.ndarray:
        return flatten(self.g_f, self.order)

    @property
    def flattened_r(self) -> np.ndarray:
        return flatten(self.g_r, self.order)


def full_gradients(
    checkpoint: Checkpoint,
    retain_batch: PairBatch,
    forget_batch: PairBatch,
    baseline: Optional[BaselineSims] = None,
    temperature: float = 0.07,
    mismatch_variant: str = SIGNED,
) -> Tuple[GradMap, GradMap, Optional[GradMap]]:
    """Whole-model (editable keys) forget, retain and optional mismatch gradients"""
    if len(retain_batch) == 0 or len(forget_batch) == 0:
        raise InputError("saliency needs nonempty retain and forget batches")
    _, g_f = value_and_grad(forget_loss, checkpoint, forget_batch)
    _, g_r = value_and_grad(retain_loss, checkpoint, retain_batch, temperature)
    g_m = None
    if baseline is not None:
        _, g_m = value_and_grad(mismatch_loss, checkpoint, forget_batch, baseline, mismatch_variant)
    return g_f, g_r, g_m


def component_gradients(
    checkpoint: Checkpoint,
    retain_batch: PairBatch,
    forget_batch: PairBatch,
    baseline: Optional[BaselineSims] = None,
    temperature: float = 0.07,
    mismatch_variant: str = SIGNED,
    components: Optional[Sequence[ComponentId]] = None,
) -> List[ComponentGradients]:
    """One backward pass per loss, then sliced per component"""
    g_f, g_r, g_m = full_gradients(
        checkpoint, retain_batch, forget_batch, baseline, temperature, mismatch_variant
    )
    config = checkpoint.config
    components = enumerate_components(config) if components is None else components
    out = []
    for cid in components:
        f = slice_gradients(config, g_f, cid)
        out.append(ComponentGradients(
            id=cid,
            g_f=f,
            g_r=slice_gradients(config, g_r, cid),
            g_m=slice_gradients(config, g_m, cid) if g_m is not None else None,
            order=tuple(f),
        ))
    return out


def one_minus_cos(a: np.ndarray, b: np.ndarray) -> float:
    """
    1 - cos(a, b) as half the squared distance of the unit vectors.

    Exactly 0 for identical directions (b = c * a, c > 0), where the unit
    vectors agree up to rounding in the norms; 1 when either vector is zero.
    """
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 1.0
    diff = a / na - b / nb
    if float(np.max(np.abs(diff))) <= ALIGNED_ULPS * _EPS * math.sqrt(diff.size):
        return 0.0
    return min(2.0, 0.5 * float(diff @ diff))


def _check_params(alpha: float, eps: float, variant: str) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"razor.alpha must be in [0, 1], got {alpha}")
    if not eps > 0:
        raise ConfigError(f"razor.eps must be > 0, got {eps}")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown saliency variant {variant!r}")


@dataclass(frozen=True)
class SaliencyEntry:
    id: ComponentId
    index: int
    norm_gf: float
    norm_theta: float
    cos: float
    phi: float


def _measure(
    g: ComponentGradients,
    theta_l: Union[Mapping[str, np.ndarray], np.ndarray],
    alpha: float,
    eps: float,
    variant: str,
) -> Tuple[float, float, float, float]:
    _check_params(alpha, eps, variant)
    flat_f, flat_r = g.flattened_f, g.flattened_r
    theta = flatten(theta_l, g.order) if isinstance(theta_l, Mapping) else np.asarray(theta_l).reshape(-1)
    norm_gf = float(np.linalg.norm(flat_f))
    norm_theta = float(np.linalg.norm(theta))
    base = max(0.0, one_minus_cos(flat_f, flat_r))
    if variant == RATIO:
        ratio = norm_gf / (norm_theta + eps)
    else:
        ratio = norm_gf * norm_gf / (norm_theta * norm_theta + eps)
    phi = ratio * base ** alpha
    return norm_gf, norm_theta, 1.0 - base, phi


def score(
    g: ComponentGradients,
    theta_l: Union[Mapping[str, np.ndarray], np.ndarray],
    alpha: float = 0.5,
    eps: float = 1e-8,
    variant: str = RATIO,
) -> float:
    return _measure(g, theta_l, alpha, eps, variant)[3]


@dataclass
class SaliencyTable:
    """Entries ranked by descending phi, canonical order breaking ties"""

    entries: List[SaliencyEntry]
    alpha: float
    eps: float
    variant: str = RATIO

    def __post_init__(self):
        if not self.entries:
            raise InputError("saliency table is empty")
        self.entries = sorted(self.entries, key=lambda e: (-e.phi, e.index))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ranked(self) -> List[ComponentId]:
        return [e.id for e in self.entries]

    @property
    def phis(self) -> np.ndarray:
        return np.array([e.phi for e in self.entries])

    def phi_of(self, cid: ComponentId) -> float:
        for e in self.entries:
            if e.id == cid:
                return e.phi
        raise KeyError(cid.label)

    def best_outside(self, chosen: Iterable[ComponentId]) -> Optional[SaliencyEntry]:
        chosen = set(chosen)
        for e in self.entries:
            if e.id not in chosen:
                return e
        return None

    def digest(self) -> str:
        """SHA-256 over (label, phi) in ranked order"""
        h = hashlib.sha256()
        for e in self.entries:
            h.update(e.id.label.encode('utf-8'))
            h.update(struct.pack('<d', e.phi))
        return h.hexdigest()

    def to_rows(self, selected: Iterable[ComponentId] = ()) -> List[Dict[str, object]]:
        selected = set(selected)
        rows = []
        for e in self.entries:
            rows.append({
                'component': e.id.label,
                'tower': e.id.tower.value,
                'block': e.id.block_index,
                'kind': e.id.kind.value,
                'head': e.id.head_index if e.id.kind is ComponentKind.MSA_HEAD else '',
                'norm_gf': repr(e.norm_gf),
                'norm_theta': repr(e.norm_theta),
                'cos': repr(e.cos),
                'phi': repr(e.phi),
                'selected': int(e.id in selected),
            })
        return rows


TABLE_COLUMNS = ('component', 'tower', 'block', 'kind', 'head',
                 'norm_gf', 'norm_theta', 'cos', 'phi', 'selected')


def build_table(
    checkpoint: Checkpoint,
    gradients: Sequence[ComponentGradients],
    alpha: float = 0.5,
    eps: float = 1e-8,
    variant: str = RATIO,
) -> SaliencyTable:
    canonical = {cid: i for i, cid in enumerate(enumerate_components(checkpoint.config))}
    entries = []
    for g in gradients:
        norm_gf, norm_theta, cos, phi = _measure(
            g, component_params(checkpoint, g.id), alpha, eps, variant
        )
        entries.append(SaliencyEntry(g.id, canonical[g.id], norm_gf, norm_theta, cos, phi))
    table = SaliencyTable(entries, alpha, eps, variant)
    logger.debug("saliency: top %s phi=%.4g", table.entries[0].id, table.entries[0].phi)
    return table


def adaptive_threshold(table: SaliencyTable, percentile: float = 90.0) -> float:
    if not 0.0 <= percentile <= 100.0:
        raise ConfigError(f"percentile must be in [0, 100], got {percentile}")
    return float(np.percentile(table.phis, percentile))


def select(table: SaliencyTable, tau: float) -> List[ComponentId]:
    """
    Components with phi strictly above tau, ranked.

    Never empty: falls back to the top-ranked entry.
    """
    chosen = [e.id for e in table.entries if e.phi > tau]
    if not chosen:
        chosen = [table.entries[0].id]
    return chosen
