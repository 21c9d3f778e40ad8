"""
RazorLab - Post-training weight quantization

Symmetric per-tensor scheme: s = max|w| / (2^(bits-1) - 1),
q = round_half_even(w / s), w' = q * s. Saturating levels map back to
exactly +-max|w|, so quantizing twice gives the same bits.
Layer-norm gains and biases stay at full precision.
"""

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from razorlab.errors import ConfigError
from razorlab.log import get_logger
from razorlab.model import Checkpoint, is_layer_norm_key

logger = get_logger('quantize')


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 8

    def __post_init__(self):
        if self.bits not in (8, 4):
            raise ConfigError(f"quantization bits must be 8 or 4, got {self.bits}")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def precision_tag(self) -> str:
        return f"q{self.bits}"


def quantize_array(w: np.ndarray, spec: QuantSpec) -> Tuple[np.ndarray, float]:
    """(dequantized copy, scale)"""
    w = np.asarray(w, dtype=np.float64)
    amax = float(np.max(np.abs(w)))
    if amax == 0.0:
        return w.copy(), 0.0
    qmax = spec.qmax
    scale = amax / qmax
    q = np.clip(np.rint(w / amax * qmax), -qmax, qmax)
    out = q * scale
    out[q == qmax] = amax
    out[q == -qmax] = -amax
    return out, scale


def quantize(checkpoint: Checkpoint, spec: QuantSpec) -> Checkpoint:
    updates = {}
    for key, array in checkpoint.tensors.items():
        if is_layer_norm_key(key):
            continue
        updates[key], _ = quantize_array(array, spec)
    out = checkpoint.replace_tensors(updates)
    return out.with_meta(tags={**checkpoint.meta.tags, 'precision': spec.precision_tag})


@dataclass(frozen=True)
class TensorQuantError:
    key: str
    scale: float
    max_abs: float
    rms: float


@dataclass(frozen=True)
class QuantErrorReport:
    bits: int
    tensors: List[TensorQuantError]
    pooled_rms: float

    def to_rows(self) -> List[dict]:
        return [
            {'bits': self.bits, 'tensor': t.key, 'scale': repr(t.scale),
             'max_abs': repr(t.max_abs), 'rms': repr(t.rms)}
            for t in self.tensors
        ]


def quant_error(checkpoint: Checkpoint, spec: QuantSpec) -> QuantErrorReport:
    """Per-tensor max-abs and RMS error of quantize(checkpoint, spec)"""
    rows = []
    total_sq, total_n = 0.0, 0
    for key, array in checkpoint.tensors.items():
        if is_layer_norm_key(key):
            continue
        approx, scale = quantize_array(array, spec)
        diff = array - approx
        sq = float(np.sum(diff * diff))
        rows.append(TensorQuantError(key, scale, float(np.max(np.abs(diff))), math.sqrt(sq / diff.size)))
        total_sq += sq
        total_n += diff.size
    pooled = math.sqrt(total_sq / total_n) if total_n else 0.0
    logger.debug("q%d pooled rms error %.3g over %d tensors", spec.bits, pooled, len(rows))
    return QuantErrorReport(spec.bits, rows, pooled)
