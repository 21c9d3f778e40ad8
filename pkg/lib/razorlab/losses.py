"""
RazorLab - Unlearning objectives

retain:   symmetric InfoNCE over the retain batch similarity matrix
forget:   mean(1 - <v_i, t_i>) over forget pairs
mismatch: drift of forget-pair similarities from the frozen model,
          signed mean (default) or mean squared

The composite objective is
    L = L_retain + lambda_f * rho * L_forget + lambda_m * L_mismatch
with switchable terms for ablations.
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np

from razorlab import autodiff as ad
from razorlab.autodiff import Graph, Tensor
from razorlab.data_synth import PairBatch
from razorlab.errors import ConfigError, ContractError, InputError
from razorlab.model import (
    Checkpoint,
    TrackedParams,
    editable_parameter_keys,
    forward_images,
    forward_texts,
)

SIGNED = 'signed'
SQUARED = 'squared'
MISMATCH_VARIANTS = (SIGNED, SQUARED)


@dataclass(frozen=True)
class LossWeights:
    rho: float = 0.5
    lambda_f: float = 1.0
    lambda_m: float = 0.1
    temperature: float = 0.07

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"razor.rho must be in (0, 1], got {self.rho}")
        for name in ('lambda_f', 'lambda_m', 'temperature'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"razor.{name} must be positive, got {value}")


@dataclass(frozen=True)
class AblationSwitches:
    use_retain: bool = True
    use_forget: bool = True
    use_mismatch: bool = True

    @property
    def any_enabled(self) -> bool:
        return self.use_retain or self.use_forget or self.use_mismatch


@dataclass(frozen=True)
class BaselineSims:
    """Frozen-model forget-pair similarities, aligned with the forget batch"""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size and (values.min() < -1.0 - 1e-9 or values.max() > 1.0 + 1e-9):
            raise ContractError("baseline similarities must lie in [-1, 1]")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    def __len__(self) -> int:
        return self.values.size


def _require(batch: Optional[PairBatch], what: str) -> PairBatch:
    if batch is None or len(batch) == 0:
        raise InputError(f"{what} batch is empty")
    return batch


def pair_similarities(params, batch: PairBatch) -> Tensor:
    """<v_i, t_i> for every pair in the batch"""
    params = TrackedParams.of(params)
    images = forward_images(params, params.config, batch.images)
    texts = forward_texts(params, params.config, batch.tokens)
    return ad.rowwise_dot(images, texts)


def info_nce(sim: Tensor, temperature: float) -> Tensor:
    """Mean of the row-wise and column-wise cross-entropies of sim / temperature"""
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ContractError(f"similarity matrix must be square, got {sim.shape}")
    logits = ad.scale(sim, 1.0 / temperature)
    rows = ad.mean(ad.diagonal(ad.log_softmax_rows(logits)))
    cols = ad.mean(ad.diagonal(ad.log_softmax_rows(ad.transpose(logits))))
    return ad.scale(ad.add(rows, cols), -0.5)


def retain_loss(params, batch: PairBatch, temperature: float = 0.07) -> Tensor:
    params = TrackedParams.of(params)
    batch = _require(batch, 'retain')
    images = forward_images(params, params.config, batch.images)
    texts = forward_texts(params, params.config, batch.tokens)
    return info_nce(ad.matmul(images, ad.transpose(texts)), temperature)


def _forget_from_sims(sims: Tensor) -> Tensor:
    return ad.mean(ad.add(ad.scale(sims, -1.0), 1.0))


def _mismatch_from_sims(sims: Tensor, baseline: BaselineSims, variant: str) -> Tensor:
    if len(baseline) != sims.shape[0]:
        raise ContractError(f"baseline has {len(baseline)} entries, batch has {sims.shape[0]}")
    if variant not in MISMATCH_VARIANTS:
        raise ConfigError(f"unknown mismatch variant {variant!r}")
    drift = ad.sub(sims, Tensor._wrap(baseline.values))
    if variant == SQUARED:
        drift = ad.mul(drift, drift)
    return ad.mean(drift)


def forget_loss(params, batch: PairBatch) -> Tensor:
    batch = _require(batch, 'forget')
    return _forget_from_sims(pair_similarities(params, batch))


def mismatch_loss(params, batch: PairBatch, baseline: BaselineSims, variant: str = SIGNED) -> Tensor:
    batch = _require(batch, 'forget')
    if len(baseline) != len(batch):
        raise ContractError(f"baseline has {len(baseline)} entries, batch has {len(batch)}")
    return _mismatch_from_sims(pair_similarities(params, batch), baseline, variant)


def composite_terms(
    params,
    retain_batch: Optional[PairBatch],
    forget_batch: Optional[PairBatch],
    baseline: Optional[BaselineSims],
    weights: LossWeights,
    ablation: AblationSwitches = AblationSwitches(),
    mismatch_variant: str = SIGNED,
) -> Dict[str, Tensor]:
    """Weighted, enabled terms by name; forget and mismatch share one forward pass"""
    if not ablation.any_enabled:
        raise ConfigError("at least one loss term must be enabled")
    params = TrackedParams.of(params)
    terms: Dict[str, Tensor] = {}
    if ablation.use_retain:
        terms['retain'] = retain_loss(params, retain_batch, weights.temperature)
    if ablation.use_forget or ablation.use_mismatch:
        sims = pair_similarities(params, _require(forget_batch, 'forget'))
        if ablation.use_forget:
            terms['forget'] = ad.scale(_forget_from_sims(sims), weights.lambda_f * weights.rho)
        if ablation.use_mismatch:
            if baseline is None:
                raise ContractError("mismatch term needs baseline similarities")
            terms['mismatch'] = ad.scale(
                _mismatch_from_sims(sims, baseline, mismatch_variant), weights.lambda_m
            )
    return terms


def composite_loss(
    params,
    retain_batch: Optional[PairBatch],
    forget_batch: Optional[PairBatch],
    baseline: Optional[BaselineSims],
    weights: LossWeights,
    ablation: AblationSwitches = AblationSwitches(),
    mismatch_variant: str = SIGNED,
) -> Tensor:
    terms = list(composite_terms(
        params, retain_batch, forget_batch, baseline, weights, ablation, mismatch_variant
    ).values())
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total


def value_and_grad(
    loss_fn: Callable[..., Tensor],
    checkpoint: Checkpoint,
    *args,
    keys: Optional[Iterable[str]] = None,
    **kwargs,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Loss value and gradients with respect to ``keys``.

    ``keys`` defaults to every editable (attention and MLP) parameter.
    One graph, one backward pass.
    """
    keys = list(editable_parameter_keys(checkpoint.config) if keys is None else keys)
    with Graph() as graph:
        params = TrackedParams(checkpoint, keys)
        loss = loss_fn(params, *args, **kwargs)
    grads = ad.backward(graph, loss)
    for key in keys:
        if key not in grads:
            grads[key] = np.zeros_like(checkpoint.tensors[key])
    return loss.item(), grads
