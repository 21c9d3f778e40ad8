"""
RazorLab - Contrastive pretraining of the toy model

Full-batch training of every parameter on the symmetric InfoNCE loss over
all training pairs (forget and retain), so the forget classes are known
to the model before unlearning starts.

The step size warms up linearly over the first warmup_fraction of the
steps, then follows a cosine down to min_lr_fraction of its peak.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from razorlab.data_synth import PairBatch, Splits
from razorlab.errors import ConfigError, NumericError
from razorlab.log import get_logger, log_step, log_success
from razorlab.losses import retain_loss, value_and_grad
from razorlab.metrics import Evaluator, MetricsReport
from razorlab.model import Checkpoint, ModelConfig, init_checkpoint, parameter_shapes

logger = get_logger('pretrain')

# peak step size when pretrain.step_size is not set
DEFAULT_STEP_SIZES = {'adam': 3e-3, 'sgd': 1e-2}
OPTIMIZERS = tuple(DEFAULT_STEP_SIZES)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 300
    step_size: Optional[float] = None
    optimizer: str = 'adam'
    warmup_fraction: float = 0.1
    min_lr_fraction: float = 0.1
    log_every: int = 50
    require_convergence: bool = True
    min_m1: float = 0.9
    min_m4: float = 0.9

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"pretrain.steps must be >= 0, got {self.steps}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"pretrain.optimizer must be one of {OPTIMIZERS}")
        if self.step_size is None:
            object.__setattr__(self, 'step_size', DEFAULT_STEP_SIZES[self.optimizer])
        if not (math.isfinite(self.step_size) and self.step_size > 0):
            raise ConfigError(f"pretrain.step_size must be positive, got {self.step_size}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"pretrain.warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if not 0.0 <= self.min_lr_fraction <= 1.0:
            raise ConfigError(f"pretrain.min_lr_fraction must be in [0, 1], got {self.min_lr_fraction}")
        if self.log_every < 1:
            raise ConfigError("pretrain.log_every must be >= 1")

    @property
    def warmup_steps(self) -> int:
        if self.warmup_fraction == 0.0 or self.steps == 0:
            return 0
        return max(1, math.ceil(self.warmup_fraction * self.steps))

    def learning_rate(self, step: int) -> float:
        """Step size for 1-based step"""
        warmup = self.warmup_steps
        if step <= warmup:
            return self.step_size * step / warmup
        span = self.steps - warmup
        progress = min(1.0, (step - warmup) / span) if span > 0 else 1.0
        floor = self.min_lr_fraction
        return self.step_size * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


class Adam:
    """Adam with bias correction over a name -> array map"""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             lr: Optional[float] = None) -> Dict[str, np.ndarray]:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = {}
        for key, value in params.items():
            g = grads[key]
            m = self.m.get(key, np.zeros_like(g)) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(key, np.zeros_like(g)) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[key], self.v[key] = m, v
            out[key] = value - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             lr: Optional[float] = None) -> Dict[str, np.ndarray]:
        lr = self.lr if lr is None else lr
        return {key: value - lr * grads[key] for key, value in params.items()}


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    history: List[Tuple[int, float]] = field(default_factory=list)
    report: Optional[MetricsReport] = None


def pretrain(
    config: ModelConfig,
    splits: Splits,
    pcfg: PretrainConfig,
    seed: int,
    temperature: float = 0.07,
    progress: bool = True,
) -> PretrainResult:
    log_step(logger, "Pretraining %d steps (%s, peak step size %g, %d warmup)",
             pcfg.steps, pcfg.optimizer, pcfg.step_size, pcfg.warmup_steps)
    batch = PairBatch.from_pairs(splits.retain + splits.forget)
    checkpoint = init_checkpoint(config, seed)
    keys = list(parameter_shapes(config))
    optimizer = Adam(pcfg.step_size) if pcfg.optimizer == 'adam' else SGD(pcfg.step_size)

    history: List[Tuple[int, float]] = []
    for step in tqdm(range(1, pcfg.steps + 1), desc='pretrain', disable=not progress, leave=False):
        loss, grads = value_and_grad(retain_loss, checkpoint, batch, temperature, keys=keys)
        if not math.isfinite(loss):
            raise NumericError(f"pretraining loss became non-finite at step {step}")
        history.append((step, loss))
        updated = optimizer.step(dict(checkpoint.tensors), grads, pcfg.learning_rate(step))
        checkpoint = checkpoint.replace_tensors(updated)
        if step % pcfg.log_every == 0 or step == pcfg.steps:
            logger.info("step %d/%d loss %.4f lr %.2e", step, pcfg.steps, loss, pcfg.learning_rate(step))

    checkpoint = checkpoint.with_meta(step=pcfg.steps)
    evaluator = Evaluator(checkpoint, splits.forget, splits.val_retain or splits.retain, splits.prompt_bank)
    report = evaluator.evaluate(checkpoint, tag='pretrained')
    logger.info("pretrained: M1=%.3f M4=%.3f util=%.3f", report.m1, report.m4, report.util_after)
    return PretrainResult(checkpoint, history, report)


def check_convergence(result: PretrainResult, pcfg: PretrainConfig) -> None:
    """Raise NumericError when the pretraining contract is not met"""
    report = result.report
    if report.m1 < pcfg.min_m1 or report.m4 < pcfg.min_m4:
        raise NumericError(
            f"pretraining did not converge: M1={report.m1:.3f} (need {pcfg.min_m1}), "
            f"M4={report.m4:.3f} (need {pcfg.min_m4})"
        )
    log_success(logger, "pretraining contract met (M1=%.3f, M4=%.3f)", report.m1, report.m4)
