"""
RazorLab - Ratio-aware component editing

Stage 0  frozen-model forget similarities (mismatch baseline)
Stage 1  one-shot gradients, saliency table, initial selection K
Stage 2  per component in K (descending phi): blended gradient,
         bisected step size, update; gradients recomputed after each update
Stage 3  while the target is unmet and t <= t_max: recompute saliency,
         add the best unselected component, update it

A component update is theta_l <- theta_l - lambda * blend with
blend = -lambda_f*rho*g_f + g_r + lambda_m*g_m and lambda chosen by
bisection on [0, lambda_init] against validation metrics.
"""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from razorlab.data_synth import PairBatch, Splits
from razorlab.errors import ConfigError, ContractError, NumericError
from razorlab.log import get_logger, log_step, log_success
from razorlab.losses import SIGNED, AblationSwitches, BaselineSims, LossWeights, MISMATCH_VARIANTS
from razorlab.metrics import Evaluator, MetricsReport, pair_similarity_values
from razorlab.model import Checkpoint, ComponentId, apply_delta, component_refs
from razorlab.saliency import (
    RATIO,
    VARIANTS,
    ComponentGradients,
    SaliencyTable,
    adaptive_threshold,
    build_table,
    component_gradients,
    select,
)

logger = get_logger('engine')

FULL = 'full'
NO_SELECTION = 'no_selection'
NO_ITERATION = 'no_iteration'
STRATEGIES = (FULL, NO_SELECTION, NO_ITERATION)

PERCENTILE = 'percentile'
ABSOLUTE = 'absolute'

GradMap = Dict[str, np.ndarray]


# =============================================================================
# Targets
# =============================================================================

@dataclass(frozen=True)
class ResolvedTarget:
    m1_max: float
    m3_max: float
    m4_min: float
    m5_min: float
    m2_ref: Optional[float] = None

    def satisfied(self, report: MetricsReport) -> bool:
        return (
            report.m1 <= self.m1_max
            and report.m3 <= self.m3_max
            and report.m4 >= self.m4_min
            and report.m5 >= self.m5_min
        )

    def stable(self, report: MetricsReport) -> bool:
        """Retention constraints a proposal must keep"""
        return report.m4 >= self.m4_min and report.m5 >= self.m5_min

    def score(self, report: MetricsReport) -> float:
        """
        Higher is better: forgetting margin plus retention margin, each
        clipped at 0, plus the drop in mean forget-pair cosine below m2_ref.

        The cosine term moves with every step; the M1 margin only once
        M1 is under m1_max.
        """
        forget = max(0.0, (self.m1_max - report.m1) / self.m1_max)
        retain = max(0.0, (report.m4 - self.m4_min) / (1.0 - self.m4_min)) if self.m4_min < 1.0 else 0.0
        drop = self.m2_ref - report.m2 if self.m2_ref is not None else 0.0
        return forget + retain + drop


@dataclass(frozen=True)
class TargetSpec:
    m1_max: float = 0.55
    m3_max: float = 0.01
    m4_min_relative: float = 0.85
    m4_min: Optional[float] = None
    m5_min: float = 0.95

    def __post_init__(self):
        values = [self.m1_max, self.m3_max, self.m4_min_relative, self.m5_min]
        if self.m4_min is not None:
            values.append(self.m4_min)
        if not all(math.isfinite(v) for v in values):
            raise ConfigError("target thresholds must be finite")
        if not 0.0 < self.m1_max <= 1.0:
            raise ConfigError(f"target.m1_max must be in (0, 1], got {self.m1_max}")
        if self.m3_max < 0:
            raise ConfigError("target.m3_max must be >= 0")
        if not 0.0 < self.m4_min_relative <= 1.0:
            raise ConfigError("target.m4_min_relative must be in (0, 1]")
        if self.m4_min is not None and not 0.0 <= self.m4_min <= 1.0:
            raise ConfigError("target.m4_min must be in [0, 1]")
        if not 0.0 <= self.m5_min <= 1.0:
            raise ConfigError("target.m5_min must be in [0, 1]")

    def resolve(self, m4_pre: float, m2_pre: Optional[float] = None) -> ResolvedTarget:
        m4_min = self.m4_min if self.m4_min is not None else self.m4_min_relative * m4_pre
        return ResolvedTarget(self.m1_max, self.m3_max, m4_min, self.m5_min, m2_pre)


@dataclass(frozen=True)
class RazorConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    alpha: float = 0.5
    eps: float = 1e-8
    tau_policy: str = PERCENTILE
    tau_value: float = 90.0
    t_max: int = 6
    lambda_init: float = 1.0
    delta: float = 1e-3
    target: TargetSpec = field(default_factory=TargetSpec)
    saliency_variant: str = RATIO
    mismatch_variant: str = SIGNED
    ablation: AblationSwitches = field(default_factory=AblationSwitches)
    strategy: str = FULL

    def __post_init__(self):
        if self.t_max < 1:
            raise ConfigError(f"razor.t_max must be >= 1, got {self.t_max}")
        if not (self.lambda_init > 0 and self.delta > 0):
            raise ConfigError("razor.lambda_init and razor.delta must be positive")
        if not self.lambda_init > self.delta:
            raise ConfigError("razor.lambda_init must exceed razor.delta")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"razor.alpha must be in [0, 1], got {self.alpha}")
        if not self.eps > 0:
            raise ConfigError("razor.eps must be > 0")
        if self.tau_policy not in (PERCENTILE, ABSOLUTE):
            raise ConfigError(f"razor.tau_policy must be percentile or absolute, got {self.tau_policy!r}")
        if self.tau_policy == PERCENTILE and not 0.0 <= self.tau_value <= 100.0:
            raise ConfigError("razor.tau_value must be a percentile in [0, 100]")
        if self.saliency_variant not in VARIANTS:
            raise ConfigError(f"razor.saliency_variant must be one of {VARIANTS}")
        if self.mismatch_variant not in MISMATCH_VARIANTS:
            raise ConfigError(f"razor.mismatch_variant must be one of {MISMATCH_VARIANTS}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"razor.strategy must be one of {STRATEGIES}")
        if not self.ablation.any_enabled:
            raise ConfigError("at least one loss term must be enabled")

    def threshold(self, table: SaliencyTable) -> float:
        if self.tau_policy == PERCENTILE:
            return adaptive_threshold(table, self.tau_value)
        return self.tau_value


# =============================================================================
# Trace
# =============================================================================

@dataclass
class TraceRecord:
    stage: int
    event: str
    t: int = 0
    k: List[str] = field(default_factory=list)
    component: Optional[str] = None
    lam: float = 0.0
    metrics: Optional[Dict[str, float]] = None
    phi_max: Optional[float] = None
    phi_digest: Optional[str] = None
    evaluations: int = 0

    def to_dict(self) -> Dict[str, object]:
        return {
            'stage': self.stage,
            'event': self.event,
            't': self.t,
            'k': list(self.k),
            'component': self.component,
            'lambda': self.lam,
            'metrics': self.metrics,
            'phi_max': self.phi_max,
            'phi_digest': self.phi_digest,
            'evaluations': self.evaluations,
        }


@dataclass
class EditTrace:
    target: Optional[ResolvedTarget] = None
    records: List[TraceRecord] = field(default_factory=list)
    target_met: bool = False

    def add(self, record: TraceRecord) -> TraceRecord:
        self.records.append(record)
        logger.debug("trace: stage %d %s %s lambda=%g", record.stage, record.event,
                     record.component or '-', record.lam)
        return record

    def events(self, name: str) -> List[TraceRecord]:
        return [r for r in self.records if r.event == name]

    @property
    def stage3_growth(self) -> List[TraceRecord]:
        """One record per Stage-3 iteration that added a component"""
        return [r for r in self.records if r.stage == 3 and r.event in ('stage3-grow', 'no-step')]

    def to_jsonl(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as fh:
            for record in self.records:
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + '\n')
            fh.write(json.dumps({'event': 'summary', 'target_met': self.target_met}) + '\n')
        return path


def _metric_dict(report: Optional[MetricsReport]) -> Optional[Dict[str, float]]:
    if report is None:
        return None
    return {'m1': report.m1, 'm2': report.m2, 'm3': report.m3, 'm4': report.m4, 'm5': report.m5}


# =============================================================================
# Step size search
# =============================================================================

@dataclass(frozen=True)
class Assessment:
    stable: bool
    score: float
    report: Optional[MetricsReport] = None
    numeric_rejected: bool = False


@dataclass
class StepResult:
    lam: float
    score: float
    evaluations: int
    report: Optional[MetricsReport] = None
    rejected: int = 0


def bisect_step_size(assess: Callable[[float], Assessment], lambda_init: float, delta: float) -> StepResult:
    """
    Largest stable step with the best score on [0, lambda_init].

    Starts from lambda = 0 with score -inf and never assesses the no-op.
    A stable midpoint raises the lower bound and replaces the best when
    its score is at least as high, so ties go to the larger step; an
    unstable one lowers the upper bound. Stops once the interval is at
    most delta wide, after ceil(log2(lambda_init / delta)) assessments.
    lambda = 0 comes back only when no midpoint was stable.
    """
    if not lambda_init > delta > 0:
        raise ContractError(f"need lambda_init > delta > 0, got {lambda_init}, {delta}")
    best = StepResult(0.0, float('-inf'), 0)
    lo, hi = 0.0, lambda_init
    evaluations, rejected = 0, 0
    while hi - lo > delta:
        mid = (lo + hi) / 2.0
        result = assess(mid)
        evaluations += 1
        rejected += int(result.numeric_rejected)
        if result.stable:
            if result.score >= best.score:
                best = StepResult(mid, result.score, 0, result.report)
            lo = mid
        else:
            hi = mid
    best.evaluations = evaluations
    best.rejected = rejected
    return best


class ValidationEvaluator(Evaluator):
    """Metrics on the validation split against the frozen model, counting calls"""

    def __init__(self, frozen: Checkpoint, splits: Splits):
        forget = splits.val_forget or splits.forget
        probe = splits.val_retain or splits.retain
        super().__init__(frozen, forget, probe, splits.prompt_bank,
                         forget_split='val_forget', probe_split='val_retain')


def blended_gradient(
    g: ComponentGradients,
    g_m: Optional[GradMap],
    weights: LossWeights,
    ablation: AblationSwitches = AblationSwitches(),
) -> GradMap:
    """-lambda_f*rho*g_f + g_r + lambda_m*g_m, disabled terms omitted"""
    keys = list(g.order)
    if g_m is not None and set(g_m) != set(keys):
        raise ContractError(f"{g.id}: mismatch gradient keys differ from the component")
    forget_coef = -weights.lambda_f * weights.rho
    blend = {}
    for key in keys:
        value = np.zeros_like(g.g_f[key])
        if ablation.use_forget:
            value = value + forget_coef * g.g_f[key]
        if ablation.use_retain:
            value = value + g.g_r[key]
        if ablation.use_mismatch and g_m is not None:
            value = value + weights.lambda_m * g_m[key]
        blend[key] = value
    return blend


def _finite(checkpoint: Checkpoint, cid: ComponentId) -> bool:
    tensors = checkpoint.tensors
    return all(np.all(np.isfinite(tensors[ref.key][ref.index]))
               for ref in component_refs(checkpoint.config, cid).values())


def binary_search_step(
    params: Checkpoint,
    cid: ComponentId,
    blend: GradMap,
    evaluator: Evaluator,
    target: ResolvedTarget,
    lambda_init: float,
    delta: float,
) -> StepResult:
    """Bisected step for theta_l - lambda * blend; lambda 0 means no stable step"""
    if not any(np.any(v) for v in blend.values()):
        return StepResult(0.0, float('-inf'), 0)

    def assess(lam: float) -> Assessment:
        candidate = apply_delta(params, cid, {k: -lam * v for k, v in blend.items()})
        if not _finite(candidate, cid):
            return Assessment(False, float('-inf'), numeric_rejected=True)
        try:
            report = evaluator.evaluate(candidate)
        except NumericError as exc:
            logger.debug("%s: lambda=%g rejected: %s", cid, lam, exc)
            return Assessment(False, float('-inf'), numeric_rejected=True)
        return Assessment(target.stable(report), target.score(report), report)

    return bisect_step_size(assess, lambda_init, delta)


def stage0_baseline(frozen: Checkpoint, forget_batch) -> BaselineSims:
    return BaselineSims(pair_similarity_values(frozen, forget_batch))


# =============================================================================
# Run
# =============================================================================

@dataclass
class RazorResult:
    edited: Checkpoint
    trace: EditTrace
    before: MetricsReport
    after: MetricsReport
    table: SaliencyTable
    initial_selection: List[ComponentId]
    selection: List[ComponentId]


class RazorRun:
    """State of one editing run; ``execute`` walks the stages in order"""

    def __init__(self, frozen: Checkpoint, splits: Splits, cfg: RazorConfig):
        self.frozen = frozen
        self.splits = splits
        self.cfg = cfg
        self.forget_batch = PairBatch.from_pairs(splits.forget)
        self.retain_batch = PairBatch.from_pairs(splits.retain)
        self.validator = ValidationEvaluator(frozen, splits)
        self.baseline: Optional[BaselineSims] = None
        self.target: Optional[ResolvedTarget] = None
        self.trace = EditTrace()
        self.params = frozen
        self.selection: List[ComponentId] = []
        self._grads: Optional[Dict[ComponentId, ComponentGradients]] = None

    def _gradients(self) -> Dict[ComponentId, ComponentGradients]:
        if self._grads is None:
            grads = component_gradients(
                self.params, self.retain_batch, self.forget_batch, self.baseline,
                self.cfg.weights.temperature, self.cfg.mismatch_variant,
            )
            self._grads = {g.id: g for g in grads}
        return self._grads

    def _table(self) -> SaliencyTable:
        return build_table(self.params, list(self._gradients().values()),
                           self.cfg.alpha, self.cfg.eps, self.cfg.saliency_variant)

    def _update(self, cid: ComponentId, stage: int, t: int, table: SaliencyTable) -> TraceRecord:
        g = self._gradients()[cid]
        blend = blended_gradient(g, g.g_m, self.cfg.weights, self.cfg.ablation)
        step = binary_search_step(self.params, cid, blend, self.validator, self.target,
                                  self.cfg.lambda_init, self.cfg.delta)
        if step.lam > 0.0:
            self.params = apply_delta(self.params, cid, {k: -step.lam * v for k, v in blend.items()})
            self._grads = None
            event = 'stage2-update' if stage == 2 else 'stage3-grow'
        else:
            event = 'no-step'
        record = TraceRecord(
            stage=stage, event=event, t=t, k=[c.label for c in self.selection],
            component=cid.label, lam=step.lam, metrics=_metric_dict(step.report),
            phi_max=table.entries[0].phi, phi_digest=table.digest(), evaluations=step.evaluations,
        )
        if step.rejected:
            self.trace.add(replace(record, event='numeric-rejected', lam=0.0, metrics=None,
                                   evaluations=step.rejected))
        return self.trace.add(record)

    def stage0(self) -> None:
        log_step(logger, "Stage 0: baseline similarities")
        self.baseline = stage0_baseline(self.frozen, self.forget_batch)
        pre = self.validator.evaluate(self.frozen)
        self.target = self.cfg.target.resolve(pre.m4, pre.m2)
        self.trace.target = self.target
        self.trace.add(TraceRecord(stage=0, event='baseline', metrics=_metric_dict(pre)))
        logger.info("pre-edit validation: M1=%.3f M4=%.3f (m4_min=%.3f)",
                    pre.m1, pre.m4, self.target.m4_min)

    def stage1(self) -> SaliencyTable:
        log_step(logger, "Stage 1: saliency")
        table = self._table()
        if self.cfg.strategy == NO_SELECTION:
            self.selection = table.ranked
        else:
            self.selection = select(table, self.cfg.threshold(table))
        logger.info("selected %d of %d components: %s", len(self.selection), len(table),
                    ', '.join(c.label for c in self.selection[:8]))
        return table

    def stage2(self, table: SaliencyTable) -> None:
        log_step(logger, "Stage 2: updating %d components", len(self.selection))
        for cid in list(self.selection):
            self._update(cid, 2, 0, table)

    def stage3(self) -> None:
        if self.cfg.strategy != FULL:
            self.trace.target_met = self.target.satisfied(self.validator.evaluate(self.params))
            return
        log_step(logger, "Stage 3: growing the selection (t_max=%d)", self.cfg.t_max)
        for t in range(1, self.cfg.t_max + 1):
            report = self.validator.evaluate(self.params)
            if self.target.satisfied(report):
                self.trace.target_met = True
                self.trace.add(TraceRecord(stage=3, event='target-met', t=t,
                                           k=[c.label for c in self.selection],
                                           metrics=_metric_dict(report)))
                return
            table = self._table()
            best = table.best_outside(self.selection)
            if best is None or best.phi <= 0.0:
                self.trace.add(TraceRecord(
                    stage=3, event='exhausted' if best is None else 'no-useful-component', t=t,
                    k=[c.label for c in self.selection], metrics=_metric_dict(report),
                    phi_max=table.entries[0].phi, phi_digest=table.digest(),
                ))
                return
            self.selection.append(best.id)
            self._update(best.id, 3, t, table)

        report = self.validator.evaluate(self.params)
        self.trace.target_met = self.target.satisfied(report)
        self.trace.add(TraceRecord(stage=3, event='target-met' if self.trace.target_met else 't-max',
                                   t=self.cfg.t_max, k=[c.label for c in self.selection],
                                   metrics=_metric_dict(report)))

    def execute(self) -> RazorResult:
        self.stage0()
        table = self.stage1()
        initial = list(self.selection)
        self.stage2(table)
        self.stage3()

        final = Evaluator(self.frozen, self.splits.forget, self.splits.val_retain or self.splits.retain,
                          self.splits.prompt_bank)
        before = final.evaluate(self.frozen, tag='before')
        after = final.evaluate(self.params, tag='after')
        edited = self.params.with_meta(tags={**self.frozen.meta.tags, 'edit': 'razor'})
        if self.trace.target_met:
            log_success(logger, "target met with %d components", len(self.selection))
        else:
            logger.warning("target not met after %d components", len(self.selection))
        return RazorResult(edited, self.trace, before, after, table, initial, list(self.selection))


def run(frozen: Checkpoint, splits: Splits, cfg: RazorConfig) -> RazorResult:
    return RazorRun(frozen, splits, cfg).execute()
