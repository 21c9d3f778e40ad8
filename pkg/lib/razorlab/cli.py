"""
RazorLab - Command line interface

    razorlab pretrain   [--preview] [--dump-splits]
    razorlab unlearn    --checkpoint PATH
    razorlab quant-eval --checkpoint PATH [--reference PATH]
    razorlab ablate     --checkpoint PATH [--workers N]
    razorlab sweep-lr   --checkpoint PATH [--lambdas LIST] [--workers N]

Common options: --config PATH, --out DIR, --seed N, --set key=value,
--verbose, --quiet, --no-progress.

Exit codes: 0 success (a missed target is a flagged success),
1 input/config error, 2 numeric/integrity error.
"""

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from razorlab import __version__
from razorlab.checkpoint_io import load_checkpoint, save_checkpoint
from razorlab.config import RunConfig, dump_flat, load_run_config
from razorlab.data_synth import Splits, dump_splits, generate, render_prototype_sheet
from razorlab.engine import FULL, NO_ITERATION, NO_SELECTION, RazorResult, run
from razorlab.errors import ConfigError, RazorError
from razorlab.log import get_logger, log_step, log_success, setup_logging
from razorlab.losses import AblationSwitches
from razorlab.metrics import FP, MetricsReport, evaluate_all
from razorlab.model import Checkpoint
from razorlab.pretrain import check_convergence, pretrain
from razorlab.quantize import QuantSpec, quant_error, quantize
from razorlab.reports import GRID_COLUMNS, format_grid, write_csv, write_json, write_jsonl
from razorlab.saliency import TABLE_COLUMNS
from razorlab.seeding import run_seed

logger = get_logger('cli')

DEFAULT_LAMBDAS = (1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5)

# checkpoint tag holding the path an edit started from
SOURCE_TAG = 'source'

ABLATIONS: Tuple[Tuple[str, Dict[str, object]], ...] = (
    ('w/o retain', {'ablation': AblationSwitches(use_retain=False)}),
    ('w/o mismatch', {'ablation': AblationSwitches(use_mismatch=False)}),
    ('w/o forget', {'ablation': AblationSwitches(use_forget=False)}),
    ('no selection', {'strategy': NO_SELECTION}),
    ('no iteration', {'strategy': NO_ITERATION}),
    ('full', {'strategy': FULL}),
)


# =============================================================================
# Helpers
# =============================================================================

def _slug(label: str) -> str:
    return label.replace('/', '').replace(' ', '_').replace('.', 'p')


def _load_config(args) -> RunConfig:
    cfg = load_run_config(
        config_path=args.config,
        overrides=args.set or [],
        seed=args.seed,
        output_dir=args.out,
    )
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    level = logging.DEBUG if args.verbose else (logging.WARNING if args.quiet else None)
    setup_logging(level=level, log_file=out / 'run.log')
    (out / 'config.resolved.txt').write_text(dump_flat(cfg), encoding='utf-8')
    logger.debug("output directory %s", out)
    return cfg


def _checkpoint_and_splits(cfg: RunConfig, path: Path) -> Tuple[Checkpoint, Splits]:
    checkpoint = load_checkpoint(path)
    if checkpoint.config != cfg.model:
        logger.warning("checkpoint model config differs from the run config; using the checkpoint's")
    splits = generate(cfg.split, checkpoint.config)
    return checkpoint, splits


def _progress(args) -> bool:
    return not args.no_progress and sys.stderr.isatty()


def _save_result(result: RazorResult, out: Path, source: Path) -> None:
    """Write the edit artefacts; the edited checkpoint records its pre-edit source"""
    tags = result.edited.meta.tags
    if SOURCE_TAG not in tags:
        result.edited = result.edited.with_meta(tags={**tags, SOURCE_TAG: str(Path(source).resolve())})
    save_checkpoint(result.edited, out / 'edited.rzck')
    result.trace.to_jsonl(out / 'trace.jsonl')
    write_json(out / 'metrics_before.json', result.before)
    write_json(out / 'metrics_after.json', result.after)
    write_csv(out / 'saliency.csv', result.table.to_rows(result.initial_selection), TABLE_COLUMNS)


def _fan_out(jobs: Sequence[Tuple[str, Callable[[], object]]], workers: int, progress: bool) -> Dict[str, object]:
    """Run labelled jobs, on a thread pool when workers > 1; results by label"""
    results: Dict[str, object] = {}
    if workers <= 1:
        for label, job in tqdm(jobs, disable=not progress, leave=False):
            results[label] = job()
        return results
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(job): label for label, job in jobs}
        for future in tqdm(as_completed(futures), total=len(futures), disable=not progress, leave=False):
            results[futures[future]] = future.result()
    return results


# =============================================================================
# Commands
# =============================================================================

def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = cfg.output_dir
    splits = generate(cfg.split, cfg.model)
    if args.dump_splits:
        dump_splits(splits, out / 'splits.jsonl')
    if args.preview:
        render_prototype_sheet(splits.identities, out / 'prototypes.png')

    result = pretrain(cfg.model, splits, cfg.pretrain, cfg.seed,
                      temperature=cfg.razor.weights.temperature, progress=_progress(args))
    save_checkpoint(result.checkpoint, out / 'checkpoint.rzck')
    write_json(out / 'pretrain_metrics.json', result.report)
    write_csv(out / 'pretrain_history.csv',
              [{'step': s, 'loss': loss} for s, loss in result.history], ('step', 'loss'))
    if cfg.pretrain.require_convergence:
        check_convergence(result, cfg.pretrain)
    log_success(logger, "checkpoint written to %s", out / 'checkpoint.rzck')
    return 0


def cmd_unlearn(args) -> int:
    cfg = _load_config(args)
    checkpoint, splits = _checkpoint_and_splits(cfg, args.checkpoint)
    result = run(checkpoint, splits, cfg.razor)
    _save_result(result, cfg.output_dir, args.checkpoint)

    rows = [result.before.to_row('before'), result.after.to_row('after')]
    print(format_grid(rows, GRID_COLUMNS[:7]))
    if not result.trace.target_met:
        logger.warning("target-not-met: see %s", cfg.output_dir / 'trace.jsonl')
    return 0


def _reference_path(explicit: Optional[Path], checkpoint: Checkpoint) -> Optional[Path]:
    """--reference, else the recorded pre-edit source when it still exists"""
    if explicit:
        return explicit
    source = checkpoint.meta.tags.get(SOURCE_TAG)
    if source and Path(source).is_file():
        logger.info("reference: pre-edit source %s", source)
        return Path(source)
    if source:
        logger.warning("pre-edit source %s not found; M3 and M5 compare the checkpoint with itself", source)
    elif 'edit' in checkpoint.meta.tags:
        logger.warning("no --reference and no recorded source; M3 and M5 compare the checkpoint with itself")
    return None


def cmd_quant_eval(args) -> int:
    cfg = _load_config(args)
    checkpoint, splits = _checkpoint_and_splits(cfg, args.checkpoint)
    reference_path = _reference_path(args.reference, checkpoint)
    reference = load_checkpoint(reference_path) if reference_path else checkpoint
    scenario = checkpoint.meta.tags.get('edit', 'checkpoint')

    log_step(logger, "Evaluating %s at fp / q8 / q4", scenario)
    reports: List[MetricsReport] = [evaluate_all(reference, checkpoint, splits, FP, scenario)]
    errors = []
    for bits in (8, 4):
        spec = QuantSpec(bits)
        reports.append(evaluate_all(reference, quantize(checkpoint, spec), splits, spec.precision_tag, scenario))
        errors.extend(quant_error(checkpoint, spec).to_rows())

    fp_m1 = reports[0].m1
    rows = []
    for report in reports:
        row = report.to_row(scenario)
        row['M1_drift'] = abs(report.m1 - fp_m1)
        rows.append(row)
    out = cfg.output_dir
    write_csv(out / 'quant_grid.csv', rows, GRID_COLUMNS + ('M1_drift',))
    write_jsonl(out / 'quant_reports.jsonl', [r.to_dict() for r in reports])
    write_csv(out / 'quant_error.csv', errors, ('bits', 'tensor', 'scale', 'max_abs', 'rms'))
    print(format_grid(rows, GRID_COLUMNS[:7] + ('M1_drift',)))
    return 0


def _grid_job(checkpoint: Checkpoint, splits: Splits, cfg: RunConfig, label: str, razor, out: Path,
              source: Path):
    def job() -> RazorResult:
        result = run(checkpoint, splits, razor)
        result.edited = result.edited.with_meta(
            tags={**result.edited.meta.tags, 'run_seed': str(run_seed(cfg.seed, label))}
        )
        _save_result(result, out, source)
        return result
    return job


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    checkpoint, splits = _checkpoint_and_splits(cfg, args.checkpoint)
    jobs = []
    for label, changes in ABLATIONS:
        razor = dataclasses.replace(cfg.razor, **changes)
        jobs.append((label, _grid_job(checkpoint, splits, cfg, label, razor,
                                      cfg.output_dir / 'ablate' / _slug(label), args.checkpoint)))

    log_step(logger, "Running %d ablation configurations", len(jobs))
    results = _fan_out(jobs, args.workers, _progress(args))
    rows = []
    for label, _ in ABLATIONS:
        result = results[label]
        row = result.after.to_row(label)
        row['target_met'] = int(result.trace.target_met)
        row['components'] = len(result.selection)
        rows.append(row)
    pre = results['full'].before.to_row('pre-edit')
    write_csv(cfg.output_dir / 'ablation.csv', [pre] + rows, GRID_COLUMNS + ('target_met', 'components'))
    print(format_grid([pre] + rows, ('scenario', 'M1', 'M2', 'M3', 'M4', 'M5', 'target_met', 'components')))
    return 0


def _parse_lambdas(text: Optional[str]) -> List[float]:
    if not text:
        return list(DEFAULT_LAMBDAS)
    try:
        values = [float(v) for v in text.split(',') if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--lambdas expects comma-separated numbers, got {text!r}") from exc
    if not values or any(v <= 0 for v in values):
        raise ConfigError("--lambdas values must be positive")
    return values


def cmd_sweep_lr(args) -> int:
    cfg = _load_config(args)
    checkpoint, splits = _checkpoint_and_splits(cfg, args.checkpoint)
    lambdas = sorted(set(_parse_lambdas(args.lambdas)), reverse=True)
    ratio = cfg.razor.delta / cfg.razor.lambda_init

    jobs = []
    for lam in lambdas:
        label = f"{lam:g}"
        razor = dataclasses.replace(cfg.razor, lambda_init=lam, delta=lam * ratio)
        jobs.append((label, _grid_job(checkpoint, splits, cfg, f"lambda={label}", razor,
                                      cfg.output_dir / 'sweep' / _slug(label), args.checkpoint)))

    log_step(logger, "Sweeping %d initial step sizes", len(jobs))
    results = _fan_out(jobs, args.workers, _progress(args))
    rows = []
    for lam in lambdas:
        result = results[f"{lam:g}"]
        row = {'lambda_init': lam}
        row.update(result.after.to_row(f"lambda={lam:g}"))
        row['target_met'] = int(result.trace.target_met)
        rows.append(row)
    columns = ('lambda_init',) + GRID_COLUMNS + ('target_met',)
    write_csv(cfg.output_dir / 'sweep_lr.csv', rows, columns)
    print(format_grid(rows, ('lambda_init', 'M1', 'M2', 'M3', 'M4', 'M5', 'target_met')))
    return 0


# =============================================================================
# Parser
# =============================================================================

class UsageParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with the config error code (1)"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = UsageParser(add_help=False)
    common.add_argument('--config', type=Path, help='Config file (key = value text or YAML)')
    common.add_argument('--out', type=Path, help='Output directory')
    common.add_argument('--seed', type=int, help='Run seed')
    common.add_argument('--set', action='append', metavar='KEY=VALUE', help='Override a config key')
    common.add_argument('--verbose', '-v', action='store_true', help='Debug output')
    common.add_argument('--quiet', '-q', action='store_true', help='Warnings and errors only')
    common.add_argument('--no-progress', action='store_true', help='Disable progress bars')

    parser = UsageParser(
        prog='razorlab',
        description='Ratio-aware component editing for unlearning in a toy contrastive model',
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('pretrain', parents=[common], help='Train the toy model')
    p.add_argument('--preview', action='store_true', help='Write prototypes.png')
    p.add_argument('--dump-splits', action='store_true', help='Write splits.jsonl')
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser('unlearn', parents=[common], help='Edit a checkpoint to forget the forget classes')
    p.add_argument('--checkpoint', type=Path, required=True)
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser('quant-eval', parents=[common], help='Evaluate at fp, 8-bit and 4-bit')
    p.add_argument('--checkpoint', type=Path, required=True)
    p.add_argument('--reference', type=Path, help='Pre-edit checkpoint for M3/M5')
    p.set_defaults(func=cmd_quant_eval)

    for name, func, text in (('ablate', cmd_ablate, 'Run the six ablation configurations'),
                             ('sweep-lr', cmd_sweep_lr, 'Sweep the initial step size')):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument('--checkpoint', type=Path, required=True)
        p.add_argument('--workers', type=int, default=1, help='Parallel runs (default 1)')
        if name == 'sweep-lr':
            p.add_argument('--lambdas', help='Comma-separated initial step sizes')
        p.set_defaults(func=func)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, 'workers', 1) < 1:
            raise ConfigError("--workers must be >= 1")
        return args.func(args)
    except RazorError as exc:
        logger.error("%s", exc)
        logger.debug("details", exc_info=True)
        return exc.exit_code
    except KeyboardInterrupt:
        logger.error("interrupted")
        return 130
