"""
RazorLab - Run configuration

Priority (highest to lowest):
  1. command-line flags (--seed, --out, --set key=value)
  2. environment variables RAZORLAB_<KEY>, dots written as '__'
     (RAZORLAB_RAZOR__RHO=0.3), plus RAZORLAB_SEED / RAZORLAB_OUTPUT_DIR
  3. the config file (flat 'key = value' text, or YAML for .yaml/.yml)
  4. defaults
"""

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple

import yaml

from razorlab.data_synth import SplitSpec
from razorlab.engine import RazorConfig, TargetSpec
from razorlab.errors import ConfigError, RazorError
from razorlab.log import get_logger
from razorlab.losses import AblationSwitches, LossWeights
from razorlab.model import ModelConfig
from razorlab.pretrain import PretrainConfig

logger = get_logger('config')

ENV_PREFIX = 'RAZORLAB_'


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    razor: RazorConfig = field(default_factory=RazorConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    seed: int = 0
    output_dir: Path = Path('out')

    def with_overrides(self, **changes) -> 'RunConfig':
        """Same config with top-level and dotted overrides applied"""
        flat = to_flat(self)
        flat.update({k.replace('__', '.'): v for k, v in changes.items()})
        return build(flat)


# =============================================================================
# Value parsers
# =============================================================================

def parse_bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ('true', '1', 'yes', 'on'):
        return True
    if value in ('false', '0', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_int_list(text: str) -> Tuple[int, ...]:
    items = [item.strip() for item in str(text).strip('[]').split(',') if item.strip()]
    return tuple(int(item) for item in items)


def parse_optional_float(text: str) -> Optional[float]:
    if str(text).strip().lower() in ('', 'none', 'null'):
        return None
    return float(text)


# flat key -> (section, field, parser)
SCHEMA: Dict[str, Tuple[str, str, Callable[[str], object]]] = {}


def _register(section: str, cls, prefix: Optional[str] = None, overrides: Mapping[str, Callable] = None):
    overrides = overrides or {}
    for f in dataclasses.fields(cls):
        parser = overrides.get(f.name)
        if parser is None:
            parser = {int: int, float: float, bool: parse_bool, str: str}.get(f.type)
        if parser is None:
            continue
        SCHEMA[f"{prefix or section}.{f.name}"] = (section, f.name, parser)


_register('model', ModelConfig)
_register('split', SplitSpec, overrides={'forget_classes': parse_int_list})
del SCHEMA['split.seed']
_register('weights', LossWeights, prefix='razor')
_register('razor', RazorConfig)
_register('ablation', AblationSwitches, prefix='razor')
_register('target', TargetSpec, overrides={'m4_min': parse_optional_float})
_register('pretrain', PretrainConfig, overrides={'step_size': parse_optional_float})
SCHEMA['seed'] = ('run', 'seed', int)
SCHEMA['output_dir'] = ('run', 'output_dir', Path)


# =============================================================================
# Sources
# =============================================================================

def parse_flat_text(text: str, source: str = '<text>') -> Dict[str, str]:
    """'key = value' lines; '#' starts a comment"""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        values[key.strip()] = value.strip()
    return values


def _flatten_yaml(data, prefix: str = '') -> Dict[str, str]:
    out = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten_yaml(value, name + '.'))
        elif isinstance(value, list):
            out[name] = ','.join(str(v) for v in value)
        elif value is None:
            out[name] = 'none'
        else:
            out[name] = str(value)
    return out


def read_config_file(path: Path) -> Dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    if path.suffix.lower() in ('.yaml', '.yml'):
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return _flatten_yaml(data)
    return parse_flat_text(text, str(path))


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    """Config keys found in RAZORLAB_* variables; other RAZORLAB_* names are ignored"""
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace('__', '.')
        if key in SCHEMA:
            out[key] = value
    return out


def parse_overrides(items: Iterable[str]) -> Dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition('=')
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


# =============================================================================
# Assembly
# =============================================================================

def build(values: Mapping[str, object]) -> RunConfig:
    """RunConfig from flat key -> value (strings are parsed)"""
    sections: Dict[str, Dict[str, object]] = {}
    for key, raw in values.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        section, name, parser = SCHEMA[key]
        try:
            value = parser(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
        sections.setdefault(section, {})[name] = value

    run = sections.get('run', {})
    seed = run.get('seed', 0)
    try:
        model = ModelConfig(**sections.get('model', {}))
        split = SplitSpec(seed=seed, **sections.get('split', {})).validate(model)
        razor = RazorConfig(
            weights=LossWeights(**sections.get('weights', {})),
            ablation=AblationSwitches(**sections.get('ablation', {})),
            target=TargetSpec(**sections.get('target', {})),
            **sections.get('razor', {}),
        )
        pretrain = PretrainConfig(**sections.get('pretrain', {}))
    except RazorError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(model, split, razor, pretrain, seed, Path(run.get('output_dir', 'out')))


def to_flat(config: RunConfig) -> Dict[str, object]:
    objects = {
        'model': config.model,
        'split': config.split,
        'weights': config.razor.weights,
        'razor': config.razor,
        'ablation': config.razor.ablation,
        'target': config.razor.target,
        'pretrain': config.pretrain,
        'run': config,
    }
    return {key: getattr(objects[section], name) for key, (section, name, _) in SCHEMA.items()}


def dump_flat(config: RunConfig) -> str:
    """Resolved config as flat text that ``build(parse_flat_text(...))`` reads back"""
    lines = []
    for key, value in to_flat(config).items():
        if isinstance(value, tuple):
            value = ','.join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, float):
            value = repr(value)
        elif value is None:
            value = 'none'
        lines.append(f"{key} = {value}")
    return '\n'.join(lines) + '\n'


def load_run_config(
    config_path: Optional[Path] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
    output_dir: Optional[Path] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    values: Dict[str, object] = {}
    if config_path is not None:
        values.update(read_config_file(config_path))
    env = env_overrides(environ)
    if env:
        logger.debug("environment overrides: %s", ', '.join(sorted(env)))
    values.update(env)
    values.update(parse_overrides(overrides))
    if seed is not None:
        values['seed'] = seed
    if output_dir is not None:
        values['output_dir'] = output_dir
    return build(values)
