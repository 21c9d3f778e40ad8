"""
Unit tests for configuration loading: lib/razorlab/config.py and lib/config.sh.
Shell tests are run via subprocess calls to Bash scripts.
"""

import os
import subprocess
from pathlib import Path

import pytest

from razorlab.config import (
    RunConfig,
    build,
    dump_flat,
    env_overrides,
    load_run_config,
    parse_bool,
    parse_flat_text,
    parse_int_list,
    parse_optional_float,
    read_config_file,
)
from razorlab.errors import ConfigError, SpecError

from tests.fixtures.model_factory import TINY_MODEL, TINY_SPLIT, write_tiny_config


class TestValueParsers:
    """Tests for the string parsers used by the schema."""

    @pytest.mark.parametrize('text,expected', [
        ('true', True), ('Yes', True), ('1', True), ('on', True),
        ('false', False), ('NO', False), ('0', False), ('off', False),
    ])
    def test_bool(self, text, expected):
        assert parse_bool(text) is expected

    def test_bool_rejects_garbage(self):
        with pytest.raises(ValueError):
            parse_bool('maybe')

    def test_int_list(self):
        """Comma lists, optionally bracketed."""
        assert parse_int_list('0, 3') == (0, 3)
        assert parse_int_list('[1,2]') == (1, 2)
        assert parse_int_list('4') == (4,)

    def test_optional_float(self):
        assert parse_optional_float('none') is None
        assert parse_optional_float('') is None
        assert parse_optional_float('0.7') == 0.7


class TestFlatText:
    """Tests for the flat 'key = value' format."""

    def test_comments_and_blank_lines(self):
        values = parse_flat_text('# header\n\nrazor.rho = 0.3  # inline\nseed=4\n')
        assert values == {'razor.rho': '0.3', 'seed': '4'}

    def test_malformed_line_reports_location(self):
        """Errors carry source and line number."""
        with pytest.raises(ConfigError, match='run.conf:2'):
            parse_flat_text('seed = 1\njust words\n', 'run.conf')

    def test_missing_key(self):
        with pytest.raises(ConfigError):
            parse_flat_text('= 3\n')


class TestBuild:
    """Tests for assembling a RunConfig."""

    def test_defaults(self):
        """No values gives the documented defaults."""
        cfg = build({})
        assert cfg == RunConfig()
        assert cfg.razor.weights.rho == 0.5
        assert cfg.razor.target.m1_max == 0.55
        assert cfg.split.forget_classes == (0,)

    def test_sections(self):
        """Dotted keys land in their sections."""
        cfg = build({
            'razor.rho': '0.3',
            'razor.use_mismatch': 'false',
            'razor.t_max': '3',
            'target.m4_min': '0.4',
            'split.forget_classes': '1,2',
            'pretrain.optimizer': 'sgd',
            'seed': '9',
        })
        assert cfg.razor.weights.rho == 0.3
        assert cfg.razor.ablation.use_mismatch is False
        assert cfg.razor.t_max == 3
        assert cfg.razor.target.m4_min == 0.4
        assert cfg.split.forget_classes == (1, 2)
        assert cfg.pretrain.optimizer == 'sgd'
        assert cfg.seed == 9
        assert cfg.split.seed == 9

    def test_pretrain_step_size_follows_optimizer(self):
        """An unset step size takes the optimizer's default."""
        assert build({}).pretrain.step_size == 3e-3
        assert build({'pretrain.optimizer': 'sgd', 'pretrain.step_size': 'none'}).pretrain.step_size == 1e-2
        assert build({'pretrain.step_size': '0.02'}).pretrain.step_size == 0.02
        assert build({'pretrain.warmup_fraction': '0'}).pretrain.warmup_steps == 0

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match='razor.rhoo'):
            build({'razor.rhoo': '0.3'})

    def test_split_seed_not_settable(self):
        """The split seed always follows the run seed."""
        with pytest.raises(ConfigError):
            build({'split.seed': '3'})

    def test_unparseable_value(self):
        with pytest.raises(ConfigError, match='razor.t_max'):
            build({'razor.t_max': 'many'})

    def test_invalid_value(self):
        """Validation errors from the sections surface as ConfigError."""
        with pytest.raises(ConfigError):
            build({'razor.rho': '0'})
        with pytest.raises(SpecError):
            build({'split.forget_classes': '12'})

    def test_dump_round_trip(self):
        """dump_flat output reads back to the same config."""
        cfg = build({'razor.alpha': '0.25', 'target.m4_min': '0.5', 'split.forget_classes': '0,4',
                     'pretrain.require_convergence': 'false', 'output_dir': 'runs/x'})
        assert build(parse_flat_text(dump_flat(cfg))) == cfg

    def test_with_overrides(self):
        """Overrides accept '__' for dots."""
        cfg = RunConfig().with_overrides(razor__rho=0.2, seed=3)
        assert cfg.razor.weights.rho == 0.2
        assert cfg.seed == 3


class TestSources:
    """Tests for config files, environment and flag layering."""

    def test_yaml_file(self, tmp_path: Path):
        """Nested YAML flattens to dotted keys; lists and null are understood."""
        path = tmp_path / 'run.yaml'
        path.write_text('razor:\n  rho: 0.3\ntarget:\n  m4_min: null\nsplit:\n  forget_classes: [0, 2]\n')
        values = read_config_file(path)
        assert values == {'razor.rho': '0.3', 'target.m4_min': 'none', 'split.forget_classes': '0,2'}
        cfg = build(values)
        assert cfg.razor.target.m4_min is None
        assert cfg.split.forget_classes == (0, 2)

    def test_invalid_yaml(self, tmp_path: Path):
        path = tmp_path / 'bad.yml'
        path.write_text('razor: [unclosed\n')
        with pytest.raises(ConfigError, match='invalid YAML'):
            read_config_file(path)

    def test_yaml_must_be_mapping(self, tmp_path: Path):
        path = tmp_path / 'list.yaml'
        path.write_text('- 1\n- 2\n')
        with pytest.raises(ConfigError):
            read_config_file(path)

    def test_missing_file(self, tmp_path: Path):
        with pytest.raises(ConfigError, match='cannot read'):
            read_config_file(tmp_path / 'missing.conf')

    def test_env_mapping(self):
        """RAZORLAB_<SECTION>__<FIELD> maps to section.field; other names are ignored."""
        env = {
            'RAZORLAB_RAZOR__RHO': '0.3',
            'RAZORLAB_SEED': '5',
            'RAZORLAB_OUTPUT_DIR': '/tmp/x',
            'RAZORLAB_LOG_LEVEL': 'DEBUG',
            'HOME': '/root',
        }
        assert env_overrides(env) == {'razor.rho': '0.3', 'seed': '5', 'output_dir': '/tmp/x'}

    def test_priority(self, tmp_path: Path):
        """Flags beat environment beat file beat defaults."""
        path = write_tiny_config(tmp_path / 'run.conf', 'razor.rho = 0.2\nrazor.alpha = 0.3\nseed = 1\n')
        env = {'RAZORLAB_RAZOR__RHO': '0.4', 'RAZORLAB_SEED': '2'}
        cfg = load_run_config(path, overrides=['razor.rho=0.6'], environ=env)
        assert cfg.razor.weights.rho == 0.6
        assert cfg.razor.alpha == 0.3
        assert cfg.seed == 2
        assert cfg.razor.lambda_init == 1.0
        assert load_run_config(path, seed=7, environ=env).seed == 7

    def test_tiny_config(self, tiny_config_file: Path):
        """The tiny test config describes the tiny model and split."""
        cfg = load_run_config(tiny_config_file, environ={})
        assert cfg.model == TINY_MODEL
        assert cfg.split.n_classes == TINY_SPLIT.n_classes
        assert cfg.pretrain.require_convergence is False

    def test_output_dir_flag(self, tmp_path: Path):
        cfg = load_run_config(output_dir=tmp_path / 'o', environ={'RAZORLAB_OUTPUT_DIR': '/elsewhere'})
        assert cfg.output_dir == tmp_path / 'o'

    def test_bad_override(self):
        with pytest.raises(ConfigError, match='key=value'):
            load_run_config(overrides=['razor.rho'], environ={})


# =============================================================================
# lib/config.sh
# =============================================================================

def run_shell(project_root: Path, tmp_path: Path, body: str, env=None) -> subprocess.CompletedProcess:
    """Source config.sh in a fresh bash and run body."""
    script = tmp_path / 'test_config.sh'
    script.write_text(f'''#!/usr/bin/env bash
set -euo pipefail
source "{project_root}/lib/config.sh"
{body}
''')
    script.chmod(0o755)
    merged = {k: v for k, v in os.environ.items() if not k.startswith('RAZORLAB_')}
    merged.update(env or {})
    return subprocess.run([str(script)], capture_output=True, text=True, env=merged)


class TestShellConfig:
    """Tests for .env loading in lib/config.sh."""

    def test_defaults_without_env_file(self, project_root: Path, tmp_path: Path):
        result = run_shell(project_root, tmp_path,
                           'echo "SEED=$RAZORLAB_SEED"\necho "LEVEL=$RAZORLAB_LOG_LEVEL"',
                           {'RAZORLAB_ENV_FILE': str(tmp_path / 'missing.env')})
        assert result.returncode == 0, result.stderr
        assert 'SEED=0' in result.stdout
        assert 'LEVEL=INFO' in result.stdout

    def test_env_file_values(self, project_root: Path, tmp_path: Path):
        """Quoted and unquoted values are loaded; comments are skipped."""
        env_file = tmp_path / 'test.env'
        env_file.write_text('# comment\nRAZORLAB_SEED=42\nRAZORLAB_RAZOR__RHO="0.3"\n\n')
        result = run_shell(project_root, tmp_path,
                           'echo "SEED=$RAZORLAB_SEED"\necho "RHO=$RAZORLAB_RAZOR__RHO"',
                           {'RAZORLAB_ENV_FILE': str(env_file)})
        assert result.returncode == 0, result.stderr
        assert 'SEED=42' in result.stdout
        assert 'RHO=0.3' in result.stdout

    def test_caller_environment_wins(self, project_root: Path, tmp_path: Path):
        """Variables set by the caller are not overridden by .env."""
        env_file = tmp_path / 'test.env'
        env_file.write_text('RAZORLAB_SEED=42\n')
        result = run_shell(project_root, tmp_path, 'echo "SEED=$RAZORLAB_SEED"',
                           {'RAZORLAB_ENV_FILE': str(env_file), 'RAZORLAB_SEED': '7'})
        assert 'SEED=7' in result.stdout

    def test_env_file_reaches_python(self, project_root: Path, tmp_path: Path):
        """Variables exported from .env are read back by env_overrides."""
        env_file = tmp_path / 'test.env'
        env_file.write_text('RAZORLAB_TARGET__M4_MIN_RELATIVE=0.8\nRAZORLAB_RAZOR__RHO=0.3\n')
        result = run_shell(project_root, tmp_path, 'env | grep "^RAZORLAB_" || true',
                           {'RAZORLAB_ENV_FILE': str(env_file)})
        exported = dict(line.split('=', 1) for line in result.stdout.splitlines())
        overrides = env_overrides(exported)
        assert overrides['target.m4_min_relative'] == '0.8'
        assert overrides['razor.rho'] == '0.3'
