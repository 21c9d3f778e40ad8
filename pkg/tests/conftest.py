"""
Shared pytest fixtures for RazorLab tests.
"""

import os
import sys
import subprocess
from pathlib import Path
from typing import Dict

import pytest

# Add lib/ to path for imports
PROJECT_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_ROOT / 'lib'))

from razorlab.checkpoint_io import save_checkpoint  # noqa: E402
from razorlab.log import setup_logging  # noqa: E402

from tests.fixtures.model_factory import (  # noqa: E402
    HAS_PILLOW,
    TINY_MODEL,
    tiny_checkpoint,
    tiny_splits,
    trained_tiny_checkpoint,
    write_tiny_config,
)


# =============================================================================
# Skip markers for optional dependencies
# =============================================================================

def has_venv() -> bool:
    """Check if the project venv created by setup.sh exists."""
    return (PROJECT_ROOT / '.venv' / 'bin' / 'python').exists()


# Conditional skip decorators
requires_pillow = pytest.mark.skipif(
    not HAS_PILLOW,
    reason="Pillow not installed"
)

requires_venv = pytest.mark.skipif(
    not has_venv(),
    reason="project venv not found (run setup.sh)"
)


# =============================================================================
# Path fixtures
# =============================================================================

@pytest.fixture
def project_root() -> Path:
    """Return the project root directory."""
    return PROJECT_ROOT


@pytest.fixture
def bin_dir(project_root: Path) -> Path:
    """Return the bin/ directory containing scripts."""
    return project_root / 'bin'


@pytest.fixture
def lib_dir(project_root: Path) -> Path:
    """Return the lib/ directory containing modules."""
    return project_root / 'lib'


# =============================================================================
# Environment fixtures
# =============================================================================

@pytest.fixture
def test_env(tmp_path: Path, project_root: Path) -> Dict[str, str]:
    """
    Complete test environment with isolated directories.

    Sets up:
    - RAZORLAB_OUTPUT_DIR: temp run directory
    - RAZORLAB_ENV_FILE: points at a missing file so the project .env is ignored
    - PYTHONPATH: lib/ so `python -m razorlab` works without the venv
    - NO_COLOR: plain log prefixes
    """
    env = {k: v for k, v in os.environ.items() if not k.startswith('RAZORLAB_')}
    env['RAZORLAB_OUTPUT_DIR'] = str(tmp_path / 'runs' / 'default')
    env['RAZORLAB_ENV_FILE'] = str(tmp_path / 'no.env')
    env['PYTHONPATH'] = str(project_root / 'lib')
    env['NO_COLOR'] = '1'
    return env


@pytest.fixture
def tiny_config_file(tmp_path: Path) -> Path:
    """Flat config file for the tiny model."""
    return write_tiny_config(tmp_path / 'tiny.conf')


# =============================================================================
# Model fixtures
# =============================================================================

@pytest.fixture
def tiny_model():
    """Tiny model config."""
    return TINY_MODEL


@pytest.fixture
def tiny_ckpt():
    """Freshly initialized tiny checkpoint."""
    return tiny_checkpoint(seed=0)


@pytest.fixture
def splits():
    """Tiny splits (4 classes, forget class 0)."""
    return tiny_splits(seed=0)


@pytest.fixture(scope='session')
def trained_ckpt():
    """Tiny checkpoint after a short pretraining run, shared across the session."""
    return trained_tiny_checkpoint(seed=0, steps=60)


@pytest.fixture
def trained_ckpt_file(tmp_path: Path, trained_ckpt) -> Path:
    """The shared trained checkpoint written to a temp .rzck file."""
    return save_checkpoint(trained_ckpt, tmp_path / 'trained.rzck')


# =============================================================================
# Script runner fixtures
# =============================================================================

@pytest.fixture
def run_cli(project_root: Path, test_env: Dict[str, str], tmp_path: Path):
    """
    Factory fixture for running `python -m razorlab` in a subprocess.

    Usage:
        result = run_cli('pretrain', '--config', cfg, '--out', out)
    """
    def _run(*args, env: Dict[str, str] = None,
             check: bool = False, timeout: int = 120) -> subprocess.CompletedProcess:
        merged_env = test_env.copy()
        if env:
            merged_env.update(env)

        cmd = [sys.executable, '-m', 'razorlab'] + [str(a) for a in args]

        return subprocess.run(
            cmd,
            env=merged_env,
            cwd=str(tmp_path),
            capture_output=True,
            text=True,
            check=check,
            timeout=timeout
        )

    return _run


@pytest.fixture
def run_script(bin_dir: Path, test_env: Dict[str, str]):
    """
    Factory fixture for running bin/ scripts.

    Usage:
        result = run_script('razorlab', '--help')
    """
    def _run(script_name: str, *args, env: Dict[str, str] = None,
             check: bool = False, timeout: int = 120) -> subprocess.CompletedProcess:
        merged_env = test_env.copy()
        if env:
            merged_env.update(env)

        cmd = [str(bin_dir / script_name)] + [str(a) for a in args]

        return subprocess.run(
            cmd,
            env=merged_env,
            capture_output=True,
            text=True,
            check=check,
            timeout=timeout
        )

    return _run


# =============================================================================
# Cleanup fixtures
# =============================================================================

@pytest.fixture(autouse=True)
def quiet_logging():
    """Keep in-process runs at WARNING so test output stays readable."""
    setup_logging(level='WARNING', color=False)
    yield
