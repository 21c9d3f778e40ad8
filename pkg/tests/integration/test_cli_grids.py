"""
Integration tests for `razorlab ablate` and `razorlab sweep-lr`.
"""

from pathlib import Path

import pytest

from razorlab.checkpoint_io import load_checkpoint
from razorlab.cli import ABLATIONS, _parse_lambdas, _slug
from razorlab.errors import ConfigError
from razorlab.reports import read_csv
from razorlab.seeding import run_seed


class TestHelpers:
    """Label and argument helpers."""

    @pytest.mark.parametrize('label,slug', [
        ('w/o retain', 'wo_retain'),
        ('no selection', 'no_selection'),
        ('0.001', '0p001'),
        ('1e-05', '1e-05'),
    ])
    def test_slug(self, label, slug):
        assert _slug(label) == slug

    def test_ablation_labels(self):
        assert [label for label, _ in ABLATIONS] == [
            'w/o retain', 'w/o mismatch', 'w/o forget', 'no selection', 'no iteration', 'full',
        ]

    def test_lambdas(self):
        assert _parse_lambdas('1, 0.1') == [1.0, 0.1]
        assert _parse_lambdas(None)[0] == 1.0
        with pytest.raises(ConfigError):
            _parse_lambdas('1,x')
        with pytest.raises(ConfigError):
            _parse_lambdas('0')


class TestAblateCommand:
    """Tests for the ablate subcommand."""

    @pytest.fixture
    def ablation(self, run_cli, tiny_config_file: Path, trained_ckpt_file: Path, tmp_path: Path):
        out = tmp_path / 'abl'
        result = run_cli('ablate', '--config', tiny_config_file, '--checkpoint', trained_ckpt_file, '--out', out,
                         '--set', 'razor.t_max=1', '--set', 'razor.delta=0.1', '--workers', '2', timeout=300)
        assert result.returncode == 0, result.stderr
        return out, result

    def test_grid(self, ablation):
        """A pre-edit row, then the six configurations in fixed order."""
        out, _ = ablation
        rows = read_csv(out / 'ablation.csv')
        assert [row['scenario'] for row in rows] == ['pre-edit'] + [label for label, _ in ABLATIONS]
        assert float(rows[0]['M3']) == 0.0
        for row in rows[1:]:
            assert row['target_met'] in ('0', '1')
            assert int(row['components']) >= 1

    def test_no_selection_uses_every_component(self, ablation):
        out, _ = ablation
        rows = {row['scenario']: row for row in read_csv(out / 'ablation.csv')}
        assert int(rows['no selection']['components']) == 6
        assert int(rows['no iteration']['components']) <= int(rows['full']['components'])

    def test_per_run_outputs(self, ablation):
        """Each configuration has its own directory and run_seed tag."""
        out, _ = ablation
        for label, _ in ABLATIONS:
            run_dir = out / 'ablate' / _slug(label)
            assert (run_dir / 'trace.jsonl').exists()
            edited = load_checkpoint(run_dir / 'edited.rzck')
            assert edited.meta.tags['run_seed'] == str(run_seed(0, label))

    def test_console_table(self, ablation):
        _, result = ablation
        assert 'pre-edit' in result.stdout
        assert 'w/o mismatch' in result.stdout

    def test_bad_workers(self, run_cli, tiny_config_file: Path, trained_ckpt_file: Path, tmp_path: Path):
        result = run_cli('ablate', '--config', tiny_config_file, '--checkpoint', trained_ckpt_file,
                         '--out', tmp_path / 'o', '--workers', '0')
        assert result.returncode == 1
        assert '--workers' in result.stderr


class TestSweepCommand:
    """Tests for the sweep-lr subcommand."""

    def test_sweep(self, run_cli, tiny_config_file: Path, trained_ckpt_file: Path, tmp_path: Path):
        """Rows in descending lambda order, one directory per value."""
        out = tmp_path / 'sw'
        result = run_cli('sweep-lr', '--config', tiny_config_file, '--checkpoint', trained_ckpt_file, '--out', out,
                         '--lambdas', '0.01,1', '--set', 'razor.t_max=1', timeout=300)
        assert result.returncode == 0, result.stderr
        rows = read_csv(out / 'sweep_lr.csv')
        assert [float(row['lambda_init']) for row in rows] == [1.0, 0.01]
        assert rows[1]['scenario'] == 'lambda=0.01'
        assert (out / 'sweep' / '0p01' / 'edited.rzck').exists()
        assert (out / 'sweep' / '1' / 'metrics_after.json').exists()

    def test_bad_lambdas(self, run_cli, tiny_config_file: Path, trained_ckpt_file: Path, tmp_path: Path):
        result = run_cli('sweep-lr', '--config', tiny_config_file, '--checkpoint', trained_ckpt_file,
                         '--out', tmp_path / 'o', '--lambdas', 'fast')
        assert result.returncode == 1
        assert '--lambdas' in result.stderr
