"""
Unit tests for lib/razorlab/reports.py.
"""

from pathlib import Path

from razorlab.metrics import MetricsReport
from razorlab.reports import (
    GRID_COLUMNS,
    format_grid,
    read_csv,
    read_json,
    read_jsonl,
    write_csv,
    write_json,
    write_jsonl,
)


def report(**changes) -> MetricsReport:
    values = dict(m1=0.25, m2=0.1, m3=0.002, m4=0.875, m5=0.99, checkpoint_tag='after')
    values.update(changes)
    return MetricsReport(**values)


class TestCsv:
    """CSV grids."""

    def test_grid_columns(self, tmp_path: Path):
        """Metric rows write the fixed grid header."""
        rows = [report().to_row('full'), report(m1=0.5, precision='q8').to_row('full')]
        path = write_csv(tmp_path / 'grid.csv', rows, GRID_COLUMNS)
        back = read_csv(path)
        assert list(back[0]) == list(GRID_COLUMNS)
        assert back[1]['precision'] == 'q8'
        assert float(back[0]['M1']) == 0.25
        assert float(back[0]['M1_pct']) == 25.0

    def test_floats_exact(self, tmp_path: Path):
        """Floats are written with repr and read back exactly."""
        value = 0.1 + 0.2
        path = write_csv(tmp_path / 'x.csv', [{'v': value}])
        assert float(read_csv(path)[0]['v']) == value

    def test_columns_from_first_row(self, tmp_path: Path):
        path = write_csv(tmp_path / 'sub' / 'x.csv', [{'a': 1, 'b': 'two'}])
        assert read_csv(path) == [{'a': '1', 'b': 'two'}]

    def test_empty(self, tmp_path: Path):
        path = write_csv(tmp_path / 'empty.csv', [])
        assert read_csv(path) == []


class TestJson:
    """JSON and JSON-lines records."""

    def test_metrics_json(self, tmp_path: Path):
        original = report()
        assert read_json(write_json(tmp_path / 'm.json', original)) == original

    def test_jsonl(self, tmp_path: Path):
        records = [{'event': 'a', 'n': 1}, {'event': 'b', 'n': 2}]
        path = write_jsonl(tmp_path / 'r.jsonl', records)
        assert read_jsonl(path) == records
        assert path.read_text().count('\n') == 2


class TestFormatGrid:
    """Console table."""

    def test_layout(self):
        rows = [{'scenario': 'full', 'M1': 0.25}, {'scenario': 'w/o retain', 'M1': 0.5}]
        lines = format_grid(rows, ['scenario', 'M1']).splitlines()
        assert lines[0].split() == ['scenario', 'M1']
        assert set(lines[1].replace(' ', '')) == {'-'}
        assert lines[2].split() == ['full', '0.2500']
        assert lines[3].startswith('w/o retain')

    def test_missing_cells_blank(self):
        text = format_grid([{'scenario': 'x'}], ['scenario', 'M5'])
        assert text.splitlines()[2].strip() == 'x'
