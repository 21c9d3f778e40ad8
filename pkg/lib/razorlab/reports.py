"""
RazorLab - Report files

CSV grids, JSON / JSON-lines records and a plain-text grid for the console.
"""

import csv
import json
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

from razorlab.metrics import MetricsReport

GRID_COLUMNS = ('scenario', 'precision', 'M1', 'M2', 'M3', 'M4', 'M5',
                'M1_pct', 'M2_pct', 'M3_pct', 'M4_pct', 'M5_pct')


def write_csv(path: Path, rows: Sequence[Mapping[str, object]], columns: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction='ignore', lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in row.items()})
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline='', encoding='utf-8') as fh:
        return list(csv.DictReader(fh))


def _cell(value: object) -> object:
    return repr(value) if isinstance(value, float) else value


def write_json(path: Path, report: MetricsReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + '\n', encoding='utf-8')
    return path


def read_json(path: Path) -> MetricsReport:
    return MetricsReport.from_json(Path(path).read_text(encoding='utf-8'))


def write_jsonl(path: Path, records: Iterable[Mapping[str, object]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + '\n')
    return path


def read_jsonl(path: Path) -> List[Dict[str, object]]:
    with open(path, encoding='utf-8') as fh:
        return [json.loads(line) for line in fh if line.strip()]


def format_grid(rows: Sequence[Mapping[str, object]], columns: Sequence[str]) -> str:
    """Fixed-width text table"""
    def text(value):
        return f"{value:.4f}" if isinstance(value, float) else str(value)

    cells = [[text(row.get(c, '')) for c in columns] for row in rows]
    widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]
    lines = ['  '.join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append('  '.join('-' * w for w in widths))
    lines += ['  '.join(v.ljust(w) for v, w in zip(r, widths)) for r in cells]
    return '\n'.join(lines)
