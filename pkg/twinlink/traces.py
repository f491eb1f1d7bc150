"""
Run output files: trace and arrival CSVs (read back by "analyze"),
the same-time error CSV and report.json.

Floats are written with %.17g so a read gives back the same values.
"""

import csv
import json
import logging
from typing import Any, Dict, Iterable, List, Sequence, Tuple

# PyPI
import numpy as np

from twinlink.metrics import ErrorReport, ErrorSeries, PoseTrace
from twinlink.planner import Arrival

logger = logging.getLogger(__name__)

TRACE_FIELDS = ['t', 'robot_id', 'source', 'x', 'y', 'z']
ARRIVAL_FIELDS = ['id', 'robot_id', 'arrival_t', 'x', 'y', 'z']
ERROR_FIELDS = ['t', 'robot_id', 'error']


class TraceFormatError(ValueError):
    def __init__(self, path: str, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = path
        self.line = line


def _g(x: float) -> str:
    return '%.17g' % x


def _check_header(path: str, reader: 'csv.DictReader[str]', fields: Sequence[str]) -> None:
    if reader.fieldnames != list(fields):
        raise TraceFormatError(path, 1, f"expected columns {','.join(fields)}, got {reader.fieldnames}")


def write_traces(path: str, traces: Iterable[PoseTrace]) -> int:
    rows = 0
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(TRACE_FIELDS)
        for trace in traces:
            for t, (x, y, z) in zip(trace.t, trace.position):
                writer.writerow([_g(t), trace.robot_id, trace.source, _g(x), _g(y), _g(z)])
                rows += 1
    logger.info(f"wrote {rows} trace samples to {path}")
    return rows


def read_traces(path: str) -> Dict[Tuple[int, str], PoseTrace]:
    """
    returns traces keyed by (robot_id, source), rows in file order
    """
    samples: Dict[Tuple[int, str], Tuple[List[float], List[Tuple[float, float, float]]]] = {}
    with open(path, newline='') as f:
        reader = csv.DictReader(f)
        _check_header(path, reader, TRACE_FIELDS)
        for row in reader:
            try:
                key = (int(row['robot_id']), row['source'])
                t = float(row['t'])
                p = (float(row['x']), float(row['y']), float(row['z']))
            except (TypeError, ValueError) as e:
                raise TraceFormatError(path, reader.line_num, str(e)) from e
            ts, ps = samples.setdefault(key, ([], []))
            ts.append(t)
            ps.append(p)
    out = {}
    for (rid, source), (ts, ps) in samples.items():
        try:
            out[(rid, source)] = PoseTrace(rid, source, np.array(ts), np.array(ps).reshape(-1, 3))
        except ValueError as e:
            raise TraceFormatError(path, 0, str(e)) from e
    return out


def write_arrivals(path: str, arrivals: Iterable[Arrival]) -> None:
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(ARRIVAL_FIELDS)
        for a in arrivals:
            writer.writerow([a.id, a.robot_id, _g(a.arrival_t)] + [_g(v) for v in a.position])


def read_arrivals(path: str) -> List[Arrival]:
    out = []
    with open(path, newline='') as f:
        reader = csv.DictReader(f)
        _check_header(path, reader, ARRIVAL_FIELDS)
        for row in reader:
            try:
                out.append(Arrival(int(row['id']), int(row['robot_id']), float(row['arrival_t']),
                                   (float(row['x']), float(row['y']), float(row['z']))))
            except (TypeError, ValueError) as e:
                raise TraceFormatError(path, reader.line_num, str(e)) from e
    return out


def write_errors(path: str, series: Dict[int, ErrorSeries]) -> None:
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(ERROR_FIELDS)
        for rid in sorted(series):
            for t, e in zip(*series[rid]):
                writer.writerow([_g(t), rid, _g(e)])


def report_json(report: ErrorReport) -> str:
    return json.dumps(report.to_json(), sort_keys=True, indent=2, allow_nan=False) + '\n'


def write_report(path: str, report: ErrorReport) -> None:
    with open(path, 'w') as f:
        f.write(report_json(report))


def read_report(path: str) -> Any:
    with open(path) as f:
        return json.load(f)
