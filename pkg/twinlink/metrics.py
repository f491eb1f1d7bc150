"""
Error statistics between the planning twin and the render twin.

Traces are aligned on the shared simulated clock (seconds) by linear
interpolation; no cross-correlation.  All distances are meters.
"""

from dataclasses import dataclass, field
import logging
import math
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

# PyPI
import numpy as np
import numpy.typing as npt

from twinlink.planner import NS, Arrival, TraceRecorder

logger = logging.getLogger(__name__)

Vec = npt.NDArray[np.float64]

WINDOW = 1.0                    # s after arrival
MIN_COVERAGE = 0.9              # of the window, to count in aggregates

OUTSIDE_TRACE = 'outside_trace'
LOW_COVERAGE = 'coverage'


@dataclass(frozen=True)
class PoseTrace:
    robot_id: int
    source: str                 # "planner" or "twin"
    t: Vec                      # (n,) s, strictly increasing
    position: Vec               # (n, 3) m

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=float).reshape(-1)
        pos = np.asarray(self.position, dtype=float).reshape(-1, 3)
        if len(t) != len(pos):
            raise ValueError(f"{len(t)} times for {len(pos)} positions")
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"robot {self.robot_id} {self.source} trace times not strictly increasing")
        object.__setattr__(self, 't', t)
        object.__setattr__(self, 'position', pos)

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def from_recorder(cls, rec: TraceRecorder) -> 'PoseTrace':
        return cls(rec.robot_id, rec.source,
                   np.asarray(rec.t_ns, dtype=np.int64) / NS,
                   np.array(rec.positions, dtype=float).reshape(-1, 3))

    def span(self) -> Tuple[float, float]:
        if not len(self):
            return (math.inf, -math.inf)
        return float(self.t[0]), float(self.t[-1])

    def at(self, t: npt.ArrayLike) -> Vec:
        """
        linearly interpolated positions; t must lie within the span
        """
        tt = np.asarray(t, dtype=float)
        return np.stack([np.interp(tt, self.t, self.position[:, i]) for i in range(3)], axis=-1)


class ErrorSeries(NamedTuple):
    t: Vec
    error: Vec

    def __len__(self) -> int:
        return len(self.t)


def same_time_error(a: PoseTrace, b: PoseTrace) -> ErrorSeries:
    """
    at each sample time of a within the overlap, distance to b
    interpolated at that time
    """
    a0, a1 = a.span()
    b0, b1 = b.span()
    lo, hi = max(a0, b0), min(a1, b1)
    if lo > hi:
        logger.warning(f"robot {a.robot_id}: {a.source} and {b.source} traces do not overlap")
        return ErrorSeries(np.zeros(0), np.zeros(0))
    keep = (a.t >= lo) & (a.t <= hi)
    t = a.t[keep]
    err = np.linalg.norm(a.position[keep] - b.at(t), axis=1)
    return ErrorSeries(t, err)


class SetpointError(NamedTuple):
    id: int
    robot_id: int
    arrival_t: float
    arrival_error: Optional[float]      # None: arrival outside the twin trace


def setpoint_errors(twin: PoseTrace, arrivals: Sequence[Arrival]) -> List[SetpointError]:
    """
    distance from the twin (interpolated at each arrival time) to the
    setpoint position
    """
    t0, t1 = twin.span()
    out = []
    for arr in arrivals:
        if not t0 <= arr.arrival_t <= t1:
            logger.warning(f"robot {arr.robot_id} setpoint {arr.id}: arrival {arr.arrival_t:.6f}s"
                           " outside the twin trace")
            out.append(SetpointError(arr.id, arr.robot_id, arr.arrival_t, None))
            continue
        p = twin.at(arr.arrival_t)
        err = float(np.linalg.norm(p - np.asarray(arr.position, dtype=float)))
        out.append(SetpointError(arr.id, arr.robot_id, arr.arrival_t, err))
    return out


class WindowStats(NamedTuple):
    mean: float
    max: float
    coverage: float             # fraction of the window the series covers


def window_stats(series: ErrorSeries, arrival_t: float, window: float = WINDOW) -> WindowStats:
    """
    time-weighted (trapezoid) mean and max of the error over
    [arrival_t, arrival_t + window], clipped to what the series covers;
    interior ends are interpolated.
    """
    if window <= 0:
        raise ValueError(f"window {window} must be positive")
    if not len(series):
        return WindowStats(math.nan, math.nan, 0.0)
    lo = max(arrival_t, float(series.t[0]))
    hi = min(arrival_t + window, float(series.t[-1]))
    if hi < lo:
        return WindowStats(math.nan, math.nan, 0.0)
    inside = (series.t > lo) & (series.t < hi)
    t = np.concatenate([[lo], series.t[inside], [hi]])
    e = np.concatenate([[np.interp(lo, series.t, series.error)],
                        series.error[inside],
                        [np.interp(hi, series.t, series.error)]])
    coverage = (hi - lo) / window
    if hi == lo:
        return WindowStats(float(e[0]), float(e[0]), coverage)
    mean = float(np.trapezoid(e, t) / (hi - lo))
    return WindowStats(mean, float(np.max(e)), coverage)


################ report

class SetpointReport(NamedTuple):
    id: int
    robot_id: int
    arrival_t: float
    arrival_error: float
    window_mean: float
    window_max: float
    coverage: float


class Excluded(NamedTuple):
    id: int
    robot_id: int
    reason: str                 # OUTSIDE_TRACE or LOW_COVERAGE
    coverage: float


def _mean_max(values: Sequence[float]) -> Tuple[Optional[float], Optional[float]]:
    if not len(values):
        return None, None
    return float(np.mean(values)), float(np.max(values))


@dataclass
class ErrorReport:
    setpoints: List[SetpointReport] = field(default_factory=list)
    excluded: List[Excluded] = field(default_factory=list)
    same_time: Dict[int, Tuple[Optional[float], Optional[float]]] = field(default_factory=dict)
    window: float = WINDOW
    min_coverage: float = MIN_COVERAGE
    samples: int = 0            # same-time samples, all robots

    # global aggregates (None when nothing was included)
    same_time_mean: Optional[float] = None
    same_time_max: Optional[float] = None
    setpoint_mean: Optional[float] = None
    setpoint_max: Optional[float] = None
    window_mean: Optional[float] = None
    window_max: Optional[float] = None

    def to_json(self) -> Dict[str, Any]:
        return {
            'global': {
                'same_time_mean': self.same_time_mean,
                'same_time_max': self.same_time_max,
                'setpoint_mean': self.setpoint_mean,
                'setpoint_max': self.setpoint_max,
                'window_mean': self.window_mean,
                'window_max': self.window_max,
                'setpoints': len(self.setpoints),
                'excluded': len(self.excluded),
                'same_time_samples': self.samples,
            },
            'window': self.window,
            'min_coverage': self.min_coverage,
            'robots': {str(rid): {'same_time_mean': m, 'same_time_max': x}
                       for rid, (m, x) in sorted(self.same_time.items())},
            'setpoints': [sp._asdict() for sp in self.setpoints],
            'excluded': [ex._asdict() for ex in self.excluded],
        }


def build_report(planner: Dict[int, PoseTrace], twin: Dict[int, PoseTrace],
                 arrivals: Sequence[Arrival], window: float = WINDOW,
                 min_coverage: float = MIN_COVERAGE
                 ) -> Tuple[ErrorReport, Dict[int, ErrorSeries]]:
    """
    per robot: same-time error of the twin at the planner's sample
    times, arrival errors, and windowed errors after each arrival.
    Returns the report and the per-robot same-time series.
    """
    report = ErrorReport(window=window, min_coverage=min_coverage)
    series: Dict[int, ErrorSeries] = {}
    pooled: List[Vec] = []
    for rid in sorted(planner):
        if rid not in twin:
            logger.warning(f"robot {rid}: no twin trace")
            series[rid] = ErrorSeries(np.zeros(0), np.zeros(0))
        else:
            series[rid] = same_time_error(planner[rid], twin[rid])
        report.same_time[rid] = _mean_max(series[rid].error)
        pooled.append(series[rid].error)

    for arr in sorted(arrivals, key=lambda a: (a.robot_id, a.arrival_t, a.id)):
        trace = twin.get(arr.robot_id)
        if trace is None:
            report.excluded.append(Excluded(arr.id, arr.robot_id, OUTSIDE_TRACE, 0.0))
            continue
        (se,) = setpoint_errors(trace, [arr])
        if se.arrival_error is None:
            report.excluded.append(Excluded(arr.id, arr.robot_id, OUTSIDE_TRACE, 0.0))
            continue
        ws = window_stats(series.get(arr.robot_id, ErrorSeries(np.zeros(0), np.zeros(0))),
                          arr.arrival_t, window)
        if ws.coverage < min_coverage or math.isnan(ws.mean):
            logger.warning(f"robot {arr.robot_id} setpoint {arr.id}: window coverage {ws.coverage:.3f}")
            report.excluded.append(Excluded(arr.id, arr.robot_id, LOW_COVERAGE, ws.coverage))
            continue
        report.setpoints.append(SetpointReport(arr.id, arr.robot_id, arr.arrival_t,
                                               se.arrival_error, ws.mean, ws.max, ws.coverage))

    all_err = np.concatenate(pooled) if pooled else np.zeros(0)
    report.samples = len(all_err)
    report.same_time_mean, report.same_time_max = _mean_max(all_err)
    report.setpoint_mean, report.setpoint_max = _mean_max([s.arrival_error for s in report.setpoints])
    report.window_mean, _ = _mean_max([s.window_mean for s in report.setpoints])
    _, report.window_max = _mean_max([s.window_max for s in report.setpoints])
    if report.excluded:
        logger.info(f"{len(report.excluded)} setpoints excluded from aggregates")
    return report, series
