"""Closed-loop tuning of the commanded diversity with a clamped PID law."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

AGGREGATORS = {"mean": np.mean, "median": np.median}


@dataclass(frozen=True)
class PidState:
    kp: float = 1.0
    kd: float = 0.0
    ki: float = 0.0
    tolerance: float = 0.01
    snd_des: float = 0.0
    error: float = 0.0
    prev_error: float = 0.0
    accumulated: float = 0.0
    accumulator_limit: float = math.inf   # anti-windup clamp on |accumulated|

    def __post_init__(self):
        if self.snd_des < 0:
            raise ValueError("snd_des must be nonnegative")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.accumulator_limit < 0:
            raise ValueError("accumulator_limit must be nonnegative")


def pid_step(state: PidState, measured: float, target: float) -> PidState:
    if not (math.isfinite(measured) and math.isfinite(target)):
        raise ValueError("metric and target must be finite")
    e = target - measured
    lim = state.accumulator_limit
    accu = min(max(state.accumulated + e, -lim), lim)
    cmd = state.kp * e + state.kd * (e - state.error) + state.ki * accu
    return replace(state, snd_des=max(cmd, 0.0), prev_error=state.error, error=e, accumulated=accu)


@dataclass
class TraceRow:
    iteration: int
    snd_des: float
    metric: float
    error: float


@dataclass
class LoopResult:
    trace: list = field(default_factory=list)
    converged: bool = False
    state: PidState | None = None


class ClosedLoopError(RuntimeError):
    """Raised when training fails mid-loop; ``trace`` holds the completed iterations."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


def _aggregate(value, aggregator: str) -> float:
    if isinstance(value, (Sequence, np.ndarray)) and not isinstance(value, str):
        return float(AGGREGATORS[aggregator](np.asarray(value, dtype=np.float64)))
    return float(value)


def run_closed_loop(train_fn: Callable, metric_fn: Callable, state: PidState, target: float,
                    max_iters: int = 20, aggregator: str = "mean") -> LoopResult:
    """Train at the current command, measure, stop within tolerance, else apply the PID law.

    ``metric_fn`` may return one value or one value per training run; lists
    are reduced with ``aggregator``.  Exactly one trace row per training call.
    """
    if aggregator not in AGGREGATORS:
        raise ValueError(f"unknown aggregator {aggregator!r}")
    result = LoopResult(state=state)
    for k in range(max_iters):
        cmd = state.snd_des
        try:
            trained = train_fn(cmd)
        except Exception as exc:
            raise ClosedLoopError(f"training failed at iteration {k}: {exc}", result.trace) from exc
        metric = _aggregate(metric_fn(trained), aggregator)
        err = target - metric
        result.trace.append(TraceRow(k, cmd, metric, err))
        if abs(err) < state.tolerance:
            result.converged = True
            state = replace(state, prev_error=state.error, error=err)
            break
        state = pid_step(state, metric, target)
    result.state = state
    return result


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "snd_des", "metric", "error"])
        for r in trace:
            w.writerow([r.iteration, repr(float(r.snd_des)), repr(float(r.metric)), repr(float(r.error))])
