import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dico.pid import ClosedLoopError, PidState, pid_step, run_closed_loop, write_trace_csv


def test_proportional_clamps_at_zero():
    s = pid_step(PidState(kp=1.0), measured=0.8, target=0.5)      # e = -0.3
    assert s.snd_des == 0.0
    assert s.error == pytest.approx(-0.3)


def test_proportional_formula():
    s = pid_step(PidState(kp=1.0), measured=0.0, target=0.5)
    assert s.snd_des == pytest.approx(0.5)


def test_integral_accumulates():
    s = PidState(kp=0.0, ki=1.0)
    s = pid_step(s, 0.8, 1.0)     # e = 0.2
    s = pid_step(s, 0.7, 1.0)     # e = 0.3
    assert s.snd_des == pytest.approx(0.5)
    assert s.accumulated == pytest.approx(0.5)
    assert s.prev_error == pytest.approx(0.2) and s.error == pytest.approx(0.3)


def test_derivative_uses_previous_error():
    s = PidState(kp=0.0, kd=2.0)
    s = pid_step(s, 0.0, 0.4)     # e 0.4, prev 0 -> 0.8
    assert s.snd_des == pytest.approx(0.8)
    s = pid_step(s, 0.1, 0.4)     # e 0.3 -> 2 * (0.3 - 0.4) < 0 -> clamp
    assert s.snd_des == 0.0


def test_accumulator_limit_prevents_windup():
    s = PidState(kp=0.0, ki=1.0, accumulator_limit=0.5)
    for _ in range(10):
        s = pid_step(s, 0.0, 1.0)
    assert s.accumulated == 0.5 and s.snd_des == 0.5
    # one negative error unwinds immediately instead of after ten steps
    s = pid_step(s, 2.0, 1.0)
    assert s.accumulated == pytest.approx(-0.5)


def test_state_validation():
    with pytest.raises(ValueError):
        PidState(snd_des=-1.0)
    with pytest.raises(ValueError):
        PidState(tolerance=0.0)
    with pytest.raises(ValueError):
        pid_step(PidState(), float("nan"), 1.0)


@settings(max_examples=300, deadline=None)
@given(kp=st.floats(-5, 5), kd=st.floats(-5, 5), ki=st.floats(-5, 5),
       errs=st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_command_never_negative(kp, kd, ki, errs):
    s = PidState(kp=kp, kd=kd, ki=ki)
    for e in errs:
        s = pid_step(s, 0.0, e)
        assert s.snd_des >= 0.0


def test_linear_plant_converges():
    res = run_closed_loop(lambda s: s, lambda s: s, PidState(kp=1.0, tolerance=0.01), target=0.4,
                          max_iters=20)
    assert res.converged and len(res.trace) <= 20
    assert abs(res.trace[-1].error) < 0.01


@pytest.mark.parametrize("slope,ki", [(1.0, 0.5), (2.0, 0.3), (0.5, 3.0), (1.0, 1.9)])
def test_integral_error_contracts_on_linear_plant(slope, ki):
    # the command is positional, so the accumulator plays the incremental role:
    # e_{k+1} = (1 - ki*slope) e_k, a contraction for 0 < ki < 2/slope
    res = run_closed_loop(lambda s: s, lambda s: slope * s, PidState(kp=0.0, ki=ki, tolerance=1e-6),
                          target=0.4, max_iters=200)
    errs = np.abs([r.error for r in res.trace])
    assert res.converged
    assert np.all(np.diff(errs) < 0)
    np.testing.assert_allclose(errs[1:] / errs[:-1], abs(1 - ki * slope), rtol=1e-6)


@pytest.mark.parametrize("slope,kp", [(1.0, 0.5), (2.0, 0.3)])
def test_proportional_settles_at_fixed_point(slope, kp):
    # e_{k+1} = target - kp*slope*e_k: offset from target/(1 + kp*slope) shrinks by kp*slope
    a = kp * slope
    res = run_closed_loop(lambda s: s, lambda s: slope * s, PidState(kp=kp, tolerance=1e-9),
                          target=0.4, max_iters=40)
    off = np.abs(np.array([r.error for r in res.trace]) - 0.4 / (1 + a))
    np.testing.assert_allclose(off[1:], a * off[:-1], rtol=1e-6, atol=1e-15)
    assert not res.converged


def test_already_at_target_is_single_iteration():
    res = run_closed_loop(lambda s: s, lambda s: 0.4, PidState(kp=1.0, snd_des=0.4), target=0.4)
    assert res.converged and len(res.trace) == 1


def test_constant_plant_hits_max_iters():
    calls = []
    res = run_closed_loop(lambda s: calls.append(s), lambda _: 0.0, PidState(kp=1.0), target=1.0,
                          max_iters=7)
    assert not res.converged
    assert len(res.trace) == len(calls) == 7


def test_aggregators():
    runs = [0.0, 0.1, 0.9]
    mean = run_closed_loop(lambda s: runs, lambda r: r, PidState(kp=1.0), 1.0, max_iters=1)
    med = run_closed_loop(lambda s: runs, lambda r: r, PidState(kp=1.0), 1.0, max_iters=1,
                          aggregator="median")
    assert mean.trace[0].metric == pytest.approx(1.0 / 3.0)
    assert med.trace[0].metric == pytest.approx(0.1)
    with pytest.raises(ValueError):
        run_closed_loop(lambda s: runs, lambda r: r, PidState(), 1.0, aggregator="mode")


def test_training_failure_keeps_trace():
    def train(s):
        if s > 0.3:
            raise RuntimeError("diverged")
        return s

    with pytest.raises(ClosedLoopError) as info:
        run_closed_loop(train, lambda s: s, PidState(kp=2.0, snd_des=0.1), target=0.5, max_iters=10)
    assert len(info.value.trace) == 1
    assert isinstance(info.value.__cause__, RuntimeError)


def test_trace_csv(tmp_path):
    res = run_closed_loop(lambda s: s, lambda s: s, PidState(kp=0.5), 0.4, max_iters=5)
    write_trace_csv(res.trace, tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,snd_des,metric,error"
    assert len(lines) == 1 + len(res.trace)
    assert math.isclose(float(lines[-1].split(",")[3]), res.trace[-1].error)
