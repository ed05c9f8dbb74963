"""Named reproduction suites: each trains its settings, then checks an ordinal or tracking claim.

Settings are cached on disk by config digest, so suites that share runs (the
landscape suite reuses the navigation runs) train them once.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ExperimentConfig, load_config, save_config
from .diversity import max_snd_box
from .pid import PidState, run_closed_loop, write_trace_csv
from .trainers import (TrainReport, evaluate, final_reward, iteration_env_seeds, load_seed_report, train,
                       write_eval_outputs)

SEEDS = [0, 1, 2, 3]
TRACKING_TOLERANCE = 0.15

# three times the default budget: shorter runs still drift, and their landscapes are not yet settled
NAVIGATION = {"task.name": "navigation", "algorithm.lr_final_fraction": 0.1, "run.frames": 1_080_000,
              "run.seeds": SEEDS}
SAME_GOAL = {**NAVIGATION, "task.name": "navigation_same_goal"}
DISPERSION = {"task.name": "dispersion", "algorithm.name": "ddpg", "algorithm.centralized_critic": True,
              "dico.bound_actions": True, "dico.overflow_penalty": True, "task.food_radius": 0.15,
              "run.seeds": SEEDS}
SAMPLING = {"task.name": "sampling", "algorithm.name": "ddpg", "algorithm.centralized_critic": False,
            "dico.bound_actions": True, "dico.overflow_penalty": True, "run.seeds": [0, 1, 2]}
TAU_TARGET = 1.0
TAU_VALUES = (0.001, 0.1)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class SuiteResult:
    name: str
    checks: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    def add(self, name: str, passed, detail: str) -> None:
        self.checks.append(Check(name, bool(passed), detail))

    def lines(self) -> list[str]:
        return [f"[{'PASS' if c.passed else 'FAIL'}] {self.name}/{c.name}: {c.detail}" for c in self.checks]


def _fmt(xs) -> str:
    return "[" + ", ".join(f"{x:.4g}" for x in xs) + "]"


def run_setting(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> list[TrainReport]:
    """Train every seed of ``cfg`` under ``out`` unless a finished run with the same digest is there."""
    out = Path(out)
    stamp = out / "digest.txt"
    done = stamp.exists() and stamp.read_text().strip() == cfg.digest() and all(
        (out / f"seed_{s}" / "policy.npz").exists() for s in cfg.run.seeds)
    if done:
        return [load_seed_report(out, s) for s in cfg.run.seeds]
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.toml")
    reports = train(cfg, out, jobs=jobs)
    stamp.write_text(cfg.digest() + "\n")
    return reports


def settle_window(values: np.ndarray) -> np.ndarray:
    """Last third of a training curve."""
    k = len(values)
    return values[k - max(1, k // 3):]


def tracking_deviation(report: TrainReport, target: float) -> float:
    last = settle_window(report.column("snd_measured"))
    return float(np.max(np.abs(last - target)) / target)


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# --- suites ----------------------------------------------------------------------

def navigation_runs(root: Path, jobs: int) -> dict[float, list[TrainReport]]:
    runs = {}
    for snd in (0.0, 0.2, 0.5, 1.0):
        cfg = load_config(overrides={**NAVIGATION, "dico.snd_des": snd})
        runs[snd] = run_setting(cfg, root / "navigation" / f"snd_{snd}", jobs)
    return runs


def suite_navigation(root: Path, jobs: int = 1) -> SuiteResult:
    res = SuiteResult("navigation")
    runs = navigation_runs(root, jobs)
    for snd in (0.2, 0.5, 1.0):
        devs = [tracking_deviation(r, snd) for r in runs[snd]]
        res.add(f"tracking snd_des={snd}", max(devs) <= TRACKING_TOLERANCE,
                f"max relative deviation over the last third per seed {_fmt(devs)} (limit {TRACKING_TOLERANCE})")
    hi = [final_reward(r) for r in runs[1.0]]
    lo = [final_reward(r) for r in runs[0.0]]
    wins = sum(h > l for h, l in zip(hi, lo))
    res.add("reward snd_des=1.0 > snd_des=0", wins >= 3,
            f"{wins}/{len(hi)} seeds; final reward 1.0 {_fmt(hi)} vs 0 {_fmt(lo)}")
    return res


def suite_same_goal(root: Path, jobs: int = 1) -> SuiteResult:
    res = SuiteResult("same_goal")
    runs = {snd: run_setting(load_config(overrides={**SAME_GOAL, "dico.snd_des": snd}),
                             root / "same_goal" / f"snd_{snd}", jobs)
            for snd in (0.0, 1.0)}
    homo = [final_reward(r) for r in runs[0.0]]
    het = [final_reward(r) for r in runs[1.0]]
    wins = sum(a > b for a, b in zip(homo, het))
    res.add("reward snd_des=0 > snd_des=1.0", wins >= 3,
            f"{wins}/{len(homo)} seeds; final reward 0 {_fmt(homo)} vs 1.0 {_fmt(het)}")
    return res


def converged_snd(reports) -> float:
    return float(np.mean([settle_window(r.column("snd_measured")).mean() for r in reports]))


def suite_dispersion(root: Path, jobs: int = 1) -> SuiteResult:
    res = SuiteResult("dispersion")
    base = root / "dispersion"
    homo = run_setting(load_config(overrides={**DISPERSION, "dico.snd_des": 0.0}), base / "snd_0", jobs)
    free = run_setting(load_config(overrides={**DISPERSION, "dico.mode": "unconstrained"}), base / "unconstrained", jobs)
    free_snd = converged_snd(free)
    high_snd = round(3.0 * free_snd, 6)
    high_cfg = load_config(overrides={**DISPERSION, "dico.snd_des": high_snd})
    high = run_setting(high_cfg, base / "high", jobs)
    _write_json(base / "high" / "manifest.json", {"unconstrained_converged_snd": free_snd,
                                                  "high_snd_des": high_snd, "rule": "3 x unconstrained"})
    r0, rf, rh = ([final_reward(r) for r in runs] for runs in (homo, free, high))
    lowest = sum(a < min(b, c) for a, b, c in zip(r0, rf, rh))
    res.add("homogeneous lowest", lowest >= 3,
            f"{lowest}/{len(r0)} seeds; final reward 0 {_fmt(r0)}, unconstrained {_fmt(rf)}, "
            f"high={high_snd:.4g} {_fmt(rh)}")
    eaten = []
    for rep in high:
        ev = evaluate(high_cfg, rep.policy, seed=rep.seed)
        write_eval_outputs(ev, base / "high" / f"seed_{rep.seed}" / "eval")
        eaten.append(ev.all_food_eaten)
    eaten = np.concatenate(eaten)
    res.add("high target eats all food", eaten.mean() > 0.5,
            f"all food consumed in {int(eaten.sum())}/{eaten.size} evaluation episodes")
    return res


def sampling_targets(cfg: ExperimentConfig) -> tuple[float, float]:
    """Mid and high targets as fixed fractions of the largest SND the action box admits."""
    task = cfg.make_task()
    lo, hi = task.action_bounds
    top, _ = max_snd_box(task.n_agents, lo, hi)
    return round(top / 6.0, 6), round(top / 3.0, 6)


def suite_sampling(root: Path, jobs: int = 1) -> SuiteResult:
    res = SuiteResult("sampling")
    base = load_config(overrides=SAMPLING)
    mid, high = sampling_targets(base)
    rewards = []
    for label, snd in (("snd_0", 0.0), ("mid", mid), ("high", high)):
        runs = run_setting(base.with_overrides({"dico.snd_des": snd}), root / "sampling" / label, jobs)
        rewards.append([final_reward(r) for r in runs])
    _write_json(root / "sampling" / "targets.json", {"mid": mid, "high": high})
    r = np.array(rewards)                                              # (3 settings, seeds)
    mono = int(np.sum(np.all(np.diff(r, axis=0) >= 0, axis=0)))
    need = int(np.ceil(2 * r.shape[1] / 3))
    res.add("reward nondecreasing in snd_des", mono >= need,
            f"{mono}/{r.shape[1]} seeds; final reward 0 {_fmt(r[0])}, {mid:.4g} {_fmt(r[1])}, "
            f"{high:.4g} {_fmt(r[2])}")
    return res


def suite_tau(root: Path, jobs: int = 1) -> SuiteResult:
    res = SuiteResult("tau")
    runs = {tau: run_setting(load_config(overrides={**NAVIGATION, "dico.snd_des": TAU_TARGET, "dico.tau": tau}),
                             root / "tau" / f"tau_{tau}", jobs)
            for tau in TAU_VALUES}
    slow, fast = TAU_VALUES
    var = {t: [float(settle_window(r.column("snd_measured")).var()) for r in runs[t]] for t in TAU_VALUES}
    peak = {t: [float(r.column("snd_measured").max() - TAU_TARGET) for r in runs[t]] for t in TAU_VALUES}
    res.add(f"variance tau={slow} < tau={fast}", np.mean(var[slow]) < np.mean(var[fast]),
            f"last-third variance {_fmt(var[slow])} vs {_fmt(var[fast])}")
    res.add(f"overshoot tau={slow} > tau={fast}", np.mean(peak[slow]) > np.mean(peak[fast]),
            f"peak minus target {_fmt(peak[slow])} vs {_fmt(peak[fast])}")
    return res


PID_PLANT = {**NAVIGATION, "run.seeds": [0, 1], "run.frames": 60_000}


def suite_pid(root: Path, jobs: int = 1) -> SuiteResult:
    res = SuiteResult("pid")
    t0 = time.perf_counter()
    lin = run_closed_loop(lambda s: s, lambda s: s, PidState(kp=1.0, tolerance=0.01), target=0.4, max_iters=20)
    elapsed = time.perf_counter() - t0
    res.add("linear plant converges", lin.converged and len(lin.trace) <= 20 and elapsed < 1.0,
            f"|e|={abs(lin.trace[-1].error):.3g} after {len(lin.trace)} iterations in {elapsed * 1e3:.1f} ms")

    out = root / "pid"
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(overrides=PID_PLANT)
    calls = iter(range(100))

    def train_fn(snd_des):
        c = cfg.with_overrides({"dico.snd_des": float(snd_des)})
        return run_setting(c, out / f"loop_{next(calls):03d}", jobs)

    # start heterogeneous and ask for a reward the task cannot pay, so the loop keeps moving
    state = PidState(kp=20.0, ki=5.0, tolerance=1e-4, snd_des=0.5, accumulator_limit=0.1)
    loop = run_closed_loop(train_fn, lambda reps: [final_reward(r) for r in reps], state,
                           target=0.02, max_iters=3)
    write_trace_csv(loop.trace, out / "pid_trace.csv")
    cmds = [r.snd_des for r in loop.trace]
    res.add("navigation plant trace", len(loop.trace) == 3 and min(cmds) >= 0.0,
            f"snd_des {_fmt(cmds)}, metric {_fmt([r.metric for r in loop.trace])}")
    return res


def goals_box_contains(goals: np.ndarray, point: np.ndarray) -> bool:
    lo, hi = goals.min(axis=0), goals.max(axis=0)
    return bool(np.all(point >= lo) and np.all(point <= hi))


def suite_landscape(root: Path, jobs: int = 1) -> SuiteResult:
    from .diagnostics import render_landscape, write_raster

    res = SuiteResult("landscape")
    runs = navigation_runs(root, jobs)
    cfg = load_config(overrides=NAVIGATION)
    task = cfg.make_task()
    (root / "landscape").mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    inside = []
    for rep in runs[1.0]:
        state, _ = task.reset(seeds=iteration_env_seeds(rep.seed, 0, 1, purpose="eval"))
        grid = render_landscape(rep.policy, task, state)
        write_raster(grid, root / "landscape" / f"snd_1.0_seed_{rep.seed}.ppm", scale=4)
        inside.append(goals_box_contains(state.goals[0], grid.argmax_position()))
    zero = []
    for rep in runs[0.0]:
        state, _ = task.reset(seeds=iteration_env_seeds(rep.seed, 0, 1, purpose="eval"))
        grid = render_landscape(rep.policy, task, state)
        write_raster(grid, root / "landscape" / f"snd_0.0_seed_{rep.seed}.ppm", scale=4)
        zero.append(float(np.abs(grid.values).max()))
    elapsed = time.perf_counter() - t0
    res.add("peak between goals", sum(inside) >= 3,
            f"max cell inside the goals' bounding box in {sum(inside)}/{len(inside)} seeds")
    res.add("homogeneous landscape is zero", max(zero) == 0.0,
            f"largest |SND_o| per seed {_fmt(zero)}; rendering took {elapsed:.1f} s")
    return res


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "navigation": suite_navigation,
    "same_goal": suite_same_goal,
    "dispersion": suite_dispersion,
    "sampling": suite_sampling,
    "tau": suite_tau,
    "pid": suite_pid,
    "landscape": suite_landscape,
}


def run_suite(name: str, out_root, jobs: int = 1) -> SuiteResult:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = SUITES[name](root, jobs)
    res.seconds = time.perf_counter() - t0
    (root / f"{name}_result.txt").write_text("\n".join(res.lines()) + "\n")
    return res
