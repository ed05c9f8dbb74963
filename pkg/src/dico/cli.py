"""Command-line entry point: train | eval | landscape | max-snd | pid | repro."""

from __future__ import annotations

import argparse
import json
import os
import sys
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .diversity import max_snd_box

OUTPUT_ROOT_ENV = "DICO_OUTPUT_ROOT"
STREAMS = ("init/trunk", "init/critic", "exploration", "minibatch")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def resolve_out_dir(path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


def manifest(cfg: ExperimentConfig) -> dict:
    """Everything needed to rerun: config hash, code version, and per-seed stream keys."""
    def stream_key(seed, name):
        return [int(seed), zlib.crc32(name.encode())]

    seeds = {}
    for s in cfg.run.seeds:
        keys = {name: stream_key(s, name) for name in STREAMS}
        keys.update({f"init/deviation/{i}": stream_key(s, f"init/deviation/{i}") for i in range(cfg.n_agents)})
        keys["env"] = "SeedSequence([seed, crc32('env'), iteration]).spawn(n_envs)"
        keys["eval"] = "SeedSequence([seed, crc32('eval'), 0]).spawn(episodes)"
        seeds[str(s)] = keys
    return {"config_sha256": cfg.digest(), "version": __version__, "seeds": seeds}


def write_run_header(cfg: ExperimentConfig, out: Path, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.toml")
    m = manifest(cfg)
    if extra:
        m.update(extra)
    (out / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")


def _load(args) -> ExperimentConfig:
    return load_config(args.config, args.set)


def cmd_train(args) -> int:
    from .trainers import train, train_seed

    cfg = _load(args)
    out = resolve_out_dir(args.out or cfg.run.out_dir)
    write_run_header(cfg, out)

    def report(seed, st):
        if not args.quiet:
            print(f"seed {seed} iter {st.iteration:4d} frames {st.frames:8d} "
                  f"reward {st.mean_reward:+.5f} snd {st.snd_measured:.4f}", file=sys.stderr)

    if (args.jobs or cfg.run.jobs) > 1:
        reports = train(cfg, out, jobs=args.jobs)
    else:
        reports = [train_seed(cfg, s, out, report) for s in cfg.run.seeds]
    for rep in reports:
        print(f"seed {rep.seed}: {out / f'seed_{rep.seed}' / 'metrics.csv'}")
    return 0


def _run_config(run_dir: Path, overrides) -> ExperimentConfig:
    path = run_dir / "config.toml"
    if not path.exists():
        raise ConfigError(f"{path} not found; point --run at a training output directory")
    return load_config(path, overrides)


def cmd_eval(args) -> int:
    from .policy import DiCoPolicySet
    from .trainers import evaluate, write_eval_outputs

    run = resolve_out_dir(args.run)
    cfg = _run_config(run, args.set)
    policy = DiCoPolicySet.load(run / f"seed_{args.seed}" / "policy.npz")
    res = evaluate(cfg, policy, args.episodes, seed=args.seed, record=True)
    out = Path(args.out) if args.out else run / f"seed_{args.seed}" / "eval"
    write_eval_outputs(res, out)
    print(f"mean return {res.returns.mean():.6f} over {len(res.returns)} episodes")
    if res.all_food_eaten is not None:
        print(f"all food eaten in {int(res.all_food_eaten.sum())}/{len(res.returns)} episodes")
    print(f"trajectory: {out / 'trajectory.csv'}")
    return 0


def cmd_landscape(args) -> int:
    from .diagnostics import render_landscape, write_raster
    from .policy import DiCoPolicySet
    from .trainers import iteration_env_seeds

    run = resolve_out_dir(args.run)
    cfg = _run_config(run, args.set)
    policy = DiCoPolicySet.load(run / f"seed_{args.seed}" / "policy.npz")
    task = cfg.make_task()
    state, _ = task.reset(seeds=iteration_env_seeds(args.seed, 0, args.env + 1, purpose="eval"))
    grid = render_landscape(policy, task, state, env=args.env, resolution=args.resolution)
    out = Path(args.out) if args.out else run / f"seed_{args.seed}" / "landscape.ppm"
    write_raster(grid, out, scale=args.scale)
    print(f"max SND_o {grid.values.max():.6f} at {grid.argmax_position().round(4).tolist()}")
    print(f"raster: {out}")
    return 0


def cmd_max_snd(args) -> int:
    lo = np.asarray(args.low, dtype=np.float64)
    hi = np.asarray(args.high, dtype=np.float64)
    if lo.size == 1 and args.dim > 1:
        lo = np.full(args.dim, lo.item())
    if hi.size == 1 and args.dim > 1:
        hi = np.full(args.dim, hi.item())
    value, actions = max_snd_box(args.n, lo, hi)
    print(f"max SND = {float(value)!r}")
    for i, a in enumerate(actions):
        print(f"agent {i}: {' '.join(f'{x:.6g}' for x in a)}")
    return 0


def cmd_pid(args) -> int:
    from .pid import PidState, run_closed_loop, write_trace_csv
    from .trainers import final_reward, train

    state = PidState(kp=args.kp, kd=args.kd, ki=args.ki, tolerance=args.tolerance,
                     snd_des=args.initial, accumulator_limit=args.accumulator_limit)
    if args.plant == "linear":
        out = resolve_out_dir(args.out or "runs/pid_linear")
        out.mkdir(parents=True, exist_ok=True)
        res = run_closed_loop(lambda s: s, lambda s: args.slope * s, state, args.target,
                              args.max_iters, args.aggregator)
    else:
        cfg = _load(args)
        out = resolve_out_dir(args.out or cfg.run.out_dir)
        settings = {k: v for k, v in vars(args).items() if k != "func"}
        settings["accumulator_limit"] = repr(args.accumulator_limit)
        write_run_header(cfg, out, {"pid": settings})
        counter = iter(range(args.max_iters))

        def train_fn(snd_des):
            k = next(counter)
            c = cfg.with_overrides({"dico.snd_des": float(snd_des)})
            return train(c, out / f"loop_{k:03d}")

        res = run_closed_loop(train_fn, lambda reps: [final_reward(r) for r in reps], state,
                              args.target, args.max_iters, args.aggregator)
    write_trace_csv(res.trace, out / "pid_trace.csv")
    for r in res.trace:
        print(f"iter {r.iteration}: snd_des {r.snd_des:.6f} metric {r.metric:.6f} error {r.error:+.6f}")
    print("converged" if res.converged else "did not converge", f"after {len(res.trace)} iterations")
    print(f"trace: {out / 'pid_trace.csv'}")
    return 0


def cmd_repro(args) -> int:
    from .suites import SUITES, run_suite

    names = list(SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in names:
        res = run_suite(name, resolve_out_dir(args.out or "runs/repro"), jobs=args.jobs)
        for line in res.lines():
            print(line)
        ok &= res.passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dico", description="Diversity-controlled multi-agent training lab")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", "-c", required=required, help="TOML experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")

    sp = sub.add_parser("train", help="train every configured seed")
    with_config(sp)
    sp.add_argument("--out", help=f"output directory (relative paths resolve against ${OUTPUT_ROOT_ENV})")
    sp.add_argument("--jobs", type=int, default=None, help="parallel seed workers")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="deterministic evaluation episodes with trajectory CSV")
    sp.add_argument("--run", required=True, help="training output directory")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--episodes", type=int, default=None)
    sp.add_argument("--out")
    sp.add_argument("--set", action="append", default=[])
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("landscape", help="render the SND_o landscape of a trained policy set")
    sp.add_argument("--run", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--env", type=int, default=0, help="which evaluation episode fixes the task context")
    sp.add_argument("--resolution", type=int, default=100)
    sp.add_argument("--scale", type=int, default=1, help="pixels per cell")
    sp.add_argument("--out")
    sp.add_argument("--set", action="append", default=[])
    sp.set_defaults(func=cmd_landscape)

    sp = sub.add_parser("max-snd", help="largest SND reachable by n agents in an action box")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--low", type=float, nargs="+", default=[-1.0])
    sp.add_argument("--high", type=float, nargs="+", default=[1.0])
    sp.add_argument("--dim", type=int, default=2, help="action dimension when bounds are scalars")
    sp.set_defaults(func=cmd_max_snd)

    sp = sub.add_parser("pid", help="closed-loop tuning of snd_des toward a target metric")
    with_config(sp)
    sp.add_argument("--target", type=float, required=True)
    sp.add_argument("--kp", type=float, default=1.0)
    sp.add_argument("--kd", type=float, default=0.0)
    sp.add_argument("--ki", type=float, default=0.0)
    sp.add_argument("--tolerance", type=float, default=0.01)
    sp.add_argument("--initial", type=float, default=0.0, help="first commanded snd_des")
    sp.add_argument("--accumulator-limit", type=float, default=float("inf"))
    sp.add_argument("--max-iters", type=int, default=20)
    sp.add_argument("--aggregator", choices=("mean", "median"), default="mean")
    sp.add_argument("--plant", choices=("train", "linear"), default="train",
                    help="'linear' replaces training with metric = slope * snd_des")
    sp.add_argument("--slope", type=float, default=1.0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_pid)

    sp = sub.add_parser("repro", help="run a named reproduction suite end to end")
    from .suites import SUITES
    sp.add_argument("suite", choices=[*SUITES, "all"], help="suite name, or 'all'")
    sp.add_argument("--out")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
