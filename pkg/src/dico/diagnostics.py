"""Diversity landscapes over the 2-D workspace, PPM rasters, and cross-seed summaries."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diversity import GaussianAction, pairwise_w2
from .policy import DiCoPolicySet

COLOR_LEVELS = 765   # distinct colors along the black-red-yellow-white ramp


@dataclass
class LandscapeGrid:
    """SND_o per cell.  values[r, c]: row 0 is the top edge (largest y), column 0 the left edge."""

    values: np.ndarray
    bounds: tuple = (-1.0, 1.0, -1.0, 1.0)     # x_min, x_max, y_min, y_max
    context: dict = field(default_factory=dict)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape

    def cell_centers(self) -> np.ndarray:
        return cell_centers(self.resolution, self.bounds)

    def argmax_position(self) -> np.ndarray:
        r, c = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return self.cell_centers()[r, c]


def cell_centers(resolution, bounds=(-1.0, 1.0, -1.0, 1.0)) -> np.ndarray:
    rows, cols = resolution
    x0, x1, y0, y1 = bounds
    xs = x0 + (np.arange(cols) + 0.5) * (x1 - x0) / cols
    ys = y1 - (np.arange(rows) + 0.5) * (y1 - y0) / rows
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)            # (rows, cols, 2)


def _outputs(policies, O: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(policies, DiCoPolicySet):
        mu, sigma = policies.act(O)
        return mu, np.zeros_like(mu) if sigma is None else sigma
    outs = []
    for pi in policies:
        out = pi(O)
        outs.append(out if isinstance(out, GaussianAction) else GaussianAction.deterministic(out))
    return np.stack([o.mu for o in outs]), np.stack([o.sigma for o in outs])


def render_landscape(policies, task, state, env: int = 0, resolution=(100, 100),
                     bounds=(-1.0, 1.0, -1.0, 1.0)) -> LandscapeGrid:
    """Evaluate SND_o at the observation each cell center would produce, task context held fixed.

    ``policies`` is a DiCoPolicySet or a list of evaluators.
    """
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    rows, cols = resolution
    if rows < 2 or cols < 2:
        raise ValueError("landscape resolution must be at least 2 in each axis")
    centers = cell_centers(resolution, bounds).reshape(-1, 2)
    O = task.synthesize(state, env, centers)
    mu, sigma = _outputs(policies, O)
    values = pairwise_w2(mu, sigma).mean(axis=0).reshape(rows, cols)
    return LandscapeGrid(values, tuple(float(b) for b in bounds), task.context(state, env))


def colorize(values: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Linear black-red-yellow-white ramp from 0 to vmax; returns uint8 (..., 3)."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot colorize non-finite values")
    vmax = float(values.max()) if vmax is None else float(vmax)
    t = np.clip(values / vmax, 0.0, 1.0) if vmax > 0 else np.zeros_like(values)
    level = np.rint(t * COLOR_LEVELS)
    rgb = np.stack([np.clip(level - k * 255, 0, 255) for k in range(3)], axis=-1)
    return rgb.astype(np.uint8)


def color_level(rgb: np.ndarray) -> np.ndarray:
    """Inverse of the ramp position: 0 .. COLOR_LEVELS."""
    return rgb.astype(np.int64).sum(axis=-1)


def write_raster(grid: LandscapeGrid, path, scale: int = 1) -> Path:
    """Binary PPM (P6) plus a sidecar ``.txt`` with bounds, max value and context."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    rgb = colorize(grid.values)
    if scale > 1:
        rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    h, w = rgb.shape[:2]
    path = Path(path)
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())
    meta = {"bounds": list(grid.bounds), "resolution": list(grid.resolution),
            "max_value": float(grid.values.max()), "min_value": float(grid.values.min()),
            "argmax_position": grid.argmax_position().tolist(), "context": grid.context}
    path.with_suffix(".txt").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValueError("not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    pixels = np.frombuffer(parts[4], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise ValueError("truncated PPM")
    return pixels.reshape(h, w, 3)


# --- cross-seed summaries ------------------------------------------------------------

SUMMARY_COLUMNS = ("iteration", "reward_mean", "reward_std", "snd_mean", "snd_std")


def summarize_runs(paths: Sequence) -> list[tuple]:
    """Per-iteration mean and population std of reward and measured SND across seed CSVs."""
    from .trainers import read_metrics_csv

    if not paths:
        raise ValueError("no runs to summarize")
    runs = [read_metrics_csv(p) for p in paths]
    its = runs[0]["iteration"]
    for r in runs[1:]:
        if r["iteration"].shape != its.shape or np.any(r["iteration"] != its):
            raise ValueError("runs have misaligned iteration axes")
    # sort across seeds so the reduction order (and the float result) ignores input order
    reward = np.sort(np.stack([r["mean_reward"] for r in runs]), axis=0)
    snd = np.sort(np.stack([r["snd_measured"] for r in runs]), axis=0)
    return [(int(it), reward[:, k].mean(), reward[:, k].std(), snd[:, k].mean(), snd[:, k].std())
            for k, it in enumerate(its)]


def write_summary_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([r[0], *(repr(float(x)) for x in r[1:])])
