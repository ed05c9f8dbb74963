"""Feed-forward networks, Adam, and parameter checkpoints."""

from __future__ import annotations

import io
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, matmul, tanh, add

CHECKPOINT_VERSION = 1


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (init, env, exploration, minibatch, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


class Mlp:
    """Tanh MLP with an identity output layer.  Weights are stored (in, out)."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator | None = None,
                 out_gain: float = 1.0, params: Sequence[np.ndarray] | None = None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"need at least two positive widths, got {widths}")
        self.widths = widths
        if params is not None:
            if len(params) != 2 * (len(widths) - 1):
                raise ValueError("parameter list does not match widths")
            arrays = [np.array(p, dtype=np.float64) for p in params]
        else:
            rng = rng if rng is not None else np.random.default_rng()
            arrays = []
            for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
                bound = 1.0 / np.sqrt(fan_in)
                gain = out_gain if k == len(widths) - 2 else 1.0
                arrays.append(gain * rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                arrays.append(gain * rng.uniform(-bound, bound, size=fan_out))
        self.params = [Tensor(a, requires_grad=True) for a in arrays]
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if self.params[2 * k].shape != (fan_in, fan_out) or self.params[2 * k + 1].shape != (fan_out,):
                raise ValueError(f"layer {k} parameters do not match widths {widths}")

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def parameters(self) -> list[Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def __call__(self, x) -> Tensor:
        return mlp_forward(self, x)

    def copy(self) -> "Mlp":
        return Mlp(self.widths, params=[p.data for p in self.params])

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        for p, a in zip(self.params, arrays):
            p.data = np.array(a, dtype=np.float64)


def mlp_forward(net: Mlp, x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"expected input of shape (batch, {net.in_dim}), got {x.shape}")
    h = x
    n_layers = len(net.widths) - 1
    for k in range(n_layers):
        h = add(matmul(h, net.params[2 * k]), net.params[2 * k + 1])
        if k < n_layers - 1:
            h = tanh(h)
    return h


def mlp_forward_np(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Graph-free forward pass; same arithmetic as ``mlp_forward``."""
    h = np.asarray(x, dtype=np.float64)
    n_layers = len(net.widths) - 1
    for k in range(n_layers):
        h = h @ net.params[2 * k].data + net.params[2 * k + 1].data
        if k < n_layers - 1:
            h = np.tanh(h)
    return h


def polyak_update(target: Mlp, source: Mlp, tau: float) -> None:
    for t, s in zip(target.params, source.params):
        t.data = (1.0 - tau) * t.data + tau * s.data if tau < 1.0 else s.data.copy()


class Adam:
    """Adam with bias correction over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameters")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient passed to Adam")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        return [g * scale for g in grads], total
    return list(grads), total


# --- checkpoints -------------------------------------------------------------

def mlp_state(net: Mlp, prefix: str = "") -> dict[str, np.ndarray]:
    state = {f"{prefix}widths": np.asarray(net.widths, dtype=np.int64)}
    for k, p in enumerate(net.params):
        state[f"{prefix}p{k}"] = p.data
    return state


def mlp_from_state(state, prefix: str = "") -> Mlp:
    widths = [int(w) for w in state[f"{prefix}widths"]]
    n = 2 * (len(widths) - 1)
    return Mlp(widths, params=[state[f"{prefix}p{k}"] for k in range(n)])


def save_mlp(net: Mlp, path) -> None:
    state = mlp_state(net)
    state["format_version"] = np.asarray(CHECKPOINT_VERSION)
    state["kind"] = np.asarray("mlp")
    write_npz(path, state)


def load_mlp(path) -> Mlp:
    state = read_npz(path, "mlp")
    return mlp_from_state(state)


def write_npz(path, state: dict) -> None:
    buf = io.BytesIO()
    np.savez(buf, **state)
    Path(path).write_bytes(buf.getvalue())


def read_npz(path, kind: str) -> dict:
    with np.load(path, allow_pickle=False) as z:
        state = {k: z[k] for k in z.files}
    version = int(state.get("format_version", -1))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if str(state.get("kind")) != kind:
        raise ValueError(f"checkpoint holds {state.get('kind')!s}, expected {kind}")
    return state
