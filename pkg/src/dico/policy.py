"""DiCo policy sets: a shared trunk plus per-agent deviations rescaled to a diversity target."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .diversity import DiversityEstimator, GaussianAction, snd_from_outputs, soft_update
from .nn import Mlp, mlp_forward_np, mlp_from_state, mlp_state, read_npz, rng_stream, write_npz, CHECKPOINT_VERSION
from .tensor import Tensor

CONSTRAINT_MODES = ("equality", "at_least", "at_most", "unconstrained")
PARAMETERIZATIONS = ("deterministic", "stochastic_homogeneous_sigma", "stochastic_heterogeneous_sigma")
SIGMA_FLOOR = 1e-3


@dataclass(frozen=True)
class ConstraintMode:
    mode: str
    snd_des: float

    def __post_init__(self):
        if self.mode not in CONSTRAINT_MODES:
            raise ValueError(f"unknown constraint mode {self.mode!r}; choose from {CONSTRAINT_MODES}")
        if self.snd_des < 0:
            raise ValueError("snd_des must be nonnegative")


def effective_target(mode: ConstraintMode, snd_hat: float) -> float:
    """Diversity fed to the rescaling: the constraint function g applied to the estimate."""
    if snd_hat < 0:
        raise ValueError("snd_hat must be nonnegative")
    if mode.mode == "equality":
        return mode.snd_des
    if mode.mode == "at_least":
        return max(snd_hat, mode.snd_des)
    if mode.mode == "at_most":
        return min(snd_hat, mode.snd_des)
    return snd_hat


@dataclass
class PolicyOutput:
    """Stacked per-agent distribution parameters, each of shape (n_agents, B, m)."""

    mu: Tensor
    sigma: Tensor | None

    def as_gaussian(self) -> GaussianAction:
        sig = None if self.sigma is None else self.sigma.data
        return GaussianAction(self.mu.data, sig)


def _sigma_head(raw):
    return T.softplus(raw) + SIGMA_FLOOR


class DiCoPolicySet:
    """Shared trunk pi_h plus n deviation nets pi_{h,i}; agent i acts with
    pi_h(o) + (target / snd_hat) * pi_{h,i}(o) on the distribution parameters.

    Sigma placement follows the parameterization: none for ``deterministic``,
    on the trunk for ``stochastic_homogeneous_sigma``, on each deviation for
    ``stochastic_heterogeneous_sigma`` (where the trunk sigma is zero).
    """

    def __init__(self, obs_dim: int, action_dim: int, n_agents: int, hidden: Sequence[int] = (64, 64),
                 parameterization: str = "stochastic_homogeneous_sigma", mode: str = "equality",
                 snd_des: float = 0.0, tau: float = 0.01, eps_floor: float = 1e-8,
                 action_bounds: tuple | None = None, seed: int = 0, out_gain: float = 1.0,
                 _nets: tuple | None = None):
        if parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {parameterization!r}")
        if n_agents < 2:
            raise ValueError("a policy set needs at least two agents")
        self.obs_dim = int(obs_dim)
        self.action_dim = m = int(action_dim)
        self.n_agents = int(n_agents)
        self.hidden = tuple(int(h) for h in hidden)
        self.parameterization = parameterization
        self.constraint = ConstraintMode(mode, float(snd_des))
        self.estimator = DiversityEstimator.initial(snd_des, tau, eps_floor)
        if action_bounds is not None:
            lo, hi = (np.broadcast_to(np.asarray(b, dtype=np.float64), (m,)).copy() for b in action_bounds)
            if not np.all(lo < hi):
                raise ValueError("action bounds need a_min < a_max")
            action_bounds = (lo, hi)
        self.action_bounds = action_bounds
        trunk_out = 2 * m if parameterization == "stochastic_homogeneous_sigma" else m
        dev_out = 2 * m if parameterization == "stochastic_heterogeneous_sigma" else m
        if _nets is not None:
            self.trunk, self.deviations = _nets
        else:
            self.trunk = Mlp([obs_dim, *self.hidden, trunk_out], rng_stream(seed, "init/trunk"), out_gain)
            self.deviations = [Mlp([obs_dim, *self.hidden, dev_out], rng_stream(seed, f"init/deviation/{i}"), out_gain)
                               for i in range(n_agents)]
        if self.trunk.out_dim != trunk_out or any(d.out_dim != dev_out for d in self.deviations):
            raise ValueError("network output widths do not match the parameterization")
        if len(self.deviations) != n_agents:
            raise ValueError("need one deviation net per agent")

    # --- parameters --------------------------------------------------------

    def trunk_parameters(self) -> list[Tensor]:
        return self.trunk.parameters()

    def deviation_parameters(self) -> list[Tensor]:
        return [p for d in self.deviations for p in d.parameters()]

    def parameters(self) -> list[Tensor]:
        return self.trunk_parameters() + self.deviation_parameters()

    @property
    def stochastic(self) -> bool:
        return self.parameterization != "deterministic"

    # --- scaling -----------------------------------------------------------

    def target(self) -> float:
        return effective_target(self.constraint, self.estimator.snd_hat)

    def scale_factor(self) -> float:
        """target / snd_hat as a plain float: no gradient ever flows through it."""
        mode = self.constraint.mode
        snd_hat = self.estimator.snd_hat
        target = self.target()
        if mode == "unconstrained" or (mode != "equality" and target == snd_hat):
            return 1.0
        if target == 0.0:
            return 0.0
        return target / max(snd_hat, self.estimator.eps_floor)

    # --- forward -----------------------------------------------------------

    def _per_agent_obs(self, obs) -> tuple[Tensor, bool]:
        obs = T.as_tensor(obs)
        if obs.ndim == 2:
            shared = True
        elif obs.ndim == 3 and obs.shape[0] == self.n_agents:
            shared = False
        else:
            raise ValueError(f"observations must be (B, {self.obs_dim}) or ({self.n_agents}, B, {self.obs_dim})")
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation width {obs.shape[-1]} != {self.obs_dim}")
        return obs, shared

    def forward(self, obs) -> PolicyOutput:
        """Scaled per-agent distributions.

        ``obs`` is either a shared batch (B, obs_dim) seen by every agent or a
        per-agent batch (n_agents, B, obs_dim).
        """
        obs, shared = self._per_agent_obs(obs)
        n, m = self.n_agents, self.action_dim
        c = self.scale_factor()
        if shared:
            h = self.trunk(obs)
            trunk_rows = [h] * n
        else:
            B = obs.shape[1]
            h = self.trunk(T.reshape(obs, (n * B, self.obs_dim)))
            trunk_rows = [h[i * B:(i + 1) * B] for i in range(n)]
        mus, sigmas = [], []
        for i in range(n):
            hi = trunk_rows[i]
            mu = hi[:, :m] if hi.shape[1] != m else hi
            sigma = _sigma_head(hi[:, m:]) if self.parameterization == "stochastic_homogeneous_sigma" else None
            if c != 0.0:
                d = self.deviations[i](obs if shared else obs[i])
                if self.parameterization == "stochastic_heterogeneous_sigma":
                    mu = mu + c * d[:, :m]
                    sigma = c * _sigma_head(d[:, m:])
                else:
                    mu = mu + c * d
            elif self.parameterization == "stochastic_heterogeneous_sigma":
                sigma = T.Tensor(np.zeros(mu.shape))
            mus.append(mu)
            sigmas.append(sigma)
        return PolicyOutput(T.stack(mus), None if sigmas[0] is None else T.stack(sigmas))

    def act(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        """Graph-free forward for rollouts: returns (mu, sigma) arrays of shape (n, B, m)."""
        with T.no_grad():
            out = self.forward(obs)
        return out.mu.data, None if out.sigma is None else out.sigma.data

    def deviation_outputs(self, O: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unscaled deviations evaluated on a shared observation set: (n, |O|, m) each."""
        O = np.asarray(O, dtype=np.float64)
        m = self.action_dim
        mus, sigmas = [], []
        for d in self.deviations:
            out = mlp_forward_np(d, O)
            mus.append(out[:, :m])
            if self.parameterization == "stochastic_heterogeneous_sigma":
                sigmas.append(np.logaddexp(0.0, out[:, m:]) + SIGMA_FLOOR)
            else:
                sigmas.append(np.zeros((O.shape[0], m)))
        return np.stack(mus), np.stack(sigmas)

    def measure_snd(self, O: np.ndarray) -> float:
        """SND of the scaled agent policies over a shared observation set."""
        mu, sigma = self.act(np.asarray(O, dtype=np.float64))
        return snd_from_outputs(mu, sigma)

    def update_estimate(self, O: np.ndarray) -> float:
        """Measure the deviations' SND on O (no gradient) and soft-update the estimate.

        Returns the freshly measured value.
        """
        O = np.asarray(O, dtype=np.float64)
        if O.ndim != 2 or O.shape[0] == 0:
            raise ValueError("observation set must be a nonempty (count, obs_dim) array")
        mu, sigma = self.deviation_outputs(O)
        measured = snd_from_outputs(mu, sigma)
        self.estimator = soft_update(self.estimator, measured)
        return measured

    def agent_evaluators(self) -> list:
        """Per-agent callables O -> GaussianAction for the scaled policies."""
        def make(i):
            def ev(O):
                mu, sigma = self.act(np.asarray(O, dtype=np.float64))
                return GaussianAction(mu[i], None if sigma is None else sigma[i])
            return ev
        return [make(i) for i in range(self.n_agents)]

    def deviation_evaluators(self) -> list:
        def make(i):
            def ev(O):
                mu, sigma = self.deviation_outputs(O)
                return GaussianAction(mu[i], sigma[i])
            return ev
        return [make(i) for i in range(self.n_agents)]

    # --- overflow penalty --------------------------------------------------

    def overflow_penalty(self, obs, out: PolicyOutput | None = None) -> Tensor:
        """Batch mean of the largest per-agent distance between a mean action and its clipped value."""
        if self.action_bounds is None:
            raise ValueError("overflow penalty needs action bounds")
        if out is None:
            out = self.forward(obs)
        lo, hi = self.action_bounds
        excess = T.relu(out.mu - hi) - T.relu(lo - out.mu)
        per_agent = T.norm(excess, axis=-1)          # (n, B)
        return T.mean(T.amax(per_agent, axis=0))

    # --- copies and checkpoints -------------------------------------------

    def _config(self) -> dict:
        return dict(obs_dim=self.obs_dim, action_dim=self.action_dim, n_agents=self.n_agents,
                    hidden=self.hidden, parameterization=self.parameterization,
                    mode=self.constraint.mode, snd_des=self.constraint.snd_des,
                    tau=self.estimator.tau, eps_floor=self.estimator.eps_floor,
                    action_bounds=self.action_bounds)

    def copy(self) -> "DiCoPolicySet":
        ps = DiCoPolicySet(**self._config(), _nets=(self.trunk.copy(), [d.copy() for d in self.deviations]))
        ps.estimator = self.estimator
        return ps

    def save(self, path) -> None:
        state = {"format_version": np.asarray(CHECKPOINT_VERSION), "kind": np.asarray("dico_policy_set"),
                 "parameterization": np.asarray(self.parameterization),
                 "mode": np.asarray(self.constraint.mode),
                 "estimator": np.asarray([self.estimator.snd_hat, self.estimator.tau,
                                          self.estimator.snd_des, self.estimator.eps_floor]),
                 "n_agents": np.asarray(self.n_agents)}
        if self.action_bounds is not None:
            state["a_min"], state["a_max"] = self.action_bounds
        state.update(mlp_state(self.trunk, "trunk/"))
        for i, d in enumerate(self.deviations):
            state.update(mlp_state(d, f"dev{i}/"))
        write_npz(path, state)

    @classmethod
    def load(cls, path) -> "DiCoPolicySet":
        state = read_npz(path, "dico_policy_set")
        n = int(state["n_agents"])
        trunk = mlp_from_state(state, "trunk/")
        devs = [mlp_from_state(state, f"dev{i}/") for i in range(n)]
        snd_hat, tau, snd_des, eps = (float(x) for x in state["estimator"])
        bounds = (state["a_min"], state["a_max"]) if "a_min" in state else None
        param = str(state["parameterization"])
        action_dim = trunk.out_dim // 2 if param == "stochastic_homogeneous_sigma" else trunk.out_dim
        ps = cls(trunk.in_dim, action_dim, n, hidden=trunk.widths[1:-1], parameterization=param,
                 mode=str(state["mode"]), snd_des=snd_des, tau=tau, eps_floor=eps,
                 action_bounds=bounds, _nets=(trunk, devs))
        ps.estimator = replace(ps.estimator, snd_hat=snd_hat)
        return ps
