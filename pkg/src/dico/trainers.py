"""Actor-critic trainers wrapping a DiCoPolicySet: on-policy clipped surrogate
(independent PPO) and off-policy deterministic policy gradient (IDDPG/MADDPG).

Layouts are time-major: ``[time, env, agent, feature]``.  The critic is one
network shared by all agents; a one-hot agent index is appended to its input.
"""

from __future__ import annotations

import csv
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .envs import Task, trajectory_rows, write_trajectory_csv
from .nn import Adam, Mlp, clip_grad_norm, mlp_forward_np, polyak_update, rng_stream, save_mlp
from .policy import DiCoPolicySet
from .tensor import Tensor

METRIC_COLUMNS = ("iteration", "frames", "mean_reward", "snd_measured",
                  "actor_loss", "critic_loss", "overflow_penalty")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class RolloutBatch:
    obs: np.ndarray                       # (T, E, n, d)
    actions: np.ndarray                   # (T, E, n, m)
    rewards: np.ndarray                   # (T, E, n)
    dones: np.ndarray                     # (T, E) true terminal flags (timeouts are not terminal)
    next_obs: np.ndarray                  # (T, E, n, d)
    logp: np.ndarray | None = None        # (T, E, n)
    values: np.ndarray | None = None      # (T + 1, E, n), last row is the bootstrap
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return self.obs.shape[0]

    @property
    def n_envs(self) -> int:
        return self.obs.shape[1]

    def observation_set(self) -> np.ndarray:
        """Every agent's observation at every step, flattened to (T*E*n, d)."""
        return self.obs.reshape(-1, self.obs.shape[-1])


@dataclass
class IterationStats:
    iteration: int
    frames: int
    mean_reward: float
    snd_measured: float
    actor_loss: float
    critic_loss: float
    overflow_penalty: float
    wall_time: float = 0.0

    def row(self) -> list:
        return [self.iteration, self.frames, *(repr(float(getattr(self, c))) for c in METRIC_COLUMNS[2:])]


@dataclass
class TrainReport:
    seed: int
    stats: list = field(default_factory=list)
    policy: DiCoPolicySet | None = None
    critic: Mlp | None = None
    out_dir: Path | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.stats], dtype=np.float64)


# --- critic features -----------------------------------------------------------

def critic_input_dim(n_agents: int, obs_dim: int, action_dim: int, centralized: bool, with_actions: bool) -> int:
    per = obs_dim + (action_dim if with_actions else 0)
    return (n_agents * per if centralized else per) + n_agents


def critic_features(obs: np.ndarray, actions: np.ndarray | None, centralized: bool) -> np.ndarray:
    """Per-agent critic input (..., n, f) from obs (..., n, d) and optional actions (..., n, m)."""
    n = obs.shape[-2]
    parts = obs if actions is None else np.concatenate([obs, actions], axis=-1)
    if centralized:
        joint = parts.reshape(*parts.shape[:-2], 1, -1)
        parts = np.broadcast_to(joint, (*parts.shape[:-2], n, joint.shape[-1]))
    ids = np.broadcast_to(np.eye(n), (*obs.shape[:-2], n, n))
    return np.concatenate([parts, ids], axis=-1)


def _critic_features_tensor(obs: np.ndarray, actions: Tensor, centralized: bool) -> Tensor:
    # obs (B, n, d) constant, actions (n, B, m) from the actor graph -> (n*B, f)
    n, B, _ = actions.shape
    ids = np.eye(n)
    rows = []
    if centralized:
        # same layout as critic_features: (o_1, a_1, o_2, a_2, ...)
        joint = T.concat([T.concat([obs[:, j], actions[j]], axis=-1) for j in range(n)], axis=-1)
        for i in range(n):
            rows.append(T.concat([joint, np.repeat(ids[i][None], B, 0)], axis=-1))
    else:
        for i in range(n):
            rows.append(T.concat([obs[:, i], actions[i], np.repeat(ids[i][None], B, 0)], axis=-1))
    return T.concat(rows, axis=0)


def critic_values(critic: Mlp, feats: np.ndarray) -> np.ndarray:
    lead = feats.shape[:-1]
    return mlp_forward_np(critic, feats.reshape(-1, feats.shape[-1])).reshape(lead)


# --- rollouts -------------------------------------------------------------------

def iteration_env_seeds(seed: int, iteration: int, n_envs: int, purpose: str = "env"):
    root = np.random.SeedSequence([int(seed), zlib.crc32(purpose.encode()), int(iteration)])
    return root.spawn(n_envs)


def gaussian_log_prob(actions, mu, sigma):
    """Diagonal-Gaussian log density summed over the last axis; works on arrays or Tensors."""
    if isinstance(mu, Tensor) or isinstance(sigma, Tensor):
        z = (T.as_tensor(actions) - mu) / sigma
        m = mu.shape[-1]
        return -0.5 * T.tsum(z * z, axis=-1) - T.tsum(T.log(sigma), axis=-1) - 0.5 * m * LOG_2PI
    z = (actions - mu) / sigma
    return -0.5 * (z * z).sum(-1) - np.log(sigma).sum(-1) - 0.5 * mu.shape[-1] * LOG_2PI


def collect_rollout(task: Task, policy: DiCoPolicySet, n_envs: int, rng: np.random.Generator,
                    env_seeds, critic: Mlp | None = None, centralized: bool = False,
                    noise_std: float | None = None, trajectory: list | None = None) -> RolloutBatch:
    """Run one episode in each of ``n_envs`` environments with a frozen policy.

    Stochastic policies sample from their Gaussian heads; deterministic ones
    act with mean + N(0, noise_std) (``noise_std=None`` or 0 means no noise).
    """
    if policy.obs_dim != task.obs_dim or policy.n_agents != task.n_agents:
        raise ValueError("policy and task dimensions disagree")
    state, obs = task.reset(seeds=env_seeds)
    lo, hi = task.action_bounds
    H, n, d, m = state.horizon, task.n_agents, task.obs_dim, task.action_dim
    obs_buf = np.zeros((H, n_envs, n, d))
    next_buf = np.zeros((H, n_envs, n, d))
    act_buf = np.zeros((H, n_envs, n, m))
    rew_buf = np.zeros((H, n_envs, n))
    logp_buf = np.zeros((H, n_envs, n)) if policy.stochastic else None
    values = np.zeros((H + 1, n_envs, n)) if critic is not None else None
    for t in range(H):
        mu, sigma = policy.act(obs.transpose(1, 0, 2))           # (n, E, m)
        if policy.stochastic:
            a = mu + sigma * rng.standard_normal(mu.shape)
            logp_buf[t] = gaussian_log_prob(a, mu, sigma).T
        else:
            a = mu
            if noise_std:
                a = mu + noise_std * rng.standard_normal(mu.shape)
            a = np.clip(a, lo, hi)
        a = a.transpose(1, 0, 2)
        if critic is not None:
            values[t] = critic_values(critic, critic_features(obs, None, centralized))
        obs_buf[t] = obs
        act_buf[t] = a
        res = task.step(state, a)
        if trajectory is not None:
            trajectory.extend(trajectory_rows(state, t, np.clip(a, lo, hi), res.rewards))
        rew_buf[t] = res.rewards
        next_buf[t] = res.obs
        obs = res.obs
    if critic is not None:
        values[H] = critic_values(critic, critic_features(obs, None, centralized))
    # episodes end only on the horizon, which is a time limit rather than a terminal state
    dones = np.zeros((H, n_envs), dtype=bool)
    return RolloutBatch(obs_buf, act_buf, rew_buf, dones, next_buf, logp_buf, values)


def gae_advantages(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                   gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates over the leading time axis.

    rewards (T, ...), values (T + 1, ...) including the bootstrap row, dones (T, ...)
    broadcastable against rewards; a done at t cuts the bootstrap from t + 1.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    H = rewards.shape[0]
    if values.shape[0] != H + 1:
        raise ValueError("values need one bootstrap row beyond the rewards")
    dones = np.asarray(dones, dtype=np.float64)
    while dones.ndim < rewards.ndim:
        dones = dones[..., None]
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    for t in reversed(range(H)):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv, adv + values[:-1]


# --- on-policy update ---------------------------------------------------------

def ppo_actor_loss(mu: Tensor, sigma: Tensor, actions: np.ndarray, old_logp: np.ndarray,
                   advantages: np.ndarray, clip_eps: float) -> tuple[Tensor, Tensor]:
    """Negative clipped surrogate; all per-agent arrays are (n, B, ...).  Returns (loss, ratio)."""
    logp = gaussian_log_prob(actions, mu, sigma)
    ratio = T.exp(logp - old_logp)
    if not np.all(np.isfinite(ratio.data)):
        raise FloatingPointError("non-finite probability ratio (collapsed sigma?)")
    unclipped = ratio * advantages
    clipped = T.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    return -T.mean(T.minimum(unclipped, clipped)), ratio


def _step(opt: Adam, loss: Tensor, params, max_norm: float) -> None:
    grads = T.grad(loss, params)
    grads, _ = clip_grad_norm(grads, max_norm)
    opt.step(grads)


def ppo_update(policy: DiCoPolicySet, critic: Mlp, batch: RolloutBatch, actor_opt: Adam, critic_opt: Adam,
               rng: np.random.Generator, clip_eps: float = 0.2, epochs: int = 4, minibatch_size: int = 512,
               gamma: float = 0.99, lam: float = 0.9, max_grad_norm: float = 1.0, entropy_coef: float = 0.0,
               centralized: bool = False, overflow_weight: float = 0.0) -> dict:
    adv, ret = gae_advantages(batch.rewards, batch.values, batch.dones, gamma, lam)
    batch.advantages, batch.returns = adv, ret
    H, E, n, d = batch.obs.shape
    N = H * E
    obs = batch.obs.reshape(N, n, d)
    acts = batch.actions.reshape(N, n, -1)
    old = batch.logp.reshape(N, n)
    adv = adv.reshape(N, n)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    ret = ret.reshape(N, n)
    feats = critic_features(obs, None, centralized)
    a_losses, c_losses, overflows = [], [], []
    params = policy.parameters()
    for _ in range(epochs):
        perm = rng.permutation(N)
        for start in range(0, N, minibatch_size):
            idx = perm[start:start + minibatch_size]
            o = obs[idx].transpose(1, 0, 2)                      # (n, B, d)
            policy.update_estimate(o.reshape(-1, d))
            out = policy.forward(o)
            loss, _ = ppo_actor_loss(out.mu, out.sigma, acts[idx].transpose(1, 0, 2),
                                     old[idx].T, adv[idx].T, clip_eps)
            a_losses.append(loss.item())
            if entropy_coef:
                loss = loss - entropy_coef * T.mean(T.tsum(T.log(out.sigma), axis=-1))
            if overflow_weight and policy.action_bounds is not None:
                pen = policy.overflow_penalty(o, out)
                overflows.append(pen.item())
                loss = loss + overflow_weight * pen
            _step(actor_opt, loss, params, max_grad_norm)

            f = feats[idx].reshape(-1, feats.shape[-1])
            v = critic(f)
            target = ret[idx].reshape(-1, 1)
            c_loss = T.mean(T.square(v - target))
            c_losses.append(c_loss.item())
            _step(critic_opt, c_loss, critic.parameters(), max_grad_norm)
    return {"actor_loss": float(np.mean(a_losses)), "critic_loss": float(np.mean(c_losses)),
            "overflow_penalty": float(np.mean(overflows)) if overflows else 0.0}


# --- off-policy update --------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity ring buffer of joint transitions; sampling is uniform over stored rows."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.actions = np.zeros((capacity, n_agents, action_dim))
        self.rewards = np.zeros((capacity, n_agents))
        self.next_obs = np.zeros((capacity, n_agents, obs_dim))
        self.dones = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, actions, rewards, next_obs, dones) -> None:
        k = len(obs)
        if k > self.capacity:
            obs, actions, rewards, next_obs, dones = (x[-self.capacity:] for x in (obs, actions, rewards, next_obs, dones))
            k = self.capacity
        idx = (self.cursor + np.arange(k)) % self.capacity
        self.obs[idx] = obs
        self.actions[idx] = actions
        self.rewards[idx] = rewards
        self.next_obs[idx] = next_obs
        self.dones[idx] = dones
        self.cursor = int((self.cursor + k) % self.capacity)
        self.size = min(self.size + k, self.capacity)

    def add_batch(self, batch: RolloutBatch) -> None:
        n, d = batch.obs.shape[-2:]
        m = batch.actions.shape[-1]
        self.add(batch.obs.reshape(-1, n, d), batch.actions.reshape(-1, n, m), batch.rewards.reshape(-1, n),
                 batch.next_obs.reshape(-1, n, d), batch.dones.reshape(-1))

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        idx = self.sample_indices(batch_size, rng)
        return {"obs": self.obs[idx], "actions": self.actions[idx], "rewards": self.rewards[idx],
                "next_obs": self.next_obs[idx], "dones": self.dones[idx]}


@dataclass
class OffPolicyLearner:
    policy: DiCoPolicySet
    critic: Mlp
    target_policy: DiCoPolicySet
    target_critic: Mlp
    actor_opt: Adam
    critic_opt: Adam
    action_low: np.ndarray
    action_high: np.ndarray
    centralized: bool = False

    @classmethod
    def create(cls, policy: DiCoPolicySet, critic: Mlp, action_bounds, lr_actor=3e-4, lr_critic=3e-4,
               centralized=False) -> "OffPolicyLearner":
        lo, hi = (np.asarray(b, dtype=np.float64) for b in action_bounds)
        return cls(policy, critic, policy.copy(), critic.copy(), Adam(policy.parameters(), lr_actor),
                   Adam(critic.parameters(), lr_critic), lo, hi, centralized)


def td_targets(learner: OffPolicyLearner, sample: dict, gamma: float) -> np.ndarray:
    nxt = sample["next_obs"]                                             # (B, n, d)
    mu, _ = learner.target_policy.act(nxt.transpose(1, 0, 2))
    a_next = np.clip(mu, learner.action_low, learner.action_high).transpose(1, 0, 2)
    q_next = critic_values(learner.target_critic, critic_features(nxt, a_next, learner.centralized))
    live = 1.0 - sample["dones"].astype(np.float64)[:, None]
    return sample["rewards"] + gamma * live * q_next                     # (B, n)


def ddpg_update(learner: OffPolicyLearner, buffer: ReplayBuffer, rng: np.random.Generator,
                batch_size: int = 256, gamma: float = 0.99, tau_target: float = 0.005,
                max_grad_norm: float = 1.0, overflow_weight: float = 0.0, update_actor: bool = True) -> dict:
    if len(buffer) == 0:
        raise ValueError("cannot update from an empty replay buffer")
    s = buffer.sample(batch_size, rng)
    obs = s["obs"]
    B, n, d = obs.shape
    y = td_targets(learner, s, gamma)
    feats = critic_features(obs, s["actions"], learner.centralized)
    q = learner.critic(feats.reshape(-1, feats.shape[-1]))
    c_loss = T.mean(T.square(q - y.reshape(-1, 1)))
    _step(learner.critic_opt, c_loss, learner.critic.parameters(), max_grad_norm)

    stats = {"critic_loss": c_loss.item(), "actor_loss": 0.0, "overflow_penalty": 0.0}
    if update_actor:
        ps = learner.policy
        o = obs.transpose(1, 0, 2)
        ps.update_estimate(o.reshape(-1, d))
        out = ps.forward(o)
        # the critic sees the clipped action, but the gradient passes straight through the clip:
        # a saturated mean would otherwise get no signal from Q at all
        clipped = np.clip(out.mu.data, learner.action_low, learner.action_high)
        a = out.mu + T.stop_gradient(clipped - out.mu.data)
        q_pi = learner.critic(_critic_features_tensor(obs, a, learner.centralized))
        loss = -T.mean(q_pi)
        stats["actor_loss"] = loss.item()
        if overflow_weight and ps.action_bounds is not None:
            pen = ps.overflow_penalty(o, out)
            stats["overflow_penalty"] = pen.item()
            loss = loss + overflow_weight * pen
        _step(learner.actor_opt, loss, ps.parameters(), max_grad_norm)

    polyak_update(learner.target_critic, learner.critic, tau_target)
    polyak_update(learner.target_policy.trunk, learner.policy.trunk, tau_target)
    for tgt, src in zip(learner.target_policy.deviations, learner.policy.deviations):
        polyak_update(tgt, src, tau_target)
    learner.target_policy.estimator = learner.policy.estimator
    return stats


# --- training loop --------------------------------------------------------------

def build_policy(cfg: ExperimentConfig, task: Task, seed: int) -> DiCoPolicySet:
    d = cfg.dico
    return DiCoPolicySet(task.obs_dim, task.action_dim, task.n_agents, hidden=cfg.model.hidden,
                         parameterization=cfg.parameterization, mode=d.mode, snd_des=d.snd_des,
                         tau=d.tau, eps_floor=d.eps_floor,
                         action_bounds=task.action_bounds if d.bound_actions else None, seed=seed)


def build_critic(cfg: ExperimentConfig, task: Task, seed: int) -> Mlp:
    with_actions = cfg.algorithm.name == "ddpg"
    f = critic_input_dim(task.n_agents, task.obs_dim, task.action_dim, cfg.algorithm.centralized_critic, with_actions)
    return Mlp([f, *cfg.model.critic_hidden, 1], rng_stream(seed, "init/critic"))


def _finish_iteration(policy: DiCoPolicySet, batch: RolloutBatch) -> float:
    # refresh the estimate on the whole iteration's O, then report the scaled policies' SND on it
    O = batch.observation_set()
    policy.update_estimate(O)
    return policy.measure_snd(O)


def train_seed(cfg: ExperimentConfig, seed: int, out_dir=None, progress=None) -> TrainReport:
    """Train one seed; writes metrics.csv (and checkpoints) under ``out_dir`` when given."""
    task = cfg.make_task()
    a, dc = cfg.algorithm, cfg.dico
    policy = build_policy(cfg, task, seed)
    critic = build_critic(cfg, task, seed)
    explore = rng_stream(seed, "exploration")
    minibatch = rng_stream(seed, "minibatch")
    overflow_w = dc.overflow_weight if dc.overflow_penalty else 0.0
    n_envs, frames = cfg.n_envs, 0
    report = TrainReport(seed=seed, policy=policy, critic=critic)
    if a.name == "ppo":
        actor_opt = Adam(policy.parameters(), a.lr_actor)
        critic_opt = Adam(critic.parameters(), a.lr_critic)
    else:
        learner = OffPolicyLearner.create(policy, critic, task.action_bounds, a.lr_actor, a.lr_critic,
                                          a.centralized_critic)
        buffer = ReplayBuffer(a.buffer_size, task.n_agents, task.obs_dim, task.action_dim)
    n_iters = cfg.n_iters
    opts = (actor_opt, critic_opt) if a.name == "ppo" else (learner.actor_opt, learner.critic_opt)
    base_lrs = (a.lr_actor, a.lr_critic)
    for it in range(n_iters):
        t0 = time.perf_counter()
        frac = it / max(n_iters - 1, 1)
        for opt, lr in zip(opts, base_lrs):
            opt.lr = lr * (1.0 - (1.0 - a.lr_final_fraction) * frac)
        seeds = iteration_env_seeds(seed, it, n_envs)
        if a.name == "ppo":
            batch = collect_rollout(task, policy, n_envs, explore, seeds, critic=critic,
                                    centralized=a.centralized_critic)
            stats = ppo_update(policy, critic, batch, actor_opt, critic_opt, minibatch, clip_eps=a.clip_eps,
                               epochs=a.epochs, minibatch_size=a.minibatch_size, gamma=a.gamma,
                               lam=a.gae_lambda, max_grad_norm=a.max_grad_norm, entropy_coef=a.entropy_coef,
                               centralized=a.centralized_critic, overflow_weight=overflow_w)
        else:
            noise = a.noise_std + (a.noise_final_std - a.noise_std) * frac
            batch = collect_rollout(task, policy, n_envs, explore, seeds, noise_std=noise)
            buffer.add_batch(batch)
            runs = []
            if len(buffer) >= max(a.batch_size, a.warmup_frames):
                for _ in range(a.updates_per_iter):
                    runs.append(ddpg_update(learner, buffer, minibatch, a.batch_size, a.gamma, a.tau_target,
                                            a.max_grad_norm, overflow_w))
            stats = {k: float(np.mean([r[k] for r in runs])) if runs else 0.0
                     for k in ("actor_loss", "critic_loss", "overflow_penalty")}
        frames += n_envs * batch.horizon
        snd_measured = _finish_iteration(policy, batch)
        st = IterationStats(it, frames, float(batch.rewards.mean()), snd_measured, stats["actor_loss"],
                            stats["critic_loss"], stats["overflow_penalty"], time.perf_counter() - t0)
        report.stats.append(st)
        if progress is not None:
            progress(seed, st)
    if out_dir is not None:
        report.out_dir = write_seed_outputs(report, out_dir, cfg.run.save_checkpoints)
    return report


def write_metrics_csv(stats, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for st in stats:
            w.writerow(st.row())


def read_metrics_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no metric rows")
    return {c: np.array([float(r[c]) for r in rows]) for c in METRIC_COLUMNS}


def write_seed_outputs(report: TrainReport, out_dir, checkpoints: bool = True) -> Path:
    d = Path(out_dir) / f"seed_{report.seed}"
    d.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(report.stats, d / "metrics.csv")
    if checkpoints:
        report.policy.save(d / "policy.npz")
        save_mlp(report.critic, d / "critic.npz")
    return d


def load_seed_report(run_dir, seed: int) -> TrainReport:
    """Rebuild a finished seed from its metrics CSV and policy checkpoint (no critic, no wall time)."""
    d = Path(run_dir) / f"seed_{seed}"
    cols = read_metrics_csv(d / "metrics.csv")
    stats = [IterationStats(int(cols["iteration"][k]), int(cols["frames"][k]),
                            *(float(cols[c][k]) for c in METRIC_COLUMNS[2:]))
             for k in range(len(cols["iteration"]))]
    policy = DiCoPolicySet.load(d / "policy.npz") if (d / "policy.npz").exists() else None
    return TrainReport(seed=seed, stats=stats, policy=policy, out_dir=d)


def _train_job(args):
    cfg, seed, out_dir = args
    rep = train_seed(cfg, seed, out_dir)
    rep.critic = None
    return rep


def train(cfg: ExperimentConfig, out_dir=None, jobs: int | None = None) -> list[TrainReport]:
    """Train every configured seed, optionally in parallel worker processes."""
    jobs = jobs or cfg.run.jobs
    work = [(cfg, s, out_dir) for s in cfg.run.seeds]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_train_job, work))
    return [train_seed(cfg, s, out_dir) for s in cfg.run.seeds]


# --- evaluation -------------------------------------------------------------------

@dataclass
class EvalResult:
    returns: np.ndarray          # (episodes,) episode sum of the agent-mean reward
    mean_reward: float           # mean instantaneous reward
    all_food_eaten: np.ndarray | None = None
    trajectory: list | None = None


def evaluate(cfg: ExperimentConfig, policy: DiCoPolicySet, episodes: int | None = None, seed: int = 0,
             record: bool = False) -> EvalResult:
    """Deterministic (mean-action) episodes on held-out environment seeds."""
    task = cfg.make_task()
    episodes = episodes or cfg.run.eval_episodes
    seeds = iteration_env_seeds(seed, 0, episodes, purpose="eval")
    traj = [] if record else None
    det = policy.copy()
    state, obs = task.reset(seeds=seeds)
    lo, hi = task.action_bounds
    rewards = []
    while state.t < state.horizon:
        mu, _ = det.act(obs.transpose(1, 0, 2))
        a = np.clip(mu, lo, hi).transpose(1, 0, 2)
        t = state.t
        res = task.step(state, a)
        if traj is not None:
            traj.extend(trajectory_rows(state, t, a, res.rewards))
        rewards.append(res.rewards)
        obs = res.obs
    r = np.stack(rewards)                                      # (T, E, n)
    eaten = state.eaten.all(axis=1) if state.eaten is not None else None
    return EvalResult(r.mean(axis=2).sum(axis=0), float(r.mean()), eaten, traj)


def write_eval_outputs(result: EvalResult, out_dir) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    if result.trajectory is not None:
        write_trajectory_csv(result.trajectory, d / "trajectory.csv")
    with open(d / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "return", "all_food_eaten"])
        for k, ret in enumerate(result.returns):
            flag = "" if result.all_food_eaten is None else int(result.all_food_eaten[k])
            w.writerow([k, repr(float(ret)), flag])


def final_reward(report: TrainReport, fraction: float = 0.1) -> float:
    """Mean training reward over the last ``fraction`` of iterations (at least one)."""
    r = report.column("mean_reward")
    k = max(1, int(round(len(r) * fraction)))
    return float(r[-k:].mean())
