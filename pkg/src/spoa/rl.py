"""Reward, replay buffer, update rules and the episodic training loop.

Each episode refills a fixed-capacity buffer with uniformly sampled state
pairs, then runs three update phases in order: actor-only, policy-only, and
the combined update whose raw gradient is the disjoint union of the two
parts computed on one frozen parameter snapshot.

Gradient conventions: the actor gradient returned by :func:`actor_update`
is the ascent direction on the buffer-mean reward scaled by the fixed
constant 1/2 (the factor 2 of the squared-error derivative is absorbed into
the step size); the policy gradient is the buffer mean of
``reward * d(log confidence)/d(theta_p)``.  Adam applies both with separate
moment states that persist across phases and episodes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import NonFiniteError, ShapeError
from .networks import (ActorTrace, NetworkConfig, ParameterSet, actor_apply, actor_forward,
                       init_parameters, policy_graph, policy_prob)
from .optim import AdamState, adam_step


@dataclass
class StatePair:
    """Initial state (upsampled LR) and goal state (HR patch), both in [0,1]."""

    s0: np.ndarray
    s_star: np.ndarray
    id: int = 0


@dataclass
class ReplayBuffer:
    capacity: int = 10
    items: list = field(default_factory=list)

    def fill(self, dataset, rng):
        """Refill from scratch with uniform-with-replacement draws."""
        if not dataset:
            raise ValueError("cannot fill replay buffer from an empty dataset")
        idx = rng.integers(0, len(dataset), size=self.capacity)
        self.items = [dataset[i] for i in idx]
        return self


@dataclass
class TrainConfig:
    episodes: int = 2000
    buffer_size: int = 10
    actor_reps: int = 1
    policy_reps: int = 1
    spoa_reps: int = 1
    alpha: float = 1e-4
    beta: float = 1e-7
    epsilon_ball: float = 0.02
    gamma: float = 0.99  # recorded for MDP fidelity; the single terminal reward never discounts
    seed: int = 0
    checkpoint_every: int = 500
    log_timing: bool = False

    def validate(self):
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if min(self.actor_reps, self.policy_reps, self.spoa_reps) < 1:
            raise ValueError("update repetition counts must be >= 1")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("step sizes must be > 0")
        if self.epsilon_ball <= 0:
            raise ValueError("epsilon_ball must be > 0")
        if self.buffer_size < 1:
            raise ValueError("buffer_size must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        return self


@dataclass
class EpisodeRecord:
    episode: int
    mean_reward: float
    windowed_reward: float
    mean_pi: float
    success_count: int
    duration: float


class TrainingDivergedError(RuntimeError):
    """A non-finite value surfaced during training; carries the episode index."""

    def __init__(self, episode, cause):
        super().__init__(f"non-finite value in episode {episode}: {cause}")
        self.episode = episode


# ---------------------------------------------------------------------------
# reward
# ---------------------------------------------------------------------------

def reward(s_hat, s_star) -> float:
    """Negative mean squared error; zero iff the states are identical."""
    s_hat = np.asarray(s_hat, dtype=np.float64)
    s_star = np.asarray(s_star, dtype=np.float64)
    if s_hat.shape != s_star.shape:
        raise ShapeError(f"reward shape mismatch: {s_hat.shape} vs {s_star.shape}")
    return -float(np.mean(np.square(s_hat - s_star)))


def within_epsilon(s_hat, s_star, eps) -> bool:
    """Goal-proximity bookkeeping: mean squared error strictly below eps^2."""
    if eps <= 0:
        raise ValueError(f"epsilon must be > 0, got {eps}")
    return float(np.mean(np.square(np.asarray(s_hat) - np.asarray(s_star)))) < eps * eps


def _per_item_rewards(s_hat_batch, s_star_batch):
    d = s_hat_batch - s_star_batch
    return -np.square(d).reshape(d.shape[0], -1).mean(axis=1)


# ---------------------------------------------------------------------------
# raw gradients
# ---------------------------------------------------------------------------

def _pairs(buffer):
    items = buffer.items if isinstance(buffer, ReplayBuffer) else list(buffer)
    if not items:
        raise ValueError("update called with an empty buffer")
    return items


def _stack(items):
    s0 = np.stack([p.s0 for p in items])
    s_star = np.stack([p.s_star for p in items])
    return s0, s_star


def _collect_grads(param_vars, names, like):
    out = {}
    for n in names:
        v = param_vars[n]
        out[n] = v.grad if v.grad is not None else np.zeros_like(like[n])
    return out


def _check_grads_finite(grads, what):
    for name, g in grads.items():
        if not np.isfinite(np.sum(g)):
            raise NonFiniteError(f"{what} gradient for {name} is non-finite")


def actor_raw_gradient(params: ParameterSet, s0_batch, s_star_batch, trace: ActorTrace = None):
    """Buffer-averaged ascent gradient on the feature+actor parameters.

    Seeds the recorded actor trace with ``-(arrived - goal) / n`` per pair,
    which is exactly half the gradient of the buffer-mean reward.
    """
    if trace is None:
        trace = actor_forward(s0_batch, params)
    s_hat = trace.arrived
    b = s_hat.shape[0]
    n = s_hat[0].size
    seed = -(s_hat - s_star_batch) / (n * b)
    ad.backward(trace.output, seed)
    grads = _collect_grads(trace.param_vars, params.theta_fa, params.values)
    _check_grads_finite(grads, "actor")
    return grads, s_hat


def policy_raw_gradient(params: ParameterSet, s_hat_batch, s_star_batch):
    """Buffer mean of reward-weighted log-confidence gradients on theta_p."""
    rewards = _per_item_rewards(s_hat_batch, s_star_batch)
    b = rewards.shape[0]
    ptrace = policy_graph(s_hat_batch, s_star_batch, params)
    loss = ad.weighted_sum(ptrace.log_pi, rewards / b)
    ad.backward(loss, 1.0)
    grads = _collect_grads(ptrace.param_vars, params.theta_p, params.values)
    _check_grads_finite(grads, "policy")
    return grads, rewards, ptrace.pi


def _apply_ascent(params, grads, state, lr):
    # Adam is descent-form; pass negated gradients to ascend.
    part = params.subset(grads.keys())
    adam_step(part, {k: -g for k, g in grads.items()}, state, lr)


# ---------------------------------------------------------------------------
# the three update operations
# ---------------------------------------------------------------------------

def actor_update(buffer, params: ParameterSet, adam_fa: AdamState, alpha: float,
                 _trace: ActorTrace = None):
    """One ascent step on theta_fa; returns the raw averaged gradient."""
    items = _pairs(buffer)
    s0, s_star = _stack(items)
    grads, _ = actor_raw_gradient(params, s0, s_star, _trace)
    _apply_ascent(params, grads, adam_fa, alpha)
    return grads


def policy_update(buffer, params: ParameterSet, adam_p: AdamState, beta: float,
                  _s_hat=None):
    """One ascent step on theta_p with the actor parameters held fixed."""
    items = _pairs(buffer)
    s0, s_star = _stack(items)
    s_hat = actor_apply(s0, params) if _s_hat is None else _s_hat
    grads, _, _ = policy_raw_gradient(params, s_hat, s_star)
    _apply_ascent(params, grads, adam_p, beta)
    return grads


def spoa_update(buffer, params: ParameterSet, adam_fa: AdamState, adam_p: AdamState,
                alpha: float, beta: float, _trace: ActorTrace = None):
    """Combined step: both raw gradients on one frozen snapshot, then both applied.

    The returned dict is the disjoint-partition union of the policy and
    actor gradients; parameter spaces do not overlap, so the combined update
    is literally their concatenation.
    """
    items = _pairs(buffer)
    s0, s_star = _stack(items)
    if _trace is None:
        _trace = actor_forward(s0, params)
    grads_fa, s_hat = actor_raw_gradient(params, s0, s_star, _trace)
    grads_p, _, _ = policy_raw_gradient(params, s_hat, s_star)
    combined = {**grads_p, **grads_fa}
    _apply_ascent(params, grads_fa, adam_fa, alpha)
    _apply_ascent(params, grads_p, adam_p, beta)
    return combined


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

def _episode_rng(seed, episode):
    return np.random.default_rng([seed, episode])


def run_episode(dataset, params: ParameterSet, adam_fa: AdamState, adam_p: AdamState,
                config: TrainConfig, episode: int) -> EpisodeRecord:
    """One episode: refill buffer, actor/policy/combined phases, then log.

    The logged reward, confidence and success count are measured after the
    final update of the episode.
    """
    t0 = time.perf_counter()
    rng = _episode_rng(config.seed, episode)
    buffer = ReplayBuffer(config.buffer_size).fill(dataset, rng)
    s0, s_star = _stack(buffer.items)

    for _ in range(config.actor_reps):
        actor_update(buffer, params, adam_fa, config.alpha)
    # theta_fa is frozen from here to the combined phase, so the traced
    # forward computed for the policy phase can be reused by spoa_update.
    trace = actor_forward(s0, params)
    for rep in range(config.policy_reps):
        policy_update(buffer, params, adam_p, config.beta,
                      _s_hat=trace.arrived if rep == 0 else None)
    for rep in range(config.spoa_reps):
        spoa_update(buffer, params, adam_fa, adam_p, config.alpha, config.beta,
                    _trace=trace if rep == 0 else None)

    s_hat = actor_apply(s0, params)
    rewards = _per_item_rewards(s_hat, s_star)
    pi = policy_prob(s_hat, s_star, params)
    eps_sq = config.epsilon_ball ** 2
    success = int(np.sum(-rewards < eps_sq))
    return EpisodeRecord(
        episode=episode,
        mean_reward=float(rewards.mean()),
        windowed_reward=float("nan"),
        mean_pi=float(np.mean(pi)),
        success_count=success,
        duration=time.perf_counter() - t0,
    )


def forward_windowed(values, window=10):
    """values[i] averaged over the forward window [i, i+window), tail-truncated."""
    values = list(values)
    return [float(np.mean(values[i:i + window])) for i in range(len(values))]


@dataclass
class TrainResult:
    params: ParameterSet
    records: list
    adam_fa: AdamState
    adam_p: AdamState


def train(dataset, net_config: NetworkConfig, config: TrainConfig,
          checkpoint_path=None, resume_from=None, progress=None) -> TrainResult:
    """Run the full episode loop; returns final parameters and the log.

    Per-episode randomness derives from (seed, episode index), so a run
    resumed from a checkpoint retraces the uninterrupted run exactly.
    Checkpoints are written every ``checkpoint_every`` episodes and at the
    end when ``checkpoint_path`` is given.
    """
    config.validate()
    if not dataset and config.episodes > 0:
        raise ValueError("cannot train on an empty dataset")
    if resume_from is not None:
        params, adam_fa, adam_p, start = load_training_state(resume_from, net_config)
    else:
        params = init_parameters(net_config, config.seed)
        adam_fa, adam_p = AdamState(), AdamState()
        start = 0
    _ensure_moments(params, adam_fa, adam_p)

    records = []
    for episode in range(start, config.episodes):
        try:
            rec = run_episode(dataset, params, adam_fa, adam_p, config, episode)
        except NonFiniteError as exc:
            raise TrainingDivergedError(episode, exc) from exc
        records.append(rec)
        if progress is not None:
            progress(rec)
        if checkpoint_path and config.checkpoint_every > 0 \
                and (episode + 1) % config.checkpoint_every == 0:
            save_training_state(checkpoint_path, params, adam_fa, adam_p, episode + 1)
    windowed = forward_windowed([r.mean_reward for r in records])
    for rec, w in zip(records, windowed):
        rec.windowed_reward = w
    if checkpoint_path:
        save_training_state(checkpoint_path, params, adam_fa, adam_p, config.episodes)
    return TrainResult(params, records, adam_fa, adam_p)


def write_training_log(records, path, log_timing=False):
    """CSV log with the forward-windowed reward column.

    Wall-clock durations are written only when ``log_timing`` is set;
    otherwise the column is zeroed so logs are byte-reproducible.
    """
    lines = ["episode,mean_reward,windowed_reward,mean_pi,success_count,duration_s"]
    for r in records:
        dur = f"{r.duration:.3f}" if log_timing else "0.000"
        lines.append(f"{r.episode},{r.mean_reward!r},{r.windowed_reward!r},"
                     f"{r.mean_pi!r},{r.success_count},{dur}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoint bundles (parameters + Adam state + episode counter)
# ---------------------------------------------------------------------------

def _ensure_moments(params, adam_fa, adam_p):
    for n in params.theta_fa:
        adam_fa._ensure(n, params.values[n])
    for n in params.theta_p:
        adam_p._ensure(n, params.values[n])


def save_training_state(path, params: ParameterSet, adam_fa: AdamState,
                        adam_p: AdamState, episode: int):
    _ensure_moments(params, adam_fa, adam_p)
    tensors = {}
    for name, val in params.values.items():
        tensors[f"param/{name}"] = val
    for tag, state in (("adam_fa", adam_fa), ("adam_p", adam_p)):
        for name in sorted(state.m):
            tensors[f"{tag}/m/{name}"] = state.m[name]
            tensors[f"{tag}/v/{name}"] = state.v[name]
        tensors[f"{tag}/t"] = np.array(float(state.step_count))
    tensors["meta/episode"] = np.array(float(episode))
    ckpt.save_tensors(path, tensors)


def load_training_state(path, net_config: NetworkConfig):
    """Restore (params, adam_fa, adam_p, episode) from a checkpoint bundle."""
    tensors = ckpt.load_tensors(path)
    params = ParameterSet(net_config)
    shapes = params.block_shapes()
    for name, shape in shapes.items():
        key = f"param/{name}"
        if key not in tensors:
            raise ckpt.CheckpointError(f"{path}: missing tensor {key}")
        params.values[name] = tensors[key].reshape(shape)
    states = {}
    for tag in ("adam_fa", "adam_p"):
        state = AdamState()
        state.step_count = int(tensors[f"{tag}/t"].reshape(()))
        for name in shapes:
            mkey = f"{tag}/m/{name}"
            if mkey in tensors:
                state.m[name] = tensors[mkey].reshape(shapes[name])
                state.v[name] = tensors[f"{tag}/v/{name}"].reshape(shapes[name])
        states[tag] = state
    episode = int(tensors["meta/episode"].reshape(()))
    return params, states["adam_fa"], states["adam_p"], episode


def load_parameters(path, net_config: NetworkConfig) -> ParameterSet:
    params, _, _, _ = load_training_state(path, net_config)
    return params
