"""Multi-agent training and evaluation for the spectrum-sharing task.

Every V2V link runs its own Q-network over local observations carrying an
exploration-rate/iteration fingerprint, all agents share the global
reward, and targets come from a periodically synced copy of each online
network. Three loss variants are supported: plain deep Q-learning, the
double estimator that picks the bootstrap action with the online network,
and the double estimator regularized toward a frozen expert's Q-values.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .env import NetworkConfig, env_reset, env_step
from .evalkit import RunMetrics
from .geochannel import PropagationParams, ShadowingState, TraceSet
from .qnet import OptimizerState, QNetwork, backward, forward, init_network, rmsprop_step

log = logging.getLogger(__name__)


class Variant(str, Enum):
    DQN = "dqn"
    DDQN = "ddqn"
    DDQN_TQL = "ddqn_tql"


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    terminal: bool


class ReplayMemory:
    """Bounded FIFO of transitions with uniform minibatch sampling."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._obs = np.empty((capacity, obs_dim))
        self._next_obs = np.empty((capacity, obs_dim))
        self._action = np.empty(capacity, dtype=int)
        self._reward = np.empty(capacity)
        self._terminal = np.empty(capacity, dtype=bool)
        self._size = 0
        self._head = 0

    def __len__(self) -> int:
        return self._size

    def push(self, obs, action, reward, next_obs, terminal) -> None:
        i = self._head
        self._obs[i] = obs
        self._next_obs[i] = next_obs
        self._action[i] = action
        self._reward[i] = reward
        self._terminal[i] = terminal
        self._head = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def push_transition(self, tr: Transition) -> None:
        self.push(tr.obs, tr.action, tr.reward, tr.next_obs, tr.terminal)

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Uniform sample without replacement; shrinks to the stored size."""
        if self._size == 0:
            raise ValueError("replay memory is empty")
        n = min(batch_size, self._size)
        idx = rng.choice(self._size, size=n, replace=False)
        return (
            self._obs[idx],
            self._action[idx],
            self._reward[idx],
            self._next_obs[idx],
            self._terminal[idx],
        )

    def as_arrays(self):
        """Stored transitions (unspecified order), for inspection."""
        n = self._size
        return (
            self._obs[:n].copy(),
            self._action[:n].copy(),
            self._reward[:n].copy(),
            self._next_obs[:n].copy(),
            self._terminal[:n].copy(),
        )


@dataclass
class TrainSchedule:
    """Episode count, exploration annealing, and optimizer hyperparameters."""

    episodes: int = 3000
    eps_start: float = 1.0
    eps_end: float = 0.02
    anneal_frac: float = 0.8
    target_sync_period: int = 500  # gradient steps
    largescale_refresh_episodes: int = 100
    gamma: float = 0.95
    batch_size: int = 512
    updates_per_episode: int = 1
    replay_capacity: int = 100_000
    learning_rate: float = 1e-3
    rmsprop_decay: float = 0.99
    rmsprop_epsilon: float = 1e-8
    hidden_sizes: tuple[int, ...] = (256, 128, 64)
    transfer_weight: float = 0.5  # annealed linearly to zero over training

    def __post_init__(self):
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        for name in ("target_sync_period", "largescale_refresh_episodes", "batch_size",
                     "updates_per_episode", "replay_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.episodes < 0:
            raise ValueError("episode count must be >= 0")


def epsilon_at(episode: int, sched: TrainSchedule) -> float:
    """Linear annealing from eps_start to eps_end over the first anneal_frac."""
    cut = sched.anneal_frac * sched.episodes
    if episode >= cut or cut == 0:
        return sched.eps_end
    return sched.eps_start + (sched.eps_end - sched.eps_start) * (episode / cut)


def select_action(q_values: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy with lowest-index tie-breaking on the greedy branch."""
    q_values = np.asarray(q_values)
    if q_values.size == 0:
        raise ValueError("empty action-value vector")
    if rng.random() < eps:
        return int(rng.integers(q_values.size))
    return int(np.argmax(q_values))


@dataclass
class AgentBundle:
    """Everything one agent owns: networks, optimizer, and replay memory."""

    index: int
    online: QNetwork
    target: QNetwork
    opt: OptimizerState
    memory: ReplayMemory
    expert: QNetwork | None = None
    grad_steps: int = 0


def sync_target(bundle: AgentBundle) -> AgentBundle:
    bundle.target = bundle.online.copy()
    return bundle


# ---------------------------------------------------------------------------
# targets and losses


def dqn_target(transition: Transition, target_net: QNetwork, gamma: float) -> float:
    """Bellman target with max over the target network's values."""
    if transition.terminal:
        return float(transition.reward)
    q_next = forward(target_net, transition.next_obs)
    return float(transition.reward + gamma * np.max(q_next))


def ddqn_target(transition: Transition, online_net: QNetwork, target_net: QNetwork, gamma: float) -> float:
    """Double estimator: online network selects, target network evaluates."""
    if transition.terminal:
        return float(transition.reward)
    a_star = int(np.argmax(forward(online_net, transition.next_obs)))
    q_next = forward(target_net, transition.next_obs)
    return float(transition.reward + gamma * q_next[a_star])


def _batch_targets(variant, rewards, next_obs, terminal, online, target, gamma):
    if variant is Variant.DQN:
        boot = np.max(forward(target, next_obs), axis=1)
    else:
        a_star = np.argmax(forward(online, next_obs), axis=1)
        boot = forward(target, next_obs)[np.arange(len(a_star)), a_star]
    return rewards + gamma * np.where(terminal, 0.0, boot)


def loss_and_gradients(
    bundle: AgentBundle,
    batch,
    gamma: float,
    variant: Variant,
    transfer_weight: float = 0.0,
):
    """Squared-error loss on the variant's target plus, for the transfer
    variant, a squared residual against the frozen expert's Q-values.

    Gradients flow only through the online network; targets and the expert
    are treated as constants.
    """
    variant = Variant(variant)
    obs, actions, rewards, next_obs, terminal = batch
    if variant is Variant.DDQN_TQL and bundle.expert is None:
        raise ValueError("transfer variant requires a loaded expert network")
    n = len(actions)
    rows = np.arange(n)
    y = _batch_targets(variant, rewards, next_obs, terminal, bundle.online, bundle.target, gamma)
    q_all = forward(bundle.online, obs)
    q_sel = q_all[rows, actions]
    residual = q_sel - y
    loss = float(np.mean(residual**2))
    gy = np.zeros_like(q_all)
    gy[rows, actions] = 2.0 * residual
    if variant is Variant.DDQN_TQL and transfer_weight != 0.0:
        q_exp = forward(bundle.expert, obs)[rows, actions]
        expert_residual = q_sel - q_exp
        loss += transfer_weight * float(np.mean(expert_residual**2))
        gy[rows, actions] += 2.0 * transfer_weight * expert_residual
    return loss, backward(bundle.online, obs, gy)


# ---------------------------------------------------------------------------
# training loop


TRAIN_LOG_COLUMNS = ("episode", "epsilon", "mean_loss", "mean_reward", "v2i_sum_mbps",
                     "v2v_delivered_frac")


def _fmt(x) -> str:
    return f"{float(x):.10g}"


def write_train_log(path, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAIN_LOG_COLUMNS)
        for r in rows:
            w.writerow([int(r["episode"])] + [_fmt(r[c]) for c in TRAIN_LOG_COLUMNS[1:]])


def _make_bundles(cfg: NetworkConfig, sched: TrainSchedule, rng, expert_nets=None):
    sizes = (cfg.obs_dim, *sched.hidden_sizes, cfg.n_actions)
    bundles = []
    for k in range(cfg.k_count):
        net = init_network(sizes, rng)
        bundles.append(
            AgentBundle(
                index=k,
                online=net,
                target=net.copy(),
                opt=OptimizerState.for_network(
                    net, sched.learning_rate, sched.rmsprop_decay, sched.rmsprop_epsilon
                ),
                memory=ReplayMemory(sched.replay_capacity, cfg.obs_dim),
                expert=None if expert_nets is None else expert_nets[k],
            )
        )
    return bundles


def train(
    trace: TraceSet,
    cfg: NetworkConfig,
    sched: TrainSchedule,
    variant: Variant | str,
    seed: int,
    expert_nets: list[QNetwork] | None = None,
    prop: PropagationParams | None = None,
):
    """Train K agents on the trace; returns (bundles, per-episode log rows).

    The large-scale channel state advances to the next trace snapshot every
    ``largescale_refresh_episodes`` episodes (wrapping with a warning if the
    trace is too short); small-scale fading changes every step. Episodes run
    the full time budget, with delivered agents forced silent. Deterministic
    for a given seed.
    """
    variant = Variant(variant)
    if variant is Variant.DDQN_TQL and expert_nets is None:
        raise ValueError("transfer variant requires expert networks")
    if expert_nets is not None and len(expert_nets) != cfg.k_count:
        raise ValueError(f"expected {cfg.k_count} expert networks, got {len(expert_nets)}")
    prop = prop or PropagationParams()

    ss = np.random.SeedSequence([seed, 0])  # train and eval streams never overlap
    init_rng, env_rng, act_rng, sample_rng = [np.random.default_rng(s) for s in ss.spawn(4)]
    bundles = _make_bundles(cfg, sched, init_rng, expert_nets)
    shadow = ShadowingState.from_params(prop)

    episodes = sched.episodes
    needed = (max(episodes - 1, 0) // sched.largescale_refresh_episodes) + 1
    if episodes > 0 and needed > len(trace):
        log.warning(
            "trace provides %d snapshots but %d are needed; wrapping around",
            len(trace), needed,
        )

    rows = []
    denom = max(episodes - 1, 1)
    for episode in range(episodes):
        eps = epsilon_at(episode, sched)
        iter_frac = episode / denom
        w_e = sched.transfer_weight * (1.0 - iter_frac) if variant is Variant.DDQN_TQL else 0.0
        scene = trace.scenes[(episode // sched.largescale_refresh_episodes) % len(trace)]
        state, obs = env_reset(scene, cfg, eps, iter_frac, env_rng, prop=prop, shadow=shadow)

        reward_sum = 0.0
        v2i_sum = 0.0
        n_steps = cfg.n_steps
        for t in range(n_steps):
            actions = [
                select_action(forward(b.online, obs[k]), eps, act_rng)
                for k, b in enumerate(bundles)
            ]
            outcome = env_step(state, actions, env_rng)
            terminal = t == n_steps - 1
            for k, b in enumerate(bundles):
                b.memory.push(obs[k], actions[k], outcome.reward, outcome.observations[k], terminal)
            obs = outcome.observations
            reward_sum += outcome.reward
            v2i_sum += float(np.sum(outcome.v2i_rates_bps)) / 1e6

        losses = []
        for b in bundles:
            for _ in range(sched.updates_per_episode):
                batch = b.memory.sample(sched.batch_size, sample_rng)
                loss, grads = loss_and_gradients(b, batch, sched.gamma, variant, w_e)
                rmsprop_step(b.online, grads, b.opt)
                b.grad_steps += 1
                if b.grad_steps % sched.target_sync_period == 0:
                    sync_target(b)
                losses.append(loss)

        rows.append(
            {
                "episode": episode,
                "epsilon": eps,
                "mean_loss": float(np.mean(losses)),
                "mean_reward": reward_sum / n_steps,
                "v2i_sum_mbps": v2i_sum / n_steps,
                "v2v_delivered_frac": float(np.mean(state.delivered)),
            }
        )
    return bundles, rows


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    bundles: list[AgentBundle] | None,
    trace: TraceSet,
    cfg: NetworkConfig,
    n_episodes: int,
    seed: int,
    *,
    random_policy: bool = False,
    start_snapshot: int = 0,
    eps_fp: float = 0.02,
    iter_frac: float = 1.0,
    prop: PropagationParams | None = None,
    variant: str = "",
    config_digest: str = "",
    collect_observations: int = 0,
) -> RunMetrics:
    """Greedy evaluation over consecutive trace snapshots (one per episode).

    Fingerprint inputs stay frozen at the supplied training-final values;
    with ``random_policy`` actions are drawn uniformly and no network is
    evaluated. Episodes run the full time budget so V2I rates cover the
    whole evaluation phase.
    """
    if bundles is None and not random_policy:
        raise ValueError("need trained bundles unless running the random policy")
    prop = prop or PropagationParams()
    ss = np.random.SeedSequence([seed, 1])
    env_rng, act_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
    shadow = ShadowingState.from_params(prop)

    v2i_rates = np.empty(n_episodes)
    success = np.zeros((n_episodes, cfg.k_count), dtype=bool)
    delivery_ms = np.full((n_episodes, cfg.k_count), np.nan)
    obs_sample = [] if collect_observations > 0 else None

    for ep in range(n_episodes):
        scene = trace.scenes[(start_snapshot + ep) % len(trace)]
        state, obs = env_reset(scene, cfg, eps_fp, iter_frac, env_rng, prop=prop, shadow=shadow)
        v2i_acc = 0.0
        for _ in range(cfg.n_steps):
            if obs_sample is not None and len(obs_sample) < collect_observations:
                obs_sample.extend(obs)
            if random_policy:
                actions = act_rng.integers(cfg.n_actions, size=cfg.k_count)
            else:
                actions = [
                    select_action(forward(b.online, obs[k]), 0.0, act_rng)
                    for k, b in enumerate(bundles)
                ]
            outcome = env_step(state, actions, env_rng)
            obs = outcome.observations
            v2i_acc += float(np.sum(outcome.v2i_rates_bps))
        v2i_rates[ep] = v2i_acc / cfg.n_steps
        success[ep] = state.delivered
        delivery_ms[ep] = state.delivered_ms
        # cumulative bits must reconcile with the success flags, exactly
        assert np.array_equal(state.delivered, state.cum_bits >= cfg.payload_bits)

    return RunMetrics(
        variant=variant or ("random" if random_policy else "policy"),
        seed=seed,
        payload_bytes=cfg.payload_bytes,
        budget_ms=cfg.budget_ms,
        v2i_sum_rate_bps=v2i_rates,
        success=success,
        delivery_ms=delivery_ms,
        config_digest=config_digest,
        observations=None if obs_sample is None else np.array(obs_sample),
    )


def snapshots_consumed(episodes: int, refresh_period: int) -> int:
    """How many trace snapshots a training run of this length walks through."""
    if episodes <= 0:
        return 0
    return (episodes - 1) // refresh_period + 1


def collect_observations(trace, cfg, count, seed, *, prop=None) -> np.ndarray:
    """Observations gathered under the random policy, for held-out probes."""
    episodes = max(1, int(np.ceil(count / (cfg.k_count * cfg.n_steps))))
    metrics = evaluate(
        None, trace, cfg, episodes, seed,
        random_policy=True, prop=prop, collect_observations=count,
    )
    return metrics.observations[:count]


def mean_max_q(bundles: list[AgentBundle], observations: np.ndarray) -> float:
    """Mean over agents and observations of the greedy action value."""
    vals = [np.max(forward(b.online, observations), axis=1) for b in bundles]
    return float(np.mean(vals))
