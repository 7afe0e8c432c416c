"""Spectrum-sharing MDP for K V2V agents reusing M V2I sub-bands.

Each step covers one fading coherence interval: agents pick a sub-band and
a transmit power, SINRs and Shannon rates follow from the current gain
tensor, payloads are decremented, and a shared global reward mixes the
V2I sum rate with per-agent V2V progress.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .geochannel import (
    GainTensor,
    PropagationParams,
    Scene,
    ShadowingState,
    channel_snapshot,
    pair_v2v,
    redraw_small_scale,
)


def dbm_to_mw(p_dbm: float) -> float:
    return 10.0 ** (p_dbm / 10.0)


@dataclass(frozen=True)
class NetworkConfig:
    """Radio and reward constants for one experiment."""

    m_count: int = 4
    k_count: int = 4
    bandwidth_hz: float = 4e6
    fc_hz: float = 2e9
    v2i_power_dbm: float = 23.0
    power_levels_dbm: tuple[float, ...] = (23.0, 15.0, 5.0, -100.0)
    noise_dbm: float = -114.0
    payload_bytes: float = 2 * 1060
    budget_ms: float = 100.0
    coherence_ms: float = 1.0
    beta: float = 10.0
    lambda_c: float = 0.1
    lambda_d: float = 0.9
    v2i_rate_scale: float = 0.1  # reward units per Mbps of V2I rate

    def __post_init__(self):
        if self.m_count < 1 or self.k_count < 1:
            raise ValueError("need at least one V2I and one V2V link")
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth must be positive")
        if any(b >= a for a, b in zip(self.power_levels_dbm, self.power_levels_dbm[1:])):
            raise ValueError("power levels must be strictly decreasing")
        if self.lambda_c < 0 or self.lambda_d < 0:
            raise ValueError("reward weights must be non-negative")
        if self.beta <= 0:
            raise ValueError("delivery bonus must be positive")
        if self.coherence_ms <= 0 or (self.budget_ms % self.coherence_ms) > 1e-9:
            raise ValueError("coherence interval must divide the time budget")
        if self.payload_bytes <= 0:
            raise ValueError("payload must be positive")

    @property
    def n_power(self) -> int:
        return len(self.power_levels_dbm)

    @property
    def n_actions(self) -> int:
        return self.m_count * self.n_power

    @property
    def n_steps(self) -> int:
        return int(round(self.budget_ms / self.coherence_ms))

    @property
    def obs_dim(self) -> int:
        return 5 * self.m_count + 4

    @property
    def payload_bits(self) -> float:
        return self.payload_bytes * 8.0

    @property
    def noise_mw(self) -> float:
        return dbm_to_mw(self.noise_dbm)

    @functools.cached_property
    def _power_levels(self) -> np.ndarray:
        arr = np.asarray(self.power_levels_dbm, dtype=float)
        arr.setflags(write=False)
        return arr


@dataclass(frozen=True)
class Action:
    """Sub-band index plus power level index, flat-encoded row-major."""

    sub_band: int
    power_level: int

    def flat(self, n_power: int = 4) -> int:
        return self.sub_band * n_power + self.power_level

    @classmethod
    def from_flat(cls, a: int, n_power: int = 4) -> "Action":
        if a < 0:
            raise ValueError(f"negative action index {a}")
        return cls(sub_band=a // n_power, power_level=a % n_power)


def decode_actions(joint_action, cfg: NetworkConfig) -> tuple[np.ndarray, np.ndarray]:
    """Joint action (flat indices or Action objects) -> (bands, power indices)."""
    if isinstance(joint_action, np.ndarray) or not any(isinstance(a, Action) for a in joint_action):
        flat = np.asarray(joint_action, dtype=int)
        if flat.shape != (cfg.k_count,):
            raise ValueError(f"expected {cfg.k_count} actions, got shape {flat.shape}")
        if flat.min() < 0 or flat.max() >= cfg.n_actions:
            raise ValueError(f"action index outside [0, {cfg.n_actions})")
        return flat // cfg.n_power, flat % cfg.n_power
    acts = list(joint_action)
    if len(acts) != cfg.k_count:
        raise ValueError(f"expected {cfg.k_count} actions, got {len(acts)}")
    bands = np.empty(cfg.k_count, dtype=int)
    p_idx = np.empty(cfg.k_count, dtype=int)
    for i, a in enumerate(acts):
        if isinstance(a, Action):
            bands[i], p_idx[i] = a.sub_band, a.power_level
        else:
            a = int(a)
            if not 0 <= a < cfg.n_actions:
                raise ValueError(f"action index {a} outside [0, {cfg.n_actions})")
            bands[i], p_idx[i] = a // cfg.n_power, a % cfg.n_power
    if np.any(bands < 0) or np.any(bands >= cfg.m_count) or np.any(p_idx >= cfg.n_power):
        raise ValueError("action component out of range")
    return bands, p_idx


# ---------------------------------------------------------------------------
# SINR / rate primitives


def v2i_sinr(m: int, bands, powers_dbm, gains: GainTensor, cfg: NetworkConfig) -> float:
    """Linear SINR of the m-th V2I uplink under the given V2V allocation."""
    interference = 0.0
    for k in range(gains.k_count):
        if bands[k] == m:
            interference += dbm_to_mw(powers_dbm[k]) * gains.v2v_to_bs[k, m]
    signal = dbm_to_mw(cfg.v2i_power_dbm) * gains.v2i_direct[m]
    return signal / (cfg.noise_mw + interference)


def v2v_interference(k: int, m: int, bands, powers_dbm, gains: GainTensor, cfg: NetworkConfig) -> float:
    """Interference power (mW) at V2V receiver k on sub-band m."""
    total = dbm_to_mw(cfg.v2i_power_dbm) * gains.v2i_to_v2v[m, k]
    for kk in range(gains.k_count):
        if kk != k and bands[kk] == m:
            total += dbm_to_mw(powers_dbm[kk]) * gains.v2v_cross[kk, k, m]
    return total


def v2v_sinr(k: int, m: int, bands, powers_dbm, gains: GainTensor, cfg: NetworkConfig) -> float:
    """Linear SINR of V2V link k transmitting on sub-band m."""
    signal = dbm_to_mw(powers_dbm[k]) * gains.v2v_direct[k, m]
    return signal / (cfg.noise_mw + v2v_interference(k, m, bands, powers_dbm, gains, cfg))


def link_rate(sinr: float, bandwidth_hz: float):
    """Shannon rate in bit/s for a linear SINR."""
    return bandwidth_hz * np.log2(1.0 + sinr)


def v2v_reward(rate_bps: float, remaining_bits: float, cfg: NetworkConfig) -> float:
    """Per-agent V2V reward: rate in Mbps while undelivered, beta afterwards."""
    if remaining_bits <= 0:
        return cfg.beta
    return rate_bps / 1e6


def global_reward(v2i_rates_bps, v2v_rewards, cfg: NetworkConfig) -> float:
    """Weighted sum of the V2I term (scaled Mbps) and the V2V reward terms."""
    v2i_units = float(np.sum(v2i_rates_bps)) / 1e6 * cfg.v2i_rate_scale
    return cfg.lambda_c * v2i_units + cfg.lambda_d * float(np.sum(v2v_rewards))


def _interference_matrix_mw(bands, powers_mw, gains: GainTensor, cfg: NetworkConfig) -> np.ndarray:
    """Interference (without noise) each receiver k would measure on every band."""
    meas = dbm_to_mw(cfg.v2i_power_dbm) * gains.v2i_to_v2v.T.copy()  # (K, M)
    for kk in range(cfg.k_count):
        b = bands[kk]
        meas[:, b] += powers_mw[kk] * gains.v2v_cross[kk, :, b]
    return meas


# ---------------------------------------------------------------------------
# episode state and dynamics


@dataclass
class EpisodeState:
    """Mutable per-episode bookkeeping, owned by a single rollout."""

    cfg: NetworkConfig
    gains: GainTensor
    pairs: list
    t: int = 0
    cum_bits: np.ndarray = field(default=None)
    delivered_ms: np.ndarray = field(default=None)  # NaN until delivered
    prev_interference_mw: np.ndarray = field(default=None)  # (K, M), includes noise
    last_bands: np.ndarray = field(default=None)  # -1 before the first step
    eps_fp: float = 0.0
    iter_frac: float = 0.0

    def __post_init__(self):
        k, m = self.cfg.k_count, self.cfg.m_count
        if self.cum_bits is None:
            self.cum_bits = np.zeros(k)
        if self.delivered_ms is None:
            self.delivered_ms = np.full(k, np.nan)
        if self.prev_interference_mw is None:
            self.prev_interference_mw = np.full((k, m), self.cfg.noise_mw)
        if self.last_bands is None:
            self.last_bands = np.full(k, -1, dtype=int)

    @property
    def delivered(self) -> np.ndarray:
        return self.cum_bits >= self.cfg.payload_bits

    @property
    def remaining_bits(self) -> np.ndarray:
        return self.cfg.payload_bits - self.cum_bits

    @property
    def done(self) -> bool:
        return self.t >= self.cfg.n_steps or bool(np.all(self.delivered))


@dataclass(frozen=True)
class StepOutcome:
    v2i_rates_bps: np.ndarray  # (M,)
    v2v_rates_bps: np.ndarray  # (K,)
    v2v_rewards: np.ndarray  # (K,)
    reward: float
    observations: np.ndarray  # (K, 5M+4)
    done: bool
    delivered: np.ndarray  # (K,) after this step


_DB_FLOOR = -1e3  # stands in for log of an empty aggregate


def _to_db(x: np.ndarray) -> np.ndarray:
    out = np.full(x.shape, _DB_FLOOR)
    pos = x > 0
    out[pos] = 10.0 * np.log10(x[pos])
    return out


def _normalize_db(x_db: np.ndarray) -> np.ndarray:
    return np.clip((x_db + 120.0) / 60.0, 0.0, 2.0)


def build_observations(state: EpisodeState) -> np.ndarray:
    """All agents' observation vectors, stacked to (K, 5M+4)."""
    cfg, g = state.cfg, state.gains
    k, m = cfg.k_count, cfg.m_count
    obs = np.empty((k, cfg.obs_dim))
    lin = obs[:, : 5 * m]
    lin[:, 0:m] = g.v2v_direct
    lin[:, m:2 * m] = g.v2v_to_bs
    lin[:, 2 * m:3 * m] = g.v2i_to_v2v.T
    lin[:, 3 * m:4 * m] = g.v2v_cross.sum(axis=0)
    lin[:, 4 * m:5 * m] = state.prev_interference_mw
    pos = lin > 0
    lin[pos] = 10.0 * np.log10(lin[pos])
    lin[~pos] = _DB_FLOOR
    np.clip((lin + 120.0) / 60.0, 0.0, 2.0, out=lin)
    obs[:, 5 * m] = np.clip(state.remaining_bits, 0.0, None) / cfg.payload_bits
    obs[:, 5 * m + 1] = (cfg.n_steps - state.t) / cfg.n_steps
    obs[:, 5 * m + 2] = state.eps_fp
    obs[:, 5 * m + 3] = state.iter_frac
    return obs


def build_observation(k: int, state: EpisodeState, eps: float, iter_frac: float) -> np.ndarray:
    """Observation of agent k with explicit fingerprint inputs."""
    saved = state.eps_fp, state.iter_frac
    state.eps_fp, state.iter_frac = eps, iter_frac
    try:
        return build_observations(state)[k]
    finally:
        state.eps_fp, state.iter_frac = saved


def env_reset(
    scene: Scene,
    cfg: NetworkConfig,
    eps_fp: float,
    iter_frac: float,
    rng: np.random.Generator,
    *,
    prop: PropagationParams | None = None,
    shadow: ShadowingState | None = None,
    pairs: list | None = None,
) -> tuple[EpisodeState, np.ndarray]:
    """Start an episode: full payloads, fresh pairing and channel snapshot."""
    prop = prop or PropagationParams()
    if shadow is None:
        shadow = ShadowingState.from_params(prop)
    if pairs is None:
        pairs = pair_v2v(scene, cfg.k_count)
    gains = channel_snapshot(scene, pairs, cfg.m_count, shadow, rng, cfg.fc_hz, prop)
    state = EpisodeState(cfg=cfg, gains=gains, pairs=pairs, eps_fp=eps_fp, iter_frac=iter_frac)
    return state, build_observations(state)


def env_step(state: EpisodeState, joint_action, rng: np.random.Generator) -> StepOutcome:
    """Advance one coherence interval under the joint action.

    Agents whose payload is already delivered are forced to the lowest
    (silent) power level; the small-scale fading is redrawn for the next
    interval after rates are computed.
    """
    cfg, g = state.cfg, state.gains
    if state.t >= cfg.n_steps:
        raise ValueError("episode time budget already exhausted")
    bands, p_idx = decode_actions(joint_action, cfg)
    delivered_start = state.delivered

    powers_dbm = cfg._power_levels[p_idx]
    powers_dbm[delivered_start] = cfg.power_levels_dbm[-1]
    powers_mw = 10.0 ** (powers_dbm / 10.0)

    # V2I uplinks: interference from co-channel V2V transmitters
    own_to_bs = g.v2v_to_bs[np.arange(cfg.k_count), bands]
    i_v2i = np.bincount(bands, weights=powers_mw * own_to_bs, minlength=cfg.m_count)
    sinr_v2i = dbm_to_mw(cfg.v2i_power_dbm) * g.v2i_direct / (cfg.noise_mw + i_v2i)
    v2i_rates = cfg.bandwidth_hz * np.log2(1.0 + sinr_v2i)

    # V2V links on their chosen bands
    meas = _interference_matrix_mw(bands, powers_mw, g, cfg)  # (K, M), no noise
    i_v2v = meas[np.arange(cfg.k_count), bands]
    sinr_v2v = powers_mw * g.v2v_direct[np.arange(cfg.k_count), bands] / (cfg.noise_mw + i_v2v)
    v2v_rates = cfg.bandwidth_hz * np.log2(1.0 + sinr_v2v)

    rewards = np.where(delivered_start, cfg.beta, v2v_rates / 1e6)
    reward = global_reward(v2i_rates, rewards, cfg)

    # payload accounting: one canonical accumulator per agent
    delta_bits = v2v_rates * (cfg.coherence_ms / 1000.0)
    state.cum_bits = np.where(delivered_start, state.cum_bits, state.cum_bits + delta_bits)
    newly = ~delivered_start & (state.cum_bits >= cfg.payload_bits)
    state.delivered_ms[newly] = (state.t + 1) * cfg.coherence_ms

    state.prev_interference_mw = meas + cfg.noise_mw
    state.last_bands = bands
    state.t += 1
    state.gains = redraw_small_scale(g, rng)

    return StepOutcome(
        v2i_rates_bps=v2i_rates,
        v2v_rates_bps=v2v_rates,
        v2v_rewards=rewards,
        reward=reward,
        observations=build_observations(state),
        done=state.done,
        delivered=state.delivered.copy(),
    )
