"""Geometry-driven mobility and radio channel model.

Vehicles move on a Manhattan street grid (or come from an imported trace
file), every transmitter/receiver pair is classified by geometric
obstruction (line of sight, blocked by vehicles, blocked by buildings or
foliage), and each directed link gets a large-scale gain (path loss plus
spatially correlated shadowing) and a per-sub-band exponential small-scale
fading component.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT = 3.0e8  # m/s

OBSTACLE_KINDS = ("building", "foliage")


class LinkClass(Enum):
    """Obstruction class of a directed radio link."""

    LOS = "los"
    NLOSV = "nlosv"
    NLOSB = "nlosb"


@dataclass(frozen=True)
class PropagationParams:
    """Per-class path loss and shadowing constants.

    The class ordering LOS <= NLOSv <= NLOSb must hold for both the
    exponent and the extra attenuation so that obstruction never helps.
    """

    exponent: dict[LinkClass, float] = field(
        default_factory=lambda: {LinkClass.LOS: 2.0, LinkClass.NLOSV: 2.55, LinkClass.NLOSB: 2.9}
    )
    extra_loss_db: dict[LinkClass, float] = field(
        default_factory=lambda: {LinkClass.LOS: 0.0, LinkClass.NLOSV: 6.0, LinkClass.NLOSB: 15.0}
    )
    shadow_sigma_db: dict[LinkClass, float] = field(
        default_factory=lambda: {LinkClass.LOS: 3.3, LinkClass.NLOSV: 3.8, LinkClass.NLOSB: 4.1}
    )
    decorrelation_m: float = 25.0
    min_distance_m: float = 1.0


@dataclass(frozen=True)
class Vehicle:
    vid: int | str
    x: float
    y: float
    heading: float = 0.0
    length: float = 4.5
    width: float = 1.8

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Obstacle:
    oid: int | str
    kind: str
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if self.kind not in OBSTACLE_KINDS:
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError(f"degenerate obstacle rectangle {self.oid!r}")


def _vid_key(vid):
    return (0, vid, "") if isinstance(vid, int) else (1, 0, str(vid))


@dataclass(frozen=True)
class Scene:
    """Positions and outlines of everything at one time instant."""

    time_ms: float
    vehicles: tuple[Vehicle, ...]
    obstacles: tuple[Obstacle, ...] = ()
    bs_position: tuple[float, float] = (0.0, 0.0)
    bs_elevated: bool = True

    def __post_init__(self):
        ids = [v.vid for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate vehicle ids in scene")
        coords = [c for v in self.vehicles for c in (v.x, v.y, v.heading)]
        coords += list(self.bs_position)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError("non-finite coordinate in scene")

    def vehicles_by_id(self) -> list[Vehicle]:
        return sorted(self.vehicles, key=lambda v: _vid_key(v.vid))

    def vehicle(self, vid) -> Vehicle:
        for v in self.vehicles:
            if v.vid == vid:
                return v
        raise KeyError(vid)


@dataclass(frozen=True)
class TraceSet:
    """Scenes sampled at a fixed period, same vehicle set throughout."""

    scenes: tuple[Scene, ...]
    period_ms: float

    def __post_init__(self):
        if not self.scenes:
            raise ValueError("no snapshots")
        times = [s.time_ms for s in self.scenes]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("snapshot times not strictly increasing")
        for a, b in zip(times, times[1:]):
            if not math.isclose(b - a, self.period_ms, rel_tol=0, abs_tol=1e-6):
                raise ValueError("non-uniform sampling period")
        ids0 = {v.vid for v in self.scenes[0].vehicles}
        for s in self.scenes[1:]:
            if {v.vid for v in s.vehicles} != ids0:
                raise ValueError("vehicle id set changes across snapshots")

    def __len__(self) -> int:
        return len(self.scenes)

    @property
    def duration_ms(self) -> float:
        return self.scenes[-1].time_ms - self.scenes[0].time_ms

    def with_static(self, obstacles=None, bs_position=None, bs_elevated=None) -> "TraceSet":
        """Return a copy with obstacles/base-station attached to every scene."""
        scenes = []
        for s in self.scenes:
            scenes.append(
                Scene(
                    time_ms=s.time_ms,
                    vehicles=s.vehicles,
                    obstacles=tuple(obstacles) if obstacles is not None else s.obstacles,
                    bs_position=tuple(bs_position) if bs_position is not None else s.bs_position,
                    bs_elevated=s.bs_elevated if bs_elevated is None else bs_elevated,
                )
            )
        return TraceSet(scenes=tuple(scenes), period_ms=self.period_ms)


# ---------------------------------------------------------------------------
# geometry predicates


def _segment_hits_rect(x0, y0, x1, y1, xmin, ymin, xmax, ymax) -> bool:
    """Liang-Barsky clip: does the closed segment meet the closed rectangle."""
    t0, t1 = 0.0, 1.0
    dx, dy = x1 - x0, y1 - y0
    for p, q in ((-dx, x0 - xmin), (dx, xmax - x0), (-dy, y0 - ymin), (dy, ymax - y0)):
        if p == 0.0:
            if q < 0.0:
                return False
        else:
            r = q / p
            if p < 0.0:
                if r > t1:
                    return False
                if r > t0:
                    t0 = r
            else:
                if r < t0:
                    return False
                if r < t1:
                    t1 = r
    return True


def _segment_hits_any_rect(x0, y0, x1, y1, rects: np.ndarray) -> bool:
    """Vectorized Liang-Barsky against an (N, 4) array of [xmin ymin xmax ymax]."""
    if rects.size == 0:
        return False
    dx, dy = x1 - x0, y1 - y0
    with np.errstate(divide="ignore", invalid="ignore"):
        if dx != 0.0:
            ta = (rects[:, 0] - x0) / dx
            tb = (rects[:, 2] - x0) / dx
            tx_lo, tx_hi = np.minimum(ta, tb), np.maximum(ta, tb)
        else:
            inside = (rects[:, 0] <= x0) & (x0 <= rects[:, 2])
            tx_lo = np.where(inside, -np.inf, np.inf)
            tx_hi = np.where(inside, np.inf, -np.inf)
        if dy != 0.0:
            ta = (rects[:, 1] - y0) / dy
            tb = (rects[:, 3] - y0) / dy
            ty_lo, ty_hi = np.minimum(ta, tb), np.maximum(ta, tb)
        else:
            inside = (rects[:, 1] <= y0) & (y0 <= rects[:, 3])
            ty_lo = np.where(inside, -np.inf, np.inf)
            ty_hi = np.where(inside, np.inf, -np.inf)
    enter = np.maximum(np.maximum(tx_lo, ty_lo), 0.0)
    leave = np.minimum(np.minimum(tx_hi, ty_hi), 1.0)
    return bool(np.any(enter <= leave))


def _vehicle_blocks(veh: Vehicle, x0, y0, x1, y1) -> bool:
    """Segment vs the vehicle's heading-oriented footprint rectangle."""
    c, s = math.cos(veh.heading), math.sin(veh.heading)
    # rotate segment into the vehicle frame (x along heading)
    ax = c * (x0 - veh.x) + s * (y0 - veh.y)
    ay = -s * (x0 - veh.x) + c * (y0 - veh.y)
    bx = c * (x1 - veh.x) + s * (y1 - veh.y)
    by = -s * (x1 - veh.x) + c * (y1 - veh.y)
    hl, hw = veh.length / 2.0, veh.width / 2.0
    return _segment_hits_rect(ax, ay, bx, by, -hl, -hw, hl, hw)


def _footprint_contains(veh: Vehicle, x, y) -> bool:
    c, s = math.cos(veh.heading), math.sin(veh.heading)
    lx = c * (x - veh.x) + s * (y - veh.y)
    ly = -s * (x - veh.x) + c * (y - veh.y)
    return abs(lx) <= veh.length / 2.0 and abs(ly) <= veh.width / 2.0


def _obstacle_rects(scene: Scene) -> np.ndarray:
    if not scene.obstacles:
        return np.empty((0, 4))
    return np.array([[o.xmin, o.ymin, o.xmax, o.ymax] for o in scene.obstacles])


def classify_link(tx, rx, scene: Scene, *, to_bs: bool = False, _rects: np.ndarray | None = None) -> LinkClass:
    """Classify the directed link tx -> rx by geometric obstruction.

    Buildings and foliage dominate vehicles; links terminating at an
    elevated base station are never blocked by vehicles. Vehicles whose
    footprint contains an endpoint (the communicating vehicles themselves)
    do not obstruct.
    """
    x0, y0 = float(tx[0]), float(tx[1])
    x1, y1 = float(rx[0]), float(rx[1])
    if x0 == x1 and y0 == y1:
        raise ValueError("coincident link endpoints")
    rects = _obstacle_rects(scene) if _rects is None else _rects
    if _segment_hits_any_rect(x0, y0, x1, y1, rects):
        return LinkClass.NLOSB
    if to_bs and scene.bs_elevated:
        return LinkClass.LOS
    for veh in scene.vehicles:
        if _footprint_contains(veh, x0, y0) or _footprint_contains(veh, x1, y1):
            continue
        if _vehicle_blocks(veh, x0, y0, x1, y1):
            return LinkClass.NLOSV
    return LinkClass.LOS


# ---------------------------------------------------------------------------
# large-scale and small-scale fading


def free_space_loss_1m_db(fc_hz: float) -> float:
    return 20.0 * math.log10(4.0 * math.pi * 1.0 * fc_hz / SPEED_OF_LIGHT)


def large_scale_gain_db(
    tx,
    rx,
    link_class: LinkClass,
    fc_hz: float,
    prop: PropagationParams | None = None,
    shadowing_db: float = 0.0,
) -> float:
    """Large-scale power gain in dB (negative of path loss, plus shadowing).

    Distance is clamped below at ``prop.min_distance_m`` to avoid the
    singularity at zero range.
    """
    prop = prop or PropagationParams()
    dx, dy = float(rx[0]) - float(tx[0]), float(rx[1]) - float(tx[1])
    if not (math.isfinite(dx) and math.isfinite(dy)):
        raise ValueError("non-finite link endpoint")
    d = max(math.hypot(dx, dy), prop.min_distance_m)
    pl = (
        free_space_loss_1m_db(fc_hz)
        + 10.0 * prop.exponent[link_class] * math.log10(d)
        + prop.extra_loss_db[link_class]
    )
    return -pl + shadowing_db


@dataclass
class ShadowingState:
    """Spatially correlated log-normal shadowing, one value per directed link.

    Correlation decays as exp(-d/d_c) in the mean displacement of the two
    endpoints between consecutive updates.
    """

    sigma_db: dict[LinkClass, float]
    decorrelation_m: float
    values: dict = field(default_factory=dict)
    last_pos: dict = field(default_factory=dict)

    @classmethod
    def from_params(cls, prop: PropagationParams) -> "ShadowingState":
        return cls(sigma_db=dict(prop.shadow_sigma_db), decorrelation_m=prop.decorrelation_m)

    def update(self, link, tx, rx, link_class: LinkClass, rng: np.random.Generator) -> float:
        if self.decorrelation_m <= 0:
            raise ValueError("decorrelation distance must be positive")
        sigma = self.sigma_db[link_class]
        tx = (float(tx[0]), float(tx[1]))
        rx = (float(rx[0]), float(rx[1]))
        if link not in self.values:
            value = sigma * rng.standard_normal()
        else:
            otx, orx = self.last_pos[link]
            delta = 0.5 * (math.hypot(tx[0] - otx[0], tx[1] - otx[1]) + math.hypot(rx[0] - orx[0], rx[1] - orx[1]))
            rho = math.exp(-delta / self.decorrelation_m)
            value = rho * self.values[link] + math.sqrt(1.0 - rho * rho) * sigma * rng.standard_normal()
        self.values[link] = value
        self.last_pos[link] = (tx, rx)
        return value


def update_shadowing(shadow: ShadowingState, link, tx, rx, link_class: LinkClass, rng) -> float:
    """Advance one link's shadowing process and return the new value in dB."""
    return shadow.update(link, tx, rx, link_class, rng)


_TINY = np.finfo(float).tiny


def sample_small_scale(rng: np.random.Generator, size=None):
    """Unit-mean exponential fading power, strictly positive."""
    h = rng.exponential(1.0, size)
    return np.maximum(h, _TINY) if size is not None else max(h, _TINY)


# ---------------------------------------------------------------------------
# link selection and the per-interval gain tensor


def pair_v2v(scene: Scene, k: int) -> list[tuple]:
    """Pair the first K vehicles (by id) each with its nearest free vehicle.

    Receivers are drawn greedily, in transmitter index order, from the
    vehicles that are not transmitters and not yet taken.
    """
    vehicles = scene.vehicles_by_id()
    if len(vehicles) < 2 * k:
        raise ValueError(f"need at least {2 * k} vehicles to pair {k} V2V links, have {len(vehicles)}")
    txs = vehicles[:k]
    pool = list(vehicles[k:])
    pairs = []
    for tx in txs:
        j = min(range(len(pool)), key=lambda i: (math.hypot(pool[i].x - tx.x, pool[i].y - tx.y), i))
        pairs.append((tx.vid, pool[j].vid))
        pool.pop(j)
    return pairs


@dataclass(frozen=True)
class GainTensor:
    """All channel gains for one coherence interval.

    Linear gains decompose as ``10**(alpha_db/10) * h`` elementwise. The
    large-scale part is flat across sub-bands; small-scale fading is
    independent per link and sub-band. The diagonal of the cross-V2V
    arrays is zero padding, not a link.
    """

    m_count: int
    k_count: int
    # large-scale gains, dB
    alpha_v2i_db: np.ndarray  # (M,)   V2I tx m -> BS
    alpha_v2v_db: np.ndarray  # (K,)   V2V tx k -> V2V rx k
    alpha_v2v_bs_db: np.ndarray  # (K,)   V2V tx k -> BS
    alpha_v2i_v2v_db: np.ndarray  # (M, K) V2I tx m -> V2V rx k
    alpha_cross_db: np.ndarray  # (K, K) V2V tx k' -> V2V rx k
    # small-scale fading power, unit mean
    h_v2i: np.ndarray  # (M,)     on own sub-band m
    h_v2v: np.ndarray  # (K, M)
    h_v2v_bs: np.ndarray  # (K, M)
    h_v2i_v2v: np.ndarray  # (M, K)   on sub-band m
    h_cross: np.ndarray  # (K, K, M)
    # linear power gains, products of the two components above
    v2i_direct: np.ndarray = field(init=False)
    v2v_direct: np.ndarray = field(init=False)
    v2v_to_bs: np.ndarray = field(init=False)
    v2i_to_v2v: np.ndarray = field(init=False)
    v2v_cross: np.ndarray = field(init=False)

    def __post_init__(self):
        lin = lambda a, h: 10.0 ** (a / 10.0) * h
        object.__setattr__(self, "v2i_direct", lin(self.alpha_v2i_db, self.h_v2i))
        object.__setattr__(self, "v2v_direct", lin(self.alpha_v2v_db[:, None], self.h_v2v))
        object.__setattr__(self, "v2v_to_bs", lin(self.alpha_v2v_bs_db[:, None], self.h_v2v_bs))
        object.__setattr__(self, "v2i_to_v2v", lin(self.alpha_v2i_v2v_db, self.h_v2i_v2v))
        object.__setattr__(self, "v2v_cross", lin(self.alpha_cross_db[:, :, None], self.h_cross))
        for name in (
            "alpha_v2i_db", "alpha_v2v_db", "alpha_v2v_bs_db", "alpha_v2i_v2v_db", "alpha_cross_db",
            "h_v2i", "h_v2v", "h_v2v_bs", "h_v2i_v2v", "h_cross",
            "v2i_direct", "v2v_direct", "v2v_to_bs", "v2i_to_v2v", "v2v_cross",
        ):
            getattr(self, name).setflags(write=False)

    def check(self) -> "GainTensor":
        """Enforce positivity/finiteness of every real link's linear gain."""
        off = ~np.eye(self.k_count, dtype=bool)
        checks = [
            self.v2i_direct,
            self.v2v_direct,
            self.v2v_to_bs,
            self.v2i_to_v2v,
            self.v2v_cross[off],
        ]
        for arr in checks:
            if arr.size and not (np.all(np.isfinite(arr)) and np.all(arr > 0)):
                raise ValueError("non-positive or non-finite linear gain")
        return self


def _draw_h(rng, shape) -> np.ndarray:
    return np.maximum(rng.exponential(1.0, shape), _TINY)


def channel_snapshot(
    scene: Scene,
    pairs: list[tuple],
    m_count: int,
    shadow: ShadowingState,
    rng: np.random.Generator,
    fc_hz: float,
    prop: PropagationParams | None = None,
) -> GainTensor:
    """Build the full gain tensor for one coherence interval.

    The first M vehicles (by id) act as the V2I transmitters. Large-scale
    gains are shared per directed endpoint pair, so a vehicle that is both
    a V2I and a V2V transmitter sees one consistent geometry; small-scale
    fading is drawn independently per tensor entry.
    """
    prop = prop or PropagationParams()
    vehicles = scene.vehicles_by_id()
    if len(vehicles) < m_count:
        raise ValueError(f"scene has {len(vehicles)} vehicles, need {m_count} V2I transmitters")
    k_count = len(pairs)
    pos = {v.vid: (v.x, v.y) for v in vehicles}
    for tx, rx in pairs:
        if pos[tx] == pos[rx]:
            raise ValueError(f"V2V pair {tx!r}->{rx!r} has coincident positions")

    v2i_txs = [v.vid for v in vehicles[:m_count]]
    v2v_txs = [p[0] for p in pairs]
    v2v_rxs = [p[1] for p in pairs]
    bs = tuple(scene.bs_position)
    rects = _obstacle_rects(scene)

    # unique directed endpoint pairs, in a canonical order for rng stability
    keys = []
    seen = set()
    for tx in v2i_txs + v2v_txs:
        for rx in ["BS"] + v2v_rxs:
            key = (tx, rx)
            if key not in seen:
                seen.add(key)
                keys.append(key)
    alpha = {}
    for tx, rx in keys:
        txp = pos[tx]
        rxp = bs if rx == "BS" else pos[rx]
        if txp == rxp:
            # self-channel of a dual-role vehicle: strongest class, clamped range
            cls = LinkClass.LOS
        else:
            cls = classify_link(txp, rxp, scene, to_bs=(rx == "BS"), _rects=rects)
        sh = shadow.update((tx, rx), txp, rxp, cls, rng)
        if txp == rxp:
            d_gain = -free_space_loss_1m_db(fc_hz)  # d clamped to 1 m
            alpha[(tx, rx)] = d_gain + sh
        else:
            alpha[(tx, rx)] = large_scale_gain_db(txp, rxp, cls, fc_hz, prop, sh)

    a_v2i = np.array([alpha[(t, "BS")] for t in v2i_txs])
    a_v2v = np.array([alpha[(t, r)] for t, r in pairs])
    a_v2v_bs = np.array([alpha[(t, "BS")] for t in v2v_txs])
    a_v2i_v2v = np.array([[alpha[(t, r)] for r in v2v_rxs] for t in v2i_txs])
    a_cross = np.zeros((k_count, k_count))
    for i, t in enumerate(v2v_txs):
        for j, r in enumerate(v2v_rxs):
            if i != j:
                a_cross[i, j] = alpha[(t, r)]

    return GainTensor(
        m_count=m_count,
        k_count=k_count,
        alpha_v2i_db=a_v2i,
        alpha_v2v_db=a_v2v,
        alpha_v2v_bs_db=a_v2v_bs,
        alpha_v2i_v2v_db=a_v2i_v2v,
        alpha_cross_db=a_cross,
        h_v2i=_draw_h(rng, m_count),
        h_v2v=_draw_h(rng, (k_count, m_count)),
        h_v2v_bs=_draw_h(rng, (k_count, m_count)),
        h_v2i_v2v=_draw_h(rng, (m_count, k_count)),
        h_cross=_mask_cross(_draw_h(rng, (k_count, k_count, m_count))),
    ).check()


def _mask_cross(h: np.ndarray) -> np.ndarray:
    k = h.shape[0]
    h[np.eye(k, dtype=bool)] = 0.0
    return h


def redraw_small_scale(gains: GainTensor, rng: np.random.Generator) -> GainTensor:
    """New coherence interval: fresh small-scale fading, same large-scale part."""
    m, k = gains.m_count, gains.k_count
    return GainTensor(
        m_count=m,
        k_count=k,
        alpha_v2i_db=gains.alpha_v2i_db,
        alpha_v2v_db=gains.alpha_v2v_db,
        alpha_v2v_bs_db=gains.alpha_v2v_bs_db,
        alpha_v2i_v2v_db=gains.alpha_v2i_v2v_db,
        alpha_cross_db=gains.alpha_cross_db,
        h_v2i=_draw_h(rng, m),
        h_v2v=_draw_h(rng, (k, m)),
        h_v2v_bs=_draw_h(rng, (k, m)),
        h_v2i_v2v=_draw_h(rng, (m, k)),
        h_cross=_mask_cross(_draw_h(rng, (k, k, m))),
    )


# ---------------------------------------------------------------------------
# mobility: built-in grid generator and trace file ingestion

_DIRS = {"E": (1, 0), "W": (-1, 0), "N": (0, 1), "S": (0, -1)}
_OPP = {"E": "W", "W": "E", "N": "S", "S": "N"}
_HEADING = {"E": 0.0, "N": math.pi / 2, "W": math.pi, "S": -math.pi / 2}


class _GridWalker:
    """One vehicle walking a rectangular street grid at constant speed."""

    def __init__(self, x, y, direction, extent_x, extent_y, block):
        self.x, self.y = x, y
        self.direction = direction
        self.ex, self.ey = extent_x, extent_y
        self.block = block

    def _next_node(self):
        b = self.block
        if self.direction == "E":
            return math.floor(self.x / b + 1) * b, self.y
        if self.direction == "W":
            return math.ceil(self.x / b - 1) * b, self.y
        if self.direction == "N":
            return self.x, math.floor(self.y / b + 1) * b
        return self.x, math.ceil(self.y / b - 1) * b

    def _options(self, x, y):
        out = []
        for d, (sx, sy) in _DIRS.items():
            if d == _OPP[self.direction]:
                continue
            if 0 <= x + sx * self.block <= self.ex and 0 <= y + sy * self.block <= self.ey:
                out.append(d)
        return out or [_OPP[self.direction]]

    def advance(self, dist, rng):
        while dist > 1e-9:
            nx, ny = self._next_node()
            gap = abs(nx - self.x) + abs(ny - self.y)
            if dist < gap:
                sx, sy = _DIRS[self.direction]
                self.x += sx * dist
                self.y += sy * dist
                return
            self.x, self.y = nx, ny
            dist -= gap
            opts = self._options(nx, ny)
            self.direction = opts[rng.integers(len(opts))]


def generate_grid_traces(
    area: tuple[float, float],
    n_vehicles: int,
    speed_mps: float,
    duration_ms: float,
    period_ms: float,
    seed: int,
    *,
    block_m: float = 50.0,
    street_margin_m: float = 6.0,
    building_fill: float = 1.0,
    vehicle_length: float = 4.5,
    vehicle_width: float = 1.8,
    bs_position: tuple[float, float] | None = None,
) -> TraceSet:
    """Generate vehicles driving a Manhattan grid of ``block_m`` blocks.

    City blocks are filled with building rectangles inset by the street
    margin (a random subset when ``building_fill < 1``), and the base
    station sits at the area centroid unless overridden. Deterministic
    for a given seed.
    """
    w, hgt = float(area[0]), float(area[1])
    if w <= 0 or hgt <= 0:
        raise ValueError("area must have positive extent")
    if n_vehicles < 1:
        raise ValueError("need at least one vehicle")
    if speed_mps <= 0:
        raise ValueError("speed must be positive")
    if period_ms <= 0:
        raise ValueError("sampling period must be positive")
    if duration_ms < 0 or (duration_ms % period_ms) > 1e-9:
        raise ValueError("sampling period must divide the duration")
    nx, ny = int(w // block_m), int(hgt // block_m)
    if nx < 1 or ny < 1:
        raise ValueError("area smaller than one grid block")
    ex, ey = nx * block_m, ny * block_m

    rng = np.random.default_rng(seed)

    obstacles = []
    for i in range(nx):
        for j in range(ny):
            if building_fill >= 1.0 or rng.random() < building_fill:
                obstacles.append(
                    Obstacle(
                        oid=f"b{i}_{j}",
                        kind="building",
                        xmin=i * block_m + street_margin_m,
                        ymin=j * block_m + street_margin_m,
                        xmax=(i + 1) * block_m - street_margin_m,
                        ymax=(j + 1) * block_m - street_margin_m,
                    )
                )
    obstacles = tuple(obstacles)
    bs = tuple(bs_position) if bs_position is not None else (ex / 2.0, ey / 2.0)

    walkers = []
    for _ in range(n_vehicles):
        direction = ("E", "W", "N", "S")[rng.integers(4)]
        if direction in ("E", "W"):
            y = float(rng.integers(ny + 1)) * block_m
            x = float(rng.uniform(0, ex))
        else:
            x = float(rng.integers(nx + 1)) * block_m
            y = float(rng.uniform(0, ey))
        walkers.append(_GridWalker(x, y, direction, ex, ey, block_m))

    n_steps = int(round(duration_ms / period_ms))
    step_m = speed_mps * period_ms / 1000.0
    scenes = []
    for step in range(n_steps + 1):
        if step > 0:
            for wk in walkers:
                wk.advance(step_m, rng)
        vehicles = tuple(
            Vehicle(vid=i, x=wk.x, y=wk.y, heading=_HEADING[wk.direction],
                    length=vehicle_length, width=vehicle_width)
            for i, wk in enumerate(walkers)
        )
        scenes.append(
            Scene(time_ms=step * period_ms, vehicles=vehicles, obstacles=obstacles,
                  bs_position=bs, bs_elevated=True)
        )
    return TraceSet(scenes=tuple(scenes), period_ms=period_ms)


TRACE_COLUMNS = ("t_ms", "vehicle_id", "x_m", "y_m", "heading_rad")
OBSTACLE_COLUMNS = ("id", "kind", "xmin_m", "ymin_m", "xmax_m", "ymax_m")


def _parse_vid(raw: str):
    raw = raw.strip()
    return int(raw) if raw.lstrip("-").isdigit() else raw


def load_traces(path) -> TraceSet:
    """Load a TraceSet from the trace CSV format.

    Rows must be grouped by non-decreasing timestamp at a uniform sampling
    period, with the same vehicle ids present in every snapshot.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("no snapshots") from None
        header = [c.strip() for c in header]
        missing = [c for c in TRACE_COLUMNS if c not in header]
        if missing:
            raise ValueError(f"missing columns: {', '.join(missing)}")
        col = {c: header.index(c) for c in TRACE_COLUMNS}

        groups: list[tuple[float, int, list[Vehicle]]] = []  # (t, first line, vehicles)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                t = float(row[col["t_ms"]])
                veh = Vehicle(
                    vid=_parse_vid(row[col["vehicle_id"]]),
                    x=float(row[col["x_m"]]),
                    y=float(row[col["y_m"]]),
                    heading=float(row[col["heading_rad"]]),
                )
            except (ValueError, IndexError) as exc:
                raise ValueError(f"bad trace row at line {lineno}: {exc}") from None
            if groups and t == groups[-1][0]:
                groups[-1][2].append(veh)
            elif groups and t < groups[-1][0]:
                raise ValueError(f"non-monotone timestamps at line {lineno}")
            else:
                groups.append((t, lineno, [veh]))

    if not groups:
        raise ValueError("no snapshots")
    if len(groups) > 1:
        period = groups[1][0] - groups[0][0]
        for (ta, _, _), (tb, ln, _) in zip(groups, groups[1:]):
            if not math.isclose(tb - ta, period, rel_tol=0, abs_tol=1e-6):
                raise ValueError(f"non-uniform sampling period at line {ln}")
    else:
        period = 1.0
    ids0 = {v.vid for v in groups[0][2]}
    for t, ln, vehicles in groups:
        ids = {v.vid for v in vehicles}
        if len(ids) != len(vehicles):
            raise ValueError(f"duplicate vehicle id in snapshot at line {ln}")
        if ids != ids0:
            raise ValueError(f"vehicle id set changes in snapshot at line {ln}")

    centroid = (
        float(np.mean([v.x for _, _, vs in groups for v in vs])),
        float(np.mean([v.y for _, _, vs in groups for v in vs])),
    )
    scenes = tuple(
        Scene(
            time_ms=t,
            vehicles=tuple(sorted(vehicles, key=lambda v: _vid_key(v.vid))),
            bs_position=centroid,
        )
        for t, _, vehicles in groups
    )
    return TraceSet(scenes=scenes, period_ms=period)


def load_obstacles(path) -> tuple[Obstacle, ...]:
    """Load the obstacle CSV (id, kind, bounding box in meters)."""
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [c.strip() for c in next(reader)]
        except StopIteration:
            return ()
        missing = [c for c in OBSTACLE_COLUMNS if c not in header]
        if missing:
            raise ValueError(f"missing columns: {', '.join(missing)}")
        col = {c: header.index(c) for c in OBSTACLE_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                out.append(
                    Obstacle(
                        oid=row[col["id"]].strip(),
                        kind=row[col["kind"]].strip(),
                        xmin=float(row[col["xmin_m"]]),
                        ymin=float(row[col["ymin_m"]]),
                        xmax=float(row[col["xmax_m"]]),
                        ymax=float(row[col["ymax_m"]]),
                    )
                )
            except ValueError as exc:
                raise ValueError(f"bad obstacle row at line {lineno}: {exc}") from None
    return tuple(out)
