"""Synthetic grid road networks with a known speed/volume relationship.

Volumes come from class demand profiles scaled by lane capacity, mixed with
the demand of upstream segments (so the direction of every maneuver
matters). Speeds follow a monotone congestion curve that stays flat at the
free-flow speed below a configurable utilisation threshold.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import substream
from .graph import (
    ONE_WAY,
    TWO_WAY,
    DualGraph,
    GraphError,
    Link,
    PrimalGraph,
    StaticAttrs,
    build_dual,
)

log = logging.getLogger(__name__)

T_SPEED = 96
T_VOLUME = 24
STEPS_PER_HOUR = T_SPEED // T_VOLUME


class SynthConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    rows: int = 5
    cols: int = 5
    oneway_prob: float = 0.3
    sensor_fraction: float = 0.3
    n_sensors: int = 0              # overrides sensor_fraction when > 0
    capacity_per_lane: float = 900.0
    bpr_alpha: float = 1.0
    bpr_beta: float = 1.0
    free_flow_ratio: float = 0.0    # utilisation below which speed stays at free-flow
    upstream_mix: float = 0.5
    demand_scale: float = 1.0
    node_jitter: float = 0.2
    speed_noise: float = 0.0        # km/h standard deviation
    volume_noise: float = 0.0       # relative standard deviation of observed counts
    noise_bound: float = 0.1
    missing_rate: float = 0.0
    raw_days: int = 0               # 0: seven weekday-averaged days; >0: that many raw days
    day_jitter: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise SynthConfigError(f"grid dimensions must be positive, got {self.rows}x{self.cols}")
        if not 0.0 < self.sensor_fraction <= 1.0:
            raise SynthConfigError("sensor_fraction must lie in (0, 1]")
        if not 0.0 <= self.oneway_prob <= 1.0:
            raise SynthConfigError("oneway_prob must lie in [0, 1]")
        if not 0.0 <= self.free_flow_ratio < 1.0:
            raise SynthConfigError("free_flow_ratio must lie in [0, 1)")
        if not 0.0 <= self.upstream_mix <= 1.0:
            raise SynthConfigError("upstream_mix must lie in [0, 1]")
        if not 0.0 <= self.missing_rate < 1.0:
            raise SynthConfigError("missing_rate must lie in [0, 1)")
        if self.demand_scale < 0:
            raise SynthConfigError("demand_scale must be non-negative")
        if self.bpr_alpha <= 0 or self.bpr_beta <= 0 or self.capacity_per_lane <= 0:
            raise SynthConfigError("congestion curve parameters must be positive")
        if not 0.0 <= self.node_jitter < 1.0:
            raise SynthConfigError("node_jitter must lie in [0, 1)")


# functional class -> (lane choices, speed limit choices)
CLASS_ROADS = {
    1: ((3, 4), (90, 110)),
    2: ((2, 3), (70, 90)),
    3: ((2,), (50, 70)),
    4: ((1, 2), (50,)),
    5: ((1,), (30, 50)),
}
CLASS_WEIGHTS = np.array([0.1, 0.2, 0.3, 0.2, 0.2])

# peak utilisation and (morning, midday, evening) activity per class
CLASS_SHAPE = {
    1: (0.85, 1.00, 0.35, 0.80),
    2: (0.80, 0.70, 0.45, 1.00),
    3: (0.70, 0.55, 0.60, 0.85),
    4: (0.60, 1.00, 0.30, 0.50),
    5: (0.45, 0.35, 0.70, 1.00),
}


def _bump(h: np.ndarray, centre: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((h - centre) / width) ** 2)


def class_profile(functional_class: int, weekday: int, steps: int = T_SPEED) -> np.ndarray:
    """Utilisation (volume / capacity) at quarter-hour resolution for one class and weekday."""
    peak, am, mid, pm = CLASS_SHAPE[int(functional_class)]
    h = (np.arange(steps) + 0.5) * 24.0 / steps
    if weekday % 7 < 5:
        am_gain = 1.1 if weekday % 7 == 0 else 1.0
        pm_gain = 1.15 if weekday % 7 == 4 else 1.0
        activity = (am * am_gain * _bump(h, 8.0, 1.0) + mid * _bump(h, 13.0, 2.5)
                    + pm * pm_gain * _bump(h, 17.5, 1.4))
    else:
        scale = 0.75 if weekday % 7 == 5 else 0.55
        activity = scale * (0.2 * am * _bump(h, 10.0, 1.5) + (0.6 + mid) * _bump(h, 14.0, 3.0)
                            + 0.5 * pm * _bump(h, 18.0, 2.0))
    base = 0.04 + 0.03 * _bump(h, 13.0, 6.0)
    shape = base + activity
    return peak * shape / shape.max()


def capacity(lanes, capacity_per_lane: float) -> np.ndarray:
    return np.asarray(lanes, dtype=np.float64) * capacity_per_lane


def speed_curve(utilisation, free_flow_speed, alpha: float, beta: float,
                free_flow_ratio: float = 0.0) -> np.ndarray:
    """Congested speed: ``ffs / (1 + alpha * excess**beta)`` with excess above the free-flow ratio."""
    x = np.asarray(utilisation, dtype=np.float64)
    excess = np.maximum(0.0, x - free_flow_ratio) / (1.0 - free_flow_ratio)
    return np.asarray(free_flow_speed) / (1.0 + alpha * excess ** beta)


def inverse_speed_curve(speed, free_flow_speed, alpha: float, beta: float,
                        free_flow_ratio: float = 0.0) -> np.ndarray:
    """Utilisation recovered from speed; exact wherever the speed is below free-flow."""
    ratio = np.maximum(np.asarray(free_flow_speed) / np.asarray(speed, dtype=np.float64) - 1.0, 0.0)
    return free_flow_ratio + (1.0 - free_flow_ratio) * (ratio / alpha) ** (1.0 / beta)


def hourly(rate: np.ndarray) -> np.ndarray:
    """Quarter-hour rates (..., 96) in veh/h -> hourly volumes (..., 24)."""
    return rate.reshape(rate.shape[:-1] + (T_VOLUME, STEPS_PER_HOUR)).mean(axis=-1)


# ---------------------------------------------------------------- network

def gen_network(cfg: SynthConfig) -> PrimalGraph:
    """Grid of intersections; every street line shares one functional class."""
    cfg.validate()
    rng = substream(cfg.seed, "network")
    names = [[f"n{i}_{j}" for j in range(cfg.cols)] for i in range(cfg.rows)]
    intersections = tuple(n for row in names for n in row)
    row_class = rng.choice(5, size=cfg.rows, p=CLASS_WEIGHTS) + 1
    col_class = rng.choice(5, size=cfg.cols, p=CLASS_WEIGHTS) + 1

    specs = []
    for i in range(cfg.rows):
        for j in range(cfg.cols - 1):
            specs.append((f"h{i}_{j}", names[i][j], names[i][j + 1], int(row_class[i])))
    for j in range(cfg.cols):
        for i in range(cfg.rows - 1):
            specs.append((f"v{i}_{j}", names[i][j], names[i + 1][j], int(col_class[j])))

    links = []
    for link_id, a, b, fc in specs:
        lane_opts, limit_opts = CLASS_ROADS[fc]
        lanes = int(rng.choice(lane_opts))
        limit = int(rng.choice(limit_opts))
        ffs = float(np.clip(limit * rng.uniform(0.75, 0.95), 10, 120))
        attrs = StaticAttrs(
            speed_limit=limit,
            lanes=lanes,
            length=float(np.round(rng.uniform(80.0, 600.0), 1)),
            free_flow_speed=round(ffs, 2),
            curvature=round(float(rng.uniform(0.0, 0.02)), 5),
            slope_percent=round(float(np.clip(rng.normal(0.0, 2.0), -100, 100)), 2),
            functional_class=fc,
        )
        direction = TWO_WAY
        if rng.random() < cfg.oneway_prob:
            direction = ONE_WAY
            if rng.random() < 0.5:
                a, b = b, a
        links.append(Link(link_id, a, b, direction, attrs))
    if not links:
        warnings.warn("grid has a single intersection and no links; the network is empty", stacklevel=2)
    return PrimalGraph(intersections, tuple(links))


# ---------------------------------------------------------------- traffic

def _node_jitter(dual: DualGraph, cfg: SynthConfig) -> np.ndarray:
    rng = substream(cfg.seed, "node-jitter")
    return rng.uniform(1.0 - cfg.node_jitter, 1.0 + cfg.node_jitter, size=dual.num_nodes)


def _upstream_mean(dual: DualGraph, values: np.ndarray) -> np.ndarray:
    """Mean of ``values`` over each node's predecessors; nodes without any keep their own value."""
    n = dual.num_nodes
    total = np.zeros_like(values)
    count = np.zeros(n)
    edges = dual.edges[dual.edges[:, 0] != dual.edges[:, 1]] if dual.edges.size else dual.edges
    if len(edges):
        np.add.at(total, edges[:, 1], values[edges[:, 0]])
        np.add.at(count, edges[:, 1], 1.0)
    out = values.copy()
    has = count > 0
    out[has] = total[has] / count[has, None]
    return out


def utilisation(dual: DualGraph, weekday: int, cfg: SynthConfig, day: int | None = None) -> np.ndarray:
    """(|V|, 96) utilisation after upstream mixing; ``day`` adds raw-day demand jitter."""
    fc = np.array([node.attrs.functional_class for node in dual.nodes], dtype=int)
    profiles = {c: class_profile(c, weekday) for c in np.unique(fc)}
    own = np.stack([profiles[c] for c in fc]) if len(fc) else np.zeros((0, T_SPEED))
    own = own * (cfg.demand_scale * _node_jitter(dual, cfg))[:, None]
    if day is not None and cfg.day_jitter > 0:
        factors = np.array([
            1.0 + cfg.day_jitter * substream(cfg.seed, "day-jitter", v, day).standard_normal()
            for v in range(dual.num_nodes)
        ])
        shared = 1.0 + cfg.day_jitter * substream(cfg.seed, "day-shared", day).standard_normal()
        own = own * np.clip(factors * shared, 0.2, None)[:, None]
    mix = cfg.upstream_mix
    return (1.0 - mix) * own + mix * _upstream_mean(dual, own)


def gen_traffic(dual: DualGraph, weekday: int, cfg: SynthConfig,
                day: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Ground truth for every node: speeds (|V|, 96) in km/h and hourly volumes (|V|, 24).

    Speeds always follow the weekday-average demand; with ``day`` the volumes
    carry that day's jitter, so speeds cannot explain it.
    """
    attrs = [node.attrs for node in dual.nodes]
    cap = capacity([a.lanes for a in attrs], cfg.capacity_per_lane)
    ffs = np.array([a.free_flow_speed for a in attrs], dtype=np.float64)
    x_avg = utilisation(dual, weekday, cfg)
    speed = speed_curve(x_avg, ffs[:, None], cfg.bpr_alpha, cfg.bpr_beta, cfg.free_flow_ratio)
    if cfg.speed_noise > 0:
        tag = weekday if day is None else day
        noise = np.stack([
            substream(cfg.seed, "speed-noise", v, tag).normal(0.0, cfg.speed_noise, T_SPEED)
            for v in range(dual.num_nodes)
        ]) if dual.num_nodes else np.zeros((0, T_SPEED))
        speed = np.clip(speed + noise, 1.0, ffs[:, None] * (1.0 + cfg.noise_bound))
    x = x_avg if day is None else utilisation(dual, weekday, cfg, day)
    volume = hourly(cap[:, None] * x)
    return speed, volume


def place_sensors(dual: DualGraph, cfg: SynthConfig) -> DualGraph:
    n = dual.num_nodes
    count = cfg.n_sensors if cfg.n_sensors > 0 else int(round(cfg.sensor_fraction * n))
    count = max(1, min(n, count)) if n else 0
    rng = substream(cfg.seed, "sensors")
    # stratified by functional class: a random rank inside each class, scaled by
    # class size, interleaves the classes so every class gets its share
    fc = np.array([node.attrs.functional_class for node in dual.nodes], dtype=int)
    key = np.empty(n)
    for c in np.unique(fc):
        members = np.flatnonzero(fc == c)
        key[members] = (rng.permutation(len(members)) + rng.random(len(members))) / len(members)
    chosen = np.sort(np.argsort(key, kind="stable")[:count]) if count else np.array([], dtype=int)
    return dual.with_sensors(chosen)


def synthesize(cfg: SynthConfig, primal: PrimalGraph | None = None) -> DualGraph:
    """Network plus sensor traffic in one go; volumes exist only on sensor nodes."""
    cfg.validate()
    primal = gen_network(cfg) if primal is None else primal
    dual = place_sensors(build_dual(primal), cfg)
    return attach_traffic(dual, cfg)


def attach_traffic(dual: DualGraph, cfg: SynthConfig) -> DualGraph:
    if cfg.raw_days > 0:
        weekdays = tuple(d % 7 for d in range(cfg.raw_days))
        days = list(range(cfg.raw_days))
    else:
        weekdays = tuple(range(7))
        days = [None] * 7
    speeds = np.zeros((dual.num_nodes, T_SPEED, len(weekdays)))
    truth = np.zeros((dual.num_nodes, T_VOLUME, len(weekdays)))
    for i, (wd, day) in enumerate(zip(weekdays, days)):
        speeds[:, :, i], truth[:, :, i] = gen_traffic(dual, wd, cfg, day)
    volumes = {}
    for v in dual.labeled:
        q = truth[v].copy()
        if cfg.volume_noise > 0:
            q *= 1.0 + cfg.volume_noise * substream(cfg.seed, "count-noise", v).standard_normal(q.shape)
            q = np.maximum(q, 0.0)
        if cfg.missing_rate > 0:
            missing = substream(cfg.seed, "missing", v).random(q.shape[1]) < cfg.missing_rate
            q[:, missing] = np.nan
        volumes[int(v)] = q
    return dual.with_traffic(speeds, volumes, weekdays)


def ground_truth(dual: DualGraph, cfg: SynthConfig) -> np.ndarray:
    """Noise-free hourly volumes of every node, (|V|, 24, D)."""
    if cfg.raw_days > 0:
        pairs = [(d % 7, d) for d in range(cfg.raw_days)]
    else:
        pairs = [(wd, None) for wd in range(7)]
    return np.stack([gen_traffic(dual, wd, cfg, day)[1] for wd, day in pairs], axis=2)


# ---------------------------------------------------------------- csv

def write_speeds(dual: DualGraph, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for v in range(dual.num_nodes):
            for d, wd in enumerate(dual.weekdays):
                w.writerow([v, wd] + [f"{x:.6f}" for x in dual.speeds[v, :, d]])


def write_volumes(dual: DualGraph, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for v in sorted(dual.volumes):
            q = dual.volumes[v]
            for d, wd in enumerate(dual.weekdays):
                w.writerow([v, wd] + ["" if math.isnan(x) else f"{x:.6f}" for x in q[:, d]])


def _read_profiles(path: Path, width: int) -> tuple[dict[int, list[np.ndarray]], dict[int, list[int]]]:
    rows: dict[int, list[np.ndarray]] = {}
    weekdays: dict[int, list[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                if len(row) != width + 2:
                    raise ValueError(f"expected {width + 2} fields, got {len(row)}")
                node, wd = int(row[0]), int(row[1])
                vals = np.array([float(x) if x.strip() else np.nan for x in row[2:]])
            except ValueError as exc:
                raise GraphError(f"{path}:{lineno}: {exc}") from None
            rows.setdefault(node, []).append(vals)
            weekdays.setdefault(node, []).append(wd)
    return rows, weekdays


def read_traffic(dual: DualGraph, speed_path: str | Path, volume_path: str | Path | None = None) -> DualGraph:
    """Attach speed (and volume) CSVs; rows of one node appear in day order."""
    rows, weekdays = _read_profiles(Path(speed_path), T_SPEED)
    if sorted(rows) != list(range(dual.num_nodes)):
        raise GraphError(f"{speed_path}: speed profiles must cover nodes 0..{dual.num_nodes - 1}")
    days = weekdays[0]
    speeds = np.zeros((dual.num_nodes, T_SPEED, len(days)))
    for v, profiles in rows.items():
        if weekdays[v] != days:
            raise GraphError(f"{speed_path}: node {v} has days {weekdays[v]}, expected {days}")
        speeds[v] = np.stack(profiles, axis=1)
    if np.isnan(speeds).any():
        raise GraphError(f"{speed_path}: speed profiles must be complete")
    volumes = {}
    if volume_path is not None:
        vrows, vdays = _read_profiles(Path(volume_path), T_VOLUME)
        for v, profiles in vrows.items():
            if not 0 <= v < dual.num_nodes:
                raise GraphError(f"{volume_path}: unknown node {v}")
            if vdays[v] != days:
                raise GraphError(f"{volume_path}: node {v} has days {vdays[v]}, expected {days}")
            volumes[v] = np.stack(profiles, axis=1)
        dual = dual.with_sensors(volumes)
    return dual.with_traffic(speeds, volumes, days)
