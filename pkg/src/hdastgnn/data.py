"""Training samples, normalisation statistics and batch assembly."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .graph import DualGraph, Subgraph, khop_subgraph
from .model import GraphBatch, encode_speed


@dataclass(frozen=True, eq=False)
class Sample:
    """One labeled node on one day: its K-hop subgraph and target volumes (veh/h)."""

    node: int
    day: int
    weekday: int
    subgraph: Subgraph
    target: np.ndarray


def assemble_dataset(dual: DualGraph, k: int, days: Sequence[int] | None = None) -> list[Sample]:
    """One sample per (labeled node, day); days with missing counts are skipped."""
    labeled = dual.labeled
    if len(labeled) == 0:
        raise ValueError("dual graph has no labeled nodes")
    days = range(dual.num_days) if days is None else days
    samples, skipped = [], 0
    for v in labeled:
        q = dual.volumes.get(int(v))
        for d in days:
            if q is None or np.isnan(q[:, d]).any():
                skipped += 1
                continue
            sub = khop_subgraph(dual, int(v), k, d)
            samples.append(Sample(int(v), d, dual.weekdays[d], sub, q[:, d].copy()))
    if skipped:
        warnings.warn(f"skipped {skipped} labeled node-days with missing volumes", stacklevel=2)
    return samples


@dataclass(frozen=True)
class NormStats:
    static_mean: np.ndarray
    static_std: np.ndarray
    speed_mean: float
    speed_std: float
    volume_scale: float

    def to_dict(self) -> dict[str, np.ndarray]:
        return {
            "static_mean": self.static_mean,
            "static_std": self.static_std,
            "speed": np.array([self.speed_mean, self.speed_std]),
            "volume_scale": np.array([self.volume_scale]),
        }

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "NormStats":
        return cls(np.asarray(d["static_mean"]), np.asarray(d["static_std"]),
                   float(d["speed"][0]), float(d["speed"][1]), float(d["volume_scale"][0]))

    def equals(self, other: "NormStats") -> bool:
        return (np.array_equal(self.static_mean, other.static_mean)
                and np.array_equal(self.static_std, other.static_std)
                and self.speed_mean == other.speed_mean
                and self.speed_std == other.speed_std
                and self.volume_scale == other.volume_scale)


def _safe_std(x: np.ndarray, axis=None, what: str = "feature") -> np.ndarray:
    std = np.std(x, axis=axis)
    flat = np.atleast_1d(std)
    # rounding leaves a tiny residual on constant columns
    zero = flat <= 1e-12 * np.maximum(1.0, np.atleast_1d(np.abs(np.mean(x, axis=axis))))
    if zero.any():
        warnings.warn(f"zero variance in {what}; using unit scale", stacklevel=3)
        flat = np.where(zero, 1.0, flat)
    return flat if np.ndim(std) else flat[0]


def fit_normalization(samples: Sequence[Sample]) -> NormStats:
    """Statistics from training samples only: every node row of their subgraphs, once."""
    if not samples:
        raise ValueError("cannot fit normalisation on an empty training set")
    static_rows: dict[int, np.ndarray] = {}
    speed_rows: dict[tuple[int, int], np.ndarray] = {}
    for s in samples:
        sub = s.subgraph
        for i, g in enumerate(sub.nodes):
            static_rows.setdefault(int(g), sub.static[i])
            speed_rows.setdefault((int(g), s.day), sub.speed[i])
    static = np.stack([static_rows[k] for k in sorted(static_rows)])
    speed = np.stack([speed_rows[k] for k in sorted(speed_rows)])
    targets = np.stack([s.target for s in samples])
    return NormStats(
        static_mean=static.mean(axis=0),
        static_std=_safe_std(static, axis=0, what="static descriptors"),
        speed_mean=float(speed.mean()),
        speed_std=float(_safe_std(speed, what="speed profiles")),
        volume_scale=float(_safe_std(targets, what="volumes")),
    )


def normalize(samples: Sequence[Sample], stats: NormStats | None = None) -> tuple[list[Sample], NormStats]:
    """Z-score static descriptors and speeds; ``stats`` defaults to a fit on ``samples``.

    Targets stay in veh/h; model outputs are multiplied by ``volume_scale``.
    """
    stats = fit_normalization(samples) if stats is None else stats
    out = []
    for s in samples:
        sub = replace(
            s.subgraph,
            static=(s.subgraph.static - stats.static_mean) / stats.static_std,
            speed=(s.subgraph.speed - stats.speed_mean) / stats.speed_std,
        )
        out.append(replace(s, subgraph=sub))
    return out, stats


def denormalize(samples: Sequence[Sample], stats: NormStats) -> list[Sample]:
    out = []
    for s in samples:
        sub = replace(
            s.subgraph,
            static=s.subgraph.static * stats.static_std + stats.static_mean,
            speed=s.subgraph.speed * stats.speed_std + stats.speed_mean,
        )
        out.append(replace(s, subgraph=sub))
    return out


def sample_batch(sample: Sample) -> GraphBatch:
    """A single normalised sample as model input."""
    sub = sample.subgraph
    return GraphBatch(
        speed=encode_speed(sub.speed, sample.weekday),
        static=sub.static,
        edges=sub.edges,
        targets=np.array([sub.target]),
        volumes=sample.target[None, :],
    )


def collate(samples: Sequence[Sample]) -> GraphBatch:
    """Merge normalised samples into one graph, one connected block per day.

    Samples of the same day share nodes, so each day block is the union of
    their neighbourhoods with the union of their edges. Every target keeps
    its complete K-hop neighbourhood, so target rows match per-sample forwards.
    """
    by_day: dict[int, list[Sample]] = {}
    for s in samples:
        by_day.setdefault(s.day, []).append(s)
    speed_parts, static_parts, edge_parts = [], [], []
    target_pos = np.empty(len(samples), dtype=np.int64)
    position = {id(s): i for i, s in enumerate(samples)}
    offset = 0
    for day in sorted(by_day):
        group = by_day[day]
        nodes = np.unique(np.concatenate([s.subgraph.nodes for s in group]))
        speed = np.empty((len(nodes), group[0].subgraph.speed.shape[1]))
        static = np.empty((len(nodes), group[0].subgraph.static.shape[1]))
        edges = []
        for s in group:
            sub = s.subgraph
            local = np.searchsorted(nodes, sub.nodes)
            speed[local] = sub.speed
            static[local] = sub.static
            edges.append(local[sub.edges])
            target_pos[position[id(s)]] = offset + local[sub.target]
        edges = np.unique(np.concatenate(edges), axis=0) if edges else np.zeros((0, 2), dtype=np.int64)
        speed_parts.append(encode_speed(speed, group[0].weekday))
        static_parts.append(static)
        edge_parts.append(edges.reshape(-1, 2) + offset)
        offset += len(nodes)
    return GraphBatch(
        speed=np.concatenate(speed_parts),
        static=np.concatenate(static_parts),
        edges=np.concatenate(edge_parts),
        targets=target_pos,
        volumes=np.stack([s.target for s in samples]),
    )


def day_batch(dual: DualGraph, day: int, stats: NormStats) -> GraphBatch:
    """The whole dual graph for one day, every node a target."""
    static = (dual.static - stats.static_mean) / stats.static_std
    speed = (dual.speeds[:, :, day] - stats.speed_mean) / stats.speed_std
    return GraphBatch(
        speed=encode_speed(speed, dual.weekdays[day]),
        static=static,
        edges=dual.edges,
        targets=np.arange(dual.num_nodes),
    )
