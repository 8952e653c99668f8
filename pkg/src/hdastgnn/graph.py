"""Primal road network, link unification and the oriented dual graph."""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

ONE_WAY = 1
TWO_WAY = 2

# travel direction along a link: F follows from->to, T goes to->from
FORWARD = "F"
BACKWARD = "T"

STATIC_FIELDS = (
    "speed_limit",
    "lanes",
    "length",
    "free_flow_speed",
    "curvature",
    "slope_percent",
    "functional_class",
)

STATIC_RANGES = {
    "speed_limit": (10, 130),
    "lanes": (1, 4),
    "length": (2, 2127),
    "free_flow_speed": (10, 120),
    "curvature": (0, 1000),
    "slope_percent": (-100, 100),
    "functional_class": (1, 5),
}


class GraphError(ValueError):
    """Malformed or inconsistent road network."""


class NodeNotFound(KeyError):
    pass


@dataclass(frozen=True)
class StaticAttrs:
    speed_limit: float
    lanes: float
    length: float
    free_flow_speed: float
    curvature: float
    slope_percent: float
    functional_class: int

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in STATIC_FIELDS], dtype=np.float64)

    def out_of_range(self) -> list[str]:
        bad = []
        for name, (lo, hi) in STATIC_RANGES.items():
            if not lo <= getattr(self, name) <= hi:
                bad.append(name)
        return bad


@dataclass(frozen=True)
class Link:
    id: str
    source: str
    target: str
    direction: int
    attrs: StaticAttrs

    def travel_ends(self, travel: str) -> tuple[str, str]:
        return (self.source, self.target) if travel == FORWARD else (self.target, self.source)

    def travels(self) -> tuple[str, ...]:
        return (FORWARD, BACKWARD) if self.direction == TWO_WAY else (FORWARD,)


@dataclass(frozen=True)
class Maneuver:
    in_link: str
    in_dir: str
    out_link: str
    out_dir: str
    permitted: bool


@dataclass(frozen=True)
class PrimalGraph:
    intersections: tuple[str, ...]
    links: tuple[Link, ...]
    maneuvers: tuple[Maneuver, ...] = ()
    # unlisted (in, out) pairs fall back to this rule; U-turns are separate
    allow_uturns: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        nodes = set(self.intersections)
        if len(nodes) != len(self.intersections):
            raise GraphError("duplicate intersection ids")
        seen = set()
        for link in self.links:
            if link.id in seen:
                raise GraphError(f"duplicate link id {link.id!r}")
            seen.add(link.id)
            for end in (link.source, link.target):
                if end not in nodes:
                    raise GraphError(f"link {link.id!r} references unknown intersection {end!r}")
            if link.direction not in (ONE_WAY, TWO_WAY):
                raise GraphError(f"link {link.id!r}: direction must be 1 or 2, got {link.direction}")
        by_id = self.link_map()
        for m in self.maneuvers:
            for lid, d in ((m.in_link, m.in_dir), (m.out_link, m.out_dir)):
                if lid not in by_id:
                    raise GraphError(f"maneuver references nonexistent link {lid!r}")
                if d not in by_id[lid].travels():
                    raise GraphError(f"maneuver uses direction {d!r} not open on link {lid!r}")
            _, via_in = by_id[m.in_link].travel_ends(m.in_dir)
            via_out, _ = by_id[m.out_link].travel_ends(m.out_dir)
            if via_in != via_out:
                raise GraphError(
                    f"maneuver {m.in_link}{m.in_dir}->{m.out_link}{m.out_dir} does not share an intersection"
                )

    def link_map(self) -> dict[str, Link]:
        return {link.id: link for link in self.links}

    def degree(self) -> dict[str, int]:
        deg = {n: 0 for n in self.intersections}
        for link in self.links:
            deg[link.source] += 1
            deg[link.target] += 1
        return deg

    def maneuver_table(self) -> dict[tuple[str, str, str, str], bool]:
        return {(m.in_link, m.in_dir, m.out_link, m.out_dir): m.permitted for m in self.maneuvers}

    def is_permitted(self, in_link: str, in_dir: str, out_link: str, out_dir: str,
                     table: dict | None = None) -> bool:
        table = self.maneuver_table() if table is None else table
        key = (in_link, in_dir, out_link, out_dir)
        if key in table:
            return table[key]
        if in_link == out_link:
            return self.allow_uturns
        return True


# ---------------------------------------------------------------- aggregation

def aggregate_links(chain: Sequence[StaticAttrs], weighted: bool = True) -> StaticAttrs:
    """Merge consecutive links into one segment.

    MIN for speed limit, lanes and functional class, SUM for length, MEAN for
    free-flow speed, curvature and slope. ``weighted`` uses link lengths as
    weights for the MEAN fields.
    """
    if not chain:
        raise GraphError("cannot aggregate an empty chain of links")
    if len(chain) == 1:
        return chain[0]
    lengths = np.array([a.length for a in chain], dtype=np.float64)
    w = lengths / lengths.sum() if weighted and lengths.sum() > 0 else np.full(len(chain), 1.0 / len(chain))

    def avg(name):
        return float(np.dot(w, [getattr(a, name) for a in chain]))

    return StaticAttrs(
        speed_limit=min(a.speed_limit for a in chain),
        lanes=min(a.lanes for a in chain),
        length=float(lengths.sum()),
        free_flow_speed=avg("free_flow_speed"),
        curvature=avg("curvature"),
        slope_percent=avg("slope_percent"),
        functional_class=min(a.functional_class for a in chain),
    )


def average_profiles(profiles: Sequence[np.ndarray]) -> np.ndarray:
    """Plain mean of the speed profiles of the links merged into one segment."""
    if not profiles:
        raise GraphError("cannot average an empty set of speed profiles")
    return np.mean(np.stack(profiles), axis=0)


def _contractible(primal: PrimalGraph, node: str, incident: list[Link]) -> bool:
    if len(incident) != 2:
        return False
    a, b = incident
    if a.id == b.id:
        return False
    if a.direction == TWO_WAY and b.direction == TWO_WAY:
        return True
    if a.direction == ONE_WAY and b.direction == ONE_WAY:
        # flow must pass through: one link arrives, the other leaves
        return (a.target == node) != (b.target == node)
    return False


def unify_segments(primal: PrimalGraph, weighted: bool = True) -> PrimalGraph:
    """Replace every maximal chain through degree-2 intersections by one link.

    The merged link keeps the id of the chain's first link and runs from the
    first anchor intersection to the last. Maneuvers at the anchors are
    re-expressed on the merged link; maneuvers at removed intersections vanish.
    """
    incident: dict[str, list[Link]] = {n: [] for n in primal.intersections}
    for link in primal.links:
        incident[link.source].append(link)
        if link.target != link.source:
            incident[link.target].append(link)
    interior = {n for n in primal.intersections if _contractible(primal, n, incident[n])}
    if not interior:
        return primal

    used: set[str] = set()
    new_links: list[Link] = []
    # link id -> (merged id, same orientation as merged link?)
    remap: dict[str, tuple[str, bool]] = {}

    def walk(start: str, first: Link) -> tuple[list[tuple[Link, bool]], str]:
        chain = []
        node, link = start, first
        while True:
            forward = link.source == node
            chain.append((link, forward))
            used.add(link.id)
            node = link.target if forward else link.source
            if node not in interior or node == start:
                return chain, node
            nxt = [l for l in incident[node] if l.id != link.id][0]
            if nxt.id in used:
                return chain, node
            link = nxt

    order = {link.id: i for i, link in enumerate(primal.links)}
    for link in primal.links:
        if link.id in used:
            continue
        if link.source in interior and link.target in interior:
            continue  # picked up from an anchor, or part of a ring
        start = link.target if link.source in interior else link.source
        chain, end = walk(start, link)
        if len(chain) == 1:
            new_links.append(link)
            remap[link.id] = (link.id, True)
            continue
        # a one-way chain must be oriented along the flow
        if chain[0][0].direction == ONE_WAY and not chain[0][1]:
            chain = [(l, not f) for l, f in reversed(chain)]
            start, end = end, start
        head = min((l for l, _ in chain), key=lambda l: order[l.id])
        attrs = aggregate_links([l.attrs for l, _ in chain], weighted=weighted)
        merged = Link(head.id, start, end, chain[0][0].direction, attrs)
        new_links.append(merged)
        for l, f in chain:
            remap[l.id] = (merged.id, f)

    leftover = [l for l in primal.links if l.id not in used]
    if leftover:
        ring = sorted({n for l in leftover for n in (l.source, l.target)})
        raise GraphError(f"ring of degree-2 intersections without an anchor: {ring}")

    def flip(d):
        return FORWARD if d == BACKWARD else BACKWARD

    keep_nodes = tuple(n for n in primal.intersections if n not in interior)
    new_by_id = {l.id: l for l in new_links}
    maneuvers = []
    seen = set()
    for m in primal.maneuvers:
        in_id, in_same = remap[m.in_link]
        out_id, out_same = remap[m.out_link]
        in_dir = m.in_dir if in_same else flip(m.in_dir)
        out_dir = m.out_dir if out_same else flip(m.out_dir)
        _, via_in = new_by_id[in_id].travel_ends(in_dir)
        via_out, _ = new_by_id[out_id].travel_ends(out_dir)
        if via_in != via_out or via_in in interior:
            continue
        key = (in_id, in_dir, out_id, out_dir)
        if key in seen:
            continue
        seen.add(key)
        maneuvers.append(Maneuver(in_id, in_dir, out_id, out_dir, m.permitted))
    new_links.sort(key=lambda l: order[l.id])
    return PrimalGraph(keep_nodes, tuple(new_links), tuple(maneuvers), primal.allow_uturns)


# ---------------------------------------------------------------- dual graph

@dataclass(frozen=True)
class DualNode:
    segment_id: str
    direction: str
    attrs: StaticAttrs
    is_sensor: bool = False

    @property
    def name(self) -> str:
        return f"{self.segment_id}:{self.direction}"


@dataclass(frozen=True, eq=False)
class DualGraph:
    """Directed road segments as nodes, permitted maneuvers as edges.

    ``speeds`` is (|V|, T, D); ``volumes`` maps a labeled node index to a
    (T', D) array where NaN marks a missing day.
    """

    nodes: tuple[DualNode, ...]
    edges: np.ndarray
    speeds: np.ndarray | None = None
    volumes: dict[int, np.ndarray] = field(default_factory=dict)
    weekdays: tuple[int, ...] = tuple(range(7))

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        n = len(self.nodes)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise GraphError("dual edge references an unknown node")
        if self.speeds is not None and self.speeds.shape[0] != n:
            raise GraphError(f"speed tensor has {self.speeds.shape[0]} rows for {n} nodes")
        adj: list[set[int]] = [set() for _ in range(n)]
        for u, v in edges:
            if u != v:
                adj[u].add(v)
                adj[v].add(u)
        object.__setattr__(self, "_undirected", tuple(np.array(sorted(a), dtype=np.int64) for a in adj))
        object.__setattr__(self, "_index", {node.name: i for i, node in enumerate(self.nodes)})

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def static(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros((0, len(STATIC_FIELDS)))
        return np.stack([node.attrs.as_array() for node in self.nodes])

    @property
    def labeled(self) -> np.ndarray:
        return np.array([i for i, node in enumerate(self.nodes) if node.is_sensor], dtype=np.int64)

    @property
    def unlabeled(self) -> np.ndarray:
        return np.array([i for i, node in enumerate(self.nodes) if not node.is_sensor], dtype=np.int64)

    @property
    def num_days(self) -> int:
        return len(self.weekdays)

    def index_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise NodeNotFound(name) from None

    def neighbors(self, v: int) -> np.ndarray:
        return self._undirected[v]

    def with_traffic(self, speeds: np.ndarray, volumes: dict[int, np.ndarray],
                     weekdays: Sequence[int] | None = None) -> "DualGraph":
        return replace(self, speeds=speeds, volumes=volumes,
                       weekdays=tuple(weekdays) if weekdays is not None else self.weekdays)

    def with_sensors(self, sensor_ids: Iterable[int]) -> "DualGraph":
        chosen = set(int(i) for i in sensor_ids)
        nodes = tuple(replace(node, is_sensor=i in chosen) for i, node in enumerate(self.nodes))
        return replace(self, nodes=nodes)

    def induced_edges(self, node_ids: np.ndarray) -> np.ndarray:
        """Edges of the dual graph with both ends in ``node_ids``, relabelled locally."""
        local = np.full(self.num_nodes, -1, dtype=np.int64)
        local[node_ids] = np.arange(len(node_ids))
        if not self.edges.size:
            return np.zeros((0, 2), dtype=np.int64)
        le = local[self.edges]
        keep = (le >= 0).all(axis=1)
        return le[keep]


def build_dual(primal: PrimalGraph) -> DualGraph:
    """One node per open travel direction of each link, one edge per permitted maneuver."""
    by_id = primal.link_map()
    table = primal.maneuver_table()
    for (in_link, _, out_link, _) in table:
        if in_link not in by_id or out_link not in by_id:
            raise GraphError(f"maneuver references nonexistent link {in_link!r} or {out_link!r}")
    nodes: list[DualNode] = []
    index: dict[tuple[str, str], int] = {}
    arriving: dict[str, list[int]] = {n: [] for n in primal.intersections}
    leaving: dict[str, list[int]] = {n: [] for n in primal.intersections}
    for link in primal.links:
        for travel in link.travels():
            idx = len(nodes)
            index[(link.id, travel)] = idx
            nodes.append(DualNode(link.id, travel, link.attrs))
            start, end = link.travel_ends(travel)
            leaving[start].append(idx)
            arriving[end].append(idx)
    edges = []
    for x in primal.intersections:
        for u in arriving[x]:
            for v in leaving[x]:
                nu, nv = nodes[u], nodes[v]
                if primal.is_permitted(nu.segment_id, nu.direction, nv.segment_id, nv.direction, table):
                    edges.append((u, v))
    edges.sort()
    return DualGraph(tuple(nodes), np.array(edges, dtype=np.int64).reshape(-1, 2))


# ---------------------------------------------------------------- subgraphs

@dataclass(frozen=True, eq=False)
class Subgraph:
    """Induced K-hop neighbourhood of one target node for one day."""

    nodes: np.ndarray        # local -> global node index
    edges: np.ndarray        # (m, 2) local directed edges
    static: np.ndarray       # (n, C_f)
    speed: np.ndarray        # (n, T) raw km/h for the day
    target: int              # local index of the target node
    day: int

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)


def khop_nodes(dual: DualGraph, v: int, k: int) -> np.ndarray:
    """Nodes within undirected hop distance ``k`` of ``v``, ``v`` first, then BFS order."""
    if not 0 <= v < dual.num_nodes:
        raise NodeNotFound(v)
    if k < 0:
        raise ValueError("hop count must be non-negative")
    dist = {v: 0}
    queue = deque([v])
    out = [v]
    while queue:
        u = queue.popleft()
        if dist[u] == k:
            continue
        for w in dual.neighbors(u):
            w = int(w)
            if w not in dist:
                dist[w] = dist[u] + 1
                out.append(w)
                queue.append(w)
    return np.array(out, dtype=np.int64)


def khop_subgraph(dual: DualGraph, v: int, k: int, day: int) -> Subgraph:
    nodes = khop_nodes(dual, v, k)
    if dual.speeds is None:
        raise GraphError("dual graph carries no speed profiles")
    if not 0 <= day < dual.speeds.shape[2]:
        raise ValueError(f"day {day} outside 0..{dual.speeds.shape[2] - 1}")
    return Subgraph(
        nodes=nodes,
        edges=dual.induced_edges(nodes),
        static=dual.static[nodes],
        speed=dual.speeds[nodes, :, day],
        target=0,
        day=day,
    )


# ---------------------------------------------------------------- file formats

def _clean_lines(path: Path) -> Iterable[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def read_primal(path: str | Path) -> PrimalGraph:
    path = Path(path)
    section = None
    intersections, links, maneuvers = [], [], []
    for lineno, line in _clean_lines(path):
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().upper()
            if section not in ("INTERSECTIONS", "LINKS", "MANEUVERS"):
                raise GraphError(f"{path}:{lineno}: unknown section {line}")
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            if section == "INTERSECTIONS":
                intersections.append(parts[0])
            elif section == "LINKS":
                if len(parts) != 11:
                    raise ValueError(f"expected 11 fields, got {len(parts)}")
                attrs = StaticAttrs(
                    speed_limit=float(parts[4]), lanes=float(parts[5]), length=float(parts[6]),
                    free_flow_speed=float(parts[7]), curvature=float(parts[8]),
                    slope_percent=float(parts[9]), functional_class=int(parts[10]),
                )
                links.append(Link(parts[0], parts[1], parts[2], int(parts[3]), attrs))
            elif section == "MANEUVERS":
                if len(parts) != 5:
                    raise ValueError(f"expected 5 fields, got {len(parts)}")
                if parts[4] not in ("0", "1"):
                    raise ValueError("permitted flag must be 0 or 1")
                maneuvers.append(Maneuver(parts[0], parts[1], parts[2], parts[3], parts[4] == "1"))
            else:
                raise ValueError("data line before any section header")
        except (ValueError, IndexError) as exc:
            raise GraphError(f"{path}:{lineno}: {exc}") from None
    return PrimalGraph(tuple(intersections), tuple(links), tuple(maneuvers))


def _fmt(x: float) -> str:
    return repr(float(x)) if not float(x).is_integer() else str(int(x))


def write_primal(primal: PrimalGraph, path: str | Path) -> None:
    lines = ["[INTERSECTIONS]"]
    lines += list(primal.intersections)
    lines.append("[LINKS]")
    for link in primal.links:
        vals = [_fmt(getattr(link.attrs, name)) for name in STATIC_FIELDS]
        lines.append(",".join([link.id, link.source, link.target, str(link.direction)] + vals))
    lines.append("[MANEUVERS]")
    for m in primal.maneuvers:
        lines.append(f"{m.in_link},{m.in_dir},{m.out_link},{m.out_dir},{int(m.permitted)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


DUAL_NODE_HEADER = ["node_id", "segment_id", "direction", *STATIC_FIELDS, "is_sensor"]


def write_dual(dual: DualGraph, node_path: str | Path, edge_path: str | Path) -> None:
    with open(node_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DUAL_NODE_HEADER)
        for i, node in enumerate(dual.nodes):
            vals = [_fmt(getattr(node.attrs, name)) for name in STATIC_FIELDS]
            w.writerow([i, node.segment_id, node.direction, *vals, int(node.is_sensor)])
    with open(edge_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst"])
        for u, v in dual.edges:
            w.writerow([int(u), int(v)])


def read_dual(node_path: str | Path, edge_path: str | Path) -> DualGraph:
    nodes = []
    with open(node_path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DUAL_NODE_HEADER:
            raise GraphError(f"{node_path}:1: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                if int(row[0]) != len(nodes):
                    raise ValueError(f"node ids must be consecutive, got {row[0]}")
                vals = [float(x) for x in row[3:10]]
                attrs = StaticAttrs(*vals[:6], functional_class=int(vals[6]))
                nodes.append(DualNode(row[1], row[2], attrs, row[10] == "1"))
            except (ValueError, IndexError) as exc:
                raise GraphError(f"{node_path}:{lineno}: {exc}") from None
    edges = []
    with open(edge_path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            try:
                edges.append((int(row[0]), int(row[1])))
            except (ValueError, IndexError) as exc:
                raise GraphError(f"{edge_path}:{lineno}: {exc}") from None
    return DualGraph(tuple(nodes), np.array(edges, dtype=np.int64).reshape(-1, 2))


def static_field_names() -> tuple[str, ...]:
    return tuple(f.name for f in fields(StaticAttrs))
