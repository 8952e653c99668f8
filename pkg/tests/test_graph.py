"""Primal/dual graph construction, segment unification, neighbourhoods and file formats."""

from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_attrs, random_primal
from hdastgnn.graph import (BACKWARD, FORWARD, ONE_WAY, TWO_WAY, GraphError, Link, Maneuver, NodeNotFound,
                            PrimalGraph, StaticAttrs, aggregate_links, average_profiles, build_dual,
                            khop_nodes, khop_subgraph, read_dual, read_primal, unify_segments, write_dual,
                            write_primal)


def brute_force_dual(primal: PrimalGraph) -> tuple[list[tuple[str, str]], set[tuple[tuple, tuple]]]:
    """Enumerate every (link, travel) pair and every ordered pair of them."""
    nodes = []
    for link in primal.links:
        nodes.append((link.id, FORWARD))
        if link.direction == TWO_WAY:
            nodes.append((link.id, BACKWARD))
    rules = {(m.in_link, m.in_dir, m.out_link, m.out_dir): m.permitted for m in primal.maneuvers}
    by_id = {l.id: l for l in primal.links}

    def ends(lid, d):
        l = by_id[lid]
        return (l.source, l.target) if d == FORWARD else (l.target, l.source)

    edges = set()
    for a in nodes:
        for b in nodes:
            if ends(*a)[1] != ends(*b)[0]:
                continue
            key = a + b
            if key in rules:
                ok = rules[key]
            elif a[0] == b[0]:
                ok = primal.allow_uturns
            else:
                ok = True
            if ok:
                edges.add((a, b))
    return nodes, edges


def dual_as_sets(dual):
    names = [(n.segment_id, n.direction) for n in dual.nodes]
    return names, {(names[u], names[v]) for u, v in dual.edges}


def test_dual_matches_brute_force_on_random_networks():
    rng = np.random.default_rng(7)
    for _ in range(60):
        primal = random_primal(rng, max_nodes=12, allow_uturns=bool(rng.random() < 0.3))
        want_nodes, want_edges = brute_force_dual(primal)
        got_nodes, got_edges = dual_as_sets(build_dual(primal))
        assert sorted(got_nodes) == sorted(want_nodes)
        assert got_edges == want_edges


def test_two_way_link_gives_two_nodes_and_forbidden_uturn():
    a = random_attrs(np.random.default_rng(0))
    primal = PrimalGraph(("p", "q", "r"), (
        Link("a", "p", "q", TWO_WAY, a),
        Link("b", "q", "r", ONE_WAY, a),
    ))
    dual = build_dual(primal)
    names = {n.name for n in dual.nodes}
    assert names == {"a:F", "a:T", "b:F"}
    edges = {(dual.nodes[u].name, dual.nodes[v].name) for u, v in dual.edges}
    assert edges == {("a:F", "b:F")}


def test_uturns_allowed_when_requested():
    a = random_attrs(np.random.default_rng(0))
    primal = PrimalGraph(("p", "q"), (Link("a", "p", "q", TWO_WAY, a),), allow_uturns=True)
    edges = {(build_dual(primal).nodes[u].name, build_dual(primal).nodes[v].name)
             for u, v in build_dual(primal).edges}
    assert edges == {("a:F", "a:T"), ("a:T", "a:F")}


def test_forbidden_maneuver_removes_edge():
    a = random_attrs(np.random.default_rng(0))
    links = (Link("a", "p", "q", ONE_WAY, a), Link("b", "q", "r", ONE_WAY, a), Link("c", "q", "s", ONE_WAY, a))
    primal = PrimalGraph(("p", "q", "r", "s"), links, (Maneuver("a", FORWARD, "c", FORWARD, False),))
    dual = build_dual(primal)
    edges = {(dual.nodes[u].name, dual.nodes[v].name) for u, v in dual.edges}
    assert edges == {("a:F", "b:F")}


def test_invalid_maneuvers_are_rejected():
    a = random_attrs(np.random.default_rng(0))
    links = (Link("a", "p", "q", ONE_WAY, a), Link("b", "q", "r", ONE_WAY, a))
    with pytest.raises(GraphError, match="nonexistent"):
        PrimalGraph(("p", "q", "r"), links, (Maneuver("a", FORWARD, "zz", FORWARD, True),))
    with pytest.raises(GraphError, match="not open"):
        PrimalGraph(("p", "q", "r"), links, (Maneuver("a", BACKWARD, "b", FORWARD, True),))
    with pytest.raises(GraphError, match="unknown intersection"):
        PrimalGraph(("p",), links)


def test_aggregation_rules():
    x = StaticAttrs(50, 2, 100.0, 40.0, 0.01, 1.0, 3)
    y = StaticAttrs(70, 1, 300.0, 60.0, 0.03, -1.0, 2)
    w = aggregate_links([x, y])
    assert (w.speed_limit, w.lanes, w.functional_class) == (50, 1, 2)
    assert w.length == 400.0
    assert w.free_flow_speed == pytest.approx(0.25 * 40 + 0.75 * 60)
    assert w.curvature == pytest.approx(0.25 * 0.01 + 0.75 * 0.03)
    assert w.slope_percent == pytest.approx(-0.5)
    u = aggregate_links([x, y], weighted=False)
    assert u.free_flow_speed == pytest.approx(50.0)
    assert aggregate_links([x]) == x
    with pytest.raises(GraphError):
        aggregate_links([])
    assert np.allclose(average_profiles([np.ones(4), 3 * np.ones(4)]), 2.0)


def _chain_primal(directions, n_extra=0):
    """p0 - p1 - ... - pk with a branching anchor at both ends."""
    rng = np.random.default_rng(1)
    k = len(directions)
    names = [f"p{i}" for i in range(k + 1)] + ["s0", "s1", "e0", "e1"]
    links = [Link(f"c{i}", f"p{i}", f"p{i + 1}", d, random_attrs(rng)) for i, d in enumerate(directions)]
    links += [Link("u0", "s0", "p0", TWO_WAY, random_attrs(rng)), Link("u1", "s1", "p0", TWO_WAY, random_attrs(rng)),
              Link("v0", f"p{k}", "e0", TWO_WAY, random_attrs(rng)), Link("v1", f"p{k}", "e1", TWO_WAY, random_attrs(rng))]
    return PrimalGraph(tuple(names), tuple(links))


def test_unify_contracts_chain_against_literal_oracle():
    primal = _chain_primal([TWO_WAY] * 4)
    unified = unify_segments(primal)
    chain = [l for l in primal.links if l.id.startswith("c")]
    merged = unified.link_map()["c0"]
    assert {l.id for l in unified.links} == {"c0", "u0", "u1", "v0", "v1"}
    assert (merged.source, merged.target) == ("p0", "p4")
    assert merged.attrs == aggregate_links([l.attrs for l in chain])
    assert set(unified.intersections) == {"p0", "p4", "s0", "s1", "e0", "e1"}
    # dual: 5 two-way links -> 10 nodes
    assert build_dual(unified).num_nodes == 10


def test_unify_keeps_one_way_chain_oriented_and_stops_at_direction_change():
    primal = _chain_primal([ONE_WAY, ONE_WAY, TWO_WAY])
    unified = unify_segments(primal)
    ids = {l.id for l in unified.links}
    assert "c0" in ids and "c1" not in ids and "c2" in ids
    merged = unified.link_map()["c0"]
    assert (merged.source, merged.target, merged.direction) == ("p0", "p2", ONE_WAY)


def test_unify_remaps_maneuvers_at_anchors():
    rng = np.random.default_rng(3)
    links = (Link("a", "s", "m", TWO_WAY, random_attrs(rng)), Link("b", "m", "t", TWO_WAY, random_attrs(rng)),
             Link("x", "t", "y", TWO_WAY, random_attrs(rng)), Link("z", "t", "w", TWO_WAY, random_attrs(rng)),
             Link("q", "s", "y", TWO_WAY, random_attrs(rng)), Link("r", "s", "w", TWO_WAY, random_attrs(rng)))
    # b travelled backward (t -> m) continues as merged link travelled backward
    primal = PrimalGraph(("s", "m", "t", "y", "w"), links, (Maneuver("b", FORWARD, "x", FORWARD, False),))
    unified = unify_segments(primal)
    assert unified.maneuver_table() == {("a", FORWARD, "x", FORWARD): False}
    assert not unified.is_permitted("a", FORWARD, "x", FORWARD)


def test_unify_ring_raises_with_nodes():
    rng = np.random.default_rng(0)
    links = tuple(Link(f"r{i}", f"n{i}", f"n{(i + 1) % 3}", TWO_WAY, random_attrs(rng)) for i in range(3))
    with pytest.raises(GraphError, match="n0"):
        unify_segments(PrimalGraph(("n0", "n1", "n2"), links))


def bfs_oracle(edges, n, v, k):
    adj = {i: set() for i in range(n)}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    dist = {v: 0}
    q = deque([v])
    while q:
        u = q.popleft()
        for w in adj[u]:
            if w not in dist:
                dist[w] = dist[u] + 1
                q.append(w)
    return {u for u, d in dist.items() if d <= k}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 3))
def test_khop_matches_bfs_oracle(seed, k):
    rng = np.random.default_rng(seed)
    dual = build_dual(random_primal(rng, max_nodes=10))
    if dual.num_nodes == 0:
        return
    dual = dual.with_traffic(rng.uniform(10, 50, (dual.num_nodes, 8, 2)), {})
    v = int(rng.integers(dual.num_nodes))
    nodes = khop_nodes(dual, v, k)
    assert nodes[0] == v
    assert set(nodes.tolist()) == bfs_oracle(dual.edges, dual.num_nodes, v, k)
    sub = khop_subgraph(dual, v, k, 1)
    want = {(int(a), int(b)) for a, b in dual.edges if a in set(nodes) and b in set(nodes)}
    got = {(int(sub.nodes[a]), int(sub.nodes[b])) for a, b in sub.edges}
    assert got == want
    assert np.array_equal(sub.speed, dual.speeds[nodes, :, 1])
    assert sub.target == 0


def test_khop_errors():
    dual = build_dual(_chain_primal([TWO_WAY]))
    with pytest.raises(NodeNotFound):
        khop_nodes(dual, dual.num_nodes, 1)
    with pytest.raises(GraphError):
        khop_subgraph(dual, 0, 1, 0)


def test_primal_file_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    primal = random_primal(rng, max_nodes=8)
    write_primal(primal, tmp_path / "net.txt")
    back = read_primal(tmp_path / "net.txt")
    assert back.intersections == primal.intersections
    assert [l.id for l in back.links] == [l.id for l in primal.links]
    assert back.maneuver_table() == primal.maneuver_table()
    assert dual_as_sets(build_dual(back)) == dual_as_sets(build_dual(primal))


def test_primal_file_errors_report_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("[INTERSECTIONS]\na\nb\n[LINKS]\nl0,a,b,2,50,1,100\n", encoding="utf-8")
    with pytest.raises(GraphError, match=":5"):
        read_primal(path)


def test_dual_file_roundtrip(tmp_path):
    dual = build_dual(random_primal(np.random.default_rng(9), max_nodes=8)).with_sensors([0])
    write_dual(dual, tmp_path / "n.csv", tmp_path / "e.csv")
    back = read_dual(tmp_path / "n.csv", tmp_path / "e.csv")
    assert [n.name for n in back.nodes] == [n.name for n in dual.nodes]
    assert np.array_equal(back.edges, dual.edges)
    assert np.allclose(back.static, dual.static)
    assert back.labeled.tolist() == [0]
