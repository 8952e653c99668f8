"""Model assembly, ablation variants and the full-graph versus subgraph equivalence."""

import numpy as np
import pytest

from hdastgnn import autodiff as ad
from hdastgnn.data import assemble_dataset, collate, day_batch, normalize, sample_batch
from hdastgnn.layers import DGAT, GAT, ConfigError, NodeDense
from hdastgnn.model import ABLATIONS, ModelConfig, build_variant, encode_speed
from hdastgnn.synth import SynthConfig, synthesize

pytestmark = pytest.mark.usefixtures("float64")

SMALL = dict(hidden=8, heads=2, kernel_size=3)


@pytest.fixture(scope="module")
def world():
    dual = synthesize(SynthConfig(rows=3, cols=3, oneway_prob=0.4, sensor_fraction=0.5, seed=3))
    samples = assemble_dataset(dual, 2)
    norm, stats = normalize(samples)
    return dual, norm, stats


def test_encode_speed_layout():
    enc = encode_speed(np.full((2, 96), 3.0), 5, speed_mean=1.0, speed_std=2.0)
    assert enc.shape == (2, 96, 10)
    assert np.allclose(enc[:, :, 0], 1.0)
    assert np.allclose(enc[0, 0, 1:3], [0.0, 1.0])
    assert np.allclose(enc[0, 24, 1:3], [1.0, 0.0])      # 6 a.m.
    assert enc[0, 0, 3:].tolist() == [0, 0, 0, 0, 0, 1, 0]


def test_output_shapes_for_every_variant(world):
    dual, samples, _ = world
    batch = collate(samples[:5])
    for flag in (None,) + ABLATIONS:
        cfg = ModelConfig(**SMALL, **({flag: True} if flag else {}))
        model = build_variant(cfg, 0)
        out = model(batch)
        assert out.shape == (batch.num_nodes, 24)
        assert model.forward_targets(batch).shape == (5, 24)


def test_variant_structure():
    cfg = ModelConfig(**SMALL)
    full = build_variant(cfg, 0)
    assert isinstance(full.st_branch.blocks[0].graph, DGAT)
    assert full.fuse.W.shape == (16, 8) and full.head.W.shape == (8, 24)
    assert build_variant(ModelConfig(**SMALL, no_st_branch=True), 0).st_branch is None
    assert build_variant(ModelConfig(**SMALL, no_spatial_branch=True), 0).spatial_branch is None
    assert isinstance(build_variant(ModelConfig(**SMALL, no_neighborhood=True), 0).spatial_branch.layers[0], NodeDense)
    assert isinstance(build_variant(ModelConfig(**SMALL, undirected_gat=True), 0).spatial_branch.layers[1], GAT)
    single = build_variant(ModelConfig(**SMALL, single_branch_fusion=True), 0)
    assert single.spatial_branch is None and single.fuse.W.shape == (8, 8)
    assert single.st_branch.blocks[0].conv_in.kernel.shape == (3, 17, 8)


def test_conflicting_flags_and_bad_widths_rejected():
    with pytest.raises(ConfigError, match="conflicting"):
        ModelConfig(no_st_branch=True, no_spatial_branch=True).validate()
    with pytest.raises(ConfigError):
        ModelConfig(hidden=10, heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(kernel_size=4).validate()
    with pytest.raises(ad.ShapeError):
        build_variant(ModelConfig(**SMALL, T=48), 0)(sample_batch(assemble_dataset(
            synthesize(SynthConfig(rows=2, cols=2, oneway_prob=0)), 1)[0]))


def test_config_dict_roundtrip():
    cfg = ModelConfig(hidden=32, undirected_gat=True)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert ModelConfig.from_dict({"hidden": "16", "no_st_branch": "true"}).no_st_branch


@pytest.mark.parametrize("flag", [None, "undirected_gat", "single_branch_fusion", "no_st_branch"])
def test_full_graph_forward_equals_per_subgraph_forward(world, flag):
    dual, samples, stats = world
    model = build_variant(ModelConfig(**SMALL, **({flag: True} if flag else {})), 1)
    by_day = {}
    for s in samples:
        if s.day not in by_day:
            by_day[s.day] = model(day_batch(dual, s.day, stats)).value
        single = model.forward_targets(sample_batch(s)).value[0]
        assert np.abs(by_day[s.day][s.node] - single).max() < 1e-10


def test_collated_batch_matches_single_samples(world):
    _, samples, _ = world
    model = build_variant(ModelConfig(**SMALL), 2)
    batch = collate(samples[:12])
    merged = model.forward_targets(batch).value
    for i, s in enumerate(samples[:12]):
        assert np.abs(merged[i] - model.forward_targets(sample_batch(s)).value[0]).max() < 1e-10


def test_dropout_only_in_training(world):
    _, samples, _ = world
    model = build_variant(ModelConfig(**SMALL), 3)
    batch = collate(samples[:4])
    a = model(batch).value
    assert np.array_equal(a, model(batch).value)
    b = model(batch, train=True, rng=np.random.default_rng(0)).value
    assert not np.allclose(a, b)


def test_full_model_gradients_on_toy_sample():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(hidden=8, heads=2, kernel_size=3, T=8, T_out=3, dropout_conv=0, dropout_graph=0,
                      dropout_fusion=0)
    model = build_variant(cfg, 4)
    from hdastgnn.model import GraphBatch
    n = 6
    edges = np.array([[0, 1], [1, 2], [2, 0], [3, 0], [0, 4], [4, 5]])
    speed = encode_speed(rng.normal(size=(n, 8)), 2)
    batch = GraphBatch(speed, rng.normal(size=(n, 7)), edges, np.array([0, 4]), rng.normal(size=(2, 3)) * 100)
    target = ad.constant(batch.volumes)

    def loss():
        pred = ad.mul(model.forward_targets(batch), 50.0)
        return ad.mean(ad.huber(pred, target, 50.0))

    res = ad.param_grad_check(loss, model.parameters(), max_entries=6)
    assert res.nan_count == 0 and res.max_rel_error < 1e-4
