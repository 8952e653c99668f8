"""Two-branch HDA-STGNN and its ablation variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor
from .layers import DGAT, GAT, AttentionIndex, ConfigError, Dense, NodeDense, TemporalConv

ABLATIONS = ("no_st_branch", "no_spatial_branch", "no_neighborhood", "single_branch_fusion", "undirected_gat")

STEPS_PER_HOUR = 4


@dataclass
class ModelConfig:
    K: int = 2
    hidden: int = 64
    heads: int = 4
    kernel_size: int = 9
    T: int = 96
    T_out: int = 24
    static_dim: int = 7
    speed_dim: int = 10
    leaky_slope: float = 0.2
    self_prior: float = 0.0
    dropout_conv: float = 0.1
    dropout_graph: float = 0.3
    dropout_fusion: float = 0.6
    no_st_branch: bool = False
    no_spatial_branch: bool = False
    no_neighborhood: bool = False
    single_branch_fusion: bool = False
    undirected_gat: bool = False

    def validate(self) -> None:
        if self.K < 1:
            raise ConfigError(f"K must be at least 1, got {self.K}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden width {self.hidden} is not divisible by {self.heads} heads")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel_size}")
        for name in ("dropout_conv", "dropout_graph", "dropout_fusion"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        flags = self.ablation_flags()
        if len(flags) > 1:
            raise ConfigError(f"conflicting ablation flags: {', '.join(flags)}")

    def ablation_flags(self) -> list[str]:
        return [name for name in ABLATIONS if getattr(self, name)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, value in values.items():
            if key not in known:
                continue
            default = getattr(cls, key)
            if isinstance(default, bool):
                out[key] = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
            else:
                out[key] = type(default)(value)
        return cls(**out)


def encode_speed(speed: np.ndarray, weekday: int, speed_mean: float = 0.0, speed_std: float = 1.0) -> np.ndarray:
    """(N, T) km/h -> (N, T, 10): z-scored speed, hour-of-day sin/cos, weekday one-hot."""
    n, t = speed.shape
    hours = np.arange(t) / STEPS_PER_HOUR
    angle = 2 * np.pi * hours / 24.0
    enc = np.empty((n, t, 10), dtype=np.float64)
    enc[:, :, 0] = (speed - speed_mean) / speed_std
    enc[:, :, 1] = np.sin(angle)
    enc[:, :, 2] = np.cos(angle)
    enc[:, :, 3:] = 0.0
    enc[:, :, 3 + weekday % 7] = 1.0
    return enc


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Model input: one graph (possibly several disjoint day-graphs) plus targets.

    ``speed`` is the encoded (N, T, E) tensor and ``static`` the normalised
    (N, C_f) descriptors. ``targets`` are node positions whose rows enter
    the loss; ``volumes`` holds their ground truth in veh/h.
    """

    speed: np.ndarray
    static: np.ndarray
    edges: np.ndarray
    targets: np.ndarray
    volumes: np.ndarray | None = None

    @property
    def num_nodes(self) -> int:
        return self.speed.shape[0]

    def directed_index(self) -> AttentionIndex:
        return AttentionIndex.directed(self.num_nodes, self.edges)

    def undirected_index(self) -> AttentionIndex:
        return AttentionIndex.undirected(self.num_nodes, self.edges)


class STBlock(Module):
    """Temporal conv -> per-time-step graph layer -> temporal conv."""

    def __init__(self, in_dim: int, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.hidden
        self.cfg = cfg
        self.conv_in = TemporalConv(in_dim, c, cfg.kernel_size, rng)
        self.graph = _graph_layer(c, c, cfg, rng)
        self.conv_out = TemporalConv(c, c, cfg.kernel_size, rng)

    def __call__(self, h: Tensor, index: AttentionIndex, train: bool, rng) -> Tensor:
        h = ad.dropout(self.conv_in(h), self.cfg.dropout_conv, train, rng)
        h = ad.dropout(self.graph(h, index), self.cfg.dropout_graph, train, rng)
        return ad.dropout(self.conv_out(h), self.cfg.dropout_conv, train, rng)


def _graph_layer(in_dim: int, out_dim: int, cfg: ModelConfig, rng):
    if cfg.no_neighborhood:
        return NodeDense(in_dim, out_dim, rng, activation="leaky_relu", slope=cfg.leaky_slope)
    if cfg.undirected_gat:
        return GAT(in_dim, out_dim, cfg.heads, rng, slope=cfg.leaky_slope)
    return DGAT(in_dim, out_dim, cfg.heads, rng, slope=cfg.leaky_slope, self_prior=cfg.self_prior)


class STBranch(Module):
    def __init__(self, in_dim: int, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = [STBlock(in_dim if k == 0 else cfg.hidden, cfg, rng) for k in range(cfg.K)]
        # flattened (T * C) per node -> C
        self.reduce = Dense(cfg.T * cfg.hidden, cfg.hidden, rng, activation="relu")

    def __call__(self, x: Tensor, index, train: bool, rng) -> Tensor:
        h = x
        for block in self.blocks:
            h = block(h, index, train, rng)
        n = h.shape[0]
        h = ad.reshape(h, (n, h.shape[1] * h.shape[2]))
        return ad.dropout(self.reduce(h), self.cfg.dropout_conv, train, rng)


class SpatialBranch(Module):
    def __init__(self, in_dim: int, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = [_graph_layer(in_dim if k == 0 else cfg.hidden, cfg.hidden, cfg, rng) for k in range(cfg.K)]

    def __call__(self, f: Tensor, index, train: bool, rng) -> Tensor:
        h = f
        for layer in self.layers:
            h = ad.dropout(layer(h, index), self.cfg.dropout_graph, train, rng)
        return h


class HDASTGNN(Module):
    """Speed branch and static branch fused by two dense layers into T' volumes per node.

    Outputs are in normalised volume units; the caller rescales them.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        c = cfg.hidden
        self.st_branch = None
        self.spatial_branch = None
        if cfg.single_branch_fusion:
            self.st_branch = STBranch(cfg.speed_dim + cfg.static_dim, cfg, rng)
            fusion_in = c
        else:
            if not cfg.no_st_branch:
                self.st_branch = STBranch(cfg.speed_dim, cfg, rng)
            if not cfg.no_spatial_branch:
                self.spatial_branch = SpatialBranch(cfg.static_dim, cfg, rng)
            fusion_in = 2 * c
        self.fuse = Dense(fusion_in, c, rng, activation="relu")
        self.head = Dense(c, cfg.T_out, rng)

    def index_for(self, batch: GraphBatch) -> AttentionIndex | None:
        if self.cfg.no_neighborhood:
            return None
        if self.cfg.undirected_gat:
            return batch.undirected_index()
        return batch.directed_index()

    def embed(self, batch: GraphBatch, index=None, train: bool = False, rng=None) -> Tensor:
        """Fused hidden representation H of every node, shape (N, 2C) or (N, C)."""
        cfg = self.cfg
        if index is None:
            index = self.index_for(batch)
        if batch.speed.shape[1] != cfg.T:
            raise ad.ShapeError(f"speed input has {batch.speed.shape[1]} steps, model expects {cfg.T}")
        if cfg.single_branch_fusion:
            n, t, _ = batch.speed.shape
            tiled = np.repeat(batch.static[:, None, :], t, axis=1)
            x = ad.constant(np.concatenate([batch.speed, tiled], axis=2))
            return self.st_branch(x, index, train, rng)
        hp = hf = None
        if self.st_branch is not None:
            hp = self.st_branch(ad.constant(batch.speed), index, train, rng)
        if self.spatial_branch is not None:
            hf = self.spatial_branch(ad.constant(batch.static), index, train, rng)
        if hp is None:
            hp = hf
        if hf is None:
            hf = hp
        return ad.concat([hp, hf], axis=1)

    def __call__(self, batch: GraphBatch, train: bool = False, rng=None) -> Tensor:
        h = self.embed(batch, train=train, rng=rng)
        h = ad.dropout(self.fuse(h), self.cfg.dropout_fusion, train, rng)
        return self.head(h)

    def forward_targets(self, batch: GraphBatch, train: bool = False, rng=None) -> Tensor:
        """Rows of the target nodes only, shape (len(targets), T')."""
        return ad.gather_rows(self(batch, train, rng), batch.targets)


def build_variant(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> HDASTGNN:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return HDASTGNN(cfg, rng)
