"""Graph attention, temporal convolution and dense layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor

INCOMING, OUTGOING, SELF_LOOP = 0, 1, 2
DIRECTIONS = ("incoming", "outgoing", "self")


class ConfigError(ValueError):
    pass


# weights: He-uniform, keeps activation variance through rectified layers
WEIGHT_GAIN = np.sqrt(6.0)


def _uniform(rng: np.random.Generator, fan_in: int, shape, gain: float = 1.0) -> np.ndarray:
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True, eq=False)
class AttentionIndex:
    """Neighbour lists of every node, one entry per (updated node, neighbour, label).

    Entries are sorted by the updated node. Each directed dual edge u->v
    contributes an ``incoming`` entry for v and an ``outgoing`` entry for u;
    every node also gets exactly one ``self`` entry.
    """

    num_nodes: int
    dst: np.ndarray
    src: np.ndarray
    label: np.ndarray

    @property
    def num_entries(self) -> int:
        return len(self.dst)

    @classmethod
    def directed(cls, num_nodes: int, edges: np.ndarray) -> "AttentionIndex":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        edges = edges[edges[:, 0] != edges[:, 1]]
        u, v = edges[:, 0], edges[:, 1]
        loops = np.arange(num_nodes, dtype=np.int64)
        dst = np.concatenate([v, u, loops])
        src = np.concatenate([u, v, loops])
        label = np.concatenate([
            np.full(len(v), INCOMING), np.full(len(u), OUTGOING), np.full(num_nodes, SELF_LOOP)
        ]).astype(np.int64)
        return cls._sorted(num_nodes, dst, src, label)

    @classmethod
    def undirected(cls, num_nodes: int, edges: np.ndarray) -> "AttentionIndex":
        """Symmetrised neighbour lists with self-loops; duplicate pairs collapse."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        edges = edges[edges[:, 0] != edges[:, 1]]
        pairs = np.concatenate([edges, edges[:, ::-1]])
        loops = np.repeat(np.arange(num_nodes, dtype=np.int64)[:, None], 2, axis=1)
        pairs = np.unique(np.concatenate([pairs, loops]), axis=0)
        # pairs are (neighbour, updated node)
        return cls._sorted(num_nodes, pairs[:, 1], pairs[:, 0], np.zeros(len(pairs), dtype=np.int64))

    @classmethod
    def _sorted(cls, num_nodes, dst, src, label):
        order = np.lexsort((label, src, dst))
        return cls(num_nodes, dst[order], src[order], label[order])


def _attend(scores: Tensor, values: Tensor, index: AttentionIndex, value_rows: np.ndarray,
            slope: float) -> tuple[Tensor, Tensor]:
    """Softmax the per-entry scores around each updated node and sum the messages."""
    alpha = ad.softmax_over_groups(ad.leaky_relu(scores, slope), index.dst, index.num_nodes)
    messages = ad.gather_rows(values, value_rows)                      # (E, *S, H, Ch)
    weighted = ad.mul(messages, ad.reshape(alpha, alpha.shape + (1,)))
    return ad.segment_sum(weighted, index.dst, index.num_nodes), alpha


class DGAT(Module):
    """Directed graph attention with separate parameters per edge label.

    Works on inputs of shape (N, C_in) or (N, *S, C_in); parameters are shared
    across the middle axes (e.g. every time step of a speed profile).
    """

    def __init__(self, in_dim: int, out_dim: int, heads: int, rng: np.random.Generator,
                 slope: float = 0.2, activate: bool = True, self_prior: float = 0.0):
        if out_dim % heads:
            raise ConfigError(f"hidden width {out_dim} is not divisible by {heads} heads")
        self.in_dim, self.out_dim, self.heads = in_dim, out_dim, heads
        self.head_dim = out_dim // heads
        self.slope = slope
        self.activate = activate
        ch = self.head_dim
        self.W = [ad.parameter(_uniform(rng, in_dim, (in_dim, out_dim), WEIGHT_GAIN), f"W_{d}") for d in DIRECTIONS]
        self.b = [ad.parameter(np.zeros(out_dim), f"b_{d}") for d in DIRECTIONS]
        self.a = [ad.parameter(_uniform(rng, 3 * ch, (heads, 3 * ch)), f"a_{d}") for d in DIRECTIONS]
        self.d = [ad.parameter(rng.normal(0.0, 0.1, size=(heads, ch)), f"d_{d}") for d in DIRECTIONS]
        if self_prior:
            # self-loop embedding chosen so its score term starts at self_prior in every head
            a_dir = self.a[SELF_LOOP].value[:, 2 * ch:]
            d_self = self_prior * a_dir / np.sum(a_dir ** 2, axis=1, keepdims=True)
            self.d[SELF_LOOP].value = d_self.astype(self.d[SELF_LOOP].value.dtype)

    def __call__(self, h: Tensor, index: AttentionIndex, return_attention: bool = False):
        n = h.shape[0]
        mid = h.shape[1:-1]
        hh, ch = self.heads, self.head_dim
        projs, s_dst, s_src, s_dir = [], [], [], []
        for c in range(3):
            p = ad.reshape(ad.add(ad.matmul(h, self.W[c]), self.b[c]), (n,) + mid + (hh, ch))
            a = self.a[c]
            projs.append(p)
            s_dst.append(ad.head_dot(p, a[:, :ch]))
            s_src.append(ad.head_dot(p, a[:, ch:2 * ch]))
            s_dir.append(ad.reshape(ad.sum_(ad.mul(self.d[c], a[:, 2 * ch:]), axis=-1), (1, hh)))
        proj_all = ad.concat(projs, axis=0)                             # (3N, *S, H, Ch)
        dst_rows = index.label * n + index.dst
        src_rows = index.label * n + index.src
        dir_term = ad.gather_rows(ad.concat(s_dir, axis=0), index.label)  # (E, H)
        dir_term = ad.reshape(dir_term, (index.num_entries,) + (1,) * len(mid) + (hh,))
        scores = ad.add(
            ad.add(ad.gather_rows(ad.concat(s_dst, axis=0), dst_rows),
                   ad.gather_rows(ad.concat(s_src, axis=0), src_rows)),
            dir_term,
        )
        out, alpha = _attend(scores, proj_all, index, src_rows, self.slope)
        out = ad.reshape(out, (n,) + mid + (self.out_dim,))
        if self.activate:
            out = ad.leaky_relu(out, self.slope)
        return (out, alpha) if return_attention else out


class GAT(Module):
    """Standard single-parameter-set graph attention on symmetrised edges."""

    def __init__(self, in_dim: int, out_dim: int, heads: int, rng: np.random.Generator,
                 slope: float = 0.2, activate: bool = True):
        if out_dim % heads:
            raise ConfigError(f"hidden width {out_dim} is not divisible by {heads} heads")
        self.in_dim, self.out_dim, self.heads = in_dim, out_dim, heads
        self.head_dim = out_dim // heads
        self.slope = slope
        self.activate = activate
        self.W = ad.parameter(_uniform(rng, in_dim, (in_dim, out_dim), WEIGHT_GAIN), "W")
        self.b = ad.parameter(np.zeros(out_dim), "b")
        self.a = ad.parameter(_uniform(rng, 2 * self.head_dim, (heads, 2 * self.head_dim)), "a")

    def __call__(self, h: Tensor, index: AttentionIndex, return_attention: bool = False):
        n = h.shape[0]
        mid = h.shape[1:-1]
        hh, ch = self.heads, self.head_dim
        p = ad.reshape(ad.add(ad.matmul(h, self.W), self.b), (n,) + mid + (hh, ch))
        s_dst = ad.head_dot(p, self.a[:, :ch])
        s_src = ad.head_dot(p, self.a[:, ch:])
        scores = ad.add(ad.gather_rows(s_dst, index.dst), ad.gather_rows(s_src, index.src))
        out, alpha = _attend(scores, p, index, index.src, self.slope)
        out = ad.reshape(out, (n,) + mid + (self.out_dim,))
        if self.activate:
            out = ad.leaky_relu(out, self.slope)
        return (out, alpha) if return_attention else out


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, activation: str | None = None,
                 slope: float = 0.2):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.activation = activation
        self.slope = slope
        self.W = ad.parameter(_uniform(rng, in_dim, (in_dim, out_dim), WEIGHT_GAIN), "W")
        self.b = ad.parameter(np.zeros(out_dim), "b")

    def __call__(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.in_dim:
            raise ad.ShapeError(f"dense layer expects width {self.in_dim}, got shape {h.shape}")
        out = ad.add(ad.matmul(h, self.W), self.b)
        if self.activation == "relu":
            out = ad.relu(out)
        elif self.activation == "leaky_relu":
            out = ad.leaky_relu(out, self.slope)
        return out


class NodeDense(Dense):
    """Per-node stand-in for a graph layer: same call signature, ignores the graph."""

    def __call__(self, h: Tensor, index: AttentionIndex | None = None) -> Tensor:
        return super().__call__(h)


class TemporalConv(Module):
    """Symmetric 1-d convolution over the time axis of (N, T, C) inputs."""

    def __init__(self, in_dim: int, out_dim: int, kernel_size: int, rng: np.random.Generator,
                 activation: str | None = "relu"):
        if kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd to keep the time length, got {kernel_size}")
        self.kernel_size = kernel_size
        self.activation = activation
        self.kernel = ad.parameter(_uniform(rng, kernel_size * in_dim, (kernel_size, in_dim, out_dim), WEIGHT_GAIN), "kernel")
        self.bias = ad.parameter(np.zeros(out_dim), "bias")

    def __call__(self, h: Tensor) -> Tensor:
        out = ad.add(ad.conv1d_same(h, self.kernel), self.bias)
        return ad.relu(out) if self.activation == "relu" else out
