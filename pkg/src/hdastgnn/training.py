"""Training loop, sensor hold-out, traffic metrics, ablations and network-wide inference."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import substream
from .data import NormStats, Sample, collate, day_batch, normalize
from .graph import DualGraph
from .model import HDASTGNN, ModelConfig, build_variant

log = logging.getLogger(__name__)


class TrainingDiverged(ad.NumericError):
    pass


@dataclass
class TrainConfig:
    delta: float = 50.0
    batch_size: int = 64
    epochs: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    val_fraction: float = 0.2
    patience: int = 15
    init_output_bias: bool = True


@dataclass
class MetricsReport:
    rmse: float
    mape: float
    geh: float
    pct_geh_gt5: float

    def as_row(self) -> list[float]:
        return [self.rmse, self.mape, self.geh, self.pct_geh_gt5]


# ---------------------------------------------------------------- loss and metrics

def huber_profile_loss(pred, target, delta: float = 50.0) -> Tensor:
    """Mean element-wise Huber loss of ``target - pred`` over the profile (and batch)."""
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"profile lengths differ: {pred.shape} vs {target.shape}")
    return ad.mean(ad.huber(pred, target, delta))


def geh(estimated, observed) -> np.ndarray:
    """GEH statistic per hourly pair; 0 where both volumes are 0."""
    e = np.asarray(estimated, dtype=np.float64)
    o = np.asarray(observed, dtype=np.float64)
    total = e + o
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sqrt(np.where(total > 0, 2.0 * (e - o) ** 2 / total, 0.0))
    return out


def metrics(estimated, observed) -> MetricsReport:
    """RMSE, MAPE (zero observations masked), mean GEH and share of GEH > 5, pooled over all pairs."""
    e = np.asarray(estimated, dtype=np.float64).ravel()
    o = np.asarray(observed, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("metrics need at least one estimate")
    if e.shape != o.shape:
        raise ValueError(f"estimate and observation counts differ: {e.size} vs {o.size}")
    err = e - o
    nz = o != 0
    mape = float(np.mean(np.abs(err[nz]) / np.abs(o[nz])) * 100.0) if nz.any() else 0.0
    g = geh(e, o)
    return MetricsReport(
        rmse=float(np.sqrt(np.mean(err ** 2))),
        mape=mape,
        geh=float(g.mean()),
        pct_geh_gt5=float(np.mean(g > 5.0) * 100.0),
    )


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    arr = np.array([r.as_row() for r in reports])
    return MetricsReport(*arr.mean(axis=0))


# ---------------------------------------------------------------- split

def split_sensors(labeled: Sequence[int], fraction: float, seed: int,
                  groups: dict[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Hold out ``round(fraction * n)`` sensors; ``groups`` (node -> class) stratifies the draw."""
    labeled = np.unique(np.asarray(labeled, dtype=np.int64))
    if len(labeled) < 2:
        raise ValueError("need at least two labeled nodes to hold some out")
    if not 0.0 <= fraction < 1.0:
        raise ValueError("validation fraction must lie in [0, 1)")
    n_val = int(round(fraction * len(labeled)))
    if n_val == 0:
        warnings.warn("validation split is empty", stacklevel=2)
    rng = substream(seed, "split")
    if groups is None:
        key = rng.permutation(len(labeled)).astype(np.float64)
    else:
        cls = np.array([groups[int(v)] for v in labeled])
        key = np.empty(len(labeled))
        for c in np.unique(cls):
            members = np.flatnonzero(cls == c)
            key[members] = (rng.permutation(len(members)) + rng.random(len(members))) / len(members)
    perm = np.argsort(key, kind="stable")
    val = np.sort(labeled[perm[:n_val]])
    train = np.sort(labeled[perm[n_val:]])
    return train, val


# ---------------------------------------------------------------- optimiser

class Adam:
    """Adam with bias-corrected moment estimates."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------- prediction

def predict_days(model: HDASTGNN, dual: DualGraph, days: Sequence[int], stats: NormStats) -> dict[int, np.ndarray]:
    """Volumes (veh/h, clamped at 0) of every node for each day.

    Running the whole day graph gives each node the same output as a forward
    on its own K-hop subgraph, because the model has exactly K graph layers
    per branch.
    """
    out = {}
    for d in days:
        pred = model(day_batch(dual, d, stats), train=False).value * stats.volume_scale
        out[d] = np.maximum(pred, 0.0)
    return out


def predict_samples(model: HDASTGNN, dual: DualGraph, samples: Sequence[Sample], stats: NormStats) -> np.ndarray:
    days = sorted({s.day for s in samples})
    by_day = predict_days(model, dual, days, stats)
    return np.stack([by_day[s.day][s.node] for s in samples]) if samples else np.zeros((0, model.cfg.T_out))


def evaluate(model: HDASTGNN, dual: DualGraph, samples: Sequence[Sample], stats: NormStats) -> MetricsReport:
    pred = predict_samples(model, dual, samples, stats)
    return metrics(pred, np.stack([s.target for s in samples]))


def infer_network(model: HDASTGNN, dual: DualGraph, day: int, stats: NormStats) -> np.ndarray:
    """(|V|, T') volume estimates for every dual node, labeled or not."""
    return predict_days(model, dual, [day], stats)[day]


def write_network_csv(volumes: np.ndarray, weekday: int, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "weekday"] + [f"h{h}" for h in range(volumes.shape[1])])
        for v, row in enumerate(volumes):
            w.writerow([v, weekday] + [f"{x:.4f}" for x in row])


def write_hour_slice(volumes: np.ndarray, hour: int, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "volume"])
        for v, row in enumerate(volumes):
            w.writerow([v, f"{row[hour]:.4f}"])


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    state: dict[str, np.ndarray]
    stats: NormStats
    curve: list[tuple[int, float, float, float]]
    train_nodes: np.ndarray
    val_nodes: np.ndarray
    best_epoch: int
    val_report: MetricsReport | None = None

    def write_curve(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_geh"])
            for epoch, tl, vl, vg in self.curve:
                w.writerow([epoch, repr(tl), repr(vl), repr(vg)])


def train(model: HDASTGNN, dual: DualGraph, samples: Sequence[Sample], cfg: TrainConfig, seed: int,
          on_batch: Callable[[int, int, HDASTGNN], None] | None = None,
          val_nodes: Sequence[int] | None = None) -> TrainResult:
    """Mini-batch Adam on the target-node Huber loss, early-stopped on held-out-sensor GEH.

    Validation sensors are drawn among the nodes of ``samples`` unless
    ``val_nodes`` names them; they never reach a gradient or the
    normalisation statistics. The model ends up holding the best-validation
    parameters.
    """
    if val_nodes is None:
        classes = {s.node: dual.nodes[s.node].attrs.functional_class for s in samples}
        train_nodes, val_nodes = split_sensors(list(classes), cfg.val_fraction, seed, classes)
    else:
        val_nodes = np.unique(np.asarray(val_nodes, dtype=np.int64))
        train_nodes = np.array(sorted({s.node for s in samples} - set(val_nodes.tolist())), dtype=np.int64)
    val_set = set(val_nodes.tolist())
    train_raw = [s for s in samples if s.node not in val_set]
    val_samples = [s for s in samples if s.node in val_set]
    train_samples, stats = normalize(train_raw)
    val_targets = np.stack([s.target for s in val_samples]) if val_samples else None

    if cfg.init_output_bias and train_samples:
        # start from the mean training profile instead of zero
        mean_profile = np.mean([s.target for s in train_samples], axis=0)
        model.head.b.value[...] = mean_profile / stats.volume_scale
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    shuffle_rng = substream(seed, "shuffle")
    dropout_rng = substream(seed, "dropout")
    curve = []
    best_geh, best_epoch, best_state = math.inf, 0, model.state_dict()
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_samples))
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = collate([train_samples[i] for i in order[start:start + cfg.batch_size]])
            opt.zero_grad()
            pred = ad.mul(model.forward_targets(batch, train=True, rng=dropout_rng), stats.volume_scale)
            loss = huber_profile_loss(pred, batch.volumes, cfg.delta)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(f"loss became {float(loss.value)} at epoch {epoch}, batch {b}")
            ad.backward(loss)
            if on_batch is not None:
                on_batch(epoch, b, model)
            opt.step()
            total += float(loss.value) * len(batch.targets)
            count += len(batch.targets)
        train_loss = total / max(count, 1)

        if val_samples:
            pred = predict_samples(model, dual, val_samples, stats)
            val_loss = float(huber_profile_loss(pred, val_targets, cfg.delta).value)
            val_geh = metrics(pred, val_targets).geh
        else:
            val_loss = val_geh = train_loss
        curve.append((epoch, train_loss, val_loss, val_geh))
        log.debug("epoch %d train %.4f val %.4f geh %.4f", epoch, train_loss, val_loss, val_geh)
        if val_geh < best_geh:
            best_geh, best_epoch, best_state, stale = val_geh, epoch, model.state_dict(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state_dict(best_state)
    report = evaluate(model, dual, val_samples, stats) if val_samples else None
    return TrainResult(best_state, stats, curve, train_nodes, val_nodes, best_epoch, report)


def train_seed(model_cfg: ModelConfig, dual: DualGraph, samples: Sequence[Sample], cfg: TrainConfig,
               seed: int, **kwargs) -> tuple[HDASTGNN, TrainResult]:
    model = build_variant(model_cfg, substream(seed, "init"))
    result = train(model, dual, samples, cfg, seed, **kwargs)
    return model, result


# ---------------------------------------------------------------- baselines and ablations

def class_mean_baseline(dual: DualGraph, train_samples: Sequence[Sample],
                        eval_samples: Sequence[Sample]) -> np.ndarray:
    """Mean training profile per functional class; classes without sensors get the overall mean."""
    if not train_samples:
        raise ValueError("baseline needs training samples")
    fc = np.array([node.attrs.functional_class for node in dual.nodes])
    groups: dict[int, list[np.ndarray]] = {}
    for s in train_samples:
        groups.setdefault(int(fc[s.node]), []).append(s.target)
    means = {c: np.mean(pool, axis=0) for c, pool in groups.items()}
    overall = np.mean([s.target for s in train_samples], axis=0)
    return np.stack([means.get(int(fc[s.node]), overall) for s in eval_samples])


ABLATION_ROWS = (
    ("HDA-STGNN", {}),
    ("Ablation (1)", {"no_st_branch": True}),
    ("Ablation (2)", {"no_spatial_branch": True}),
    ("Ablation (3)", {"no_neighborhood": True}),
    ("Ablation (4)", {"single_branch_fusion": True}),
    ("Ablation (5)", {"undirected_gat": True}),
    ("Ablation (6)", {}),
)


@dataclass
class AblationTable:
    per_seed: list[tuple[str, int, MetricsReport]] = field(default_factory=list)

    def averaged(self) -> list[tuple[str, MetricsReport]]:
        names = [name for name, _ in ABLATION_ROWS if any(r[0] == name for r in self.per_seed)]
        return [(name, mean_report([m for n, _, m in self.per_seed if n == name])) for name in names]

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "rmse", "mape", "geh", "pct_geh_gt5"])
            for name, m in self.averaged():
                w.writerow([name] + [f"{x:.4f}" for x in m.as_row()])

    def write_per_seed(self, path: str | Path) -> None:
        write_results(path, self.per_seed)


def write_results(path: str | Path, rows: Sequence[tuple[str, int, MetricsReport]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "seed", "rmse", "mape", "geh", "pct_geh_gt5"])
        for name, seed, m in rows:
            w.writerow([name, seed] + [f"{x:.6f}" for x in m.as_row()])


def run_ablations(dual_avg: DualGraph, samples_avg: Sequence[Sample], dual_raw: DualGraph,
                  samples_raw: Sequence[Sample], base: ModelConfig, cfg: TrainConfig,
                  seeds: Sequence[int] | None = None) -> AblationTable:
    """Full model and variants (1)-(5) on averaged days, full model on raw days (6)."""
    seeds = cfg.seeds if seeds is None else seeds
    table = AblationTable()
    for name, flags in ABLATION_ROWS:
        model_cfg = replace(base, **flags)
        dual, samples = (dual_raw, samples_raw) if name == "Ablation (6)" else (dual_avg, samples_avg)
        for seed in seeds:
            _, result = train_seed(model_cfg, dual, samples, cfg, seed)
            table.per_seed.append((name, seed, result.val_report))
            log.info("%s seed %d: GEH %.3f", name, seed, result.val_report.geh)
    return table
