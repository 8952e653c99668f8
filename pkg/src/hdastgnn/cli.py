"""Command-line pipeline: network, traffic, dual graph, training, evaluation and inference.

Every command resolves its configuration from defaults, an optional flat
``key=value`` file and command-line overrides (flags win), then writes that
resolved config and a status file next to its outputs. Input and output
directories use fixed file names so commands chain without edits::

    hdastgnn gen-net --grid 5x5 --seed 1 --out run
    hdastgnn build-dual --in run
    hdastgnn gen-traffic --in run
    hdastgnn train --in run --seeds 5
    hdastgnn infer --in run --checkpoint run/model_seed0 --weekday 1 --hour 9
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .config import apply_overrides, flatten, read_config, write_config
from .data import NormStats, assemble_dataset
from .graph import GraphError, build_dual, read_dual, read_primal, write_dual, write_primal, static_field_names
from .layers import ConfigError
from .model import ModelConfig, build_variant
from .synth import SynthConfig, SynthConfigError, attach_traffic, gen_network, place_sensors, read_traffic, \
    write_speeds, write_volumes
from .training import (AblationTable, TrainConfig, evaluate, infer_network, mean_report, run_ablations,
                       train_seed, write_hour_slice, write_network_csv, write_results)

log = logging.getLogger("hdastgnn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

NETWORK_FILE = "network.txt"
NODES_FILE = "dual_nodes.csv"
EDGES_FILE = "dual_edges.csv"
SPEEDS_FILE = "speeds.csv"
VOLUMES_FILE = "volumes.csv"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- config

def _parse_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}", EXIT_CONFIG)
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults < config file < ``--set`` < dedicated flags."""
    values: dict[str, str] = {}
    if args.config:
        try:
            values.update(read_config(args.config))
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read config: {exc}", EXIT_CONFIG) from None
    values.update(_parse_sets(args.set))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if getattr(args, "grid", None):
        try:
            rows, cols = (int(x) for x in args.grid.lower().split("x"))
        except ValueError:
            raise CliError(f"--grid expects RxC, got {args.grid!r}", EXIT_CONFIG) from None
        values["synth.rows"], values["synth.cols"] = str(rows), str(cols)
    seed = int(values.get("seed", "0"))
    if getattr(args, "seeds", None) is not None:
        if args.seeds < 1:
            raise CliError("--seeds must be at least 1", EXIT_CONFIG)
        values["train.seeds"] = ",".join(str(seed + i) for i in range(args.seeds))
    values.setdefault("synth.seed", str(seed))

    known = {"seed", "ablate.raw_days"}
    try:
        synth = apply_overrides(SynthConfig(), values, "synth.")
        model = apply_overrides(ModelConfig(), values, "model.")
        train = apply_overrides(TrainConfig(seeds=(seed,)), values, "train.")
    except ValueError as exc:
        raise CliError(f"bad config value: {exc}", EXIT_CONFIG) from None
    known |= set(flatten(synth, "synth.")) | set(flatten(model, "model.")) | set(flatten(train, "train."))
    unknown = sorted(set(values) - known)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}", EXIT_CONFIG)
    try:
        synth.validate()
        model.validate()
    except (SynthConfigError, ConfigError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    return {
        "seed": seed,
        "ablate_raw_days": int(values.get("ablate.raw_days", "28")),
        "synth": synth,
        "model": model,
        "train": train,
    }


def _flat(resolved: dict[str, Any], extra: dict[str, Any]) -> dict[str, Any]:
    out = {"seed": resolved["seed"], "ablate.raw_days": resolved["ablate_raw_days"]}
    out.update(flatten(resolved["synth"], "synth."))
    out.update(flatten(resolved["model"], "model."))
    out.update(flatten(resolved["train"], "train."))
    out.update(extra)
    return out


def write_status(out_dir: Path, command: str, code: int, message: str) -> None:
    status = "ok" if code == EXIT_OK else "error"
    text = f"command={command}\nstatus={status}\ncode={code}\nmessage={message}\n"
    (out_dir / f"{command}.status").write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- inputs

def _require(path: Path) -> Path:
    if not path.exists():
        raise CliError(f"missing input file: {path}", EXIT_DATA)
    return path


def _load_dual(in_dir: Path, with_traffic: bool = True):
    dual = read_dual(_require(in_dir / NODES_FILE), _require(in_dir / EDGES_FILE))
    if with_traffic:
        volumes = in_dir / VOLUMES_FILE
        dual = read_traffic(dual, _require(in_dir / SPEEDS_FILE), volumes if volumes.exists() else None)
    return dual


def _save_model(prefix: Path, model, stats: NormStats) -> None:
    arrays = dict(model.state_dict())
    arrays.update({f"stats.{k}": v for k, v in stats.to_dict().items()})
    ad.save_checkpoint(prefix, arrays)
    write_config(prefix.with_name(prefix.name + ".config"), flatten(model.cfg, "model."))


def _load_model(prefix: Path):
    cfg_path = _require(prefix.with_name(prefix.name + ".config"))
    _require(prefix.with_name(prefix.name + ".bin"))
    values = read_config(cfg_path)
    model_cfg = apply_overrides(ModelConfig(), values, "model.")
    arrays = ad.load_checkpoint(prefix)
    stats = NormStats.from_dict({k[len("stats."):]: v for k, v in arrays.items() if k.startswith("stats.")})
    model = build_variant(model_cfg, 0)
    model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("stats.")})
    return model, stats


# ---------------------------------------------------------------- commands

def cmd_gen_net(args, cfg) -> dict[str, Any]:
    primal = gen_network(cfg["synth"])
    write_primal(primal, args.out / NETWORK_FILE)
    return {"output": str(args.out / NETWORK_FILE)}


def cmd_build_dual(args, cfg) -> dict[str, Any]:
    primal = read_primal(_require(args.input / NETWORK_FILE))
    dual = build_dual(primal)
    write_dual(dual, args.out / NODES_FILE, args.out / EDGES_FILE)
    return {"nodes": dual.num_nodes, "edges": len(dual.edges)}


def cmd_gen_traffic(args, cfg) -> dict[str, Any]:
    dual = _load_dual(args.input, with_traffic=False)
    dual = attach_traffic(place_sensors(dual, cfg["synth"]), cfg["synth"])
    write_dual(dual, args.out / NODES_FILE, args.out / EDGES_FILE)
    write_speeds(dual, args.out / SPEEDS_FILE)
    write_volumes(dual, args.out / VOLUMES_FILE)
    return {"sensors": len(dual.labeled), "days": dual.num_days}


def cmd_train(args, cfg) -> dict[str, Any]:
    dual = _load_dual(args.input)
    samples = assemble_dataset(dual, cfg["model"].K)
    rows = []
    for seed in cfg["train"].seeds:
        model, result = train_seed(cfg["model"], dual, samples, cfg["train"], seed)
        _save_model(args.out / f"model_seed{seed}", model, result.stats)
        result.write_curve(args.out / f"curve_seed{seed}.csv")
        rows.append(("HDA-STGNN", seed, result.val_report))
        log.info("seed %d: best epoch %d, validation GEH %.4f", seed, result.best_epoch, result.val_report.geh)
    write_results(args.out / "results.csv", rows)
    table = AblationTable(rows)
    table.write(args.out / "report.csv")
    mean = mean_report([r[2] for r in rows])
    return {"seeds": len(rows), "mean_geh": f"{mean.geh:.6f}"}


def cmd_evaluate(args, cfg) -> dict[str, Any]:
    dual = _load_dual(args.input)
    model, stats = _load_model(args.checkpoint)
    samples = assemble_dataset(dual, model.cfg.K)
    nodes = None
    if args.nodes:
        nodes = {int(x) for x in args.nodes.split(",") if x.strip()}
        samples = [s for s in samples if s.node in nodes]
    if not samples:
        raise CliError("no labeled samples to evaluate", EXIT_DATA)
    report = evaluate(model, dual, samples, stats)
    write_results(args.out / "evaluation.csv", [("HDA-STGNN", cfg["seed"], report)])
    return {"geh": f"{report.geh:.6f}", "samples": len(samples)}


def cmd_ablate(args, cfg) -> dict[str, Any]:
    dual = _load_dual(args.input)
    if args.raw_input is not None:
        dual_raw = _load_dual(args.raw_input)
    else:
        # raw days on the same network and sensors
        dual_raw = attach_traffic(dual, replace(cfg["synth"], raw_days=cfg["ablate_raw_days"]))
    k = cfg["model"].K
    table = run_ablations(dual, assemble_dataset(dual, k), dual_raw, assemble_dataset(dual_raw, k),
                          cfg["model"], cfg["train"])
    table.write(args.out / "ablation.csv")
    table.write_per_seed(args.out / "ablation_per_seed.csv")
    return {"rows": len(table.averaged())}


def cmd_infer(args, cfg) -> dict[str, Any]:
    dual = _load_dual(args.input)
    model, stats = _load_model(args.checkpoint)
    days = [d for d, wd in enumerate(dual.weekdays) if wd == args.weekday]
    if not days:
        raise CliError(f"no speed profiles for weekday {args.weekday}", EXIT_DATA)
    if not 0 <= args.hour < model.cfg.T_out:
        raise CliError(f"--hour must lie in [0, {model.cfg.T_out})", EXIT_CONFIG)
    volumes = infer_network(model, dual, days[0], stats)
    write_network_csv(volumes, args.weekday, args.out / "network_volumes.csv")
    write_hour_slice(volumes, args.hour, args.out / f"hour{args.hour:02d}.csv")
    return {"nodes": len(volumes), "day": days[0]}


def feature_histograms(dual, bins: int = 10) -> list[list[Any]]:
    """Rows (feature, bin_lo, bin_hi, labeled_share, unlabeled_share)."""
    labeled = np.zeros(dual.num_nodes, dtype=bool)
    labeled[dual.labeled] = True
    columns = {name: dual.static[:, i] for i, name in enumerate(static_field_names())}
    if dual.speeds is not None:
        columns["mean_speed"] = dual.speeds.mean(axis=(1, 2))
    rows = []
    for name, values in columns.items():
        lo, hi = float(values.min()), float(values.max())
        edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
        shares = []
        for mask in (labeled, ~labeled):
            counts, _ = np.histogram(values[mask], bins=edges)
            shares.append(counts / max(mask.sum(), 1))
        for b in range(bins):
            rows.append([name, f"{edges[b]:.6g}", f"{edges[b + 1]:.6g}", f"{shares[0][b]:.6f}", f"{shares[1][b]:.6f}"])
    return rows


def cmd_report_features(args, cfg) -> dict[str, Any]:
    dual = _load_dual(args.input)
    rows = feature_histograms(dual, args.bins)
    with open(args.out / "feature_histograms.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "bin_lo", "bin_hi", "labeled_share", "unlabeled_share"])
        w.writerows(rows)
    return {"labeled": len(dual.labeled), "unlabeled": len(dual.unlabeled)}


COMMANDS = {
    "gen-net": cmd_gen_net,
    "build-dual": cmd_build_dual,
    "gen-traffic": cmd_gen_traffic,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "infer": cmd_infer,
    "report-features": cmd_report_features,
}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="root seed for every random substream")
    common.add_argument("--out", type=Path, help="output directory (defaults to --in)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hdastgnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-net", parents=[common], help="synthetic grid road network")
    p.add_argument("--grid", help="RxC intersections, e.g. 5x5")

    for name, text in (("build-dual", "dual graph from a road network"),
                       ("gen-traffic", "speed and count traffic on a dual graph"),
                       ("report-features", "labeled vs unlabeled feature histograms")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--in", dest="input", type=Path, required=True)
        if name == "report-features":
            p.add_argument("--bins", type=int, default=10)

    p = sub.add_parser("train", parents=[common], help="train one model per seed")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--seeds", type=int, help="number of seeds, counted up from --seed")

    p = sub.add_parser("evaluate", parents=[common], help="metrics of a checkpoint on labeled nodes")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint prefix")
    p.add_argument("--nodes", help="comma-separated node ids to restrict to")

    p = sub.add_parser("ablate", parents=[common], help="full model and six variants")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--raw-in", dest="raw_input", type=Path, help="raw-day data for variant (6)")
    p.add_argument("--seeds", type=int)

    p = sub.add_parser("infer", parents=[common], help="volumes for every node of one weekday")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--weekday", type=int, default=1)
    p.add_argument("--hour", type=int, default=9)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out is None:
        if getattr(args, "input", None) is None:
            parser.error("--out is required")
        args.out = args.input
    args.out.mkdir(parents=True, exist_ok=True)

    code, message = EXIT_OK, ""
    try:
        cfg = resolve_config(args)
        extra = {f"run.{k}": v for k, v in sorted(vars(args).items())
                 if k not in ("config", "set", "verbose") and v is not None}
        write_config(args.out / f"{args.command}.config", _flat(cfg, extra))
        summary = COMMANDS[args.command](args, cfg)
        message = " ".join(f"{k}={v}" for k, v in summary.items())
    except CliError as exc:
        code, message = exc.code, str(exc)
    except (ConfigError, SynthConfigError) as exc:
        code, message = EXIT_CONFIG, str(exc)
    except (GraphError, KeyError, OSError) as exc:
        code, message = EXIT_DATA, str(exc)
    except ValueError as exc:
        code, message = EXIT_DATA, str(exc)
    except (ad.NumericError, FloatingPointError) as exc:
        code, message = EXIT_NUMERIC, str(exc)
    write_status(args.out, args.command, code, message)
    if code != EXIT_OK:
        print(f"hdastgnn {args.command}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
