"""Command-line entry point: generate, train, eval, zeroshot, sweep.

Every command reads one JSON config (all times in seconds) whose sections
mirror ``DEFAULTS``; ``--set section.key=value`` overrides single keys
(values are parsed as JSON, falling back to a plain string). Unknown keys
are rejected.

Exit codes: 0 success, 2 configuration or compatibility error, 3 numerical
divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .dynamics import SystemSpec, load_trajectory_csv, save_trajectory_csv, simulate_many
from .errors import ConfigError, DGONError, DivergenceError, UndefinedMetricError, WeightFileError
from .evaluation import (OraclePredictor, SweepCell, evaluate, write_rollout_csv,
                         write_sweep_csv, zero_shot_eval)
from .graph import Graph, induced_subgraph, load_graph, random_connected_graph, save_graph
from .model import DeepGraphONet, ModelConfig, load_params, save_params
from .sampling import SamplingConfig, mode_for_variant, split_by_time, split_trajectories
from .training import TrainConfig, train

log = logging.getLogger("deepgraphonet")

DEFAULTS = {
    "seed": 0,
    # random_connected_graph(nodes, extra_edges, seed) unless a JSON graph file is given
    "graph": {"path": None, "nodes": 6, "extra_edges": 3, "seed": 1},
    "system": {"kind": "heat", "diffusivity": 1.0, "coupling": 1.0, "omega": None,
               "ic_low": -1.0, "ic_high": 1.0},
    # steps: integration steps per trajectory (steps + 1 rows); dt in seconds
    "generate": {"count": 300, "steps": 700, "dt": 1e-3},
    # manifest from `generate`, or explicit CSV files plus graph.path;
    # nodes: observed node subset (training then runs on the induced subgraph)
    "data": {"manifest": None, "csv": None, "dt": 1e-3, "header": False, "nodes": None},
    "sampling": {"t_M": 0.05, "h": 0.02, "m": 51, "queries_per_anchor": 4, "anchor_stride": None,
                 "fractions": [0.6, 0.2, 0.2], "split": "trajectory"},
    "model": {"n_gnn_layers": 4, "gnn_hidden_width": 64, "n_trunk_layers": 3,
              "trunk_hidden_width": 64, "latent_dim": 32, "activation": "tanh",
              "variant": "standard"},
    "train": {"epochs": 500, "batch_size": 64, "lr": 1e-3, "beta1": 0.9, "beta2": 0.999,
              "eps": 1e-8, "shuffle": True, "val_every": 1},
    # partition: which trajectories of the data set are evaluated ("test" or "all")
    "eval": {"weights": None, "autoregressive": False, "oracle": False, "partition": "test"},
    # columns: file columns to read for graph_prime (default: all)
    "zeroshot": {"graph_prime": None, "manifest": None, "columns": None},
    # unset grid axes fall back to the single sampling/model value
    "sweep": {"t_M": None, "h": None, "variants": None},
}


# ---------------------------------------------------------------- config

def _check_keys(cfg: dict, ref: dict, where: str = "") -> None:
    for key, val in cfg.items():
        name = f"{where}{key}"
        if key not in ref:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(ref[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            _check_keys(val, ref[key], name + ".")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=(), seed=None) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
    _check_keys(user, DEFAULTS)
    cfg = _merge(DEFAULTS, user)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node, ref = cfg, DEFAULTS
        for p in parts[:-1]:
            if p not in ref or not isinstance(ref[p], dict):
                raise ConfigError(f"unknown config key {key!r}")
            node, ref = node[p], ref[p]
        if parts[-1] not in ref or isinstance(ref[parts[-1]], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(text)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def model_config(cfg: dict, variant: str | None = None, t_M=None, h=None) -> ModelConfig:
    s = cfg["sampling"]
    kw = dict(cfg["model"])
    if variant is not None:
        kw["variant"] = variant
    return ModelConfig(**kw, m=int(s["m"]), t_M=float(s["t_M"] if t_M is None else t_M),
                       h=float(s["h"] if h is None else h))


def sampling_config(cfg: dict, variant: str, t_M=None, h=None) -> SamplingConfig:
    s = cfg["sampling"]
    return SamplingConfig(t_M=float(s["t_M"] if t_M is None else t_M),
                          h=float(s["h"] if h is None else h), m=int(s["m"]),
                          queries_per_anchor=int(s["queries_per_anchor"]),
                          anchor_stride=s["anchor_stride"], mode=mode_for_variant(variant),
                          seed=int(cfg["seed"]))


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"], seed=int(cfg["seed"]))


# ---------------------------------------------------------------- data

def build_graph(cfg: dict) -> Graph:
    gc = cfg["graph"]
    if gc["path"]:
        return load_graph(gc["path"])
    return random_connected_graph(int(gc["nodes"]), int(gc["extra_edges"]), int(gc["seed"]))


def _read_manifest(path, g_override: Graph | None = None, columns=None):
    path = Path(path)
    man = json.loads(path.read_text())
    g = g_override if g_override is not None else load_graph(path.parent / man["graph"])
    dt = float(man["dt"])
    trajs = [load_trajectory_csv(path.parent / e["file"], g, dt, columns=columns)
             for e in man["trajectories"]]
    return g, trajs


def load_data(cfg: dict):
    """Graph and trajectories for training/eval, restricted to ``data.nodes`` if set."""
    d = cfg["data"]
    if d["manifest"]:
        g, trajs = _read_manifest(d["manifest"])
    elif d["csv"]:
        if not cfg["graph"]["path"]:
            raise ConfigError("data.csv needs graph.path")
        g = load_graph(cfg["graph"]["path"])
        trajs = [load_trajectory_csv(p, g, float(d["dt"]), header=bool(d["header"]))
                 for p in d["csv"]]
    else:
        raise ConfigError("no data source: set data.manifest or data.csv")
    if d["nodes"] is not None:
        sub = induced_subgraph(g, d["nodes"])
        trajs = [tr.restrict(d["nodes"], sub) for tr in trajs]
        g = sub
    return g, trajs


def make_split(cfg: dict, trajs, sampling: SamplingConfig | None):
    fr = tuple(cfg["sampling"]["fractions"])
    mode = cfg["sampling"]["split"]
    if mode == "trajectory":
        return split_trajectories(trajs, fr, seed=int(cfg["seed"]), sampling=sampling)
    if mode == "time":
        if len(trajs) != 1:
            raise ConfigError("a time-based split needs exactly one trajectory")
        return split_by_time(trajs[0], fr, sampling=sampling)
    raise ConfigError(f"sampling.split must be 'trajectory' or 'time', got {mode!r}")


def eval_trajectories(cfg: dict, trajs):
    part = cfg["eval"]["partition"]
    if part == "all":
        return list(trajs)
    if part == "test":
        return make_split(cfg, trajs, None).test_trajs
    raise ConfigError(f"eval.partition must be 'test' or 'all', got {part!r}")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_generate(cfg: dict, out: Path) -> int:
    g = build_graph(cfg)
    gen = cfg["generate"]
    spec = SystemSpec(**cfg["system"], seed=int(cfg["seed"]))
    trajs = simulate_many(spec, g, int(gen["count"]), int(gen["steps"]), float(gen["dt"]))
    out.mkdir(parents=True, exist_ok=True)
    save_graph(g, out / "graph.json")
    entries = []
    for i, tr in enumerate(trajs):
        name = f"traj_{i:04d}.csv"
        save_trajectory_csv(tr, out / name)
        entries.append({"file": name, "seed": spec.seed + i})
    _write_json(out / "manifest.json", {
        "graph": "graph.json",
        "graph_checksum": g.checksum(),
        "dt": float(gen["dt"]),
        "steps": int(gen["steps"]),
        "system": cfg["system"],
        "trajectories": entries,
    })
    print(f"wrote {len(entries)} trajectories to {out}")
    return 0


def run_training(cfg: dict, g: Graph, trajs, variant: str | None = None, t_M=None, h=None,
                 checkpoint=None):
    mcfg = model_config(cfg, variant, t_M, h)
    split = make_split(cfg, trajs, sampling_config(cfg, mcfg.variant, t_M, h))
    model = DeepGraphONet(mcfg, seed=int(cfg["seed"]))
    tcfg = train_config(cfg)
    tcfg.checkpoint_path = checkpoint
    model, hist = train(model, split, tcfg, g)
    return model, hist, split


def cmd_train(cfg: dict, out: Path, dry_run: bool = False) -> int:
    g, trajs = load_data(cfg)
    mcfg = model_config(cfg)
    if dry_run:
        split = make_split(cfg, trajs, sampling_config(cfg, mcfg.variant))
        train_config(cfg)
        shapes = {"nodes": g.node_count, "trajectories": [len(split.train_trajs),
                  len(split.val_trajs), len(split.test_trajs)],
                  "triplets": [len(split.train), len(split.val or ()), len(split.test or ())],
                  "branch_input": [g.node_count, mcfg.input_width],
                  "parameters": DeepGraphONet(mcfg).store.num_parameters()}
        print(json.dumps(shapes, sort_keys=True))
        return 0
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    model, hist, _ = run_training(cfg, g, trajs, checkpoint=str(out / "weights.dgon"))
    hist.to_csv(out / "history.csv")
    best = hist.val_loss[hist.val_epochs.index(hist.best_epoch)] if hist.val_loss else None
    _write_json(out / "train_summary.json", {
        "best_epoch": hist.best_epoch,
        "val_loss": best,
        "graph_id": g.checksum(),
        "model": model.config.to_dict(),
        "timing": {"seconds": time.perf_counter() - t0,
                   "epoch_seconds_mean": float(np.mean(hist.epoch_seconds))},
    })
    print(f"final validation loss: {best!r} (best epoch {hist.best_epoch})")
    return 0


def _load_weights(cfg: dict, path) -> DeepGraphONet:
    if not path:
        raise ConfigError("no weights given (use --weights or eval.weights)")
    model = load_params(path)
    s = cfg["sampling"]
    model.check_compatible(cfg["model"]["variant"], int(s["m"]), float(s["t_M"]), float(s["h"]))
    return model


def _write_report(rep, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rep.to_json(out / "report.json")
    for i, res in enumerate(rep.rollouts):
        write_rollout_csv(res, out / f"pred_{i:04d}.csv", out / f"true_{i:04d}.csv")


def _evaluator(cfg: dict, weights, trajs):
    """The trained model, or an oracle that replays ``trajs`` when eval.oracle is set."""
    if cfg["eval"]["oracle"]:
        return OraclePredictor(trajs), {"oracle": True}
    model = _load_weights(cfg, weights)
    return model, {"model": model.config.to_dict()}


def cmd_eval(cfg: dict, out: Path, weights=None) -> int:
    g, trajs = load_data(cfg)
    test = eval_trajectories(cfg, trajs)
    predictor, echo = _evaluator(cfg, weights or cfg["eval"]["weights"], test)
    s = cfg["sampling"]
    variant = cfg["model"]["variant"]
    rep = evaluate(predictor, g, test, float(s["t_M"]), int(s["m"]), float(s["h"]),
                   mode=mode_for_variant(variant), seed=int(cfg["seed"]),
                   autoregressive=bool(cfg["eval"]["autoregressive"]), graph_id=g.checksum(),
                   config={**echo, "variant": variant})
    _write_report(rep, out)
    print(f"pooled L1 relative error: {rep.pooled_error:.6g}% "
          f"(mean {rep.mean_error:.6g}%, std {rep.std_error:.6g}%)")
    return 0


def cmd_zeroshot(cfg: dict, out: Path, weights=None, graph_prime=None) -> int:
    z = cfg["zeroshot"]
    gp_path = graph_prime or z["graph_prime"]
    if not gp_path:
        raise ConfigError("no target graph given (use --graph-prime or zeroshot.graph_prime)")
    g_prime = load_graph(gp_path)
    manifest = z["manifest"] or cfg["data"]["manifest"]
    if not manifest:
        raise ConfigError("zeroshot needs trajectories on the target graph (zeroshot.manifest)")
    train_id = None
    try:
        train_id = load_data(cfg)[0].checksum() if cfg["data"]["manifest"] else None
    except DGONError:
        pass
    _, trajs = _read_manifest(manifest, g_prime, z["columns"])
    test = eval_trajectories(cfg, trajs)
    predictor, echo = _evaluator(cfg, weights or cfg["eval"]["weights"], test)
    s = cfg["sampling"]
    variant = cfg["model"]["variant"]
    rep = zero_shot_eval(predictor, g_prime, test, float(s["t_M"]), int(s["m"]), float(s["h"]),
                         seed=int(cfg["seed"]), graph_id=g_prime.checksum(),
                         train_graph_id=train_id,
                         autoregressive=bool(cfg["eval"]["autoregressive"]),
                         config={**echo, "variant": variant, "mode": mode_for_variant(variant)})
    _write_report(rep, out)
    print(f"zero-shot pooled L1 relative error: {rep.pooled_error:.6g}%")
    return 0


def cmd_sweep(cfg: dict, out: Path) -> int:
    g, trajs = load_data(cfg)
    sw = cfg["sweep"]
    s = cfg["sampling"]
    grid_t_M = [s["t_M"]] if sw["t_M"] is None else sw["t_M"]
    grid_h = [s["h"]] if sw["h"] is None else sw["h"]
    variants = [cfg["model"]["variant"]] if sw["variants"] is None else sw["variants"]
    if not grid_t_M or not grid_h or not variants:
        raise ConfigError("sweep grid is empty")
    cells = []
    for variant in variants:
        for t_M in grid_t_M:
            for h in grid_h:
                try:
                    model, _, split = run_training(cfg, g, trajs, variant, t_M, h)
                    rep = evaluate(model, g, split.test_trajs, float(t_M), int(s["m"]), float(h),
                                   seed=int(cfg["seed"]), graph_id=g.checksum())
                    cells.append(SweepCell(t_M, h, variant, "ok", rep))
                except (DGONError, ValueError, ArithmeticError) as exc:
                    log.warning("sweep cell t_M=%s h=%s %s failed: %s", t_M, h, variant, exc)
                    cells.append(SweepCell(t_M, h, variant, "failed", None, str(exc)))
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(cells, out / "sweep.csv")
    ok = sum(c.status == "ok" for c in cells)
    print(f"{ok}/{len(cells)} sweep cells succeeded")
    if ok == 0:
        print("error: every sweep cell failed", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. train.epochs=20")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--data", help="trajectory manifest (sets data.manifest)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="deepgraphonet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate trajectories")
    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--dry-run", action="store_true", help="validate config and data shapes only")
    for name in ("eval", "zeroshot"):
        e = sub.add_parser(name, parents=[common], help=f"{name} a trained model")
        e.add_argument("--weights")
        e.add_argument("--autoregressive", action="store_true")
        e.add_argument("--oracle", action="store_true", help="replay ground truth (bookkeeping check)")
        if name == "zeroshot":
            e.add_argument("--graph-prime", help="JSON graph to transfer to")
    sub.add_parser("sweep", parents=[common], help="train and evaluate over a t_M x h grid")
    return p


def _run(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    if args.data:
        cfg["data"]["manifest"] = args.data
    out = Path(args.out)
    if args.command == "generate":
        return cmd_generate(cfg, out)
    if args.command == "train":
        return cmd_train(cfg, out, args.dry_run)
    if args.command == "sweep":
        return cmd_sweep(cfg, out)
    if args.autoregressive:
        cfg["eval"]["autoregressive"] = True
    if args.oracle:
        cfg["eval"]["oracle"] = True
    if args.command == "eval":
        return cmd_eval(cfg, out, args.weights)
    return cmd_zeroshot(cfg, out, args.weights, args.graph_prime)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return 3
    except (WeightFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (TypeError, KeyError) as exc:
        # malformed config values (wrong types, missing manifest fields)
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
