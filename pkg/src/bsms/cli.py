"""Command-line entry point: ``bsms <command> [flags]``.

Settings come from defaults, then an optional ``--config`` JSON file, then
flags (highest precedence).  Results go only to the declared output paths;
logs are single-line JSON records on stderr.  Exit codes: 0 ok, 2 bad
usage/input, 3 I/O, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bistride import HEURISTICS, HierarchyError, build_hierarchy, suggest_depth
from .demo import DemoConfig, format_table, run_demo
from .graph import GraphError, build_adjacency
from .heat1d import StickConfig, gen_heat1d, proximity_edges
from .mesh_io import (
    MeshFormatError,
    Trajectory,
    export_hierarchy,
    load_mesh,
    load_trajectory,
    mesh_to_graph,
    save_trajectory,
    write_json,
)
from .model import ModelConfig, ModelError
from .train import BsmsModel, Example, TrainConfig, eval_metrics, fit_normalizer, rollout, samples_from_trajectory, train
from .transition import MODES

log = logging.getLogger("bsms")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        doc = {
            "t": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        return json.dumps(doc, sort_keys=True)


def _env_seed() -> int:
    raw = os.environ.get("BSMS_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"BSMS_SEED must be an integer, got {raw!r}") from None


def _defaults(command: str) -> dict:
    seed = _env_seed()
    return {
        "build": {"mesh": None, "out": None, "depth": None, "heuristic": "minave", "parity": "even",
                  "contact": None, "contact_radius": None},
        "gen-heat1d": {"out": None, "split": "both", "nodes": 17, "gap": 1.0 / 64},
        "train": {"data": None, "out": None, "depth": 2, "heuristic": "minave", "parity": "even",
                  "transition": "weighted", "latent": 128, "epochs": 100, "batch_size": 1, "lr": 1e-3,
                  "decay": 0.5, "noise": {}, "input_fields": None, "output_fields": None, "node_types": None,
                  "output_mode": "delta", "step_offset": 1, "world_field": None, "skip": True, "seed": seed,
                  "loss_csv": None},
        "rollout": {"checkpoint": None, "trajectory": None, "steps": None, "out": None},
        "eval": {"pred": None, "truth": None, "out": None, "csv": None, "horizon": 50, "fields": None},
        "demo-heat1d": {"out": None, **{k: v for k, v in vars(DemoConfig()).items()}, "seed": seed},
    }[command]


def _noise_arg(text: str):
    name, _, scale = text.partition("=")
    if not name or not scale:
        raise argparse.ArgumentTypeError(f"expected NAME=SCALE, got {text!r}")
    return name, float(scale)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bsms", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"bsms {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug-level logging")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True
    S = argparse.SUPPRESS

    def cmd(name, help):
        sp = sub.add_parser(name, help=help, description=help, argument_default=S)
        sp.add_argument("--config", help="JSON file with settings (flags override it)")
        return sp

    b = cmd("build", "build a bi-stride hierarchy from a mesh JSON file")
    b.add_argument("--mesh", help="mesh JSON path")
    b.add_argument("--out", help="output hierarchy JSON path")
    b.add_argument("--depth", type=int, help="number of levels (default: floor(log2 n) - 3, at least 1)")
    b.add_argument("--heuristic", choices=HEURISTICS)
    b.add_argument("--parity", choices=("even", "odd"))
    b.add_argument("--contact", help='JSON file {"edges": [[i, j], ...]} with finest-level contact edges')
    b.add_argument("--contact-radius", type=float, dest="contact_radius",
                   help="build contact edges from node pairs closer than this (mesh edges excluded)")

    g = cmd("gen-heat1d", "write the 1-D heat stick datasets as trajectory JSON files")
    g.add_argument("--out", help="output directory")
    g.add_argument("--split", choices=("train", "test", "both"))
    g.add_argument("--nodes", type=int, help="nodes per stick")
    g.add_argument("--gap", type=float, help="gap between sticks in the test layouts")

    t = cmd("train", "train a model on trajectory files")
    t.add_argument("--data", nargs="+", help="trajectory files or directories of *.json")
    t.add_argument("--out", help="checkpoint output path")
    t.add_argument("--depth", type=int)
    t.add_argument("--heuristic", choices=HEURISTICS)
    t.add_argument("--parity", choices=("even", "odd"))
    t.add_argument("--transition", choices=MODES)
    t.add_argument("--latent", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lr", type=float)
    t.add_argument("--decay", type=float, help="learning-rate factor applied at each third of training")
    t.add_argument("--noise", type=_noise_arg, action="append", help="FIELD=SCALE (repeatable)")
    t.add_argument("--input-fields", nargs="+", dest="input_fields")
    t.add_argument("--output-fields", nargs="+", dest="output_fields")
    t.add_argument("--node-types", type=int, dest="node_types")
    t.add_argument("--output-mode", choices=("delta", "absolute"), dest="output_mode")
    t.add_argument("--step-offset", type=int, dest="step_offset")
    t.add_argument("--world-field", dest="world_field")
    t.add_argument("--no-skip", action="store_false", dest="skip", help="disable U-Net style skips")
    t.add_argument("--seed", type=int)
    t.add_argument("--loss-csv", dest="loss_csv", help="write per-epoch training loss here")

    r = cmd("rollout", "roll a trained model out from a trajectory's first step")
    r.add_argument("--checkpoint")
    r.add_argument("--trajectory")
    r.add_argument("--steps", type=int, help="number of model applications (default: trajectory length)")
    r.add_argument("--out", help="prediction trajectory JSON path")

    e = cmd("eval", "RMSE-1 / RMSE-50 / RMSE-all between a prediction and a ground-truth trajectory")
    e.add_argument("--pred")
    e.add_argument("--truth")
    e.add_argument("--out", help="metrics JSON path")
    e.add_argument("--csv", help="per-step RMSE CSV path")
    e.add_argument("--horizon", type=int)
    e.add_argument("--fields", nargs="+", help="fields to compare (default: all fields in the prediction)")

    d = cmd("demo-heat1d", "train bi-stride and proximity variants on the 1-D heat sticks and compare")
    d.add_argument("--out", help="output directory")
    d.add_argument("--seed", type=int)
    d.add_argument("--depth", type=int)
    d.add_argument("--latent", type=int)
    d.add_argument("--lr", type=float)
    d.add_argument("--max-epochs", type=int, dest="max_epochs")
    d.add_argument("--check-every", type=int, dest="check_every")
    d.add_argument("--target-rel-rmse", type=float, dest="target_rel_rmse")
    d.add_argument("--heuristic", choices=HEURISTICS)
    d.add_argument("--transition", choices=MODES)
    d.add_argument("--radius-factor", type=float, dest="radius_factor")
    d.add_argument("--nodes", type=int)
    d.add_argument("--gap", type=float)
    d.add_argument("--no-svg", action="store_false", dest="svg")
    return p


def _settings(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults <- config file <- flags; reject unknown keys."""
    cfg = _defaults(command)
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose", "config")}
    if getattr(ns, "config", None):
        try:
            with open(ns.config) as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {ns.config}: invalid JSON ({exc})") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {unknown}")
        cfg.update(file_cfg)
    if "noise" in flags:
        flags["noise"] = dict(flags["noise"])
    cfg.update(flags)
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "", [])]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def cmd_build(cfg: dict) -> int:
    _require(cfg, "mesh", "out")
    mesh = load_mesh(cfg["mesh"])
    adj = mesh_to_graph(mesh)
    contact = None
    if cfg["contact"]:
        with open(cfg["contact"]) as fh:
            contact = build_adjacency(mesh.n, json.load(fh)["edges"])
    elif cfg["contact_radius"]:
        contact = proximity_edges(mesh.positions, cfg["contact_radius"], exclude=adj)
    depth = cfg["depth"] or suggest_depth(mesh.n)
    h = build_hierarchy(adj, mesh.positions, contact, depth, cfg["heuristic"], cfg["parity"])
    export_hierarchy(h, cfg["out"])
    log.info("built hierarchy levels=%s out=%s", h.sizes(), cfg["out"])
    return EXIT_OK


def cmd_gen_heat1d(cfg: dict) -> int:
    _require(cfg, "out")
    stick = StickConfig(nodes=cfg["nodes"], gap=cfg["gap"])
    splits = ("train", "test") if cfg["split"] == "both" else (cfg["split"],)
    out = Path(cfg["out"])
    for split in splits:
        for k, traj in enumerate(gen_heat1d(split, stick)):
            save_trajectory(traj, out / f"{split}_{k:03d}.json")
    log.info("wrote heat1d splits=%s out=%s", list(splits), out)
    return EXIT_OK


def _data_files(paths) -> list[Path]:
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files += sorted(p.glob("*.json")) + sorted(p.glob("*.jsonl"))
        else:
            files.append(p)
    if not files:
        raise UsageError("no trajectory files found")
    return files


def _infer_fields(traj: Trajectory, cfg: dict) -> tuple[list[str], list[str], dict]:
    names = sorted(traj.fields)
    inputs = cfg["input_fields"] or names
    outputs = cfg["output_fields"] or inputs
    dims = {k: int(v.shape[2]) for k, v in traj.fields.items()}
    return list(inputs), list(outputs), dims


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data", "out")
    trajs = [load_trajectory(f) for f in _data_files(cfg["data"])]
    inputs, outputs, dims = _infer_fields(trajs[0], cfg)
    node_types = cfg["node_types"] or int(max(int(t.mesh.node_type.max()) for t in trajs) + 1)
    mcfg = ModelConfig(
        input_fields=inputs,
        output_fields=outputs,
        field_dims=dims,
        node_types=node_types,
        latent=cfg["latent"],
        hidden=cfg["latent"],
        depth=cfg["depth"],
        transition=cfg["transition"],
        skip=cfg["skip"],
        output_mode=cfg["output_mode"],
        step_offset=cfg["step_offset"],
        world_field=cfg["world_field"],
        edge_sets=[["material"] if not cfg["world_field"] else ["material", "world"]],
    )
    examples = []
    for traj in trajs:
        h = build_hierarchy(mesh_to_graph(traj.mesh), traj.mesh.positions, None, cfg["depth"], cfg["heuristic"], cfg["parity"])
        examples += [Example(s, h) for s in samples_from_trajectory(traj, mcfg)]
    if not examples:
        raise UsageError("trajectories too short for the requested step offset")
    norm = fit_normalizer([e.sample for e in examples], mcfg, list({id(e.hierarchy): e.hierarchy for e in examples}.values()))
    model = BsmsModel.create(mcfg, cfg["seed"], norm, dim=trajs[0].mesh.dim)
    tcfg = TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["decay"], dict(cfg["noise"]), cfg["seed"])
    history = train(model, examples, tcfg, lambda ep, loss: log.debug("epoch=%d loss=%.6g", ep, loss))
    model.save(cfg["out"], {"hierarchy": {"heuristic": cfg["heuristic"], "parity": cfg["parity"]}})
    if cfg["loss_csv"]:
        with open(cfg["loss_csv"], "w") as fh:
            fh.write("epoch,loss\n")
            fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(history))
    log.info("trained epochs=%d final_loss=%.6g out=%s", len(history), history[-1], cfg["out"])
    return EXIT_OK


def cmd_rollout(cfg: dict) -> int:
    _require(cfg, "checkpoint", "trajectory", "out")
    model, meta = BsmsModel.load(cfg["checkpoint"])
    mcfg = model.cfg
    traj = load_trajectory(cfg["trajectory"])
    if traj.mesh is None:
        raise UsageError("trajectory has no inline mesh")
    hmeta = meta.get("hierarchy", {})
    h = build_hierarchy(mesh_to_graph(traj.mesh), traj.mesh.positions, None, mcfg.depth,
                        hmeta.get("heuristic", "minave"), hmeta.get("parity", "even"))
    first = samples_from_trajectory(traj, mcfg)
    initial = first[0] if first else None
    if initial is None:
        raise UsageError("trajectory too short for the model's step offset")
    steps = cfg["steps"] if cfg["steps"] is not None else max(traj.n_steps - mcfg.step_offset, 1)
    states = rollout(lambda s: model.predict(h, s), initial, steps, mcfg)
    fields, col = {}, 0
    for f in mcfg.output_fields:
        w = mcfg.field_dims[f]
        fields[f] = states[:, :, col : col + w]
        col += w
    save_trajectory(Trajectory(None, fields, traj.dt, {"start_step": mcfg.step_offset}), cfg["out"])
    log.info("rollout steps=%d out=%s", steps, cfg["out"])
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "pred", "truth", "out")
    pred = load_trajectory(cfg["pred"])
    truth = load_trajectory(cfg["truth"])
    start = int(pred.meta.get("start_step", 0))
    names = cfg["fields"] or sorted(pred.fields)
    for f in names:
        if f not in truth.fields or f not in pred.fields:
            raise UsageError(f"field {f!r} missing from prediction or truth")
    p = np.concatenate([pred.fields[f] for f in names], axis=2)
    t = np.concatenate([truth.fields[f] for f in names], axis=2)[start : start + p.shape[0]]
    metrics = eval_metrics(p, t, cfg["horizon"])
    metrics["fields"] = names
    write_json(cfg["out"], metrics)
    if cfg["csv"]:
        with open(cfg["csv"], "w") as fh:
            fh.write("step,rmse\n")
            fh.writelines(f"{i + 1},{v!r}\n" for i, v in enumerate(metrics["per_step"]))
    if metrics["horizon_clamped"]:
        log.info("rmse_50 horizon clamped to %d steps", metrics["horizon_50"])
    log.info("rmse_1=%.6g rmse_50=%.6g rmse_all=%.6g", metrics["rmse_1"], metrics["rmse_50"], metrics["rmse_all"])
    return EXIT_OK


def cmd_demo(cfg: dict) -> int:
    _require(cfg, "out")
    dcfg = DemoConfig(**{k: v for k, v in cfg.items() if k != "out"})
    t0 = time.perf_counter()
    report = run_demo(dcfg, cfg["out"])
    print(format_table(report))
    log.info("demo finished seconds=%.1f out=%s", time.perf_counter() - t0, cfg["out"])
    return EXIT_OK


COMMANDS = {
    "build": cmd_build,
    "gen-heat1d": cmd_gen_heat1d,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "demo-heat1d": cmd_demo,
}


def _fail(code: int, kind: str, exc) -> int:
    print(json.dumps({"error": kind, "exit": code, "message": str(exc)}, sort_keys=True), file=sys.stderr)
    return code


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger("bsms")
    if not any(getattr(h, "_bsms", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(JsonLineFormatter())
        handler._bsms = True
        root.addHandler(handler)
        root.propagate = False
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def run(argv=None) -> int:
    parser = _parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(getattr(ns, "verbose", False))
    try:
        cfg = _settings(ns.command, ns)
        return COMMANDS[ns.command](cfg)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (OSError, MeshFormatError) as exc:
        return _fail(EXIT_IO, "io", exc)
    except FloatingPointError as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except (GraphError, HierarchyError, ModelError, ValueError, TypeError, KeyError) as exc:
        return _fail(EXIT_USAGE, "input", exc)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
