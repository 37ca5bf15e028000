"""End-to-end 1-D heat comparison: bi-stride pooling versus proximity coarsening."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .bistride import build_hierarchy
from .heat1d import (
    NODE_TYPES,
    StickConfig,
    build_proximity_hierarchy,
    cluster_labels,
    cross_cluster_edges,
    gen_heat1d,
)
from .mesh_io import Trajectory, mesh_to_graph, write_json
from .model import ModelConfig
from .train import Adam, BsmsModel, Example, TrainConfig, fit_normalizer, samples_from_trajectory, train_step

log = logging.getLogger(__name__)

VARIANTS = ("bistride", "proximity")


@dataclass
class DemoConfig:
    seed: int = 0
    depth: int = 5
    latent: int = 64
    lr: float = 1e-3
    max_epochs: int = 3000
    check_every: int = 50
    target_rel_rmse: float = 0.005  # stop once training RMSE <= this fraction of the temperature range
    heuristic: str = "minave"
    transition: str = "weighted"
    radius_factor: float = 1.5
    nodes: int = 17
    gap: float = 1.0 / 64
    svg: bool = True


def _hierarchy(variant: str, traj: Trajectory, cfg: DemoConfig, stick: StickConfig):
    adj = mesh_to_graph(traj.mesh)
    x = traj.mesh.positions
    if variant == "bistride":
        return build_hierarchy(adj, x, depth=cfg.depth, heuristic=cfg.heuristic)
    return build_proximity_hierarchy(adj, x, cfg.depth, stick.spacing, cfg.radius_factor, origin=[0.0])


def model_config(cfg: DemoConfig) -> ModelConfig:
    return ModelConfig(
        input_fields=["boundary"],
        output_fields=["temperature"],
        field_dims={"boundary": 1, "temperature": 1},
        node_types=NODE_TYPES,
        latent=cfg.latent,
        hidden=cfg.latent,
        depth=cfg.depth,
        transition=cfg.transition,
        output_mode="absolute",
        step_offset=0,
    )


def _rmse(model: BsmsModel, examples: list[Example]) -> float:
    sq = [np.mean((model.predict(e.hierarchy, e.sample) - e.sample.target) ** 2) for e in examples]
    return float(np.sqrt(np.mean(sq)))


def train_variant(variant: str, cfg: DemoConfig, stick: StickConfig, train_set, temp_range: float):
    """Train until the training RMSE reaches the shared target (or the epoch cap)."""
    mcfg = model_config(cfg)
    examples = [Example(samples_from_trajectory(t, mcfg)[0], _hierarchy(variant, t, cfg, stick)) for t in train_set]
    norm = fit_normalizer([e.sample for e in examples], mcfg, [e.hierarchy for e in examples])
    model = BsmsModel.create(mcfg, cfg.seed, norm, dim=1)
    tcfg = TrainConfig(epochs=cfg.max_epochs, batch_size=len(examples), lr=cfg.lr, seed=cfg.seed)
    opt = Adam(cfg.lr)
    target = cfg.target_rel_rmse * temp_range
    epoch, rmse = 0, _rmse(model, examples)
    while epoch < cfg.max_epochs and rmse > target:
        for _ in range(cfg.check_every):
            train_step(model, examples, opt, tcfg.lr_at(epoch))
            epoch += 1
        rmse = _rmse(model, examples)
        log.info("variant=%s epoch=%d train_rmse=%.6g", variant, epoch, rmse)
    return model, {"epochs": epoch, "train_rmse": rmse, "train_rel_rmse": rmse / temp_range}


def evaluate_variant(variant: str, model: BsmsModel, cfg: DemoConfig, stick: StickConfig, test_set, temp_range):
    rows, profiles = [], []
    crossings = None
    for traj in test_set:
        h = _hierarchy(variant, traj, cfg, stick)
        sample = samples_from_trajectory(traj, model.cfg)[0]
        pred = model.predict(h, sample)[:, 0]
        truth = sample.target[:, 0]
        err = np.abs(pred - truth)
        junction = traj.meta["junction"]
        cross = cross_cluster_edges(h, cluster_labels(mesh_to_graph(traj.mesh)))
        crossings = cross if crossings is None else [max(a, b) for a, b in zip(crossings, cross)]
        rows.append(
            {
                "layout": traj.meta["layout"],
                "symmetric": traj.meta["symmetric"],
                "junction_abs_err": err[junction].tolist(),
                "junction_max_rel_err": float(err[junction].max() / temp_range),
                "test_rmse": float(np.sqrt(np.mean(err**2))),
                "cross_cluster_edges": cross,
            }
        )
        profiles.append((traj, truth, pred))
    return rows, profiles, crossings


def _svg_plot(path: Path, x, curves: dict[str, np.ndarray], title: str) -> None:
    """Minimal standalone SVG line plot."""
    w, h, pad = 480, 300, 40
    ys = np.concatenate(list(curves.values()))
    y0, y1 = float(ys.min()), float(ys.max())
    y1 = y1 if y1 > y0 else y0 + 1.0
    x0, x1 = float(np.min(x)), float(np.max(x))

    def px(v):
        return pad + (v - x0) / (x1 - x0) * (w - 2 * pad)

    def py(v):
        return h - pad - (v - y0) / (y1 - y0) * (h - 2 * pad)

    colors = ["#000000", "#1f77b4", "#d62728", "#2ca02c"]
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
        f'<text x="{w / 2:.1f}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<rect x="{pad}" y="{pad}" width="{w - 2 * pad}" height="{h - 2 * pad}" fill="none" stroke="#999"/>',
    ]
    for k, (name, y) in enumerate(curves.items()):
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        c = colors[k % len(colors)]
        lines.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="1.5"/>')
        lines.append(f'<text x="{pad + 5}" y="{pad + 15 + 14 * k}" font-size="11" fill="{c}">{name}</text>')
    lines.append("</svg>")
    path.write_text("\n".join(lines) + "\n")


def run_demo(cfg: DemoConfig, out_dir) -> dict:
    """Train both variants, evaluate on every test layout, write metrics.json / metrics.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stick = StickConfig(nodes=cfg.nodes, gap=cfg.gap)
    train_set, test_set = gen_heat1d("train", stick), gen_heat1d("test", stick)
    temps = np.concatenate([t.fields["temperature"].ravel() for t in train_set])
    temp_range = float(temps.max() - temps.min())

    report = {"config": asdict(cfg), "temperature_range": temp_range, "variants": {}}
    all_profiles = {}
    for variant in VARIANTS:
        model, fit = train_variant(variant, cfg, stick, train_set, temp_range)
        rows, profiles, crossings = evaluate_variant(variant, model, cfg, stick, test_set, temp_range)
        report["variants"][variant] = {**fit, "test": rows, "cross_cluster_edges_per_level": crossings}
        all_profiles[variant] = profiles

    ratios = {}
    for b, p in zip(report["variants"]["bistride"]["test"], report["variants"]["proximity"]["test"]):
        ratios[b["layout"]] = p["junction_max_rel_err"] / max(b["junction_max_rel_err"], 1e-300)
    report["junction_error_ratio"] = ratios
    write_json(out / "metrics.json", report)

    with open(out / "metrics.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["variant", "layout", "symmetric", "junction_max_rel_err", "test_rmse", "train_rmse", "epochs"])
        for variant, data in report["variants"].items():
            for row in data["test"]:
                wr.writerow(
                    [variant, row["layout"], row["symmetric"], repr(row["junction_max_rel_err"]),
                     repr(row["test_rmse"]), repr(data["train_rmse"]), data["epochs"]]
                )
    if cfg.svg:
        for k, (traj, truth, pred_b) in enumerate(all_profiles["bistride"]):
            pred_p = all_profiles["proximity"][k][2]
            x = traj.mesh.positions[:, 0]
            _svg_plot(out / f"profile_{traj.meta['layout']}.svg", x,
                      {"analytic": truth, "bi-stride": pred_b, "proximity": pred_p},
                      f"head/tail layout {traj.meta['layout']}")
    return report


def format_table(report: dict) -> str:
    head = f"{'layout':<12}{'symmetric':<11}{'bistride err':>14}{'proximity err':>15}{'ratio':>10}"
    lines = [head, "-" * len(head)]
    b_rows = report["variants"]["bistride"]["test"]
    p_rows = report["variants"]["proximity"]["test"]
    for b, p in zip(b_rows, p_rows):
        lines.append(
            f"{b['layout']:<12}{str(b['symmetric']):<11}{b['junction_max_rel_err']:>14.4%}"
            f"{p['junction_max_rel_err']:>15.4%}{report['junction_error_ratio'][b['layout']]:>10.1f}"
        )
    for v in VARIANTS:
        d = report["variants"][v]
        lines.append(f"{v}: train rel RMSE {d['train_rel_rmse']:.4%} after {d['epochs']} epochs; "
                     f"cross-cluster edges per level {d['cross_cluster_edges_per_level']}")
    return "\n".join(lines)
