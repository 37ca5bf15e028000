"""Single-step supervised training, rollout, and RMSE metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bistride import Hierarchy
from .mesh_io import Trajectory
from .model import (
    BsmsParams,
    FieldSample,
    ModelConfig,
    ModelError,
    build_inputs,
    init_model,
    model_backward,
    model_forward,
    prepare_graphs,
)
from .nn import load_tensors, save_tensors

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8
TARGET = "__target__"


@dataclass
class Normalizer:
    mean: dict[str, np.ndarray] = field(default_factory=dict)
    std: dict[str, np.ndarray] = field(default_factory=dict)
    offset_scale: float = 1.0

    def normalize(self, name, v):
        if name not in self.mean:
            return np.asarray(v, dtype=float)
        return (np.asarray(v, dtype=float) - self.mean[name]) / self.std[name]

    def denormalize(self, name, v):
        if name not in self.mean:
            return np.asarray(v, dtype=float)
        return np.asarray(v, dtype=float) * self.std[name] + self.mean[name]

    def to_dict(self) -> dict:
        return {
            "mean": {k: v.tolist() for k, v in sorted(self.mean.items())},
            "std": {k: v.tolist() for k, v in sorted(self.std.items())},
            "offset_scale": self.offset_scale,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Normalizer":
        return cls(
            {k: np.asarray(v, dtype=float) for k, v in doc["mean"].items()},
            {k: np.asarray(v, dtype=float) for k, v in doc["std"].items()},
            float(doc.get("offset_scale", 1.0)),
        )


def _stats(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = rows.mean(axis=0)
    std = np.maximum(rows.std(axis=0), STD_FLOOR)
    return mean, std


def fit_normalizer(samples: list[FieldSample], cfg: ModelConfig, hierarchies: list[Hierarchy] | None = None) -> Normalizer:
    """Per-field mean/std over every training step and node; targets get their own entry.

    With ``hierarchies``, the mean finest-level edge length becomes the
    offset scale.
    """
    if not samples:
        raise ValueError("cannot fit a normalizer on an empty dataset")
    norm = Normalizer()
    for name in cfg.input_fields:
        rows = np.concatenate([np.asarray(s.fields[name], dtype=float).reshape(len(s.node_type), -1) for s in samples])
        norm.mean[name], norm.std[name] = _stats(rows)
    if all(s.target is not None for s in samples):
        norm.mean[TARGET], norm.std[TARGET] = _stats(np.concatenate([s.target for s in samples]))
    if hierarchies:
        lengths = []
        for h in hierarchies:
            lv = h.levels[0]
            e = lv.adjacency.edges()
            if e.size:
                lengths.append(np.linalg.norm(lv.positions[e[:, 0]] - lv.positions[e[:, 1]], axis=1))
        if lengths:
            norm.offset_scale = float(np.concatenate(lengths).mean()) or 1.0
    return norm


def samples_from_trajectory(traj: Trajectory, cfg: ModelConfig) -> list[FieldSample]:
    """Input/target pairs for every admissible step of a trajectory."""
    if traj.mesh is None:
        raise ModelError("trajectory carries no mesh")
    off = cfg.step_offset
    out = []
    for t in range(traj.n_steps - off):
        fields = {}
        for name in set(cfg.input_fields) | set(cfg.output_fields):
            if name not in traj.fields:
                raise ModelError(f"trajectory has no field {name!r}")
            fields[name] = traj.fields[name][t]
        nxt = np.concatenate([traj.fields[f][t + off] for f in cfg.output_fields], axis=1)
        if cfg.output_mode == "delta":
            nxt = nxt - np.concatenate([traj.fields[f][t] for f in cfg.output_fields], axis=1)
        world = traj.fields[cfg.world_field][t] if cfg.world_field else None
        out.append(FieldSample(traj.mesh.node_type, fields, nxt, world))
    return out


def inject_noise(sample: FieldSample, scales: dict[str, float], rng: np.random.Generator, cfg: ModelConfig) -> FieldSample:
    """Add N(0, scale^2) noise to bound fields.

    In delta mode the target is corrected so it still points from the noisy
    state to the true next state.
    """
    fields = dict(sample.fields)
    target = None if sample.target is None else sample.target.copy()
    world = sample.world_pos
    for name, scale in sorted(scales.items()):
        if name not in fields:
            raise ModelError(f"noise bound to unknown field {name!r}")
        if scale == 0:
            continue
        v = np.asarray(fields[name], dtype=float)
        noise = rng.normal(0.0, scale, size=v.shape)
        fields[name] = v + noise
        if name == cfg.world_field and world is not None:
            world = np.asarray(world, dtype=float) + noise.reshape(np.shape(world))
        if target is not None and cfg.output_mode == "delta" and name in cfg.output_fields:
            col = 0
            for f in cfg.output_fields:
                w = cfg.field_dims[f]
                if f == name:
                    target[:, col : col + w] -= noise.reshape(-1, w)
                col += w
    return FieldSample(sample.node_type, fields, target, world)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k in sorted(tensors):
            g = grads.get(k)
            if g is None:
                continue
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            tensors[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1
    lr: float = 1e-3
    decay: float = 0.5  # multiplied in at each third of training
    noise: dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0 or self.decay <= 0:
            raise ValueError("training hyperparameters must be positive")
        for k, v in self.noise.items():
            if v < 0:
                raise ValueError(f"noise scale for {k!r} must be >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** min(2, (3 * epoch) // self.epochs)


@dataclass(eq=False)
class Example:
    """A training sample bound to its hierarchy; graph features are cached when static."""

    sample: FieldSample
    hierarchy: Hierarchy
    graphs: dict | None = None


class BsmsModel:
    def __init__(self, cfg: ModelConfig, params: BsmsParams, normalizer: Normalizer | None = None, dim: int = 1):
        self.cfg = cfg
        self.params = params
        self.normalizer = normalizer or Normalizer()
        self.dim = dim

    @classmethod
    def create(cls, cfg: ModelConfig, seed=0, normalizer=None, dim: int = 1) -> "BsmsModel":
        if normalizer is not None:
            cfg.offset_scale = normalizer.offset_scale
        return cls(cfg, init_model(cfg, seed, dim), normalizer, dim)

    def graphs_for(self, example: Example) -> dict:
        world = example.sample.world_pos if self.cfg.world_field else None
        if world is not None:
            return prepare_graphs(example.hierarchy, self.cfg, world)
        if example.graphs is None:
            example.graphs = prepare_graphs(example.hierarchy, self.cfg)
        return example.graphs

    def forward(self, example: Example):
        graphs = self.graphs_for(example)
        x = build_inputs(example.sample, self.cfg, self.normalizer)
        q, tape = model_forward(self.params, graphs, x, self.cfg)
        return q, tape, graphs

    def predict(self, hierarchy: Hierarchy, sample: FieldSample) -> np.ndarray:
        """Denormalised output rows for one sample."""
        q, _, _ = self.forward(Example(sample, hierarchy))
        return self.normalizer.denormalize(TARGET, q)

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"config": self.cfg.to_dict(), "normalizer": self.normalizer.to_dict(), "dim": self.dim}
        if extra:
            meta.update(extra)
        save_tensors(self.params.tensors(), path, meta)

    @classmethod
    def load(cls, path) -> tuple["BsmsModel", dict]:
        tensors, meta = load_tensors(path)
        cfg = ModelConfig.from_dict(meta.pop("config"))
        norm = Normalizer.from_dict(meta.pop("normalizer"))
        dim = int(meta.pop("dim", 1))
        model = cls(cfg, init_model(cfg, 0, dim), norm, dim)
        model.params.load_tensors(tensors)
        return model, meta


def sample_loss(model: BsmsModel, example: Example):
    """MSE in normalised target space, with its gradient w.r.t. the prediction."""
    q, tape, graphs = model.forward(example)
    tgt = model.normalizer.normalize(TARGET, example.sample.target)
    diff = q - tgt
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size, tape, graphs


def train_step(model: BsmsModel, batch: list[Example], opt: Adam, lr: float | None = None) -> float:
    """Mean per-sample MSE over ``batch`` followed by one Adam update."""
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for ex in batch:
        loss, dq, tape, graphs = sample_loss(model, ex)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss} (step {opt.t}, lr {lr})")
        total += loss
        g = model_backward(model.params, graphs, tape, dq / len(batch), model.cfg)
        for k, v in g.items():
            if k in grads:
                grads[k] += v
            else:
                grads[k] = v
    opt.step(model.params.tensors(), grads, lr)
    return total / len(batch)


def train(
    model: BsmsModel,
    examples: list[Example],
    tcfg: TrainConfig,
    callback: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Train in place; returns the mean loss of every epoch."""
    rng = np.random.default_rng(tcfg.seed)
    opt = Adam(tcfg.lr)
    history = []
    for epoch in range(tcfg.epochs):
        lr = tcfg.lr_at(epoch)
        order = rng.permutation(len(examples))
        losses = []
        for lo in range(0, len(order), tcfg.batch_size):
            batch = []
            for i in order[lo : lo + tcfg.batch_size]:
                ex = examples[i]
                if tcfg.noise:
                    ex = Example(inject_noise(ex.sample, tcfg.noise, rng, model.cfg), ex.hierarchy, ex.graphs)
                batch.append(ex)
            losses.append(train_step(model, batch, opt, lr))
        history.append(float(np.mean(losses)))
        if callback:
            callback(epoch, history[-1])
    return history


def _state_of(sample: FieldSample, cfg: ModelConfig) -> np.ndarray:
    return np.concatenate(
        [np.asarray(sample.fields[f], dtype=float).reshape(len(sample.node_type), -1) for f in cfg.output_fields], axis=1
    )


def rollout(
    predict: Callable[[FieldSample], np.ndarray],
    initial: FieldSample,
    n_steps: int,
    cfg: ModelConfig,
) -> np.ndarray:
    """Autoregressive rollout: returns the ``n_steps`` predicted states (steps x nodes x width).

    Delta outputs are integrated to first order (state += prediction);
    absolute outputs replace the state.  Output fields that are also inputs
    are fed back for the next step.
    """
    n = len(initial.node_type)
    if n_steps <= 0:
        return np.zeros((0, n, cfg.out_width))
    sample = initial
    states = []
    state = _state_of(initial, cfg) if cfg.output_mode == "delta" else None
    for step in range(n_steps):
        q = np.asarray(predict(sample), dtype=float).reshape(n, cfg.out_width)
        state = state + q if cfg.output_mode == "delta" else q
        if not np.all(np.isfinite(state)):
            raise FloatingPointError(f"non-finite state at rollout step {step + 1}")
        states.append(state.copy())
        fields = dict(sample.fields)
        col = 0
        for f in cfg.output_fields:
            w = cfg.field_dims[f]
            if f in fields:
                fields[f] = state[:, col : col + w]
            col += w
        world = fields[cfg.world_field] if cfg.world_field else sample.world_pos
        sample = FieldSample(sample.node_type, fields, None, world)
    return np.stack(states)


def eval_metrics(pred, truth, horizon: int = 50) -> dict:
    """RMSE over nodes and components for the first 1, ``horizon`` and all steps."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.ndim == 2:
        pred = pred[:, :, None]
    if truth.ndim == 2:
        truth = truth[:, :, None]
    if pred.shape[1:] != truth.shape[1:] or truth.shape[0] < pred.shape[0] or pred.shape[0] == 0:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs truth {truth.shape}")
    sq = (pred - truth[: pred.shape[0]]) ** 2
    per_step = np.sqrt(sq.mean(axis=(1, 2)))
    steps = pred.shape[0]
    k = min(horizon, steps)

    def upto(m):
        return float(np.sqrt(sq[:m].mean()))

    return {
        "rmse_1": upto(1),
        "rmse_50": upto(k),
        "rmse_all": upto(steps),
        "horizon_50": k,
        "horizon_clamped": k < horizon,
        "per_step": per_step.tolist(),
    }
