"""Encode-process-decode network over a bi-stride hierarchy.

The processor is a V-cycle: one message-passing block on the way down at
each level, one at the bottom, one on the way back up, with non-parametric
transitions between levels and additive skips from the pre-pooling latents.
``model_forward`` records a tape that ``model_backward`` replays in reverse.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .bistride import Hierarchy
from .nn import HIDDEN, MlpParams, init_params, mlp_apply, mlp_grad
from .transition import transition_operators

OFFSET_KINDS = ("material", "world")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_fields: list[str]
    output_fields: list[str]
    field_dims: dict[str, int]
    node_types: int = 1
    latent: int = 128
    hidden: int = HIDDEN
    depth: int = 2
    # one entry per edge set: which relative offsets to prepend (material X_ij, world x_ij)
    edge_sets: list[list[str]] = field(default_factory=lambda: [["material"]])
    world_field: str | None = None
    transition: str = "weighted"
    skip: bool = True
    output_mode: str = "delta"  # "delta": q is the per-step change; "absolute": q is the state itself
    step_offset: int = 1  # target is taken this many steps after the input
    offset_scale: float = 1.0

    def __post_init__(self):
        if not self.edge_sets:
            raise ModelError("need at least one edge set")
        for kinds in self.edge_sets:
            for k in kinds:
                if k not in OFFSET_KINDS:
                    raise ModelError(f"unknown offset kind {k!r}")
            if "world" in kinds and self.world_field is None:
                raise ModelError("world offsets need cfg.world_field")
        if self.output_mode not in ("delta", "absolute"):
            raise ModelError(f"unknown output_mode {self.output_mode!r}")
        if self.depth < 1:
            raise ModelError("depth must be >= 1")
        for name in self.input_fields + self.output_fields:
            if name not in self.field_dims:
                raise ModelError(f"field {name!r} has no declared dimension")

    @property
    def n_edge_sets(self) -> int:
        return len(self.edge_sets)

    @property
    def in_width(self) -> int:
        return self.node_types + sum(self.field_dims[f] for f in self.input_fields)

    @property
    def out_width(self) -> int:
        return sum(self.field_dims[f] for f in self.output_fields)

    def visits(self) -> list[str]:
        d = self.depth
        return [f"down{l}" for l in range(d - 1)] + ["bottom"] + [f"up{l}" for l in reversed(range(d - 1))]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


@dataclass(eq=False)
class FieldSample:
    """One time step: raw per-node input fields, optional raw target, node types."""

    node_type: np.ndarray
    fields: dict[str, np.ndarray]
    target: np.ndarray | None = None
    world_pos: np.ndarray | None = None


@dataclass(eq=False)
class MpBlock:
    edge: list[MlpParams]
    node: MlpParams


@dataclass(eq=False)
class BsmsParams:
    encoder: MlpParams
    decoder: MlpParams
    blocks: dict[str, MpBlock]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"encoder/{k}": v for k, v in self.encoder.tensors().items()}
        for name, blk in self.blocks.items():
            for s, e in enumerate(blk.edge):
                out.update({f"{name}/edge{s}/{k}": v for k, v in e.tensors().items()})
            out.update({f"{name}/node/{k}": v for k, v in blk.node.tensors().items()})
        out.update({f"decoder/{k}": v for k, v in self.decoder.tensors().items()})
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        mine = self.tensors()
        if set(mine) != set(tensors):
            raise ModelError(f"checkpoint tensors mismatch: {sorted(set(mine) ^ set(tensors))[:5]}")
        for k, v in mine.items():
            if v.shape != tensors[k].shape:
                raise ModelError(f"{k}: shape {tensors[k].shape} != {v.shape}")
            v[...] = tensors[k]


def _offset_width(cfg: ModelConfig, kinds: list[str], dim: int, world_dim: int) -> int:
    return sum((dim if k == "material" else world_dim) + 1 for k in kinds)


def init_model(cfg: ModelConfig, seed=0, dim: int = 1, world_dim: int | None = None) -> BsmsParams:
    """Random parameters for ``cfg``; ``dim`` is the spatial dimension of the mesh."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    world_dim = dim if world_dim is None else world_dim
    L, H = cfg.latent, cfg.hidden
    enc = init_params((cfg.in_width, H, H, L), rng)
    blocks = {}
    for name in cfg.visits():
        edges = [
            init_params((_offset_width(cfg, kinds, dim, world_dim) + 2 * L, H, H, L), rng) for kinds in cfg.edge_sets
        ]
        node = init_params((L * (1 + cfg.n_edge_sets), H, H, L), rng)
        blocks[name] = MpBlock(edges, node)
    dec = init_params((L, H, H, cfg.out_width), rng, layernorm=False)
    return BsmsParams(enc, dec, blocks)


def one_hot(node_type, k: int) -> np.ndarray:
    node_type = np.asarray(node_type, dtype=np.int64)
    if node_type.size and (node_type.min() < 0 or node_type.max() >= k):
        raise ModelError(f"node type outside [0, {k})")
    out = np.zeros((node_type.size, k))
    out[np.arange(node_type.size), node_type] = 1.0
    return out


def build_inputs(sample: FieldSample, cfg: ModelConfig, normalizer=None) -> np.ndarray:
    """Encoder input rows: node-type one-hot followed by the bound fields (normalised)."""
    parts = [one_hot(sample.node_type, cfg.node_types)]
    for name in cfg.input_fields:
        if name not in sample.fields:
            raise ModelError(f"sample is missing input field {name!r}")
        v = np.asarray(sample.fields[name], dtype=float).reshape(len(sample.node_type), -1)
        if v.shape[1] != cfg.field_dims[name]:
            raise ModelError(f"field {name!r} has {v.shape[1]} components, expected {cfg.field_dims[name]}")
        if normalizer is not None:
            v = normalizer.normalize(name, v)
        parts.append(v)
    x = np.concatenate(parts, axis=1)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("NaN or inf in model input")
    return x


def encode(params: BsmsParams, x_in: np.ndarray):
    return mlp_apply(params.encoder, x_in)


def decode(params: BsmsParams, v: np.ndarray, cfg: ModelConfig | None = None):
    q, cache = mlp_apply(params.decoder, v)
    if cfg is not None and q.shape[1] != cfg.out_width:
        raise ModelError(f"decoder width {q.shape[1]} != bound output width {cfg.out_width}")
    return q, cache


@dataclass(eq=False)
class EdgeSet:
    recv: np.ndarray
    send: np.ndarray
    feats: np.ndarray
    gather_recv: sp.csr_matrix  # n x m, sums edge rows into receivers
    gather_send: sp.csr_matrix


def _edge_set(adj, feats_of, n: int) -> EdgeSet:
    if adj is None:
        recv = send = np.zeros(0, dtype=np.int64)
    else:
        recv, send = adj.directed_edges()
    m = recv.size
    feats = feats_of(recv, send)
    ones = np.ones(m)
    k = np.arange(m)
    return EdgeSet(
        recv,
        send,
        feats,
        sp.csr_matrix((ones, (recv, k)), shape=(n, m)),
        sp.csr_matrix((ones, (send, k)), shape=(n, m)),
    )


def _offset_features(kinds, material, world, scale):
    def feats(recv, send):
        cols = []
        for k in kinds:
            x = material if k == "material" else world
            d = (x[recv] - x[send]) / scale
            cols += [d, np.linalg.norm(d, axis=1, keepdims=True)]
        return np.concatenate(cols, axis=1) if cols else np.zeros((recv.size, 0))

    return feats


def prepare_graphs(h: Hierarchy, cfg: ModelConfig, world_pos=None) -> dict:
    """Per-level edge sets with offset features, plus transition operators.

    World positions of coarse levels are the fine world positions strided by
    the pooled indices, so this must be recomputed whenever they change.
    """
    if h.depth != cfg.depth:
        raise ModelError(f"hierarchy depth {h.depth} != model depth {cfg.depth}")
    if world_pos is not None:
        world_pos = np.asarray(world_pos, dtype=float).reshape(h.levels[0].n, -1)
    elif any("world" in k for k in cfg.edge_sets):
        raise ModelError("config uses world offsets but no world positions were given")
    levels, ops = [], []
    w = world_pos
    for lvl, level in enumerate(h.levels):
        sets = []
        for s, kinds in enumerate(cfg.edge_sets):
            adj = level.adjacency if s == 0 else level.contact
            sets.append(_edge_set(adj, _offset_features(kinds, level.positions, w, cfg.offset_scale), level.n))
        levels.append(sets)
        if lvl < h.depth - 1:
            ops.append(transition_operators(level.table, cfg.transition, level.adjacency))
            if w is not None:
                w = w[level.plan.pooled]
    return {"levels": levels, "ops": ops, "sizes": h.sizes()}


def message_pass(block: MpBlock, edge_sets: list[EdgeSet], v: np.ndarray):
    """One message-passing step: edge MLPs per edge set, summed into receivers, residual node MLP."""
    if len(block.edge) != len(edge_sets):
        raise ModelError(f"block has {len(block.edge)} edge MLPs for {len(edge_sets)} edge sets")
    aggs, caches = [], []
    for mlp, es in zip(block.edge, edge_sets):
        e_in = np.concatenate([es.feats, v[es.recv], v[es.send]], axis=1)
        e, c = mlp_apply(mlp, e_in)
        aggs.append(np.asarray(es.gather_recv @ e))
        caches.append(c)
    u, cn = mlp_apply(block.node, np.concatenate([v] + aggs, axis=1))
    return v + u, (caches, cn)


def _message_pass_grad(block: MpBlock, edge_sets: list[EdgeSet], cache, dv_out):
    caches, cn = cache
    L = dv_out.shape[1]
    g_node, d_in = mlp_grad(block.node, cn, dv_out)
    dv = dv_out + d_in[:, :L]
    grads = {"node": g_node, "edge": []}
    for s, (mlp, es, c) in enumerate(zip(block.edge, edge_sets, caches)):
        d_agg = d_in[:, L * (1 + s) : L * (2 + s)]
        g_e, d_ein = mlp_grad(mlp, c, d_agg[es.recv])
        off = es.feats.shape[1]
        dv = dv + es.gather_recv @ d_ein[:, off : off + L] + es.gather_send @ d_ein[:, off + L :]
        grads["edge"].append(g_e)
    return grads, dv


def model_forward(params: BsmsParams, graphs: dict, x_in: np.ndarray, cfg: ModelConfig):
    """Normalised prediction q-hat and the tape needed for backprop."""
    d = cfg.depth
    levels, ops = graphs["levels"], graphs["ops"]
    if x_in.shape[0] != graphs["sizes"][0]:
        raise ModelError(f"{x_in.shape[0]} input rows for a {graphs['sizes'][0]}-node mesh")
    tape = {"mp": {}, "visits": []}
    v, tape["enc"] = encode(params, x_in)
    skips = []
    for l in range(d - 1):
        try:
            v, tape["mp"][f"down{l}"] = message_pass(params.blocks[f"down{l}"], levels[l], v)
        except ModelError as exc:
            raise ModelError(f"level {l + 1} (down): {exc}") from None
        tape["visits"].append(f"down{l}")
        skips.append(v)
        v = np.asarray(ops[l][0] @ v)
    v, tape["mp"]["bottom"] = message_pass(params.blocks["bottom"], levels[d - 1], v)
    tape["visits"].append("bottom")
    for l in reversed(range(d - 1)):
        v = np.asarray(ops[l][1] @ v)
        if cfg.skip:
            v = v + skips[l]
        v, tape["mp"][f"up{l}"] = message_pass(params.blocks[f"up{l}"], levels[l], v)
        tape["visits"].append(f"up{l}")
    q, tape["dec"] = decode(params, v, cfg)
    return q, tape


def model_backward(params: BsmsParams, graphs: dict, tape: dict, dq: np.ndarray, cfg: ModelConfig) -> dict:
    """Gradients of a scalar loss w.r.t. every tensor in ``params.tensors()``."""
    d = cfg.depth
    levels, ops = graphs["levels"], graphs["ops"]
    grads: dict[str, np.ndarray] = {}

    def put(prefix, g):
        for k, val in g.items():
            grads[f"{prefix}/{k}"] = val

    def put_block(name, g):
        put(f"{name}/node", g["node"])
        for s, ge in enumerate(g["edge"]):
            put(f"{name}/edge{s}", ge)

    g_dec, dv = mlp_grad(params.decoder, tape["dec"], dq)
    put("decoder", g_dec)
    dskips = [None] * (d - 1)
    for l in range(d - 1):
        g, dv = _message_pass_grad(params.blocks[f"up{l}"], levels[l], tape["mp"][f"up{l}"], dv)
        put_block(f"up{l}", g)
        if cfg.skip:
            dskips[l] = dv
        dv = np.asarray(ops[l][1].T @ dv)
    g, dv = _message_pass_grad(params.blocks["bottom"], levels[d - 1], tape["mp"]["bottom"], dv)
    put_block("bottom", g)
    for l in reversed(range(d - 1)):
        dv = np.asarray(ops[l][0].T @ dv)
        if dskips[l] is not None:
            dv = dv + dskips[l]
        g, dv = _message_pass_grad(params.blocks[f"down{l}"], levels[l], tape["mp"][f"down{l}"], dv)
        put_block(f"down{l}", g)
    g_enc, _ = mlp_grad(params.encoder, tape["enc"], dv)
    put("encoder", g_enc)
    return grads
