import numpy as np
import pytest

from bsms.bistride import build_hierarchy
from bsms.graph import build_adjacency
from bsms.heat1d import NODE_TYPES
from bsms.mesh_io import mesh_to_graph
from bsms.model import (
    FieldSample,
    ModelConfig,
    ModelError,
    build_inputs,
    decode,
    encode,
    init_model,
    message_pass,
    model_backward,
    model_forward,
    one_hot,
    prepare_graphs,
)
from bsms.nn import mlp_apply

from conftest import path_graph, random_triangulation


def small_cfg(depth=2, edge_sets=None, **kw):
    return ModelConfig(
        input_fields=["u"],
        output_fields=["u"],
        field_dims={"u": 2},
        node_types=2,
        latent=6,
        hidden=6,
        depth=depth,
        edge_sets=edge_sets or [["material"]],
        **kw,
    )


def perturb(params, rng, scale=0.3):
    # non-trivial LayerNorm affine and biases so every tensor gets a real gradient
    for t in params.tensors().values():
        t += rng.normal(scale=scale, size=t.shape)
    return params


def tiny_problem(rng, n=10, depth=2, contact=False):
    mesh = random_triangulation(rng, n)
    adj = mesh_to_graph(mesh)
    ac = None
    if contact:
        ac = build_adjacency(n, [(0, n - 1), (1, n - 2)])
    h = build_hierarchy(adj, mesh.positions, contact=ac, depth=depth)
    x = np.concatenate([one_hot(rng.integers(0, 2, n), 2), rng.normal(size=(n, 2))], axis=1)
    return mesh, h, x


def fd_grads(params, graphs, x, y, cfg, h=1e-5):
    def loss():
        q, _ = model_forward(params, graphs, x, cfg)
        return float(np.mean((q - y) ** 2))

    out = {}
    for name, t in params.tensors().items():
        num = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            old = t[idx]
            t[idx] = old + h
            up = loss()
            t[idx] = old - h
            down = loss()
            t[idx] = old
            num[idx] = (up - down) / (2 * h)
        out[name] = num
    return out


def max_rel_err(ana, num):
    worst = 0.0
    for k in num:
        scale = max(np.max(np.abs(ana[k])), np.max(np.abs(num[k])), 1e-12)
        worst = max(worst, float(np.max(np.abs(ana[k] - num[k])) / scale))
    return worst


@pytest.mark.parametrize("transition", ["weighted", "none", "graphconv"])
def test_end_to_end_gradients(transition):
    rng = np.random.default_rng(7)
    cfg = small_cfg(transition=transition)
    _, h, x = tiny_problem(rng, n=10)
    params = perturb(init_model(cfg, 3, dim=2), rng)
    graphs = prepare_graphs(h, cfg)
    y = rng.normal(size=(10, 2))
    q, tape = model_forward(params, graphs, x, cfg)
    ana = model_backward(params, graphs, tape, 2 * (q - y) / q.size, cfg)
    num = fd_grads(params, graphs, x, y, cfg)
    assert set(ana) == set(num)
    assert max_rel_err(ana, num) < 1e-4


def test_gradients_with_contact_and_world_offsets():
    rng = np.random.default_rng(8)
    cfg = small_cfg(edge_sets=[["material", "world"], ["world"]], world_field="u", skip=False)
    mesh, h, x = tiny_problem(rng, n=9, contact=True)
    params = perturb(init_model(cfg, 4, dim=2, world_dim=2), rng)
    graphs = prepare_graphs(h, cfg, mesh.positions + rng.normal(scale=0.1, size=(9, 2)))
    y = rng.normal(size=(9, 2))
    q, tape = model_forward(params, graphs, x, cfg)
    ana = model_backward(params, graphs, tape, 2 * (q - y) / q.size, cfg)
    assert max_rel_err(ana, fd_grads(params, graphs, x, y, cfg)) < 1e-4


@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_visit_count(depth):
    rng = np.random.default_rng(depth)
    cfg = small_cfg(depth=depth)
    _, h, x = tiny_problem(rng, n=30, depth=depth)
    params = init_model(cfg, 0, dim=2)
    _, tape = model_forward(params, prepare_graphs(h, cfg), x, cfg)
    assert len(tape["visits"]) == 2 * depth - 1 == len(params.blocks)
    assert tape["visits"] == cfg.visits()


def test_translation_invariance():
    rng = np.random.default_rng(3)
    cfg = small_cfg(depth=3, edge_sets=[["material", "world"]], world_field="u")
    mesh, h, x = tiny_problem(rng, n=25, depth=3)
    shift = np.array([3.5, -1.25])
    h2 = build_hierarchy(mesh_to_graph(mesh), mesh.positions + shift, depth=3)
    params = perturb(init_model(cfg, 0, dim=2), rng, 0.1)
    world = rng.normal(size=(25, 2))
    q1, _ = model_forward(params, prepare_graphs(h, cfg, world), x, cfg)
    q2, _ = model_forward(params, prepare_graphs(h2, cfg, world + shift), x, cfg)
    assert np.max(np.abs(q1 - q2)) < 1e-10


def test_permutation_equivariance():
    rng = np.random.default_rng(11)
    for _ in range(5):
        n = int(rng.integers(8, 31))
        mesh = random_triangulation(rng, n)
        adj = mesh_to_graph(mesh)
        perm = rng.permutation(n)  # new label k holds old node perm[k]
        inv = np.argsort(perm)
        adj_p = build_adjacency(n, inv[adj.edges()])
        cfg = small_cfg(depth=3)
        h = build_hierarchy(adj, mesh.positions, depth=3, heuristic="closecenter")
        hp = build_hierarchy(adj_p, mesh.positions[perm], depth=3, heuristic="closecenter")
        x = np.concatenate([one_hot(rng.integers(0, 2, n), 2), rng.normal(size=(n, 2))], axis=1)
        params = perturb(init_model(cfg, 1, dim=2), rng, 0.1)
        q, _ = model_forward(params, prepare_graphs(h, cfg), x, cfg)
        qp, _ = model_forward(params, prepare_graphs(hp, cfg), x[perm], cfg)
        assert np.max(np.abs(qp - q[perm])) < 1e-10


def zero_blocks(params):
    for blk in params.blocks.values():
        for mlp in blk.edge + [blk.node]:
            for t in mlp.tensors().values():
                t[...] = 0.0


def test_zero_processor_depth_one():
    rng = np.random.default_rng(0)
    cfg = small_cfg(depth=1)
    _, h, x = tiny_problem(rng, n=8, depth=1)
    params = perturb(init_model(cfg, 0, dim=2), rng)
    zero_blocks(params)
    q, _ = model_forward(params, prepare_graphs(h, cfg), x, cfg)
    v, _ = encode(params, x)
    assert np.allclose(q, decode(params, v)[0], rtol=0, atol=1e-14)


def test_zero_processor_depth_two():
    rng = np.random.default_rng(1)
    cfg = small_cfg(depth=2)
    _, h, x = tiny_problem(rng, n=12, depth=2)
    params = perturb(init_model(cfg, 0, dim=2), rng)
    zero_blocks(params)
    q, _ = model_forward(params, prepare_graphs(h, cfg), x, cfg)
    v, _ = encode(params, x)
    c = h.levels[0].table.to_dense()
    expected, _ = decode(params, v + c @ (c.T @ v))
    assert np.allclose(q, expected, rtol=0, atol=1e-12)


def test_message_pass_without_edges():
    rng = np.random.default_rng(2)
    cfg = small_cfg(depth=1)
    h = build_hierarchy(build_adjacency(3, []), np.zeros((3, 2)), depth=1)
    params = perturb(init_model(cfg, 0, dim=2), rng)
    v = rng.normal(size=(3, 6))
    out, _ = message_pass(params.blocks["bottom"], prepare_graphs(h, cfg)["levels"][0], v)
    u, _ = mlp_apply(params.blocks["bottom"].node, np.concatenate([v, np.zeros((3, 6))], axis=1))
    assert np.allclose(out, v + u, rtol=0, atol=1e-14)


def test_symmetric_edge_symmetric_output():
    rng = np.random.default_rng(4)
    cfg = small_cfg(depth=1)
    params = perturb(init_model(cfg, 0, dim=1), rng)
    h = build_hierarchy(path_graph(2), np.array([[0.0], [1.0]]), depth=1)
    levels = prepare_graphs(h, cfg)["levels"][0]
    row = rng.normal(size=6)
    # offsets differ in sign only, so outputs agree when the edge MLP sees |dx| alone
    for mlp in params.blocks["bottom"].edge:
        mlp.W1[0] = 0.0
        if mlp.P is not None:
            mlp.P[0] = 0.0
    out, _ = message_pass(params.blocks["bottom"], levels, np.stack([row, row]))
    assert np.allclose(out[0], out[1], rtol=0, atol=1e-14)


def test_heat1d_input_width():
    cfg = ModelConfig(["boundary"], ["temperature"], {"boundary": 1, "temperature": 1}, node_types=NODE_TYPES)
    s = FieldSample(np.array([0, 2, 1]), {"boundary": np.array([[0.0], [0.0], [1.0]])})
    x = build_inputs(s, cfg)
    assert x.shape == (3, 4)
    assert x[2].tolist() == [0.0, 1.0, 0.0, 1.0]


def test_input_errors():
    cfg = small_cfg()
    with pytest.raises(ModelError):
        build_inputs(FieldSample(np.zeros(2, dtype=int), {}), cfg)
    with pytest.raises(FloatingPointError):
        build_inputs(FieldSample(np.zeros(2, dtype=int), {"u": np.array([[0.0, np.nan], [0.0, 0.0]])}), cfg)
    with pytest.raises(ModelError):
        one_hot([0, 5], 2)


def test_decoder_width_mismatch():
    cfg = small_cfg()
    params = init_model(cfg, 0, dim=2)
    other = ModelConfig(["u"], ["u"], {"u": 3}, latent=6, hidden=6)
    with pytest.raises(ModelError):
        decode(params, np.zeros((2, 6)), other)
    assert params.decoder.gamma is None


def test_zero_decoder():
    cfg = small_cfg()
    params = init_model(cfg, 0, dim=2)
    params.decoder.P[...] = 0.0
    for k in ("W3", "b3"):
        getattr(params.decoder, k)[...] = 0.0
    q, _ = decode(params, np.ones((4, 6)))
    assert not q.any()


def test_depth_mismatch():
    cfg = small_cfg(depth=3)
    with pytest.raises(ModelError):
        prepare_graphs(build_hierarchy(path_graph(8), np.arange(8.0), depth=2), cfg)


def test_config_roundtrip():
    cfg = small_cfg(transition="graphconv", output_mode="absolute", step_offset=0)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ModelError):
        small_cfg(edge_sets=[["world"]])
