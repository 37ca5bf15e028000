import numpy as np
import pytest

from bsms.bistride import build_hierarchy
from bsms.mesh_io import Trajectory, make_mesh, mesh_to_graph
from bsms.model import FieldSample, ModelConfig
from bsms.train import (
    TARGET,
    Adam,
    BsmsModel,
    Example,
    Normalizer,
    TrainConfig,
    eval_metrics,
    fit_normalizer,
    inject_noise,
    rollout,
    sample_loss,
    samples_from_trajectory,
    train,
    train_step,
)

from conftest import random_triangulation


def cfg_u(**kw):
    base = dict(input_fields=["u"], output_fields=["u"], field_dims={"u": 1}, latent=8, hidden=8, depth=2)
    base.update(kw)
    return ModelConfig(**base)


def sample(values, target=None):
    v = np.asarray(values, dtype=float).reshape(-1, 1)
    return FieldSample(np.zeros(v.shape[0], dtype=int), {"u": v}, target)


# normalizer


def test_normalizer_constant_field():
    norm = fit_normalizer([sample([2.0, 2.0, 2.0])], cfg_u())
    assert norm.mean["u"].tolist() == [2.0] and norm.std["u"].tolist() == [1e-8]


def test_normalizer_unit_field():
    norm = fit_normalizer([sample([-1.0, 1.0])], cfg_u())
    assert norm.mean["u"].tolist() == [0.0] and norm.std["u"].tolist() == [1.0]


def test_normalizer_roundtrip(rng):
    norm = fit_normalizer([sample(rng.normal(3, 2, 50), rng.normal(size=(50, 1)))], cfg_u())
    v = rng.normal(size=(10, 1))
    assert np.max(np.abs(norm.denormalize("u", norm.normalize("u", v)) - v)) < 1e-12
    back = Normalizer.from_dict(norm.to_dict())
    assert np.array_equal(back.mean[TARGET], norm.mean[TARGET])


def test_normalizer_empty():
    with pytest.raises(ValueError):
        fit_normalizer([], cfg_u())


# noise


def test_noise_zero_scale(rng):
    s = sample([1.0, 2.0], np.array([[0.5], [0.5]]))
    out = inject_noise(s, {"u": 0.0}, rng, cfg_u())
    assert np.array_equal(out.fields["u"], s.fields["u"]) and np.array_equal(out.target, s.target)


def test_noise_reproducible():
    s = sample(np.zeros(20), np.zeros((20, 1)))
    a = inject_noise(s, {"u": 0.1}, np.random.default_rng(5), cfg_u())
    b = inject_noise(s, {"u": 0.1}, np.random.default_rng(5), cfg_u())
    assert np.array_equal(a.fields["u"], b.fields["u"])


def test_noise_statistics_and_target_correction(rng):
    s = sample(np.zeros(100_000), np.ones((100_000, 1)))
    out = inject_noise(s, {"u": 0.3}, rng, cfg_u())
    assert abs(out.fields["u"].std() / 0.3 - 1.0) < 0.02
    # the delta target still lands on the true next state
    assert np.allclose(out.fields["u"] + out.target, 1.0, atol=1e-12)
    absolute = inject_noise(s, {"u": 0.3}, rng, cfg_u(output_mode="absolute"))
    assert np.array_equal(absolute.target, s.target)


def test_noise_unknown_field(rng):
    with pytest.raises(ValueError):
        inject_noise(sample([1.0]), {"v": 0.1}, rng, cfg_u())


# training


def toy_examples(rng, n=10, k=2):
    mesh = random_triangulation(rng, n)
    h = build_hierarchy(mesh_to_graph(mesh), mesh.positions, depth=2)
    out = []
    for _ in range(k):
        u = rng.normal(size=(n, 1))
        out.append(Example(FieldSample(np.zeros(n, dtype=int), {"u": u}, 0.5 * u), h))
    return out


def make_model(examples, seed=0, **kw):
    cfg = cfg_u(**kw)
    norm = fit_normalizer([e.sample for e in examples], cfg, [e.hierarchy for e in examples])
    return BsmsModel.create(cfg, seed, norm, dim=2)


def test_loss_decreases():
    rng = np.random.default_rng(0)
    ex = toy_examples(rng, k=1)
    model = make_model(ex)
    opt = Adam(1e-3)
    losses = [train_step(model, ex, opt) for _ in range(50)]
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


def test_zero_loss_leaves_params():
    rng = np.random.default_rng(1)
    ex = toy_examples(rng, k=1)
    model = make_model(ex)
    model.params.decoder.W3[...] = 0.0
    model.params.decoder.b3[...] = 0.0
    model.params.decoder.P[...] = 0.0
    model.normalizer.mean[TARGET] = np.zeros(1)
    model.normalizer.std[TARGET] = np.ones(1)
    ex[0].sample.target = np.zeros_like(ex[0].sample.target)
    before = {k: v.copy() for k, v in model.params.tensors().items()}
    loss = train_step(model, ex, Adam(1e-3))
    assert loss == 0.0
    for k, v in model.params.tensors().items():
        assert np.max(np.abs(v - before[k])) <= 1e-12


def test_training_deterministic():
    def run():
        rng = np.random.default_rng(2)
        ex = toy_examples(rng)
        model = make_model(ex, seed=9)
        return train(model, ex, TrainConfig(epochs=6, batch_size=1, noise={"u": 0.01}, seed=4))

    assert run() == run()


def test_lr_schedule():
    t = TrainConfig(epochs=9, lr=1.0)
    assert [t.lr_at(e) for e in range(9)] == [1.0] * 3 + [0.5] * 3 + [0.25] * 3
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(noise={"u": -1.0})


def test_nonfinite_loss_aborts():
    rng = np.random.default_rng(3)
    ex = toy_examples(rng, k=1)
    model = make_model(ex)
    ex[0].sample.target = np.full_like(ex[0].sample.target, np.inf)
    with pytest.raises(FloatingPointError):
        train_step(model, ex, Adam())


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    ex = toy_examples(rng, k=1)
    model = make_model(ex)
    model.save(tmp_path / "m.json", {"note": 1})
    back, meta = BsmsModel.load(tmp_path / "m.json")
    assert meta == {"note": 1, "format": "bsms-tensors/1"}
    assert back.cfg == model.cfg
    assert np.array_equal(back.predict(ex[0].hierarchy, ex[0].sample), model.predict(ex[0].hierarchy, ex[0].sample))


def test_sample_loss_matches_mse():
    rng = np.random.default_rng(5)
    ex = toy_examples(rng, k=1)
    model = make_model(ex)
    loss, dq, _, _ = sample_loss(model, ex[0])
    q, _, _ = model.forward(ex[0])
    t = model.normalizer.normalize(TARGET, ex[0].sample.target)
    assert loss == pytest.approx(np.mean((q - t) ** 2), rel=1e-14)


# rollout and metrics


def decay_trajectory(n=6, steps=8):
    mesh = make_mesh(np.arange(n, dtype=float), [(i, i + 1) for i in range(n - 1)])
    u0 = np.linspace(1.0, 2.0, n)
    u = np.stack([u0 * 0.9**t for t in range(steps)])[:, :, None]
    return Trajectory(mesh, {"u": u})


def test_samples_from_trajectory():
    traj = decay_trajectory()
    s = samples_from_trajectory(traj, cfg_u())
    assert len(s) == 7
    assert np.allclose(s[0].target, traj.fields["u"][1] - traj.fields["u"][0])
    a = samples_from_trajectory(traj, cfg_u(output_mode="absolute", step_offset=0))
    assert len(a) == 8 and np.array_equal(a[3].target, traj.fields["u"][3])


def test_oracle_rollout_reproduces_truth():
    traj = decay_trajectory()
    cfg = cfg_u()
    truth = traj.fields["u"]

    def oracle(s):
        # true delta for the current state: u_{t+1} - u_t = -0.1 u_t
        return -0.1 * s.fields["u"]

    pred = rollout(oracle, samples_from_trajectory(traj, cfg)[0], 7, cfg)
    assert pred.shape == (7, 6, 1)
    assert np.max(np.abs(pred - truth[1:])) < 1e-12


def test_rollout_absolute_and_empty():
    cfg = cfg_u(output_mode="absolute", step_offset=0)
    s = sample([1.0, 2.0])
    assert rollout(lambda x: x.fields["u"] * 2, s, 0, cfg).shape == (0, 2, 1)
    out = rollout(lambda x: x.fields["u"] * 2, s, 3, cfg)
    assert out[:, :, 0].tolist() == [[2.0, 4.0], [4.0, 8.0], [8.0, 16.0]]


def test_rollout_nonfinite():
    with pytest.raises(FloatingPointError):
        rollout(lambda x: np.full((1, 1), np.nan), sample([1.0]), 2, cfg_u())


def test_metrics_examples(rng):
    t = rng.normal(size=(60, 5, 2))
    m = eval_metrics(t, t)
    assert m["rmse_1"] == m["rmse_50"] == m["rmse_all"] == 0.0
    m = eval_metrics(t + 0.25, t)
    assert all(abs(m[k] - 0.25) < 1e-12 for k in ("rmse_1", "rmse_50", "rmse_all"))
    assert m["horizon_50"] == 50 and not m["horizon_clamped"]
    m = eval_metrics(np.array([[[3.0]], [[4.0]]]), np.zeros((2, 1, 1)))
    assert m["rmse_all"] == pytest.approx(np.sqrt(12.5), abs=1e-12)
    assert m["rmse_1"] == 3.0 and m["horizon_50"] == 2 and m["horizon_clamped"]


def test_metrics_shape_mismatch():
    with pytest.raises(ValueError):
        eval_metrics(np.zeros((3, 2, 1)), np.zeros((3, 3, 1)))
    with pytest.raises(ValueError):
        eval_metrics(np.zeros((4, 2, 1)), np.zeros((3, 2, 1)))
