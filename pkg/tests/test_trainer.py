import numpy as np
import pytest

from irem import autodiff as ad
from irem.autodiff import Graph
from irem.nets import MlpDescriptor, Params, energy_model, init_params
from irem.tasks import make_task
from irem.trainer import (
    AdamState,
    ReplayBuffer,
    TrainConfig,
    adam_update,
    inner_optimize,
    read_metrics,
    train,
    train_step,
    write_metrics,
)


def test_config_validation():
    for bad in [dict(inner_steps=0), dict(buffer_fraction=1.5), dict(lr=0.0), dict(batch_size=0)]:
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ---- replay buffer -----------------------------------------------------------

def test_buffer_is_fifo_and_bounded():
    buf = ReplayBuffer(capacity=3, rng=0)
    for i in range(4):
        buf.push(np.array([i]), np.array([i]), np.array([i]))
        assert len(buf) <= 3
    assert [int(e[0][0]) for e in buf.entries] == [1, 2, 3]


def test_buffer_samples_are_exact_copies():
    buf = ReplayBuffer(capacity=10, rng=1)
    stored = [(np.array([float(i)]), np.array([i + 0.5]), np.array([i - 0.25])) for i in range(6)]
    for e in stored:
        buf.push(*e)
    for x, y, yo in buf.sample(4):
        i = int(x[0])
        np.testing.assert_array_equal(y, stored[i][1])
        np.testing.assert_array_equal(yo, stored[i][2])


def test_buffer_sample_from_empty():
    assert ReplayBuffer(5, rng=0).sample(3) == []


# ---- Adam --------------------------------------------------------------------

def _scalar_params(v):
    return Params(None, {"t": ad.parameter(np.array([v]))})


def test_adam_zero_gradient_keeps_params():
    p = _scalar_params(0.7)
    adam_update(p, {"t": np.zeros(1)}, AdamState.for_params(p), lr=0.1)
    assert p["t"].data[0] == 0.7


@pytest.mark.parametrize("g", [3.0, -0.02])
def test_adam_first_step_is_sign_scaled(g):
    p = _scalar_params(1.0)
    adam_update(p, {"t": np.array([g])}, AdamState.for_params(p), lr=0.01)
    assert p["t"].data[0] == pytest.approx(1.0 - 0.01 * g / (abs(g) + 1e-8), abs=1e-15)


def test_adam_matches_scalar_simulation_and_envelope_shrinks():
    p = _scalar_params(1.0)
    state = AdamState.for_params(p)
    th, m, v = 1.0, 0.0, 0.0
    mags = []
    for t in range(1, 101):
        adam_update(p, {"t": p["t"].data.copy()}, state, lr=0.1)
        m = 0.9 * m + 0.1 * th
        v = 0.999 * v + 0.001 * th * th
        th -= 0.1 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
        assert p["t"].data[0] == pytest.approx(th, abs=1e-12)
        mags.append(abs(th))
    # |theta| falls monotonically during warmup, then the oscillation envelope decays
    assert all(a > b for a, b in zip(mags[:10], mags[1:11]))
    peaks = [mags[i] for i in range(1, 99) if mags[i - 1] < mags[i] >= mags[i + 1]]
    assert len(peaks) >= 3 and all(a > b for a, b in zip(peaks, peaks[1:]))


# ---- inner optimisation ----------------------------------------------------

class QuadModel:
    """E = sum(0.5 * a * y^2 + b * y) per row; curvature depends on theta."""

    def __init__(self, a, b):
        self.params = Params(None, {"a": ad.parameter(a), "b": ad.parameter(b)})

    def energy(self, x, y, z=None):
        p = self.params
        e = ad.add(ad.scale(ad.mul(p["a"], ad.square(y)), 0.5), ad.mul(p["b"], y))
        return ad.sum(e, axis=1)


def _unroll(a, b, y0, lam, n, a_grad=None, b_grad=None):
    """Plain numpy descent; the last step uses (a_grad, b_grad) if given."""
    y = y0.copy()
    for k in range(n):
        aa, bb = (a_grad, b_grad) if (k == n - 1 and a_grad is not None) else (a, b)
        y = y - lam * (aa * y + bb)
    return y


def _loss(y, t):
    return float(((y - t) ** 2).mean())


def _fd_grad(f, a, b, h=1e-6):
    ga, gb = np.zeros_like(a), np.zeros_like(b)
    for arr, out in ((a, ga), (b, gb)):
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            fp = f(a, b)
            arr[i] = old - h
            fm = f(a, b)
            arr[i] = old
            out[i] = (fp - fm) / (2 * h)
    return ga, gb


def _theta_grads(model, y0, lam, n, truncate, target):
    y, _ = inner_optimize(model, None, y0, n, lam, truncate)
    loss = ad.mean(ad.square(ad.sub(y, target)))
    ga, gb = ad.backward(loss, list(model.params))
    return ga.data, gb.data


def test_truncated_and_full_gradients_match_their_oracles():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0.1, 0.5, size=(1, 3)), rng.normal(size=(1, 3))
    y0, target = rng.uniform(-1, 1, size=(2, 3)), rng.normal(size=(2, 3))
    lam, n = 0.8, 3
    full = _theta_grads(QuadModel(a, b), y0, lam, n, False, target)
    trunc = _theta_grads(QuadModel(a, b), y0, lam, n, True, target)

    a0, b0 = a.copy(), b.copy()
    full_fd = _fd_grad(lambda aa, bb: _loss(_unroll(aa, bb, y0, lam, n), target), a.copy(), b.copy())
    trunc_fd = _fd_grad(lambda aa, bb: _loss(_unroll(a0, b0, y0, lam, n, aa, bb), target), a.copy(), b.copy())
    for got, want in zip(full + trunc, full_fd + trunc_fd):
        rel = np.abs(got - want) / (np.abs(got) + np.abs(want) + 1e-8)
        assert rel.max() < 1e-3
    assert not np.allclose(full[0], trunc[0])


def test_single_step_same_under_both_modes():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0.1, 0.5, size=(1, 2)), rng.normal(size=(1, 2))
    y0, t = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    g1 = _theta_grads(QuadModel(a, b), y0, 0.5, 1, True, t)
    g2 = _theta_grads(QuadModel(a, b), y0, 0.5, 1, False, t)
    for u, v in zip(g1, g2):
        np.testing.assert_array_equal(u, v)


@pytest.mark.parametrize("truncate", [True, False])
def test_zero_step_size_gives_zero_theta_gradient(truncate):
    model = energy_model(init_params(MlpDescriptor(in_dim=6, hidden=8), 0))
    rng = np.random.default_rng(2)
    x, y0, t = rng.normal(size=(4, 4)), rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    y, _ = inner_optimize(model, x, y0, 3, 0.0, truncate)
    np.testing.assert_array_equal(y.data, y0)
    grads = ad.backward(ad.mean(ad.square(ad.sub(y, t))), list(model.params.tensors.values()), allow_unused=True)
    assert all(not g.data.any() for g in grads)


def _peak_nodes(n_steps, truncate):
    model = energy_model(init_params(MlpDescriptor(in_dim=12, hidden=16), 0))
    rng = np.random.default_rng(3)
    x, y0, t = rng.normal(size=(8, 8)), rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    with Graph() as g:
        y, _ = inner_optimize(model, x, y0, n_steps, 1.0, truncate)
        ad.backward(ad.mean(ad.square(ad.sub(y, t))), list(model.params.tensors.values()), allow_unused=True)
        return g.peak


def test_truncated_graph_size_independent_of_steps():
    assert _peak_nodes(2, True) == _peak_nodes(8, True)
    full = [_peak_nodes(n, False) for n in (2, 4, 8)]
    assert full[0] < full[1] < full[2]
    # linear growth: equal increments per added step
    assert (full[2] - full[1]) == pytest.approx(2 * (full[1] - full[0]), rel=0.05)
    assert _peak_nodes(5, True) < 0.5 * _peak_nodes(5, False)


# ---- train_step / train -----------------------------------------------------------

class ExactAdder:
    """E = 0.5 * s * ||y - x W||^2 with W stacking two identities."""

    def __init__(self, dim, s):
        w = np.vstack([np.eye(dim), np.eye(dim)])
        self.params = Params(None, {"W": ad.parameter(w), "s": ad.parameter(np.array([s]))})

    def energy(self, x, y, z=None):
        r = ad.sub(y, ad.matmul(x, self.params["W"]))
        return ad.mul(ad.scale(ad.sum(ad.square(r), axis=1), 0.5), self.params["s"])


def test_perfect_model_has_zero_loss_and_gradient():
    task = make_task("addition", dim=3)
    model = ExactAdder(3, 0.01)  # lambda * s = 1: one step lands on the minimum
    rng = np.random.default_rng(0)
    cfg = TrainConfig(batch_size=8, inner_steps=1, lr=1e-12)
    stats = train_step(model, ReplayBuffer(100, 0), task.sample(8, rng), task, cfg,
                       AdamState.for_params(model.params), rng)
    assert stats.loss < 1e-25


def test_empty_buffer_means_all_fresh_then_mixing():
    task = make_task("addition", dim=4)
    model = energy_model(init_params(MlpDescriptor(in_dim=12, hidden=8), 0))
    rng = np.random.default_rng(1)
    buf, adam = ReplayBuffer(1000, 1), AdamState.for_params(model.params)
    cfg = TrainConfig(batch_size=10, step_size=1.0, lr=1e-3, buffer_fraction=0.5)
    first = train_step(model, buf, task.sample(10, rng), task, cfg, adam, rng)
    assert first.n_replayed == 0 and len(buf) == 10
    second = train_step(model, buf, task.sample(10, rng), task, cfg, adam, rng)
    assert second.n_replayed == 5 and len(buf) == 20
    assert first.loss >= 0 and second.loss >= 0


def test_empty_batch_raises():
    task = make_task("addition", dim=2)
    model = energy_model(init_params(MlpDescriptor(in_dim=6, hidden=4), 0))
    with pytest.raises(ValueError):
        train_step(model, ReplayBuffer(10, 0), [], task, TrainConfig(), AdamState.for_params(model.params),
                   np.random.default_rng(0))


def test_graph_task_train_step_runs():
    from irem.nets import GraphDescriptor

    task = make_task("shortest-path", n_range=(2, 4))
    model = energy_model(init_params(GraphDescriptor(width=8), 0))
    rng = np.random.default_rng(0)
    buf, adam = ReplayBuffer(100, 0), AdamState.for_params(model.params)
    cfg = TrainConfig(batch_size=4, step_size=1.0, lr=1e-3)
    for _ in range(3):
        stats = train_step(model, buf, task.sample(4, rng), task, cfg, adam, rng)
    assert stats.n_replayed == 2 and np.isfinite(stats.loss)


def test_intermediate_supervision_sums_step_losses():
    task = make_task("addition", dim=3)
    model = energy_model(init_params(MlpDescriptor(in_dim=9, hidden=8), 0))
    batch = task.sample(6, np.random.default_rng(5))
    final = TrainConfig(batch_size=6, step_size=1.0, inner_steps=3, lr=1e-12)
    every = final.replace(supervise_intermediate=True)
    a = train_step(model, ReplayBuffer(10, 0), batch, task, final, AdamState.for_params(model.params),
                   np.random.default_rng(0))
    b = train_step(model, ReplayBuffer(10, 0), batch, task, every, AdamState.for_params(model.params),
                   np.random.default_rng(0))
    assert b.loss > a.loss


def test_zero_iterations_returns_initial_params():
    task = make_task("addition", dim=2)
    d = MlpDescriptor(in_dim=6, hidden=4)
    res = train(task, d, TrainConfig(iterations=0, seed=3))
    init_ss = np.random.SeedSequence(3).spawn(4)[0]
    assert res.params.checksum() == init_params(d, np.random.default_rng(init_ss)).checksum()
    assert res.log == []


def test_training_is_deterministic(tmp_path):
    task = make_task("addition", dim=3)
    d = MlpDescriptor(in_dim=9, hidden=8)
    cfg = TrainConfig(iterations=12, batch_size=8, lr=1e-3, step_size=10.0, log_every=4, seed=7)
    r1 = train(task, d, cfg, metrics_path=tmp_path / "a.jsonl")
    r2 = train(task, d, cfg, metrics_path=tmp_path / "b.jsonl")
    assert r1.params.checksum() == r2.params.checksum()
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert [r["iter"] for r in r1.log] == [4, 8, 12]
    r3 = train(task, d, cfg.replace(seed=8))
    assert r3.params.checksum() != r1.params.checksum()


def test_metrics_round_trip(tmp_path):
    recs = [{"iter": 1, "loss": 0.5}, {"iter": 2, "loss": 0.25, "eval_mse_same": 0.1}]
    write_metrics(tmp_path / "m.jsonl", recs)
    assert read_metrics(tmp_path / "m.jsonl") == recs
