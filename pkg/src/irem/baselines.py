"""Comparison methods: one-shot feedforward regression and an iterative
feedforward network trained as a denoiser.

The iterative network maps (x, y_{t-1}) -> y_t.  Training corrupts the
target along a linear schedule ``y_t = a_t * y + (1 - a_t) * u`` with
``a_t = t / T`` and ``u ~ U(-1, 1)``; inference starts from pure noise and
applies the network ``T`` times.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .nets import GraphDescriptor, MlpDescriptor, Params, graph_edge_forward, init_params, mlp_forward
from .trainer import AdamState, TrainConfig, TrainResult, adam_update

KINDS = ("feedforward", "iterative-feedforward")


@dataclass
class BaselineModel:
    kind: str
    params: Params
    steps: int = 1


def _forward(params: Params, x, y_prev) -> np.ndarray | Tensor:
    if isinstance(params.descriptor, GraphDescriptor):
        return graph_edge_forward(params, x, y_prev)
    inp = x if y_prev is None else ad.concat([x, y_prev], axis=1)
    return mlp_forward(params, inp)


def baseline_predict(model: BaselineModel, x, steps: int | None = None, rng=None) -> np.ndarray:
    """Prediction for a batch.  Feedforward ignores ``steps``."""
    x_in = x if not isinstance(x, np.ndarray) else Tensor(x)
    with ad.no_grad():
        if model.kind == "feedforward":
            return _forward(model.params, x_in, None).data
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        t_steps = model.steps if steps is None else steps
        shape = _y_shape(model.params, x_in)
        y = rng.uniform(-1.0, 1.0, size=shape)
        for _ in range(t_steps):
            y = _forward(model.params, x_in, Tensor(y)).data
        return y


def _y_shape(params: Params, x) -> tuple[int, int]:
    d = params.descriptor
    if isinstance(d, GraphDescriptor):
        return (x.n_edges, d.out_dim)
    return (x.shape[0], d.out_dim)


def mlp_param_count(in_dim: int, hidden: int, out_dim: int, depth: int = 3) -> int:
    dims = [in_dim] + [hidden] * depth + [out_dim]
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def graph_param_count(d: GraphDescriptor) -> int:
    w = d.width
    n = (d.node_dim + 1) * w + (d.edge_dim + d.y_dim + 1) * w
    n += d.layers * (2 * (w * w + w) + 1)
    n += (w + 1) if d.readout == "energy" else (2 * w * d.out_dim + d.out_dim)
    return n


def matched_descriptor(task, kind: str, target_count: int):
    """Baseline descriptor whose parameter count is closest to ``target_count``."""
    if kind not in KINDS:
        raise ValueError(f"unknown baseline {kind!r}")
    iterative = kind == "iterative-feedforward"
    if task.is_graph:
        best = min(range(4, 513), key=lambda w: abs(graph_param_count(GraphDescriptor(
            task.node_dim, task.edge_dim, int(iterative), w, activation="relu", readout="edge")) - target_count))
        return GraphDescriptor(task.node_dim, task.edge_dim, int(iterative), best, activation="relu", readout="edge")
    in_dim = task.in_dim + (task.out_dim if iterative else 0)
    best = min(range(4, 2049), key=lambda h: abs(mlp_param_count(in_dim, h, task.out_dim) - target_count))
    return MlpDescriptor(in_dim, best, task.out_dim, activation="relu")


def baseline_train(task, kind: str, cfg: TrainConfig, descriptor=None, steps: int = 5,
                   target_count: int | None = None) -> tuple[BaselineModel, TrainResult]:
    """Train a baseline with Adam on elementwise MSE."""
    if descriptor is None:
        if target_count is None:
            raise ValueError("pass a descriptor or a parameter budget")
        descriptor = matched_descriptor(task, kind, target_count)
    init_ss, data_ss, noise_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    params = init_params(descriptor, np.random.default_rng(init_ss))
    data_rng = np.random.default_rng(data_ss)
    noise_rng = np.random.default_rng(noise_ss)
    adam = AdamState.for_params(params)
    records = []
    start = time.perf_counter()
    peak = 0
    for it in range(1, cfg.iterations + 1):
        batch = task.sample(cfg.batch_size, data_rng)
        xb = task.collate_x([p.x for p in batch])
        yb = task.collate_y([p.y for p in batch])
        x_in = xb if task.is_graph else Tensor(xb)
        with Graph() as g:
            if kind == "feedforward":
                pred = _forward(params, x_in, None)
                target = yb
            else:
                y_in, target = _denoise_pair(task, batch, xb, yb, steps, noise_rng)
                pred = _forward(params, x_in, Tensor(y_in))
            loss = ad.mean(ad.square(ad.sub(pred, target)))
            grads = ad.backward(loss, list(params), allow_unused=True)
            peak = max(peak, g.peak)
        adam_update(params, {k: gr.data for k, gr in zip(params.names(), grads)}, adam,
                    cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        if it % cfg.log_every == 0 or it == cfg.iterations:
            records.append({"iter": it, "loss": loss.item()})
    model = BaselineModel(kind, params, 1 if kind == "feedforward" else steps)
    return model, TrainResult(params, records, peak, time.perf_counter() - start)


def _denoise_pair(task, batch, xb, yb, steps: int, rng: np.random.Generator):
    """Noisy input at level t-1 and target at level t, t ~ U{1..T} per problem."""
    u = rng.uniform(-1.0, 1.0, size=yb.shape)
    t = rng.integers(1, steps + 1, size=len(batch)).astype(np.float64)
    if task.is_graph:
        t = np.repeat(t, [g.n_edges for g in (p.x for p in batch)])
    a_prev = ((t - 1.0) / steps)[:, None]
    a_cur = (t / steps)[:, None]
    return a_prev * yb + (1 - a_prev) * u, a_cur * yb + (1 - a_cur) * u
