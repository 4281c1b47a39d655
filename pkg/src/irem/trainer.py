"""Training energy models by backpropagating through a few descent steps.

Each iteration draws a batch that mixes fresh problems (candidates from
U(-1, 1)) with replayed problems (candidates from earlier optimisation),
runs ``inner_steps`` descent steps, regresses the final candidate onto the
target, and updates parameters with Adam.
"""
from __future__ import annotations

import json
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, NonFiniteError, Tensor
from .nets import Params, energy_model, init_params, save_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    inner_steps: int = 5
    step_size: float = 100.0
    buffer_fraction: float = 0.5
    buffer_capacity: int = 10_000
    truncate: bool = True
    supervise_intermediate: bool = False
    batch_size: int = 64
    iterations: int = 3000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if not 0.0 <= self.buffer_fraction <= 1.0:
            raise ValueError("buffer_fraction must lie in [0, 1]")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})


class ReplayBuffer:
    """Bounded FIFO of (x, y_true, y_optimized) entries."""

    def __init__(self, capacity: int = 10_000, rng=None):
        self.capacity = capacity
        self.entries: deque = deque(maxlen=capacity)
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, x, y, y_opt) -> None:
        self.entries.append((x, np.array(y, copy=True), np.array(y_opt, copy=True)))

    def sample(self, k: int) -> list[tuple]:
        k = min(k, len(self.entries))
        if k == 0:
            return []
        idx = self.rng.choice(len(self.entries), size=k, replace=False)
        return [self.entries[i] for i in idx]


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @staticmethod
    def for_params(params: Params) -> "AdamState":
        return AdamState({k: np.zeros_like(t.data) for k, t in params.tensors.items()},
                         {k: np.zeros_like(t.data) for k, t in params.tensors.items()})


def adam_update(params: Params, grads: dict[str, np.ndarray], state: AdamState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Params:
    """Bias-corrected Adam step, applied to ``params`` in place."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.tensors.items():
        g = grads[name]
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def inner_optimize(model, x, y0, n_steps: int, step_size: float, truncate: bool = True):
    """``n_steps`` descent steps from ``y0`` that stay differentiable in theta.

    With ``truncate`` only the last step keeps its dependence on the
    parameters (through the mixed derivative of grad_y E); earlier steps run
    on detached values.  Otherwise the whole unrolled chain is kept.
    Returns the final candidate and the list of all post-step candidates.
    """
    steps: list[Tensor] = []
    if truncate:
        y = np.asarray(y0.data if isinstance(y0, Tensor) else y0, dtype=np.float64)
        for _ in range(n_steps - 1):
            e = ad.sum(model.energy(x, yt := ad.tensor(y, requires_grad=True)))
            (g,) = ad.backward(e, [yt])
            y = y - step_size * g.data
            steps.append(Tensor(y))
        yt = ad.tensor(y, requires_grad=True)
    else:
        yt = ad.tensor(np.asarray(y0.data if isinstance(y0, Tensor) else y0), requires_grad=True)
    for _ in range(1 if truncate else n_steps):
        e = ad.sum(model.energy(x, yt))
        (g,) = ad.backward(e, [yt], create_graph=True)
        yt = ad.sub(yt, ad.scale(g, step_size))
        steps.append(yt)
    return yt, steps


def _sq_error(y: Tensor, target: np.ndarray) -> Tensor:
    return ad.mean(ad.square(ad.sub(y, target)))


@dataclass
class StepStats:
    loss: float
    peak_nodes: int
    total_nodes: int
    n_replayed: int


def train_step(model, buffer: ReplayBuffer, batch: list, task, cfg: TrainConfig,
               adam: AdamState, rng: np.random.Generator) -> StepStats:
    """One iteration: mix fresh and replayed problems, optimise, update, store."""
    if not batch:
        raise ValueError("empty batch")
    params: Params = model.params
    n_replay = int(round(cfg.buffer_fraction * len(batch))) if len(buffer) else 0
    replayed = buffer.sample(n_replay)
    fresh = batch[: len(batch) - len(replayed)]

    xs = [p.x for p in fresh] + [e[0] for e in replayed]
    ys = [p.y for p in fresh] + [e[1] for e in replayed]
    xb = task.collate_x(xs)
    yb = task.collate_y(ys)
    y_shape = task.y_shape(xb)
    n_fresh_rows = y_shape[0] - sum(len(e[2]) for e in replayed) if task.is_graph else len(fresh)
    y0_fresh = rng.uniform(-1.0, 1.0, size=(n_fresh_rows,) + y_shape[1:])
    y0 = np.concatenate([y0_fresh] + [e[2][None] if not task.is_graph else e[2] for e in replayed]) \
        if replayed else y0_fresh
    x_in = xb if task.is_graph else Tensor(xb)

    with Graph() as graph:
        y_final, steps = inner_optimize(model, x_in, y0, cfg.inner_steps, cfg.step_size, cfg.truncate)
        if cfg.supervise_intermediate:
            loss = _sq_error(steps[0], yb)
            for s in steps[1:]:
                loss = ad.add(loss, _sq_error(s, yb))
        else:
            loss = _sq_error(y_final, yb)
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("non-finite training loss")
        grads = ad.backward(loss, list(params), allow_unused=True)
        stats = StepStats(loss.item(), graph.peak, graph.size, len(replayed))
    adam_update(params, {k: g.data for k, g in zip(params.names(), grads)}, adam,
                cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    for x_i, y_i, yo_i in zip(xs, ys, task.split_y(y_final.data, xs)):
        buffer.push(x_i, y_i, yo_i)
    return stats


@dataclass
class TrainResult:
    params: Params
    log: list[dict]
    peak_nodes: int
    seconds: float


def train(task, descriptor, cfg: TrainConfig, evaluate=None, checkpoint=None,
          metrics_path=None) -> TrainResult:
    """Run ``cfg.iterations`` training steps.

    ``evaluate(params) -> dict`` is called at each logging interval and its
    entries merged into the log record.  Everything random derives from
    ``cfg.seed``, so equal configs give bit-identical parameters and logs.
    """
    init_ss, data_ss, buf_ss, cand_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    params = init_params(descriptor, np.random.default_rng(init_ss))
    model = energy_model(params)
    data_rng = np.random.default_rng(data_ss)
    cand_rng = np.random.default_rng(cand_ss)
    buffer = ReplayBuffer(cfg.buffer_capacity, np.random.default_rng(buf_ss))
    adam = AdamState.for_params(params)
    records: list[dict] = []
    peak = 0
    start = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        batch = task.sample(cfg.batch_size, data_rng)
        stats = train_step(model, buffer, batch, task, cfg, adam, cand_rng)
        peak = max(peak, stats.peak_nodes)
        if it % cfg.log_every == 0 or it == cfg.iterations:
            rec = {"iter": it, "loss": stats.loss}
            if evaluate is not None:
                rec.update(evaluate(params))
            records.append(rec)
            log.info("iter %d loss %.6f", it, stats.loss)
    if checkpoint is not None:
        save_params(checkpoint, params)
    if metrics_path is not None:
        write_metrics(metrics_path, records)
    return TrainResult(params, records, peak, time.perf_counter() - start)


def write_metrics(path, records: list[dict]) -> None:
    with open(Path(path), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_metrics(path) -> list[dict]:
    with open(Path(path)) as fh:
        return [json.loads(line) for line in fh if line.strip()]
