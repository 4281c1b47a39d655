"""Inference by gradient descent on a learned energy.

Each reasoning step moves the candidate solution against the energy gradient,
``y <- y - step_size * grad_y E(x, y)``; inference stops once the energy has
stopped changing over a window of steps, or after a fixed budget.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor


@dataclass(frozen=True)
class DescentConfig:
    step_size: float = 100.0
    max_steps: int = 100
    halt_window: int = 5
    halt_tol: float = 1e-4
    grad_clip: float | None = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.halt_window < 1:
            raise ValueError("halt_window must be >= 1")
        if self.halt_tol < 0:
            raise ValueError("halt_tol must be >= 0")


@dataclass
class DescentTrace:
    """Energies (and optionally MSEs vs. ground truth) after each step.

    ``energies[t]`` is the total energy of the batch after step t+1.
    ``element_errors`` holds per-element squared errors when requested.
    """

    energies: list[float] = field(default_factory=list)
    mse: list[float] = field(default_factory=list)
    element_errors: list[np.ndarray] = field(default_factory=list)
    halted: bool = False

    @property
    def steps(self) -> int:
        return len(self.energies)

    def to_csv(self, path, per_element: bool = False) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["step", "energy", "mse"]
            n_el = self.element_errors[0].size if (per_element and self.element_errors) else 0
            header += [f"err_{i}" for i in range(n_el)]
            w.writerow(header)
            for t, e in enumerate(self.energies):
                row = [t + 1, repr(e), repr(self.mse[t]) if t < len(self.mse) else ""]
                if n_el:
                    row += [repr(float(v)) for v in self.element_errors[t].reshape(-1)]
                w.writerow(row)

    @staticmethod
    def from_csv(path) -> "DescentTrace":
        tr = DescentTrace()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                tr.energies.append(float(row["energy"]))
                if row["mse"]:
                    tr.mse.append(float(row["mse"]))
                errs = [float(v) for k, v in row.items() if k.startswith("err_")]
                if errs:
                    tr.element_errors.append(np.array(errs))
        return tr


def _data(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


def energy_grad(model, x, y, z=None, create_graph: bool = False):
    """(total energy, grad_y[, grad_z]) at the given point."""
    yt = y if (create_graph and isinstance(y, Tensor) and y.requires_grad) else ad.tensor(_data(y), requires_grad=True)
    wrt = [yt]
    zt = None
    if z is not None:
        zt = z if (create_graph and isinstance(z, Tensor) and z.requires_grad) else ad.tensor(_data(z), requires_grad=True)
        wrt.append(zt)
    e = ad.sum(model.energy(x, yt, zt) if zt is not None else model.energy(x, yt))
    grads = ad.backward(e, wrt, create_graph=create_graph, allow_unused=True)
    return e, grads


def _clip(g: np.ndarray, clip: float | None) -> np.ndarray:
    if clip is None:
        return g
    norm = np.linalg.norm(g)
    return g * (clip / norm) if norm > clip else g


def descent_step(model, x, y, step_size: float, grad_clip: float | None = None) -> np.ndarray:
    """One step ``y - step_size * grad_y E(x, y)``; returns a plain array."""
    _, (g,) = energy_grad(model, x, y)
    g = _clip(g.data, grad_clip)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite energy gradient")
    return _data(y) - step_size * g


def halted(energies: Sequence[float], window: int, tol: float) -> bool:
    """True iff the last ``window`` relative energy changes are all below ``tol``."""
    if len(energies) == 0:
        raise ValueError("empty energy trace")
    if len(energies) < window + 1:
        return False
    e = np.asarray(energies[-(window + 1):], dtype=np.float64)
    rel = np.abs(np.diff(e)) / (np.abs(e[:-1]) + 1e-8)
    return bool(np.all(rel < tol))


def init_candidate(shape, rng) -> np.ndarray:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return rng.uniform(-1.0, 1.0, size=shape)


def _record(trace: DescentTrace, energy: float, y: np.ndarray, target, per_element: bool):
    trace.energies.append(energy)
    if target is not None:
        err = (y - target) ** 2
        trace.mse.append(float(err.mean()))
        if per_element:
            trace.element_errors.append(err.mean(axis=0) if err.ndim > 1 else err)


def minimize(model, x, y0, cfg: DescentConfig, target=None, per_element: bool = False,
             rng=None, y_shape=None):
    """Descend from ``y0`` until halted or ``cfg.max_steps`` steps.

    ``y0=None`` draws the start from U(-1, 1) with ``y_shape``.  Energies are
    recorded at each post-step candidate; with ``target`` the per-step MSE is
    recorded too (evaluation only).
    """
    y = init_candidate(y_shape, rng) if y0 is None else _data(y0).copy()
    trace = DescentTrace()
    for step in range(cfg.max_steps):
        try:
            y = descent_step(model, x, y, cfg.step_size, cfg.grad_clip)
        except NonFiniteError as e:
            raise NonFiniteError(f"step {step + 1}: {e}") from None
        with ad.no_grad():
            energy = ad.sum(model.energy(x, Tensor(y))).item()
        _record(trace, energy, y, target, per_element)
        if halted(trace.energies, cfg.halt_window, cfg.halt_tol):
            trace.halted = True
            break
    return y, trace


@dataclass
class BatchResult:
    """Outcome of :func:`minimize_batch`.

    ``steps[i]`` is the number of steps problem i took, ``halted[i]`` whether
    it stopped on the halting rule, ``energies`` is (steps_run, n_items) with
    frozen items repeating their last energy, and ``snapshots[k]`` is the
    candidate every problem would have returned under a budget of k steps.
    """

    y: np.ndarray
    steps: np.ndarray
    halted: np.ndarray
    energies: np.ndarray
    snapshots: dict[int, np.ndarray]


def minimize_batch(model, x, y0, cfg: DescentConfig, item_index=None, n_items=None,
                   snapshot_at: Sequence[int] = ()) -> BatchResult:
    """Descent on a batch where every problem halts on its own energy trace.

    ``model.energy`` must return one energy per problem.  ``item_index``
    maps rows of ``y`` to problems (graph batches: edge -> graph); by
    default each row is its own problem.  Halted problems are frozen, so each
    problem's result equals running :func:`minimize` on it alone.
    """
    y = _data(y0).copy()
    if item_index is None:
        item_index = np.arange(len(y))
        n_items = len(y)
    item_index = np.asarray(item_index)
    active = np.ones(n_items, dtype=bool)
    steps = np.zeros(n_items, dtype=np.int64)
    halted_flags = np.zeros(n_items, dtype=bool)
    history: list[np.ndarray] = []
    snapshots: dict[int, np.ndarray] = {}
    wanted = set(int(k) for k in snapshot_at)
    for step in range(1, cfg.max_steps + 1):
        _, (g,) = energy_grad(model, x, y)
        g = g.data
        if cfg.grad_clip is not None:
            g = np.concatenate([_clip(g[item_index == i], cfg.grad_clip) for i in range(n_items)]) \
                if n_items != len(y) else np.stack([_clip(r, cfg.grad_clip) for r in g])
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"step {step}: non-finite energy gradient")
        row_active = active[item_index]
        y = np.where(row_active.reshape((-1,) + (1,) * (y.ndim - 1)), y - cfg.step_size * g, y)
        steps[active] += 1
        with ad.no_grad():
            e = model.energy(x, Tensor(y)).data.reshape(-1)
        history.append(e)
        if step >= cfg.halt_window + 1:
            window = np.stack(history[-(cfg.halt_window + 1):])
            rel = np.abs(np.diff(window, axis=0)) / (np.abs(window[:-1]) + 1e-8)
            newly = active & np.all(rel < cfg.halt_tol, axis=0)
            halted_flags |= newly
            active &= ~newly
        if step in wanted:
            snapshots[step] = y.copy()
        if not active.any():
            break
    for k in wanted:
        if k not in snapshots:
            snapshots[k] = y.copy()
    return BatchResult(y, steps, halted_flags, np.stack(history), snapshots)


def minimize_with_scratchpad(model, x, y0, z0, cfg: DescentConfig, target=None):
    """Jointly descend on the candidate y and a scratchpad z.

    Both gradients are taken at the pre-update pair, then applied together.
    """
    y, z = _data(y0).copy(), _data(z0).copy()
    trace = DescentTrace()
    for step in range(cfg.max_steps):
        _, (gy, gz) = energy_grad(model, x, y, z)
        gy, gz = _clip(gy.data, cfg.grad_clip), _clip(gz.data, cfg.grad_clip)
        if not (np.all(np.isfinite(gy)) and np.all(np.isfinite(gz))):
            raise NonFiniteError(f"step {step + 1}: non-finite energy gradient")
        y, z = y - cfg.step_size * gy, z - cfg.step_size * gz
        with ad.no_grad():
            energy = ad.sum(model.energy(x, Tensor(y), Tensor(z))).item()
        _record(trace, energy, y, target, False)
        if halted(trace.energies, cfg.halt_window, cfg.halt_tol):
            trace.halted = True
            break
    return y, z, trace


def compose(model, inputs: Sequence, cfg: DescentConfig, rng=None, y0s=None):
    """Fold a learned binary operator over ``inputs``.

    ``result = minimize(model, concat(result, next_input))`` starting from
    ``result = inputs[0]``.  Each inner minimisation starts from U(-1, 1)
    unless ``y0s`` supplies the starts.
    """
    if len(inputs) < 2:
        raise ValueError("compose needs at least two operands")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    acc = _data(inputs[0])
    for i, nxt in enumerate(inputs[1:]):
        x = np.concatenate([acc, _data(nxt)], axis=-1)
        y0 = None if y0s is None else y0s[i]
        acc, _ = minimize(model, Tensor(x), y0, cfg, rng=rng, y_shape=acc.shape)
    return acc
