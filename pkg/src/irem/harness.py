"""Experiment orchestration: manifests, evaluation tables, sweeps, probes.

Every table is written as CSV with a fixed header (see ``CSV_HEADERS``) and
can be read back with :func:`read_csv`.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .baselines import BaselineModel, baseline_predict, baseline_train
from .nets import GraphDescriptor, MlpDescriptor, Params, PRESETS, energy_model, init_params
from .reasoner import DescentConfig, compose, minimize_batch
from .tasks import GRAPH_KINDS, make_task
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

CSV_HEADERS = {
    "eval": ["method", "task", "difficulty", "mse_mean", "mse_std", "steps_mean", "halted_frac", "n_seeds"],
    "sweep": ["cell", "k", "mse"],
    "landscape": ["radius", "energy", "sq_dist"],
    "compose": ["k", "mse"],
    "ablate_buffer": ["buffer", "truncate", "mse_mean", "mse_std", "train_seconds", "peak_nodes"],
    "ablate_step_size": ["step_size", "mse_same", "mse_harder"],
}

PRESET_SETTINGS = {
    "desk": {"addition_dim": 64, "matrix_side": 8, "mlp_hidden": 128, "graph_width": 64,
             "batch_size": 64, "graph_batch_size": 64, "iterations": 3000, "n_test": 200,
             "n_range": (2, 6), "test_nodes": 8, "lr": 1.5e-3},
    "full": {"addition_dim": 400, "matrix_side": 20, "mlp_hidden": 512, "graph_width": 128,
             "batch_size": 128, "graph_batch_size": 64, "iterations": 10_000, "n_test": 1000,
             "n_range": (2, 10), "test_nodes": 15, "lr": 1e-4},
}
assert set(PRESET_SETTINGS) == set(PRESETS)


@dataclass
class RunManifest:
    task: str = "addition"
    difficulties: list = field(default_factory=lambda: ["same", "harder"])
    preset: str = "desk"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    descent: dict = field(default_factory=dict)
    k_values: list = field(default_factory=lambda: [5, 10, 20, 40])
    step_sizes: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0])
    n_test: int | None = None
    out_dir: str = "runs"

    def __post_init__(self):
        if self.preset not in PRESET_SETTINGS:
            raise ValueError(f"unknown preset {self.preset!r}")
        make_task(self.task)  # validates the name
        if not self.seeds:
            raise ValueError("manifest needs at least one seed")
        unknown = set(self.train) - {f.name for f in dataclasses.fields(TrainConfig)}
        if unknown:
            raise ValueError(f"unknown train settings: {sorted(unknown)}")
        unknown = set(self.descent) - {f.name for f in dataclasses.fields(DescentConfig)}
        if unknown:
            raise ValueError(f"unknown descent settings: {sorted(unknown)}")

    @property
    def settings(self) -> dict:
        return PRESET_SETTINGS[self.preset]

    @staticmethod
    def load(path) -> "RunManifest":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ValueError(f"cannot read manifest {path}: {e}") from None
        if not isinstance(doc, dict):
            raise ValueError("manifest must be a JSON object")
        names = {f.name for f in dataclasses.fields(RunManifest)}
        extra = set(doc) - names
        if extra:
            raise ValueError(f"unknown manifest keys: {sorted(extra)}")
        return RunManifest(**doc)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2))

    def build_task(self):
        s = self.settings
        if self.task in GRAPH_KINDS:
            return make_task(self.task, n_range=tuple(self.model.get("n_range", s["n_range"])))
        dim = self.model.get("dim", s["addition_dim"] if self.task == "addition" else s["matrix_side"])
        return make_task(self.task, dim)

    def descriptor(self, task):
        return default_descriptor(task, self.preset, **self.model)

    def train_config(self, seed: int) -> TrainConfig:
        s = self.settings
        base = TrainConfig(
            batch_size=s["graph_batch_size"] if self.task in GRAPH_KINDS else s["batch_size"],
            iterations=s["iterations"], lr=s["lr"], seed=seed)
        return base.replace(**self.train)

    def descent_config(self, **overrides) -> DescentConfig:
        tc = TrainConfig(**self.train) if self.train else TrainConfig()
        d = {"step_size": tc.step_size, **self.descent, **overrides}
        return DescentConfig(**d)

    def eval_size(self) -> int:
        return self.n_test or self.settings["n_test"]


def default_descriptor(task, preset: str = "desk", hidden=None, width=None, **_):
    s = PRESET_SETTINGS[preset]
    if task.is_graph:
        return GraphDescriptor(task.node_dim, task.edge_dim, 1, width or s["graph_width"])
    return MlpDescriptor(task.in_dim + task.out_dim, hidden or s["mlp_hidden"])


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass
class EvalSet:
    """Problems with their fixed starting candidates."""

    problems: list
    starts: list

    def permuted(self, perm) -> "EvalSet":
        return EvalSet([self.problems[i] for i in perm], [self.starts[i] for i in perm])


def make_eval_set(task, n_problems: int, seed: int, difficulty="same", n_nodes: int | None = None) -> EvalSet:
    """Problem i and its start come from their own seed stream, so any
    subset or reordering yields identical per-problem results."""
    if n_problems < 1:
        raise ValueError("n_problems must be >= 1")
    problems, starts = [], []
    for i in range(n_problems):
        p_ss, s_ss = np.random.SeedSequence([seed, i]).spawn(2)
        if task.is_graph:
            p = task.sample(1, np.random.default_rng(p_ss), n_nodes=n_nodes)[0]
        else:
            p = task.sample(1, np.random.default_rng(p_ss), difficulty)[0]
        problems.append(p)
        starts.append(np.random.default_rng(s_ss).uniform(-1.0, 1.0, size=p.y.shape))
    return EvalSet(problems, starts)


def _difficulty_kwargs(task, difficulty, settings):
    if task.is_graph:
        if difficulty == "same":
            return {"n_nodes": None}
        if difficulty == "harder":
            return {"n_nodes": settings["test_nodes"]}
        return {"n_nodes": int(difficulty)}
    return {"difficulty": difficulty}


def _batch_inputs(task, es: EvalSet):
    xs = [p.x for p in es.problems]
    xb = task.collate_x(xs)
    yb = task.collate_y([p.y for p in es.problems])
    y0 = task.collate_y(es.starts)
    if task.is_graph:
        return xb, yb, y0, xb.edge_graph, xb.n_graphs
    return Tensor(xb), yb, y0, None, None


def _as_model(params):
    """Energy model for a :class:`Params`; objects with ``energy`` pass through."""
    return params if hasattr(params, "energy") else energy_model(params)


def _mse(pred: np.ndarray, target: np.ndarray) -> float:
    return math.fsum(((pred - target) ** 2).reshape(-1)) / pred.size


def evaluate_energy(params, task, es: EvalSet, cfg: DescentConfig,
                    snapshot_at: Sequence[int] = (), chunk: int = 256) -> dict:
    """Minimise every problem in ``es``; returns MSE, per-problem steps and
    halting flags, and MSEs at the requested step budgets.

    ``params`` is a :class:`Params` or any object with an ``energy`` method.
    """
    model = _as_model(params)
    preds, steps, halted = [], [], []
    snaps = {int(k): [] for k in snapshot_at}
    for lo in range(0, len(es.problems), chunk):
        part = EvalSet(es.problems[lo:lo + chunk], es.starts[lo:lo + chunk])
        x, _, y0, idx, n = _batch_inputs(task, part)
        r = minimize_batch(model, x, y0, cfg, idx, n, snapshot_at)
        preds.append(r.y)
        steps.append(r.steps)
        halted.append(r.halted)
        for k in snaps:
            snaps[k].append(r.snapshots[k])
    target = task.collate_y([p.y for p in es.problems])
    pred = np.concatenate(preds)
    return {
        "mse": _mse(pred, target),
        "steps": np.concatenate(steps),
        "halted": np.concatenate(halted),
        "mse_at": {k: _mse(np.concatenate(v), target) for k, v in snaps.items()},
        "pred": pred,
    }


def run_eval(params: Params, task, difficulty: str, cfg: DescentConfig, n_problems: int,
             seed: int = 1234, preset: str = "desk") -> dict:
    """One result row for a trained energy model."""
    desc = getattr(params, "descriptor", None)
    if isinstance(desc, MlpDescriptor) and desc.in_dim != task.in_dim + task.out_dim:
        raise ValueError("checkpoint does not match the task's input/output sizes")
    es = make_eval_set(task, n_problems, seed, **_difficulty_kwargs(task, difficulty, PRESET_SETTINGS[preset]))
    r = evaluate_energy(params, task, es, cfg)
    return {"mse": r["mse"], "steps_mean": float(np.mean(r["steps"])),
            "halted_frac": float(np.mean(r["halted"]))}


def smooth_step_size(params, task, es: EvalSet, cfg: DescentConfig,
                     factors: Sequence[float] = (1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125)) -> float:
    """Largest ``cfg.step_size * factor`` under which the median energy over
    ``es`` never rises by more than ``cfg.halt_tol`` (relative) in any of
    ``cfg.max_steps`` steps; the smallest candidate if none qualifies.

    ``es`` should be a validation set, never the test problems.
    """
    model = _as_model(params)
    x, _, y0, idx, n = _batch_inputs(task, es)
    candidates = sorted((cfg.step_size * f for f in factors), reverse=True)
    for lam in candidates:
        run = dataclasses.replace(cfg, step_size=lam, halt_tol=0.0)
        try:
            e = minimize_batch(model, x, y0, run, idx, n).energies
        except NonFiniteError:
            continue
        med = np.median(e, axis=1)
        rise = np.diff(med) / (np.abs(med[:-1]) + 1e-8)
        if rise.size == 0 or rise.max() <= cfg.halt_tol:
            return float(lam)
    return float(candidates[-1])


def tuned_descent(params, manifest: "RunManifest", n_problems: int = 50, seed: int = 77) -> DescentConfig:
    """The manifest's descent settings with the step size chosen by
    :func:`smooth_step_size` on training-distribution validation problems."""
    task = manifest.build_task()
    cfg = manifest.descent_config()
    es = make_eval_set(task, n_problems, seed, **_difficulty_kwargs(task, "same", manifest.settings))
    return dataclasses.replace(cfg, step_size=smooth_step_size(params, task, es, cfg))


def eval_baseline(model: BaselineModel, task, es: EvalSet, steps: int | None = None) -> float:
    xb = task.collate_x([p.x for p in es.problems])
    target = task.collate_y([p.y for p in es.problems])
    pred = baseline_predict(model, xb, steps, rng=0)
    return _mse(pred, target)


def sweep_steps(params: Params, task, grid: Sequence, k_grid: Sequence[int], cfg: DescentConfig,
                n_problems: int, seed: int = 1234, preset: str = "desk") -> list[dict]:
    """MSE for every (difficulty-or-size, step budget) cell."""
    if not grid or not k_grid:
        raise ValueError("grids must be non-empty")
    rows = []
    run_cfg = dataclasses.replace(cfg, max_steps=max(k_grid))
    for cell in grid:
        es = make_eval_set(task, n_problems, seed, **_difficulty_kwargs(task, cell, PRESET_SETTINGS[preset]))
        r = evaluate_energy(params, task, es, run_cfg, snapshot_at=k_grid)
        for k in k_grid:
            rows.append({"cell": str(cell), "k": int(k), "mse": r["mse_at"][int(k)]})
    return rows


def landscape_probe(params: Params, problem, radii: Sequence[float], samples: int, seed: int = 0) -> list[dict]:
    """Energies of random candidates at fixed distances from the solution."""
    rng = np.random.default_rng(seed)
    model = _as_model(params)
    y_true = np.asarray(problem.y, dtype=np.float64)
    x = problem.x
    rows = []
    for r in radii:
        u = rng.normal(size=(samples,) + y_true.shape)
        norms = np.sqrt((u.reshape(samples, -1) ** 2).sum(axis=1))
        u /= norms.reshape((samples,) + (1,) * y_true.ndim)
        for s in range(samples):
            y = y_true + r * u[s]
            with ad.no_grad():
                if isinstance(x, np.ndarray):
                    e = model.energy(Tensor(x[None]), Tensor(y[None])).item()
                else:
                    e = model.energy(x, Tensor(y)).item()
            rows.append({"radius": float(r), "energy": e, "sq_dist": float(((y - y_true) ** 2).sum())})
    return rows


def pearson(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    a, b = a - a.mean(), b - b.mean()
    return float((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum()))


def compose_eval(params: Params, task, ks: Sequence[int], cfg: DescentConfig, n_problems: int,
                 seed: int = 4321) -> list[dict]:
    """MSE of folding the learned addition operator over k random operands."""
    if task.kind != "addition":
        raise ValueError("composition is defined for the addition operator")
    model = _as_model(params)
    rows = []
    for k in ks:
        rng = np.random.default_rng([seed, k])
        operands = [rng.uniform(-1.0, 1.0, size=(n_problems, task.out_dim)) for _ in range(k)]
        pred = compose(model, operands, cfg, rng=rng)
        rows.append({"k": int(k), "mse": _mse(pred, np.sum(operands, axis=0))})
    return rows


# --------------------------------------------------------------------------
# training drivers
# --------------------------------------------------------------------------

def train_energy(manifest: RunManifest, seed: int, out_dir=None, eval_every: bool = True, **overrides):
    """Train one energy model; writes checkpoint and metrics when ``out_dir`` is set."""
    task = manifest.build_task()
    cfg = manifest.train_config(seed).replace(**overrides)
    evaluate = _log_evaluator(manifest, task, cfg) if eval_every else None
    ckpt = metrics = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / f"params_seed{seed}.npz"
        metrics = out / f"metrics_seed{seed}.jsonl"
    return train(task, manifest.descriptor(task), cfg, evaluate, ckpt, metrics)


def _log_evaluator(manifest: RunManifest, task, cfg: TrainConfig, n: int = 32):
    dcfg = manifest.descent_config(max_steps=cfg.inner_steps, halt_tol=0.0)
    same = make_eval_set(task, n, 99, **_difficulty_kwargs(task, "same", manifest.settings))
    hard = make_eval_set(task, n, 99, **_difficulty_kwargs(task, "harder", manifest.settings))

    def evaluate(params):
        return {"eval_mse_same": evaluate_energy(params, task, same, dcfg)["mse"],
                "eval_mse_hard": evaluate_energy(params, task, hard, dcfg)["mse"]}
    return evaluate


def train_baseline(manifest: RunManifest, seed: int, kind: str = "feedforward"):
    task = manifest.build_task()
    budget = init_params(manifest.descriptor(task), 0).count()
    return baseline_train(task, kind, manifest.train_config(seed), target_count=budget)


def ablate_buffer(manifest: RunManifest, seeds: Sequence[int], n_test: int | None = None,
                  combos=((False, False), (True, False), (False, True), (True, True))) -> list[dict]:
    """Test MSE, wall-clock and peak graph size for buffer x truncate settings."""
    task = manifest.build_task()
    dcfg = manifest.descent_config()
    es = make_eval_set(task, n_test or manifest.eval_size(), 1234,
                       **_difficulty_kwargs(task, "harder", manifest.settings))
    rows = []
    for use_buffer, truncate in combos:
        mses, secs, peaks = [], [], []
        for seed in seeds:
            fraction = manifest.train_config(seed).buffer_fraction if use_buffer else 0.0
            res = train_energy(manifest, seed, eval_every=False, buffer_fraction=fraction, truncate=truncate)
            mses.append(evaluate_energy(res.params, task, es, dcfg)["mse"])
            secs.append(res.seconds)
            peaks.append(res.peak_nodes)
        rows.append({"buffer": use_buffer, "truncate": truncate, "mse_mean": float(np.mean(mses)),
                     "mse_std": float(np.std(mses)), "train_seconds": float(np.mean(secs)),
                     "peak_nodes": int(max(peaks))})
    return rows


def ablate_step_size(manifest: RunManifest, values: Sequence[float], seed: int,
                     n_test: int | None = None) -> list[dict]:
    """Train at each step size and evaluate at the same step size."""
    task = manifest.build_task()
    n = n_test or manifest.eval_size()
    rows = []
    for lam in values:
        res = train_energy(manifest, seed, eval_every=False, step_size=float(lam))
        dcfg = manifest.descent_config(step_size=float(lam))
        row = {"step_size": float(lam)}
        for diff in ("same", "harder"):
            es = make_eval_set(task, n, 1234, **_difficulty_kwargs(task, diff, manifest.settings))
            row[f"mse_{diff}"] = evaluate_energy(res.params, task, es, dcfg)["mse"]
        rows.append(row)
    return rows


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def write_csv(path, kind: str, rows: Sequence[dict]) -> None:
    header = CSV_HEADERS[kind]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _parse(v: str):
    if v in ("True", "False"):
        return v == "True"
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def read_csv(path, kind: str | None = None) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if kind is not None and reader.fieldnames != CSV_HEADERS[kind]:
            raise ValueError(f"{path}: header {reader.fieldnames} does not match {kind}")
        return [{k: _parse(v) for k, v in row.items()} for row in reader]
