"""Command-line entry point: ``irem <subcommand> [--manifest m.json] [flags]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .nets import load_params
from .tasks import GRAPH_KINDS, save_dataset

log = logging.getLogger("irem")

SUBCOMMANDS = ("generate", "train", "eval", "sweep", "landscape", "compose", "ablate")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irem", description="Iterative reasoning by energy minimisation")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--manifest", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset", choices=sorted(H.PRESET_SETTINGS))
        sp.add_argument("--out", type=Path)
        sp.add_argument("--task")
        sp.add_argument("--k", type=int, help="test-time step budget")
        sp.add_argument("--lambda", dest="step_size", type=float, help="test-time step size")
        sp.add_argument("--tune-lambda", action="store_true",
                        help="pick the largest smooth test-time step size on validation problems")
        sp.add_argument("--iterations", type=int, help="override training iterations")
        sp.add_argument("--n-problems", type=int, help="override number of test problems")
        sp.add_argument("--checkpoint", type=Path, help="trained parameters (.npz)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "ablate":
            sp.add_argument("--axis", required=True, choices=["buffer", "step-size"])
            sp.add_argument("--values", type=_floats)
        if name == "sweep":
            sp.add_argument("--values", type=_floats, help="difficulty grid (graph sizes)")
    return p


def _manifest(args) -> H.RunManifest:
    m = H.RunManifest.load(args.manifest) if args.manifest else H.RunManifest()
    if args.task:
        m.task = args.task
    if args.preset:
        m.preset = args.preset
    if args.seed is not None:
        m.seeds = [args.seed]
    if args.iterations is not None:
        m.train = {**m.train, "iterations": args.iterations}
    if args.n_problems is not None:
        m.n_test = args.n_problems
    if args.out:
        m.out_dir = str(args.out)
    m.__post_init__()
    return m


def _params(args, m: H.RunManifest, seed: int):
    path = args.checkpoint or Path(m.out_dir) / f"params_seed{seed}.npz"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}; run `irem train` first or pass --checkpoint")
    return load_params(path)


def _descent(args, m: H.RunManifest, params=None, **extra):
    kw = dict(extra)
    if args.tune_lambda and params is not None:
        kw["step_size"] = H.tuned_descent(params, m).step_size
    if args.step_size is not None:
        kw["step_size"] = args.step_size
    if args.k is not None:
        kw["max_steps"] = args.k
    return m.descent_config(**kw)


def cmd_generate(args, m: H.RunManifest, out: Path) -> None:
    task = m.build_task()
    for seed in m.seeds:
        for diff in m.difficulties:
            es = H.make_eval_set(task, m.eval_size(), seed, **H._difficulty_kwargs(task, diff, m.settings))
            path = out / f"dataset_{m.task}_{diff}_seed{seed}.json"
            save_dataset(path, es.problems, m.task, seed, diff)
            print(path)


def cmd_train(args, m: H.RunManifest, out: Path) -> None:
    for seed in m.seeds:
        res = H.train_energy(m, seed, out)
        print(f"seed {seed}: final loss {res.log[-1]['loss']:.6g} -> {out / f'params_seed{seed}.npz'}")


def cmd_eval(args, m: H.RunManifest, out: Path) -> None:
    task = m.build_task()
    rows = []
    for diff in m.difficulties:
        per_seed = []
        for s in m.seeds:
            params = _params(args, m, s)
            per_seed.append(H.run_eval(params, task, diff, _descent(args, m, params), m.eval_size(), preset=m.preset))
        mses = [r["mse"] for r in per_seed]
        rows.append({"method": "irem", "task": m.task, "difficulty": diff,
                     "mse_mean": float(np.mean(mses)), "mse_std": float(np.std(mses)),
                     "steps_mean": float(np.mean([r["steps_mean"] for r in per_seed])),
                     "halted_frac": float(np.mean([r["halted_frac"] for r in per_seed])),
                     "n_seeds": len(m.seeds)})
    H.write_csv(out / "eval.csv", "eval", rows)
    for r in rows:
        print(f"{r['task']} {r['difficulty']}: mse {r['mse_mean']:.6g} +- {r['mse_std']:.2g}")


def cmd_sweep(args, m: H.RunManifest, out: Path) -> None:
    task = m.build_task()
    if args.values:
        grid = [int(v) for v in args.values] if task.is_graph else args.values
    else:
        grid = m.difficulties
    ks = [args.k] if args.k is not None else m.k_values
    params = _params(args, m, m.seeds[0])
    rows = H.sweep_steps(params, task, grid, ks, _descent(args, m, params), m.eval_size(), preset=m.preset)
    H.write_csv(out / "sweep.csv", "sweep", rows)
    print(out / "sweep.csv")


def cmd_landscape(args, m: H.RunManifest, out: Path) -> None:
    task = m.build_task()
    prob = H.make_eval_set(task, 1, m.seeds[0], **H._difficulty_kwargs(task, "same", m.settings)).problems[0]
    radii = np.linspace(0.05, 1.0, 20)
    rows = H.landscape_probe(_params(args, m, m.seeds[0]), prob, radii, 25, seed=m.seeds[0])
    H.write_csv(out / "landscape.csv", "landscape", rows)
    print(f"pearson(energy, sq_dist) = {H.pearson([r['energy'] for r in rows], [r['sq_dist'] for r in rows]):.4f}")


def cmd_compose(args, m: H.RunManifest, out: Path) -> None:
    task = m.build_task()
    ks = [args.k] if args.k is not None else [2, 5, 10]
    params = _params(args, m, m.seeds[0])
    rows = H.compose_eval(params, task, ks, _descent(args, m, params), m.eval_size())
    H.write_csv(out / "compose.csv", "compose", rows)
    for r in rows:
        print(f"k={r['k']}: mse {r['mse']:.6g}")


def cmd_ablate(args, m: H.RunManifest, out: Path) -> None:
    if args.axis == "buffer":
        rows = H.ablate_buffer(m, m.seeds)
        H.write_csv(out / "ablate_buffer.csv", "ablate_buffer", rows)
        print(out / "ablate_buffer.csv")
    else:
        values = args.values or [10, 30, 100, 300, 1000]
        rows = H.ablate_step_size(m, values, m.seeds[0])
        H.write_csv(out / "ablate_step_size.csv", "ablate_step_size", rows)
        print(out / "ablate_step_size.csv")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        m = _manifest(args)
        out = Path(m.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        globals()[f"cmd_{args.command}"](args, m, out)
    except (ValueError, FileNotFoundError, OSError, FloatingPointError) as e:
        print(f"irem {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
