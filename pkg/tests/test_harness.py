import json

import numpy as np
import pytest

from irem import autodiff as ad
from irem import harness as H
from irem.cli import main
from irem.nets import MlpDescriptor, init_params, load_params
from irem.reasoner import DescentConfig
from irem.tasks import load_dataset, make_task
from irem.trainer import read_metrics


class ExactAdder:
    """E = 0.5 * s * ||y - (a + b)||^2; one step of size 1/s lands on the sum."""

    def __init__(self, s):
        self.s = s

    def energy(self, x, y, z=None):
        d = y.shape[1]
        x = ad._as_tensor(x)
        target = ad.add(ad.slice_axis(x, 1, 0, d), ad.slice_axis(x, 1, d, 2 * d))
        return ad.scale(ad.sum(ad.square(ad.sub(y, target)), axis=1), 0.5 * self.s)


TINY = {"task": "addition", "model": {"dim": 4, "hidden": 8},
        "train": {"iterations": 4, "batch_size": 8, "log_every": 2, "step_size": 10.0},
        "n_test": 6, "k_values": [1, 3]}


@pytest.fixture
def manifest_path(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({**TINY, "out_dir": str(tmp_path / "out")}))
    return path


# ---- evaluation ------------------------------------------------------------------

def test_exact_model_has_zero_error():
    task = make_task("addition", dim=5)
    es = H.make_eval_set(task, 20, 0)
    r = H.evaluate_energy(ExactAdder(0.5), task, es, DescentConfig(step_size=2.0, max_steps=3))
    assert r["mse"] < 1e-28


def test_motionless_model_error_matches_closed_form():
    # y = a + b with a, b ~ U(-1, 1) has variance 2/3; the start y0 ~ U(-1, 1) has 1/3
    task = make_task("addition", dim=64)
    params = init_params(MlpDescriptor(in_dim=192, hidden=16), 0)
    row = H.run_eval(params, task, "same", DescentConfig(step_size=1e-12, max_steps=1), 200)
    assert row["mse"] == pytest.approx(1.0, rel=0.05)


def test_eval_is_invariant_to_problem_order():
    task = make_task("addition", dim=4)
    params = init_params(MlpDescriptor(in_dim=12, hidden=8), 1)
    es = H.make_eval_set(task, 30, 3)
    cfg = DescentConfig(step_size=5.0, max_steps=20)
    a = H.evaluate_energy(params, task, es, cfg)["mse"]
    b = H.evaluate_energy(params, task, es.permuted(np.random.default_rng(0).permutation(30)), cfg)["mse"]
    assert a == pytest.approx(b, rel=1e-9)


def test_eval_set_problems_independent_of_size():
    task = make_task("addition", dim=4)
    small, big = H.make_eval_set(task, 3, 5), H.make_eval_set(task, 10, 5)
    for a, b in zip(small.problems, big.problems):
        np.testing.assert_array_equal(a.x, b.x)


def test_run_eval_rejects_mismatched_checkpoint():
    with pytest.raises(ValueError):
        H.run_eval(init_params(MlpDescriptor(in_dim=7), 0), make_task("addition", dim=4), "same",
                   DescentConfig(), 2)


@pytest.mark.parametrize("curvature, expected", [(0.001, 100.0), (0.05, 25.0), (0.2, 6.25), (0.5, 3.125), (1.0, 3.125)])
def test_smooth_step_size_matches_quadratic_stability_bound(curvature, expected):
    # on E = s/2 ||y - t||^2 each step scales the error by (1 - lam * s), so
    # the energy never rises iff lam <= 2 / s; when nothing qualifies the
    # smallest candidate is returned
    task = make_task("addition", dim=3)
    es = H.make_eval_set(task, 8, 0)
    cfg = DescentConfig(step_size=100.0, max_steps=30)
    assert H.smooth_step_size(ExactAdder(curvature), task, es, cfg) == pytest.approx(expected)


def test_smooth_step_size_accepts_the_stability_boundary():
    task = make_task("addition", dim=3)
    es = H.make_eval_set(task, 8, 0)
    cfg = DescentConfig(step_size=100.0, max_steps=30)
    # lam = 2 / s flips the error sign each step and keeps the energy flat
    assert H.smooth_step_size(ExactAdder(2 / 30.0), task, es, cfg, factors=(1.0, 0.3)) == pytest.approx(30.0)


def test_tuned_descent_keeps_other_settings():
    m = H.RunManifest(**{k: v for k, v in TINY.items()})
    params = init_params(m.descriptor(m.build_task()), 0)
    cfg = H.tuned_descent(params, m, n_problems=4)
    base = m.descent_config()
    assert cfg.step_size in {base.step_size / 2 ** k for k in range(6)}
    assert (cfg.max_steps, cfg.halt_window, cfg.halt_tol) == (base.max_steps, base.halt_window, base.halt_tol)


def test_single_budget_sweep_equals_run_eval():
    task = make_task("addition", dim=4)
    params = init_params(MlpDescriptor(in_dim=12, hidden=8), 2)
    cfg = DescentConfig(step_size=5.0, max_steps=100)
    rows = H.sweep_steps(params, task, ["harder"], [5], cfg, 25)
    row = H.run_eval(params, task, "harder", DescentConfig(step_size=5.0, max_steps=5), 25)
    assert rows == [{"cell": "harder", "k": 5, "mse": pytest.approx(row["mse"], rel=1e-12)}]


def test_sweep_needs_grids():
    with pytest.raises(ValueError):
        H.sweep_steps(None, make_task("addition", dim=4), [], [5], DescentConfig(), 2)


def test_graph_eval_by_size():
    task = make_task("shortest-path")
    params = H.init_params(H.default_descriptor(task, width=8), 0)
    rows = H.sweep_steps(params, task, [3, 5], [1, 2], DescentConfig(step_size=1.0, max_steps=2), 4)
    assert [(r["cell"], r["k"]) for r in rows] == [("3", 1), ("3", 2), ("5", 1), ("5", 2)]


def test_landscape_radius_zero_is_constant():
    task = make_task("addition", dim=4)
    params = init_params(MlpDescriptor(in_dim=12, hidden=8), 3)
    prob = task.sample(1, 0)[0]
    rows = H.landscape_probe(params, prob, [0.0, 0.5], 10)
    zero = [r["energy"] for r in rows if r["radius"] == 0.0]
    assert max(zero) == min(zero)
    assert all(r["sq_dist"] == pytest.approx(r["radius"] ** 2) for r in rows)


def test_pearson_known_values():
    assert H.pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert H.pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_compose_eval_with_exact_operator_is_exact():
    task = make_task("addition", dim=3)
    rows = H.compose_eval(ExactAdder(1.0), task, [2, 5], DescentConfig(step_size=1.0, max_steps=3), 10)
    assert [r["k"] for r in rows] == [2, 5]
    assert all(r["mse"] < 1e-28 for r in rows)


# ---- manifests and CSV -----------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    m = H.RunManifest(task="shortest-path", seeds=[1, 2], train={"iterations": 5})
    m.dump(tmp_path / "m.json")
    assert H.RunManifest.load(tmp_path / "m.json") == m


@pytest.mark.parametrize("doc", [
    {"preset": "huge"}, {"task": "sorting"}, {"seeds": []}, {"train": {"momentum": 0.9}},
    {"descent": {"steps": 3}}, {"colour": "blue"},
])
def test_manifest_schema_violations(tmp_path, doc):
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        H.RunManifest.load(tmp_path / "m.json")


def test_manifest_unreadable(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(ValueError):
        H.RunManifest.load(tmp_path / "m.json")
    with pytest.raises(ValueError):
        H.RunManifest.load(tmp_path / "missing.json")


def test_presets_mirror_expected_scales():
    desk, full = H.PRESET_SETTINGS["desk"], H.PRESET_SETTINGS["full"]
    assert (desk["addition_dim"], desk["mlp_hidden"], desk["iterations"], desk["n_test"]) == (64, 128, 3000, 200)
    assert (full["addition_dim"], full["mlp_hidden"], full["graph_width"]) == (400, 512, 128)
    assert (full["n_range"], full["test_nodes"], full["lr"]) == ((2, 10), 15, 1e-4)


_SAMPLE_ROWS = {
    "eval": [{"method": "irem", "task": "addition", "difficulty": "same", "mse_mean": 0.001,
              "mse_std": 0.0, "steps_mean": 12.5, "halted_frac": 1.0, "n_seeds": 3}],
    "sweep": [{"cell": "harder", "k": 5, "mse": 0.1}, {"cell": "8", "k": 20, "mse": 1 / 3}],
    "landscape": [{"radius": 0.05, "energy": -1.25, "sq_dist": 0.0025}],
    "compose": [{"k": 2, "mse": 0.01}],
    "ablate_buffer": [{"buffer": True, "truncate": False, "mse_mean": 0.2, "mse_std": 0.01,
                       "train_seconds": 3.5, "peak_nodes": 1200}],
    "ablate_step_size": [{"step_size": 10.0, "mse_same": 0.1, "mse_harder": 0.2}],
}


@pytest.mark.parametrize("kind", sorted(H.CSV_HEADERS))
def test_csv_round_trip(tmp_path, kind):
    H.write_csv(tmp_path / "t.csv", kind, _SAMPLE_ROWS[kind])
    back = H.read_csv(tmp_path / "t.csv", kind)
    expected = [dict(r) for r in _SAMPLE_ROWS[kind]]
    if kind == "sweep":
        expected[1]["cell"] = 8  # numeric cells come back as numbers
    assert back == expected


def test_csv_header_mismatch(tmp_path):
    H.write_csv(tmp_path / "t.csv", "compose", [{"k": 2, "mse": 0.5}])
    with pytest.raises(ValueError):
        H.read_csv(tmp_path / "t.csv", "sweep")


# ---- CLI -------------------------------------------------------------------------

def test_cli_unknown_flag_and_subcommand(capsys):
    assert main(["train", "--bogus"]) != 0
    assert main(["dance"]) != 0


def test_cli_missing_manifest(tmp_path, capsys):
    assert main(["train", "--manifest", str(tmp_path / "nope.json")]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_eval_without_checkpoint(manifest_path, capsys):
    assert main(["eval", "--manifest", str(manifest_path)]) == 1
    assert "checkpoint" in capsys.readouterr().err


def test_cli_train_is_deterministic(manifest_path, tmp_path):
    out = tmp_path / "out"
    assert main(["train", "--manifest", str(manifest_path), "--seed", "7"]) == 0
    first = (out / "params_seed7.npz").read_bytes(), (out / "metrics_seed7.jsonl").read_bytes()
    assert main(["train", "--manifest", str(manifest_path), "--seed", "7"]) == 0
    assert (out / "params_seed7.npz").read_bytes() == first[0]
    assert (out / "metrics_seed7.jsonl").read_bytes() == first[1]
    recs = read_metrics(out / "metrics_seed7.jsonl")
    assert [r["iter"] for r in recs] == [2, 4]
    assert {"loss", "eval_mse_same", "eval_mse_hard"} <= set(recs[0])
    assert load_params(out / "params_seed7.npz").count() > 0


def test_cli_pipeline(manifest_path, tmp_path, capsys):
    out = tmp_path / "out"
    m = ["--manifest", str(manifest_path)]
    assert main(["train", *m]) == 0
    assert main(["eval", *m, "--k", "3", "--lambda", "5"]) == 0
    rows = H.read_csv(out / "eval.csv", "eval")
    assert [r["difficulty"] for r in rows] == ["same", "harder"]
    assert all(r["mse_mean"] >= 0 for r in rows)
    assert main(["sweep", *m]) == 0
    assert len(H.read_csv(out / "sweep.csv", "sweep")) == 4
    assert main(["landscape", *m]) == 0
    assert len(H.read_csv(out / "landscape.csv", "landscape")) == 20 * 25
    assert main(["compose", *m]) == 0
    assert [r["k"] for r in H.read_csv(out / "compose.csv", "compose")] == [2, 5, 10]
    assert main(["eval", *m, "--tune-lambda", "--k", "3"]) == 0
    assert len(H.read_csv(out / "eval.csv", "eval")) == 2
    assert main(["generate", *m]) == 0
    meta, probs = load_dataset(out / "dataset_addition_harder_seed0.json")
    assert meta["difficulty"] == "harder" and len(probs) == 6


def test_cli_ablations(manifest_path, tmp_path):
    out = tmp_path / "out"
    m = ["--manifest", str(manifest_path), "--iterations", "2", "--n-problems", "3"]
    assert main(["ablate", *m, "--axis", "buffer"]) == 0
    rows = H.read_csv(out / "ablate_buffer.csv", "ablate_buffer")
    assert {(r["buffer"], r["truncate"]) for r in rows} == {(a, b) for a in (True, False) for b in (True, False)}
    assert main(["ablate", *m, "--axis", "step-size", "--values", "10,30,100,300,1000"]) == 0
    rows = H.read_csv(out / "ablate_step_size.csv", "ablate_step_size")
    assert [r["step_size"] for r in rows] == [10.0, 30.0, 100.0, 300.0, 1000.0]


def test_cli_bad_values_list(manifest_path):
    assert main(["ablate", "--manifest", str(manifest_path), "--axis", "step-size", "--values", "a,b"]) != 0


def test_cli_graph_task(tmp_path):
    path = tmp_path / "g.json"
    path.write_text(json.dumps({"task": "shortest-path", "model": {"width": 8},
                                "train": {"iterations": 2, "batch_size": 4, "step_size": 1.0},
                                "n_test": 3, "k_values": [1, 2], "out_dir": str(tmp_path / "g")}))
    assert main(["train", "--manifest", str(path)]) == 0
    assert main(["eval", "--manifest", str(path)]) == 0
    assert main(["sweep", "--manifest", str(path), "--values", "4,8"]) == 0
    cells = {r["cell"] for r in H.read_csv(tmp_path / "g" / "sweep.csv", "sweep")}
    assert cells == {4, 8}
