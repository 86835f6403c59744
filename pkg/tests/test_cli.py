import json
import subprocess
import sys

import pytest

from sgglab.cli import main


def run(tmp, *args):
    return main([args[0], "--out", str(tmp / "run"), "--train", str(tmp / "train.json"),
                 "--test", str(tmp / "test.json"), *args[1:]])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    assert run(tmp, "synth-gen", "--set", "synth.num_train=40", "--set", "synth.num_test=12") == 0
    assert run(tmp, "train-relhead", "--epochs", "2") == 0
    return tmp


def test_artifacts_and_manifests(workdir):
    out = workdir / "run"
    assert (out / "relhead.npz").exists() and (out / "train_log.jsonl").exists()
    m = json.loads((out / "manifest.train-relhead.json").read_text())
    assert m["command"] == "train-relhead" and m["config"]["train.epochs"] == 2
    assert set(m["versions"]) == {"sgglab", "python", "numpy", "torch"}
    assert json.loads((out / "manifest.synth-gen.json").read_text())["seed"] == 0


def test_eval_budget_one_gives_zero_recall(workdir):
    assert run(workdir, "eval", "--k-budget", "1") == 0
    report = json.loads((workdir / "run" / "report.json").read_text())
    assert all(v == 0.0 for v in report["recall"].values())
    assert all(v == 0.0 for v in report["mean_recall"].values())


def test_eval_is_reproducible(workdir):
    path = workdir / "run" / "report.json"
    assert run(workdir, "eval", "--predictions") == 0
    first = path.read_bytes()
    assert run(workdir, "eval", "--predictions") == 0
    assert path.read_bytes() == first
    assert (workdir / "run" / "predictions.jsonl").exists()
    assert (workdir / "run" / "report.md").read_text().startswith("|")


def test_dcs_budget_uses_fitted_optimum(workdir):
    assert run(workdir, "dcs-fit", "--set", "dcs.theta=20", "--set", "dcs.step=5") == 0
    curve = json.loads((workdir / "run" / "dcs_curve.json").read_text())
    assert (workdir / "run" / "dcs_curve.png").stat().st_size > 0
    assert run(workdir, "eval", "--k-budget", "dcs") == 0
    manifest = json.loads((workdir / "run" / "manifest.eval.json").read_text())
    assert manifest["k_budget"] == "dcs" and manifest["x_opt"] == curve["x_opt"]
    report = json.loads((workdir / "run" / "report.json").read_text())
    assert report["extra"]["x_opt"] == curve["x_opt"]


def test_bench_and_plot(workdir):
    assert run(workdir, "bench", "--set", "bench.budgets=5,20", "--set", "bench.reps=3",
               "--set", "bench.warmup=1", "--set", "bench.dense_objects=20") == 0
    lat = json.loads((workdir / "run" / "latency.json").read_text())
    assert lat["budgets"]["5"]["pair_counts"] == [20] and lat["budgets"]["20"]["pair_counts"] == [380]
    out = workdir / "run" / "report.png"
    assert run(workdir, "plot", str(workdir / "run" / "report.json"), "--output", str(out)) == 0
    assert out.stat().st_size > 0


def test_ablate_structure(workdir):
    assert run(workdir, "ablate", "--epochs", "1", "--set", "ablate.rows=TVSU,TVS,T",
               "--set", "ablate.num_train=10", "--set", "ablate.num_test=4") == 0
    rows = json.loads((workdir / "run" / "ablation.json").read_text())["rows"]
    dims = {r["flags"]: r["edge_input_dim"] for r in rows}
    assert dims["TVSU"] > dims["TVS"]
    table = (workdir / "run" / "ablation.md").read_text()
    assert table.count("\n") == 5


def test_exit_codes(workdir, tmp_path):
    assert run(workdir, "eval", "--set", "eval.k_budget=0") == 2
    assert run(workdir, "eval", "--set", "nonsense.key=1") == 2
    assert main(["eval", "--out", str(tmp_path), "--test", str(workdir / "test.json")]) == 4
    assert main(["eval", "--out", str(tmp_path), "--test", str(tmp_path / "absent.json")]) == 4
    assert main(["eval", "--out", str(tmp_path / "x"), "--k-budget", "dcs",
                 "--set", f"relhead.checkpoint={workdir / 'run' / 'relhead.npz'}",
                 "--test", str(workdir / "test.json")]) == 4
    assert main(["eval", "--out", str(tmp_path), "--mode", "learned",
                 "--set", f"relhead.checkpoint={workdir / 'run' / 'relhead.npz'}",
                 "--test", str(workdir / "test.json")]) == 4
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "sgg-lab/1", "images": [{"image_id": 1}]}')
    assert main(["eval", "--out", str(tmp_path), "--test", str(bad),
                 "--set", f"relhead.checkpoint={workdir / 'run' / 'relhead.npz'}"]) == 3
    assert main(["plot", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 4


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "sgglab.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "dcs-fit" in res.stdout
