import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from cimseg.cli import main

FIXTURES = Path(__file__).parent / "fixtures"
DATASET = FIXTURES / "dataset"


def files(d: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_synth_default_and_deterministic(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a"), "--seed", "5"]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), "--seed", "5"]) == 0
    a = files(tmp_path / "a")
    assert set(a) == {"scene.json", "proposals.json", "peaks.json", "manifest.json"}
    assert a == files(tmp_path / "b")
    main(["synth", "--out", str(tmp_path / "c"), "--seed", "6"])
    assert files(tmp_path / "c")["scene.json"] != a["scene.json"]


def test_shipped_dataset_reproduces_from_its_manifest(tmp_path):
    manifest = json.loads((DATASET / "manifest.json").read_text())
    assert main(["synth", "--out", str(tmp_path), "--seed", str(manifest["seeds"]["root"])]) == 0
    assert files(tmp_path) == files(DATASET)


@pytest.mark.parametrize("command, config, fragment", [
    ("synth", {"num_instances": 0}, "num_instances"),
    ("synth", [1, 2], "JSON object"),
    ("run", {"bogus": 1}, "unknown config keys"),
    ("run", {"tau_cls": 0.9}, "tau_cls"),
    ("run", {"seed": -3}, "seed"),
])
def test_config_errors_exit_1(tmp_path, capsys, command, config, fragment):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(config))
    inputs = [str(DATASET)] if command == "run" else []
    assert main([command, *inputs, "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert fragment in capsys.readouterr().err


def test_run_defaults_on_shipped_fixture(tmp_path):
    assert main(["run", str(DATASET), "--out", str(tmp_path), "--seed", "3"]) == 0
    traj = json.loads((tmp_path / "trajectory.json").read_text())
    assert [b["branch"] for b in traj["branches"]] == [1, 2, 3]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["branches"] == 3 and manifest["config"]["alpha"] == 12.0
    assert set(manifest["inputs"]) == {"scene.json", "proposals.json", "peaks.json"}
    losses = json.loads((tmp_path / "losses.json").read_text())
    assert losses["l_total"] == losses["l_anti"] + sum(losses["l_ref"])


def test_run_is_byte_identical_across_directories(tmp_path):
    for name in ("x", "y"):
        assert main(["run", str(DATASET), "--out", str(tmp_path / name), "--seed", "11"]) == 0
    assert files(tmp_path / "x") == files(tmp_path / "y")


def test_branches_flag_and_sample_isolation(tmp_path):
    main(["run", str(DATASET), "--out", str(tmp_path / "s"), "--seed", "1", "-K", "2"])
    main(["run", str(DATASET), "--out", str(tmp_path / "n"), "--seed", "1", "-K", "2", "--no-sample"])
    s = json.loads((tmp_path / "s" / "trajectory.json").read_text())
    n = json.loads((tmp_path / "n" / "trajectory.json").read_text())
    assert len(s["branches"]) == 2
    assert s["agpl"] == n["agpl"]
    first_s, first_n = s["branches"][0], n["branches"][0]
    assert first_n["sampled_gt"] is None and first_s["sampled_gt"] is not None
    assert {k: v for k, v in first_s.items() if k not in ("sampled_gt", "labels", "loss")} == \
        {k: v for k, v in first_n.items() if k not in ("sampled_gt", "labels", "loss")}


def test_replay_verifies_and_detects_tampering(tmp_path):
    main(["run", str(DATASET), "--out", str(tmp_path / "r"), "--seed", "2", "--no-sample"])
    manifest = tmp_path / "r" / "manifest.json"
    assert main(["run", str(DATASET), "--out", str(tmp_path / "r2"), "--replay", str(manifest)]) == 0
    assert files(tmp_path / "r") == files(tmp_path / "r2")
    bad = json.loads(manifest.read_text())
    bad["outputs"]["predictions.json"] = "0" * 64
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert main(["run", str(DATASET), "--out", str(tmp_path / "r3"), "--replay", str(tmp_path / "bad.json")]) == 1


def test_agpl_subcommand(tmp_path):
    out = tmp_path / "labels.json"
    assert main(["agpl", str(DATASET), "--out", str(out)]) == 0
    labels = json.loads(out.read_text())
    assert len(labels["supports"]) == 3
    members = [i for cl in labels["clusters"] for i in cl["members"]]
    assert sorted(members) == sorted(i for i, _ in labels["labels"])


def test_eval_perfect_predictions(tmp_path):
    scene = json.loads((DATASET / "scene.json").read_text())
    preds = [{"cat": inst["cat"], "score": 1.0, "mask": inst["mask"]} for inst in scene["instances"]]
    (tmp_path / "p.json").write_text(json.dumps(preds))
    assert main(["eval", str(tmp_path / "p.json"), str(DATASET), "--out", str(tmp_path / "e.json"),
                 "--curves", str(tmp_path / "c.csv")]) == 0
    assert set(json.loads((tmp_path / "e.json").read_text())["mAP"].values()) == {1.0}
    assert (tmp_path / "c.csv").read_text().startswith("threshold,category,rank,recall,precision\n")


def test_eval_noisy_fixture_matches_golden(tmp_path):
    out = tmp_path / "e.json"
    assert main(["eval", str(FIXTURES / "noisy_predictions.json"), str(DATASET), "--out", str(out)]) == 0
    golden = json.loads((FIXTURES / "noisy_golden.json").read_text())
    got = json.loads(out.read_text())["mAP"]
    assert got == pytest.approx(golden, abs=1e-12)


def test_malformed_predictions_report_line(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('[\n {"cat": 1,\n  "score": 0.5\n  "mask": {}}\n]\n')
    assert main(["eval", str(bad), str(DATASET), "--out", str(tmp_path / "e.json")]) == 1
    err = capsys.readouterr().err
    assert f"{bad}:4:3" in err and '"mask"' in err
    bad.write_text('[{"cat": 1, "score": 0.5, "mask": {"h": 4, "w": 4, "runs": [[3, 0]]}}]')
    assert main(["eval", str(bad), str(DATASET), "--out", str(tmp_path / "e.json")]) == 1
    assert "prediction 0" in capsys.readouterr().err


def test_io_errors_exit_2(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert main(["synth", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--out", str(blocker / "sub")]) == 2
    assert "io error" in capsys.readouterr().err


def test_inconsistent_dataset_is_schema_error(tmp_path, capsys):
    ds = tmp_path / "ds"
    shutil.copytree(DATASET, ds)
    peaks = json.loads((ds / "peaks.json").read_text())
    peaks[0]["px"] = [999, 0]
    (ds / "peaks.json").write_text(json.dumps(peaks))
    assert main(["agpl", str(ds)]) == 1
    assert "outside the canvas" in capsys.readouterr().err


def test_report_writes_tables_and_figures(tmp_path, capsys):
    run = tmp_path / "run"
    main(["run", str(DATASET), "--out", str(run), "--seed", "0"])
    capsys.readouterr()
    assert main(["report", str(run), "--dataset", str(DATASET), "--out", str(tmp_path / "rep")]) == 0
    out = tmp_path / "rep"
    for name in ("loss_report.json", "branch_stats.csv", "pr_curves.csv", "eval.json",
                 "branch_quality.png", "pr_curves.png", "losses.png"):
        assert (out / name).stat().st_size > 0
    assert (out / "branch_quality.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    stdout = capsys.readouterr().out
    assert stdout.startswith("branch,seed_count,pseudo_gt_count,seed_iou,pseudo_gt_iou,loss\n")
    assert len((out / "branch_stats.csv").read_text().splitlines()) == 4


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cimseg", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("cimseg ")
