import json
import subprocess
import sys

import pytest
import torch

from mlk.cli import main
from mlk.data import load_scene
from mlk.regressor import ModelConfig, PoseRegressor, load_checkpoint
from mlk.training import read_curve


@pytest.fixture(scope="module")
def scene_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("scene") / "s.json"
    assert main(["gen-scene", "--seed", "0", "--frames", "32", "--queries", "4", "--landmarks", "500",
                 "-o", str(path)]) == 0
    return path


def test_gen_scene_writes_a_loadable_file(scene_file, capsys):
    s = load_scene(scene_file)
    assert len(s.database()) == 32 and s.num_landmarks == 500


def test_gen_scene_summary_and_determinism(tmp_path, capsys):
    args = ["gen-scene", "--seed", "3", "--frames", "8", "--queries", "2", "--landmarks", "200"]
    assert main(args + ["-o", str(tmp_path / "a.json")]) == 0
    out = capsys.readouterr().out
    assert "8 database frames" in out and "mean best co-visibility" in out
    assert main(args + ["-o", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


@pytest.mark.parametrize("bad", [["--frames", "0"], ["--fov", "200"], ["--grid", "4"]])
def test_gen_scene_usage_errors(tmp_path, bad, capsys):
    assert main(["gen-scene", *bad, "-o", str(tmp_path / "x.json")]) == 2
    assert not (tmp_path / "x.json").exists()


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["fly"]) == 2


def test_zero_lr_checkpoint_equals_initialization(scene_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--scene", str(scene_file), "--steps", "10", "--lr", "0", "--lr-final", "0",
                 "--batch-size", "2", "--dim", "16", "--blocks", "1", "--heads", "2", "-o", str(out)]) == 0
    trained = load_checkpoint(out / "checkpoint.json")
    fresh = PoseRegressor(trained.config)
    for (name, a), (_, b) in zip(trained.state_dict().items(), fresh.state_dict().items()):
        assert torch.equal(a, b), name
    assert len(read_curve(out / "loss.csv")) == 10
    assert (out / "loss.png").stat().st_size > 0


def test_train_runs_and_is_reproducible(scene_file, tmp_path, capsys):
    args = ["train", "--scene", str(scene_file), "--steps", "5", "--batch-size", "2", "--dim", "16",
            "--blocks", "1", "--heads", "2", "--token-mode", "last_only"]
    assert main(args + ["-o", str(tmp_path / "a")]) == 0
    assert main(args + ["-o", str(tmp_path / "b")]) == 0
    for f in ("checkpoint.json", "loss.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert load_checkpoint(tmp_path / "a" / "checkpoint.json").config.token_mode == "last_only"


def test_pairwise_training_flag(scene_file, tmp_path, capsys):
    assert main(["train", "--scene", str(scene_file), "--steps", "2", "--batch-size", "1", "--dim", "16",
                 "--blocks", "1", "--heads", "2", "--pairwise", "-o", str(tmp_path)]) == 0
    assert not load_checkpoint(tmp_path / "checkpoint.json").config.use_pose_tokens


def test_train_usage_errors(tmp_path, capsys):
    assert main(["train", "--scene", str(tmp_path / "missing.json"), "-o", str(tmp_path)]) == 2
    assert main(["train", "-o", str(tmp_path)]) == 2
    assert main(["train", "--synthetic", "1", "--dim", "10", "--heads", "4", "-o", str(tmp_path)]) == 2


def test_oracle_eval_has_zero_medians(scene_file, tmp_path, capsys):
    assert main(["eval", "--scene", str(scene_file), "--oracle", "--k", "10", "--retrieval", "covis",
                 "--scale", "motion", "--no-figures", "-o", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    row = doc["aggregates"][0]
    assert row["median_trans_units"] < 1e-6 and row["median_rot_deg"] < 1e-6
    assert (tmp_path / "records.csv").exists()


def test_grid_k_gives_one_row_per_k(scene_file, tmp_path, capsys):
    assert main(["eval", "--scene", str(scene_file), "--oracle-noise", "2", "--grid-k", "2,4,6,8,10",
                 "--no-figures", "-o", str(tmp_path)]) == 0
    rows = json.loads((tmp_path / "report.json").read_text())["aggregates"]
    assert [r["k"] for r in rows] == [2, 4, 6, 8, 10]
    assert capsys.readouterr().out.count("k=") == 5


def test_umeyama_with_two_references_records_failures(scene_file, tmp_path, capsys):
    assert main(["eval", "--scene", str(scene_file), "--oracle", "--scale", "umeyama", "--k", "2",
                 "--no-figures", "-o", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["failures"] == 4
    assert all(r["failed"] and "k >= 3" in r["error"] for r in doc["records"])


def test_eval_reports_are_byte_identical(scene_file, tmp_path, capsys):
    args = ["eval", "--scene", str(scene_file), "--oracle-noise", "3", "--retrieval", "covis,vpr", "--k", "4"]
    main(args + ["-o", str(tmp_path / "a")])
    main(args + ["-o", str(tmp_path / "b")])
    for f in ("report.json", "records.csv", "aggregates.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert any((tmp_path / "a" / "figures").iterdir())


def test_eval_needs_a_checkpoint(scene_file, tmp_path, capsys):
    assert main(["eval", "--scene", str(scene_file), "-o", str(tmp_path)]) == 2
    assert main(["eval", "--scene", str(scene_file), "--checkpoint", str(tmp_path / "none.json"),
                 "-o", str(tmp_path)]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_eval_with_checkpoint(scene_file, tmp_path, capsys):
    from mlk.regressor import save_checkpoint

    s = load_scene(scene_file)
    model = PoseRegressor(ModelConfig(token_dim=16, num_blocks=1, num_heads=2, patch_grid=s.grid,
                                      feature_channels=s.frames[0].feature_map.shape[2]))
    save_checkpoint(model, tmp_path / "c.json")
    assert main(["eval", "--scene", str(scene_file), "--checkpoint", str(tmp_path / "c.json"), "--k", "3",
                 "--scale", "motion,umeyama", "--no-figures", "-o", str(tmp_path / "r")]) == 0
    rows = json.loads((tmp_path / "r" / "report.json").read_text())["aggregates"]
    assert {r["estimator"] for r in rows} == {"network"} and len(rows) == 2


def test_corrupt_checkpoint_is_runtime_failure(scene_file, tmp_path, capsys):
    (tmp_path / "c.json").write_text("{not json")
    assert main(["eval", "--scene", str(scene_file), "--checkpoint", str(tmp_path / "c.json"),
                 "-o", str(tmp_path / "r")]) == 1


def test_localize_and_retrieve(scene_file, capsys):
    assert main(["localize", "--scene", str(scene_file), "--query", "q-0001", "--oracle", "--k", "5"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["errors"]["trans_units"] < 1e-6
    assert len(doc["diagnostics"]["references"]) == 5
    assert main(["retrieve", "--scene", str(scene_file), "--query", "q-0001", "--k", "3", "--retrieval", "vpr"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("# vpr_proxy") and len(lines) == 4
    assert main(["retrieve", "--scene", str(scene_file), "--query", "nope"]) == 2
    assert main(["localize", "--scene", str(scene_file), "--query", "q-0001", "--oracle", "--k", "1"]) == 1


def test_dump_config_and_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"steps": 7, "lr": 0.01}))
    assert main(["train", "--config", str(cfg), "--lr", "0.5", "--dump-config", "-o", str(tmp_path)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["command"] == "train" and doc["steps"] == 7 and doc["lr"] == 0.5
    assert doc["query_share"] == 0.5 and doc["plain_mean"] is False
    cfg.write_text(json.dumps({"stepz": 7}))
    assert main(["train", "--config", str(cfg), "--dump-config", "-o", str(tmp_path)]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mlk", "gen-scene", "--frames", "0", "-o", str(tmp_path / "x")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "frames" in proc.stderr
