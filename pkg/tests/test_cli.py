import json

import numpy as np
import pytest

from meshanim.cli import main
from meshanim.mesh import icosphere, load_obj, save_obj
from meshanim.ottk import read_json, save_tensor

TINY = {"n_projections": 8, "val_fraction": 0.34, "batch_size": 2,
        "model": {"latent_dim": 8, "code_dim": 8, "audio_channels": [8, 8], "kernel_width": 3,
                  "mesh_channels": [4, 4, 4], "cheb_order": 3, "n_components": 6}}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--seed", "1", "--sequences", "3", "--frames", "4", "--out", str(root / "data")]) == 0
    (root / "cfg.json").write_text(json.dumps(TINY))
    assert main(["train", "--data", str(root / "data"), "--config", str(root / "cfg.json"), "--steps", "2",
                 "--threads", "1", "--out", str(root / "model")]) == 0
    return root


class TestUsage:
    def test_unknown_command(self, capsys):
        code, _, err = run(capsys, "bogus")
        assert code == 2
        assert json.loads(err.strip().splitlines()[-1])["error"] == "usage"

    def test_missing_flag(self, capsys):
        code, _, err = run(capsys, "swd", "--a", "x.obj")
        assert code == 2 and "usage" in err

    def test_runtime_error_is_json(self, capsys, tmp_path):
        code, _, err = run(capsys, "swd", "--a", tmp_path / "missing.obj", "--b", tmp_path / "missing.obj")
        assert code == 1
        assert "error" in json.loads(err.strip().splitlines()[-1])

    def test_bad_frames(self, capsys, tmp_path):
        assert run(capsys, "synth-data", "--frames", "0", "--out", tmp_path)[0] != 0


class TestCommands:
    def test_synth_data_is_reproducible(self, workspace, tmp_path, capsys):
        code, out, _ = run(capsys, "synth-data", "--seed", "1", "--sequences", "3", "--frames", "4", "--out", tmp_path)
        assert code == 0 and json.loads(out)["samples"] == 3
        assert (tmp_path / "dataset.json").read_bytes() == (workspace / "data" / "dataset.json").read_bytes()
        for f in (tmp_path / "sequences").iterdir():
            assert f.read_bytes() == (workspace / "data" / "sequences" / f.name).read_bytes()
        run_json = read_json(tmp_path / "run.json")
        for key in ("command", "flags", "seeds", "tool_version", "inputs", "outputs", "duration_s"):
            assert key in run_json

    def test_build_hierarchy(self, tmp_path, capsys):
        save_obj(icosphere(3), tmp_path / "s.obj")
        code, out, _ = run(capsys, "build-hierarchy", "--mesh", tmp_path / "s.obj", "--levels", "3",
                           "--out", tmp_path / "h")
        assert code == 0
        info = json.loads(out)
        assert info["sizes"] == [642, 161, 41, 11]
        assert len(info["lambda_max"]) == 4 and (tmp_path / "h" / "run.json").exists()

    def test_swd(self, tmp_path, capsys):
        m = icosphere(2)
        save_obj(m, tmp_path / "a.obj")
        save_obj(m.with_vertices(m.vertices * 1.1), tmp_path / "b.obj")
        code, out, _ = run(capsys, "swd", "--mesh-a", tmp_path / "a.obj", "--mesh-b", tmp_path / "a.obj")
        assert code == 0 and json.loads(out)["swd"] == 0.0
        code, out, _ = run(capsys, "swd", "--a", tmp_path / "a.obj", "--b", tmp_path / "b.obj", "--proj", "20",
                           "--out", tmp_path / "o")
        res = json.loads(out)
        assert res["swd"] > 0 and res["projections"] == 20
        assert read_json(tmp_path / "o" / "swd.json")["swd"] == res["swd"]

    def test_train_outputs(self, workspace):
        model = workspace / "model"
        for name in ("model.json", "history.csv", "config.json", "run.json"):
            assert (model / name).exists()
        rows = (model / "history.csv").read_text().strip().splitlines()
        assert rows[0].startswith("epoch,steps,train_loss")
        assert rows[-1].split(",")[1] == "2"
        assert read_json(model / "config.json")["model"]["mesh_channels"] == [4, 4, 4]

    def test_infer(self, workspace, tmp_path, capsys):
        save_tensor(np.random.default_rng(0).normal(size=(7, 8)), tmp_path / "f.ottk")
        code, out, _ = run(capsys, "infer", "--model", workspace / "model", "--features", tmp_path / "f.ottk",
                           "--frames", "3", "--out", tmp_path / "o")
        assert code == 0 and json.loads(out)["frames"] == 3
        frames = sorted((tmp_path / "o").glob("frame_*.obj"))
        assert [f.name for f in frames] == ["frame_0000.obj", "frame_0001.obj", "frame_0002.obj"]
        assert load_obj(frames[0]).n_vertices == 642

    def test_infer_topology_mismatch(self, workspace, tmp_path, capsys):
        save_tensor(np.zeros((4, 8)), tmp_path / "f.ottk")
        save_obj(icosphere(2), tmp_path / "t.obj")
        code, _, err = run(capsys, "infer", "--model", workspace / "model", "--features", tmp_path / "f.ottk",
                           "--template", tmp_path / "t.obj", "--out", tmp_path / "o")
        assert code == 1 and "topology" in err

    def test_eval(self, workspace, tmp_path, capsys):
        code, out, _ = run(capsys, "eval", "--model", workspace / "model", "--data", workspace / "data",
                           "--split", "all", "--out", tmp_path / "report.json")
        assert code == 0
        body = read_json(tmp_path / "report.json")
        assert body["metrics"]["frames"] == 12 and len(body["samples"]) == 3
        assert (tmp_path / "report.run.json").exists()

    def test_selftest(self, tmp_path, capsys):
        code, out, _ = run(capsys, "selftest", "--out", tmp_path)
        assert code == 0
        assert all(line.startswith("PASS") for line in out.strip().splitlines())
        assert all(r["passed"] for r in read_json(tmp_path / "selftest.json"))
