import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import TINY
from mvmcad import mvtn, pnm
from mvmcad.cli import main


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root


def test_train_and_eval(run_dir, capsys):
    assert (run_dir / "run" / "checkpoint.mvmc").exists()
    assert main(["eval", "--checkpoint", str(run_dir / "run" / "checkpoint.mvmc"),
                 "--data", str(run_dir / "data"), "--out", str(run_dir / "eval")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((run_dir / "eval" / "metrics.json").read_text())


def test_infer_and_trace(run_dir, tmp_path):
    image = next((run_dir / "data" / "plate" / "test" / "ng").glob("*.ppm"))
    ck = str(run_dir / "run" / "checkpoint.mvmc")
    assert main(["infer", "--checkpoint", ck, "--image", str(image), "--out", str(tmp_path / "i")]) == 0
    assert (tmp_path / "i" / f"{image.stem}_heatmap.pgm").exists()
    assert main(["aam-trace", "--checkpoint", ck, "--image", str(image), "--out", str(tmp_path / "t")]) == 0
    pi = mvtn.load(tmp_path / "t" / "pi.mvtn")
    np.testing.assert_allclose(pi.sum(-1), 1.0, atol=1e-5)


def test_export_weights_feed_training(run_dir, tmp_path):
    cfg = str(run_dir / "cfg.json")
    ck = str(run_dir / "run" / "checkpoint.mvmc")
    assert main(["export-weights", "--checkpoint", ck, "--out", str(tmp_path / "w")]) == 0
    files = sorted(p.name for p in (tmp_path / "w").glob("*.mvtn"))
    assert "backbone.patch_w.mvtn" in files
    assert main(["train", "--config", cfg, "--data", str(run_dir / "data"), "--out", str(tmp_path / "r"),
                 "--backbone-weights", str(tmp_path / "w")]) == 0
    assert (tmp_path / "r" / "checkpoint.mvmc").read_bytes() == (run_dir / "run" / "checkpoint.mvmc").read_bytes()


def test_exit_codes(run_dir, tmp_path):
    cfg = str(run_dir / "cfg.json")
    assert main(["train", "--config", cfg, "--data", str(run_dir / "data")]) == 2
    (tmp_path / "bad.json").write_text(json.dumps({"bogus": 1}))
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2
    assert main(["synth", "--seed", "-1", "--out", str(tmp_path)]) == 2
    assert main(["eval", "--jobs", "0", "--checkpoint", "x"]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.mvmc")]) == 4
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 4
    (tmp_path / "junk.mvmc").write_bytes(b"junk")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.mvmc"), "--data", str(run_dir / "data")]) == 2
    pnm.write(tmp_path / "big.ppm", np.zeros((32, 32, 3), dtype=np.uint8))
    assert main(["infer", "--checkpoint", str(run_dir / "run" / "checkpoint.mvmc"),
                 "--image", str(tmp_path / "big.ppm"), "--out", str(tmp_path / "o")]) == 2


def test_gradcheck_command(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": TINY["model"]}))
    assert main(["gradcheck", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    for module in ("prior-gate", "aam", "decoder", "cfl"):
        assert module in out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mvmcad", "eval", "--checkpoint", str(tmp_path / "x")],
                          capture_output=True, text=True)
    assert proc.returncode == 4 and "error" in proc.stderr
