import json
import subprocess
import sys

import numpy as np
from PIL import Image

from fundus2video.cli import main


def _png(path, value):
    Image.fromarray(np.full((16, 16), value, np.uint8), mode="L").save(path)
    return path


def test_mask_command(tmp_path, capsys):
    first = _png(tmp_path / "a.png", 10)
    last = np.full((16, 16), 10, np.uint8)
    last[:4] = 200
    Image.fromarray(last, mode="L").save(tmp_path / "b.png")
    code = main(["mask", "--first", str(first), "--last", str(tmp_path / "b.png"), "--out", str(tmp_path / "m.png")])
    assert code == 0
    out = capsys.readouterr().out
    assert "coverage 0.250000" in out
    assert json.loads(out[: out.index("}") + 1])["threshold"] == 45.0
    assert (np.asarray(Image.open(tmp_path / "m.png")) > 0).sum() == 64


def test_unknown_flag_is_usage_error(capsys):
    assert main(["mask", "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_subcommand(capsys):
    assert main([]) == 1


def test_missing_image_is_user_error(tmp_path, capsys):
    code = main(["mask", "--first", str(tmp_path / "nope.png"), "--last", str(tmp_path / "nope.png"),
                 "--out", str(tmp_path / "m.png")])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_train_missing_data_root(tmp_path, capsys):
    assert main(["train", "--data-root", str(tmp_path / "empty"), "--out-dir", str(tmp_path / "run")]) == 1


def test_train_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("epochz = 3\n")
    assert main(["train", "--config", str(cfg), "--data-root", str(tmp_path)]) == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_synth_train_generate_evaluate(tmp_path, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["synth-data", "--patients", "4", "--frames", "6", "--size", "32", "--out", str(data)]) == 0
    cfg = tmp_path / "c.toml"
    cfg.write_text('ngf = 4\nn_blocks = 1\nndf = 4\nproj_dim = 8\n[weights]\nlambda_att = 2.0\n')
    assert main(["train", "--config", str(cfg), "--data-root", str(data), "--out-dir", str(run), "--image-size", "32",
                 "--frames-per-sequence", "6", "--n-patches", "8", "--max-steps", "2", "--seed", "3"]) == 0
    resolved = json.loads((run / "config.json").read_text())
    assert resolved["weights"]["lambda_att"] == 2.0 and resolved["seed"] == 3
    ckpt = run / "final.ckpt"
    cf = next(data.glob("*/cf.png"))
    assert main(["generate", "--cf", str(cf), "--checkpoint", str(ckpt), "--frames", "3", "--out", str(tmp_path / "v")]) == 0
    assert main(["generate", "--cf", str(cf), "--checkpoint", str(ckpt), "--out", str(tmp_path / "v")]) == 1
    assert main(["evaluate", "--data-root", str(data), "--checkpoint", str(ckpt), "--split", "train", "--frames", "6",
                 "--out", str(tmp_path / "rep.json")]) == 0
    report = json.loads((tmp_path / "rep.json").read_text())
    assert report["extractor_id"].startswith("fallback") and len(report["per_video"]) >= 2


def test_console_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "fundus2video", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "synth-data" in proc.stdout and "evaluate" in proc.stdout
