import json
import subprocess
import sys

import pytest

from urolesion import config as C
from urolesion.cli import main
from urolesion.errors import ConfigError


def test_round_trip_and_defaults():
    cfg = C.RunConfig()
    assert C.loads(cfg.to_json()) == cfg
    assert cfg.train.freeze_k == 4 and cfg.network.width_scale == 0.25


def test_unknown_key_reports_line():
    text = '{\n  "jobs": 1,\n  "train": {\n    "warm_epoch": 3\n  }\n}\n'
    with pytest.raises(ConfigError) as exc:
        C.loads(text)
    assert exc.value.line == 4


@pytest.mark.parametrize("text,line", [
    ('{\n "jobs": 1,\n "scenarios": [1,\n}', 4),
    ('{\n "train": {"batch_size": "big"}\n}', 2),
    ('{\n "network": {\n  "archs": ["alexnet"]}}', 3),
    ('{\n\n "train": {"freeze_k": 1}}', 3),
])
def test_bad_values_report_line(text, line):
    with pytest.raises(ConfigError) as exc:
        C.loads(text)
    assert exc.value.line == line


def test_flags_override_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"train": {"seed": 4, "batch_size": 8}, "data": {"resolution": 32}}')
    cfg = C.override(C.load(p), **{"train.seed": 9, "data.resolution": None, "scenarios": [3]})
    assert (cfg.train.seed, cfg.train.batch_size, cfg.data.resolution, cfg.scenarios) == (9, 8, 32, (3,))


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(C.OUTPUT_ROOT_ENV, str(tmp_path))
    assert C.resolve_output("x") == tmp_path / "x"
    assert C.resolve_output("/abs") == C.Path("/abs")


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_cli_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{\n "data": {\n  "nope": 1}}')
    assert main(["-q", "generate", "--config", str(p)]) == 2
    err = _err(capsys)
    assert err["line"] == 3 and err["exit"] == 2


def test_cli_checkpoint_exit_codes(tmp_path, capsys):
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    args = ["eval", "--checkpoint", str(tmp_path / "bad.ckpt"), "--data", str(tmp_path)]
    assert main(args + ["-q"]) == 4
    assert main(["eval", "-q", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)]) == 3
    assert _err(capsys)["kind"] == "FileNotFoundError"


def test_cli_report_on_incomplete_bundle(tiny_bundle, tmp_path, capsys):
    import shutil
    copy = tmp_path / "b"
    shutil.copytree(tiny_bundle.root, copy)
    (copy / "vgg16" / "scenario1" / "records.json").unlink()
    assert main(["report", "-q", "--bundle", str(copy)]) == 7
    assert "vgg16/scenario1/fold0/step1" in _err(capsys)["missing"]
    assert main(["report", "-q", "--bundle", str(tmp_path / "missing")]) == 3


def test_cli_end_to_end(tmp_path):
    data = tmp_path / "data"
    assert main(["-q", "generate", "--out", str(data), "--per-cell", "4", "--resolution", "32", "--seed", "2"]) == 0
    assert (data / "manifest.csv").is_file() and (data / "config.resolved.json").is_file()
    out = tmp_path / "run"
    assert main(["train", "-q", "--data", str(data), "--out", str(out), "--arch", "vgg16", "--scenario", "3",
                 "--scale", "0.125", "--warm-epochs", "0", "--finetune-epochs", "1", "--folds", "2"]) == 0
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["train"]["folds"] == 2 and resolved["network"]["archs"] == ["vgg16"]
    ckpt = out / "bundle" / "vgg16" / "scenario3" / "fold0" / "step1.ckpt"
    assert ckpt.is_file()
    assert main(["report", "-q", "--bundle", str(out / "bundle")]) == 0
    assert (out / "bundle" / "report" / "report.csv").is_file()
    assert main(["eval", "-q", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(tmp_path / "ev")]) == 0
    assert 0 <= json.loads((tmp_path / "ev" / "eval.json").read_text())["auc"] <= 1
    img = sorted((data / "images").glob("CYS_WLI_lesion_*.ppm"))[0]
    assert main(["gradcam", "-q", "--checkpoint", str(ckpt), "--image", str(img), "--out",
                 str(tmp_path / "g.ppm"), "--csv", str(tmp_path / "g.csv")]) == 0
    assert (tmp_path / "g.ppm").read_bytes().startswith(b"P6")


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "urolesion.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("generate", "train", "eval", "gradcam", "report"):
        assert cmd in r.stdout
