"""Command line interface: config loading, overrides, exit codes."""

import json

import pytest

from smident.cli import _apply_overrides, build_parser, main
from smident.errors import ConfigError
from smident.pipeline import ExperimentConfig

MINI = {
    "tf_num": [1.0], "tf_den": [1.0, 1.0], "ts": 0.5,
    "n_id": 400, "n_val": 400, "hold_time": 2.0, "dbar0": 0.05,
    "seed": 7, "o_init": 2, "p_max": 20, "p_report": [1, 5, 10],
}


def _write_cfg(tmp_path, **extra):
    data = dict(MINI, out_dir=str(tmp_path / "run"), **extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return path


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    args = build_parser().parse_args(["generate", "--set", "seed=3"])
    assert args.command == "generate" and args.set == ["seed=3"]


def test_overrides_parse_json_then_string():
    cfg = ExperimentConfig()
    out = _apply_overrides(cfg, ["dbar0=0.07", "levels=[-1,1]", "out_dir=runs/x"])
    assert out.dbar0 == 0.07
    assert out.levels == [-1, 1]
    assert out.out_dir == "runs/x"
    with pytest.raises(ConfigError):
        _apply_overrides(cfg, ["nosuchkey=1"])
    with pytest.raises(ConfigError):
        _apply_overrides(cfg, ["badpair"])


def test_generate_writes_records(tmp_path, capsys):
    cfg_path = _write_cfg(tmp_path)
    rc = main(["generate", "--config", str(cfg_path)])
    assert rc == 0
    run = tmp_path / "run"
    assert (run / "id.csv").exists() and (run / "val.csv").exists()
    manifest = json.loads((run / "generate.json").read_text())
    assert manifest["config"]["seed"] == 7
    assert set(manifest["sha256"]) == {"id.csv", "val.csv"}


def test_missing_config_is_exit_2(tmp_path, capsys):
    rc = main(["generate", "--config", str(tmp_path / "absent.json")])
    assert rc == 2
    assert "configuration error" in capsys.readouterr().err


def test_invalid_override_is_exit_2(tmp_path, capsys):
    cfg_path = _write_cfg(tmp_path)
    rc = main(["generate", "--config", str(cfg_path), "--set", "alpha=0.5"])
    assert rc == 2


def test_estimate_before_generate_is_exit_2(tmp_path, capsys):
    cfg_path = _write_cfg(tmp_path)
    rc = main(["estimate", "--config", str(cfg_path)])
    assert rc == 2
    assert "generate stage first" in capsys.readouterr().err


def test_unreachable_noise_grid_is_exit_3(tmp_path, capsys):
    cfg_path = _write_cfg(tmp_path, p_max=10)
    assert main(["generate", "--config", str(cfg_path)]) == 0
    rc = main(["estimate", "--config", str(cfg_path),
               "--set", "dbar_grid=[1e-6,2e-6]"])
    assert rc == 3
    assert "numerical failure" in capsys.readouterr().err


def test_out_flag_overrides_directory(tmp_path):
    cfg_path = _write_cfg(tmp_path)
    alt = tmp_path / "elsewhere"
    rc = main(["generate", "--config", str(cfg_path), "--out", str(alt)])
    assert rc == 0
    assert (alt / "id.csv").exists()
