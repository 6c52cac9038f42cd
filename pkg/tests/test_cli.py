import json

import pytest

from eofm.cli import EXIT_CONFIG, ConfigError, RunConfig, main


def test_config_lists_every_problem():
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({"bogus": 1, "pretrain": {"mask_ratio": 2.0, "lr": 1}, "modalities": ["x"]})
    text = str(info.value)
    for part in ("bogus", "pretrain.lr", "mask_ratio", "'x'"):
        assert part in text


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"encoder": {"depth": "x", "width": 3}}))
    assert main(["--config", str(cfg), "synth-data", "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    assert "width" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()


def test_argument_errors_exit_config():
    with pytest.raises(SystemExit) as info:
        main(["pretrain"])
    assert info.value.code == EXIT_CONFIG


def test_unknown_task(tmp_path, capsys, tiny_encoder, desk_mods):
    from eofm.backbone import save_encoder

    save_encoder(tmp_path / "e.ckpt", tiny_encoder, desk_mods)
    code = main(["eval", "--checkpoint", str(tmp_path / "e.ckpt"), "--task", "nope", "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    assert "synthetic_cls" in capsys.readouterr().err


def test_effective_config_round_trip():
    cfg = RunConfig.from_dict({"seed": 4, "pretrain": {"batch_size": 2}, "modalities": ["s1_grd", "dem"]})
    eff = cfg.effective()
    again = RunConfig.from_dict(eff).effective()
    assert again == eff
    assert eff["pretrain"]["batch_size"] == 2 and eff["modalities"] == ["s1_grd", "dem"]
