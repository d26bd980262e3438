#!/usr/bin/env python3
"""
Unit tests for config module.
"""

import pytest

import config


def test_defaults():
    resolved = config.resolve_config()
    assert resolved["model"]["family"] == "pvae"
    assert resolved["train"]["lr"] == 0.005
    assert resolved["train"]["epochs"] == 3000
    assert resolved["train"]["grad_clip"] == 500.0
    assert resolved["data"]["side"] == 16
    assert resolved["sweep"]["beta_grid"] == list(config.BETA_GRID)


def test_resolve_does_not_mutate_defaults():
    resolved = config.resolve_config(flags={"k": 5})
    resolved["sweep"]["k_grid"].append(9)
    assert config.DEFAULTS["model"]["k"] == config.N_LATENTS
    assert 9 not in config.DEFAULTS["sweep"]["k_grid"]


def test_desk_preset():
    resolved = config.resolve_config("desk")
    assert resolved["train"]["epochs"] == 300
    assert resolved["train"]["batch_size"] == 128
    assert resolved["sweep"]["k_grid"] == [64, 128]
    assert resolved["sweep"]["seeds"] == [0, 1]
    with pytest.raises(ValueError):
        config.resolve_config("bogus")


def test_layering(tmp_path):
    """Preset < config file < flags."""
    ini = tmp_path / "run.ini"
    ini.write_text("[train]\nepochs = 50\nlr = 0.01\n\n[sweep]\nbeta_grid = 0.5, 4\n")
    resolved = config.resolve_config("desk", str(ini), {"lr": 0.02, "beta": None})
    assert resolved["train"]["epochs"] == 50
    assert resolved["train"]["lr"] == 0.02
    assert resolved["train"]["batch_size"] == 128
    assert resolved["train"]["beta"] == config.BETA
    assert resolved["sweep"]["beta_grid"] == [0.5, 4.0]


def test_unknown_section_and_key(tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text("[optimizer]\nlr = 0.1\n")
    with pytest.raises(ValueError, match="optimizer"):
        config.resolve_config(config_path=str(ini))
    ini.write_text("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ValueError, match="learning_rate"):
        config.resolve_config(config_path=str(ini))
    ini.write_text("[output]\nrender = maybe\n")
    with pytest.raises(ValueError):
        config.resolve_config(config_path=str(ini))


def test_unknown_family_and_flag():
    with pytest.raises(ValueError, match="--model"):
        config.resolve_config(flags={"model": "bogus"})
    with pytest.raises(ValueError):
        config.resolve_config(flags={"learning_rate": 0.1})


def test_format_config_round_trip(tmp_path):
    resolved = config.resolve_config("desk", flags={"render": True, "model": "grelu"})
    ini = tmp_path / "resolved.ini"
    ini.write_text(config.format_config(resolved))
    assert config.resolve_config(config_path=str(ini)) == resolved


def test_field_scale_setting():
    assert config.resolve_config()["data"]["field_scale"] == 4
    assert config.resolve_config(flags={"field_scale": 1})["data"]["field_scale"] == 1
