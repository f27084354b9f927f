import json

import pytest

from docprune.config import CONFIG_ENV, PRESETS, PruneConfig, load_config


def test_defaults_match_single_page_preset():
    d = PruneConfig()
    p = PruneConfig.preset(1)
    assert d.to_dict() == p.to_dict()
    assert (d.patch_size, d.block, d.ctp_window, d.criterion) == (28, 2, (15, 27), "l2_norm")


@pytest.mark.parametrize("pages", sorted(PRESETS))
def test_presets(pages):
    cfg = PruneConfig.preset(pages)
    for key, value in PRESETS[pages].items():
        assert getattr(cfg, key) == value
    assert cfg.pages == pages


def test_preset_four_pages_values():
    cfg = PruneConfig.preset(4)
    assert (cfg.tau_bg, cfg.tau_qst, cfg.tau_comp, cfg.tau_att) == (0.8, 0.4, 45.0, 0.075)


def test_validation():
    with pytest.raises(ValueError):
        PruneConfig(tau_bg=1.5)
    with pytest.raises(ValueError):
        PruneConfig(ctp_window=(5, 2))
    with pytest.raises(ValueError):
        PruneConfig(criterion="bogus")
    with pytest.raises(ValueError):
        PruneConfig().with_overrides({"nope": 1})
    with pytest.raises(ValueError):
        PruneConfig.preset(3)


def test_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"pages": 4, "tau_att": 0.2, "sigma": 2.0}))
    cfg = load_config(f, {"sigma": 0.5, "tau_bg": None})
    assert cfg.tau_att == 0.2  # file beats preset
    assert cfg.sigma == 0.5  # flag beats file
    assert cfg.tau_bg == 0.8  # preset fills the rest
    assert load_config(f, {"pages": 2}).tau_comp == 60.0


def test_env_config(tmp_path, monkeypatch):
    f = tmp_path / "env.json"
    f.write_text(json.dumps({"tau_comp": "inf", "ctp_window": [0, 27]}))
    monkeypatch.setenv(CONFIG_ENV, str(f))
    cfg = load_config()
    assert cfg.tau_comp == float("inf") and cfg.ctp_window == (0, 27)
    assert cfg.to_dict()["tau_comp"] == "inf"
    monkeypatch.delenv(CONFIG_ENV)
    assert load_config().tau_comp == 65.0


def test_bad_config_files(tmp_path):
    f = tmp_path / "bad.json"
    f.write_text("{nope")
    with pytest.raises(ValueError):
        load_config(f)
    f.write_text("[1, 2]")
    with pytest.raises(ValueError):
        load_config(f)
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.json")
