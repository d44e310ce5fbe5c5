import pytest

from armar import config as C
from armar.errors import ConfigError


def test_defaults_complete():
    cfg = C.defaults()
    assert cfg["seed"] == 1234
    assert cfg["data.n_patients"] == 40
    assert cfg["vae.widths"] == (8, 16, 32)
    assert cfg["align.beta"] == 0.001


def test_parse_file_with_comments(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text(
        "# a comment line\n"
        "seed = 42\n"
        "\n"
        "vae.epochs = 3   # trailing comment\n"
        "align.use_transformer = false\n"
        "vae.widths = 4, 8, 16\n",
        encoding="utf-8")
    cfg = C.load(f, env={})
    assert cfg["seed"] == 42
    assert cfg["vae.epochs"] == 3
    assert cfg["align.use_transformer"] is False
    assert cfg["vae.widths"] == (4, 8, 16)
    # untouched keys keep defaults
    assert cfg["align.alpha"] == 1.0


def test_unknown_key_rejected(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("data.nonexistent = 5\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="unknown config key"):
        C.load(f, env={})


def test_bad_value_rejected(tmp_path):
    f = tmp_path / "bad2.cfg"
    f.write_text("vae.epochs = banana\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        C.load(f, env={})


def test_missing_equals_rejected(tmp_path):
    f = tmp_path / "bad3.cfg"
    f.write_text("just a line\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="key = value"):
        C.load(f, env={})


def test_missing_file_rejected():
    with pytest.raises(ConfigError, match="not found"):
        C.load("/no/such/file.cfg", env={})


def test_env_seed_override(tmp_path):
    f = tmp_path / "s.cfg"
    f.write_text("seed = 10\n", encoding="utf-8")
    cfg = C.load(f, env={"ARMAR_SEED": "999"})
    assert cfg["seed"] == 999
    with pytest.raises(ConfigError, match="ARMAR_SEED"):
        C.load(f, env={"ARMAR_SEED": "abc"})


def test_override_validates_key():
    cfg = C.defaults()
    with pytest.raises(ConfigError):
        cfg.override("nope", 1)


def test_dump_defaults_round_trips(tmp_path):
    f = tmp_path / "defaults.cfg"
    f.write_text(C.dump_defaults(), encoding="utf-8")
    cfg = C.load(f, env={})
    for key in C.SCHEMA:
        assert cfg[key] == C.defaults()[key]
