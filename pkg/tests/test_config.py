import pytest

from linko.config import RunConfig, load_config
from linko.errors import ConfigError


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.run.seeds == [1, 2, 3]
    assert cfg.run.fractions == [0.2, 0.4, 0.6, 0.8, 1.0]
    assert cfg.train.lr == 1e-3 and cfg.train.batch_size == 32 and cfg.train.patience == 10
    assert (cfg.encoder.dropout_h, cfg.encoder.dropout_v) == (0.1, 0.2)


def test_precedence_file_then_overrides(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[encoder]\nd = 16\nuse_hgip = false\n[train]\nlr = 0.01\n")
    cfg = load_config(path, ["train.lr=0.5", "synth.n_leaves=dx:50"])
    assert cfg.encoder.d == 16 and cfg.encoder.use_hgip is False
    assert cfg.train.lr == 0.5
    assert cfg.synth.n_leaves == {"dx": 50, "rx": 60, "px": 60}


def test_round_trip_and_digest(tmp_path):
    cfg = load_config(None, ["encoder.taus=0.02,0.03,0.04", "run.seeds=4,5", "embed.projection_seed=7"])
    path = tmp_path / "c.ini"
    path.write_text(cfg.to_ini())
    back = load_config(path)
    assert back == cfg
    assert back.digest() == cfg.digest()
    assert load_config(None, ["encoder.taus=0.05"]).encoder.taus == 0.05
    assert load_config(None, ["train.lr=0.002"]).digest() != cfg.digest()


@pytest.mark.parametrize("override", [
    "encoder.nope=1", "nosection.x=1", "encoder.d=abc", "train.normalize_visits=maybe", "novalue", "d=3",
])
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    bad = tmp_path / "bad.ini"
    bad.write_text("d = 3\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_semantic_validation():
    with pytest.raises(ConfigError):
        load_config(None, ["embed.provider=cloud"]).validate()
    with pytest.raises(ConfigError):
        load_config(None, ["run.fractions=0.0,1.0"]).validate()
    with pytest.raises(ConfigError):
        load_config(None, ["encoder.d=30"]).validate()


def test_config_has_no_credential_fields():
    from dataclasses import fields

    from linko.config import EmbedSettings

    assert not any("key" in f.name or "token" in f.name for f in fields(EmbedSettings))
