import pytest
from hypothesis import given, strategies as st

from splitproj.config import (ExperimentConfig, config_hash, load_config, parse_config, serialize_config,
                              with_overrides)
from splitproj.errors import ConfigError


def test_empty_document_gives_defaults():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    assert (cfg.n_clients, cfg.alpha, cfg.lambda_wcc, cfg.cr, cfg.mode) == (10, 1e7, 0.0, 8.0, "LS-F")
    assert cfg.payload_k() == 32 and cfg.label() == "proj-k32-LS-F"


def test_k_above_d_names_both_values():
    with pytest.raises(ConfigError, match=r"k=99999.*d=1024"):
        parse_config("k = 99999\nwidth = 1024\n")


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="'lamda_wcc'"):
        parse_config("lamda_wcc = 0.1")


@pytest.mark.parametrize("text", [
    "[cut]\nk = 4", "rounds = 1.5", "detect = 1", "mode = 3", "alpha = 'x'", "rounds = = 2",
    "mode = 'LS-X'", "bottleneck = 'pca'", "n_clients = 0", "alpha = 0", "poison_rate = 2.0",
    "dims = 10", "test_fraction = 0.6\naux_fraction = 0.5", "dataset = 'idx'", "lambda_wcc = -1",
    "transport = 'udp'", "attack = 'all'",
])
def test_invalid_documents(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_ints_promote_to_floats_and_labels():
    cfg = parse_config("alpha = 1\nlambda_wcc = 0.1\nbottleneck = 'raw'")
    assert cfg.alpha == 1.0 and isinstance(cfg.alpha, float)
    assert cfg.label() == "raw-wcc0.1"
    assert parse_config("k = 16").label() == "proj-k16-LS-F"
    assert parse_config("bottleneck = 'learned-1x1'\narch = 'cnn'").label() == "1x1-cr8"


configs = st.builds(
    ExperimentConfig,
    n_clients=st.integers(1, 50), alpha=st.floats(1e-3, 1e9), lambda_wcc=st.floats(0, 10),
    cr=st.floats(1, 64), mode=st.sampled_from(["LS-F", "LS-L"]), seed=st.integers(0, 2**40),
    bottleneck=st.sampled_from(["raw", "projection"]), out_dir=st.text(min_size=1, max_size=12),
    detect=st.booleans(), lr=st.floats(1e-6, 1.0), address=st.text(max_size=10))


@given(configs)
def test_serialize_roundtrip(cfg):
    assert parse_config(serialize_config(cfg)) == cfg


def test_load_config(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("# comment\nseed = 4\n")
    assert load_config(p).seed == 4
    p.write_bytes(b"seed = 4\nout_dir = '\xff'\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_overrides_and_hash():
    cfg = ExperimentConfig()
    other = with_overrides(cfg, seed=3)
    assert other.seed == 3 and config_hash(other) != config_hash(cfg)
    assert config_hash(with_overrides(cfg, out_dir="elsewhere")) == config_hash(cfg)
    with pytest.raises(ConfigError):
        with_overrides(cfg, nope=1)
    with pytest.raises(ConfigError):
        with_overrides(cfg, k=500)
    assert with_overrides(cfg, projection_seed=9).effective_projection_seed == 9
    assert cfg.effective_projection_seed == 0
