import json

import pytest

from blockstream.config import ConfigError, PredictorConfig, SimConfig


def test_defaults():
    c = SimConfig()
    assert (c.delta_ms, c.tau, c.p_stop, c.lookahead_s, c.min_superblock_size) == (100, 0.9, 0.01, 60.0, 17)
    assert c.p_download == 0.02
    assert c.bandwidth_bps == 17.4e6
    assert c.rtt_ms == 100.0
    assert c.fp_window_ms == 480_000
    assert c.predictor().lookahead_ms == 60_000


@pytest.mark.parametrize("bad", [
    {"bandwidth_bps": 0}, {"fp_window_s": 0}, {"tau": 1.5}, {"p_download": -0.1},
    {"delta_ms": 0}, {"rtt_ms": -1}, {"min_superblock_size": 0}, {"containment": 0},
])
def test_invalid_values(bad):
    with pytest.raises(ConfigError):
        SimConfig().replace(**bad)


def test_from_dict_coerces_and_rejects_unknown(tmp_path):
    c = SimConfig.from_dict({"delta_ms": "120", "tau": "0.8", "temp_limit_bytes": None, "speed_adaptation": "false"})
    assert c.delta_ms == 120 and c.tau == 0.8 and c.temp_limit_bytes is None and c.speed_adaptation is False
    with pytest.raises(ConfigError, match="bogus"):
        SimConfig.from_dict({"bogus": 1})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(SimConfig(rtt_ms=5).to_dict()))
    assert SimConfig.load(p) == SimConfig(rtt_ms=5)


def test_load_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("[1]")
    with pytest.raises(ConfigError):
        SimConfig.load(p)
    with pytest.raises(ConfigError):
        SimConfig.load(tmp_path / "missing.json")


def test_predictor_config_validation():
    with pytest.raises(ConfigError):
        PredictorConfig(lookahead_ms=-1)
