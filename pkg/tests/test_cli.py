import json
import subprocess
import sys

import pytest

from blockstream.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_NETWORK,
    main,
    parse_bandwidth,
    parse_grid,
    parse_seeds,
)
from blockstream.config import ConfigError


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seeds", "1-4,101", "--out-dir", str(d)]) == 0
    train = [str(d / f"run{i}.trace") for i in range(1, 5)]
    assert main(["train", *train, "--out", str(d / "model.json")]) == 0
    return d, train, str(d / "run101.trace"), str(d / "model.json")


def test_parsers():
    assert parse_bandwidth("17.4Mbps") == pytest.approx(17.4e6)
    assert parse_bandwidth("500kbps") == 500e3
    assert parse_bandwidth("1000") == 1000
    assert parse_seeds("1-3,7") == [1, 2, 3, 7]
    assert parse_grid(["bandwidth-bps=10.8M,17.4Mbps", "p_download=0.1"]) == {
        "bandwidth_bps": [10.8e6, 17.4e6], "p_download": [0.1]}
    for bad in (["nope=1"], ["p_download"], ["p_download="], ["tau=x"]):
        with pytest.raises(ConfigError):
            parse_grid(bad)


def test_synth_names_files_by_seed(workdir):
    d, train, test, _ = workdir
    text = (d / "run3.trace").read_text()
    assert text.startswith("#trace\trun3\n")


def test_simulate_prints_report(workdir, capsys):
    d, train, test, model = workdir
    capsys.readouterr()
    assert main(["simulate", test, "--model", model, "--b-initial-bytes", "1048576"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert 0 < rep["hit_rate"] <= 1 and rep["accesses"] > 0


def test_simulate_baseline(workdir, tmp_path):
    d, train, test, model = workdir
    out = tmp_path / "r.json"
    assert main(["simulate", test, "--model", model, "--baseline", "--train", *train, "--out", str(out)]) == 0
    assert json.loads(out.read_text())["speculative_bytes"] > 0
    assert main(["simulate", test, "--model", model, "--baseline"]) == EXIT_CONFIG


def test_sweep_three_rows(workdir, tmp_path):
    d, train, test, model = workdir
    out = tmp_path / "s.csv"
    rc = main(["sweep", "--train", *train, "--test", test, "--model", model,
               "--grid", "bandwidth_bps=10.8Mbps,13.95Mbps,17.4Mbps", "--out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "param,value,delay_ms,false_positive_bytes,hit_rate"
    assert len(lines) == 4 and all(l.startswith("bandwidth_bps,") for l in lines[1:])


def test_config_file_and_overrides(workdir, tmp_path, capsys):
    d, train, test, model = workdir
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"rtt_ms": 0, "bandwidth_bps": 1e15}))
    capsys.readouterr()
    assert main(["simulate", test, "--model", model, "--config", str(cfg)]) == 0
    assert json.loads(capsys.readouterr().out)["total_delay_ms"] < 1
    assert main(["simulate", test, "--model", model, "--config", str(cfg), "--rtt-ms", "100"]) == 0
    assert json.loads(capsys.readouterr().out)["total_delay_ms"] > 100


def test_degenerate_min_superblock_size(workdir, tmp_path):
    d, train, test, model = workdir
    out = tmp_path / "m1.json"
    assert main(["train", *train[:2], "--out", str(out), "--min-superblock-size", "1"]) == 0
    assert main(["train", *train[:2], "--out", str(out), "--min-superblock-size", "0"]) == EXIT_CONFIG


@pytest.mark.parametrize("argv, code", [
    (["simulate", "missing.trace", "--model", "missing.json"], EXIT_DATA),
    (["simulate", "{test}", "--model", "{model}", "--tau", "2"], EXIT_CONFIG),
    (["simulate", "{test}", "--model", "{model}", "--config", "nope.json"], EXIT_CONFIG),
    (["simulate", "{test}", "--model", "{test}"], EXIT_DATA),
    (["probe", "--server", "127.0.0.1:1", "--count", "1"], EXIT_NETWORK),
])
def test_exit_codes(workdir, argv, code):
    d, train, test, model = workdir
    argv = [a.format(test=test, model=model) for a in argv]
    assert main(argv) == code


def test_bad_trace_is_data_error(workdir, tmp_path):
    d, train, test, model = workdir
    bad = tmp_path / "bad.trace"
    bad.write_text("0\tcore.pak\tx\t1\n")
    assert main(["simulate", str(bad), "--model", model]) == EXIT_DATA


def test_console_entry_point(workdir):
    d, train, test, model = workdir
    res = subprocess.run([sys.executable, "-m", "blockstream.cli", "-v", "simulate", test, "--model", model], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0
    assert "resolved config" in res.stderr
    json.loads(res.stdout)
