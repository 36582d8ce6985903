import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from abrfair.cli import main
from abrfair.config import ConfigError, load_config, parse_config
from abrfair.policies import BB, LBB, LRB
from abrfair.traces import synthesize, write_trace

BASE = {
    "seed": 3,
    "sim": {"dt_s": 2.0, "horizon_steps": 5, "alpha": 1.0},
    "players": [
        {"policy": {"type": "LBB", "alpha": 100}, "p": 0.9},
        {"policy": {"type": "LBB", "alpha": 100}, "p": 0.3},
    ],
    "allocator": "baseline",
    "traces": [{"kind": "markov", "params": {"levels": [2400, 5600], "p_switch": 0.2}, "length": 5, "seeds": [0, 1]}],
    "experiments": {
        "pareto": {"alphas": [0, 1], "allocators": ["baseline", "tcp_model"]},
        "q": {"pairs": [[0.6, 0.6], [0.9, 0.3]], "allocators": ["baseline"]},
        "init": {"pairs": [[2, 2], [2, 18]], "allocators": ["baseline"]},
        "noise": {"sigmas": [0, 100], "replicates": 3, "allocators": ["baseline"]},
    },
    "stability": {"policy": {"type": "LRB", "alpha": 0.8}, "models": [{}, {"base_c": 0.05, "half_sat_kappa": 3000, "hill": 2}], "starts": 10},
    "validate_h": {"grid_size": 16, "models": [{}, "ideal"]},
}


def write_cfg(tmp_path, doc=BASE):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(doc))
    return p


def test_parse_full_config(tmp_path):
    cfg = load_config(write_cfg(tmp_path))
    assert cfg.seed == 3 and cfg.allocator == "baseline" and len(cfg.traces) == 2
    assert cfg.template.specs[1].quality.exponent_p == 0.3
    assert isinstance(cfg.template.specs[0].policy, LBB)
    plan = cfg.plan("noise")
    assert plan.axis == (0.0, 100.0) and plan.replicates == 3 and plan.seed == 3
    assert cfg.plan("q").axis == ((0.6, 0.6), (0.9, 0.3))
    assert cfg.scenario(1).trace == synthesize("markov", {"levels": [2400, 5600], "p_switch": 0.2}, 5, 1)


def test_policy_types_and_trace_files(tmp_path):
    write_trace(synthesize("constant", {"level": 1800}, 4), tmp_path / "t.csv")
    doc = {
        "sim": {"horizon_steps": 4},
        "players": [
            {"policy": {"type": "LRB", "alpha": 0.8}},
            {"policy": {"type": "BB", "xs": [0, 30], "ys": [200, 3000]}, "ladder": {"min_kbps": 300, "max_kbps": 2500}},
        ],
        "trace": {"file": "t.csv"},
        "tcp": {"base_c": 1.0, "half_sat_kappa": "inf"},
    }
    cfg = load_config(write_cfg(tmp_path, doc))
    assert isinstance(cfg.template.specs[0].policy, LRB) and isinstance(cfg.template.specs[1].policy, BB)
    assert cfg.template.specs[1].ladder.max_kbps == 2500
    assert cfg.template.tcp.is_ideal
    assert cfg.traces[0].step_values.tolist() == [1800.0] * 4
    assert tmp_path / "t.csv" in cfg.inputs


@pytest.mark.parametrize(
    "patch",
    [
        {"bogus": 1},
        {"sim": {"dt": 2}},
        {"players": []},
        {"players": [{"policy": {"type": "XYZ"}}]},
        {"players": [{"policy": {"type": "LBB", "alpha": -1}}]},
        {"allocator": "magic"},
        {"forecast": "oracle"},
        {"seed": -1},
        {"traces": [{"kind": "markov", "length": 5}]},
        {"traces": [{"file": "missing.csv"}]},
        {"traces": [{"kind": "constant", "params": {"level": 1000}, "length": 2}]},
        {"initial_buffers_s": [2.0]},
        {"nmpc": {"horizon": 5, "colour": 1}},
    ],
)
def test_config_errors(patch, tmp_path):
    with pytest.raises(ConfigError):
        parse_config({**BASE, **patch}, tmp_path)


def test_plan_errors(tmp_path):
    cfg = parse_config({**BASE, "experiments": {"q": {"pairs": [[0.5]]}}}, tmp_path)
    with pytest.raises(ConfigError):
        cfg.plan("q")
    with pytest.raises(ConfigError):
        cfg.plan("init")
    with pytest.raises(ConfigError):
        cfg.plan("other")


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.mark.parametrize("cmd", ["simulate", "pareto", "sens-q", "sens-init", "sens-noise", "stability-check", "validate-h"])
@pytest.mark.parametrize("fmt", ["csv", "json-lines"])
def test_commands_write_outputs_and_manifest(cmd, fmt, tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "out"
    assert main([cmd, "--config", str(cfg), "--out-dir", str(out), "--format", fmt, "--seed", "11"]) == 0
    m = manifest(out)
    assert m["command"] == cmd and m["seed"] == 11 and m["version"]
    assert m["inputs"][0]["sha256"] == hashlib.sha256(cfg.read_bytes()).hexdigest()
    assert m["outputs"] and all((out / p).exists() for p in m["outputs"])


def test_study_output_is_deterministic(tmp_path):
    cfg = write_cfg(tmp_path)
    for d, par in (("a", "1"), ("b", "2")):
        assert main(["pareto", "--config", str(cfg), "--out-dir", str(tmp_path / d), "--parallelism", par]) == 0
    assert (tmp_path / "a" / "pareto.csv").read_text() == (tmp_path / "b" / "pareto.csv").read_text()


def test_ingest_command(tmp_path):
    raw = tmp_path / "raw.csv"
    raw.write_text("session_id,seq,throughput_kbps\nA,0,1000\nA,1,2000\nB,0,9000\nB,1,9000\n")
    out = tmp_path / "out"
    assert main(["ingest", "--input", str(raw), "--out-dir", str(out), "--n-players", "2"]) == 0
    m = manifest(out)
    assert m["outputs"] == ["traces/A.csv"]
    assert m["inputs"][0]["path"] == str(raw)
    lines = (out / "traces" / "A.csv").read_text().splitlines()
    assert lines[0] == "step,capacity_kbps" and len(lines) == 6


def test_exit_codes(tmp_path, monkeypatch):
    bad = tmp_path / "bad.yaml"
    bad.write_text("sim: [1, 2\n")
    assert main(["simulate", "--config", str(bad), "--out-dir", str(tmp_path / "o")]) == 2
    assert main(["sens-q", "--config", str(write_cfg(tmp_path, {**BASE, "experiments": {}})), "--out-dir", str(tmp_path / "o")]) == 2
    assert main(["ingest", "--out-dir", str(tmp_path / "o")]) == 2
    assert main(["simulate", "--config", str(tmp_path / "nope.yaml")]) == 2

    import abrfair.experiments as ex

    real = ex._execute

    def flaky(sc):
        if sc.allocator == "tcp_model":
            raise RuntimeError("boom")
        return real(sc)

    monkeypatch.setattr(ex, "_execute", flaky)
    assert main(["pareto", "--config", str(write_cfg(tmp_path)), "--out-dir", str(tmp_path / "p")]) == 3
    assert manifest(tmp_path / "p")["outputs"] == ["pareto.csv"]


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "abrfair", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "abrfair" in out.stdout
    bad = subprocess.run([sys.executable, "-m", "abrfair", "simulate", "--parallelism", "0"], capture_output=True, text=True, cwd=tmp_path)
    assert bad.returncode == 2
