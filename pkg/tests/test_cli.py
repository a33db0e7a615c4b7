import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from scmc.cli import main
from scmc.config import ExperimentConfig, parse_config
from scmc.errors import ConfigError
from scmc.experiments import read_particles
from scmc.particles import ess

SMALL = {
    "monotone": ["--particles", "200", "--stages", "8", "--toy", "f2"],
    "manifold": ["--particles", "500", "--stages", "20"],
    "sir": ["--particles", "100", "--stages", "4", "--sweeps", "1"],
    "ricker-abc": ["--particles", "100", "--stages", "3", "--replicates", "10", "--sweeps", "1"],
}


def run(args, tmp_path, name="out"):
    out = tmp_path / name
    code = main([*args, "--out", str(out)])
    return code, out


def test_manifold_defaults():
    cfg = parse_config("manifold")
    assert cfg.particles == 100000 and cfg.stages == 1102
    assert cfg.model["tau_max"] == 1e5


@pytest.mark.parametrize("experiment", list(SMALL))
def test_round_trip(experiment):
    cfg = parse_config(experiment, seed=11, threads="auto")
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert again.to_json() == cfg.to_json()


def test_config_file_and_flag_precedence(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"particles": 300, "seed": 4, "model": {"toy": "f3"}}))
    cfg = parse_config("monotone", p, particles=150)
    assert cfg.particles == 150 and cfg.seed == 4 and cfg.model["toy"] == "f3"


@pytest.mark.parametrize(
    "bad",
    [
        {"particles": 0},
        {"particles": 1},
        {"seed": -1},
        {"seed": 2**64},
        {"threads": 0},
        {"threads": "many"},
        {"stages": 0},
        {"model": {"nonsense": 1}},
        {"bogus": 1},
        {"resample": "stratified"},
    ],
)
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "manifold", **bad})


def test_model_validation_messages():
    with pytest.raises(ConfigError, match="toy"):
        parse_config("monotone", toy="f9")
    with pytest.raises(ConfigError, match="replicates"):
        parse_config("ricker-abc", replicates=0)
    with pytest.raises(ConfigError, match="stages"):
        parse_config("ricker-abc", stages=8)


def test_exit_code_config(tmp_path, capsys):
    assert main(["manifold", "--particles", "0", "--out", str(tmp_path)]) == 2
    assert "particles" in capsys.readouterr().err
    p = tmp_path / "c.json"
    p.write_text('{"unknown_key": 3}')
    assert main(["manifold", "--config", str(p)]) == 2
    assert main(["sir", "--data", str(tmp_path / "missing.csv")]) == 2


def test_exit_code_degeneracy(tmp_path):
    # observed counts no prior draw can reproduce
    data = tmp_path / "y.csv"
    data.write_text("index,count\n" + "".join(f"{i},100000\n" for i in range(50)))
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"model": {"acceptance_floor": 0.01}}))
    args = ["ricker-abc", "--particles", "10", "--replicates", "2", "--data", str(data), "--config", str(conf)]
    code, _ = run(args, tmp_path)
    assert code == 3


def test_exit_code_numerical(tmp_path):
    # all x equal: the polynomial design is singular
    data = tmp_path / "xy.csv"
    data.write_text("x,y\n" + "".join(f"0.5,{i}\n" for i in range(10)))
    code, _ = run(["monotone", "--particles", "100", "--stages", "2", "--data", str(data)], tmp_path)
    assert code == 4


def test_print_config(capsys, tmp_path):
    assert main(["sir", "--print-config", "--out", str(tmp_path / "x")]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["stages"] == 50 and cfg["particles"] == 2000
    assert not (tmp_path / "x").exists()


@pytest.mark.parametrize("experiment", list(SMALL))
def test_outputs_and_trace_consistency(experiment, tmp_path):
    code, out = run([experiment, "--seed", "3", *SMALL[experiment]], tmp_path)
    assert code == 0
    trace = json.loads((out / "trace.json").read_text())
    meta = json.loads((out / "meta.json").read_text())
    assert meta["seed"] == 3 and meta["config"]["experiment"] == experiment
    assert "wall_clock_s" in meta["runtime"]
    by_t = {r["t"]: r for r in trace["stages"]}
    for rec in trace["stages"]:
        assert set(rec) >= {"t", "constraint", "ess", "resampled", "acceptance"}
    csvs = sorted(out.glob("particles_stage*.csv"))
    assert csvs
    for path in csvs:
        header = path.read_text().splitlines()[0].split(",")
        assert header[:3] == ["stage", "particle", "weight"]
        t, w, params, names = read_particles(path)
        assert names == header[3:] and params.shape[1] == len(names)
        with np.errstate(divide="ignore"):
            lw = np.log(w)
        assert ess(lw) == pytest.approx(by_t[t]["ess"], rel=1e-12)
    assert (out / "particles_final.csv").exists()


def test_monotone_band_files(tmp_path):
    code, out = run(["monotone", *SMALL["monotone"], "--checkpoints", "0,8"], tmp_path)
    assert code == 0
    rows = (out / "bands_stage8.csv").read_text().splitlines()
    assert rows[0] == "grid,mean,lower,upper" and len(rows) == 301
    assert sorted(p.name for p in out.glob("particles_stage*.csv")) == ["particles_stage0.csv", "particles_stage8.csv"]


def test_sir_default_schedule_length(tmp_path):
    # 25 b-steps + 25 xi-steps after the exact initial draw
    code, out = run(["sir", "--particles", "20", "--sweeps", "1", "--checkpoints", "50"], tmp_path)
    assert code == 0
    recs = json.loads((out / "trace.json").read_text())["stages"]
    assert len(recs) == 51 and recs[0]["t"] == 0
    bs = [r["constraint"]["b"] for r in recs[1:]]
    xis = [r["constraint"]["xi"] for r in recs[1:]]
    assert bs[:25] == pytest.approx(np.linspace(2, 26, 25)) and all(x == 1 for x in xis[:25])
    assert all(b == 26 for b in bs[25:]) and xis[-1] == 0


def test_ricker_trace_has_seven_stages(tmp_path):
    code, out = run(["ricker-abc", "--particles", "200", "--replicates", "20", "--sweeps", "1"], tmp_path)
    assert code == 0
    recs = json.loads((out / "trace.json").read_text())["stages"]
    assert [r["t"] for r in recs] == list(range(1, 8))
    assert [r["constraint"]["summaries"] for r in recs] == list(range(1, 8))


def _snapshot(out: Path):
    files = {}
    for p in sorted(out.iterdir()):
        if p.name == "meta.json":
            meta = json.loads(p.read_text())
            meta.pop("runtime")
            files[p.name] = json.dumps(meta, sort_keys=True).encode()
        else:
            files[p.name] = p.read_bytes()
    return files


@pytest.mark.parametrize("experiment", list(SMALL))
def test_determinism_across_threads(experiment, tmp_path):
    snaps = []
    for threads in ("1", "8", "1"):
        code, out = run([experiment, "--seed", "7", "--threads", threads, *SMALL[experiment]], tmp_path)
        assert code == 0
        snaps.append(_snapshot(out))
        for p in out.iterdir():
            p.unlink()
    assert snaps[0] == snaps[1] == snaps[2]


def test_console_script(tmp_path):
    out = tmp_path / "m"
    r = subprocess.run(
        [sys.executable, "-m", "scmc.cli", "manifold", "--particles", "50", "--stages", "3", "--out", str(out)],
        capture_output=True,
        text=True,
    )
    assert r.returncode == 0, r.stderr
    assert json.loads(r.stdout)["experiment"] == "manifold"
    assert (out / "trace.json").exists()
