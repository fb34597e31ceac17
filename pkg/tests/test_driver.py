import json

import numpy as np
import pytest

from levyscale.driver import (
    CSV_HEADER,
    DEFAULTS,
    JSON_KEYS,
    RunManifest,
    main,
    parse_config,
    read_report,
    run_command,
    write_report,
)
from levyscale.errors import ConfigurationError, ScheduleError
from levyscale.harness import ErrorReport, ErrorRow
from levyscale.stats import RateFit

SMALL = {
    "eps_grid": [0.125, 0.0625, 0.03125],
    "reps": 60,
    "mom_groups": 10,
    "refine": False,
}


def _last_json(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


def test_minimal_config_defaults():
    cfg = parse_config('{"model":"linear","regime":"R2","eps_grid":[0.125,0.0625]}')
    assert (cfg.T, cfg.p, cfg.kappa_cfl, cfg.seed) == (1.0, 1.0, 20.0, 0)
    assert cfg.schedule.as_dict() == {"regime": "R2", "e": 0.625, "g": 0.125, "b": 0.5}
    # 2000 is rounded up to a multiple of the 30 median-of-means groups
    assert cfg.reps == 2010


def test_r4_relation_named():
    with pytest.raises(ScheduleError, match="bexp = g"):
        parse_config('{"regime":"R4","e":1,"g":0.5,"b":0.25}')


def test_p_too_large():
    with pytest.raises(ConfigurationError, match=r"p must be < min\(alpha1, alpha2\)") as info:
        parse_config('{"p":1.6}')
    assert info.value.key == "p"


def test_unknown_key_and_malformed():
    with pytest.raises(ConfigurationError) as info:
        parse_config('{"bogus": 1}')
    assert info.value.key == "bogus"
    with pytest.raises(ConfigurationError):
        parse_config("{not json")


def _report():
    rows = [ErrorRow(2.0**-k, 0.1 / k, 0.01, 0.3, "R1", "p=1") for k in (3, 4, 5)]
    fits = {"p=1": RateFit(0.2, -1.0, 0.99, (0.1, 0.3), 3)}
    return ErrorReport("strong", "R1", rows, fits, 5 / 24, {"seed": 0})


def test_report_roundtrip(tmp_path):
    rep = _report()
    write_report(rep, tmp_path / "r.json")
    back = read_report(tmp_path / "r.json")
    assert back.rows == rep.rows and back.fits == rep.fits
    assert back.predictor_slope == rep.predictor_slope
    assert set(json.loads((tmp_path / "r.json").read_text())) == set(JSON_KEYS)
    write_report(rep, tmp_path / "r.csv")
    assert read_report(tmp_path / "r.csv").rows == rep.rows


def test_csv_header(tmp_path):
    write_report(_report(), tmp_path / "r.csv")
    first = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert first == "eps,error,spread,predictor,regime,stat" == ",".join(CSV_HEADER)


def test_validate_command(capsys):
    status, manifest = run_command(["validate", "--model", "linear"])
    doc = _last_json(capsys)
    assert status == 0
    assert doc["model"] == "linear" and doc["overall"] in ("pass", "warn")
    assert manifest.defaults == json.loads(json.dumps(DEFAULTS))


def test_strong_r3_rejected(capsys):
    assert main(["strong-rate", "--regime", "R3"]) == 2
    doc = _last_json(capsys)
    assert "leads to contradictions again" in doc["message"]


def test_bad_config_exit_code(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text('{"regime":"R4","e":1,"g":0.5,"b":0.25}')
    assert main(["weak-rate", "--config", str(path)]) == 2
    assert _last_json(capsys)["key"] == "b"
    assert main(["nonsense"]) == 2


def test_strong_rate_deterministic(tmp_path, capsys):
    cfg = tmp_path / "r1.json"
    cfg.write_text(json.dumps(SMALL))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        status, manifest = run_command(["strong-rate", "--config", str(cfg), "--out", str(out)])
        assert status == 0
        for path in manifest.artifacts:
            assert (tmp_path / name / path.split("/")[-1]).exists()
        outs.append(out)
    for fname in ("strong_R1.csv", "strong_R1.json"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()
    manifest_doc = json.loads((outs[0] / "manifest.json").read_text())
    assert manifest_doc["config"]["reps"] == 60
    assert "strong-rate" in manifest_doc["phases"]


def test_threads_env_fallback(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL))
    monkeypatch.setenv("LEVYSCALE_THREADS", "2")
    status, manifest = run_command(["strong-rate", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert status == 0 and manifest.config["threads"] == 2
    single = (tmp_path / "o" / "strong_R1.csv").read_bytes()
    monkeypatch.setenv("LEVYSCALE_THREADS", "1")
    run_command(["strong-rate", "--config", str(cfg), "--out", str(tmp_path / "p")])
    assert (tmp_path / "p" / "strong_R1.csv").read_bytes() == single


def test_simulate_and_corrector_commands(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"eps_grid": [0.25]}))
    status, _ = run_command(["simulate", "--config", str(cfg), "--out", str(tmp_path)])
    assert status == 0
    lines = (tmp_path / "path.csv").read_text().splitlines()
    assert lines[0] == "t,x,y" and len(lines) > 2
    cache = tmp_path / "cache"
    status, _ = run_command(["corrector", "--out", str(tmp_path), "--cache", str(cache)])
    assert status == 0
    first = (tmp_path / "corrector.csv").read_text()
    run_command(["corrector", "--out", str(tmp_path), "--cache", str(cache)])
    assert (tmp_path / "corrector.csv").read_text() == first
    u = np.loadtxt(tmp_path / "corrector.csv", delimiter=",", skiprows=1)
    # linear benchmark at x0 = 0.5: u = y - 0.25
    np.testing.assert_allclose(u[:, 1], u[:, 0] - 0.25, atol=1e-2)


def test_invariant_command(tmp_path, capsys):
    status, manifest = run_command(["invariant", "--out", str(tmp_path)])
    assert status == 0
    doc = _last_json(capsys)
    assert abs(doc["rate"] - 1.0) < 0.02
    assert (tmp_path / "ensemble.csv").exists()


def test_manifest_write(tmp_path):
    m = RunManifest(command="x", config={"a": 1})
    with m.phase("p"):
        pass
    path = m.write(tmp_path)
    doc = json.loads(open(path).read())
    assert doc["command"] == "x" and "p" in doc["phases"] and doc["version"]
