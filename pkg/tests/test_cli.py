import json
import os

import pytest

from cablegff.cli import ConfigError, RunManifest, emit_report, load_config, main, Outputs

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_green_two_vertex(tmp_path, capsys):
    out = tmp_path / "g"
    assert main(["green", "--graph", "two-vertex", "--out-dir", str(out)]) == 0
    rows = (out / "green.csv").read_text().splitlines()
    assert rows[0] == "x,y,g"
    vals = {tuple(r.split(",")[:2]): float(r.split(",")[2]) for r in rows[1:]}
    assert vals[("0", "0")] == pytest.approx(2 / 3, abs=1e-12)
    assert vals[("0", "1")] == pytest.approx(1 / 3, abs=1e-12)
    man = json.loads((out / "manifest.json").read_text())
    assert man["verdict"] == "COMPLETE" and man["outputs"] == ["green.csv"]


def test_empty_config_exits_1(tmp_path, capsys):
    p = write(tmp_path, "e.ini", "")
    assert main(["--config", p]) == 1
    assert "empty" in capsys.readouterr().err


def test_schema_violation_names_line_and_field(tmp_path, capsys):
    p = write(tmp_path, "b.ini", "[run]\ncommand = green\n[graph]\nfamily = path\nlength = three\n")
    assert main(["--config", p]) == 1
    err = capsys.readouterr().err
    assert "b.ini:5" in err and "graph.length" in err
    p = write(tmp_path, "c.ini", "[run]\ncommand = scan\n[graph]\nfamily = path\n[params]\nLs = 1\nhs = 0\nzzz = 1\n")
    assert main(["--config", p]) == 1
    assert "c.ini:8" in capsys.readouterr().err
    p = write(tmp_path, "d.ini", "[run]\ncommand = scan\n[graph]\nfamily = path\n")
    assert main(["--config", p]) == 1
    assert "params.Ls" in capsys.readouterr().err
    p = write(tmp_path, "f.ini", "[nope]\nx = 1\n")
    assert main(["--config", p]) == 1


def test_missing_command_and_graph(capsys):
    assert main([]) == 1
    assert main(["green"]) == 1
    assert "graph.family" in capsys.readouterr().err


def test_runtime_error_exits_1(tmp_path, capsys):
    assert main(["capacity", "--graph", "two-vertex", "--set", "set=7", "--out-dir", str(tmp_path)]) == 1


def test_dry_run_prints_parameters(capsys, tmp_path):
    assert main(["scan", "--graph", "grid-with-killing", "--set", "graph.radius=4", "--set", "Ls=2,4",
                 "--set", "hs=-0.1,0", "--dry-run", "--out-dir", str(tmp_path / "x")]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["params"]["Ls"] == [2, 4] and d["params"]["theta"] == 0.05
    assert not (tmp_path / "x").exists()


@pytest.mark.parametrize("cmd", ["build-graph", "green", "kill-prob", "doob-check", "sample-gff", "sample-soup",
                                 "connection", "capacity"])
def test_every_command_has_dry_run(cmd, capsys):
    extra = {"sample-soup": ["--set", "u=1"], "connection": ["--set", "L=2"], "capacity": ["--set", "set=0"]}
    assert main([cmd, "--graph", "two-vertex", "--dry-run"] + extra.get(cmd, [])) == 0


def test_verify_iso_grid_config(tmp_path):
    out = tmp_path / "iso"
    code = main(["--config", os.path.join(ROOT, "configs", "grid3_iso.ini"), "--set", "N=20000",
                 "--out-dir", str(out)])
    assert code == 0
    rep = json.loads((out / "iso.json").read_text())
    assert set(rep) == {"0.25", "0.5", "1.0"} and all(r["passed"] for r in rep.values())


def test_determinism_byte_identical(tmp_path):
    args = ["sample-gff", "--graph", "grid-with-killing", "--set", "graph.radius=2", "--set", "n=50",
            "--set", "level=0", "--seed", "3"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "b")]) == 0
    for f in ("field.csv", "openness.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["config_hash"] == mb["config_hash"]


def _manifest(verdict, label):
    return RunManifest("scan", label, "h", "0", 1.0, "t", [], verdict, {"x": 1.0}, {"graph": {"family": "f"}})


def test_report_rows_and_exit_codes(tmp_path):
    code, rows = emit_report([_manifest("PASS", "one")], Outputs(str(tmp_path / "r1")))
    assert code == 0 and len(rows) == 1
    code, rows = emit_report([_manifest("PASS", "a"), _manifest("FAIL", "b")], Outputs(str(tmp_path / "r2")))
    assert code == 2 and len(rows) == 2
    assert len((tmp_path / "r2" / "summary.csv").read_text().splitlines()) == 3


def test_report_command_over_runs(tmp_path):
    for name, h in (("p", "0"), ("f", "10")):
        main(["connection", "--graph", "grid-with-killing", "--set", "graph.radius=4", "--set", "L=2",
              "--set", "N=200", "--set", "h=" + h, "--set", "pass_if_above=0.01",
              "--out-dir", str(tmp_path / "runs" / name)])
    code = main(["report", "--set", "manifests=%s" % (tmp_path / "runs"), "--out-dir", str(tmp_path / "rep")])
    assert code == 2
    assert len((tmp_path / "rep" / "summary.csv").read_text().splitlines()) == 3


def test_load_config_overrides(tmp_path):
    p = write(tmp_path, "a.ini", "[run]\ncommand = green\nseed = 4\n[graph]\nfamily = path\nlength = 5\n")
    cfg = load_config(p, seed=9, overrides=["graph.length=6", "points=0;1"])
    assert cfg.seed == 9 and cfg.graph["length"] == 6 and cfg.params["points"] == [0, 1]
    with pytest.raises(ConfigError):
        load_config(p, overrides=["nonsense"])
