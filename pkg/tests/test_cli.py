import csv
import os

import numpy as np
import pytest

from thermofsi.cli import build_parser, load_config, main, read_snapshot, verify


def _run(tmp_path, name, *extra):
    out = tmp_path / name
    code = main(["run", "--out", str(out), *extra])
    return code, out


def _termination(out):
    with open(out / "termination.txt", encoding="utf-8") as fh:
        return dict(line.split(": ", 1) for line in fh.read().splitlines())


@pytest.fixture(scope="module")
def rest_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("rest")
    return _run(tmp, "rest", "--preset", "rest", "--until", "0.1")


def test_rest_run_exits_zero(rest_run):
    code, out = rest_run
    assert code == 0
    info = _termination(out)
    assert info["reason"] == "time reached" and info["steps_total"] == "16"
    for name in ("config.ini", "ledger.csv", "ledger_schema.txt", "entropy.csv"):
        assert (out / name).is_file()


def test_verify_fresh_run(rest_run, capsys):
    _, out = rest_run
    ok, results = verify(str(out))
    assert ok, results
    assert main(["verify", str(out)]) == 0
    assert "PASS" in capsys.readouterr().out


def test_corrupted_energy_cell_fails_only_identity(rest_run, tmp_path):
    _, out = rest_run
    bad = tmp_path / "bad"
    bad.mkdir()
    for f in os.listdir(out):
        if os.path.isfile(out / f):
            (bad / f).write_bytes((out / f).read_bytes())
    with open(bad / "ledger.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    col = rows[0].index("dK")
    rows[3][col] = "1.0"
    with open(bad / "ledger.csv", "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(rows)
    ok, results = verify(str(bad))
    failed = [name for name, passed, _ in results if not passed]
    assert not ok and failed == ["energy identity"]
    assert main(["verify", str(bad)]) == 1


def test_verify_empty_dir(tmp_path, capsys):
    with pytest.raises(FileNotFoundError, match="no run found"):
        verify(str(tmp_path))
    assert main(["verify", str(tmp_path)]) == 1
    assert "no run found" in capsys.readouterr().out


def test_collar_hit_exit_code(tmp_path):
    code, out = _run(tmp_path, "collar", "--preset", "collar-hit")
    assert code == 2
    info = _termination(out)
    assert info["reason"] == "COLLAR_HIT"
    assert float(info["time"]) < 1.0
    assert np.isfinite(float(info["monitor_sup"]))


def test_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[time]\ntau = 0.01\nh = 0.075\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 4
    assert "window not divisible" in capsys.readouterr().err


def test_flag_precedence(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[time]\nt_end = 0.3\n[shell]\nkappa = 0.002\n")
    args = build_parser().parse_args(["run", "--preset", "conduction", "--config", str(cfg), "--out", "o",
                                      "--kappa", "0.004", "--lambda", "inf"])
    c = load_config(args)
    assert c.solver_freeze_velocity  # from the preset
    assert c.time_t_end == 0.3  # file beats preset
    assert c.shell_kappa == 0.004 and c.thermal_transmission == "inf"  # flags beat file


def test_determinism_bitwise(tmp_path):
    args = ["--preset", "conduction", "--until", "0.1", "--threads", "1", "--seed", "3"]
    _, a = _run(tmp_path, "a", *args)
    _, b = _run(tmp_path, "b", *args)
    assert (a / "ledger.csv").read_bytes() == (b / "ledger.csv").read_bytes()
    assert (a / "entropy.csv").read_bytes() == (b / "entropy.csv").read_bytes()


def test_snapshots_round_trip(tmp_path):
    cfg = tmp_path / "s.ini"
    cfg.write_text("[output]\nsnapshot_every = 4\n")
    code, out = _run(tmp_path, "snap", "--config", str(cfg), "--until", "0.1")
    assert code == 0
    snaps = sorted(os.listdir(out / "snapshots"))
    assert len(snaps) == 4
    data = read_snapshot(str(out / "snapshots" / snaps[-1]))
    assert data["theta"].shape == (256,) and data["eta"].shape == (32,)
    assert float(data["meta"]["time"]) == pytest.approx(0.1)


def test_presets_listing(capsys):
    assert main(["presets"]) == 0
    assert "shear-heating" in capsys.readouterr().out.split()
