import csv
import io
import json
import math
import socket
import subprocess
import sys
import time

import numpy as np
import pytest

from wcps.cli import main
from wcps.io import read_timetags


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def simulate(capsys, out, *extra):
    code, stdout, err = run(capsys, "simulate", "--out", out, *extra)
    assert code == 0, err
    return json.loads(stdout)


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_simulate_zero_duration_gives_empty_valid_files(tmp_path, capsys):
    d = tmp_path / "z"
    res = simulate(capsys, d, "--duration", 0)
    assert res["counts"] == {"a": 0, "b": 0}
    for name in ("a.wcpt", "b.wcpt"):
        assert (d / name).stat().st_size == 24
        assert len(read_timetags(d / name)) == 0


def test_simulate_is_deterministic(tmp_path, capsys):
    for name in ("x", "y"):
        simulate(capsys, tmp_path / name, "--duration", 0.5, "--seed", 7, "--rw-step-ppb", 3.3)
    for f in ("a.wcpt", "b.wcpt"):
        assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()
    tx = json.loads((tmp_path / "x" / "truth.json").read_text())
    ty = json.loads((tmp_path / "y" / "truth.json").read_text())
    assert tx["truth"] == ty["truth"]
    simulate(capsys, tmp_path / "z", "--duration", 0.5, "--seed", 8)
    assert (tmp_path / "z" / "a.wcpt").read_bytes() != (tmp_path / "x" / "a.wcpt").read_bytes()


def test_simulate_singles_rates(tmp_path, capsys):
    res = simulate(capsys, tmp_path / "s", "--preset", "paper-fig1", "--duration", 2)
    for ch, rate in (("a", 192e3), ("b", 182e3)):
        assert abs(res["counts"][ch] - rate * 2) <= 3 * math.sqrt(rate * 2)


def test_simulate_rejects_unphysical_source(tmp_path, capsys):
    code, _, err = run(capsys, "simulate", "--out", tmp_path / "u", "--s1-kcps", 1, "--s2-kcps", 20000,
                       "--duration", 0.1)
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "parameter"


def test_truth_sidecar_tracks_clock(tmp_path, capsys):
    d = tmp_path / "t"
    simulate(capsys, d, "--duration", 1, "--du-ppb", 100, "--offset-ns", 500)
    truth = json.loads((d / "truth.json").read_text())["truth"]
    tau = np.asarray(truth["tau_ps"], dtype=float)
    assert tau[0] == pytest.approx(500_000, abs=1)
    assert tau[-1] - tau[0] == pytest.approx(100e-9 * 1e12, rel=1e-6)
    assert all(u == pytest.approx(100e-9) for u in truth["du"])


def test_g2_outputs_and_plot(tmp_path, capsys):
    d = tmp_path / "g"
    simulate(capsys, d, "--preset", "paper-fig1", "--duration", 3)
    base = tmp_path / "hist"
    code, out, err = run(capsys, "g2", d / "a.wcpt", d / "b.wcpt", "--out", base, "--plot")
    assert code == 0, err
    summary = json.loads(out)
    assert summary["fit"]["g2_0"] == pytest.approx(1.42, abs=0.1)
    rows = (base.with_suffix(".csv")).read_text().splitlines()
    assert rows[0].startswith("# ") and rows[1] == "lag_ps,counts,g2,g2_err"
    assert base.with_suffix(".png").stat().st_size > 0


def test_find_recovers_4ppm(tmp_path, capsys):
    d = tmp_path / "f"
    simulate(capsys, d, "--duration", 3, "--du-ppb", 4000, "--offset-ns", 25_000, "--seed", 1)
    code, out, err = run(capsys, "find", d / "a.wcpt", d / "b.wcpt", "--format", "json")
    assert code == 0, err
    res = json.loads(out)
    assert res["result"]["accepted"]
    assert abs(res["du"] - 4e-6) <= 50e-9
    truth = json.loads((d / "truth.json").read_text())["truth"]
    true_tau = np.interp(res["t_ref_ps"], truth["t_b_ps"], truth["tau_ps"])
    assert abs(res["tau_ps"] - true_tau) <= 360_000


def test_find_zero_offset(tmp_path, capsys):
    d = tmp_path / "f0"
    simulate(capsys, d, "--duration", 3, "--seed", 2)
    code, out, err = run(capsys, "find", d / "a.wcpt", d / "b.wcpt", "--du-range-ppb", 200)
    assert code == 0, err
    res = json.loads(out)
    assert abs(res["tau_ps"]) <= res["result"]["levels"][-1]["grid"]["delta_t_ps"]


def test_find_uncorrelated_is_not_found(tmp_path, capsys):
    d = tmp_path / "un"
    simulate(capsys, d, "--duration", 1.2, "--uncorrelated")
    code, _, err = run(capsys, "find", d / "a.wcpt", d / "b.wcpt", "--du-range-ppb", 200)
    assert code == 2
    e = json.loads(err.strip().splitlines()[-1])
    assert e["error"] == "not_found"
    assert e["best"]["accepted"] is False


def test_track_preset_with_truth(tmp_path, capsys):
    d = tmp_path / "tr"
    simulate(capsys, d, "--preset", "paper-fig4", "--duration", 20)
    base = tmp_path / "log"
    code, out, err = run(capsys, "track", d / "a.wcpt", d / "b.wcpt", "--preset", "paper-fig4",
                         "--truth", d / "truth.json", "--out", base, "--plot")
    assert code == 0, err
    s = json.loads(out)["summary"]
    assert s["rms_error_ns"] <= 15 and s["lost"] == []
    rows = list(csv.reader(io.StringIO(base.with_suffix(".csv").read_text().split("\n", 1)[1])))
    assert rows[0] == ["t_s", "tau_ps", "du_ppb", "pairs_per_s", "accidentals_per_s"]
    assert len(rows) - 1 == s["samples"]
    assert base.with_suffix(".png").stat().st_size > 0


def test_track_loss_exits_with_report(tmp_path, capsys):
    d = tmp_path / "lost"
    simulate(capsys, d, "--preset", "paper-fig4", "--duration", 20)
    code, _, err = run(capsys, "track", d / "a.wcpt", d / "b.wcpt", "--preset", "paper-fig4", "--beta-ms", 1)
    assert code == 3
    e = json.loads(err.strip().splitlines()[-1])
    assert e["error"] == "tracking_lost" and e["lost_at_ps"] > 0


def test_track_needs_second_source(tmp_path, capsys):
    d = tmp_path / "one"
    simulate(capsys, d, "--duration", 0.2)
    code, _, err = run(capsys, "track", d / "a.wcpt")
    assert code == 2 and json.loads(err.strip())["error"] == "parameter"


def test_live_track_equals_file_track(tmp_path, capsys):
    d = tmp_path / "live"
    simulate(capsys, d, "--duration", 4, "--du-ppb", 10, "--seed", 3)
    code, offline, err = run(capsys, "track", d / "a.wcpt", d / "b.wcpt")
    assert code == 0, err
    port = free_port()
    tracker = subprocess.Popen(
        [sys.executable, "-m", "wcps", "track", str(d / "a.wcpt"), "--listen", str(port)],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    peer_out = None
    for _ in range(100):
        peer = subprocess.run([sys.executable, "-m", "wcps", "peer", str(d / "b.wcpt"), "--connect", str(port)],
                              capture_output=True, text=True)
        if peer.returncode == 0:
            peer_out = peer.stdout
            break
        time.sleep(0.1)
    live, terr = tracker.communicate(timeout=120)
    assert tracker.returncode == 0, terr
    assert live == offline
    served = list(csv.reader(io.StringIO(peer_out)))
    assert served[0] == ["tau_ps", "du"] and len(served) == len(offline.splitlines())


def test_surface_without_signal_is_chance(capsys):
    code, out, err = run(capsys, "surface", "--q", 8, 12, "--delta-t-ns", 64, 1024, "--c-cps", 0,
                         "--trials", 2000, "--format", "json")
    assert code == 0, err
    for row in json.loads(out)["rows"]:
        assert row["prob"] <= 1 / (1 << row["q"])


def test_surface_csv_with_normal_column(tmp_path, capsys):
    path = tmp_path / "s.csv"
    code, _, err = run(capsys, "surface", "--preset", "paper-fig3", "--q", 16, 19, "--delta-t-ns", 64, 128,
                       "--trials", 1000, "--normal", "--out", path, "--plot")
    assert code == 0, err
    lines = path.read_text().splitlines()
    meta = json.loads(lines[0][2:])
    assert meta["seed"] == 0 and meta["tool"] == "wcps"
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 4
    for r in rows:
        assert float(r["prob_normal"]) >= float(r["prob"])
        assert float(r["ci_low"]) <= float(r["prob_mc"]) <= float(r["ci_high"])
    assert path.with_suffix(".png").exists()


def test_rerun_reproduces_bitwise(tmp_path, capsys):
    path = tmp_path / "s.json"
    code, _, _ = run(capsys, "surface", "--q", 10, "--delta-t-ns", 256, "--trials", 500, "--seed", 5,
                     "--format", "json", "--out", path)
    assert code == 0
    first = path.read_bytes()
    path.unlink()
    code, _, _ = run(capsys, "rerun", path.with_name("missing.json"))
    assert code == 1
    (tmp_path / "copy.json").write_bytes(first)
    code, _, _ = run(capsys, "rerun", tmp_path / "copy.json")
    assert code == 0
    assert path.read_bytes() == first


def test_rerun_of_simulation(tmp_path, capsys):
    d = tmp_path / "r"
    simulate(capsys, d, "--duration", 0.3, "--seed", 4)
    before = (d / "a.wcpt").read_bytes()
    (d / "a.wcpt").unlink()
    (tmp_path / "truth.json").write_bytes((d / "truth.json").read_bytes())
    code, _, _ = run(capsys, "rerun", tmp_path / "truth.json")
    assert code == 0
    assert (d / "a.wcpt").read_bytes() == before


def test_errors_are_json(tmp_path, capsys):
    code, _, err = run(capsys, "find", tmp_path / "nope.wcpt", tmp_path / "nope.wcpt")
    assert code == 1 and json.loads(err.strip())["error"] == "FileNotFoundError"
    bad = tmp_path / "bad.wcpt"
    bad.write_bytes(b"XXXX" + bytes(20))
    code, _, err = run(capsys, "g2", bad, bad)
    e = json.loads(err.strip())
    assert code == 2 and e["error"] == "parse" and e["offset"] == 0
    assert e["actual"] == "XXXX"
    code, _, err = run(capsys, "find", "--q")
    assert code == 2 and json.loads(err.strip().splitlines()[-1])["error"] == "usage"


def test_module_entry_point_version():
    r = subprocess.run([sys.executable, "-m", "wcps", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("wcps ")
