import csv
import json
import shutil
import socket
import subprocess
import sys
import time
import urllib.request

import pytest

from ivoseval.cli import main
from ivoseval.session import read_log


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_synth(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d").glob("Images/*/*.jpg"))) == 20
    assert len(list((tmp_path / "d").glob("Annotations/*/*.png"))) == 20
    assert (tmp_path / "d" / "Splits" / "val.txt").read_text().split() == ["synth-000", "synth-001"]


def test_synth_unwritable(tmp_path):
    (tmp_path / "file").write_text("x")
    assert main(["synth", "--out", str(tmp_path / "file" / "d")]) == 1


def test_evaluate_oracle_on_three_sequences(tmp_path):
    data = tmp_path / "d"
    assert main(["synth", "--out", str(data), "--sequences", "3"]) == 0
    assert main(["evaluate", "--dataset", str(data), "--segmenter", "oracle", "--out", str(tmp_path / "o")]) == 0
    rows = _rows(tmp_path / "o" / "tracks.csv")
    assert [r["quality_at_budget"] for r in rows[:-1]] == ["1.000000"] * 3
    assert len(list((tmp_path / "o" / "sessions").glob("*.jsonl"))) == 3


def test_evaluate_static_times_increase(synth_root, tmp_path):
    out = tmp_path / "o"
    assert main(["evaluate", "--dataset", str(synth_root), "--segmenter", "static", "--out", str(out)]) == 0
    grid = [float(r["time_s"]) for r in _rows(out / "curve.csv")]
    assert len(grid) > 1 and all(b > a for a, b in zip(grid, grid[1:]))
    for log in (out / "sessions").glob("*.jsonl"):
        times = [r.cumulative_s for r in read_log(log).records]
        assert all(b > a for a, b in zip(times, times[1:]))


def test_evaluate_linear_is_reproducible(synth_root, tmp_path):
    args = ["evaluate", "--dataset", str(synth_root), "--segmenter", "linear", "--seed", "3",
            "--fixed-compute-s", "0.5", "--sequence", "synth-000"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    for name in ("reports/offline-synth-000.json", "sessions/offline-synth-000.jsonl", "curve.csv", "tracks.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_evaluate_errors(synth_root, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--dataset", str(synth_root), "--segmenter", "cnn", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert main(["evaluate", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 1
    assert main(["evaluate", "--dataset", str(synth_root), "--sequence", "bear", "--out", str(tmp_path / "o")]) == 1


def test_environment_overrides(synth_root, tmp_path, monkeypatch):
    monkeypatch.setenv("IVOSEVAL_MAX_INTERACTIONS", "1")
    monkeypatch.setenv("IVOSEVAL_SEGMENTER", "static")
    monkeypatch.setenv("IVOSEVAL_DATASET", str(synth_root))
    assert main(["evaluate", "--out", str(tmp_path / "o")]) == 0
    rows = _rows(tmp_path / "o" / "tracks.csv")
    assert {r["interactions"] for r in rows[:-1]} == {"1"}
    assert main(["evaluate", "--out", str(tmp_path / "p"), "--max-interactions", "2"]) == 0
    assert {r["interactions"] for r in _rows(tmp_path / "p" / "tracks.csv")[:-1]} == {"2"}
    monkeypatch.setenv("IVOSEVAL_MAX_INTERACTIONS", "lots")
    assert main(["evaluate", "--out", str(tmp_path / "q")]) == 2


def test_report_from_logs(synth_root, tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["evaluate", "--dataset", str(synth_root), "--segmenter", "static", "--sequence", "synth-000",
                 "--max-interactions", "3", "--out", str(out)]) == 0
    log = out / "sessions" / "offline-synth-000.jsonl"
    live = json.loads((out / "reports" / "offline-synth-000.json").read_text())
    assert main(["report", str(log), "--out", str(tmp_path / "r1")]) == 0
    single = _rows(tmp_path / "r1" / "tracks.csv")
    assert float(single[0]["final_jf"]) == pytest.approx(read_log(log).records[-1].overall, abs=1e-6)
    assert float(single[0]["quality_at_budget"]) == pytest.approx(live["quality_at_budget"], abs=1e-6)
    assert (tmp_path / "r1" / "tracks.csv").read_text() == (out / "tracks.csv").read_text()

    shutil.copy(log, tmp_path / "copy.jsonl")
    assert main(["report", str(log), str(tmp_path / "copy.jsonl"), "--out", str(tmp_path / "r2")]) == 0
    doubled = _rows(tmp_path / "r2" / "tracks.csv")[-1]
    assert doubled["quality_at_budget"] == single[-1]["quality_at_budget"]
    assert float(doubled["speed_total_s"]) == pytest.approx(2 * float(single[-1]["speed_total_s"]), abs=2e-3)

    lines = log.read_text().splitlines()
    (tmp_path / "cut.jsonl").write_text("\n".join(lines[:3] + [lines[3][:20]]) + "\n")
    capsys.readouterr()
    assert main(["report", str(tmp_path / "cut.jsonl")]) == 1
    assert "line 4" in capsys.readouterr().err
    assert main(["report", str(tmp_path / "empty_dir_that_is_missing")]) == 1


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_serve_answers_health(synth_root, tmp_path):
    port = _free_port()
    conf = tmp_path / "svc.conf"
    conf.write_text(f"dataset = {synth_root}\nport = {port}\ntokens = alice\nstate_dir = {tmp_path / 'st'}\n")
    proc = subprocess.Popen([sys.executable, "-m", "ivoseval", "serve", "--config", str(conf)],
                            stderr=subprocess.PIPE, text=True)
    try:
        for _ in range(100):
            try:
                with urllib.request.urlopen(f"http://127.0.0.1:{port}/health") as resp:
                    assert json.loads(resp.read())["status"] == "ok"
                    break
            except OSError:
                time.sleep(0.1)
        else:
            pytest.fail("service did not come up")
        # a second instance on the same port fails to bind
        second = subprocess.run([sys.executable, "-m", "ivoseval", "serve", "--config", str(conf)],
                                capture_output=True, text=True, timeout=30)
        assert second.returncode == 1
    finally:
        proc.terminate()
        _, err = proc.communicate(timeout=10)
    assert "GET /health" in err  # one log line per request


def test_serve_missing_dataset(tmp_path, capsys):
    conf = tmp_path / "svc.conf"
    conf.write_text(f"dataset = {tmp_path / 'gone'}\ntokens = alice\n")
    assert main(["serve", "--config", str(conf)]) == 1
    assert str(tmp_path / "gone") in capsys.readouterr().err


def test_run_against_service(running_service, synth_root, tmp_path, capsys):
    svc = running_service()
    args = ["run", "--endpoint", svc.url, "--token", "alice", "--dataset", str(synth_root),
            "--segmenter", "oracle", "--out", str(tmp_path / "r")]
    assert main(args) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 2 and all("turns=1" in line for line in out)
    assert len(list((tmp_path / "r").glob("*.json"))) == 2
    assert main(args[:4] + ["bogus"] + args[5:]) == 1
