import csv
import io

import pytest

from ftproxy.cli import main


@pytest.fixture
def state(tmp_path):
    return str(tmp_path / "state.json")


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_launch_default_two_up_links(capsys, state):
    code, out, _ = run(capsys, "launch", "--state", state)
    assert code == 0
    assert out.count(" UP") == 2 and "robot_links=2 up=2" in out


def test_launch_gateway_topology(capsys, state, tmp_path):
    spec = tmp_path / "c.yaml"
    spec.write_text("services:\n  - name: det\n    replicas:\n"
                    "      - {region: a}\n      - {region: b}\n      - {region: c}\ntopology: gateway\n")
    code, out, _ = run(capsys, "launch", str(spec), "--state", state)
    assert code == 0
    assert "robot_links=1" in out and out.count("gateway") == 3


def test_launch_empty_services_rejected(capsys, state, tmp_path):
    spec = tmp_path / "c.yaml"
    spec.write_text("services: []\n")
    code, _, err = run(capsys, "launch", str(spec), "--state", state)
    assert code == 2 and "services" in err


def test_scale_round_trip(capsys, state):
    run(capsys, "launch", "--state", state)
    code, out, _ = run(capsys, "scale", "up", "1", "--state", state)
    assert code == 0 and out.count("PROVISIONING") == 1 and "desired=3" in out
    code, out, _ = run(capsys, "scale", "down", "1", "--state", state)
    assert code == 0 and "desired=2" in out
    code, _, err = run(capsys, "scale", "down", "2", "--state", state)
    assert code == 1 and "at least one" in err


def test_scale_without_state(capsys, state):
    code, _, err = run(capsys, "scale", "up", "--state", state)
    assert code == 2 and "launch" in err


def test_size_worked_example(capsys):
    code, out, _ = run(capsys, "size", "--uptime", "900", "--recovery", "20", "--target", "0.0005", "--format", "csv")
    row = next(csv.DictReader(io.StringIO(out)))
    assert row["replicas"] == "2" and float(row["p_system"]) == pytest.approx((20 / 920) ** 2, rel=1e-5)


def test_size_prices(capsys):
    code, out, _ = run(capsys, "size", "--price", "3.58", "--price", "0.84", "--price", "0.84")
    assert code == 0 and "2.13x" in out


def test_size_loose_target(capsys):
    code, out, _ = run(capsys, "size", "--uptime", "49", "--recovery", "1", "--target", "0.9", "--format", "csv")
    assert next(csv.DictReader(io.StringIO(out)))["replicas"] == "1"


def test_size_invalid(capsys):
    code, _, err = run(capsys, "size", "--uptime", "1", "--recovery", "1", "--target", "1.5")
    assert code == 2


def test_simulate_bundled_alias_writes_outputs(capsys, tmp_path):
    out_dir = tmp_path / "o"
    code, out, _ = run(capsys, "simulate", "slowdown.yamlish", "--out", str(out_dir))
    assert code == 0 and out.startswith("regional-slowdown:")
    assert (out_dir / "requests.csv").exists() and (out_dir / "summary.csv").exists()


def test_simulate_same_seed_identical_files(capsys, tmp_path):
    for d in ("a", "b"):
        assert run(capsys, "simulate", "contention", "--out", str(tmp_path / d))[0] == 0
    for name in ("requests.csv", "summary.csv", "events.log", "cdf.csv", "histogram.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_env_seed(capsys, tmp_path, monkeypatch):
    run(capsys, "simulate", "contention", "--out", str(tmp_path / "a"))
    monkeypatch.setenv("FTPROXY_SEED", "12345")
    run(capsys, "simulate", "contention", "--out", str(tmp_path / "b"))
    assert (tmp_path / "a" / "requests.csv").read_bytes() != (tmp_path / "b" / "requests.csv").read_bytes()


def test_simulate_bad_schema(capsys, tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("schema_version: 7\n")
    code, _, err = run(capsys, "simulate", str(p))
    assert code == 2 and "schema_version" in err


def test_simulate_compare_csv(capsys):
    code, out, _ = run(capsys, "simulate", "regional-slowdown", "--compare", "--format", "csv")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["scenario"] for r in rows] == ["regional-slowdown", "regional-slowdown[single:west1]",
                                             "regional-slowdown[single:west2]"]


def test_report_views(capsys, tmp_path):
    run(capsys, "simulate", "preemption-timeline", "--out", str(tmp_path))
    code, out, _ = run(capsys, "report", str(tmp_path), "--view", "timeline")
    assert "RUNNING->PREEMPTED" in out and "RELAUNCHING->RUNNING" in out
    code, out, _ = run(capsys, "report", str(tmp_path), "--view", "histogram")
    assert code == 0 and "#" in out
    code, out, _ = run(capsys, "report", str(tmp_path), "--view", "summary")
    assert out.startswith("mean_ms")
    code, _, err = run(capsys, "report", str(tmp_path / "missing"))
    assert code == 2


def test_unknown_scenario(capsys):
    code, _, err = run(capsys, "simulate", "no-such-thing")
    assert code == 2 and "bundled" in err


def test_wall_launch(capsys, state):
    code, out, _ = run(capsys, "launch", "--wall", "--state", state)
    assert code == 0 and out.count(" UP ") == 2 and "OK" in out
