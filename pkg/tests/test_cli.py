import json

import pytest

from cpsim.cli import EXIT_CONFIG, EXIT_FAULT, EXIT_NOT_CONVERGED, EXIT_OK, main

SHORT = ["--set", "run.t_end_s=2"]
PER_METHOD = {"trajectory.csv", "grid_steps.csv", "spdc_arrivals.csv", "commands.csv", "app_log.csv",
              "report.json", "timings.json"}


@pytest.fixture(scope="module")
def c2_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("c2")
    assert main(["run", "--config", "c2", "--out", str(out), *SHORT]) == EXIT_OK
    return out


def test_run_writes_full_artifact_set(c2_out):
    assert {p.name for p in c2_out.iterdir()} == {"scenario.yaml", "topology.csv", "agreement.csv",
                                                  "self_consistent", "cosim"}
    for method in ("self_consistent", "cosim"):
        names = {p.name for p in (c2_out / method).iterdir()}
        assert PER_METHOD <= names
        assert any(n.startswith("delay_trace_") for n in names)
    assert (c2_out / "self_consistent" / "delay_model_0.csv").exists()
    head = (c2_out / "self_consistent" / "trajectory.csv").read_text().splitlines()[0]
    assert head == "t_ns,bus,V_pu,theta_rad,f_hz"


def test_compare_command(c2_out, capsys):
    a = str(c2_out / "self_consistent" / "report.json")
    b = str(c2_out / "cosim" / "report.json")
    assert main(["compare", a, a, "--tol-ms", "0"]) == EXIT_OK
    assert main(["compare", a, b, "--tol-ms", "0.02"]) == EXIT_OK
    assert main(["compare", a, b, "--perceived", "--tol-ms", "1"]) == EXIT_OK
    assert main(["compare", a, b, "--perceived", "--tol-ms", "0.001"]) == 1
    assert "max |delta|" in capsys.readouterr().out


def test_compare_mismatch(c2_out, tmp_path):
    d = json.loads((c2_out / "cosim" / "report.json").read_text())
    d["scenario"] = "other"
    (tmp_path / "x.json").write_text(json.dumps(d))
    assert main(["compare", str(c2_out / "cosim" / "report.json"), str(tmp_path / "x.json")]) == EXIT_CONFIG


def test_config_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    from cpsim.config import dump_config, read_config
    bad.write_text(dump_config(read_config("c1")).replace("- 49.96\n  - 49.92", "- 49.92\n  - 49.96"))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "control.thresholds_hz" in capsys.readouterr().err
    assert main(["run", "--config", "c1", "--set", "nonsense"]) == EXIT_CONFIG


def test_not_converged_exit(tmp_path):
    rc = main(["run", "--config", "c1", "--method", "self_consistent", "--out", str(tmp_path),
               "--set", "run.max_iter=1", *SHORT])
    assert rc == EXIT_NOT_CONVERGED
    rep = json.loads((tmp_path / "self_consistent" / "report.json").read_text())
    assert rep["converged"] is False and rep["iterations"] == 1


def test_simulation_fault_exit(tmp_path, capsys):
    # isolating bus 31 before the probe drops its command
    rc = main(["run", "--config", "c2", "--method", "self_consistent", "--out", str(tmp_path), *SHORT,
               "--set", "events.link_failures=[{bus_a: 6, bus_b: 31, at_s: 0.1}]"])
    assert rc == EXIT_FAULT
    assert "ProbeDropped" in capsys.readouterr().err


def test_bench_table(tmp_path):
    rc = main(["bench", "--config", "c2", "--precisions", "10", "--reps", "1", "--out", str(tmp_path), *SHORT])
    assert rc == EXIT_OK
    rows = (tmp_path / "bench.csv").read_text().splitlines()
    assert rows[0] == "method,time_precision_ms,wall_clock_s,iterations,sync_steps,reps,low_confidence"
    assert [r.split(",")[0] for r in rows[1:]] == ["self_consistent", "cosim"]
    assert all(r.endswith("True") for r in rows[1:])
