import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from timeseed.cli import PRESETS, main, parse_config
from timeseed.exceptions import ConfigError
from timeseed.stationary import gamma_crit
from timeseed.sweep import load_grid, save_grid


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def write_json(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return str(path)


def test_simulate_fig1_header_and_rows(capsys):
    code, out, _ = run(capsys, "simulate", "--preset", "fig1", "--t-end", "5")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "t,mx_0,my_0,mz_0,mx_1,my_1,mz_1"
    assert len(lines) == 1 + 101
    assert [float(v) for v in lines[1].split(",")] == [0, 0, 0, 1, 0, 0, 1]


def test_simulate_single_ensemble_and_seed_override(tmp_path, capsys):
    cfg = write_json(tmp_path, {"network": {"omegas": [0.9]}, "integration": {"t_end": 1.0}})
    code, out, _ = run(capsys, "simulate", "--config", cfg, "--seed-override", "1,0,0")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "t,mx_0,my_0,mz_0"
    assert [float(v) for v in lines[1].split(",")] == [0, 1, 0, 0]


def test_simulate_is_deterministic(capsys):
    argv = ("simulate", "--preset", "fig1", "--t-end", "30", "--strength", "0.3")
    first = run(capsys, *argv)[1]
    assert run(capsys, *argv)[1] == first


def test_malformed_json_reports_offset(tmp_path, capsys):
    text = '{"network": {"omegas": [1.5, 0.9],}}'
    code, _, err = run(capsys, "simulate", "--config", write_json(tmp_path, text))
    assert code == 2
    assert f"byte offset {text.index(',}') + 1}" in err


@pytest.mark.parametrize(
    "doc, path",
    [
        ({"network": {"omegas": [1.5, -0.9]}}, "network.omegas[1]"),
        ({"network": {"omegas": [1.5, 0.9], "coupling": {"kind": "sideways"}}}, "network.coupling.kind"),
        ({"network": {"omegas": [1.5]}, "integration": {"t_end": -1}}, "integration.t_end"),
        ({"network": {"omegas": [1.5]}, "colour": 1}, "colour"),
    ],
)
def test_schema_errors_name_the_field(tmp_path, capsys, doc, path):
    code, _, err = run(capsys, "simulate", "--config", write_json(tmp_path, doc))
    assert code == 2
    assert path in err


def test_missing_network_and_bad_seed_override(capsys):
    assert run(capsys, "simulate")[0] == 2
    assert run(capsys, "simulate", "--preset", "fig1", "--seed-override", "0,0,1")[0] == 2
    assert run(capsys, "simulate", "--preset", "fig1", "--seed-override", "0,0,1;0,0,x")[0] == 2


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_validate(name):
    cfg = parse_config(PRESETS[name])
    assert cfg.params.n >= 2


def test_preset_parameters():
    assert parse_config(PRESETS["fig1"]).params.omegas.tolist() == [1.5, 0.9]
    assert parse_config(PRESETS["fig1"]).params.strength == 0.1
    fig3e = parse_config(PRESETS["fig3e"]).params
    np.testing.assert_allclose(fig3e.omegas, [1.5, 1.4875, 1.475, 1.4625, 1.45])
    assert fig3e.strength == 0.5
    assert parse_config(PRESETS["appD"]).params.kind.value == "coherent"
    assert parse_config(PRESETS["fig3a"]).params.omegas[0] == 1.15


def test_parse_config_error_path():
    with pytest.raises(ConfigError) as info:
        parse_config({"network": {"omegas": [1.0, 1.0]}, "spectrum": {"sizes": [6, 7]}})
    assert info.value.path.startswith("spectrum.sizes")


def test_spectrum_fit_needs_two_sizes(capsys):
    code, _, err = run(capsys, "spectrum", "--preset", "fig1", "--sizes", "6", "--fit")
    assert code == 2
    assert "at least two sizes" in err


def test_spectrum_small_ladder_with_fit_and_cross_check(capsys):
    code, out, _ = run(capsys, "spectrum", "--preset", "fig1", "--sizes", "4,6,8", "--fit", "--cross-check")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "strength,N,re_lambda1,im_lambda1,re_lambda2,im_lambda2"
    rows = [ln.split(",") for ln in lines[1:7]]
    assert [r[1] for r in rows] == ["4", "6", "8"] * 2
    assert float(rows[1][2]) == pytest.approx(-0.75295147708, abs=1e-10)
    assert float(rows[3][0]) == pytest.approx(gamma_crit(parse_config(PRESETS["fig1"]).params), abs=1e-11)
    fits = [json.loads(ln[len("# fit "):]) for ln in lines if ln.startswith("# fit ")]
    assert len(fits) == 2 and fits[0]["im"]["mu"] == 2
    check = [ln for ln in lines if ln.startswith("# cross-check")][0]
    fields = dict(part.split("=") for part in check.split()[2:])
    assert fields["N"] == "8"
    assert float(fields["max|dlambda1|"]) < 1e-7 and float(fields["max|dlambda|"]) < 1e-7


def test_spectrum_resource_cap(capsys):
    code, _, err = run(capsys, "spectrum", "--preset", "fig1", "--sizes", "60")
    assert code == 4
    assert "resource" in err


def test_spectrum_dense_cap_from_environment(capsys, monkeypatch):
    monkeypatch.setenv("TIMESEED_DENSE_CAP", "10")
    code, out, _ = run(capsys, "spectrum", "--preset", "fig1", "--sizes", "4", "--cross-check")
    assert code == 0
    assert "cross-check skipped" in out


def test_numerical_failure_exit_code(tmp_path, capsys):
    cfg = write_json(tmp_path, {"network": {"omegas": [1.5, 0.9]}, "integration": {"t_end": 100, "max_steps": 5}})
    code, _, err = run(capsys, "simulate", "--config", cfg)
    assert code == 3
    assert "numerical failure" in err


def test_sweep_to_file_and_resume(tmp_path, capsys):
    doc = {
        "network": {"omegas": [1.15, 1.0]},
        "integration": {"t_end": 60.0},
        "sweep": {"axis1": {"name": "strength", "start": 0.01, "stop": 0.2, "count": 3}, "metric": "DeltaObs"},
    }
    cfg = write_json(tmp_path, doc)
    out = tmp_path / "grid.csv"
    assert run(capsys, "sweep", "--config", cfg, "--out", str(out), "--threads", "2")[0] == 0
    full = load_grid(out)
    assert full.done
    partial = full.copy()
    partial.completed[1:] = False
    partial.values[1:] = np.nan
    save_grid(partial, out)
    assert run(capsys, "sweep", "--config", cfg, "--out", str(out), "--resume")[0] == 0
    assert load_grid(out) == full
    code, text, _ = run(capsys, "sweep", "--config", cfg)
    assert code == 0 and text == out.read_text()
    assert run(capsys, "sweep", "--config", cfg, "--resume")[0] == 2


def test_crit_fig1(capsys):
    code, out, _ = run(capsys, "crit", "--preset", "fig1")
    assert code == 0
    report = json.loads(out)
    assert report["analytic"] == pytest.approx(0.714285714286, abs=1e-11)
    assert abs(report["bisection"] - report["analytic"]) < 1e-3
    assert report["delta"] == pytest.approx(abs(report["bisection"] - report["analytic"]))


def test_crit_without_closed_form(tmp_path, capsys):
    cfg = write_json(tmp_path, {"network": {"omegas": [1.5, 0.9, 0.8]}, "crit": {"lo": 0.1, "hi": 2.0, "tol": 0.01}})
    code, out, _ = run(capsys, "crit", "--config", cfg)
    assert code == 0
    report = json.loads(out)
    assert report["analytic"] == "n/a" and report["delta"] == "n/a"
    assert 0.1 < report["bisection"] < 2.0
    assert run(capsys, "crit", "--preset", "fig1", "--strength", "0.1", "--config",
               write_json(tmp_path, {"crit": {"lo": 0.0, "hi": 0.2}}, "b.json"))[0] == 2


@pytest.mark.skipif(shutil.which("timeseed") is None, reason="console script not installed")
def test_console_script_survives_closed_pipe():
    proc = subprocess.run(
        "timeseed simulate --preset fig1 --t-end 200 | head -n 3",
        shell=True, capture_output=True, text=True, timeout=120,
    )
    assert proc.stdout.splitlines()[0].startswith("t,mx_0")
    assert "Traceback" not in proc.stderr


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "timeseed.cli", "crit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--preset" in proc.stdout
