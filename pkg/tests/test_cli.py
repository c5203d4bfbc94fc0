"""End-to-end runner checks: exit codes, config precedence, deterministic
artifacts, and the CSV/JSON output contract."""

import hashlib
import json
import math
import subprocess
import sys
from pathlib import Path

import pytest

from qfeedback.cli import main
from qfeedback.linalg import DensityMatrix, density_to_json

REPO = Path(__file__).resolve().parents[1]
MIXED = str(REPO / "fixtures" / "qubit_mixed.json")
PLUS = str(REPO / "fixtures" / "qubit_plus.json")
ZERO = str(REPO / "fixtures" / "qubit_zero.json")


def _run(capsys, argv):
    code = main(argv)
    captured = capsys.readouterr()
    summary = json.loads(captured.out) if captured.out.strip() else None
    err = json.loads(captured.err) if captured.err.strip() else None
    return code, summary, err


def _tilted_qubit(path: Path) -> str:
    theta = math.pi / 3
    rho = DensityMatrix.pure([math.cos(theta / 2), math.sin(theta / 2)])
    path.write_text(json.dumps(density_to_json(rho)))
    return str(path)


def test_measure_writes_summary_and_csv(tmp_path, capsys):
    code, summary, _ = _run(
        capsys,
        ["measure", "--rho", MIXED, "--N", "50", "--delta", "5", "--trials", "8",
         "--seed", "3", "--out", str(tmp_path)],
    )
    assert code == 0
    assert summary["scenario"] == "measure"
    assert summary["seed"] == 3
    assert summary["trials"] == 8
    data = (tmp_path / "measure.csv").read_bytes()
    assert data.startswith(b"trial,outcome\r\n")
    assert data.count(b"\r\n") == 9
    # floats are serialized at full precision
    value = data.split(b"\r\n")[1].split(b",")[1].decode()
    assert format(float(value), ".17g") == value


def test_reruns_and_thread_counts_are_byte_identical(tmp_path, capsys):
    digests = []
    for sub, threads in (("a", "1"), ("b", "4"), ("c", "4")):
        out = tmp_path / sub
        code, _, _ = _run(
            capsys,
            ["measure", "--rho", MIXED, "--N", "100", "--delta", "10",
             "--trials", "12", "--seed", "11", "--threads", threads, "--out", str(out)],
        )
        assert code == 0
        digests.append(hashlib.sha256((out / "measure.csv").read_bytes()).hexdigest())
    assert digests[0] == digests[1] == digests[2]


def test_config_values_apply_but_flags_win(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trials": 4, "delta": 5.0, "rho": MIXED, "n_systems": 50}))
    code, summary, _ = _run(
        capsys,
        ["measure", "--config", str(cfg), "--trials", "6", "--out", str(tmp_path)],
    )
    assert code == 0
    assert summary["trials"] == 6
    rows = (tmp_path / "measure.csv").read_bytes().strip().split(b"\r\n")
    assert len(rows) == 7


def test_unknown_config_key_is_a_usage_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trails": 4}))
    code, _, err = _run(capsys, ["measure", "--config", str(cfg), "--out", str(tmp_path)])
    assert code == 2
    assert "not recognized" in err["error"]


def test_malformed_config_is_a_usage_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("[1, 2")
    code, _, err = _run(capsys, ["measure", "--config", str(cfg), "--out", str(tmp_path)])
    assert code == 2
    assert err is not None


def test_invalid_ensemble_size_is_a_usage_error(tmp_path, capsys):
    code, _, err = _run(
        capsys, ["measure", "--rho", MIXED, "--N", "0", "--out", str(tmp_path)]
    )
    assert code == 2
    assert "system" in err["error"]


def test_unstable_integration_exits_with_diagnostics(tmp_path, capsys):
    rho = _tilted_qubit(tmp_path / "tilted.json")
    code, _, err = _run(
        capsys,
        ["nls", "--rho", rho, "--gz", "40", "--dt", "0.002", "--t", "5",
         "--out", str(tmp_path)],
    )
    assert code == 3
    assert "drift_rate" in err["diagnostics"]


def test_output_path_collision_is_an_io_error(tmp_path, capsys):
    blocker = tmp_path / "not_a_dir"
    blocker.write_text("occupied")
    code, _, err = _run(
        capsys,
        ["measure", "--rho", MIXED, "--N", "10", "--trials", "2", "--out", str(blocker)],
    )
    assert code == 4
    assert err is not None


def test_unknown_flag_exits_like_argparse(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["measure", "--bogus", "--out", str(tmp_path)])
    assert exc.value.code == 2
    capsys.readouterr()


def test_out_env_var_sets_default_directory(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("QFEEDBACK_OUT", str(tmp_path))
    code, summary, _ = _run(
        capsys, ["measure", "--rho", MIXED, "--N", "10", "--delta", "3", "--trials", "2"]
    )
    assert code == 0
    assert (tmp_path / "measure.csv").exists()
    assert summary["csv"] == str(tmp_path / "measure.csv")


def test_list_policies_reports_catalog(tmp_path, capsys):
    code, summary, _ = _run(capsys, ["list-policies", "--out", str(tmp_path)])
    assert code == 0
    assert "mean_field_bloch" in summary["policies"]
    assert "kicked_nonlinear_top" in summary["policies"]
    for entry in summary["policies"].values():
        assert set(entry) >= {"description", "kind", "parameters"}


def test_tomo_exact_reconstructs_input(tmp_path, capsys):
    code, summary, _ = _run(
        capsys,
        ["tomo", "--rho", MIXED, "--N", "100", "--trials", "2", "--exact",
         "--out", str(tmp_path)],
    )
    assert code == 0
    assert summary["median_trace_distance"] <= 1e-10


def test_feedback_exact_preserves_purity(tmp_path, capsys):
    code, summary, _ = _run(
        capsys,
        ["feedback", "--rho", PLUS, "--policy", "mean_field_bloch", "--gz", "1",
         "--t", "0.5", "--exact", "--out", str(tmp_path)],
    )
    assert code == 0
    assert summary["final_purity"] == pytest.approx(1.0, abs=1e-9)
    header = (tmp_path / "feedback.csv").read_bytes().split(b"\r\n")[0]
    assert header == b"t,rho_00_re,rho_00_im,rho_01_re,rho_01_im,rho_10_re,rho_10_im,rho_11_re,rho_11_im"


def test_steer_reports_median_infidelity(tmp_path, capsys):
    code, summary, _ = _run(
        capsys,
        ["steer", "--N", "1000", "--delta", "31.6", "--trials", "3", "--iterations", "2",
         "--rho", ZERO, "--target", PLUS, "--seed", "7", "--out", str(tmp_path)],
    )
    assert code == 0
    assert summary["median_final_infidelity"] < 0.05
    assert "estimate_purity_warnings" in summary


def test_chaos_accepts_policy_alias(tmp_path, capsys):
    code, summary, _ = _run(
        capsys,
        ["chaos", "--policy", "kicked_top", "--s0", "1e-6", "--t", "25", "--seed", "2",
         "--out", str(tmp_path)],
    )
    assert code == 0
    assert summary["policy"] == "kicked_nonlinear_top"
    assert (tmp_path / "chaos.csv").exists()


def test_microscope_smoke(tmp_path, capsys):
    code, summary, _ = _run(
        capsys,
        ["microscope", "--s0", "1e-3", "--t", "30", "--seed", "2", "--out", str(tmp_path)],
    )
    assert code == 0
    assert summary["t_detect"] is None or summary["t_detect"] >= 0.0


def test_svg_rendering(tmp_path, capsys):
    pytest.importorskip("matplotlib")
    code, summary, _ = _run(
        capsys,
        ["nls", "--rho", PLUS, "--gx", "1", "--t", "1", "--svg", "--out", str(tmp_path)],
    )
    assert code == 0
    svg = Path(summary["svg"])
    assert svg.suffix == ".svg"
    assert b"<svg" in svg.read_bytes()


def test_module_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "qfeedback.cli", "list-policies"],
        cwd=REPO,
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["scenario"] == "list-policies"
