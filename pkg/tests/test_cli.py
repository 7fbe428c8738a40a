import csv
import json
import os

import pytest

from rmparametrix import cli

TINY_SUBCOMMANDS = ("validate", "simulate", "flows", "couple", "svdiag", "density", "parametrix")


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def tiny(data_dir):
    return os.path.join(data_dir, "tiny_sine_logistic.ini")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("name", ["linear_gaussian.ini", "sine_logistic.ini"])
def test_validate_passes_on_shipped_configs(name, config_dir, tmp_path):
    assert run_cli("validate", "--config", os.path.join(config_dir, name), "--out", tmp_path) == 0
    report = json.loads((tmp_path / "validate.json").read_text())
    assert report["all_passed"]
    assert all(report[k]["passed"] for k in ("A-1", "A-2", "A-3", "A-4", "A-5"))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["subcommand"] == "validate"


def test_validate_reports_failed_assumptions(tiny, tmp_path):
    text = open(tiny).read().replace("sigma = 1.0", "sigma = 0.25")
    cfg = tmp_path / "weak.ini"
    cfg.write_text(text)
    assert run_cli("validate", "--config", cfg, "--out", tmp_path / "o") == 1
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["status"] == "failed"


def test_unknown_subcommand_exits_with_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["explode", "--config", "x.ini"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_missing_config_gives_json_error(tmp_path, capsys):
    assert run_cli("flows", "--config", tmp_path / "nope.ini", "--out", tmp_path) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError" and err["subcommand"] == "flows"
    assert json.loads((tmp_path / "error.json").read_text()) == err


def test_bad_config_values_are_refused(tiny, tmp_path):
    text = open(tiny).read().replace("shifts = 20, 40, 80, 160", "shifts = 40, 20", 1)
    cfg = tmp_path / "bad.ini"
    cfg.write_text(text)
    assert run_cli("flows", "--config", cfg, "--out", tmp_path / "o") == 1


@pytest.mark.parametrize("sub", TINY_SUBCOMMANDS)
def test_every_subcommand_runs_on_tiny_config(sub, tiny, tmp_path):
    assert run_cli(sub, "--config", tiny, "--out", tmp_path) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["schema_version"] == cli.SCHEMA_VERSION
    assert manifest["seed"] == 1 and len(manifest["config_hash"]) == 64
    assert manifest["artifacts"]
    for name in manifest["artifacts"]:
        assert (tmp_path / name).stat().st_size > 0
    assert set(manifest["versions"]) >= {"rmparametrix", "numpy", "scipy", "backend"}


def test_parametrix_csv_columns(tiny, tmp_path):
    assert run_cli("parametrix", "--config", tiny, "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "parametrix_terms.csv")
    assert set(rows[0]) == {"series", "r", "term_norm", "probe_x", "probe_y", "partial_sum"}
    assert {r["series"] for r in rows} == {"continuous", "discrete"}
    assert max(int(r["r"]) for r in rows) == 3
    report = json.loads((tmp_path / "flowchart.json").read_text())
    assert [r["N"] for r in report["reports"]] == [20, 40]


def test_rate_refuses_short_abscissa_span(tiny, tmp_path, capsys):
    # rate shifts 20..160 cover under one decade of both abscissas
    assert run_cli("rate", "--config", tiny, "--out", tmp_path) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["message"] == "rate fit refused"
    assert set(err["refused"]) == {"chain_vs_diffusion", "limit_vs_cutoff"}
    assert (tmp_path / "rate_chain_vs_diffusion.json").exists()
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "error"


def test_rate_fits_over_a_decade(tiny, tmp_path):
    # a_N sqrt(gamma_0) = gamma_0^{1/4} needs four decades of N for one decade
    text = open(tiny).read().replace("[rate]\nshifts = 20, 40, 80, 160",
                                     "[rate]\nshifts = 10, 100, 1000, 100000")
    text = text.replace("paths = 4000", "paths = 1000")
    cfg = tmp_path / "wide.ini"
    cfg.write_text(text)
    assert run_cli("rate", "--config", cfg, "--out", tmp_path / "o") == 0
    for name in ("rate_chain_vs_diffusion.json", "rate_limit_vs_cutoff.json"):
        fit = json.loads((tmp_path / "o" / name).read_text())["fit"]
        assert set(fit) >= {"slope", "intercept", "r2"}


@pytest.mark.parametrize("sub", ["simulate", "couple", "density"])
def test_artifacts_do_not_depend_on_thread_count(sub, tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(sub, "--config", tiny, "--out", a, "--threads", 1) == 0
    assert run_cli(sub, "--config", tiny, "--out", b, "--threads", 3) == 0
    for name in json.loads((a / "manifest.json").read_text())["artifacts"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_override_changes_simulation(tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_cli("simulate", "--config", tiny, "--out", a)
    run_cli("simulate", "--config", tiny, "--out", b, "--seed", 2)
    assert (a / "simulate.csv").read_bytes() != (b / "simulate.csv").read_bytes()
    assert json.loads((b / "manifest.json").read_text())["seed"] == 2
