import csv
import json
from pathlib import Path

import pytest

from dalec_ssm.cli import main
from dalec_ssm.diagnostics import LOG_ESS_CUTOFF
from dalec_ssm.model import STOCKS

FIT = ["--iterations", "300", "--burn-in", "100", "--init", "gp"]


def simulate(out, *extra):
    return main(["simulate", "--scenario", "daily", "--horizon", "60", "--replicates", "2", "--seed", "7",
                 "--out", str(out), *extra])


def files(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert simulate(out) == 0
    return out


def test_simulate_writes_replicates_deterministically(dataset, tmp_path):
    assert sorted(p.name for p in dataset.glob("replicate_*")) == ["replicate_000", "replicate_001"]
    assert simulate(tmp_path / "again") == 0
    a, b = files(dataset), files(tmp_path / "again")
    cfg_a, cfg_b = (json.loads(x.pop(Path("config.json"))) for x in (a, b))
    assert a == b
    assert {**cfg_a, "out": None} == {**cfg_b, "out": None}


def test_missing_driver_file_is_a_config_error(tmp_path, capsys):
    assert simulate(tmp_path / "x", "--drivers", str(tmp_path / "nope.csv")) == 2
    assert "nope.csv" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mcmc": {"warp": 9}}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "warp" in capsys.readouterr().err


def test_fit_outputs_are_reproducible(dataset, tmp_path):
    rep = dataset / "replicate_000"
    for name in ("a", "b"):
        assert main(["fit", str(rep), *FIT, "--seed", "3", "--out", str(tmp_path / name)]) == 0
    a = {k: v for k, v in files(tmp_path / "a").items() if k.suffix == ".csv"}
    b = {k: v for k, v in files(tmp_path / "b").items() if k.suffix == ".csv"}
    assert a == b and len(a) == 3
    header = (tmp_path / "a" / "chain_00.csv").read_text().splitlines()[0].split(",")
    assert header[:2] == ["iteration", "p1"] and header[-1] == "phi_csom"
    diag = json.loads((tmp_path / "a" / "diagnostics.json").read_text())
    assert diag["log_ess_cutoff"] == LOG_ESS_CUTOFF


def test_four_chains_emit_rhat(dataset, tmp_path):
    out = tmp_path / "four"
    assert main(["fit", str(dataset / "replicate_001"), *FIT, "--chains", "4", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "rhat.csv").open()))
    assert [r["quantity"] for r in rows][:11] == [f"p{i}" for i in range(1, 12)]


def test_clone_and_report(dataset, tmp_path):
    out = tmp_path / "clone"
    assert main(["clone", str(dataset / "replicate_000"), *FIT, "--r", "1,5", "--params", "p3,p11",
                 "--out", str(out)]) == 0
    verdicts = list(csv.DictReader((out / "verdicts.csv").open()))
    assert [v["parameter"] for v in verdicts] == ["p3", "p11"]
    assert main(["fit", str(dataset / "replicate_000"), *FIT, "--out", str(tmp_path / "fit")]) == 0
    rep = tmp_path / "report"
    assert main(["report", str(tmp_path / "fit"), str(out), "--out", str(rep)]) == 0
    cov = list(csv.reader((rep / "coverage_table.csv").open()))
    assert cov[0][4:] == [*STOCKS, *(f"phi_{s}" for s in STOCKS)]
    ess = list(csv.DictReader((rep / "ess_long.csv").open()))
    assert {float(r["cutoff"]) for r in ess} == {LOG_ESS_CUTOFF}
    assert {r["parameter"] for r in csv.DictReader((rep / "verdicts_long.csv").open())} == {"p3", "p11"}


def test_report_on_empty_directory_exits_2(tmp_path):
    assert main(["report", str(tmp_path), "--out", str(tmp_path / "r")]) == 2


def test_clone_rejects_bad_r_list(dataset, tmp_path):
    assert main(["clone", str(dataset / "replicate_000"), "--r", "5,25", "--out", str(tmp_path / "c")]) == 2
    assert main(["clone", str(dataset / "replicate_000"), "--r", "a,b", "--out", str(tmp_path / "c")]) == 2
