import json

import numpy as np
import pytest

from mimotwin.errors import InvalidArgument
from mimotwin.harness.cli import main, selftest
from mimotwin.harness.config import RunConfig, dump_config, load_config, parse_config
from mimotwin.harness.experiments import (ExperimentSpec, Table, Workbench, compare, mean_se,
                                          run_fitting, stream, write_outputs)

TINY = """
samples = 60
frames = 40
draws = 2
epochs = 3
eta_pool = 20
eta_epochs = 2
tau_iter = 1
alpha_iter = 1
oracle_iter = 1
"""


def test_parse_config_values_and_comments():
    cfg = parse_config("# comment\nseed = 7\n\nframes = 100  # trailing\nratios_db = -20, -3.5, 0\n")
    assert cfg.seed == 7 and cfg.frames == 100
    assert cfg.ratios_db == (-20, -3.5, 0)
    assert cfg.samples == RunConfig().samples


@pytest.mark.parametrize("text", ["bogus = 1", "seed 7", "seed = x", "frames = 1.5"])
def test_parse_config_rejects_bad_lines(text):
    with pytest.raises(InvalidArgument):
        parse_config(text)


def test_dump_parse_round_trip(tmp_path):
    cfg = RunConfig(seed=3, ratios_db=(-10.0, 0.0), online_sizes=(5, 50), alpha0=0.25)
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_zero_samples_rejected():
    with pytest.raises(InvalidArgument):
        RunConfig(samples=0)
    with pytest.raises(InvalidArgument):
        run_fitting(Workbench(RunConfig(samples=5)), (4,))


def test_mean_se():
    m, se, n = mean_se([1.0, 2.0, 3.0, 4.0])
    assert (m, n) == (2.5, 4)
    assert se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    assert np.isnan(mean_se([1.0])[1])


@pytest.mark.parametrize("a,b,better,want", [
    ((1.0, 0.1), (2.0, 0.1), "lower", "pass"),
    ((1.0, 0.6), (2.0, 0.6), "lower", "flag"),
    ((2.0, 0.1), (1.0, 0.1), "lower", "fail"),
    ((2.0, 0.1), (1.0, 0.1), "higher", "pass"),
    ((1.0, 0.0), (1.0, 0.0), "lower", "fail"),
    ((1.0, 0.0), (1.0, 0.0), "lower_eq", "flag"),
    ((1.0, 0.0), (1.0, 0.0), "higher_eq", "flag"),
    ((3.0, np.nan), (1.0, np.nan), "higher", "pass"),
])
def test_compare_rules(a, b, better, want):
    assert compare(a, b, better) == want


def test_streams_independent_of_order():
    a = stream(5, "x", 1).normal(size=3)
    stream(5, "y").normal(size=100)
    np.testing.assert_array_equal(stream(5, "x", 1).normal(size=3), a)
    assert not np.array_equal(stream(5, "x", 2).normal(size=3), a)
    assert not np.array_equal(stream(6, "x", 1).normal(size=3), a)


def test_table_csv_and_manifest(tmp_path):
    t = Table("demo", ["case", "value", "value_se", "n"], [[1, 0.1, 0.01, 3], [2, 1 / 3, np.nan, 1]])
    assert t.cell("case", 2, "n") == 1
    assert t.column("value") == [0.1, 1 / 3]
    (path,) = write_outputs(tmp_path, [t], RunConfig(seed=9), "unit", {"note": 1})
    lines = open(path).read().splitlines()
    assert lines[0] == "case,value,value_se,n"
    assert lines[2] == f"2,{1 / 3!r},nan,1"
    man = json.loads((tmp_path / "demo.json").read_text())
    assert man["seed"] == 9 and man["rows"] == 2 and man["note"] == 1
    assert man["config"]["samples"] == RunConfig().samples


def test_unknown_scenario():
    with pytest.raises(InvalidArgument):
        ExperimentSpec("bogus")


def test_selftest_passes(capsys):
    assert all(ok for _, ok in selftest())
    assert main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return str(p)


def test_gen_data_writes_csv_and_manifest(tmp_path, tiny_cfg, capsys):
    out = tmp_path / "o"
    assert main(["gen-data", "--case", "2", "--samples", "12", "--config", tiny_cfg,
                 "--out", str(out)]) == 0
    csv_path = out / "dataset_case2_impaired.csv"
    assert capsys.readouterr().out.strip() == str(csv_path)
    assert len(csv_path.read_text().splitlines()) == 13
    man = json.loads((out / "dataset_case2_impaired.json").read_text())
    assert man["config"]["samples"] == 12 and man["case"] == 2


def test_train_and_pipeline_from_model_files(tmp_path, tiny_cfg):
    out = str(tmp_path / "m")
    base = ["--case", "4", "--config", tiny_cfg, "--out", out]
    assert main(["train-pp", *base]) == 0
    assert main(["train-eta", *base, "--models", out]) == 0
    assert main(["pipeline", *base, "--models", out]) == 0
    lines = (tmp_path / "m" / "pipeline_case4_dual_wb.csv").read_text().splitlines()
    assert lines[0].startswith("user,tau,tau_hat,alpha_star")
    assert len(lines) > 1


def test_missing_model_is_actionable(tmp_path, tiny_cfg, capsys):
    rc = main(["pipeline", "--case", "3", "--config", tiny_cfg, "--models", str(tmp_path),
               "--out", str(tmp_path)])
    assert rc == 2
    err = capsys.readouterr().err
    assert "case3_dual_wb.mtnn" in err and "train-pp --case 3 --variant dual_wb" in err


def test_bad_case_and_multi_case(tmp_path, tiny_cfg):
    assert main(["gen-data", "--case", "7", "--config", tiny_cfg, "--out", str(tmp_path)]) == 2
    assert main(["pipeline", "--case", "1,2", "--config", tiny_cfg, "--out", str(tmp_path)]) == 2


def test_reproduce_is_byte_identical(tmp_path, tiny_cfg):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["reproduce", "--table", "vi", "--case", "4", "--seed", "3",
                     "--config", tiny_cfg, "--out", str(out)]) == 0
        outs.append((out / "tau_estimation.csv").read_bytes())
    assert outs[0] == outs[1]
    header = outs[0].decode().splitlines()[0].split(",")
    assert header[0] == "case" and header[-1] == "n" and "dual_wb_se" in header
