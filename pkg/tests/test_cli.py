from __future__ import annotations

import json

import pytest

from oracles import chain3
from radialse.cli import main
from radialse.measurement import load_set
from radialse.netmodel import load_network, network_to_dict, save_network
from radialse.powerflow import solution_from_dict


@pytest.fixture
def chain_file(tmp_path):
    p = tmp_path / "chain.json"
    save_network(chain3(), p)
    return p


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_check_fixture(capsys):
    code, out, _ = _run(capsys, "check")
    assert code == 0 and "61 buses, 60 lines" in out


def test_check_cycle_and_missing(tmp_path, capsys, chain_file):
    doc = network_to_dict(load_network(chain_file))
    doc["lines"].append({"id": "2-0", "from": "2", "to": "0", "r_ohm": 0.1, "x_ohm": 0.1})
    bad = tmp_path / "cyclic.json"
    bad.write_text(json.dumps(doc))
    code, _, err = _run(capsys, "check", "--network", bad)
    assert code == 1 and "cycle detected" in err
    code, _, _ = _run(capsys, "check", "--network", tmp_path / "none.json")
    assert code == 2


def test_usage_errors(capsys):
    assert _run(capsys, "frobnicate")[0] == 2
    assert _run(capsys, "solve")[0] == 2
    assert _run(capsys, "check", "--jobs", "0")[0] == 2


def test_solve_linear_chain(tmp_path, capsys, chain_file):
    out = tmp_path / "sol.json"
    dispatch = tmp_path / "d.json"
    dispatch.write_text(json.dumps({"1": [0.0, 0.0], "2": [-0.1, -0.05]}))
    code, _, _ = _run(capsys, "solve", "--network", chain_file, "--dispatch", dispatch, "--method", "linear", "--out", out)
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["v_sq"]["2"] == pytest.approx(0.9930, abs=1e-12)
    sol = solution_from_dict(load_network(chain_file), doc)
    assert sol.method == "linear"


def test_solve_flat_and_nonconvergent(tmp_path, capsys, chain_file):
    dispatch = tmp_path / "zero.json"
    dispatch.write_text(json.dumps({"1": [0.0, 0.0], "2": [0.0, 0.0]}))
    out = tmp_path / "flat.json"
    assert _run(capsys, "solve", "--network", chain_file, "--dispatch", dispatch, "--out", out)[0] == 0
    doc = json.loads(out.read_text())
    assert set(doc["v_sq"].values()) == {1.0}
    assert doc["iterations"] == 1
    stale = tmp_path / "never.json"
    code, _, err = _run(capsys, "solve", "--network", chain_file, "--dispatch", dispatch,
                        "--max-iter", "0", "--out", stale)
    assert code == 1 and "did not converge" in err and not stale.exists()


def test_estimate_consistency_and_metadata(tmp_path, capsys):
    truth = tmp_path / "lin.json"
    assert _run(capsys, "solve", "--seed", 3, "--method", "linear", "--out", truth)[0] == 0
    out = tmp_path / "est.json"
    code, _, _ = _run(capsys, "estimate", "--truth", truth, "--ev", 0, "--ei", 0, "--node-fraction", 1,
                      "--flow-fraction", 1, "--out", out)
    assert code == 0
    errs = json.loads(out.read_text())["errors"]
    for key in ("mean_err_v", "max_err_v", "mean_err_f", "max_err_f"):
        assert errs[key] < 1e-8

    out2 = tmp_path / "est2.json"
    _run(capsys, "estimate", "--truth", truth, "--preference", "nodal", "--seed", 5, "--out", out2)
    meta = json.loads(out2.read_text())["metadata"]
    assert (meta["node_fraction"], meta["flow_fraction"]) == (0.6, 0.8)


def test_estimate_is_byte_identical_and_replayable(tmp_path, capsys):
    truth = tmp_path / "t.json"
    _run(capsys, "solve", "--seed", 2, "--out", truth)
    a, b, s = tmp_path / "a.json", tmp_path / "b.json", tmp_path / "set.json"
    args = ["estimate", "--truth", truth, "--ev", "0.003", "--ei", "0.006", "--preference", "edge",
            "--seed", 8, "--postfilter"]
    assert _run(capsys, *args, "--out", a, "--dump-set", s)[0] == 0
    assert _run(capsys, *args, "--out", b)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(load_set(s)) > 0
    c = tmp_path / "c.json"
    assert _run(capsys, "estimate", "--truth", truth, "--set", s, "--out", c)[0] == 0
    assert json.loads(c.read_text())["v_sq"] == json.loads(a.read_text())["v_sq"]


def test_estimate_unobservable(tmp_path, capsys, chain_file):
    truth = tmp_path / "t.json"
    _run(capsys, "solve", "--network", chain_file, "--method", "linear", "--out", truth)
    code, _, err = _run(capsys, "estimate", "--network", chain_file, "--truth", truth, "--node-fraction", 0,
                        "--flow-fraction", 0, "--max-resamples", 2, "--out", tmp_path / "e.json")
    assert code == 1 and "not observable" in err


def test_grid_jobs_invariance_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "grid.json"
    cfg.write_text(json.dumps({"e_v_list": [0.001, 0.01], "e_i_list": [0.001], "dispatch_count": 50,
                               "master_seed": 1}))
    args = ["grid", "--config", cfg, "--dispatch-count", 4, "--quiet"]
    assert _run(capsys, *args, "--out-dir", tmp_path / "j1", "--jobs", 1)[0] == 0
    assert _run(capsys, *args, "--out-dir", tmp_path / "j2", "--jobs", 2)[0] == 0
    for f in sorted((tmp_path / "j1" / "tables").iterdir()):
        assert f.read_bytes() == (tmp_path / "j2" / "tables" / f.name).read_bytes()
    side = json.loads((tmp_path / "j1" / "sidecar.json").read_text())
    assert side["config"]["dispatch_count"] == 4  # flag beats file
    assert side["config"]["e_v_list"] == [0.001, 0.01]  # file beats default
    assert all("half_width_max_f" in c for c in side["cells"])


def test_grid_failed_cells_exit_one(tmp_path, capsys):
    code, _, err = _run(capsys, "grid", "--out-dir", tmp_path, "--e-v-list", "0.001", "--e-i-list", "0.001",
                        "--preferences", "nodal", "--dispatch-count", 2, "--node-fraction", 0,
                        "--flow-fraction", 0, "--max-resamples", 1, "--quiet")
    assert code == 1 and "failed cell" in err
    assert "FAILED" in (tmp_path / "tables" / "table_mean_v_nodal.csv").read_text()


def test_grid_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"dispatch_count": 2, "bogus": 1}))
    assert _run(capsys, "grid", "--config", cfg, "--out-dir", tmp_path)[0] == 1
    assert _run(capsys, "grid", "--config", tmp_path / "missing.json", "--out-dir", tmp_path)[0] == 2
