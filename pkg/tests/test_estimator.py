from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_wls, mp_wls
from radialse.estimator import (
    DesignSystem,
    RankDeficiencyError,
    StateLayout,
    StateVector,
    antisymmetry_violations,
    assemble,
    estimate_to_dict,
    numerical_rank,
    postfilter_antisymmetry,
    qr_rank,
    solve_wls,
)
from radialse.measurement import (
    Kind,
    Measurement,
    MeasurementSet,
    NoiseConfig,
    build_set,
    draw_placement,
    select_set,
    synthesize_pool,
)
from radialse.powerflow import Dispatch, generate_dispatch, solve_exact, solve_linear
from strategies import radial_networks


def _full_set(net, truth, noise=NoiseConfig(0.0, 0.0), seed=0, **opts):
    pool = synthesize_pool(truth, net, noise, seed)
    return MeasurementSet(tuple(build_set(pool, net, draw_placement(net, (1.0, 1.0), seed), **opts)))


def _truth_vector(truth):
    return np.concatenate([truth.v_sq, truth.flow_p, truth.flow_q])


def test_drop_row_coefficients(chain):
    sys_ = assemble(chain, MeasurementSet((Measurement(Kind.VIRTUAL_DROP, "0-1"),)))
    lay = sys_.layout
    row = sys_.H.toarray()[0]
    e = chain.end_index[("0-1", "0")]
    expected = np.zeros(lay.dim)
    expected[lay.v(chain.bus_index["0"])] = -1.0
    expected[lay.v(chain.bus_index["1"])] = 1.0
    expected[lay.p(e)] = 2 * 0.01
    expected[lay.q(e)] = 2 * 0.02
    assert np.array_equal(row, expected)
    assert sys_.z.tolist() == [0.0]


def test_slack_voltage_row(chain):
    sys_ = assemble(chain, MeasurementSet((Measurement(Kind.V_SQ, "0", 1.0),)))
    assert sys_.H.nnz == 1 and sys_.H[0, 0] == 1.0 and sys_.z.tolist() == [1.0]


def test_flow_measurement_two_rows(chain):
    sys_ = assemble(chain, MeasurementSet((Measurement(Kind.FLOW_P, "0-1:0", 0.1),)))
    H = sys_.H.toarray()
    lay = sys_.layout
    fwd = lay.p(chain.end_index[("0-1", "0")])
    rev = lay.p(chain.end_index[("0-1", "1")])
    assert H.shape[0] == 2
    assert H[0, fwd] == 1.0 and np.count_nonzero(H[0]) == 1
    assert H[1, rev] == -1.0 and np.count_nonzero(H[1]) == 1
    assert sys_.z.tolist() == [0.1, 0.1]
    assert sys_.row_measurement.tolist() == [0, 0]


def test_injection_and_antisym_patterns(chain):
    rows = (
        Measurement(Kind.INJ_P, "1", 0.0),
        Measurement(Kind.VIRTUAL_ZERO_INJ_Q, "1"),
        Measurement(Kind.VIRTUAL_ANTISYM_P, "1-2"),
    )
    sys_ = assemble(chain, MeasurementSet(rows))
    H = sys_.H.toarray()
    lay = sys_.layout
    out1 = [chain.end_index[("0-1", "1")], chain.end_index[("1-2", "1")]]
    assert set(np.flatnonzero(H[0])) == {lay.p(e) for e in out1}
    assert set(np.flatnonzero(H[1])) == {lay.q(e) for e in out1}
    both = [chain.end_index[("1-2", "1")], chain.end_index[("1-2", "2")]]
    assert set(np.flatnonzero(H[2])) == {lay.p(e) for e in both}
    assert np.all(H[H != 0][:4] == 1.0)


def test_unknown_reference(chain):
    with pytest.raises(KeyError):
        assemble(chain, MeasurementSet((Measurement(Kind.V_SQ, "nope", 1.0),)))
    with pytest.raises(KeyError):
        assemble(chain, MeasurementSet((Measurement(Kind.FLOW_P, "0-1:2", 1.0),)))


@settings(max_examples=30, deadline=None)
@given(radial_networks(max_buses=8), st.integers(0, 1000))
def test_row_sparsity_bounded_by_degree(net, seed):
    truth = solve_linear(net, generate_dispatch(net, seed))
    mset = _full_set(net, truth, antisymmetry_rows=True)
    sys_ = assemble(net, mset)
    degree = max(sum(1 for e in net.directed_ends if e.from_bus == b) for b in net.rooted_order)
    nnz = np.diff(sys_.H.indptr)
    assert nnz.max() <= max(degree + 1, 4)
    assert sys_.layout.dim == len(net.buses) + 4 * len(net.lines)


def test_one_state_toy():
    layout = StateLayout(1, 0)
    sys_ = DesignSystem(sp.csr_matrix(np.array([[1.0]])), np.array([0.98]), np.array([1.0]),
                        np.array([0]), (Kind.V_SQ,), layout)
    est = solve_wls(sys_)
    assert est.state.v_sq.tolist() == [0.98] and est.weighted_cost == 0.0 and est.rank == 1


def test_consistent_full_set_recovers_linear_truth(net):
    truth = solve_linear(net, generate_dispatch(net, 2))
    est = solve_wls(assemble(net, _full_set(net, truth)))
    assert np.max(np.abs(est.state.pack() - _truth_vector(truth))) < 1e-9


@pytest.mark.parametrize("weighting, vw, oracle", [
    ("uniform", 1.0, dense_wls),
    # weights spanning eight decades square the conditioning of a plain
    # double-precision normal-equations solve, so this case uses mpmath
    ("inverse_variance", 1e6, mp_wls),
])
def test_chain_matches_normal_equations(chain, weighting, vw, oracle):
    truth = solve_exact(chain, Dispatch.nominal(chain))
    mset = _full_set(chain, truth, NoiseConfig(0.001, 0.001), seed=42, weighting=weighting, virtual_weight=vw)
    sys_ = assemble(chain, mset)
    est = solve_wls(sys_)
    ref = oracle(sys_.H.toarray(), sys_.w, sys_.z)
    assert np.max(np.abs(est.state.pack() - ref)) < 1e-9
    assert est.weighted_cost == pytest.approx(float(np.sum(sys_.w * (sys_.z - sys_.H @ ref) ** 2)), abs=1e-12)


def test_rank_deficiency(chain):
    mset = MeasurementSet((Measurement(Kind.V_SQ, "0", 1.0), Measurement(Kind.VIRTUAL_DROP, "0-1")))
    with pytest.raises(RankDeficiencyError) as err:
        solve_wls(assemble(chain, mset))
    assert err.value.state_dim == 11


def test_non_finite_inputs(chain):
    truth = solve_linear(chain, Dispatch.nominal(chain))
    sys_ = assemble(chain, _full_set(chain, truth))
    with pytest.raises(ValueError):
        solve_wls(replace(sys_, z=np.where(np.arange(sys_.z.size) == 0, np.nan, sys_.z)))
    with pytest.raises(ValueError):
        solve_wls(replace(sys_, w=-sys_.w))


def test_cholesky_rank_agrees_with_qr(net):
    truth = solve_exact(net, generate_dispatch(net, 3))
    pool = synthesize_pool(truth, net, NoiseConfig(), 0)
    for seed in range(40):
        fr = (0.6, 0.8) if seed % 2 else (0.3, 0.9)
        H = assemble(net, MeasurementSet(tuple(build_set(pool, net, draw_placement(net, fr, seed))))).H
        assert numerical_rank(H) == qr_rank(H.toarray())


@settings(max_examples=30, deadline=None)
@given(radial_networks(max_buses=9), st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_solver_properties(net, seed, factor):
    truth = solve_exact(net, generate_dispatch(net, seed))
    rng = np.random.default_rng(seed)
    mset = _full_set(net, truth, NoiseConfig(0.01, 0.01), seed)
    sys_ = assemble(net, mset)
    sys_ = replace(sys_, w=rng.uniform(0.5, 2.0, sys_.w.size))
    est = solve_wls(sys_)
    x = est.state.pack()
    # optimality of the weighted normal equations
    g = sys_.H.T @ (sys_.w * (sys_.z - sys_.H @ x))
    scale = np.max(np.abs(sys_.H.T @ (sys_.w * sys_.z)))
    assert np.max(np.abs(g)) < 1e-8 * scale
    # weight-scaling invariance
    scaled = solve_wls(replace(sys_, w=sys_.w * factor)).state.pack()
    assert np.max(np.abs(scaled - x)) < 1e-12
    # consistency for arbitrary weights
    x_star = rng.normal(size=sys_.layout.dim)
    exact = solve_wls(replace(sys_, z=sys_.H @ x_star)).state.pack()
    assert np.max(np.abs(exact - x_star)) < 1e-9
    assert est.weighted_cost >= 0


def _chain_estimate(chain):
    truth = solve_linear(chain, Dispatch.nominal(chain))
    return solve_wls(assemble(chain, _full_set(chain, truth))), truth


def test_postfilter_leaves_antisymmetric_estimate(chain):
    est, _ = _chain_estimate(chain)
    assert postfilter_antisymmetry(est, chain) is est


def test_postfilter_repairs_corrupted_direction(chain):
    est, truth = _chain_estimate(chain)
    i, j = chain.downstream("0-1")
    f = chain.end_index[("0-1", i)]
    b = chain.end_index[("0-1", j)]
    flow_p = est.state.flow_p.copy()
    flow_p[b] += 0.5
    state = StateVector(est.state.v_sq, flow_p, est.state.flow_q)
    res = est.system.z - est.system.H @ state.pack()
    bad = replace(est, state=state, residuals=res)
    fixed = postfilter_antisymmetry(bad, chain)
    assert fixed.postfiltered
    assert fixed.state.flow_p[b] == -fixed.state.flow_p[f]
    assert fixed.state.flow_p[f] == flow_p[f]
    assert np.array_equal(fixed.state.v_sq, bad.state.v_sq)
    assert postfilter_antisymmetry(bad, chain, threshold=np.inf) is bad


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 2.0))
def test_postfilter_never_adds_violations(net, seed, threshold):
    truth = solve_exact(net, generate_dispatch(net, seed))
    pool = synthesize_pool(truth, net, NoiseConfig(0.01, 0.01), seed)
    est = solve_wls(assemble(net, select_set(pool, net, "edge", seed=seed)))
    a = net.arrays
    fwd, rev = a.fwd_end[1:], a.rev_end[1:]
    out = postfilter_antisymmetry(est, net, threshold)
    for before, after in ((est.state.flow_p, out.state.flow_p), (est.state.flow_q, out.state.flow_q)):
        n_before = antisymmetry_violations(before, fwd, rev, threshold).sum()
        n_after = antisymmetry_violations(after, fwd, rev, threshold).sum()
        assert n_after <= n_before
    assert np.array_equal(out.state.v_sq, est.state.v_sq)


def test_estimate_document(chain):
    est, _ = _chain_estimate(chain)
    doc = json.loads(json.dumps(estimate_to_dict(chain, est)))
    assert set(doc) >= {"v_sq", "flows", "residuals", "weighted_cost", "postfiltered", "rank"}
    assert doc["flows"]["0-1"]["forward"][0] == pytest.approx(0.1)
    assert doc["rank"] == 11
