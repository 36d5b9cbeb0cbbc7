"""Linear angle-free measurement model and its weighted least-squares solve.

State layout: squared voltages in rooted bus order, then active flows, then
reactive flows, both in canonical directed-end order.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .measurement import Kind, MeasurementSet
from .netmodel import NetworkModel


class RankDeficiencyError(np.linalg.LinAlgError):
    def __init__(self, rank: int, state_dim: int):
        self.rank = rank
        self.state_dim = state_dim
        super().__init__(f"design matrix is rank deficient: rank {rank} < {state_dim}")


@dataclass(frozen=True)
class StateLayout:
    n_bus: int
    n_end: int

    @property
    def dim(self) -> int:
        return self.n_bus + 2 * self.n_end

    def v(self, bus: int) -> int:
        return bus

    def p(self, end: int) -> int:
        return self.n_bus + end

    def q(self, end: int) -> int:
        return self.n_bus + self.n_end + end

    @classmethod
    def of(cls, net: NetworkModel) -> "StateLayout":
        return cls(len(net.buses), len(net.directed_ends))


@dataclass(frozen=True, eq=False)
class StateVector:
    v_sq: np.ndarray
    flow_p: np.ndarray
    flow_q: np.ndarray

    @classmethod
    def unpack(cls, x: np.ndarray, layout: StateLayout) -> "StateVector":
        nb, ne = layout.n_bus, layout.n_end
        return cls(x[:nb].copy(), x[nb:nb + ne].copy(), x[nb + ne:].copy())

    def pack(self) -> np.ndarray:
        return np.concatenate([self.v_sq, self.flow_p, self.flow_q])


@dataclass(frozen=True, eq=False)
class DesignSystem:
    """Sparse design matrix with one row per model equation.

    A flow measurement expands to two rows (same-direction equality and the
    negated opposite direction); ``row_measurement`` maps rows back to the
    index of their measurement in the set.
    """

    H: sp.csr_matrix
    z: np.ndarray
    w: np.ndarray
    row_measurement: np.ndarray
    row_kind: tuple[Kind, ...]
    layout: StateLayout
    measurements: MeasurementSet | None = None


@dataclass(frozen=True, eq=False)
class StateEstimate:
    state: StateVector
    residuals: np.ndarray
    weighted_cost: float
    rank: int
    system: DesignSystem
    postfiltered: bool = False


_TEMPLATES: "weakref.WeakKeyDictionary[NetworkModel, dict]" = weakref.WeakKeyDictionary()

_VALUE_KINDS = frozenset({Kind.V_SQ, Kind.INJ_P, Kind.INJ_Q, Kind.FLOW_P, Kind.FLOW_Q})


def _row_templates(net: NetworkModel) -> dict[tuple[Kind, str], list[tuple[tuple[int, ...], tuple[float, ...]]]]:
    """(kind, target) -> rows as (columns, coefficients), built once per network."""
    cached = _TEMPLATES.get(net)
    if cached is not None:
        return cached
    layout = StateLayout.of(net)
    bidx = net.bus_index
    eidx = net.end_index
    ends = net.directed_ends
    outgoing: dict[str, list[int]] = {b: [] for b in net.rooted_order}
    for k, e in enumerate(ends):
        outgoing[e.from_bus].append(k)

    t: dict[tuple[Kind, str], list] = {}
    for bus in net.rooted_order:
        t[(Kind.V_SQ, bus)] = [((layout.v(bidx[bus]),), (1.0,))]
        p_cols = tuple(layout.p(e) for e in outgoing[bus])
        q_cols = tuple(layout.q(e) for e in outgoing[bus])
        for kind, cols in ((Kind.INJ_P, p_cols), (Kind.VIRTUAL_ZERO_INJ_P, p_cols),
                           (Kind.INJ_Q, q_cols), (Kind.VIRTUAL_ZERO_INJ_Q, q_cols)):
            t[(kind, bus)] = [(cols, (1.0,) * len(cols))]
    for k, e in enumerate(ends):
        back = eidx[(e.line_id, e.to_bus)]
        t[(Kind.FLOW_P, e.key)] = [((layout.p(k),), (1.0,)), ((layout.p(back),), (-1.0,))]
        t[(Kind.FLOW_Q, e.key)] = [((layout.q(k),), (1.0,)), ((layout.q(back),), (-1.0,))]
    for ln in net.lines:
        i, j = net.downstream(ln.id)
        e = eidx[(ln.id, i)]
        b = eidx[(ln.id, j)]
        t[(Kind.VIRTUAL_DROP, ln.id)] = [(
            (layout.v(bidx[j]), layout.v(bidx[i]), layout.p(e), layout.q(e)),
            (1.0, -1.0, 2.0 * ln.r, 2.0 * ln.x),
        )]
        t[(Kind.VIRTUAL_ANTISYM_P, ln.id)] = [((layout.p(e), layout.p(b)), (1.0, 1.0))]
        t[(Kind.VIRTUAL_ANTISYM_Q, ln.id)] = [((layout.q(e), layout.q(b)), (1.0, 1.0))]
    _TEMPLATES[net] = t
    return t


def assemble(net: NetworkModel, mset: MeasurementSet) -> DesignSystem:
    """Build ``H``, ``z`` and ``w`` for a measurement set.

    Row patterns: voltage rows hit one squared voltage; a drop row reads
    ``v_j - v_i + 2 r p_ij + 2 x q_ij = 0`` for parent ``i`` and child ``j``;
    balance rows sum every flow leaving the bus; a flow measurement on
    ``i -> j`` gives ``p_ij = z`` and ``-p_ji = z``.

    Raises:
        KeyError: a measurement names an unknown bus, line or directed end.
    """
    layout = StateLayout.of(net)
    templates = _row_templates(net)
    indptr = [0]
    cols: list[int] = []
    vals: list[float] = []
    z: list[float] = []
    w: list[float] = []
    src: list[int] = []
    kinds: list[Kind] = []
    for mi, m in enumerate(mset.measurements):
        try:
            rows = templates[(m.kind, m.target)]
        except KeyError:
            raise KeyError(f"measurement {mi} ({m.kind.value} {m.target!r}) references an unknown element") from None
        value = m.value if m.kind in _VALUE_KINDS else 0.0
        for c, v in rows:
            cols.extend(c)
            vals.extend(v)
            indptr.append(len(cols))
            z.append(value)
            w.append(m.weight)
            src.append(mi)
            kinds.append(m.kind)
    H = sp.csr_matrix((np.asarray(vals, dtype=float), np.asarray(cols, dtype=np.int32),
                       np.asarray(indptr, dtype=np.int32)), shape=(len(z), layout.dim))
    return DesignSystem(
        H=H,
        z=np.asarray(z, dtype=float),
        w=np.asarray(w, dtype=float),
        row_measurement=np.asarray(src, dtype=int),
        row_kind=tuple(kinds),
        layout=layout,
        measurements=mset,
    )


def _rank_from_diag(d: np.ndarray, tol_factor: float) -> int:
    d = np.abs(d)
    if d.size == 0 or d[0] == 0.0:
        return 0
    return int(np.count_nonzero(d > tol_factor * np.finfo(float).eps * d[0]))


def numerical_rank(H) -> int:
    """Column rank of ``H`` from a pivoted Cholesky factorization of ``H^T H``.

    A pivot counts when it exceeds ``n * eps`` times the largest diagonal of
    the Gram matrix. Structurally unobservable directions give pivots at
    rounding level; observable ones sit many orders of magnitude above.
    """
    n = H.shape[1]
    if H.shape[0] == 0 or n == 0:
        return 0
    G = H.T @ H
    G = G.toarray() if sp.issparse(G) else np.asarray(G)
    top = float(np.max(np.diag(G)))
    if top == 0.0:
        return 0
    _, _, rank, info = scipy.linalg.lapack.dpstrf(G, lower=0, tol=n * np.finfo(float).eps * top)
    if info < 0:  # pragma: no cover
        raise np.linalg.LinAlgError("dpstrf failed")
    return int(rank)


def qr_rank(A: np.ndarray) -> int:
    """Rank from column-pivoted QR: |R_kk| above ``max(m, n) * eps * |R_00|``."""
    if A.size == 0:
        return 0
    R, _ = scipy.linalg.qr(A, mode="r", pivoting=True, check_finite=False)
    return _rank_from_diag(np.diag(R), max(A.shape))


@dataclass(frozen=True, eq=False)
class WLSFactorization:
    """Column-pivoted QR of ``sqrt(W) H`` (weights rescaled to max 1)."""

    Q: np.ndarray
    R: np.ndarray
    piv: np.ndarray
    sw: np.ndarray
    rank: int

    @classmethod
    def of(cls, system: DesignSystem) -> "WLSFactorization":
        w = system.w
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(system.H.data))):
            raise ValueError("non-finite entries in the design system")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        n = system.layout.dim
        m = system.H.shape[0]
        if m < n or not np.any(w > 0):
            raise RankDeficiencyError(min(m, n) if np.any(w > 0) else 0, n)
        # Rescaling keeps an overall weight factor from reaching the pivots.
        sw = np.sqrt(w / w.max())
        A = system.H.toarray() * sw[:, None]
        Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True, check_finite=False)
        rank = _rank_from_diag(np.diag(R), max(A.shape))
        if rank < n:
            raise RankDeficiencyError(rank, n)
        return cls(Q, R, piv, sw, rank)

    def solve(self, z: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(z)):
            raise ValueError("non-finite measurement values")
        y = scipy.linalg.solve_triangular(self.R, self.Q.T @ (self.sw * z), check_finite=False)
        x = np.empty_like(y)
        x[self.piv] = y
        return x


def solve_wls(system: DesignSystem, factorization: WLSFactorization | None = None) -> StateEstimate:
    """Minimize ``sum w (z - H x)^2`` via column-pivoted QR of ``sqrt(W) H``.

    ``factorization`` may be supplied when several measurement vectors share
    one design matrix and weight vector.

    Raises:
        ValueError: non-finite measurements or weights, or negative weights.
        RankDeficiencyError: the weighted design matrix lacks full column rank.
    """
    fact = factorization if factorization is not None else WLSFactorization.of(system)
    x = fact.solve(system.z)
    residuals = system.z - system.H @ x
    return StateEstimate(
        state=StateVector.unpack(x, system.layout),
        residuals=residuals,
        weighted_cost=float(np.sum(system.w * residuals**2)),
        rank=fact.rank,
        system=system,
    )


def antisymmetry_violations(flow: np.ndarray, fwd: np.ndarray, rev: np.ndarray, threshold: float,
                            scale: float | None = None) -> np.ndarray:
    """Mask of lines whose directed flows fail ``|f_ij + f_ji| <= threshold * scale``."""
    if scale is None:
        scale = float(np.mean(np.abs(flow))) if flow.size else 0.0
    return np.abs(flow[fwd] + flow[rev]) > threshold * scale


def _end_scores(est: StateEstimate, net: NetworkModel, active: bool) -> np.ndarray:
    """Per directed end, worst |residual| of nodal balance rows at its sending bus.

    Ends whose sending bus has no balance row fall back to the worst residual
    of flow rows touching that end; ends with neither score zero.
    """
    system = est.system
    layout = system.layout
    bidx = net.bus_index
    n_end = layout.n_end
    nodal = np.full(n_end, np.nan)
    flows = np.zeros(n_end)
    inj_kinds = (Kind.INJ_P, Kind.VIRTUAL_ZERO_INJ_P) if active else (Kind.INJ_Q, Kind.VIRTUAL_ZERO_INJ_Q)
    flow_kind = Kind.FLOW_P if active else Kind.FLOW_Q
    offset = layout.n_bus if active else layout.n_bus + n_end
    a = net.arrays
    H = system.H
    for r, kind in enumerate(system.row_kind):
        if kind in inj_kinds:
            m = system.measurements.measurements[system.row_measurement[r]]
            b = bidx[m.target]
            mask = a.end_from == b
            nodal[mask] = np.fmax(nodal[mask], abs(est.residuals[r]))
        elif kind is flow_kind:
            e = H.indices[H.indptr[r]] - offset
            flows[e] = max(flows[e], abs(est.residuals[r]))
    return np.where(np.isnan(nodal), flows, nodal)


def postfilter_antisymmetry(est: StateEstimate, net: NetworkModel, threshold: float = 0.5) -> StateEstimate:
    """Repair lines whose two directed flows disagree.

    For active and reactive flows separately: while some line has
    ``|f_ij + f_ji|`` above ``threshold`` times the mean absolute flow, the
    direction with the worse balance residual is replaced by the negated
    other direction (ties replace the parent-to-child direction, the only one
    the voltage-drop rows act on). Voltages are never touched.
    """
    if est.system.measurements is None:
        raise ValueError("postfilter needs the measurement set behind the estimate")
    a = net.arrays
    fwd = a.fwd_end[1:]
    rev = a.rev_end[1:]
    state = est.state
    new = {"flow_p": state.flow_p.copy(), "flow_q": state.flow_q.copy()}
    changed = False
    if np.isfinite(threshold):
        for name, active in (("flow_p", True), ("flow_q", False)):
            flow = new[name]
            scores = _end_scores(est, net, active)
            for _ in range(len(fwd)):
                bad = np.flatnonzero(antisymmetry_violations(flow, fwd, rev, threshold))
                if bad.size == 0:
                    break
                for k in bad:
                    f, b = fwd[k], rev[k]
                    if scores[b] > scores[f]:
                        flow[b] = -flow[f]
                    else:
                        flow[f] = -flow[b]
                changed = True
    if not changed:
        return est
    new_state = StateVector(state.v_sq.copy(), new["flow_p"], new["flow_q"])
    system = est.system
    residuals = system.z - system.H @ new_state.pack()
    return replace(
        est,
        state=new_state,
        residuals=residuals,
        weighted_cost=float(np.sum(system.w * residuals**2)),
        postfiltered=True,
    )


def estimate_to_dict(net: NetworkModel, est: StateEstimate) -> dict:
    from .powerflow import PowerFlowSolution, solution_to_dict

    sol = PowerFlowSolution(
        v_sq=est.state.v_sq, flow_p=est.state.flow_p, flow_q=est.state.flow_q,
        inj_p=np.zeros(len(est.state.v_sq)), inj_q=np.zeros(len(est.state.v_sq)),
        converged=True, iterations=0, method="estimate",
    )
    doc = solution_to_dict(net, sol)
    doc.pop("converged")
    doc.pop("iterations")
    doc["residuals"] = [float(r) for r in est.residuals]
    doc["weighted_cost"] = est.weighted_cost
    doc["rank"] = est.rank
    doc["postfiltered"] = est.postfiltered
    return doc
