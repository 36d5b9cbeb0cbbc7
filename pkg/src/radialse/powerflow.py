"""Radial power flow: exact backward/forward sweep, linear DistFlow, dispatches."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netmodel import NetworkModel


class VoltageCollapseError(RuntimeError):
    """A squared voltage went non-positive during the sweep."""

    def __init__(self, iteration: int, bus: str):
        self.iteration = iteration
        self.bus = bus
        super().__init__(f"voltage collapse at bus {bus!r} in iteration {iteration}")


@dataclass(frozen=True)
class DispatchConfig:
    load_scale_min: float = 0.5
    load_scale_max: float = 1.0
    dg_scale_max: float = 1.0
    power_factor: float = 0.95


@dataclass(frozen=True)
class Dispatch:
    """Net injections per non-slack bus (generation positive, load negative).

    ``gen_p`` records the generation component when the dispatch was sampled;
    it is not part of the dispatch document.
    """

    inj_p: dict[str, float]
    inj_q: dict[str, float]
    gen_p: dict[str, float] | None = None

    def arrays(self, net: NetworkModel) -> tuple[np.ndarray, np.ndarray]:
        """Injections in rooted order; the slack entry is zero."""
        order = net.rooted_order
        p = np.zeros(len(order))
        q = np.zeros(len(order))
        for k, bus in enumerate(order[1:], start=1):
            p[k] = self.inj_p[bus]
            q[k] = self.inj_q[bus]
        return p, q

    @classmethod
    def from_arrays(cls, net: NetworkModel, p: np.ndarray, q: np.ndarray,
                    gen_p: np.ndarray | None = None) -> "Dispatch":
        order = net.rooted_order[1:]
        return cls(
            inj_p={b: float(p[k]) for k, b in enumerate(order, start=1)},
            inj_q={b: float(q[k]) for k, b in enumerate(order, start=1)},
            gen_p=None if gen_p is None else {b: float(gen_p[k]) for k, b in enumerate(order, start=1)},
        )

    @classmethod
    def zero(cls, net: NetworkModel) -> "Dispatch":
        n = len(net.buses)
        return cls.from_arrays(net, np.zeros(n), np.zeros(n))

    @classmethod
    def nominal(cls, net: NetworkModel) -> "Dispatch":
        """Nominal loads, no generation."""
        a = net.arrays
        return cls.from_arrays(net, -a.load_p, -a.load_q)


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    """Squared voltages (rooted order) and directed flows (canonical end order).

    ``flow_p[e]`` is the active power leaving ``e.from_bus`` into the line.
    ``inj_p``/``inj_q`` hold the net bus injections, including the slack's.
    """

    v_sq: np.ndarray
    flow_p: np.ndarray
    flow_q: np.ndarray
    inj_p: np.ndarray
    inj_q: np.ndarray
    converged: bool
    iterations: int
    method: str

    @property
    def v(self) -> np.ndarray:
        return np.sqrt(self.v_sq)

    def losses(self, net: NetworkModel) -> np.ndarray:
        """Active loss of each branch, indexed like ``net.arrays`` (entry 0 unused)."""
        a = net.arrays
        out = np.zeros(a.n_bus)
        out[1:] = self.flow_p[a.fwd_end[1:]] + self.flow_p[a.rev_end[1:]]
        return out


def generate_dispatch(net: NetworkModel, seed, cfg: DispatchConfig | None = None) -> Dispatch:
    """Random operating point.

    Each DG output is uniform on ``[0, dg_scale_max * P_n]`` with reactive
    output inside the power-factor band; each load is scaled by its own
    uniform factor on ``[load_scale_min, load_scale_max]``.
    """
    cfg = cfg or DispatchConfig()
    rng = np.random.default_rng(seed)
    a = net.arrays
    n = a.n_bus
    gen_p = rng.uniform(0.0, 1.0, n) * cfg.dg_scale_max * a.dg_capacity
    tan_phi = math.tan(math.acos(cfg.power_factor))
    gen_q = gen_p * tan_phi * rng.uniform(-1.0, 1.0, n)
    scale = rng.uniform(cfg.load_scale_min, cfg.load_scale_max, n)
    return Dispatch.from_arrays(net, gen_p - scale * a.load_p, gen_q - scale * a.load_q, gen_p)


def _finish(net: NetworkModel, v_sq, p_send, q_send, p_recv, q_recv, inj_p, inj_q,
            converged: bool, iterations: int, method: str) -> PowerFlowSolution:
    a = net.arrays
    n_end = len(net.directed_ends)
    flow_p = np.zeros(n_end)
    flow_q = np.zeros(n_end)
    k = np.arange(1, a.n_bus)
    flow_p[a.fwd_end[k]] = np.asarray(p_send)[k]
    flow_q[a.fwd_end[k]] = np.asarray(q_send)[k]
    flow_p[a.rev_end[k]] = -np.asarray(p_recv)[k]
    flow_q[a.rev_end[k]] = -np.asarray(q_recv)[k]
    inj_p = np.array(inj_p, dtype=float)
    inj_q = np.array(inj_q, dtype=float)
    root_children = a.parent == 0
    inj_p[0] = float(np.sum(np.asarray(p_send)[root_children]))
    inj_q[0] = float(np.sum(np.asarray(q_send)[root_children]))
    return PowerFlowSolution(
        v_sq=np.array(v_sq, dtype=float),
        flow_p=flow_p,
        flow_q=flow_q,
        inj_p=inj_p,
        inj_q=inj_q,
        converged=converged,
        iterations=iterations,
        method=method,
    )


def solve_exact(net: NetworkModel, d: Dispatch, tol: float = 1e-10, max_iter: int = 100) -> PowerFlowSolution:
    """Backward/forward sweep on the branch-flow (DistFlow) equations.

    The backward pass accumulates sending-end flows leaf to root including
    the series loss ``z * (P^2 + Q^2) / v``; the forward pass recomputes the
    squared voltages root to leaf. Stops once the largest voltage-magnitude
    update is below ``tol``. A non-converged run returns the last iterate
    with ``converged=False``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = net.arrays
    n = a.n_bus
    parent = a.parent.tolist()
    r = a.r.tolist()
    x = a.x.tolist()
    zz = [ri * ri + xi * xi for ri, xi in zip(r, x)]
    pi, qi = d.arrays(net)
    inj_p = pi.tolist()
    inj_q = qi.tolist()
    order = net.rooted_order

    v = [1.0] * n
    p_send = [0.0] * n
    q_send = [0.0] * n
    p_recv = [0.0] * n
    q_recv = [0.0] * n
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        cp = [0.0] * n
        cq = [0.0] * n
        for k in range(n - 1, 0, -1):
            pr = cp[k] - inj_p[k]
            qr = cq[k] - inj_q[k]
            loss = (pr * pr + qr * qr) / v[k]
            ps = pr + r[k] * loss
            qs = qr + x[k] * loss
            p_recv[k], q_recv[k] = pr, qr
            p_send[k], q_send[k] = ps, qs
            cp[parent[k]] += ps
            cq[parent[k]] += qs
        delta = 0.0
        for k in range(1, n):
            vp = v[parent[k]]
            ps, qs = p_send[k], q_send[k]
            new = vp - 2.0 * (r[k] * ps + x[k] * qs) + zz[k] * (ps * ps + qs * qs) / vp
            if not new > 0.0:
                raise VoltageCollapseError(it, order[k])
            delta = max(delta, abs(math.sqrt(new) - math.sqrt(v[k])))
            v[k] = new
        if delta < tol:
            converged = True
            break
    return _finish(net, v, p_send, q_send, p_recv, q_recv, inj_p, inj_q, converged, it, "exact")


def solve_linear(net: NetworkModel, d: Dispatch) -> PowerFlowSolution:
    """Lossless linear DistFlow.

    Branch flows are the summed downstream injections; squared voltages follow
    ``v_j = v_i - 2 (r P_ij + x Q_ij)`` from the slack. Directed flows are
    exactly antisymmetric.
    """
    a = net.arrays
    n = a.n_bus
    pi, qi = d.arrays(net)
    p = -pi.copy()
    q = -qi.copy()
    p[0] = q[0] = 0.0
    for k in range(n - 1, 0, -1):
        p[a.parent[k]] += p[k]
        q[a.parent[k]] += q[k]
    v = np.ones(n)
    for k in range(1, n):
        v[k] = v[a.parent[k]] - 2.0 * (a.r[k] * p[k] + a.x[k] * q[k])
    p[0] = q[0] = 0.0
    return _finish(net, v, p, q, p, q, pi, qi, True, 1, "linear")


def dispatch_to_dict(net: NetworkModel, d: Dispatch) -> dict:
    return {b: [d.inj_p[b], d.inj_q[b]] for b in net.rooted_order[1:]}


def dispatch_from_dict(net: NetworkModel, doc: dict) -> Dispatch:
    missing = [b for b in net.rooted_order[1:] if b not in doc]
    if missing:
        raise ValueError(f"dispatch lacks buses: {', '.join(missing)}")
    return Dispatch(
        inj_p={b: float(doc[b][0]) for b in net.rooted_order[1:]},
        inj_q={b: float(doc[b][1]) for b in net.rooted_order[1:]},
    )


def solution_to_dict(net: NetworkModel, sol: PowerFlowSolution) -> dict:
    flows = {}
    for k, e in enumerate(net.directed_ends):
        entry = flows.setdefault(e.line_id, {})
        ln = net.line_by_id[e.line_id]
        direction = "forward" if e.from_bus == ln.from_bus else "reverse"
        entry[direction] = [float(sol.flow_p[k]), float(sol.flow_q[k])]
    return {
        "v_sq": {b: float(sol.v_sq[k]) for k, b in enumerate(net.rooted_order)},
        "flows": flows,
        "method": sol.method,
        "converged": bool(sol.converged),
        "iterations": int(sol.iterations),
    }


def solution_from_dict(net: NetworkModel, doc: dict) -> PowerFlowSolution:
    v_sq = np.array([float(doc["v_sq"][b]) for b in net.rooted_order])
    flow_p = np.zeros(len(net.directed_ends))
    flow_q = np.zeros(len(net.directed_ends))
    for k, e in enumerate(net.directed_ends):
        ln = net.line_by_id[e.line_id]
        direction = "forward" if e.from_bus == ln.from_bus else "reverse"
        flow_p[k], flow_q[k] = doc["flows"][e.line_id][direction]
    a = net.arrays
    inj_p = np.zeros(a.n_bus)
    inj_q = np.zeros(a.n_bus)
    np.add.at(inj_p, a.end_from, flow_p)
    np.add.at(inj_q, a.end_from, flow_q)
    return PowerFlowSolution(
        v_sq=v_sq,
        flow_p=flow_p,
        flow_q=flow_q,
        inj_p=inj_p,
        inj_q=inj_q,
        converged=bool(doc.get("converged", True)),
        iterations=int(doc.get("iterations", 0)),
        method=str(doc.get("method", "exact")),
    )


def write_json(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")
