"""Noisy magnitude measurements, measurement-set selection and observability."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
import json

import numpy as np

from .netmodel import NetworkModel
from .powerflow import PowerFlowSolution

DEFAULT_FRACTIONS = {"nodal": (0.60, 0.80), "edge": (0.30, 0.90)}
VIRTUAL_WEIGHT = 1.0
STIFF_VIRTUAL_WEIGHT = 1e6
ZERO_INJECTION_TOL = 1e-12


class Kind(str, Enum):
    V_SQ = "V_SQ"
    INJ_P = "INJ_P"
    INJ_Q = "INJ_Q"
    FLOW_P = "FLOW_P"
    FLOW_Q = "FLOW_Q"
    VIRTUAL_DROP = "VIRTUAL_DROP"
    VIRTUAL_ZERO_INJ_P = "VIRTUAL_ZERO_INJ_P"
    VIRTUAL_ZERO_INJ_Q = "VIRTUAL_ZERO_INJ_Q"
    VIRTUAL_ANTISYM_P = "VIRTUAL_ANTISYM_P"
    VIRTUAL_ANTISYM_Q = "VIRTUAL_ANTISYM_Q"

    @property
    def is_virtual(self) -> bool:
        return self.value.startswith("VIRTUAL")


class ObservabilityError(RuntimeError):
    def __init__(self, rank: int, state_dim: int, attempts: int):
        self.rank = rank
        self.state_dim = state_dim
        self.attempts = attempts
        super().__init__(
            f"measurement set not observable after {attempts} draw(s): rank {rank} < {state_dim}"
        )


@dataclass(frozen=True)
class NoiseConfig:
    """Relative error bounds for voltage (``e_v``) and current (``e_i``) magnitudes."""

    e_v: float = 0.001
    e_i: float = 0.001
    distribution: str = "uniform"
    gaussian_sigma_factor: float = 1.0 / 3.0

    def __post_init__(self) -> None:
        for name in ("e_v", "e_i"):
            val = getattr(self, name)
            if not 0.0 <= val <= 0.05:
                raise ValueError(f"{name} must lie in [0, 0.05], got {val}")
        if self.distribution not in ("uniform", "gaussian"):
            raise ValueError(f"unknown noise distribution {self.distribution!r}")

    def draw(self, rng: np.random.Generator, bound: float, size: int) -> np.ndarray:
        """Relative errors bounded by ``bound`` (gaussian draws are truncated)."""
        if self.distribution == "uniform":
            return rng.uniform(-1.0, 1.0, size) * bound
        eps = rng.standard_normal(size) * bound * self.gaussian_sigma_factor
        return np.clip(eps, -bound, bound)


@dataclass(frozen=True)
class Measurement:
    kind: Kind
    target: str
    value: float = 0.0
    weight: float = 1.0
    sigma: float = 0.0


@dataclass(frozen=True, eq=False)
class MeasurementPool:
    """Every candidate measurement for one operating point.

    Bus arrays follow ``net.rooted_order``; end arrays follow
    ``net.directed_ends``. ``*_bound`` arrays hold the absolute error bound of
    each candidate.
    """

    v_sq: np.ndarray
    inj_p: np.ndarray
    inj_q: np.ndarray
    flow_p: np.ndarray
    flow_q: np.ndarray
    v_sq_bound: np.ndarray
    inj_p_bound: np.ndarray
    inj_q_bound: np.ndarray
    flow_p_bound: np.ndarray
    flow_q_bound: np.ndarray
    zero_injection: np.ndarray
    noise: NoiseConfig


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    measurements: tuple[Measurement, ...]
    preference: str = "nodal"
    node_fraction: float = 1.0
    flow_fraction: float = 1.0
    seed: dict = field(default_factory=dict)
    resamples: int = 0

    def __len__(self) -> int:
        return len(self.measurements)


@dataclass(frozen=True)
class ObservabilityReport:
    observable: bool
    rank: int
    state_dim: int


def synthesize_pool(truth: PowerFlowSolution, net: NetworkModel, noise: NoiseConfig, seed) -> MeasurementPool:
    """Perturb every true magnitude with independent multiplicative errors.

    Voltages get ``(v (1 + eps_v))^2``; injections and flows get
    ``value (1 + eps_v) (1 + eps_i)`` with fresh draws per candidate.
    """
    if not truth.converged:
        raise ValueError("cannot synthesize measurements from a non-converged solution")
    rng = np.random.default_rng(seed)
    nb = len(truth.v_sq)
    ne = len(truth.flow_p)
    draw_v = lambda size: noise.draw(rng, noise.e_v, size)  # noqa: E731
    draw_i = lambda size: noise.draw(rng, noise.e_i, size)  # noqa: E731

    v_sq = truth.v_sq * (1.0 + draw_v(nb)) ** 2  # (v (1 + eps))^2 without a sqrt round trip
    inj_p = truth.inj_p * (1.0 + draw_v(nb)) * (1.0 + draw_i(nb))
    inj_q = truth.inj_q * (1.0 + draw_v(nb)) * (1.0 + draw_i(nb))
    flow_p = truth.flow_p * (1.0 + draw_v(ne)) * (1.0 + draw_i(ne))
    flow_q = truth.flow_q * (1.0 + draw_v(ne)) * (1.0 + draw_i(ne))

    v_rel = (1.0 + noise.e_v) ** 2 - 1.0
    s_rel = (1.0 + noise.e_v) * (1.0 + noise.e_i) - 1.0
    zero = (np.abs(truth.inj_p) <= ZERO_INJECTION_TOL) & (np.abs(truth.inj_q) <= ZERO_INJECTION_TOL)
    zero[0] = False
    return MeasurementPool(
        v_sq=v_sq,
        inj_p=inj_p,
        inj_q=inj_q,
        flow_p=flow_p,
        flow_q=flow_q,
        v_sq_bound=np.abs(v_sq) * v_rel,
        inj_p_bound=np.abs(inj_p) * s_rel,
        inj_q_bound=np.abs(inj_q) * s_rel,
        flow_p_bound=np.abs(flow_p) * s_rel,
        flow_q_bound=np.abs(flow_q) * s_rel,
        zero_injection=zero,
        noise=noise,
    )


@dataclass(frozen=True)
class Placement:
    """Which buses (rooted-order indices) and directed ends carry meters."""

    buses: tuple[int, ...]
    ends: tuple[int, ...]


def _count(fraction: float, total: int) -> int:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    return min(total, math.ceil(round(fraction * total, 9)))


def draw_placement(net: NetworkModel, fractions: tuple[float, float], seed) -> Placement:
    """Sample meter locations uniformly without replacement."""
    rng = np.random.default_rng(seed)
    n_bus = len(net.buses) - 1
    n_end = len(net.directed_ends)
    buses = rng.choice(np.arange(1, n_bus + 1), size=_count(fractions[0], n_bus), replace=False)
    ends = rng.choice(n_end, size=_count(fractions[1], n_end), replace=False)
    return Placement(tuple(sorted(int(b) for b in buses)), tuple(sorted(int(e) for e in ends)))


def _sub_seed(seed, attempt: int) -> np.random.SeedSequence:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (attempt,))


def _weights(sigmas: np.ndarray, weighting: str, sigma_floor: float) -> np.ndarray:
    if weighting == "uniform":
        return np.ones_like(sigmas)
    if weighting != "inverse_variance":
        raise ValueError(f"unknown weighting {weighting!r}")
    if sigmas.size == 0:
        return sigmas.copy()
    s = np.maximum(sigmas, sigma_floor)
    w = 1.0 / s**2
    return w / np.median(w)


def build_set(
    pool: MeasurementPool,
    net: NetworkModel,
    placement: Placement,
    *,
    antisymmetry_rows: bool = False,
    weighting: str = "uniform",
    virtual_weight: float = VIRTUAL_WEIGHT,
    sigma_floor: float = 1e-6,
) -> list[Measurement]:
    """Materialize a placement into measurement rows.

    Always contains the slack voltage, one drop row per line and zero-injection
    rows for buses with no true injection.
    """
    order = net.rooted_order
    ends = net.directed_ends
    sq3 = math.sqrt(3.0)
    phys: list[tuple[Kind, str, float, float]] = [(Kind.V_SQ, order[0], pool.v_sq[0], pool.v_sq_bound[0] / sq3)]
    for b in placement.buses:
        phys.append((Kind.V_SQ, order[b], pool.v_sq[b], pool.v_sq_bound[b] / sq3))
        phys.append((Kind.INJ_P, order[b], pool.inj_p[b], pool.inj_p_bound[b] / sq3))
        phys.append((Kind.INJ_Q, order[b], pool.inj_q[b], pool.inj_q_bound[b] / sq3))
    for e in placement.ends:
        key = ends[e].key
        phys.append((Kind.FLOW_P, key, pool.flow_p[e], pool.flow_p_bound[e] / sq3))
        phys.append((Kind.FLOW_Q, key, pool.flow_q[e], pool.flow_q_bound[e] / sq3))
    sig = np.array([p[3] for p in phys])
    w = _weights(sig, weighting, sigma_floor)

    rows = [Measurement(phys[0][0], phys[0][1], float(phys[0][2]), float(w[0]), float(sig[0]))]
    parent_line = net.parent_line
    for bus in order[1:]:
        rows.append(Measurement(Kind.VIRTUAL_DROP, parent_line[bus], 0.0, virtual_weight))
    for k in np.flatnonzero(pool.zero_injection):
        rows.append(Measurement(Kind.VIRTUAL_ZERO_INJ_P, order[k], 0.0, virtual_weight))
        rows.append(Measurement(Kind.VIRTUAL_ZERO_INJ_Q, order[k], 0.0, virtual_weight))
    if antisymmetry_rows:
        for bus in order[1:]:
            rows.append(Measurement(Kind.VIRTUAL_ANTISYM_P, parent_line[bus], 0.0, virtual_weight))
            rows.append(Measurement(Kind.VIRTUAL_ANTISYM_Q, parent_line[bus], 0.0, virtual_weight))
    for (kind, target, value, sigma), weight in zip(phys[1:], w[1:]):
        rows.append(Measurement(kind, target, float(value), float(weight), float(sigma)))
    return rows


def choose_placement(
    pool: MeasurementPool,
    net: NetworkModel,
    preference: str = "nodal",
    fractions: tuple[float, float] | None = None,
    seed=0,
    max_resamples: int = 100,
    **build_options,
) -> tuple[Placement, int, tuple[float, float]]:
    """Draw meter locations until the set is observable.

    Returns the placement, the index of the successful draw (0 when the first
    draw was observable) and the fractions used. Observability depends only
    on locations, never on measured values.

    Raises:
        ObservabilityError: when none of the ``max_resamples + 1`` draws is
            observable.
    """
    if preference not in DEFAULT_FRACTIONS:
        raise ValueError(f"preference must be 'nodal' or 'edge', got {preference!r}")
    fractions = tuple(fractions) if fractions is not None else DEFAULT_FRACTIONS[preference]
    state_dim = len(net.buses) + 2 * len(net.directed_ends)
    report = ObservabilityReport(False, 0, state_dim)
    for attempt in range(max_resamples + 1):
        placement = draw_placement(net, fractions, _sub_seed(seed, attempt))
        rows = build_set(pool, net, placement, **build_options)
        report = check_observability(net, MeasurementSet(tuple(rows)))
        if report.observable:
            return placement, attempt, fractions
    raise ObservabilityError(report.rank, report.state_dim, max_resamples + 1)


def select_set(
    pool: MeasurementPool,
    net: NetworkModel,
    preference: str = "nodal",
    fractions: tuple[float, float] | None = None,
    seed=0,
    max_resamples: int = 100,
    **build_options,
) -> MeasurementSet:
    """Draw an observable measurement set.

    Samples ``ceil(node_fraction * (#buses - 1))`` buses (voltage plus both
    injections each) and ``ceil(flow_fraction * #directed ends)`` directed
    ends (active and reactive flow each). A rank-deficient draw is redrawn
    from a fresh sub-seed, at most ``max_resamples`` times.

    Raises:
        ObservabilityError: when no draw is observable.
    """
    placement, attempt, fractions = choose_placement(
        pool, net, preference, fractions, seed, max_resamples, **build_options
    )
    return MeasurementSet(
        measurements=tuple(build_set(pool, net, placement, **build_options)),
        preference=preference,
        node_fraction=fractions[0],
        flow_fraction=fractions[1],
        seed=_provenance(seed, attempt),
        resamples=attempt,
    )


def _provenance(seed, attempt: int) -> dict:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return {"entropy": ss.entropy, "spawn_key": list(ss.spawn_key), "attempt": attempt}


def check_observability(net: NetworkModel, mset: MeasurementSet) -> ObservabilityReport:
    """Numerical column rank of the (unweighted) design matrix."""
    from .estimator import assemble, numerical_rank

    state_dim = len(net.buses) + 2 * len(net.directed_ends)
    if not mset.measurements:
        return ObservabilityReport(False, 0, state_dim)
    rank = numerical_rank(assemble(net, mset).H)
    return ObservabilityReport(rank == state_dim, rank, state_dim)


def set_to_dict(mset: MeasurementSet) -> dict:
    return {
        "preference": mset.preference,
        "node_fraction": mset.node_fraction,
        "flow_fraction": mset.flow_fraction,
        "seed": mset.seed,
        "resamples": mset.resamples,
        "measurements": [
            {"kind": m.kind.value, "target": m.target, "value": m.value, "weight": m.weight, "sigma": m.sigma}
            for m in mset.measurements
        ],
    }


def set_from_dict(doc: dict) -> MeasurementSet:
    return MeasurementSet(
        measurements=tuple(
            Measurement(Kind(m["kind"]), str(m["target"]), float(m["value"]), float(m["weight"]), float(m.get("sigma", 0.0)))
            for m in doc["measurements"]
        ),
        preference=doc.get("preference", "nodal"),
        node_fraction=float(doc.get("node_fraction", 1.0)),
        flow_fraction=float(doc.get("flow_fraction", 1.0)),
        seed=doc.get("seed", {}),
        resamples=int(doc.get("resamples", 0)),
    )


def load_set(path: str | Path) -> MeasurementSet:
    return set_from_dict(json.loads(Path(path).read_text()))
