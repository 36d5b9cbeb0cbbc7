"""Radial network data model, validation and network-file I/O."""

from __future__ import annotations

import json
import os
import re
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

DEFAULT_BASE_KV = 4.16
FIXTURE_ENV = "RADIALSE_FIXTURE"


class NetworkFormatError(ValueError):
    """The network document could not be parsed."""


class NetworkValidationError(ValueError):
    """The network violates a topology or data invariant."""

    def __init__(self, findings: list[str]):
        self.findings = list(findings)
        super().__init__("; ".join(self.findings))


@dataclass(frozen=True)
class Bus:
    """A feeder bus. Powers are per-unit on the network base."""

    id: str
    kind: str = "pq"
    load_p: float = 0.0
    load_q: float = 0.0
    dg_capacity_p: float = 0.0

    @property
    def is_slack(self) -> bool:
        return self.kind == "slack"


@dataclass(frozen=True)
class Line:
    """A series branch; ``r`` and ``x`` are per-unit."""

    id: str
    from_bus: str
    to_bus: str
    r: float
    x: float


class DirectedEnd(NamedTuple):
    """One orientation of a line: power leaving ``from_bus`` into the line."""

    line_id: str
    from_bus: str
    to_bus: str

    @property
    def key(self) -> str:
        return f"{self.line_id}:{self.from_bus}"


def natural_key(text: str) -> tuple:
    """Sort key that orders digit runs numerically ("2" < "10")."""
    return tuple(
        (0, int(tok), "") if tok.isdigit() else (1, 0, tok)
        for tok in re.findall(r"\d+|\D+", text)
    )


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Rooted radial feeder.

    Topology-derived indexing (``rooted_order``, ``parent``, ``directed_ends``)
    is computed lazily and only defined for a valid radial network; use
    :func:`validate_radial` first when the input is untrusted.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    base_power: float = 5.0
    base_kv: float = DEFAULT_BASE_KV

    def __post_init__(self) -> None:
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NetworkModel):
            return NotImplemented
        return (
            self.buses == other.buses
            and self.lines == other.lines
            and self.base_power == other.base_power
            and self.base_kv == other.base_kv
        )

    def __hash__(self) -> int:
        return hash((self.buses, self.lines, self.base_power, self.base_kv))

    @property
    def base_impedance(self) -> float:
        return self.base_kv**2 / self.base_power

    @cached_property
    def bus_by_id(self) -> dict[str, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def line_by_id(self) -> dict[str, Line]:
        return {ln.id: ln for ln in self.lines}

    @cached_property
    def slack(self) -> str:
        slacks = [b.id for b in self.buses if b.is_slack]
        if len(slacks) != 1:
            raise NetworkValidationError([f"expected one slack bus, found {len(slacks)}"])
        return slacks[0]

    @cached_property
    def _tree(self) -> tuple[list[str], dict[str, str | None], dict[str, str]]:
        findings = validate_radial(self)
        if findings:
            raise NetworkValidationError(findings)
        adjacency: dict[str, list[tuple[str, str]]] = defaultdict(list)
        for ln in self.lines:
            adjacency[ln.from_bus].append((ln.to_bus, ln.id))
            adjacency[ln.to_bus].append((ln.from_bus, ln.id))
        order = [self.slack]
        parent: dict[str, str | None] = {self.slack: None}
        parent_line: dict[str, str] = {}
        queue = deque(order)
        while queue:
            node = queue.popleft()
            for nxt, line_id in sorted(adjacency[node], key=lambda t: natural_key(t[0])):
                if nxt not in parent:
                    parent[nxt] = node
                    parent_line[nxt] = line_id
                    order.append(nxt)
                    queue.append(nxt)
        return order, parent, parent_line

    @property
    def rooted_order(self) -> list[str]:
        """Bus ids in breadth-first order from the slack bus."""
        return list(self._tree[0])

    @property
    def parent(self) -> dict[str, str | None]:
        return dict(self._tree[1])

    @property
    def parent_line(self) -> dict[str, str]:
        """Child bus id -> id of the line joining it to its parent."""
        return dict(self._tree[2])

    @cached_property
    def bus_index(self) -> dict[str, int]:
        """Bus id -> position in :attr:`rooted_order` (the state layout)."""
        return {b: k for k, b in enumerate(self._tree[0])}

    @cached_property
    def directed_ends(self) -> tuple[DirectedEnd, ...]:
        return tuple(directed_line_index(self))

    @cached_property
    def end_index(self) -> dict[tuple[str, str], int]:
        """(line id, sending bus) -> position in :attr:`directed_ends`."""
        return {(e.line_id, e.from_bus): k for k, e in enumerate(self.directed_ends)}

    @cached_property
    def arrays(self) -> "TreeArrays":
        return TreeArrays.build(self)

    def downstream(self, line_id: str) -> tuple[str, str]:
        """(parent, child) orientation of a line."""
        ln = self.line_by_id[line_id]
        if self._tree[1].get(ln.to_bus) == ln.from_bus:
            return ln.from_bus, ln.to_bus
        return ln.to_bus, ln.from_bus


@dataclass(frozen=True)
class TreeArrays:
    """Index arrays over the rooted tree used by the numerical kernels.

    Buses are in rooted order; branch ``k`` feeds bus ``k + 1`` from
    ``parent[k + 1]``.
    """

    n_bus: int
    parent: np.ndarray
    r: np.ndarray
    x: np.ndarray
    fwd_end: np.ndarray
    rev_end: np.ndarray
    load_p: np.ndarray
    load_q: np.ndarray
    dg_capacity: np.ndarray
    end_from: np.ndarray = field(repr=False)
    end_to: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, net: NetworkModel) -> "TreeArrays":
        order = net.rooted_order
        idx = net.bus_index
        parent_of = net.parent
        parent_line = net.parent_line
        n = len(order)
        parent = np.full(n, -1, dtype=int)
        r = np.zeros(n)
        x = np.zeros(n)
        fwd = np.full(n, -1, dtype=int)
        rev = np.full(n, -1, dtype=int)
        for k, bus in enumerate(order[1:], start=1):
            p = parent_of[bus]
            ln = net.line_by_id[parent_line[bus]]
            parent[k] = idx[p]
            r[k], x[k] = ln.r, ln.x
            fwd[k] = net.end_index[(ln.id, p)]
            rev[k] = net.end_index[(ln.id, bus)]
        buses = [net.bus_by_id[b] for b in order]
        ends = net.directed_ends
        return cls(
            n_bus=n,
            parent=parent,
            r=r,
            x=x,
            fwd_end=fwd,
            rev_end=rev,
            load_p=np.array([b.load_p for b in buses]),
            load_q=np.array([b.load_q for b in buses]),
            dg_capacity=np.array([b.dg_capacity_p for b in buses]),
            end_from=np.array([idx[e.from_bus] for e in ends], dtype=int),
            end_to=np.array([idx[e.to_bus] for e in ends], dtype=int),
        )


def validate_radial(net: NetworkModel) -> list[str]:
    """Return one finding per violated network invariant (empty if valid)."""
    findings: list[str] = []
    ids = [b.id for b in net.buses]
    seen: set[str] = set()
    for bid in ids:
        if bid in seen:
            findings.append(f"duplicate bus id {bid!r}")
        seen.add(bid)
    slacks = [b.id for b in net.buses if b.kind == "slack"]
    if not slacks:
        findings.append("no slack bus")
    elif len(slacks) > 1:
        findings.append(f"multiple slack buses: {', '.join(slacks)}")
    for b in net.buses:
        if b.kind not in ("slack", "pq"):
            findings.append(f"bus {b.id!r}: unknown kind {b.kind!r}")
        if not b.load_p >= 0:
            findings.append(f"bus {b.id!r}: negative load_p")
        if not b.dg_capacity_p >= 0:
            findings.append(f"bus {b.id!r}: negative dg capacity")
        if not np.isfinite(b.load_q):
            findings.append(f"bus {b.id!r}: non-finite load_q")

    line_ids: set[str] = set()
    for ln in net.lines:
        if ln.id in line_ids:
            findings.append(f"duplicate line id {ln.id!r}")
        line_ids.add(ln.id)
        if ln.from_bus == ln.to_bus:
            findings.append(f"line {ln.id!r}: self loop at bus {ln.from_bus!r}")
        for end in (ln.from_bus, ln.to_bus):
            if end not in seen:
                findings.append(f"line {ln.id!r}: unknown bus {end!r}")
        if not ln.r >= 0:
            findings.append(f"line {ln.id!r}: negative resistance")
        if not np.isfinite(ln.x):
            findings.append(f"line {ln.id!r}: non-finite reactance")

    # Union-find over valid endpoints: any edge closing a component is a cycle.
    root = {bid: bid for bid in seen}

    def find(a: str) -> str:
        while root[a] != a:
            root[a] = root[root[a]]
            a = root[a]
        return a

    pairs: set[frozenset[str]] = set()
    for ln in net.lines:
        if ln.from_bus not in seen or ln.to_bus not in seen or ln.from_bus == ln.to_bus:
            continue
        pair = frozenset((ln.from_bus, ln.to_bus))
        if pair in pairs:
            findings.append(f"line {ln.id!r}: parallel line creates cycle")
            continue
        pairs.add(pair)
        a, b = find(ln.from_bus), find(ln.to_bus)
        if a == b:
            findings.append(f"line {ln.id!r}: cycle detected")
        else:
            root[a] = b

    if seen:
        anchor = find(slacks[0]) if len(slacks) >= 1 and slacks[0] in seen else find(ids[0])
        for bid in sorted(seen, key=natural_key):
            if find(bid) != anchor:
                findings.append(f"disconnected bus {bid!r}")
    return findings


def directed_line_index(net: NetworkModel) -> list[DirectedEnd]:
    """Both orientations of every line in canonical order.

    Lines are ordered by their endpoint ids (natural sort, smaller id first);
    each line contributes ``lo -> hi`` immediately followed by ``hi -> lo``.
    File order plays no part.
    """
    def line_key(ln: Line) -> tuple:
        lo, hi = sorted((ln.from_bus, ln.to_bus), key=natural_key)
        return natural_key(lo), natural_key(hi), natural_key(ln.id)

    ends: list[DirectedEnd] = []
    for ln in sorted(net.lines, key=line_key):
        lo, hi = sorted((ln.from_bus, ln.to_bus), key=natural_key)
        ends.append(DirectedEnd(ln.id, lo, hi))
        ends.append(DirectedEnd(ln.id, hi, lo))
    return ends


def network_from_dict(doc: dict) -> NetworkModel:
    """Build a model from a network document in physical units (kW, ohm)."""
    try:
        base_mva = float(doc["base_mva"])
        base_kv = float(doc.get("base_kv", DEFAULT_BASE_KV))
        if base_mva <= 0 or base_kv <= 0:
            raise NetworkFormatError("base_mva and base_kv must be positive")
        kw_per_pu = 1000.0 * base_mva
        z_base = base_kv**2 / base_mva
        buses = [
            Bus(
                id=str(b["id"]),
                kind=str(b.get("kind", "pq")),
                load_p=float(b.get("load_p_kw", 0.0)) / kw_per_pu,
                load_q=float(b.get("load_q_kvar", 0.0)) / kw_per_pu,
                dg_capacity_p=float(b.get("dg_p_kw", 0.0)) / kw_per_pu,
            )
            for b in doc["buses"]
        ]
        lines = [
            Line(
                id=str(ln["id"]),
                from_bus=str(ln["from"]),
                to_bus=str(ln["to"]),
                r=float(ln["r_ohm"]) / z_base,
                x=float(ln["x_ohm"]) / z_base,
            )
            for ln in doc["lines"]
        ]
    except NetworkFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"malformed network document: {exc!r}") from exc
    return NetworkModel(buses=tuple(buses), lines=tuple(lines), base_power=base_mva, base_kv=base_kv)


def network_to_dict(net: NetworkModel) -> dict:
    kw_per_pu = 1000.0 * net.base_power
    z_base = net.base_impedance
    return {
        "base_mva": net.base_power,
        "base_kv": net.base_kv,
        "buses": [
            {
                "id": b.id,
                "kind": b.kind,
                "load_p_kw": b.load_p * kw_per_pu,
                "load_q_kvar": b.load_q * kw_per_pu,
                "dg_p_kw": b.dg_capacity_p * kw_per_pu,
            }
            for b in net.buses
        ],
        "lines": [
            {"id": ln.id, "from": ln.from_bus, "to": ln.to_bus, "r_ohm": ln.r * z_base, "x_ohm": ln.x * z_base}
            for ln in net.lines
        ],
    }


def load_network(path: str | Path) -> NetworkModel:
    """Read, convert to per-unit and validate a network file.

    Raises:
        FileNotFoundError: if ``path`` does not exist.
        NetworkFormatError: if the file is not a well-formed network document.
        NetworkValidationError: if the topology or data is invalid; the
            exception's ``findings`` name each offending element.
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise NetworkFormatError(f"{path}: top level must be an object")
    net = network_from_dict(doc)
    findings = validate_radial(net)
    if findings:
        raise NetworkValidationError(findings)
    net.rooted_order  # noqa: B018  (prime the tree cache)
    return net


def save_network(net: NetworkModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n")


def fixture_path() -> Path:
    """Location of the bundled balanced IEEE-123 fixture.

    ``RADIALSE_FIXTURE`` overrides the packaged file.
    """
    override = os.environ.get(FIXTURE_ENV)
    if override:
        return Path(override)
    return Path(str(resources.files("radialse") / "fixtures" / "ieee123_balanced.json"))


def load_fixture() -> NetworkModel:
    return load_network(fixture_path())
