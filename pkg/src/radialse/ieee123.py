"""Balanced single-phase reduction of the IEEE 123-node test feeder.

The raw tables below transcribe the published feeder data (line segments,
line configurations, spot loads, shunt capacitors, closed switches). The
reduction keeps the three-phase backbone and produces the network document
shipped as ``fixtures/ieee123_balanced.json``:

* closed switches are treated as zero-impedance ties and their end buses are
  merged (13-152, 18-135, 60-160, 97-197);
* voltage regulators (150-149, 9-14, 25-26, 160-67) and the 61-610
  transformer are dropped; the regulator in 160-67 sits in series with the
  160-67 segment, which is kept;
* open switches (250-251, 450-451, 54-94, 151-300, 300-350) stay open;
* every one- and two-phase lateral is collapsed onto the backbone bus it hangs
  from: its spot loads and capacitors are summed into that bus and its
  impedance is discarded;
* each backbone segment gets the positive-sequence impedance of its
  configuration, ``mean(self) - mean(mutual)`` over the three phases;
* shunt capacitors become negative reactive load at their bus.

What survives is 61 buses (slack 149 plus 60 others) joined by 60 segments.
The DG nameplates are the 49 units assigned to backbone buses. How the 123
nodes map onto 61 buses is a reconstruction that matches the reported bus and
line counts; it is not a published mapping.
"""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

FEET_PER_MILE = 5280.0
BASE_KV = 4.16
BASE_MVA = 5.0
SLACK = "149"

# Phase impedance matrices, ohm/mile, upper triangle (aa, ab, ac, bb, bc, cc).
THREE_PHASE_CONFIGS: dict[int, tuple[complex, ...]] = {
    1: (0.4576 + 1.0780j, 0.1560 + 0.5017j, 0.1535 + 0.3849j,
        0.4666 + 1.0482j, 0.1580 + 0.4236j, 0.4615 + 1.0651j),
    2: (0.4666 + 1.0482j, 0.1580 + 0.4236j, 0.1560 + 0.5017j,
        0.4615 + 1.0651j, 0.1535 + 0.3849j, 0.4576 + 1.0780j),
    3: (0.4615 + 1.0651j, 0.1535 + 0.3849j, 0.1580 + 0.4236j,
        0.4576 + 1.0780j, 0.1560 + 0.5017j, 0.4666 + 1.0482j),
    4: (0.4615 + 1.0651j, 0.1580 + 0.4236j, 0.1535 + 0.3849j,
        0.4666 + 1.0482j, 0.1560 + 0.5017j, 0.4576 + 1.0780j),
    5: (0.4666 + 1.0482j, 0.1560 + 0.5017j, 0.1580 + 0.4236j,
        0.4576 + 1.0780j, 0.1535 + 0.3849j, 0.4615 + 1.0651j),
    6: (0.4576 + 1.0780j, 0.1535 + 0.3849j, 0.1560 + 0.5017j,
        0.4615 + 1.0651j, 0.1580 + 0.4236j, 0.4666 + 1.0482j),
    12: (1.5209 + 0.7521j, 0.5198 + 0.2775j, 0.4924 + 0.2157j,
         1.5329 + 0.7162j, 0.5198 + 0.2775j, 1.5209 + 0.7521j),
}

# (node A, node B, length ft, configuration). Configs 7-11 are lateral types.
LINE_SEGMENTS: list[tuple[str, str, float, int]] = [
    ("1", "2", 175, 10), ("1", "3", 250, 11), ("1", "7", 300, 1),
    ("3", "4", 200, 11), ("3", "5", 325, 11), ("5", "6", 250, 11),
    ("7", "8", 200, 1), ("8", "12", 225, 10), ("8", "9", 225, 9),
    ("8", "13", 300, 1), ("9", "14", 425, 9), ("13", "34", 150, 11),
    ("13", "18", 825, 2), ("14", "11", 250, 9), ("14", "10", 250, 9),
    ("15", "16", 375, 11), ("15", "17", 350, 11), ("18", "19", 250, 9),
    ("18", "21", 300, 2), ("19", "20", 325, 9), ("21", "22", 525, 10),
    ("21", "23", 250, 2), ("23", "24", 550, 11), ("23", "25", 275, 2),
    ("25", "26", 350, 7), ("25", "28", 200, 2), ("26", "27", 275, 7),
    ("26", "31", 225, 11), ("27", "33", 500, 9), ("28", "29", 300, 2),
    ("29", "30", 350, 2), ("30", "250", 200, 2), ("31", "32", 300, 11),
    ("34", "15", 100, 11), ("35", "36", 650, 8), ("35", "40", 250, 1),
    ("36", "37", 300, 9), ("36", "38", 250, 10), ("38", "39", 325, 10),
    ("40", "41", 325, 11), ("40", "42", 250, 1), ("42", "43", 500, 10),
    ("42", "44", 200, 1), ("44", "45", 200, 9), ("44", "47", 250, 1),
    ("45", "46", 300, 9), ("47", "48", 150, 4), ("47", "49", 250, 4),
    ("49", "50", 250, 4), ("50", "51", 250, 4), ("51", "151", 500, 4),
    ("52", "53", 200, 1), ("53", "54", 125, 1), ("54", "55", 275, 1),
    ("54", "57", 350, 3), ("55", "56", 275, 1), ("57", "58", 250, 10),
    ("57", "60", 750, 3), ("58", "59", 250, 10), ("60", "61", 550, 5),
    ("60", "62", 250, 12), ("62", "63", 175, 12), ("63", "64", 350, 12),
    ("64", "65", 425, 12), ("65", "66", 325, 12), ("67", "68", 200, 9),
    ("67", "72", 275, 3), ("67", "97", 250, 3), ("68", "69", 275, 9),
    ("69", "70", 325, 9), ("70", "71", 275, 9), ("72", "73", 275, 11),
    ("72", "76", 200, 3), ("73", "74", 350, 11), ("74", "75", 400, 11),
    ("76", "77", 400, 6), ("76", "86", 700, 3), ("77", "78", 100, 6),
    ("78", "79", 225, 6), ("78", "80", 475, 6), ("80", "81", 475, 6),
    ("81", "82", 250, 6), ("81", "84", 675, 11), ("82", "83", 250, 6),
    ("84", "85", 475, 11), ("86", "87", 450, 6), ("87", "88", 175, 9),
    ("87", "89", 275, 6), ("89", "90", 225, 10), ("89", "91", 225, 6),
    ("91", "92", 300, 11), ("91", "93", 225, 6), ("93", "94", 275, 9),
    ("93", "95", 300, 6), ("95", "96", 200, 10), ("97", "98", 275, 3),
    ("98", "99", 550, 3), ("99", "100", 300, 3), ("100", "450", 800, 3),
    ("101", "102", 225, 11), ("101", "105", 275, 3), ("102", "103", 325, 11),
    ("103", "104", 700, 11), ("105", "106", 225, 10), ("105", "108", 325, 3),
    ("106", "107", 575, 10), ("108", "109", 450, 9), ("108", "300", 1000, 3),
    ("109", "110", 300, 9), ("110", "111", 575, 9), ("110", "112", 125, 9),
    ("112", "113", 525, 9), ("113", "114", 325, 9), ("135", "35", 375, 4),
    ("149", "1", 400, 1), ("152", "52", 400, 1), ("160", "67", 350, 6),
    ("197", "101", 250, 3),
]

CLOSED_SWITCHES: list[tuple[str, str]] = [
    ("13", "152"), ("18", "135"), ("60", "160"), ("97", "197"),
]

# Spot loads: node -> ((P_a, Q_a), (P_b, Q_b), (P_c, Q_c)) in kW / kVAr.
SPOT_LOADS: dict[str, tuple[tuple[float, float], ...]] = {
    "1": ((40, 20), (0, 0), (0, 0)), "2": ((0, 0), (20, 10), (0, 0)),
    "4": ((0, 0), (0, 0), (40, 20)), "5": ((0, 0), (0, 0), (20, 10)),
    "6": ((0, 0), (0, 0), (40, 20)), "7": ((20, 10), (0, 0), (0, 0)),
    "9": ((40, 20), (0, 0), (0, 0)), "10": ((20, 10), (0, 0), (0, 0)),
    "11": ((40, 20), (0, 0), (0, 0)), "12": ((0, 0), (20, 10), (0, 0)),
    "16": ((0, 0), (0, 0), (40, 20)), "17": ((0, 0), (0, 0), (20, 10)),
    "19": ((40, 20), (0, 0), (0, 0)), "20": ((40, 20), (0, 0), (0, 0)),
    "22": ((0, 0), (40, 20), (0, 0)), "24": ((0, 0), (0, 0), (40, 20)),
    "28": ((40, 20), (0, 0), (0, 0)), "29": ((40, 20), (0, 0), (0, 0)),
    "30": ((0, 0), (0, 0), (40, 20)), "31": ((0, 0), (0, 0), (20, 10)),
    "32": ((0, 0), (0, 0), (20, 10)), "33": ((40, 20), (0, 0), (0, 0)),
    "34": ((0, 0), (0, 0), (40, 20)), "35": ((40, 20), (0, 0), (0, 0)),
    "37": ((40, 20), (0, 0), (0, 0)), "38": ((0, 0), (20, 10), (0, 0)),
    "39": ((0, 0), (20, 10), (0, 0)), "41": ((0, 0), (0, 0), (20, 10)),
    "42": ((20, 10), (0, 0), (0, 0)), "43": ((0, 0), (40, 20), (0, 0)),
    "45": ((20, 10), (0, 0), (0, 0)), "46": ((20, 10), (0, 0), (0, 0)),
    "47": ((35, 25), (35, 25), (35, 25)), "48": ((70, 50), (70, 50), (70, 50)),
    "49": ((35, 25), (70, 50), (35, 20)), "50": ((0, 0), (0, 0), (40, 20)),
    "51": ((20, 10), (0, 0), (0, 0)), "52": ((40, 20), (0, 0), (0, 0)),
    "53": ((40, 20), (0, 0), (0, 0)), "55": ((20, 10), (0, 0), (0, 0)),
    "56": ((0, 0), (20, 10), (0, 0)), "58": ((0, 0), (20, 10), (0, 0)),
    "59": ((0, 0), (20, 10), (0, 0)), "60": ((20, 10), (0, 0), (0, 0)),
    "62": ((0, 0), (0, 0), (40, 20)), "63": ((40, 20), (0, 0), (0, 0)),
    "64": ((0, 0), (75, 35), (0, 0)), "65": ((35, 25), (35, 25), (70, 50)),
    "66": ((0, 0), (0, 0), (75, 35)), "68": ((20, 10), (0, 0), (0, 0)),
    "69": ((40, 20), (0, 0), (0, 0)), "70": ((20, 10), (0, 0), (0, 0)),
    "71": ((40, 20), (0, 0), (0, 0)), "73": ((0, 0), (0, 0), (40, 20)),
    "74": ((0, 0), (0, 0), (40, 20)), "75": ((0, 0), (0, 0), (40, 20)),
    "76": ((105, 80), (70, 50), (70, 50)), "77": ((0, 0), (40, 20), (0, 0)),
    "79": ((40, 20), (0, 0), (0, 0)), "80": ((0, 0), (40, 20), (0, 0)),
    "82": ((40, 20), (0, 0), (0, 0)), "83": ((0, 0), (0, 0), (20, 10)),
    "84": ((0, 0), (0, 0), (20, 10)), "85": ((0, 0), (0, 0), (40, 20)),
    "86": ((0, 0), (20, 10), (0, 0)), "87": ((0, 0), (40, 20), (0, 0)),
    "88": ((40, 20), (0, 0), (0, 0)), "90": ((0, 0), (40, 20), (0, 0)),
    "92": ((0, 0), (0, 0), (40, 20)), "94": ((40, 20), (0, 0), (0, 0)),
    "95": ((0, 0), (20, 10), (0, 0)), "96": ((0, 0), (20, 10), (0, 0)),
    "98": ((40, 20), (0, 0), (0, 0)), "99": ((0, 0), (40, 20), (0, 0)),
    "100": ((0, 0), (0, 0), (40, 20)), "102": ((0, 0), (0, 0), (20, 10)),
    "103": ((0, 0), (0, 0), (40, 20)), "104": ((0, 0), (0, 0), (40, 20)),
    "106": ((0, 0), (40, 20), (0, 0)), "107": ((0, 0), (40, 20), (0, 0)),
    "109": ((40, 20), (0, 0), (0, 0)), "111": ((20, 10), (0, 0), (0, 0)),
    "112": ((20, 10), (0, 0), (0, 0)), "113": ((40, 20), (0, 0), (0, 0)),
    "114": ((20, 10), (0, 0), (0, 0)),
}

# Shunt capacitors, total kVAr over installed phases.
CAPACITORS_KVAR: dict[str, float] = {"83": 600.0, "88": 50.0, "90": 50.0, "92": 50.0}

# DG nameplate ratings in kW, by original node number.
DG_UNITS_KW: dict[str, float] = {
    "1": 40, "13": 10, "23": 40, "25": 20, "28": 10, "29": 10, "30": 10,
    "35": 20, "40": 10, "42": 40, "44": 10, "47": 30, "48": 20, "50": 10,
    "51": 50, "53": 20, "54": 30, "55": 30, "56": 10, "57": 20, "60": 20,
    "61": 20, "62": 20, "63": 30, "64": 10, "65": 50, "66": 40, "67": 40,
    "72": 10, "76": 10, "78": 40, "79": 30, "80": 30, "86": 50, "87": 20,
    "89": 10, "91": 30, "93": 40, "95": 20, "97": 10, "98": 30, "99": 20,
    "100": 40, "105": 30, "108": 40, "151": 30, "250": 10, "300": 10,
    "450": 10,
}


def positive_sequence(config: int) -> complex:
    """Positive-sequence series impedance (ohm/mile) of a three-phase config."""
    aa, ab, ac, bb, bc, cc = THREE_PHASE_CONFIGS[config]
    return (aa + bb + cc) / 3.0 - (ab + ac + bc) / 3.0


def _natural(bus_id: str) -> tuple[int, str]:
    return (int(bus_id), bus_id) if bus_id.isdigit() else (10**9, bus_id)


def reduce_feeder() -> dict:
    """Build the balanced 61-bus network document (physical units)."""
    merged = {b: a for a, b in CLOSED_SWITCHES}

    def rep(node: str) -> str:
        return merged.get(node, node)

    backbone = [seg for seg in LINE_SEGMENTS if seg[3] in THREE_PHASE_CONFIGS]
    backbone_nodes = {rep(n) for a, b, _, _ in backbone for n in (a, b)}

    # Laterals: walk the full segment graph from each backbone bus without
    # entering another backbone bus.
    adjacency: dict[str, set[str]] = defaultdict(set)
    for a, b, _, _ in LINE_SEGMENTS:
        adjacency[rep(a)].add(rep(b))
        adjacency[rep(b)].add(rep(a))
    owner: dict[str, str] = {n: n for n in backbone_nodes}
    for root in sorted(backbone_nodes, key=_natural):
        stack = [root]
        while stack:
            node = stack.pop()
            for nxt in adjacency[node]:
                if nxt not in owner:
                    owner[nxt] = root
                    stack.append(nxt)

    load_p: dict[str, float] = defaultdict(float)
    load_q: dict[str, float] = defaultdict(float)
    for node, phases in SPOT_LOADS.items():
        load_p[owner[rep(node)]] += sum(p for p, _ in phases)
        load_q[owner[rep(node)]] += sum(q for _, q in phases)
    for node, kvar in CAPACITORS_KVAR.items():
        load_q[owner[rep(node)]] -= kvar

    buses = []
    for bus in sorted(backbone_nodes, key=_natural):
        buses.append({
            "id": bus,
            "kind": "slack" if bus == SLACK else "pq",
            "load_p_kw": float(load_p[bus]),
            "load_q_kvar": float(load_q[bus]),
            "dg_p_kw": float(DG_UNITS_KW.get(bus, 0.0)),
        })
    lines = []
    for a, b, length_ft, config in backbone:
        z = positive_sequence(config) * length_ft / FEET_PER_MILE
        lines.append({
            "id": f"{rep(a)}-{rep(b)}",
            "from": rep(a),
            "to": rep(b),
            "r_ohm": round(z.real, 9),
            "x_ohm": round(z.imag, 9),
        })
    return {"base_mva": BASE_MVA, "base_kv": BASE_KV, "buses": buses, "lines": lines}


def write_fixture(path: str | Path) -> None:
    Path(path).write_text(json.dumps(reduce_feeder(), indent=1) + "\n")


if __name__ == "__main__":
    import sys

    write_fixture(sys.argv[1] if len(sys.argv) > 1 else "ieee123_balanced.json")
