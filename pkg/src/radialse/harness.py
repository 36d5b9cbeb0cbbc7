"""Monte Carlo error statistics over random dispatches and the scenario grid.

Every dispatch index owns three RNG streams, ``SeedSequence([master_seed,
index, tag])`` with tag 0 for the dispatch, 1 for measurement noise and 2 for
meter placement. Scenarios therefore share operating points and noise
patterns (common random numbers), and results never depend on which worker
evaluated an index.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .estimator import WLSFactorization, assemble, postfilter_antisymmetry, solve_wls
from .measurement import (
    DEFAULT_FRACTIONS,
    VIRTUAL_WEIGHT,
    MeasurementSet,
    NoiseConfig,
    ObservabilityError,
    build_set,
    choose_placement,
    synthesize_pool,
)
from .netmodel import NetworkModel
from .powerflow import DispatchConfig, PowerFlowSolution, generate_dispatch, solve_exact, solve_linear

STREAM_DISPATCH = 0
STREAM_NOISE = 1
STREAM_SELECT = 2

DEFAULT_LEVELS = (0.001, 0.003, 0.006, 0.01)
DEFAULT_POSTFILTER_THRESHOLD = 0.5
ABORT_FAILURE_RATE = 0.01
OUTLIER_FACTOR = 5.0
STATS = ("mean_v", "mean_f", "max_v", "max_f")


class DispatchError(RuntimeError):
    """A pipeline step failed for one dispatch index."""

    def __init__(self, index: int, cause: BaseException):
        self.index = index
        self.cause = cause
        super().__init__(f"dispatch {index}: {type(cause).__name__}: {cause}")


class ScenarioAborted(RuntimeError):
    def __init__(self, failed: int, total: int):
        self.failed = failed
        self.total = total
        super().__init__(f"{failed} of {total} dispatches had no observable measurement set")


@dataclass(frozen=True)
class ScenarioConfig:
    e_v: float = 0.001
    e_i: float = 0.001
    preference: str = "nodal"
    dispatch_count: int = 1500
    master_seed: int = 0
    fractions: tuple[float, float] | None = None
    postfilter: bool = False
    postfilter_threshold: float = DEFAULT_POSTFILTER_THRESHOLD
    normalization: str = "class_mean"
    distribution: str = "uniform"
    truth_method: str = "exact"
    weighting: str = "uniform"
    virtual_weight: float = VIRTUAL_WEIGHT
    antisymmetry_rows: bool = False
    max_resamples: int = 100
    dispatch: DispatchConfig = field(default_factory=DispatchConfig)

    def __post_init__(self) -> None:
        if self.preference not in DEFAULT_FRACTIONS:
            raise ValueError(f"preference must be 'nodal' or 'edge', got {self.preference!r}")
        if self.normalization not in ("class_mean", "per_element"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.truth_method not in ("exact", "linear"):
            raise ValueError(f"unknown truth method {self.truth_method!r}")
        if self.dispatch_count < 1:
            raise ValueError("dispatch_count must be at least 1")
        if self.fractions is not None:
            object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        NoiseConfig(self.e_v, self.e_i, self.distribution)

    @property
    def noise(self) -> NoiseConfig:
        return NoiseConfig(self.e_v, self.e_i, self.distribution)

    @property
    def build_options(self) -> dict:
        return {
            "antisymmetry_rows": self.antisymmetry_rows,
            "weighting": self.weighting,
            "virtual_weight": self.virtual_weight,
        }

    def _truth_key(self) -> tuple:
        return (self.master_seed, self.truth_method, self.dispatch)

    def _placement_key(self) -> tuple:
        return (self.preference, self.fractions, self.max_resamples, self.antisymmetry_rows)

    def _estimate_key(self) -> tuple:
        return self._placement_key() + (self.e_v, self.e_i, self.distribution, self.weighting, self.virtual_weight)


@dataclass(frozen=True)
class RunErrors:
    mean_err_v: float
    max_err_v: float
    mean_err_f: float
    max_err_f: float
    outlier_count: int
    resamples: int = 0


@dataclass(frozen=True)
class RunFailure:
    """A dispatch whose placement never became observable."""

    index: int
    rank: int
    state_dim: int
    attempts: int


@dataclass(frozen=True)
class ScenarioStats:
    avg_of_mean_v: float
    avg_of_mean_f: float
    avg_of_max_v: float
    avg_of_max_f: float
    half_width_mean_v: float
    half_width_mean_f: float
    half_width_max_v: float
    half_width_max_f: float
    run_count: int
    failed_count: int
    median_outliers: float
    first_draw_observable: float
    mean_resamples: float

    def value(self, stat: str) -> float:
        return getattr(self, f"avg_of_{stat}")

    def half_width(self, stat: str) -> float:
        return getattr(self, f"half_width_{stat}")


def _stream(master_seed: int, index: int, tag: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, index, tag])


def compute_errors(
    truth: PowerFlowSolution,
    v_sq: np.ndarray,
    flow_p: np.ndarray,
    flow_q: np.ndarray,
    normalization: str = "class_mean",
    resamples: int = 0,
) -> RunErrors:
    """Voltage errors on magnitudes, flow errors on every directed P and Q entry.

    ``class_mean`` divides by the mean true magnitude of the class;
    ``per_element`` divides each entry by its own true magnitude and skips
    flows that are zero in the truth.
    """
    v_true = np.sqrt(truth.v_sq)
    v_est = np.sqrt(np.maximum(v_sq, 0.0))
    f_true = np.concatenate([truth.flow_p, truth.flow_q])
    f_est = np.concatenate([flow_p, flow_q])
    dv = np.abs(v_est - v_true)
    df = np.abs(f_est - f_true)
    if normalization == "class_mean":
        ev = dv / np.mean(v_true)
        scale = np.mean(np.abs(f_true))
        ef = df / scale if scale > 0 else df
    elif normalization == "per_element":
        ev = dv / v_true
        keep = np.abs(f_true) > 1e-12
        ef = df[keep] / np.abs(f_true[keep])
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    mean_f = float(np.mean(ef)) if ef.size else 0.0
    return RunErrors(
        mean_err_v=float(np.mean(ev)),
        max_err_v=float(np.max(ev)),
        mean_err_f=mean_f,
        max_err_f=float(np.max(ef)) if ef.size else 0.0,
        outlier_count=int(np.count_nonzero(ef > OUTLIER_FACTOR * mean_f)) if mean_f > 0 else 0,
        resamples=resamples,
    )


def evaluate_dispatch(
    net: NetworkModel, index: int, scenarios: Sequence[ScenarioConfig]
) -> list[RunErrors | RunFailure]:
    """Evaluate one dispatch index for several scenarios at once.

    The dispatch, the true power flow and each placement are computed once
    and shared; so is the factorization when design matrix and weights
    coincide. Each result equals what a lone run of that scenario produces.
    """
    if not scenarios:
        return []
    keys = {s._truth_key() for s in scenarios}
    if len(keys) != 1:
        raise ValueError("scenarios evaluated together must share master seed, truth method and dispatch config")
    first = scenarios[0]
    try:
        d = generate_dispatch(net, _stream(first.master_seed, index, STREAM_DISPATCH), first.dispatch)
        truth = solve_exact(net, d) if first.truth_method == "exact" else solve_linear(net, d)
        if not truth.converged:
            raise RuntimeError(f"power flow did not converge in {truth.iterations} iterations")
    except Exception as exc:
        raise DispatchError(index, exc) from exc

    noise_seed = _stream(first.master_seed, index, STREAM_NOISE)
    select_seed = _stream(first.master_seed, index, STREAM_SELECT)
    pools: dict = {}
    placements: dict = {}
    factors: dict = {}
    estimates: dict = {}
    out: list[RunErrors | RunFailure] = []
    for cfg in scenarios:
        try:
            nkey = (cfg.e_v, cfg.e_i, cfg.distribution)
            if nkey not in pools:
                pools[nkey] = synthesize_pool(truth, net, cfg.noise, noise_seed)
            pool = pools[nkey]

            pkey = cfg._placement_key()
            if pkey not in placements:
                try:
                    placements[pkey] = choose_placement(
                        pool, net, cfg.preference, cfg.fractions, select_seed, cfg.max_resamples,
                        **cfg.build_options,
                    )
                except ObservabilityError as exc:
                    placements[pkey] = RunFailure(index, exc.rank, exc.state_dim, exc.attempts)
            chosen = placements[pkey]
            if isinstance(chosen, RunFailure):
                out.append(chosen)
                continue
            placement, attempt, _ = chosen

            ekey = cfg._estimate_key()
            if ekey not in estimates:
                rows = build_set(pool, net, placement, **cfg.build_options)
                system = assemble(net, MeasurementSet(tuple(rows)))
                fkey = (pkey, system.w.tobytes())
                if fkey not in factors:
                    factors[fkey] = WLSFactorization.of(system)
                estimates[ekey] = solve_wls(system, factors[fkey])
            est = estimates[ekey]
            if cfg.postfilter:
                est = postfilter_antisymmetry(est, net, cfg.postfilter_threshold)
        except Exception as exc:
            raise DispatchError(index, exc) from exc
        s = est.state
        out.append(compute_errors(truth, s.v_sq, s.flow_p, s.flow_q, cfg.normalization, attempt))
    return out


def run_one(net: NetworkModel, cfg: ScenarioConfig, dispatch_index: int) -> RunErrors:
    """Errors of one dispatch.

    Raises:
        DispatchError: any pipeline failure, including an unobservable
            placement, tagged with the dispatch index.
    """
    res = evaluate_dispatch(net, dispatch_index, [cfg])[0]
    if isinstance(res, RunFailure):
        cause = ObservabilityError(res.rank, res.state_dim, res.attempts)
        raise DispatchError(dispatch_index, cause) from cause
    return res


def summarize(runs: Sequence[RunErrors], failed: int = 0) -> ScenarioStats:
    """Arithmetic means of the per-run statistics with 95% half-widths."""
    if not runs:
        raise ValueError("no successful runs to summarize")
    arr = np.array([[r.mean_err_v, r.mean_err_f, r.max_err_v, r.max_err_f] for r in runs])
    n = len(runs)
    means = arr.mean(axis=0)
    if n > 1:
        half = 1.959963984540054 * arr.std(axis=0, ddof=1) / math.sqrt(n)
    else:
        half = np.zeros(4)
    resamples = np.array([r.resamples for r in runs])
    return ScenarioStats(
        avg_of_mean_v=float(means[0]),
        avg_of_mean_f=float(means[1]),
        avg_of_max_v=float(means[2]),
        avg_of_max_f=float(means[3]),
        half_width_mean_v=float(half[0]),
        half_width_mean_f=float(half[1]),
        half_width_max_v=float(half[2]),
        half_width_max_f=float(half[3]),
        run_count=n,
        failed_count=failed,
        median_outliers=float(np.median([r.outlier_count for r in runs])),
        first_draw_observable=float(np.mean(resamples == 0)),
        mean_resamples=float(np.mean(resamples)),
    )


# -- parallel evaluation ----------------------------------------------------

_WORKER: dict = {}


def _worker_init(net: NetworkModel, scenarios: tuple[ScenarioConfig, ...]) -> None:
    _WORKER["net"] = net
    _WORKER["scenarios"] = scenarios
    _WORKER["limits"] = threadpool_limits(1)


def _worker_chunk(indices: range) -> list[list[RunErrors | RunFailure]]:
    net = _WORKER["net"]
    scenarios = _WORKER["scenarios"]
    return [evaluate_dispatch(net, i, scenarios) for i in indices]


def _chunks(n: int, jobs: int) -> list[range]:
    size = max(1, math.ceil(n / (jobs * 8)))
    return [range(lo, min(n, lo + size)) for lo in range(0, n, size)]


def evaluate_many(
    net: NetworkModel,
    scenarios: Sequence[ScenarioConfig],
    dispatch_count: int,
    jobs: int = 1,
    progress: Callable[[int, int], None] | None = None,
) -> list[list[RunErrors | RunFailure]]:
    """Per-scenario result lists over dispatch indices ``0 .. dispatch_count-1``.

    Results are gathered in index order, so they are identical for any
    ``jobs``. BLAS is pinned to one thread in every evaluating process.
    """
    scenarios = tuple(scenarios)
    per_index: list[list[RunErrors | RunFailure]] = []
    chunks = _chunks(dispatch_count, max(1, jobs))
    if jobs <= 1:
        with threadpool_limits(1):
            for chunk in chunks:
                per_index.extend(evaluate_dispatch(net, i, scenarios) for i in chunk)
                if progress:
                    progress(len(per_index), dispatch_count)
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init, initargs=(net, scenarios)) as ex:
            for block in ex.map(_worker_chunk, chunks):
                per_index.extend(block)
                if progress:
                    progress(len(per_index), dispatch_count)
    return [[row[k] for row in per_index] for k in range(len(scenarios))]


def _reduce(cfg: ScenarioConfig, results: Sequence[RunErrors | RunFailure]) -> ScenarioStats:
    runs = [r for r in results if isinstance(r, RunErrors)]
    failed = len(results) - len(runs)
    if failed > ABORT_FAILURE_RATE * len(results):
        raise ScenarioAborted(failed, len(results))
    return summarize(runs, failed)


def run_scenario(net: NetworkModel, cfg: ScenarioConfig, jobs: int = 1) -> ScenarioStats:
    """Aggregate ``run_one`` over ``cfg.dispatch_count`` dispatch indices.

    Raises:
        ScenarioAborted: more than 1% of dispatches stayed unobservable.
    """
    return _reduce(cfg, evaluate_many(net, [cfg], cfg.dispatch_count, jobs)[0])


# -- grid -------------------------------------------------------------------

@dataclass(frozen=True)
class GridConfig:
    e_v_list: tuple[float, ...] = DEFAULT_LEVELS
    e_i_list: tuple[float, ...] = DEFAULT_LEVELS
    preferences: tuple[str, ...] = ("nodal", "edge")
    dispatch_count: int = 1500
    master_seed: int = 0
    fractions: dict | None = None
    postfilter: bool = False
    normalization: str = "class_mean"
    postfilter_threshold: float = DEFAULT_POSTFILTER_THRESHOLD
    distribution: str = "uniform"
    truth_method: str = "exact"
    weighting: str = "uniform"
    virtual_weight: float = VIRTUAL_WEIGHT
    antisymmetry_rows: bool = False
    max_resamples: int = 100

    def __post_init__(self) -> None:
        for name in ("e_v_list", "e_i_list", "preferences"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.fractions is not None:
            unknown = set(self.fractions) - set(DEFAULT_FRACTIONS)
            if unknown:
                raise ValueError(f"fractions for unknown preference(s): {sorted(unknown)}")
        if not (self.e_v_list and self.e_i_list and self.preferences):
            raise ValueError("grid needs at least one e_v, one e_i and one preference")
        self.scenarios()

    def scenario(self, e_v: float, e_i: float, preference: str) -> ScenarioConfig:
        frac = (self.fractions or {}).get(preference)
        return ScenarioConfig(
            e_v=e_v, e_i=e_i, preference=preference, dispatch_count=self.dispatch_count,
            master_seed=self.master_seed, fractions=None if frac is None else tuple(frac),
            postfilter=self.postfilter, postfilter_threshold=self.postfilter_threshold,
            normalization=self.normalization, distribution=self.distribution,
            truth_method=self.truth_method, weighting=self.weighting,
            virtual_weight=self.virtual_weight, antisymmetry_rows=self.antisymmetry_rows,
            max_resamples=self.max_resamples,
        )

    def scenarios(self) -> list[ScenarioConfig]:
        return [self.scenario(ev, ei, p) for p in self.preferences for ei in self.e_i_list for ev in self.e_v_list]

    def to_dict(self) -> dict:
        doc = asdict(self)
        for name in ("e_v_list", "e_i_list", "preferences"):
            doc[name] = list(doc[name])
        return doc


def grid_from_dict(doc: dict) -> GridConfig:
    known = {f.name for f in fields(GridConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown grid config key(s): {', '.join(sorted(unknown))}")
    return GridConfig(**doc)


def load_grid_config(path: str | Path) -> GridConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: grid config must be a JSON object")
    return grid_from_dict(doc)


@dataclass
class GridResult:
    config: GridConfig
    stats: dict = field(default_factory=dict)  # (pref, e_i, e_v) -> ScenarioStats
    failed: dict = field(default_factory=dict)  # (pref, e_i, e_v) -> reason

    @property
    def complete(self) -> bool:
        return not self.failed


def run_grid(
    net: NetworkModel,
    grid: GridConfig,
    jobs: int = 1,
    progress: Callable[[int, int], None] | None = None,
) -> GridResult:
    """Evaluate every scenario of the grid; aborted scenarios are recorded, not raised."""
    scenarios = grid.scenarios()
    per_scenario = evaluate_many(net, scenarios, grid.dispatch_count, jobs, progress)
    result = GridResult(grid)
    for cfg, results in zip(scenarios, per_scenario):
        key = (cfg.preference, cfg.e_i, cfg.e_v)
        try:
            result.stats[key] = _reduce(cfg, results)
        except ScenarioAborted as exc:
            result.failed[key] = str(exc)
    return result


def _pct(x: float) -> str:
    return f"{100 * x:g}%"


def table_rows(result: GridResult, stat: str, preference: str) -> list[list[str]]:
    """Header plus one row per e_i; cells are percentages with three decimals."""
    g = result.config
    rows = [["e_i \\ e_v"] + [_pct(ev) for ev in g.e_v_list]]
    for ei in g.e_i_list:
        row = [_pct(ei)]
        for ev in g.e_v_list:
            key = (preference, ei, ev)
            if key in result.stats:
                row.append(f"{100 * result.stats[key].value(stat):.3f}")
            else:
                row.append("FAILED")
        rows.append(row)
    return rows


def _markdown(rows: list[list[str]]) -> str:
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    fmt = lambda r: "| " + " | ".join(cell.rjust(w) for cell, w in zip(r, widths)) + " |"  # noqa: E731
    lines = [fmt(rows[0]), "|" + "|".join("-" * (w + 1) + ":" for w in widths) + "|"]
    lines.extend(fmt(r) for r in rows[1:])
    return "\n".join(lines) + "\n"


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


TITLES = {
    "mean_v": "Average error of voltage magnitude estimates (%)",
    "mean_f": "Average error of power flow estimates (%)",
    "max_v": "Maximum error of voltage magnitude estimates (%)",
    "max_f": "Maximum error of power flow estimates (%)",
}


def sidecar(result: GridResult) -> dict:
    cells = []
    for (pref, ei, ev), s in sorted(result.stats.items()):
        cells.append({"preference": pref, "e_v": ev, "e_i": ei, **asdict(s)})
    return {
        "config": result.config.to_dict(),
        "cells": cells,
        "failed_cells": [
            {"preference": p, "e_v": ev, "e_i": ei, "reason": why}
            for (p, ei, ev), why in sorted(result.failed.items())
        ],
    }


def write_tables(result: GridResult, out_dir: str | Path) -> list[Path]:
    """Write ``tables/table_{stat}_{pref}.csv`` and ``.md`` plus ``sidecar.json``."""
    out = Path(out_dir)
    written = []
    for pref in result.config.preferences:
        for stat in STATS:
            rows = table_rows(result, stat, pref)
            base = out / "tables" / f"table_{stat}_{pref}"
            csv_text = "".join(",".join(r) + "\n" for r in rows)
            md_text = f"{TITLES[stat]}, {pref} preference\n\n" + _markdown(rows)
            atomic_write(base.with_suffix(".csv"), csv_text)
            atomic_write(base.with_suffix(".md"), md_text)
            written += [base.with_suffix(".csv"), base.with_suffix(".md")]
    side = out / "sidecar.json"
    atomic_write(side, json.dumps(sidecar(result), indent=1, sort_keys=True) + "\n")
    written.append(side)
    return written

