"""Scenario library: configuration, orchestration, and analysis runs.

A scenario is described by one TOML document (sections [grid], [physics],
[potential], [packet], [branching], [bohmian], [proposal], [detector],
[run]); unspecified keys fall back to the named scenario's defaults. Every
run emits the same artifact set under its output directory: psi_*.bin state
snapshots, tree.json, ensemble.csv, reports/*.json and screen.csv, so runs
are comparable and reproducible byte for byte given (config, seed).
"""

from __future__ import annotations

import copy
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bohmian as bm
from . import newtonian as nt
from .branching import BranchTracker, BranchTree, DisjointParams
from .errors import ConfigurationError, LeakageError
from .qdyn import (
    BiprismWire,
    FreePotential,
    HarmonicPotential,
    PhysicalParams,
    PointerCoupling,
    Potential,
    SpatialGrid,
    WaveFunction,
    born_mass,
    init_gaussian,
    superpose,
    validate_stability,
    write_binary,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


# ---------------------------------------------------------------------------
# defaults

_FREE = {
    "scenario": "free",
    "grid": {"extent": [[-16.0, 16.0]], "n": [256]},
    "physics": {"hbar": 1.0, "mass": 1.0, "dt": 1.25e-3, "t_final": 2.0},
    "potential": {},
    "packet": {"centers": [0.0], "momenta": [0.0], "sigma": 1.0, "coefficients": [1.0]},
    "branching": {"eps_cell": 1e-8, "gap_cells": 3, "eps_branch": 1e-4,
                  "eps_leak": 1e-3, "record_every": 20},
    "bohmian": {"enabled": False, "n": 10000, "node_floor": 1e-12, "export": False},
    "proposal": {"n": 20000, "velocity_box": [[-3.0, 3.0]],
                 "position_law": "uniform_support"},
    "detector": {"width": 0.5, "center_window": 0.0, "mass_floor": 1e-9},
    "run": {"seed": 1234, "out": "runs/free", "psi_export_every": 10, "threads": 1},
}

_HARMONIC = {
    "scenario": "harmonic",
    "grid": {"extent": [[-16.0, 16.0]], "n": [256]},
    "physics": {"hbar": 1.0, "mass": 1.0, "dt": 2.0 * math.pi / 5000.0,
                "t_final": 2.0 * math.pi},
    "potential": {"omega": 1.0},
    "packet": {"centers": [2.0], "momenta": [0.0], "sigma": 1.0, "coefficients": [1.0]},
    "branching": {"eps_cell": 1e-8, "gap_cells": 3, "eps_branch": 1e-4,
                  "eps_leak": 1e-3, "record_every": 25},
    "bohmian": {"enabled": False, "n": 10000, "node_floor": 1e-12, "export": False},
    "proposal": {"n": 20000, "velocity_box": [[-3.0, 3.0]],
                 "position_law": "uniform_support"},
    "detector": {"width": 0.5, "center_window": 0.0, "mass_floor": 1e-9},
    "run": {"seed": 1234, "out": "runs/harmonic", "psi_export_every": 25, "threads": 1},
}

# Diverging slit packets; the wire field, while on, bends them back into
# overlap at the screen time. Field off, they separate for good: a permanent
# branch split and an empty central window.
_TWO_SLIT = {
    "scenario": "two_slit",
    "grid": {"extent": [[-48.0, 48.0]], "n": [1024]},
    "physics": {"hbar": 1.0, "mass": 1.0, "dt": 5e-4, "t_final": 8.0},
    "potential": {"field": True, "strength": 4.45, "wire_position": 0.0,
                  "window": [1.5, 2.5]},
    "packet": {"centers": [-2.0, 2.0], "momenta": [-3.0, 3.0], "sigma": 2.0,
               "coefficients": [0.7071067811865476, 0.7071067811865476]},
    "branching": {"eps_cell": 1e-8, "gap_cells": 3, "eps_branch": 1e-4,
                  "eps_leak": 1e-3, "record_every": 100},
    "bohmian": {"enabled": False, "n": 10000, "node_floor": 1e-12, "export": False},
    "proposal": {"n": 100000, "velocity_box": [[-5.0, 5.0]],
                 "position_law": "uniform_support"},
    "detector": {"width": 0.25, "center_window": 3.0, "mass_floor": 1e-9},
    "run": {"seed": 1234, "out": "runs/two_slit", "psi_export_every": 16, "threads": 1},
}

# Pointer coupling: the window kicks the pointer up or down with sign(x),
# which is what splits the state; a zero-length window leaves a single leaf.
_MEASUREMENT = {
    "scenario": "measurement",
    "grid": {"extent": [[-16.0, 16.0], [-32.0, 32.0]], "n": [256, 256]},
    "physics": {"hbar": 1.0, "mass": 1.0, "dt": 1e-3, "t_final": 3.0},
    "potential": {"g": 20.0, "window": [0.2, 0.6], "x_scale": 0.2},
    "packet": {"centers": [-4.8, 4.8], "momenta": [0.0, 0.0],
               "sigma": [1.0, 1.0], "coefficients_sq": [0.64, 0.36]},
    "branching": {"eps_cell": 1e-6, "gap_cells": 8, "eps_branch": 1e-4,
                  "eps_leak": 1e-3, "record_every": 20},
    "bohmian": {"enabled": False, "n": 2000, "node_floor": 1e-12, "export": False},
    "proposal": {"n": 100000, "velocity_box": [[-1.5, 1.5], [-1.5, 1.5]],
                 "position_law": "uniform_support"},
    "detector": {"width": 0.0, "center_window": 0.0, "mass_floor": 1e-9},
    "run": {"seed": 1234, "out": "runs/measurement", "psi_export_every": 15,
            "threads": 1},
}

_DEFAULTS = {
    "free": _FREE,
    "harmonic": _HARMONIC,
    "two_slit": _TWO_SLIT,
    "measurement": _MEASUREMENT,
}


def scenario_defaults(name: str) -> dict:
    if name not in _DEFAULTS:
        raise ConfigurationError(f"unknown scenario {name!r}")
    return copy.deepcopy(_DEFAULTS[name])


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path) -> dict:
    """TOML file -> full config dict (defaults of its `scenario` merged in)."""
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    if "scenario" not in doc:
        raise ConfigurationError("config must name a `scenario`")
    return _merge(scenario_defaults(doc["scenario"]), doc)


# ---------------------------------------------------------------------------
# building


@dataclass
class BuiltScenario:
    config: dict
    grid: SpatialGrid
    phys: PhysicalParams
    potential: Potential
    psi0: WaveFunction
    disjoint: DisjointParams
    record_every: int
    proposal: nt.ProposalSpec
    detector_width: float


def build_scenario(config: dict) -> BuiltScenario:
    """Concrete objects from a config dict; validates before any compute."""
    name = config["scenario"]
    g = config["grid"]
    grid = SpatialGrid(tuple(tuple(e) for e in g["extent"]), tuple(g["n"]))
    p = config["physics"]
    mass = p["mass"]
    phys = PhysicalParams(
        hbar=p["hbar"],
        mass=tuple(mass) if isinstance(mass, list) else mass,
        dt=p["dt"],
        t_final=p["t_final"],
    )
    validate_stability(grid, phys)

    potential = _build_potential(name, config["potential"])
    psi0 = _build_packet(name, grid, phys, config["packet"])

    b = config["branching"]
    disjoint = DisjointParams(
        eps_cell=b["eps_cell"], gap_cells=b["gap_cells"],
        eps_branch=b["eps_branch"], eps_leak=b["eps_leak"],
    )
    record_every = int(b["record_every"])
    if phys.n_steps % record_every != 0:
        raise ConfigurationError("record_every must divide t_final/dt")

    pr = config["proposal"]
    proposal = nt.ProposalSpec(
        n=int(pr["n"]),
        velocity_box=tuple(tuple(v) for v in pr["velocity_box"]),
        position_law=pr["position_law"],
        seed=int(config["run"]["seed"]),
    )
    return BuiltScenario(
        config=config,
        grid=grid,
        phys=phys,
        potential=potential,
        psi0=psi0,
        disjoint=disjoint,
        record_every=record_every,
        proposal=proposal,
        detector_width=float(config["detector"]["width"]),
    )


def _build_potential(name: str, pot: dict) -> Potential:
    if name == "free":
        return FreePotential()
    if name == "harmonic":
        return HarmonicPotential(omega=pot["omega"])
    if name == "two_slit":
        return BiprismWire(
            position=pot["wire_position"],
            strength=pot["strength"],
            window=tuple(pot["window"]),
            enabled=bool(pot["field"]),
        )
    if name == "measurement":
        return PointerCoupling(
            g=pot["g"], window=tuple(pot["window"]), x_scale=pot["x_scale"]
        )
    raise ConfigurationError(f"unknown scenario {name!r}")


def _build_packet(name, grid, phys, pk) -> WaveFunction:
    if name == "measurement":
        sx, sy = pk["sigma"]
        parts = [
            init_gaussian(grid, (c, 0.0), (0.0, 0.0), (sx, sy), phys.hbar)
            for c in pk["centers"]
        ]
        coeffs = [math.sqrt(w) for w in pk["coefficients_sq"]]
        if abs(sum(pk["coefficients_sq"]) - 1.0) > 1e-9:
            raise ConfigurationError("coefficients_sq must sum to 1")
        return superpose(parts, coeffs)
    centers = pk["centers"]
    momenta = pk["momenta"]
    coeffs = pk["coefficients"]
    parts = [
        init_gaussian(grid, c, m, pk["sigma"], phys.hbar)
        for c, m in zip(centers, momenta)
    ]
    return superpose(parts, coeffs)


# ---------------------------------------------------------------------------
# running


@dataclass
class RunResult:
    config: dict
    grid: SpatialGrid
    phys: PhysicalParams
    tree: BranchTree
    psi_T: WaveFunction
    ensemble: nt.WeightedEnsemble
    measure: nt.FinalMeasure
    reports: dict
    guided: bm.GuidedEnsemble | None = None
    psi_snapshots: np.ndarray | None = None
    out_dir: Path | None = None


def run_scenario(config: dict, out_dir=None) -> RunResult:
    """Full pipeline: evolve + track, weight the classical ensemble, report."""
    built = build_scenario(config)
    return _run_built(built, out_dir)


def _run_built(built: BuiltScenario, out_dir=None) -> RunResult:
    cfg = built.config
    grid, phys = built.grid, built.phys
    rec = built.record_every
    n_steps = phys.n_steps
    n_rec = n_steps // rec + 1

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "reports").mkdir(exist_ok=True)

    # quantum evolution + branch tracking (+ 1D snapshot retention)
    tracker = BranchTracker(grid, built.potential, phys, built.disjoint)
    tracker.begin(built.psi0)
    stepper = bm.SplitOperatorStepper(grid, built.potential, phys)
    keep_snaps = grid.dim == 1
    snaps = (
        np.empty((n_rec,) + grid.shape, dtype=np.complex128) if keep_snaps else None
    )
    if keep_snaps:
        snaps[0] = built.psi0.amps
    export_every = int(cfg["run"]["psi_export_every"])
    if out_path is not None:
        write_binary(built.psi0, out_path / "psi_0000.bin")

    amps, t = built.psi0.amps, built.psi0.time
    for k in range(n_steps):
        amps = stepper.step(amps, t)
        t += phys.dt
        if (k + 1) % rec == 0:
            r = (k + 1) // rec
            psi_t = WaveFunction(grid, amps, t)
            tracker.update(psi_t)
            if keep_snaps:
                snaps[r] = amps
            if out_path is not None and r % export_every == 0:
                write_binary(psi_t, out_path / f"psi_{r:04d}.bin")
    tree = tracker.finalize()
    psi_T = WaveFunction(grid, amps, t)

    # classical ensemble under the same potential
    rng = np.random.default_rng(built.proposal.seed)
    s0 = tree.support_at(tree.root_id, 0)
    x0, v0 = built.proposal.sample(built.psi0, s0, rng)
    threads = int(cfg["run"].get("threads", 1))
    rt, positions, fpos, fvel, escaped = _integrate_sharded(
        x0, v0, built.potential, grid, phys, rec, threads
    )
    if escaped.mean() > 0.20:
        raise ConfigurationError(
            f"escaped proposal fraction {escaped.mean():.2%} exceeds 20%"
        )
    measure = nt.build_final_measure(psi_T, tree, built.detector_width)
    ensemble = nt.assign_weights(
        grid, rt, positions, x0, v0, fpos, fvel, escaped, measure,
        eps_leak=built.disjoint.eps_leak, eps_branch=built.disjoint.eps_branch,
    )

    # reports
    reports: dict = {}
    reports["branch_born"] = nt.branch_born_report(ensemble, tree)
    reports["lemma1"] = nt.lemma1_report(ensemble, tree)
    sigma_times = _sigma_times(tree)
    reports["sigma_consistency"] = [
        nt.sigma_consistency_check(ensemble, tree, tt) for tt in sigma_times
    ]
    screen = screen_table(psi_T, ensemble, measure)
    reports["screen"] = screen
    if cfg["scenario"] == "two_slit":
        det = cfg["detector"]
        reports["visibility"] = visibility_from_screen(
            screen, det["center_window"], det["mass_floor"]
        )
        reports["intermediate_match"] = intermediate_histogram_match(
            ensemble, snaps, grid, tree.record_times, coarse_width=2.0
        )

    guided = None
    if cfg["bohmian"]["enabled"]:
        bn = int(cfg["bohmian"]["n"])
        brng = np.random.default_rng(built.proposal.seed)
        bx0 = bm.sample_initial(built.psi0, bn, brng)
        guided = bm.integrate_guided_ensemble(
            built.psi0, built.potential, phys, bx0, rec,
            node_floor=cfg["bohmian"]["node_floor"],
        )
        if keep_snaps:
            series = []
            for r in range(n_rec):
                psi_r = WaveFunction(grid, snaps[r], float(rt[r]))
                series.append(
                    bm.equivariance_distance(
                        guided.positions[r], psi_r, 50, valid=guided.alive
                    )
                )
            reports["equivariance"] = {
                "times": [float(v) for v in rt],
                "distance": series,
                "initial": series[0],
                "max": max(series),
            }

    meta = {
        "config": cfg,
        "leaves": {
            str(l): tree.mass_at(l, tree.last_index) for l in tree.leaves()
        },
        "tracked_mass_at_horizon": tree.tracked_mass(tree.last_index),
        "renorm_factor": ensemble.renorm_factor,
        "ensemble_diagnostics": ensemble.diagnostics,
    }
    reports["run_meta"] = meta

    if out_path is not None:
        tree.to_json(out_path / "tree.json")
        ensemble.to_csv(out_path / "ensemble.csv")
        _write_screen_csv(screen, out_path / "screen.csv")
        for key in ("branch_born", "lemma1", "sigma_consistency", "run_meta",
                    "visibility", "intermediate_match", "equivariance"):
            if key in reports:
                _write_json(reports[key], out_path / "reports" / f"{key}.json")
        if guided is not None and cfg["bohmian"]["export"]:
            _write_guided_csv(guided, out_path / "bohmian.csv")

    return RunResult(
        config=cfg, grid=grid, phys=phys, tree=tree, psi_T=psi_T,
        ensemble=ensemble, measure=measure, reports=reports, guided=guided,
        psi_snapshots=snaps, out_dir=out_path,
    )


def _integrate_sharded(x0, v0, potential, grid, phys, rec, threads):
    if threads <= 1:
        return nt.integrate_ensemble(x0, v0, potential, grid, phys, rec)
    from concurrent.futures import ThreadPoolExecutor

    n = len(x0)
    bounds = [(i * n) // threads for i in range(threads + 1)]
    chunks = [(x0[a:b], v0[a:b]) for a, b in zip(bounds, bounds[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(
            pool.map(
                lambda c: nt.integrate_ensemble(c[0], c[1], potential, grid, phys, rec),
                chunks,
            )
        )
    rt = parts[0][0]
    positions = np.concatenate([p[1] for p in parts], axis=1)
    fpos = np.concatenate([p[2] for p in parts], axis=0)
    fvel = np.concatenate([p[3] for p in parts], axis=0)
    escaped = np.concatenate([p[4] for p in parts], axis=0)
    return rt, positions, fpos, fvel, escaped


def _sigma_times(tree: BranchTree) -> list[float]:
    last = tree.last_index
    splits = [n.split_index for n in tree.nodes.values() if n.split_index is not None]
    start = max(splits) if splits else 0
    picks = sorted(
        {
            min(last, start + max(1, int((last - start) * f)))
            for f in (0.25, 0.55, 0.85)
        }
    )
    return [float(tree.record_times[i]) for i in picks]


# ---------------------------------------------------------------------------
# screen analysis


def screen_table(psi_T: WaveFunction, ensemble: nt.WeightedEnsemble,
                 measure: nt.FinalMeasure) -> list[dict]:
    """Per final bin: quantum mass and landed ensemble weight."""
    weight_by_bin = np.zeros(measure.n_bins)
    sel = ensemble.final_bin >= 0
    np.add.at(weight_by_bin, ensemble.final_bin[sel], ensemble.weight[sel])
    rows = []
    grid = measure.grid
    for b in range(measure.n_bins):
        cells = np.argwhere(measure.label_grid == b)
        center = [
            float(grid.extents[i][0] + (cells[:, i].mean() + 0.5) * grid.dx[i])
            for i in range(grid.dim)
        ]
        rows.append(
            {
                "bin": b,
                "leaf": int(measure.leaf_of_bin[b]),
                "center": center,
                "born_mass": float(measure.masses[b]),
                "ensemble_weight": float(weight_by_bin[b]),
            }
        )
    return rows


def visibility_from_screen(screen: list[dict], center_window: float,
                           mass_floor: float) -> dict:
    """Fringe visibility (max-min)/(max+min) over the central-window bins.

    Bins with mass below the floor count as empty; an empty window has
    visibility zero (no measurable pattern).
    """
    vals = [
        row["born_mass"]
        for row in screen
        if abs(row["center"][0]) <= center_window
    ]
    vals = [v if v >= mass_floor else 0.0 for v in vals]
    if not vals or max(vals) <= 0.0:
        return {"visibility": 0.0, "n_bins": len(vals), "max": 0.0, "min": 0.0}
    hi, lo = max(vals), min(vals)
    return {
        "visibility": (hi - lo) / (hi + lo),
        "n_bins": len(vals),
        "max": hi,
        "min": lo,
    }


def intermediate_histogram_match(
    ensemble: nt.WeightedEnsemble,
    snaps: np.ndarray | None,
    grid: SpatialGrid,
    record_times: np.ndarray,
    coarse_width: float = 2.0,
) -> dict:
    """Weighted-ensemble vs Born coarse-bin histograms at interior times.

    Reports the worst per-bin absolute difference over a handful of interior
    record times (1D runs only; needs retained state snapshots).
    """
    if snaps is None or grid.dim != 1:
        return {"max_abs_diff": None}
    lo, hi = grid.extents[0]
    edges = np.arange(lo, hi + coarse_width, coarse_width)
    centers = grid.axis(0)
    which = np.clip(np.searchsorted(edges, centers, side="right") - 1, 0, len(edges) - 2)
    n_rec = len(record_times)
    picks = sorted({int(n_rec * f) for f in (0.3, 0.5, 0.7, 0.9)})
    worst = 0.0
    rows = []
    for r in picks:
        dens = np.abs(snaps[r]) ** 2 * grid.dvol
        born = np.bincount(which, weights=dens, minlength=len(edges) - 1)
        pos = ensemble.positions[ensemble.index_of_time(float(record_times[r]))]
        emp, _ = np.histogram(
            np.asarray(pos, dtype=float), bins=edges, weights=ensemble.weight
        )
        diff = float(np.abs(emp - born).max())
        rows.append({"time": float(record_times[r]), "max_abs_diff": diff})
        worst = max(worst, diff)
    return {"max_abs_diff": worst, "rows": rows, "coarse_width": coarse_width}


# ---------------------------------------------------------------------------
# spec operations: two-slit, measurement, IA, calibrations


def run_two_slit(config: dict | None = None, field_on: bool | None = None,
                 out_dir=None) -> RunResult:
    cfg = _merge(scenario_defaults("two_slit"), config or {})
    if field_on is not None:
        cfg["potential"]["field"] = bool(field_on)
    return run_scenario(cfg, out_dir)


def run_measurement(config: dict | None = None, out_dir=None) -> RunResult:
    cfg = _merge(scenario_defaults("measurement"), config or {})
    return run_scenario(cfg, out_dir)


def ia_analysis(run_on: RunResult, run_off: RunResult, n_bins: int = 50,
                n_boot: int = 200, boot_seed: int = 0) -> dict:
    """Initial-velocity statistics conditioned by the final measure, on vs off.

    The unconditional proposal histograms must be identical (same seed); the
    weighted histograms differ when the final-condition weights react to the
    future field. The noise floor is the 95th percentile of total-variation
    distances between weighted bootstrap resamples of the field-on run.
    """
    for r in (run_on, run_off):
        if r.grid.dim != 1:
            raise ValueError("the velocity analysis is defined for 1D runs")
    if run_on.config["run"]["seed"] != run_off.config["run"]["seed"]:
        raise ValueError("runs must share their proposal seed")
    v_on = np.asarray(run_on.ensemble.v0, dtype=float)
    v_off = np.asarray(run_off.ensemble.v0, dtype=float)
    if v_on.shape != v_off.shape or not np.array_equal(v_on, v_off):
        raise ValueError("runs must share the same proposal draws")

    box = run_on.config["proposal"]["velocity_box"][0]
    edges = np.linspace(box[0], box[1], n_bins + 1)

    def hist(values, weights):
        h, _ = np.histogram(values, bins=edges, weights=weights)
        total = h.sum()
        return h / total if total > 0 else h

    w_on = run_on.ensemble.weight
    w_off = run_off.ensemble.weight
    h_on = hist(v_on, w_on)
    h_off = hist(v_off, w_off)
    weighted_tv = 0.5 * float(np.abs(h_on - h_off).sum())

    u_on = hist(v_on, None)
    u_off = hist(v_off, None)
    unconditional_tv = 0.5 * float(np.abs(u_on - u_off).sum())

    rng = np.random.default_rng(boot_seed)
    n = len(v_on)
    floor_samples = []
    for _ in range(n_boot):
        ia = rng.integers(0, n, n)
        ib = rng.integers(0, n, n)
        ha = hist(v_on[ia], w_on[ia])
        hb = hist(v_on[ib], w_on[ib])
        floor_samples.append(0.5 * float(np.abs(ha - hb).sum()))
    noise_floor = float(np.percentile(floor_samples, 95))

    return {
        "weighted_tv": weighted_tv,
        "unconditional_tv": unconditional_tv,
        "bootstrap_noise_floor_95": noise_floor,
        "n_bins": n_bins,
        "n_boot": n_boot,
        "weighted_hist_on": [float(v) for v in h_on],
        "weighted_hist_off": [float(v) for v in h_off],
    }


# ---------------------------------------------------------------------------
# calibrations


def _calibrate_free_spread() -> dict:
    cfg = scenario_defaults("free")
    built = build_scenario(cfg)
    from .qdyn import evolve

    psi_T = evolve(built.psi0, built.potential, built.phys, built.phys.n_steps)
    sigma = psi_T.width(0)
    t = built.phys.t_final
    s0 = 1.0
    analytic = s0 * math.sqrt(1.0 + (built.phys.hbar * t / (2.0 * 1.0 * s0**2)) ** 2)
    ratio = sigma / analytic
    return {
        "name": "free-spread",
        "measured": sigma,
        "expected": analytic,
        "ratio": ratio,
        "passed": bool(0.995 <= ratio <= 1.005),
    }


def _calibrate_harmonic_revival() -> dict:
    cfg = scenario_defaults("harmonic")
    built = build_scenario(cfg)
    from .qdyn import evolve

    psi_T = evolve(built.psi0, built.potential, built.phys, built.phys.n_steps)
    overlap = abs(psi_T.overlap(built.psi0))
    return {
        "name": "harmonic-revival",
        "measured": overlap,
        "bound": 0.999,
        "passed": bool(overlap > 0.999),
    }


def _calibrate_equivariance() -> dict:
    cfg = scenario_defaults("free")
    cfg["bohmian"]["enabled"] = True
    result = run_scenario(cfg)
    eq = result.reports["equivariance"]
    bound = eq["initial"] + 0.03
    return {
        "name": "equivariance",
        "initial": eq["initial"],
        "max": eq["max"],
        "bound": bound,
        "passed": bool(eq["max"] <= bound),
    }


def _calibrate_propagator_composition() -> dict:
    from . import pathint as pi

    grid = SpatialGrid(((-16.0, 16.0),), (512,))
    phys = PhysicalParams(hbar=1.0, mass=1.0, dt=1e-3, t_final=1.0)
    kernel = pi.build_kernel(grid, FreePotential(), phys, 0.25)
    full = pi.propagate(kernel, 8).matrix
    a = pi.propagate(kernel, 3).matrix
    b = pi.propagate(kernel, 5).matrix
    composed = a @ (grid.dx[0] * b)
    err = float(
        np.linalg.norm(composed - full) / max(np.linalg.norm(full), 1e-300)
    )
    return {
        "name": "propagator-composition",
        "relative_error": err,
        "bound": 1e-10,
        "passed": bool(err < 1e-10),
    }


_CALIBRATIONS = {
    "free-spread": _calibrate_free_spread,
    "harmonic-revival": _calibrate_harmonic_revival,
    "equivariance": _calibrate_equivariance,
    "propagator-composition": _calibrate_propagator_composition,
}


def run_calibration(name: str) -> dict:
    """Named pass/fail oracle checks (`free-spread`, `harmonic-revival`,
    `equivariance`, `propagator-composition`)."""
    if name not in _CALIBRATIONS:
        raise ConfigurationError(
            f"unknown calibration {name!r}; known: {sorted(_CALIBRATIONS)}"
        )
    return _CALIBRATIONS[name]()


def calibration_names() -> list[str]:
    return sorted(_CALIBRATIONS)


# ---------------------------------------------------------------------------
# deterministic writers


def _write_json(doc, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def _write_screen_csv(screen: list[dict], path) -> None:
    with open(path, "w") as fh:
        if screen and len(screen[0]["center"]) == 1:
            fh.write("bin,leaf,x,born_mass,ensemble_weight\n")
            for row in screen:
                fh.write(
                    f"{row['bin']},{row['leaf']},{row['center'][0]!r},"
                    f"{row['born_mass']!r},{row['ensemble_weight']!r}\n"
                )
        else:
            fh.write("bin,leaf,x,y,born_mass,ensemble_weight\n")
            for row in screen:
                fh.write(
                    f"{row['bin']},{row['leaf']},{row['center'][0]!r},"
                    f"{row['center'][1]!r},{row['born_mass']!r},"
                    f"{row['ensemble_weight']!r}\n"
                )


def _write_guided_csv(guided: bm.GuidedEnsemble, path) -> None:
    with open(path, "w") as fh:
        dim = 1 if guided.positions.ndim == 2 else guided.positions.shape[2]
        if dim == 1:
            fh.write("id,time,x\n")
        else:
            fh.write("id,time,x,y\n")
        n = guided.positions.shape[1]
        for i in range(n):
            for r, t in enumerate(guided.record_times):
                if dim == 1:
                    fh.write(f"{i},{t!r},{guided.positions[r, i]!r}\n")
                else:
                    fh.write(
                        f"{i},{t!r},{guided.positions[r, i, 0]!r},"
                        f"{guided.positions[r, i, 1]!r}\n"
                    )
