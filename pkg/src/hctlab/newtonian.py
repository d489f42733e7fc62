"""Classical trajectory ensembles weighted by the final-condition measure.

Trajectories start inside the root support, integrate under velocity Verlet
with the grid-interpolated force, and receive weights from the quantum mass
of the final-time bin they land in: every trajectory landing in bin b gets
weight mass(b)/count(b). All physics statistics (pushforward masses, the
branch-level Born comparison, confinement fractions, the sigma-algebra
cross-check) are pure functions of the weighted ensemble and a confirmed
branch tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .branching import BranchTree
from .errors import ConfigurationError, CoverageError, LeakageError
from .qdyn import (
    PhysicalParams,
    Potential,
    SpatialGrid,
    WaveFunction,
    born_mass,
)

DEFAULT_N_MIN = 20


# ---------------------------------------------------------------------------
# proposal sampling


@dataclass(frozen=True)
class ProposalSpec:
    """Where trajectories start: positions over S0, velocities in a box.

    position_law is 'uniform_support' (uniform over the root support cells)
    or 'born' (|psi0|^2). The velocity box must be wide enough to cover the
    classical preimages of every occupied final bin; coverage is verified
    after weighting, not assumed.
    """

    n: int
    velocity_box: tuple[tuple[float, float], ...]
    position_law: str = "uniform_support"
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("proposal needs n >= 1")
        if self.position_law not in ("uniform_support", "born"):
            raise ConfigurationError(f"unknown position law {self.position_law!r}")
        for lo, hi in self.velocity_box:
            if hi <= lo:
                raise ConfigurationError("velocity box must have positive extent")

    def sample(self, psi0: WaveFunction, s0_mask: np.ndarray, rng: np.random.Generator):
        grid = psi0.grid
        dim = grid.dim
        if len(self.velocity_box) != dim:
            raise ConfigurationError("velocity box arity does not match grid dim")
        if self.position_law == "born":
            from .bohmian import sample_initial

            x0 = sample_initial(psi0, self.n, rng)
        else:
            cells = np.argwhere(np.asarray(s0_mask, dtype=bool))
            picks = cells[rng.integers(0, len(cells), size=self.n)]
            offs = rng.random((self.n, dim))
            cols = []
            for i in range(dim):
                lo = grid.extents[i][0]
                cols.append(lo + (picks[:, i] + offs[:, i]) * grid.dx[i])
            x0 = cols[0] if dim == 1 else np.stack(cols, axis=1)
        v_cols = []
        for lo, hi in self.velocity_box:
            v_cols.append(lo + (hi - lo) * rng.random(self.n))
        v0 = v_cols[0] if dim == 1 else np.stack(v_cols, axis=1)
        return x0, v0


# ---------------------------------------------------------------------------
# forces and integration


def force_grids(
    potential: Potential, grid: SpatialGrid, phys: PhysicalParams, t: float
) -> tuple[np.ndarray, ...]:
    """Per-axis force arrays -dV/dx_i (one-sided differences at box edges)."""
    v = potential.array(grid, phys, t)
    if grid.dim == 1:
        return (-np.gradient(v, grid.dx[0]),)
    gx, gy = np.gradient(v, grid.dx[0], grid.dx[1])
    return (-gx, -gy)


def _potential_runs(potential: Potential, phys: PhysicalParams, n_steps: int, t0: float):
    """Contiguous step ranges over which the potential state is constant."""
    runs = []
    start = 0
    key = potential.state_key(t0 + 0.5 * phys.dt)
    for k in range(1, n_steps):
        k_key = potential.state_key(t0 + (k + 0.5) * phys.dt)
        if k_key != key:
            runs.append((start, k, key))
            start, key = k, k_key
    runs.append((start, n_steps, key))
    return runs


@dataclass
class ClassicalTrajectory:
    """Single sample path: positions and velocities per record time."""

    record_times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    x0: np.ndarray
    v0: np.ndarray
    escaped: bool
    energy_drift: float | None


def _prepare_state(x0, v0, grid):
    pos = np.array(x0, dtype=float, copy=True)
    vel = np.array(v0, dtype=float, copy=True)
    if grid.dim == 2 and pos.ndim != 2:
        raise ValueError("2D ensembles need positions of shape (N, 2)")
    return np.atleast_1d(pos), np.atleast_1d(vel)


def _interp_force(force, pos, grid):
    from ._stepkern_py import _interp1, _interp2

    if grid.dim == 1:
        lo = grid.extents[0][0]
        f, inside = _interp1(force[0], pos, lo, grid.dx[0], grid.n[0])
        return f, inside
    xg = (grid.extents[0][0], grid.dx[0], grid.n[0])
    yg = (grid.extents[1][0], grid.dx[1], grid.n[1])
    fx, in1 = _interp2(force[0], pos[:, 0], pos[:, 1], xg, yg)
    fy, _ = _interp2(force[1], pos[:, 0], pos[:, 1], xg, yg)
    return np.stack([fx, fy], axis=1), in1


def integrate_ensemble(
    x0,
    v0,
    potential: Potential,
    grid: SpatialGrid,
    phys: PhysicalParams,
    record_every: int,
    store_velocities: bool = False,
    t0: float = 0.0,
):
    """Velocity-Verlet for the whole ensemble with step dt.

    Returns (record_times, positions[, velocities], final_pos, final_vel,
    escaped). Record positions are float32 (membership tests only); final
    states stay float64. Escaped trajectories freeze at their last interior
    state and keep the escape flag.
    """
    n_steps = phys.n_steps
    if n_steps % record_every != 0:
        raise ValueError("record_every must divide the number of steps")
    pos, vel = _prepare_state(x0, v0, grid)
    n_tr = pos.shape[0]
    alive = np.ones(n_tr, dtype=np.uint8)
    masses = phys.masses(grid.dim)

    runs = _potential_runs(potential, phys, n_steps, t0)
    force_by_key = {}
    for _, _, key in runs:
        if key not in force_by_key:
            t_eval = _time_with_state(potential, phys, n_steps, t0, key)
            force_by_key[key] = force_grids(potential, grid, phys, t_eval)

    f0, inside0 = _interp_force(force_by_key[runs[0][2]], pos, grid)
    alive[~inside0] = 0
    if grid.dim == 1:
        acc = np.where(alive != 0, f0 / masses[0], 0.0)
    else:
        acc = f0 * np.array([1.0 / masses[0], 1.0 / masses[1]])[None, :]
        acc[alive == 0] = 0.0

    n_rec = n_steps // record_every + 1
    positions = np.empty((n_rec,) + pos.shape, dtype=np.float32)
    positions[0] = pos
    velocities = None
    if store_velocities:
        velocities = np.empty_like(positions)
        velocities[0] = vel
    record_times = t0 + phys.dt * record_every * np.arange(n_rec)

    boundaries = sorted(
        {r * record_every for r in range(n_rec)}
        | {s for run in runs for s in run[:2]}
    )
    xg = (grid.extents[0][0], grid.dx[0], grid.n[0])
    run_idx = 0
    for b0, b1 in zip(boundaries, boundaries[1:]):
        while runs[run_idx][1] <= b0:
            run_idx += 1
        key = runs[run_idx][2]
        force = force_by_key[key]
        steps = b1 - b0
        if grid.dim == 1:
            kernels.verlet1d(
                pos, vel, acc, force[0], xg[0], xg[1], xg[2],
                1.0 / masses[0], phys.dt, steps, alive,
            )
        else:
            yg = (grid.extents[1][0], grid.dx[1], grid.n[1])
            kernels.verlet2d(
                pos, vel, acc, force[0], force[1],
                xg[0], xg[1], xg[2], yg[0], yg[1], yg[2],
                1.0 / masses[0], 1.0 / masses[1], phys.dt, steps, alive,
            )
        if b1 % record_every == 0:
            rec = b1 // record_every
            positions[rec] = pos
            if store_velocities:
                velocities[rec] = vel
    escaped = alive == 0
    out = (record_times, positions, pos.copy(), vel.copy(), escaped)
    if store_velocities:
        return record_times, positions, velocities, pos.copy(), vel.copy(), escaped
    return out


def _time_with_state(potential, phys, n_steps, t0, key):
    for k in range(n_steps):
        t_mid = t0 + (k + 0.5) * phys.dt
        if potential.state_key(t_mid) == key:
            return t_mid
    return t0 + 0.5 * phys.dt


def integrate_classical(
    x0,
    v0,
    potential: Potential,
    grid: SpatialGrid,
    phys: PhysicalParams,
    record_every: int = 1,
) -> ClassicalTrajectory:
    """Single trajectory with velocities recorded and an energy-drift check
    (the drift is reported only for time-independent potentials)."""
    dim = grid.dim
    x0_arr = np.asarray([x0], dtype=float) if dim == 1 else np.asarray([x0], dtype=float)
    v0_arr = np.asarray([v0], dtype=float) if dim == 1 else np.asarray([v0], dtype=float)
    rt, pos, vel, fpos, fvel, escaped = integrate_ensemble(
        x0_arr, v0_arr, potential, grid, phys, record_every, store_velocities=True
    )
    drift = None
    if potential.window is None and not escaped[0]:
        e0 = _energy(pos[0, 0], vel[0, 0], potential, grid, phys)
        e1 = _energy(fpos[0], fvel[0], potential, grid, phys)
        scale = max(abs(e0), 1e-30)
        drift = abs(e1 - e0) / scale
    return ClassicalTrajectory(
        rt,
        pos[:, 0].astype(float),
        vel[:, 0].astype(float),
        np.atleast_1d(np.asarray(x0, dtype=float)),
        np.atleast_1d(np.asarray(v0, dtype=float)),
        bool(escaped[0]),
        drift,
    )


def _energy(x, v, potential, grid, phys):
    from ._stepkern_py import _interp1, _interp2

    masses = phys.masses(grid.dim)
    varr = potential.array(grid, phys, 0.0)
    if grid.dim == 1:
        pot, _ = _interp1(varr, np.atleast_1d(float(x)), grid.extents[0][0], grid.dx[0], grid.n[0])
        return 0.5 * masses[0] * float(v) ** 2 + float(pot[0])
    xg = (grid.extents[0][0], grid.dx[0], grid.n[0])
    yg = (grid.extents[1][0], grid.dx[1], grid.n[1])
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    pot, _ = _interp2(varr, x[:, 0], x[:, 1], xg, yg)
    kin = 0.5 * (masses[0] * v[:, 0] ** 2 + masses[1] * v[:, 1] ** 2)
    return float(kin[0] + pot[0])


# ---------------------------------------------------------------------------
# the final-condition measure


@dataclass
class FinalMeasure:
    """Partition of the grid at the horizon into weighted bins.

    Bins are the branch-tree leaf supports, optionally refined by a uniform
    detector lattice of the given width; label_grid assigns each cell its
    bin index (-1 for cells outside every leaf).
    """

    grid: SpatialGrid
    label_grid: np.ndarray
    masses: np.ndarray
    leaf_of_bin: np.ndarray
    detector_width: float

    @property
    def n_bins(self) -> int:
        return len(self.masses)

    def bin_of_positions(self, positions: np.ndarray) -> np.ndarray:
        """Bin index per position; -1 marks positions outside every bin/grid."""
        pts = np.asarray(positions, dtype=float)
        idx = self.grid.cell_of(pts)
        inside = self.grid.contains_cells(idx)
        out = np.full(np.shape(idx[0]), -1, dtype=np.int64)
        clipped = tuple(np.clip(ix, 0, n - 1) for ix, n in zip(idx, self.grid.n))
        out[inside] = self.label_grid[clipped][inside]
        return out


def build_final_measure(
    psi_T: WaveFunction,
    tree: BranchTree,
    detector_width: float = 0.0,
) -> FinalMeasure:
    """Leaf supports at the horizon, refined by detector bins inside each leaf."""
    grid = psi_T.grid
    label_grid = np.full(grid.n, -1, dtype=np.int64)
    masses = []
    leaf_of_bin = []
    dens = psi_T.density() * grid.dvol
    last = tree.last_index
    for leaf in tree.leaves():
        mask = tree.support_at(leaf, last)
        if detector_width and detector_width > 0:
            cells = np.argwhere(mask)
            det = np.empty((len(cells), grid.dim), dtype=np.int64)
            for ax in range(grid.dim):
                lo = grid.extents[ax][0]
                coords = lo + (cells[:, ax] + 0.5) * grid.dx[ax]
                det[:, ax] = np.floor((coords - lo) / detector_width).astype(np.int64)
            for d in np.unique(det, axis=0):
                sel = cells[(det == d).all(axis=1)]
                bin_id = len(masses)
                label_grid[tuple(sel.T)] = bin_id
                masses.append(float(dens[tuple(sel.T)].sum()))
                leaf_of_bin.append(leaf)
        else:
            bin_id = len(masses)
            label_grid[mask] = bin_id
            masses.append(float(dens[mask].sum()))
            leaf_of_bin.append(leaf)
    return FinalMeasure(
        grid,
        label_grid,
        np.asarray(masses, dtype=float),
        np.asarray(leaf_of_bin, dtype=np.int64),
        float(detector_width),
    )


# ---------------------------------------------------------------------------
# weights


@dataclass
class WeightedEnsemble:
    """Classical trajectories plus the final-condition weights.

    positions: (n_records, N[, dim]) float32 record samples; weight sums to
    one over the ensemble; escaped trajectories and strays landing outside
    every (or in a sub-eps_leak) bin carry weight zero but stay in exports.
    """

    grid: SpatialGrid
    record_times: np.ndarray
    positions: np.ndarray
    x0: np.ndarray
    v0: np.ndarray
    final_pos: np.ndarray
    final_vel: np.ndarray
    final_bin: np.ndarray
    weight: np.ndarray
    escaped: np.ndarray
    measure: FinalMeasure
    renorm_factor: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.weight)

    def index_of_time(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.record_times - t)))
        if abs(self.record_times[idx] - t) > 1e-9 * max(1.0, abs(t)) + 1e-12:
            raise ValueError(f"t={t} is not a record time of this ensemble")
        return idx

    def members_in(self, region: np.ndarray, index: int) -> np.ndarray:
        """Boolean mask of trajectories inside the region at a record index."""
        pts = np.asarray(self.positions[index], dtype=float)
        idx = self.grid.cell_of(pts)
        inside = self.grid.contains_cells(idx)
        clipped = tuple(np.clip(ix, 0, n - 1) for ix, n in zip(idx, self.grid.n))
        member = np.zeros(len(self.weight), dtype=bool)
        member[inside] = np.asarray(region, dtype=bool)[clipped][inside]
        return member

    def pushforward_mass(self, region: np.ndarray, t: float) -> float:
        """mu_t(region): total weight of trajectories inside region at time t."""
        member = self.members_in(region, self.index_of_time(t))
        return float(self.weight[member].sum())

    def to_csv(self, path) -> None:
        dim = self.grid.dim
        with open(path, "w") as fh:
            if dim == 1:
                fh.write("id,x0,v0,xT,vT,bin,weight,escaped\n")
                for i in range(self.n):
                    fh.write(
                        f"{i},{self.x0[i]!r},{self.v0[i]!r},"
                        f"{self.final_pos[i]!r},{self.final_vel[i]!r},"
                        f"{int(self.final_bin[i])},{self.weight[i]!r},"
                        f"{int(self.escaped[i])}\n"
                    )
            else:
                fh.write("id,x0,y0,vx0,vy0,xT,yT,vxT,vyT,bin,weight,escaped\n")
                for i in range(self.n):
                    fh.write(
                        f"{i},{self.x0[i, 0]!r},{self.x0[i, 1]!r},"
                        f"{self.v0[i, 0]!r},{self.v0[i, 1]!r},"
                        f"{self.final_pos[i, 0]!r},{self.final_pos[i, 1]!r},"
                        f"{self.final_vel[i, 0]!r},{self.final_vel[i, 1]!r},"
                        f"{int(self.final_bin[i])},{self.weight[i]!r},"
                        f"{int(self.escaped[i])}\n"
                    )


def assign_weights(
    grid: SpatialGrid,
    record_times: np.ndarray,
    positions: np.ndarray,
    x0: np.ndarray,
    v0: np.ndarray,
    final_pos: np.ndarray,
    final_vel: np.ndarray,
    escaped: np.ndarray,
    measure: FinalMeasure,
    eps_leak: float,
    eps_branch: float,
    n_min: int = DEFAULT_N_MIN,
) -> WeightedEnsemble:
    """Weight = mass(bin)/count(bin) for the landing bin, then renormalize.

    Raises CoverageError when a bin with mass above eps_branch receives no
    landing trajectory (the proposal box is too narrow) and LeakageError
    when the renormalization factor leaves [1 - eps_leak, 1 + eps_leak].
    """
    final_bin = measure.bin_of_positions(final_pos)
    final_bin[np.asarray(escaped, dtype=bool)] = -1

    counts = np.bincount(final_bin[final_bin >= 0], minlength=measure.n_bins)
    missing = np.flatnonzero((measure.masses > eps_branch) & (counts == 0))
    if missing.size:
        b = int(missing[0])
        raise CoverageError(
            f"final bin {b} (leaf {int(measure.leaf_of_bin[b])}, mass "
            f"{measure.masses[b]:.3e}) has no landing trajectories; widen the proposal"
        )
    thin = np.flatnonzero(
        (measure.masses > eps_branch) & (counts > 0) & (counts < n_min)
    )

    bin_weight = np.zeros(measure.n_bins)
    keep = (measure.masses >= eps_leak) & (counts > 0)
    bin_weight[keep] = measure.masses[keep] / counts[keep]
    weight = np.where(final_bin >= 0, bin_weight[np.clip(final_bin, 0, None)], 0.0)

    total = weight.sum()
    if total <= 0:
        raise LeakageError("no trajectory received positive weight")
    factor = 1.0 / total
    if not (1.0 - eps_leak <= factor <= 1.0 + eps_leak + 1e-12):
        raise LeakageError(
            f"weight renormalization factor {factor:.6f} outside "
            f"[1-eps_leak, 1+eps_leak]; dropped bin mass is too large"
        )
    weight = weight * factor
    return WeightedEnsemble(
        grid=grid,
        record_times=record_times,
        positions=positions,
        x0=x0,
        v0=v0,
        final_pos=final_pos,
        final_vel=final_vel,
        final_bin=final_bin,
        weight=weight,
        escaped=np.asarray(escaped, dtype=bool),
        measure=measure,
        renorm_factor=float(factor),
        diagnostics={
            "thin_bins": [int(b) for b in thin],
            "escaped_fraction": float(np.asarray(escaped, dtype=bool).mean()),
            "stray_fraction": float((final_bin < 0).mean()),
        },
    )


def pushforward_mass(ensemble: WeightedEnsemble, region: np.ndarray, t: float) -> float:
    return ensemble.pushforward_mass(region, t)


# ---------------------------------------------------------------------------
# reports
#
# Membership in a support is evaluated on the support dilated by the tree's
# gap_cells: the epsilon-support topology already treats anything within the
# gap as one place (components merge inside it), so a trajectory within the
# gap of a support is inside at the resolution the tree can speak to. The
# quantum mass between the support and its dilation is below eps_cell per
# cell, so the Born side of every comparison is unchanged.


def _dilated(mask: np.ndarray, cells: int) -> np.ndarray:
    if cells <= 0:
        return mask
    from scipy.ndimage import maximum_filter

    return maximum_filter(mask, size=2 * cells + 1)


def branch_born_report(
    ensemble: WeightedEnsemble, tree: BranchTree, dilate_cells: int | None = None
) -> list[dict]:
    """Rows (branch, time, mu_t(S_t), born mass, |difference|) for every
    live branch support at every shared record time."""
    dil = tree.params.gap_cells if dilate_cells is None else dilate_cells
    rows = []
    for r, t in enumerate(tree.record_times):
        try:
            er = ensemble.index_of_time(float(t))
        except ValueError:
            continue
        for nid in tree.alive_at(r):
            support = _dilated(tree.support_at(nid, r), dil)
            mu = float(ensemble.weight[ensemble.members_in(support, er)].sum())
            born = tree.mass_at(nid, r)
            rows.append(
                {
                    "branch": nid,
                    "time": float(t),
                    "mu": mu,
                    "born": born,
                    "delta": abs(mu - born),
                }
            )
    return rows


def lemma1_report(
    ensemble: WeightedEnsemble, tree: BranchTree, dilate_cells: int | None = None
) -> dict:
    """Weighted confinement statistics.

    sibling_crossing: weight of trajectories seen inside one branch and later
    inside an incomparable (sibling-lineage) branch. reentry: weight of
    trajectories that leave a branch's evolved support and come back.
    outside_supports: weight of trajectories ever outside all live supports.
    """
    dil = tree.params.gap_cells if dilate_cells is None else dilate_cells
    weights = ensemble.weight
    total = weights.sum()
    n_tr = ensemble.n
    shared = []
    for r, t in enumerate(tree.record_times):
        try:
            shared.append((r, ensemble.index_of_time(float(t))))
        except ValueError:
            continue

    membership: dict[int, dict[int, np.ndarray]] = {nid: {} for nid in tree.nodes}
    strict: dict[int, dict[int, np.ndarray]] = {nid: {} for nid in tree.nodes}
    for r, er in shared:
        for nid, node in tree.nodes.items():
            if r in node.supports:
                strict[nid][r] = ensemble.members_in(node.supports[r], er)
                membership[nid][r] = ensemble.members_in(
                    _dilated(node.supports[r], dil), er
                )

    # (i) sibling crossing, over pairs of incomparable lineages; strict
    # membership, so a pass through the inter-branch gap does not count
    crossing = np.zeros(n_tr, dtype=bool)
    ids = sorted(tree.nodes)
    for a in ids:
        for b in ids:
            if a == b:
                continue
            if tree.is_ancestor_or_self(a, b) or tree.is_ancestor_or_self(b, a):
                continue
            a_live = [r for r, _ in shared if tree.nodes[a].alive_at(r)]
            b_live = [r for r, _ in shared if tree.nodes[b].alive_at(r)]
            if not a_live or not b_live:
                continue
            first_in_a = np.full(n_tr, np.iinfo(np.int64).max, dtype=np.int64)
            for r in reversed(a_live):
                m = strict[a].get(r)
                if m is not None:
                    first_in_a[m] = r
            last_in_b = np.full(n_tr, -1, dtype=np.int64)
            for r in b_live:
                m = strict[b].get(r)
                if m is not None:
                    last_in_b[m] = r
            crossing |= last_in_b > first_in_a

    # (ii) exit and re-entry within one node's evolved support history
    reentry = np.zeros(n_tr, dtype=bool)
    for nid, node in tree.nodes.items():
        rs = sorted(membership[nid])
        if len(rs) < 3:
            continue
        seq = np.stack([membership[nid][r] for r in rs])
        inside_any = seq.any(axis=0)
        first = np.argmax(seq, axis=0)
        last = len(rs) - 1 - np.argmax(seq[::-1], axis=0)
        gaps = np.zeros(n_tr, dtype=bool)
        for k in range(len(rs)):
            gaps |= (~seq[k]) & (first < k) & (k < last)
        reentry |= inside_any & gaps

    # (iii) ever outside all live supports
    outside_ever = np.zeros(n_tr, dtype=bool)
    per_time_outside = []
    for r, er in shared:
        alive = tree.alive_at(r)
        inside = np.zeros(n_tr, dtype=bool)
        for nid in alive:
            inside |= membership[nid][r]
        out = ~inside
        per_time_outside.append(float(weights[out].sum()) / total)
        outside_ever |= out

    return {
        "sibling_crossing_weight": float(weights[crossing].sum()) / total,
        "reentry_weight": float(weights[reentry].sum()) / total,
        "outside_supports_weight": float(weights[outside_ever].sum()) / total,
        "outside_supports_max_per_time": max(per_time_outside),
        "zero_weight_fraction": float((weights == 0).mean()),
    }


def sigma_consistency_check(
    ensemble: WeightedEnsemble, tree: BranchTree, t: float,
    dilate_cells: int | None = None,
) -> dict:
    """Compare mu_t(S_t) with the branch-evolved final mass ||E[S_t(T)]psi(T)||^2.

    The final mass of a branch is the summed recorded horizon mass of its
    descendant leaves, which is the measure the final data assign to the
    trajectories' preimage route.
    """
    dil = tree.params.gap_cells if dilate_cells is None else dilate_cells
    r = tree.index_of_time(t)
    last = tree.last_index
    rows = []
    for nid in tree.alive_at(r):
        support = _dilated(tree.support_at(nid, r), dil)
        mu = ensemble.pushforward_mass(support, t)
        final_mass = sum(tree.mass_at(leaf, last) for leaf in tree.leaves_under(nid))
        rows.append({"branch": nid, "time": float(t), "mu": mu,
                     "final_mass": final_mass, "delta": abs(mu - final_mass)})
    return {"time": float(t), "rows": rows,
            "max_delta": max(row["delta"] for row in rows)}
