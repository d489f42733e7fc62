"""Guidance-equation trajectories and the equivariance check.

The velocity field is v = hbar m^-1 Im(grad psi / psi), evaluated with
central differences on the grid and (bi)linear interpolation at trajectory
positions. Where the density falls below a relative floor the velocity is
regularized: a trajectory keeps its last finite velocity and the event is
flagged. Integration is midpoint RK2 with the wave function linearly
interpolated at half steps, co-evolving the state one dt at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import StatisticsError
from .qdyn import (
    PhysicalParams,
    Potential,
    SpatialGrid,
    WaveFunction,
    born_mass,
    validate_stability,
)

DEFAULT_NODE_FLOOR = 1e-12


class SplitOperatorStepper:
    """One-dt split-operator stepping with cached phase factors."""

    def __init__(self, grid: SpatialGrid, potential: Potential, params: PhysicalParams):
        from .qdyn import _kinetic_phase

        self.grid = grid
        self.potential = potential
        self.params = params
        self._exp_k_half = np.exp(-0.5j * _kinetic_phase(grid, params))
        self._pot_cache: dict = {}

    def _pot_factor(self, t_mid: float) -> np.ndarray:
        key = self.potential.state_key(t_mid)
        if key not in self._pot_cache:
            v = self.potential.array(self.grid, self.params, t_mid)
            self._pot_cache[key] = np.exp(-1j * v * self.params.dt / self.params.hbar)
        return self._pot_cache[key]

    def step(self, amps: np.ndarray, t: float) -> np.ndarray:
        """amps at t -> amps at t + dt (half kinetic, potential, half kinetic)."""
        work = np.fft.ifftn(self._exp_k_half * np.fft.fftn(amps))
        work *= self._pot_factor(t + 0.5 * self.params.dt)
        return np.fft.ifftn(self._exp_k_half * np.fft.fftn(work))


def velocity_grids(
    amps: np.ndarray,
    grid: SpatialGrid,
    params: PhysicalParams,
    node_floor: float = DEFAULT_NODE_FLOOR,
):
    """Per-axis guidance velocity arrays plus the validity mask.

    Velocities are hbar/m_i * Im(d_i psi / psi) by periodic central
    differences; cells with density below node_floor * max density are
    marked invalid (velocity set to 0 there).
    """
    masses = params.masses(grid.dim)
    dens = np.abs(amps) ** 2
    floor = node_floor * dens.max()
    valid = (dens > floor).astype(np.uint8)
    safe = np.where(dens > floor, dens, 1.0)
    fields = []
    for i in range(grid.dim):
        grad = (np.roll(amps, -1, axis=i) - np.roll(amps, 1, axis=i)) / (2.0 * grid.dx[i])
        v = (params.hbar / masses[i]) * np.imag(np.conj(amps) * grad) / safe
        fields.append(np.where(valid != 0, v, 0.0))
    return fields, valid


def velocity_field(
    psi: WaveFunction,
    x,
    params: PhysicalParams,
    node_floor: float = DEFAULT_NODE_FLOOR,
    fallback: float = 0.0,
):
    """Guidance velocity at positions x.

    Returns (velocities, regularized) where `regularized` marks points whose
    interpolation stencil touched a below-floor cell; those points carry the
    fallback velocity.
    """
    from ._stepkern_py import _interp1, _interp2, _stencil_valid1, _stencil_valid2

    grid = psi.grid
    fields, valid = velocity_grids(psi.amps, grid, params, node_floor)
    pts = np.atleast_1d(np.asarray(x, dtype=float))
    if grid.dim == 1:
        flat = pts if pts.ndim == 1 else pts[..., 0]
        lo = grid.extents[0][0]
        v, _ = _interp1(fields[0], flat, lo, grid.dx[0], grid.n[0])
        ok = _stencil_valid1(valid, flat, lo, grid.dx[0], grid.n[0])
        v = np.where(ok, v, fallback)
        return v.reshape(np.shape(x) if np.ndim(x) else ()), ~ok
    xg = (grid.extents[0][0], grid.dx[0], grid.n[0])
    yg = (grid.extents[1][0], grid.dx[1], grid.n[1])
    if pts.ndim == 1:
        pts = pts[None, :]
    vx, _ = _interp2(fields[0], pts[:, 0], pts[:, 1], xg, yg)
    vy, _ = _interp2(fields[1], pts[:, 0], pts[:, 1], xg, yg)
    ok = _stencil_valid2(valid, pts[:, 0], pts[:, 1], xg, yg)
    out = np.stack([np.where(ok, vx, fallback), np.where(ok, vy, fallback)], axis=-1)
    if np.ndim(x) == 1:
        return out[0], ~ok[:1]
    return out, ~ok


def sample_initial(psi0: WaveFunction, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n positions from the |psi0|^2 cell masses, uniform within cells.

    1D uses the inverse discrete CDF; 2D draws flattened cell indices from
    the categorical cell-mass distribution. Identical seeds give identical
    draws bit for bit.
    """
    grid = psi0.grid
    p = psi0.density().ravel()
    p = p / p.sum()
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    flat = np.searchsorted(cdf, rng.random(n), side="right")
    flat = np.minimum(flat, p.size - 1)
    offs = rng.random((n, grid.dim))
    if grid.dim == 1:
        lo = grid.extents[0][0]
        return lo + (flat + offs[:, 0]) * grid.dx[0]
    ii, jj = np.unravel_index(flat, grid.shape)
    x = grid.extents[0][0] + (ii + offs[:, 0]) * grid.dx[0]
    y = grid.extents[1][0] + (jj + offs[:, 1]) * grid.dx[1]
    return np.stack([x, y], axis=1)


@dataclass
class GuidedEnsemble:
    """Guided trajectories at the run's record times.

    positions has shape (n_records, N) in 1D and (n_records, N, 2) in 2D;
    frozen (escaped) trajectories keep their last interior position and are
    excluded from statistics via `alive`.
    """

    record_times: np.ndarray
    positions: np.ndarray
    x0: np.ndarray
    alive: np.ndarray
    flags: np.ndarray

    @property
    def n_valid(self) -> int:
        return int(self.alive.sum())

    def positions_at(self, index: int) -> np.ndarray:
        return self.positions[index]

    def flagged_step_fraction(self, n_steps: int) -> float:
        return float(self.flags.sum()) / (max(1, len(self.x0)) * max(1, n_steps) * 2)


@dataclass
class GuidedTrajectory:
    """Single sample path: positions per record time plus node-event count."""

    record_times: np.ndarray
    samples: np.ndarray
    x0: np.ndarray
    flags: int
    valid: bool


def integrate_guided_ensemble(
    psi0: WaveFunction,
    potential: Potential,
    params: PhysicalParams,
    x0: np.ndarray,
    record_every: int,
    node_floor: float = DEFAULT_NODE_FLOOR,
) -> GuidedEnsemble:
    """Advance all trajectories through the co-evolved guidance flow.

    The state is evolved one dt at a time; each RK2 step samples the
    velocity field at t (from psi_t) and at t + dt/2 (from the average of
    psi_t and psi_{t+dt}).
    """
    validate_stability(psi0.grid, params)
    grid = psi0.grid
    n_steps = params.n_steps
    if n_steps % record_every != 0:
        raise ValueError("record_every must divide the number of steps")
    stepper = SplitOperatorStepper(grid, potential, params)

    x0 = np.asarray(x0, dtype=float)
    if grid.dim == 2 and (x0.ndim != 2 or x0.shape[1] != 2):
        raise ValueError("2D ensemble needs x0 of shape (N, 2)")
    pos = x0.copy()
    n_tr = pos.shape[0]
    alive = np.ones(n_tr, dtype=np.uint8)
    flags = np.zeros(n_tr, dtype=np.int64)
    last_v = np.zeros_like(pos)

    n_rec = n_steps // record_every + 1
    positions = np.empty((n_rec,) + pos.shape, dtype=float)
    positions[0] = pos
    record_times = psi0.time + params.dt * record_every * np.arange(n_rec)

    amps = psi0.amps
    t = psi0.time
    xg = (grid.extents[0][0], grid.dx[0], grid.n[0])
    rec = 1
    for step in range(n_steps):
        fields_a, valid_a = velocity_grids(amps, grid, params, node_floor)
        amps_next = stepper.step(amps, t)
        fields_b, valid_b = velocity_grids(
            0.5 * (amps + amps_next), grid, params, node_floor
        )
        if grid.dim == 1:
            kernels.guided1d_step(
                pos, fields_a[0], valid_a, fields_b[0], valid_b,
                xg[0], xg[1], xg[2], params.dt, last_v, flags, alive,
            )
        else:
            yg = (grid.extents[1][0], grid.dx[1], grid.n[1])
            kernels.guided2d_step(
                pos, fields_a[0], fields_a[1], valid_a,
                fields_b[0], fields_b[1], valid_b,
                xg[0], xg[1], xg[2], yg[0], yg[1], yg[2],
                params.dt, last_v, flags, alive,
            )
        amps = amps_next
        t += params.dt
        if (step + 1) % record_every == 0:
            positions[rec] = pos
            rec += 1
    return GuidedEnsemble(record_times, positions, x0, alive.astype(bool), flags)


def integrate_guided(
    psi0: WaveFunction,
    potential: Potential,
    params: PhysicalParams,
    x0,
    record_every: int = 1,
    node_floor: float = DEFAULT_NODE_FLOOR,
) -> GuidedTrajectory:
    """Single guided sample path from x0 (ensemble machinery, N=1)."""
    x0_arr = np.asarray([x0] if np.ndim(x0) == 0 else [np.asarray(x0)], dtype=float)
    if psi0.grid.dim == 1:
        x0_arr = x0_arr.reshape(1)
    ens = integrate_guided_ensemble(psi0, potential, params, x0_arr, record_every, node_floor)
    return GuidedTrajectory(
        ens.record_times,
        ens.positions[:, 0],
        ens.x0[0] if ens.x0.ndim else ens.x0,
        int(ens.flags[0]),
        bool(ens.alive[0]),
    )


def equivariance_distance(
    positions: np.ndarray,
    psi: WaveFunction,
    n_bins: int,
    valid: np.ndarray | None = None,
) -> float:
    """Total-variation distance between the empirical histogram and the
    Born masses on n_bins uniform bins (1D).
    """
    grid = psi.grid
    if grid.dim != 1:
        raise ValueError("equivariance distance is defined on 1D runs")
    pts = np.asarray(positions, dtype=float)
    if valid is not None:
        pts = pts[np.asarray(valid, dtype=bool)]
    if pts.size < 1000:
        raise StatisticsError(f"need >= 1000 valid trajectories, got {pts.size}")
    lo, hi = grid.extents[0]
    edges = np.linspace(lo, hi, n_bins + 1)
    emp, _ = np.histogram(pts, bins=edges)
    emp = emp / pts.size
    dens = psi.density() * grid.dvol
    centers = grid.axis(0)
    which = np.clip(np.searchsorted(edges, centers, side="right") - 1, 0, n_bins - 1)
    born = np.bincount(which, weights=dens, minlength=n_bins)
    born = born / born.sum()
    return 0.5 * float(np.abs(emp - born).sum())


def count_order_inversions(x0: np.ndarray, x1: np.ndarray) -> int:
    """Pairs whose relative order differs between x0 and x1 (merge count)."""
    order = np.argsort(x0, kind="stable")
    seq = np.asarray(x1)[order]

    def merge_count(a):
        n = len(a)
        if n <= 1:
            return a, 0
        left, cl = merge_count(a[: n // 2])
        right, cr = merge_count(a[n // 2:])
        merged = np.empty(n, dtype=a.dtype)
        count = cl + cr
        i = j = k = 0
        while i < len(left) and j < len(right):
            if left[i] <= right[j]:
                merged[k] = left[i]
                i += 1
            else:
                merged[k] = right[j]
                count += len(left) - i
                j += 1
            k += 1
        merged[k:] = left[i:] if i < len(left) else right[j:]
        return merged, count

    _, inversions = merge_count(seq)
    return int(inversions)
