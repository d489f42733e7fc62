"""Exact lattice path sums: transfer kernels, constrained propagators, and
the classical-confinement (margin) analysis.

The one-step kernel on a 1D grid is

    K_dt[x', x] = sqrt(m / (2 pi i hbar dt))
                  * exp{ (i/hbar) [ m (x'-x)^2 / (2 dt) - V((x+x')/2) dt ] }

and the n-fold product with a dx factor per contraction is, identically, the
sum over all lattice paths of A^n exp(i S/hbar) with the midpoint-rule
action. Inserting the indicator of a support at an interior slice restricts
the sum to paths passing through that support.

Numerical regime notes (they matter): the composed kernel approximates the
continuum propagator only while the one-step chirp is alias-safe on the box,
pi * hbar * dt / (m * dx) > box length; the finite box also truncates every
intermediate Fresnel integral, leaving edge tails of relative size
~ sqrt(hbar dt / m) / (distance to the box edge) per slice. Constraining a
slice to an interval with `margin` Fresnel widths of clearance around the
classical point leaves stationary-phase tails of relative size ~ 0.8/margin,
which is what the margin sweep measures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .qdyn import PhysicalParams, Potential, SpatialGrid

MAX_DENSE_N = 2048


@dataclass(frozen=True)
class StepKernel:
    """Dense one-step transfer kernel on a 1D grid."""

    grid: SpatialGrid
    dt: float
    matrix: np.ndarray
    hbar: float
    mass: float

    @property
    def n(self) -> int:
        return self.grid.n[0]

    @property
    def dx(self) -> float:
        return self.grid.dx[0]

    def alias_shift(self) -> float:
        """Displacement of the first Poisson image; keep it beyond the box."""
        return np.pi * self.hbar * self.dt / (self.mass * self.dx)


@dataclass(frozen=True)
class LatticePropagator:
    """n-slice kernel product, optionally with one interior-slice constraint."""

    t_total: float
    n_slices: int
    matrix: np.ndarray
    constraint_slice: int | None = None


def build_kernel(
    grid: SpatialGrid,
    potential: Potential,
    phys: PhysicalParams,
    dt_lattice: float,
) -> StepKernel:
    """Midpoint-rule one-step kernel; dense, so n is capped at 2048."""
    if grid.dim != 1:
        raise ConfigurationError("the lattice path integral is 1D-only")
    n = grid.n[0]
    if n > MAX_DENSE_N:
        raise ConfigurationError(f"n={n} exceeds the dense-kernel bound {MAX_DENSE_N}")
    if dt_lattice <= 0:
        raise ConfigurationError("dt_lattice must be positive")
    hbar = phys.hbar
    mass = phys.masses(1)[0]
    x = grid.axis(0)
    # V at pairwise midpoints via a half-spacing refinement of the same box
    fine = SpatialGrid(grid.extents, (2 * n,))
    v_fine = potential.array(fine, phys, 0.0)
    idx = np.arange(n)
    v_mid = v_fine[idx[:, None] + idx[None, :]]
    amp = np.sqrt(mass / (2j * np.pi * hbar * dt_lattice))
    phase = (
        mass * (x[:, None] - x[None, :]) ** 2 / (2.0 * dt_lattice) - v_mid * dt_lattice
    ) / hbar
    return StepKernel(grid, dt_lattice, amp * np.exp(1j * phase), hbar, mass)


def propagate(
    kernel: StepKernel,
    n_slices: int,
    constraint: tuple[int, np.ndarray] | None = None,
) -> LatticePropagator:
    """Full propagator matrix K(t1 + n dt, x'; t1, x), dx per contraction.

    A constraint (slice_index, support_mask) zeroes the rows of the partial
    product at that slice, which is exactly the indicator insertion; the
    full-line mask reproduces the unconstrained product bit for bit.
    """
    if n_slices < 1:
        raise ValueError("n_slices must be >= 1")
    j = None
    mask = None
    if constraint is not None:
        j, mask = constraint
        if not (0 < j < n_slices):
            raise ValueError("constraint slice must be strictly between 0 and n_slices")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (kernel.n,):
            raise ValueError("constraint mask must match the grid")
    m = kernel.matrix.copy()
    for s in range(1, n_slices):
        if j == s:
            m = np.where(mask[:, None], m, 0.0)
        m = kernel.matrix @ (kernel.dx * m)
    if j is not None and n_slices == 1:
        raise ValueError("cannot constrain a single-step propagator")
    return LatticePropagator(n_slices * kernel.dt, n_slices, m, j)


def propagate_column(
    kernel: StepKernel,
    n_slices: int,
    i_start: int,
    constraint: tuple[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Column K(., x_{i_start}) by repeated kernel application (fast path)."""
    j, mask = (None, None)
    if constraint is not None:
        j, mask = constraint
        if not (0 < j < n_slices):
            raise ValueError("constraint slice must be strictly between 0 and n_slices")
    psi = np.zeros(kernel.n, dtype=np.complex128)
    psi[i_start] = 1.0 / kernel.dx
    for s in range(n_slices):
        if j == s and s > 0:
            psi = np.where(mask, psi, 0.0)
        psi = (kernel.matrix @ psi) * kernel.dx
    return psi


def brute_force_propagator(
    grid: SpatialGrid,
    potential: Potential,
    phys: PhysicalParams,
    dt_lattice: float,
    n_slices: int,
    constraint: tuple[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Independent oracle: per-path amplitudes A^n exp(i S / hbar), summed.

    Enumerates every lattice path through the intermediate slices and adds
    its amplitude evaluated from the path's total midpoint-rule action; no
    sequential contraction is involved. Exponential in n_slices, so it is
    limited to n_slices <= 4 and small grids.
    """
    if n_slices > 4:
        raise ValueError("brute force is limited to n_slices <= 4")
    if grid.dim != 1:
        raise ConfigurationError("the lattice path integral is 1D-only")
    n = grid.n[0]
    x = grid.axis(0)
    dt = dt_lattice
    hbar = phys.hbar
    mass = phys.masses(1)[0]
    fine = SpatialGrid(grid.extents, (2 * n,))
    v_fine = potential.array(fine, phys, 0.0)
    amp_one = np.sqrt(mass / (2j * np.pi * hbar * dt))

    def seg_action(xa, xb, ia, ib):
        v_mid = v_fine[ia + ib]
        return mass * (xb - xa) ** 2 / (2.0 * dt) - v_mid * dt

    j_mask = None
    if constraint is not None:
        j_c, j_mask = constraint
        if not (0 < j_c < n_slices):
            raise ValueError("constraint slice must be interior")

    out = np.zeros((n, n), dtype=np.complex128)
    idx = np.arange(n)
    if n_slices == 1:
        for i1 in range(n):
            out[:, i1] = amp_one * np.exp(1j * seg_action(x[i1], x, i1, idx) / hbar)
        return out

    inter_idx = np.meshgrid(*([idx] * (n_slices - 1)), indexing="ij")
    inter_x = [x[g] for g in inter_idx]
    for i1 in range(n):
        acc = seg_action(x[i1], inter_x[0], i1, inter_idx[0])
        for k in range(len(inter_x) - 1):
            acc = acc + seg_action(inter_x[k], inter_x[k + 1], inter_idx[k], inter_idx[k + 1])
        for i3 in range(n):
            total = acc + seg_action(inter_x[-1], x[i3], inter_idx[-1], i3)
            paths = amp_one**n_slices * np.exp(1j * total / hbar)
            if j_mask is not None:
                shape = [1] * (n_slices - 1)
                shape[constraint[0] - 1] = n
                paths = paths * np.asarray(j_mask, dtype=bool).reshape(shape)
            out[i3, i1] = paths.sum() * grid.dx[0] ** (n_slices - 1)
    return out


# ---------------------------------------------------------------------------
# classical shooting and the conjecture test


def classical_shoot(
    x1: float,
    x3: float,
    t_total: float,
    potential: Potential,
    grid: SpatialGrid,
    phys: PhysicalParams,
    dt_shoot: float | None = None,
    v_span: float | None = None,
):
    """Classical path from (0, x1) to (t_total, x3) by bisection on v0.

    Uses the velocity-Verlet integrator; returns (v0, path positions at the
    n_slices+1 slice times via a final fine integration) or None when no
    bracket with an endpoint sign change can be found.
    """
    from .newtonian import integrate_classical

    if dt_shoot is None:
        dt_shoot = t_total / 512.0
    n_fine = max(8, int(round(t_total / dt_shoot)))
    shoot_phys = PhysicalParams(
        hbar=phys.hbar, mass=phys.mass, dt=t_total / n_fine, t_final=t_total
    )

    def endpoint(v0):
        traj = integrate_classical(x1, v0, potential, grid, shoot_phys, record_every=n_fine)
        if traj.escaped:
            return None
        return float(traj.positions[-1]) - x3

    v_guess = (x3 - x1) / t_total
    span = v_span if v_span is not None else max(1.0, 4.0 * abs(v_guess))
    lo, hi = v_guess - span, v_guess + span
    f_lo, f_hi = endpoint(lo), endpoint(hi)
    for _ in range(8):
        if f_lo is not None and f_hi is not None and f_lo * f_hi <= 0:
            break
        span *= 2.0
        lo, hi = v_guess - span, v_guess + span
        f_lo, f_hi = endpoint(lo), endpoint(hi)
    else:
        return None
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        f_mid = endpoint(mid)
        if f_mid is None:
            return None
        if (f_lo <= 0) == (f_mid <= 0):
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid
    v0 = 0.5 * (lo + hi)
    traj = integrate_classical(x1, v0, potential, grid, shoot_phys, record_every=1)
    return v0, traj


def fresnel_width(hbar: float, mass: float, t1: float, t2: float, t3: float) -> float:
    """Lattice Fresnel width sqrt(hbar (t2-t1)(t3-t2) / (m (t3-t1)))."""
    return float(np.sqrt(hbar * (t2 - t1) * (t3 - t2) / (mass * (t3 - t1))))


def _interval_mask(grid: SpatialGrid, lo: float, hi: float) -> np.ndarray:
    x = grid.axis(0)
    return (x >= lo) & (x <= hi)


def boundary_distance(grid: SpatialGrid, mask: np.ndarray, point: float) -> float:
    """Signed distance from `point` to the support boundary (positive inside)."""
    x = grid.axis(0)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return -np.inf
    inside = bool(np.interp(point, x, mask.astype(float)) > 0.5)
    if inside:
        off = x[~mask]
        if off.size == 0:
            return np.inf
        return float(np.min(np.abs(off - point)))
    on = x[mask]
    return -float(np.min(np.abs(on - point)))


def conjecture1_test(
    kernel: StepKernel,
    n_slices: int,
    t2_slice: int,
    s2_mask: np.ndarray,
    x1: float,
    x3: float,
    potential: Potential,
    phys: PhysicalParams,
) -> dict | None:
    """Constrained/unconstrained ratio against the classical-path margin.

    Shoots the classical path between the endpoints, measures how deep its
    slice-t2 position sits inside the constraint support (in Fresnel-width
    units), and reports |K'/K|. Returns None when shooting fails.
    """
    grid = kernel.grid
    x = grid.axis(0)
    i1 = int(np.argmin(np.abs(x - x1)))
    i3 = int(np.argmin(np.abs(x - x3)))
    t_total = n_slices * kernel.dt
    t2 = t2_slice * kernel.dt

    shot = classical_shoot(x[i1], x[i3], t_total, potential, grid, phys)
    if shot is None:
        return None
    v0, traj = shot
    xc = float(np.interp(t2, traj.record_times, traj.positions))

    w = fresnel_width(kernel.hbar, kernel.mass, 0.0, t2, t_total)
    dist = boundary_distance(grid, s2_mask, xc)
    margin = dist / w

    col = propagate_column(kernel, n_slices, i1)
    col_c = propagate_column(kernel, n_slices, i1, constraint=(t2_slice, s2_mask))
    k_val = complex(col[i3])
    kp_val = complex(col_c[i3])
    ratio = kp_val / k_val if k_val != 0 else complex(np.nan)
    return {
        "x1": float(x[i1]),
        "x3": float(x[i3]),
        "t2": t2,
        "t_total": t_total,
        "v0_classical": float(v0),
        "classical_x_t2": xc,
        "classical_hit": bool(dist > 0),
        "margin": float(margin),
        "fresnel_width": w,
        "K": [k_val.real, k_val.imag],
        "K_constrained": [kp_val.real, kp_val.imag],
        "ratio_modulus": float(abs(ratio)),
        "ratio_deviation": float(abs(ratio - 1.0)),
    }


def margin_sweep(
    kernel: StepKernel,
    n_slices: int,
    t2_slice: int,
    x1: float,
    x3: float,
    margins,
    potential: Potential,
    phys: PhysicalParams,
) -> list[dict]:
    """Centered-interval constraints of growing margin around the classical
    point; one conjecture-test report per margin value."""
    grid = kernel.grid
    x = grid.axis(0)
    i1 = int(np.argmin(np.abs(x - x1)))
    i3 = int(np.argmin(np.abs(x - x3)))
    t_total = n_slices * kernel.dt
    t2 = t2_slice * kernel.dt
    shot = classical_shoot(x[i1], x[i3], t_total, potential, grid, phys)
    if shot is None:
        raise RuntimeError("classical shooting failed for the sweep endpoints")
    _, traj = shot
    xc = float(np.interp(t2, traj.record_times, traj.positions))
    w = fresnel_width(kernel.hbar, kernel.mass, 0.0, t2, t_total)

    rows = []
    for m in margins:
        mask = _interval_mask(grid, xc - m * w, xc + m * w)
        report = conjecture1_test(
            kernel, n_slices, t2_slice, mask, x1, x3, potential, phys
        )
        report["requested_margin"] = float(m)
        rows.append(report)
    return rows


def sweep_spearman(rows: list[dict]) -> float:
    """Spearman correlation of |K'/K - 1| against the requested margin."""
    from scipy.stats import spearmanr

    margins = [r["requested_margin"] for r in rows]
    devs = [r["ratio_deviation"] for r in rows]
    return float(spearmanr(margins, devs).statistic)
