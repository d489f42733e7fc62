"""Grids, wave functions, potentials, and unitary split-operator evolution.

Everything lives on a uniform periodic grid in one or two configuration-space
dimensions (a 2D grid models two 1D particles, e.g. system + pointer). The
propagator is second-order Strang splitting: half kinetic step in spectral
space, full potential step in position space, half kinetic step. Periodic
boundaries come with the spectral method; scenario grids are sized so that
packets never approach the edges.

Natural units hbar = m = 1 are the defaults; both are configurable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erfc

from .errors import ConfigurationError, LeakageError, ResolutionError

MAX_TOTAL_POINTS = 2**22
#: dt must stay below this fraction of m*dx^2/hbar (fastest-mode period scale).
STABILITY_FRACTION = 0.1


def _as_tuple(value, dim, name):
    if np.isscalar(value):
        return (float(value),) * dim
    values = tuple(float(v) for v in value)
    if len(values) != dim:
        raise ValueError(f"{name} must be a scalar or length-{dim} sequence")
    return values


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform periodic grid over a box, one or two axes, power-of-two sizes."""

    extents: tuple[tuple[float, float], ...]
    n: tuple[int, ...]

    def __post_init__(self):
        extents = tuple((float(a), float(b)) for a, b in self.extents)
        n = tuple(int(m) for m in self.n)
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "n", n)
        if len(extents) != len(n) or len(n) not in (1, 2):
            raise ConfigurationError("grid must have 1 or 2 axes")
        for (lo, hi), m in zip(extents, n):
            if hi <= lo:
                raise ConfigurationError(f"extent [{lo}, {hi}] is empty")
            if m < 16 or (m & (m - 1)) != 0:
                raise ConfigurationError(f"axis size {m} must be a power of two >= 16")
        if int(np.prod(n)) > MAX_TOTAL_POINTS:
            raise ConfigurationError(
                f"total point count {int(np.prod(n))} exceeds {MAX_TOTAL_POINTS}"
            )

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def dx(self) -> tuple[float, ...]:
        return tuple((hi - lo) / m for (lo, hi), m in zip(self.extents, self.n))

    @property
    def dvol(self) -> float:
        return float(np.prod(self.dx))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    def axis(self, i: int) -> np.ndarray:
        """Coordinates along axis i; the right endpoint is excluded (periodic)."""
        lo, hi = self.extents[i]
        return lo + (hi - lo) * np.arange(self.n[i]) / self.n[i]

    def meshes(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*(self.axis(i) for i in range(self.dim)), indexing="ij"))

    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Angular wavenumbers per axis matching numpy's FFT layout."""
        return tuple(
            2.0 * np.pi * np.fft.fftfreq(self.n[i], d=self.dx[i]) for i in range(self.dim)
        )

    def cell_of(self, points: np.ndarray) -> tuple[np.ndarray, ...]:
        """Cell indices of positions (shape (..., dim) or (...,) in 1D).

        Out-of-box positions produce out-of-range indices; callers decide
        whether that is an escape or an error.
        """
        pts = np.asarray(points, dtype=float)
        if self.dim == 1:
            flat = pts if pts.ndim <= 1 else pts[..., 0]
            lo, _ = self.extents[0]
            return (np.floor((flat - lo) / self.dx[0]).astype(np.int64),)
        return tuple(
            np.floor((pts[..., i] - self.extents[i][0]) / self.dx[i]).astype(np.int64)
            for i in range(self.dim)
        )

    def contains_cells(self, idx: tuple[np.ndarray, ...]) -> np.ndarray:
        ok = np.ones(np.shape(idx[0]), dtype=bool)
        for i, ix in enumerate(idx):
            ok &= (ix >= 0) & (ix < self.n[i])
        return ok

    def full_mask(self) -> np.ndarray:
        return np.ones(self.n, dtype=bool)


@dataclass(frozen=True)
class PhysicalParams:
    """hbar, per-particle masses, the time step, and the finite horizon."""

    hbar: float = 1.0
    mass: float | tuple[float, ...] = 1.0
    dt: float = 1e-3
    t_final: float = 1.0

    def __post_init__(self):
        if self.hbar <= 0 or self.dt <= 0 or self.t_final <= 0:
            raise ConfigurationError("hbar, dt and t_final must be positive")
        masses = self.mass if isinstance(self.mass, tuple) else (float(self.mass),)
        if any(m <= 0 for m in masses):
            raise ConfigurationError("masses must be positive")
        steps = self.t_final / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigurationError(
                f"t_final={self.t_final} is not an integer multiple of dt={self.dt}"
            )

    def masses(self, dim: int) -> tuple[float, ...]:
        if isinstance(self.mass, tuple):
            if len(self.mass) != dim:
                raise ConfigurationError("per-axis mass list does not match grid dim")
            return self.mass
        return (float(self.mass),) * dim

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))


def validate_stability(grid: SpatialGrid, params: PhysicalParams) -> None:
    """Reject dt above the resolution bound 0.1 * m * dx^2 / hbar."""
    masses = params.masses(grid.dim)
    bound = STABILITY_FRACTION * min(
        m * dx**2 / params.hbar for m, dx in zip(masses, grid.dx)
    )
    if params.dt > bound * (1 + 1e-12):
        raise ConfigurationError(
            f"dt={params.dt:g} exceeds stability bound {bound:g} "
            f"(0.1 * m * dx^2 / hbar)"
        )


# ---------------------------------------------------------------------------
# wave functions


@dataclass(frozen=True)
class WaveFunction:
    """Complex amplitudes on a grid at a given time. Treat as immutable."""

    grid: SpatialGrid
    amps: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        amps = np.asarray(self.amps, dtype=np.complex128)
        if amps.shape != self.grid.shape:
            raise ValueError(f"amplitude shape {amps.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(amps.view(float))):
            raise ValueError("wave function contains non-finite amplitudes")
        object.__setattr__(self, "amps", amps)

    def norm_sq(self) -> float:
        return float(np.sum(np.abs(self.amps) ** 2) * self.grid.dvol)

    def normalized(self) -> "WaveFunction":
        n2 = self.norm_sq()
        if n2 <= 0:
            raise ValueError("cannot normalize the zero vector")
        return WaveFunction(self.grid, self.amps / math.sqrt(n2), self.time)

    def density(self) -> np.ndarray:
        """|psi|^2 per unit volume."""
        return np.abs(self.amps) ** 2

    def overlap(self, other: "WaveFunction") -> complex:
        return complex(np.vdot(self.amps, other.amps) * self.grid.dvol)

    def expectation_position(self) -> np.ndarray:
        rho = self.density() * self.grid.dvol
        total = rho.sum()
        meshes = self.grid.meshes()
        return np.array([float((m * rho).sum() / total) for m in meshes])

    def expectation_momentum(self, hbar: float = 1.0) -> np.ndarray:
        """Spectral momentum expectation hbar * <k>."""
        spec = np.fft.fftn(self.amps)
        w = np.abs(spec) ** 2
        total = w.sum()
        ks = self.grid.wavenumbers()
        out = []
        for i, k in enumerate(ks):
            shape = [1] * self.grid.dim
            shape[i] = -1
            out.append(float(hbar * (k.reshape(shape) * w).sum() / total))
        return np.array(out)

    def width(self, axis: int = 0) -> float:
        rho = self.density() * self.grid.dvol
        total = rho.sum()
        m = self.grid.meshes()[axis]
        mean = (m * rho).sum() / total
        return float(np.sqrt((m**2 * rho).sum() / total - mean**2))


def init_gaussian(
    grid: SpatialGrid,
    center: float | Sequence[float],
    momentum: float | Sequence[float],
    sigma: float | Sequence[float],
    hbar: float = 1.0,
) -> WaveFunction:
    """Normalized Gaussian packet exp(-(x-c)^2/(4 s^2) + i p.x / hbar).

    Raises ResolutionError when sigma < 3 dx on any axis and LeakageError
    when more than 1e-8 of the packet mass would fall outside the box.
    """
    dim = grid.dim
    center = _as_tuple(center, dim, "center")
    momentum = _as_tuple(momentum, dim, "momentum")
    sigma = _as_tuple(sigma, dim, "sigma")
    for i in range(dim):
        if sigma[i] < 3.0 * grid.dx[i]:
            raise ResolutionError(
                f"sigma={sigma[i]:g} on axis {i} is below 3*dx={3*grid.dx[i]:g}"
            )
    # Gaussian tail mass beyond the nearer box edge, per axis.
    tail = 0.0
    for i in range(dim):
        lo, hi = grid.extents[i]
        for edge in (lo, hi):
            tail += 0.5 * erfc(abs(edge - center[i]) / (math.sqrt(2.0) * sigma[i]))
    if tail > 1e-8:
        raise LeakageError(f"packet mass outside the grid ~{tail:.2e} exceeds 1e-8")

    meshes = grid.meshes()
    arg = np.zeros(grid.shape, dtype=np.complex128)
    for i in range(dim):
        arg = arg - (meshes[i] - center[i]) ** 2 / (4.0 * sigma[i] ** 2)
        arg = arg + 1j * momentum[i] * meshes[i] / hbar
    return WaveFunction(grid, np.exp(arg), 0.0).normalized()


def superpose(states: Sequence[WaveFunction], coeffs: Sequence[complex]) -> WaveFunction:
    """Normalized linear combination of states sharing a grid and time."""
    if not states:
        raise ValueError("need at least one state")
    grid, t = states[0].grid, states[0].time
    amps = np.zeros(grid.shape, dtype=np.complex128)
    for psi, c in zip(states, coeffs):
        if psi.grid != grid:
            raise ValueError("states live on different grids")
        amps += complex(c) * psi.amps
    return WaveFunction(grid, amps, t).normalized()


# ---------------------------------------------------------------------------
# potentials

_NO_WINDOW = (-math.inf, math.inf)


class Potential:
    """Base class: a real potential on the grid, optionally gated in time.

    Subclasses provide `base_array` (always-on part) and, when they carry a
    coupling window, `window_array` plus the window itself. A step from t to
    t+dt samples the window at the step midpoint.
    """

    window: tuple[float, float] | None = None

    def base_array(self, grid: SpatialGrid, params: PhysicalParams) -> np.ndarray:
        raise NotImplementedError

    def window_array(self, grid: SpatialGrid, params: PhysicalParams) -> np.ndarray:
        return np.zeros(grid.shape)

    def active(self, t: float) -> bool:
        if self.window is None:
            return False
        t_on, t_off = self.window
        return t_on <= t < t_off

    def state_key(self, t: float) -> bool:
        return self.active(t)

    def array(self, grid: SpatialGrid, params: PhysicalParams, t: float = 0.0) -> np.ndarray:
        v = self.base_array(grid, params)
        if self.active(t):
            v = v + self.window_array(grid, params)
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("potential evaluates to non-finite values")
        return v

    def _check_window(self):
        if self.window is not None:
            t_on, t_off = self.window
            if not t_on < t_off:
                raise ConfigurationError(f"window [{t_on}, {t_off}] must have t_on < t_off")


class FreePotential(Potential):
    def base_array(self, grid, params):
        return np.zeros(grid.shape)


@dataclass(frozen=True)
class HarmonicPotential(Potential):
    """V = sum_i m_i omega^2 (x_i - c_i)^2 / 2."""

    omega: float = 1.0
    center: float | tuple[float, ...] = 0.0

    def base_array(self, grid, params):
        masses = params.masses(grid.dim)
        center = _as_tuple(self.center, grid.dim, "center")
        v = np.zeros(grid.shape)
        for i, m in enumerate(grid.meshes()):
            v = v + 0.5 * masses[i] * self.omega**2 * (m - center[i]) ** 2
        return v


@dataclass(frozen=True)
class SlitBarrier(Potential):
    """Transverse barrier of a given height with open slits (1D mask model)."""

    height: float
    barrier_half_width: float
    slit_centers: tuple[float, ...]
    slit_half_width: float

    def base_array(self, grid, params):
        if grid.dim != 1:
            raise ConfigurationError("slit barrier is a 1D transverse model")
        x = grid.axis(0)
        v = np.where(np.abs(x) <= self.barrier_half_width, self.height, 0.0)
        for c in self.slit_centers:
            v[np.abs(x - c) <= self.slit_half_width] = 0.0
        return v


@dataclass(frozen=True)
class BiprismWire(Potential):
    """Deflecting wire: attractive kink V = -strength * |x - position|.

    Constant force of magnitude `strength` toward the wire while the field
    window is on; `enabled=False` keeps the window bookkeeping but applies
    no potential (the field-off control run).
    """

    position: float = 0.0
    strength: float = 1.0
    window: tuple[float, float] = (0.0, 1.0)
    enabled: bool = True

    def __post_init__(self):
        self._check_window()

    def base_array(self, grid, params):
        return np.zeros(grid.shape)

    def window_array(self, grid, params):
        if grid.dim != 1:
            raise ConfigurationError("biprism wire is a 1D transverse model")
        if not self.enabled:
            return np.zeros(grid.shape)
        x = grid.axis(0)
        return self.strength * np.abs(x - self.position)

    def active(self, t):
        t_on, t_off = self.window
        return self.enabled and t_on <= t < t_off


@dataclass(frozen=True)
class PointerCoupling(Potential):
    """Measurement coupling V = g * tanh(x/x_scale) * y inside the window.

    Axis 0 is the measured system, axis 1 the pointer; the pointer receives
    a momentum kick whose sign follows sign(x), displacing it up or down.
    """

    g: float
    window: tuple[float, float]
    x_scale: float = 0.25

    def __post_init__(self):
        self._check_window()
        if self.x_scale <= 0:
            raise ConfigurationError("x_scale must be positive")

    def base_array(self, grid, params):
        return np.zeros(grid.shape)

    def window_array(self, grid, params):
        if grid.dim != 2:
            raise ConfigurationError("pointer coupling needs a 2D configuration space")
        xm, ym = grid.meshes()
        return self.g * np.tanh(xm / self.x_scale) * ym


@dataclass(frozen=True)
class TabulatedPotential(Potential):
    """Potential given directly as an array on the grid."""

    values: np.ndarray

    def base_array(self, grid, params):
        v = np.asarray(self.values, dtype=float)
        if v.shape != grid.shape:
            raise ConfigurationError("tabulated potential shape does not match grid")
        return v


class CombinedPotential(Potential):
    """Sum of potentials; at most one of them may carry a time window."""

    def __init__(self, *parts: Potential):
        self.parts = tuple(parts)
        windowed = [p for p in self.parts if p.window is not None]
        if len(windowed) > 1:
            raise ConfigurationError("only one windowed component is supported")
        self.window = windowed[0].window if windowed else None

    def base_array(self, grid, params):
        v = np.zeros(grid.shape)
        for p in self.parts:
            v = v + p.base_array(grid, params)
        return v

    def window_array(self, grid, params):
        v = np.zeros(grid.shape)
        for p in self.parts:
            if p.window is not None:
                v = v + p.window_array(grid, params)
        return v

    def active(self, t):
        return any(p.active(t) for p in self.parts)


# ---------------------------------------------------------------------------
# evolution, projection, Born weights


def _kinetic_phase(grid: SpatialGrid, params: PhysicalParams) -> np.ndarray:
    """hbar k^2 dt / (2 m), summed over axes with per-axis masses."""
    masses = params.masses(grid.dim)
    ks = grid.wavenumbers()
    phase = np.zeros(grid.shape)
    for i, k in enumerate(ks):
        shape = [1] * grid.dim
        shape[i] = -1
        phase = phase + params.hbar * k.reshape(shape) ** 2 * params.dt / (2.0 * masses[i])
    return phase


def evolve(
    psi: WaveFunction,
    potential: Potential,
    params: PhysicalParams,
    n_steps: int,
) -> WaveFunction:
    """Advance n_steps of size dt with Strang-split spectral stepping.

    Exactly the operator product [K_half V K_half]^n; consecutive half
    kinetic factors are fused spectrally, which is the same product.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    validate_stability(psi.grid, params)
    out = _evolve_array(psi.amps, psi.time, psi.grid, potential, params, n_steps)
    return WaveFunction(psi.grid, out, psi.time + n_steps * params.dt)


def _evolve_array(
    amps: np.ndarray,
    t0: float,
    grid: SpatialGrid,
    potential: Potential,
    params: PhysicalParams,
    n_steps: int,
) -> np.ndarray:
    """Raw array version of `evolve` (no re-validation); used by trackers."""
    dt, hbar = params.dt, params.hbar
    kin = _kinetic_phase(grid, params)
    exp_k_half = np.exp(-0.5j * kin)
    exp_k_full = exp_k_half * exp_k_half
    pot_cache: dict = {}

    def pot_factor(t_mid: float) -> np.ndarray:
        key = potential.state_key(t_mid)
        if key not in pot_cache:
            v = potential.array(grid, params, t_mid)
            pot_cache[key] = np.exp(-1j * v * dt / hbar)
        return pot_cache[key]

    spec = np.fft.fftn(amps) * exp_k_half
    for step in range(n_steps):
        t_mid = t0 + (step + 0.5) * dt
        work = np.fft.ifftn(spec) * pot_factor(t_mid)
        spec = np.fft.fftn(work)
        spec *= exp_k_full if step < n_steps - 1 else exp_k_half
    return np.fft.ifftn(spec)


def project(psi: WaveFunction, region: np.ndarray) -> WaveFunction:
    """E(region) psi: zero amplitudes outside the region. Not renormalized."""
    mask = np.asarray(region, dtype=bool)
    if mask.shape != psi.grid.shape:
        raise ValueError("region mask shape does not match grid")
    return WaveFunction(psi.grid, np.where(mask, psi.amps, 0.0), psi.time)


def born_mass(psi: WaveFunction, region: np.ndarray) -> float:
    """<psi|E(region)|psi> = sum over the region of |psi|^2 dV."""
    mask = np.asarray(region, dtype=bool)
    if mask.shape != psi.grid.shape:
        raise ValueError("region mask shape does not match grid")
    return float(np.sum(np.abs(psi.amps[mask]) ** 2) * psi.grid.dvol)


# ---------------------------------------------------------------------------
# wave-function export


def write_csv(psi: WaveFunction, path) -> None:
    """Columns: cell index per axis, coordinate per axis, Re, Im."""
    grid = psi.grid
    with open(path, "w") as fh:
        if grid.dim == 1:
            fh.write("i,x,re,im\n")
            x = grid.axis(0)
            for i in range(grid.n[0]):
                a = psi.amps[i]
                fh.write(f"{i},{x[i]!r},{a.real!r},{a.imag!r}\n")
        else:
            fh.write("i,j,x,y,re,im\n")
            x, y = grid.axis(0), grid.axis(1)
            for i in range(grid.n[0]):
                for j in range(grid.n[1]):
                    a = psi.amps[i, j]
                    fh.write(f"{i},{j},{x[i]!r},{y[j]!r},{a.real!r},{a.imag!r}\n")


def write_binary(psi: WaveFunction, path) -> None:
    """Little-endian dump.

    Header: uint32 dim, uint32 n per axis, float64 (min, max) per axis,
    float64 time. Payload: float64 interleaved Re, Im in C order.
    """
    grid = psi.grid
    with open(path, "wb") as fh:
        np.asarray([grid.dim], dtype="<u4").tofile(fh)
        np.asarray(grid.n, dtype="<u4").tofile(fh)
        np.asarray([e for ext in grid.extents for e in ext], dtype="<f8").tofile(fh)
        np.asarray([psi.time], dtype="<f8").tofile(fh)
        inter = np.empty(psi.amps.size * 2, dtype="<f8")
        inter[0::2] = psi.amps.real.ravel()
        inter[1::2] = psi.amps.imag.ravel()
        inter.tofile(fh)


def read_binary(path) -> WaveFunction:
    with open(path, "rb") as fh:
        dim = int(np.fromfile(fh, dtype="<u4", count=1)[0])
        n = tuple(int(v) for v in np.fromfile(fh, dtype="<u4", count=dim))
        ext_flat = np.fromfile(fh, dtype="<f8", count=2 * dim)
        time = float(np.fromfile(fh, dtype="<f8", count=1)[0])
        extents = tuple((ext_flat[2 * i], ext_flat[2 * i + 1]) for i in range(dim))
        grid = SpatialGrid(extents, n)
        inter = np.fromfile(fh, dtype="<f8", count=2 * int(np.prod(n)))
    amps = (inter[0::2] + 1j * inter[1::2]).reshape(n)
    return WaveFunction(grid, amps, time)
