"""Pure-numpy trajectory stepping kernels (fallback backend).

Semantics are kept in lockstep with the compiled `_stepkern` extension:
per-trajectory arithmetic is elementwise-identical, so the two backends
agree to machine precision. All kernels update their arrays in place and
freeze trajectories once they leave the interpolation interior.

Interpolation convention on a uniform axis (x_min, dx, n):
    s = (x - x_min)/dx, i0 = floor(s), w = s - i0,
    f(x) = f[i0]*(1-w) + f[i0+1]*w
valid for x in [x_min, x_min + (n-1)*dx].
"""

import numpy as np

BACKEND = "python"


def _locate1(x, x_min, dx, n):
    s = (x - x_min) / dx
    inside = (s >= 0.0) & (s <= n - 1.0)
    i0 = np.clip(np.floor(s).astype(np.int64), 0, n - 2)
    w = s - i0
    return i0, w, inside


def _interp1(f, x, x_min, dx, n):
    i0, w, inside = _locate1(x, x_min, dx, n)
    return f[i0] * (1.0 - w) + f[i0 + 1] * w, inside


def _interp2(f, x, y, xg, yg):
    x_min, dx, nx = xg
    y_min, dy, ny = yg
    i0, wx, in_x = _locate1(x, x_min, dx, nx)
    j0, wy, in_y = _locate1(y, y_min, dy, ny)
    v = (
        f[i0, j0] * (1.0 - wx) * (1.0 - wy)
        + f[i0 + 1, j0] * wx * (1.0 - wy)
        + f[i0, j0 + 1] * (1.0 - wx) * wy
        + f[i0 + 1, j0 + 1] * wx * wy
    )
    return v, in_x & in_y


def _stencil_valid1(valid, x, x_min, dx, n):
    i0, _, inside = _locate1(x, x_min, dx, n)
    return inside & (valid[i0] != 0) & (valid[i0 + 1] != 0)


def _stencil_valid2(valid, x, y, xg, yg):
    i0, _, in_x = _locate1(x, xg[0], xg[1], xg[2])
    j0, _, in_y = _locate1(y, yg[0], yg[1], yg[2])
    ok = in_x & in_y
    ok &= (valid[i0, j0] != 0) & (valid[i0 + 1, j0] != 0)
    ok &= (valid[i0, j0 + 1] != 0) & (valid[i0 + 1, j0 + 1] != 0)
    return ok


def verlet1d(pos, vel, acc, force, x_min, dx, n, inv_mass, dt, n_steps, alive):
    """Velocity-Verlet with linearly interpolated force; freezes escapers."""
    for _ in range(n_steps):
        live = alive != 0
        if not live.any():
            break
        x_new = pos + dt * vel + (0.5 * dt * dt) * acc
        f_new, inside = _interp1(force, x_new, x_min, dx, n)
        escaped = live & ~inside
        alive[escaped] = 0
        step = live & inside
        a_new = f_new * inv_mass
        vel[step] = vel[step] + (0.5 * dt) * (acc[step] + a_new[step])
        pos[step] = x_new[step]
        acc[step] = a_new[step]


def verlet2d(pos, vel, acc, fx, fy, xg, yg, inv_mx, inv_my, dt, n_steps, alive):
    for _ in range(n_steps):
        live = alive != 0
        if not live.any():
            break
        x_new = pos[:, 0] + dt * vel[:, 0] + (0.5 * dt * dt) * acc[:, 0]
        y_new = pos[:, 1] + dt * vel[:, 1] + (0.5 * dt * dt) * acc[:, 1]
        fxv, in1 = _interp2(fx, x_new, y_new, xg, yg)
        fyv, _ = _interp2(fy, x_new, y_new, xg, yg)
        escaped = live & ~in1
        alive[escaped] = 0
        step = live & in1
        ax_new = fxv * inv_mx
        ay_new = fyv * inv_my
        vel[step, 0] += (0.5 * dt) * (acc[step, 0] + ax_new[step])
        vel[step, 1] += (0.5 * dt) * (acc[step, 1] + ay_new[step])
        pos[step, 0] = x_new[step]
        pos[step, 1] = y_new[step]
        acc[step, 0] = ax_new[step]
        acc[step, 1] = ay_new[step]


def guided1d_step(pos, vga, valid_a, vgb, valid_b, x_min, dx, n, dt, last_v, flags, alive):
    """One midpoint (RK2) step of the guidance flow.

    vga/valid_a sample the velocity field at t, vgb/valid_b at t + dt/2.
    Stencils touching a below-floor (invalid) density cell fall back to the
    trajectory's last finite velocity and are counted in `flags`.
    """
    live = alive != 0
    v1, _ = _interp1(vga, pos, x_min, dx, n)
    ok1 = _stencil_valid1(valid_a, pos, x_min, dx, n)
    reg1 = live & ~ok1
    v1 = np.where(ok1, v1, last_v)
    flags[reg1] += 1

    x_mid = pos + (0.5 * dt) * v1
    v2, _ = _interp1(vgb, x_mid, x_min, dx, n)
    ok2 = _stencil_valid1(valid_b, x_mid, x_min, dx, n)
    reg2 = live & ~ok2
    v2 = np.where(ok2, v2, v1)
    flags[reg2] += 1

    x_new = pos + dt * v2
    _, inside = _locate1(x_new, x_min, dx, n)
    escaped = live & ~inside
    alive[escaped] = 0
    step = live & inside
    pos[step] = x_new[step]
    last_v[step] = v2[step]


def guided2d_step(pos, vgax, vgay, valid_a, vgbx, vgby, valid_b, xg, yg, dt, last_v, flags, alive):
    live = alive != 0
    x, y = pos[:, 0], pos[:, 1]
    v1x, _ = _interp2(vgax, x, y, xg, yg)
    v1y, _ = _interp2(vgay, x, y, xg, yg)
    ok1 = _stencil_valid2(valid_a, x, y, xg, yg)
    reg1 = live & ~ok1
    v1x = np.where(ok1, v1x, last_v[:, 0])
    v1y = np.where(ok1, v1y, last_v[:, 1])
    flags[reg1] += 1

    xm = x + (0.5 * dt) * v1x
    ym = y + (0.5 * dt) * v1y
    v2x, _ = _interp2(vgbx, xm, ym, xg, yg)
    v2y, _ = _interp2(vgby, xm, ym, xg, yg)
    ok2 = _stencil_valid2(valid_b, xm, ym, xg, yg)
    reg2 = live & ~ok2
    v2x = np.where(ok2, v2x, v1x)
    v2y = np.where(ok2, v2y, v1y)
    flags[reg2] += 1

    x_new = x + dt * v2x
    y_new = y + dt * v2y
    i0, _, in_x = _locate1(x_new, xg[0], xg[1], xg[2])
    j0, _, in_y = _locate1(y_new, yg[0], yg[1], yg[2])
    inside = in_x & in_y
    escaped = live & ~inside
    alive[escaped] = 0
    step = live & inside
    pos[step, 0] = x_new[step]
    pos[step, 1] = y_new[step]
    last_v[step, 0] = v2x[step]
    last_v[step, 1] = v2y[step]
