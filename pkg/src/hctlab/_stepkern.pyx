# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled trajectory stepping kernels (hot loops).

Mirror of `_stepkern_py`: same interpolation convention, same update order
per trajectory, so results match the numpy fallback to machine precision.
The inner loops run without the GIL, which lets the ensemble drivers shard
trajectories across threads.
"""

import numpy as np

cimport cython
from libc.math cimport floor

BACKEND = "cython"


cdef inline double _lin1(const double* f, double s, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i0 = <Py_ssize_t>floor(s)
    if i0 > n - 2:
        i0 = n - 2
    if i0 < 0:
        i0 = 0
    cdef double w = s - i0
    return f[i0] * (1.0 - w) + f[i0 + 1] * w


cdef inline bint _inside1(double s, Py_ssize_t n) noexcept nogil:
    return s >= 0.0 and s <= n - 1.0


cdef inline double _bilin(const double* f, double sx, double sy,
                          Py_ssize_t nx, Py_ssize_t ny) noexcept nogil:
    cdef Py_ssize_t i0 = <Py_ssize_t>floor(sx)
    cdef Py_ssize_t j0 = <Py_ssize_t>floor(sy)
    if i0 > nx - 2: i0 = nx - 2
    if i0 < 0: i0 = 0
    if j0 > ny - 2: j0 = ny - 2
    if j0 < 0: j0 = 0
    cdef double wx = sx - i0
    cdef double wy = sy - j0
    cdef const double* row0 = f + i0 * ny
    cdef const double* row1 = f + (i0 + 1) * ny
    return (row0[j0] * (1.0 - wx) * (1.0 - wy)
            + row1[j0] * wx * (1.0 - wy)
            + row0[j0 + 1] * (1.0 - wx) * wy
            + row1[j0 + 1] * wx * wy)


cdef inline bint _stv1(const unsigned char* valid, double s, Py_ssize_t n) noexcept nogil:
    if not _inside1(s, n):
        return 0
    cdef Py_ssize_t i0 = <Py_ssize_t>floor(s)
    if i0 > n - 2: i0 = n - 2
    if i0 < 0: i0 = 0
    return valid[i0] != 0 and valid[i0 + 1] != 0


cdef inline bint _stv2(const unsigned char* valid, double sx, double sy,
                       Py_ssize_t nx, Py_ssize_t ny) noexcept nogil:
    if not (_inside1(sx, nx) and _inside1(sy, ny)):
        return 0
    cdef Py_ssize_t i0 = <Py_ssize_t>floor(sx)
    cdef Py_ssize_t j0 = <Py_ssize_t>floor(sy)
    if i0 > nx - 2: i0 = nx - 2
    if i0 < 0: i0 = 0
    if j0 > ny - 2: j0 = ny - 2
    if j0 < 0: j0 = 0
    cdef const unsigned char* row0 = valid + i0 * ny
    cdef const unsigned char* row1 = valid + (i0 + 1) * ny
    return (row0[j0] != 0 and row1[j0] != 0
            and row0[j0 + 1] != 0 and row1[j0 + 1] != 0)


def verlet1d(double[::1] pos, double[::1] vel, double[::1] acc,
             double[::1] force, double x_min, double dx, Py_ssize_t n,
             double inv_mass, double dt, Py_ssize_t n_steps,
             unsigned char[::1] alive):
    cdef Py_ssize_t i, step, ntr = pos.shape[0]
    cdef double x_new, s, a_new
    cdef const double* fp = &force[0]
    with nogil:
        for i in range(ntr):
            if alive[i] == 0:
                continue
            for step in range(n_steps):
                x_new = pos[i] + dt * vel[i] + (0.5 * dt * dt) * acc[i]
                s = (x_new - x_min) / dx
                if not _inside1(s, n):
                    alive[i] = 0
                    break
                a_new = _lin1(fp, s, n) * inv_mass
                vel[i] = vel[i] + (0.5 * dt) * (acc[i] + a_new)
                pos[i] = x_new
                acc[i] = a_new


def verlet2d(double[:, ::1] pos, double[:, ::1] vel, double[:, ::1] acc,
             double[:, ::1] fx, double[:, ::1] fy,
             double x_min, double dxx, Py_ssize_t nx,
             double y_min, double dxy, Py_ssize_t ny,
             double inv_mx, double inv_my, double dt, Py_ssize_t n_steps,
             unsigned char[::1] alive):
    cdef Py_ssize_t i, step, ntr = pos.shape[0]
    cdef double x_new, y_new, sx, sy, ax_new, ay_new
    cdef const double* fxp = &fx[0, 0]
    cdef const double* fyp = &fy[0, 0]
    with nogil:
        for i in range(ntr):
            if alive[i] == 0:
                continue
            for step in range(n_steps):
                x_new = pos[i, 0] + dt * vel[i, 0] + (0.5 * dt * dt) * acc[i, 0]
                y_new = pos[i, 1] + dt * vel[i, 1] + (0.5 * dt * dt) * acc[i, 1]
                sx = (x_new - x_min) / dxx
                sy = (y_new - y_min) / dxy
                if not (_inside1(sx, nx) and _inside1(sy, ny)):
                    alive[i] = 0
                    break
                ax_new = _bilin(fxp, sx, sy, nx, ny) * inv_mx
                ay_new = _bilin(fyp, sx, sy, nx, ny) * inv_my
                vel[i, 0] += (0.5 * dt) * (acc[i, 0] + ax_new)
                vel[i, 1] += (0.5 * dt) * (acc[i, 1] + ay_new)
                pos[i, 0] = x_new
                pos[i, 1] = y_new
                acc[i, 0] = ax_new
                acc[i, 1] = ay_new


def guided1d_step(double[::1] pos, double[::1] vga, unsigned char[::1] valid_a,
                  double[::1] vgb, unsigned char[::1] valid_b,
                  double x_min, double dx, Py_ssize_t n, double dt,
                  double[::1] last_v, long[::1] flags, unsigned char[::1] alive):
    cdef Py_ssize_t i, ntr = pos.shape[0]
    cdef double s, v1, v2, x_mid, x_new
    cdef const double* va = &vga[0]
    cdef const double* vb = &vgb[0]
    cdef const unsigned char* ma = &valid_a[0]
    cdef const unsigned char* mb = &valid_b[0]
    with nogil:
        for i in range(ntr):
            if alive[i] == 0:
                continue
            s = (pos[i] - x_min) / dx
            if _stv1(ma, s, n):
                v1 = _lin1(va, s, n)
            else:
                v1 = last_v[i]
                flags[i] += 1
            x_mid = pos[i] + (0.5 * dt) * v1
            s = (x_mid - x_min) / dx
            if _stv1(mb, s, n):
                v2 = _lin1(vb, s, n)
            else:
                v2 = v1
                flags[i] += 1
            x_new = pos[i] + dt * v2
            s = (x_new - x_min) / dx
            if not _inside1(s, n):
                alive[i] = 0
                continue
            pos[i] = x_new
            last_v[i] = v2


def guided2d_step(double[:, ::1] pos,
                  double[:, ::1] vgax, double[:, ::1] vgay, unsigned char[:, ::1] valid_a,
                  double[:, ::1] vgbx, double[:, ::1] vgby, unsigned char[:, ::1] valid_b,
                  double x_min, double dxx, Py_ssize_t nx,
                  double y_min, double dxy, Py_ssize_t ny, double dt,
                  double[:, ::1] last_v, long[::1] flags, unsigned char[::1] alive):
    cdef Py_ssize_t i, ntr = pos.shape[0]
    cdef double sx, sy, v1x, v1y, v2x, v2y, xm, ym, x_new, y_new
    cdef const double* vax = &vgax[0, 0]
    cdef const double* vay = &vgay[0, 0]
    cdef const double* vbx = &vgbx[0, 0]
    cdef const double* vby = &vgby[0, 0]
    cdef const unsigned char* ma = &valid_a[0, 0]
    cdef const unsigned char* mb = &valid_b[0, 0]
    with nogil:
        for i in range(ntr):
            if alive[i] == 0:
                continue
            sx = (pos[i, 0] - x_min) / dxx
            sy = (pos[i, 1] - y_min) / dxy
            if _stv2(ma, sx, sy, nx, ny):
                v1x = _bilin(vax, sx, sy, nx, ny)
                v1y = _bilin(vay, sx, sy, nx, ny)
            else:
                v1x = last_v[i, 0]
                v1y = last_v[i, 1]
                flags[i] += 1
            xm = pos[i, 0] + (0.5 * dt) * v1x
            ym = pos[i, 1] + (0.5 * dt) * v1y
            sx = (xm - x_min) / dxx
            sy = (ym - y_min) / dxy
            if _stv2(mb, sx, sy, nx, ny):
                v2x = _bilin(vbx, sx, sy, nx, ny)
                v2y = _bilin(vby, sx, sy, nx, ny)
            else:
                v2x = v1x
                v2y = v1y
                flags[i] += 1
            x_new = pos[i, 0] + dt * v2x
            y_new = pos[i, 1] + dt * v2y
            sx = (x_new - x_min) / dxx
            sy = (y_new - y_min) / dxy
            if not (_inside1(sx, nx) and _inside1(sy, ny)):
                alive[i] = 0
                continue
            pos[i, 0] = x_new
            pos[i, 1] = y_new
            last_v[i, 0] = v2x
            last_v[i, 1] = v2y
