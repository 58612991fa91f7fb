"""Numba kernels for ray-driven cone-beam projection.

The forward and adjoint kernels walk identical sample positions and compute
identical trilinear weights, so they form an exact matched pair. Rays are
sampled at ``t = k * step`` (distance from the source) for every integer
``k`` whose sample lies inside the padded box ``[-1, n]`` in voxel units,
which is where the zero-padded trilinear interpolant is supported.
"""

import math

from numba import njit, prange


@njit(cache=True, inline="always")
def _clip(sx, sy, sz, dx, dy, dz, nx, ny, nz):
    t0 = -1e300
    t1 = 1e300
    for a in range(3):
        if a == 0:
            s, d, hi = sx, dx, nx
        elif a == 1:
            s, d, hi = sy, dy, ny
        else:
            s, d, hi = sz, dz, nz
        if abs(d) < 1e-15:
            if s <= -1.0 or s >= hi:
                return 1.0, 0.0
        else:
            ta = (-1.0 - s) / d
            tb = (hi - s) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@njit(cache=True, inline="always")
def _ray(src, pix00, col_step, row_step, v, r, c, origin, spacing):
    px = pix00[v, 0] + c * col_step[v, 0] + r * row_step[v, 0]
    py = pix00[v, 1] + c * col_step[v, 1] + r * row_step[v, 1]
    pz = pix00[v, 2] + c * col_step[v, 2] + r * row_step[v, 2]
    ex = px - src[v, 0]
    ey = py - src[v, 1]
    ez = pz - src[v, 2]
    norm = math.sqrt(ex * ex + ey * ey + ez * ez)
    # voxel-unit source position and per-unit-length direction
    sx = (src[v, 0] - origin[0]) / spacing[0]
    sy = (src[v, 1] - origin[1]) / spacing[1]
    sz = (src[v, 2] - origin[2]) / spacing[2]
    dx = ex / norm / spacing[0]
    dy = ey / norm / spacing[1]
    dz = ez / norm / spacing[2]
    return sx, sy, sz, dx, dy, dz


@njit(cache=True, parallel=True)
def forward_kernel(vol, origin, spacing, src, pix00, col_step, row_step, step, out):
    nz, ny, nx = vol.shape
    nv, rows, cols = out.shape
    for job in prange(nv * rows):
        v = job // rows
        r = job - v * rows
        for c in range(cols):
            sx, sy, sz, dx, dy, dz = _ray(src, pix00, col_step, row_step, v, r, c, origin, spacing)
            t0, t1 = _clip(sx, sy, sz, dx, dy, dz, nx, ny, nz)
            acc = 0.0
            if t1 > t0:
                k0 = int(math.ceil(t0 / step))
                k1 = int(math.floor(t1 / step))
                for k in range(k0, k1 + 1):
                    t = k * step
                    x = sx + t * dx
                    y = sy + t * dy
                    z = sz + t * dz
                    fx = math.floor(x)
                    fy = math.floor(y)
                    fz = math.floor(z)
                    ix = int(fx)
                    iy = int(fy)
                    iz = int(fz)
                    wx = x - fx
                    wy = y - fy
                    wz = z - fz
                    if ix >= 0 and iy >= 0 and iz >= 0 and ix < nx - 1 and iy < ny - 1 and iz < nz - 1:
                        c00 = vol[iz, iy, ix] * (1.0 - wx) + vol[iz, iy, ix + 1] * wx
                        c01 = vol[iz, iy + 1, ix] * (1.0 - wx) + vol[iz, iy + 1, ix + 1] * wx
                        c10 = vol[iz + 1, iy, ix] * (1.0 - wx) + vol[iz + 1, iy, ix + 1] * wx
                        c11 = vol[iz + 1, iy + 1, ix] * (1.0 - wx) + vol[iz + 1, iy + 1, ix + 1] * wx
                        acc += (c00 * (1.0 - wy) + c01 * wy) * (1.0 - wz) + (c10 * (1.0 - wy) + c11 * wy) * wz
                    else:
                        for dk in range(2):
                            kk = iz + dk
                            if kk < 0 or kk >= nz:
                                continue
                            w_z = wz if dk == 1 else 1.0 - wz
                            for dj in range(2):
                                jj = iy + dj
                                if jj < 0 or jj >= ny:
                                    continue
                                w_y = wy if dj == 1 else 1.0 - wy
                                for di in range(2):
                                    ii = ix + di
                                    if ii < 0 or ii >= nx:
                                        continue
                                    w_x = wx if di == 1 else 1.0 - wx
                                    acc += vol[kk, jj, ii] * (w_x * w_y * w_z)
            out[v, r, c] = acc * step


@njit(cache=True, parallel=True)
def adjoint_kernel(proj, origin, spacing, src, pix00, col_step, row_step, step, partial):
    # partial: (views, nz, ny, nx), one private accumulator per view
    nv, rows, cols = proj.shape
    nz, ny, nx = partial.shape[1], partial.shape[2], partial.shape[3]
    for v in prange(nv):
        out = partial[v]
        for r in range(rows):
            for c in range(cols):
                val = proj[v, r, c]
                if val == 0.0:
                    continue
                val = val * step
                sx, sy, sz, dx, dy, dz = _ray(src, pix00, col_step, row_step, v, r, c, origin, spacing)
                t0, t1 = _clip(sx, sy, sz, dx, dy, dz, nx, ny, nz)
                if t1 <= t0:
                    continue
                k0 = int(math.ceil(t0 / step))
                k1 = int(math.floor(t1 / step))
                for k in range(k0, k1 + 1):
                    t = k * step
                    x = sx + t * dx
                    y = sy + t * dy
                    z = sz + t * dz
                    fx = math.floor(x)
                    fy = math.floor(y)
                    fz = math.floor(z)
                    ix = int(fx)
                    iy = int(fy)
                    iz = int(fz)
                    wx = x - fx
                    wy = y - fy
                    wz = z - fz
                    if ix >= 0 and iy >= 0 and iz >= 0 and ix < nx - 1 and iy < ny - 1 and iz < nz - 1:
                        a0 = val * (1.0 - wz)
                        a1 = val * wz
                        b00 = a0 * (1.0 - wy)
                        b01 = a0 * wy
                        b10 = a1 * (1.0 - wy)
                        b11 = a1 * wy
                        out[iz, iy, ix] += b00 * (1.0 - wx)
                        out[iz, iy, ix + 1] += b00 * wx
                        out[iz, iy + 1, ix] += b01 * (1.0 - wx)
                        out[iz, iy + 1, ix + 1] += b01 * wx
                        out[iz + 1, iy, ix] += b10 * (1.0 - wx)
                        out[iz + 1, iy, ix + 1] += b10 * wx
                        out[iz + 1, iy + 1, ix] += b11 * (1.0 - wx)
                        out[iz + 1, iy + 1, ix + 1] += b11 * wx
                    else:
                        for dk in range(2):
                            kk = iz + dk
                            if kk < 0 or kk >= nz:
                                continue
                            w_z = wz if dk == 1 else 1.0 - wz
                            for dj in range(2):
                                jj = iy + dj
                                if jj < 0 or jj >= ny:
                                    continue
                                w_y = wy if dj == 1 else 1.0 - wy
                                for di in range(2):
                                    ii = ix + di
                                    if ii < 0 or ii >= nx:
                                        continue
                                    w_x = wx if di == 1 else 1.0 - wx
                                    out[kk, jj, ii] += val * (w_x * w_y * w_z)


@njit(cache=True, parallel=True)
def fdk_backproject_kernel(filt, xs, ys, zs, src, pix00, col_step, row_step, weights, out):
    """Voxel-driven distance-weighted backprojection of filtered projections.

    Each voxel center is projected through the source onto the detector
    plane, the filtered view is sampled bilinearly there and accumulated
    with the FDK weight ``(D / (D - s))^2`` times ``weights[v]``.
    """
    nv, rows, cols = filt.shape
    nz = zs.shape[0]
    ny = ys.shape[0]
    nx = xs.shape[0]
    for k in prange(nz):
        for v in range(nv):
            # detector plane basis for this view
            cu0 = col_step[v, 0]
            cu1 = col_step[v, 1]
            cu2 = col_step[v, 2]
            ru0 = row_step[v, 0]
            ru1 = row_step[v, 1]
            ru2 = row_step[v, 2]
            cu_len2 = cu0 * cu0 + cu1 * cu1 + cu2 * cu2
            ru_len2 = ru0 * ru0 + ru1 * ru1 + ru2 * ru2
            # unit normal from detector toward source
            cx = pix00[v, 0] + 0.5 * (cols - 1) * cu0 + 0.5 * (rows - 1) * ru0
            cy = pix00[v, 1] + 0.5 * (cols - 1) * cu1 + 0.5 * (rows - 1) * ru1
            cz = pix00[v, 2] + 0.5 * (cols - 1) * cu2 + 0.5 * (rows - 1) * ru2
            nxv = src[v, 0] - cx
            nyv = src[v, 1] - cy
            nzv = src[v, 2] - cz
            sdd = math.sqrt(nxv * nxv + nyv * nyv + nzv * nzv)
            nxv /= sdd
            nyv /= sdd
            nzv /= sdd
            w_v = weights[v]
            for j in range(ny):
                for i in range(nx):
                    px = xs[i]
                    py = ys[j]
                    pz = zs[k]
                    # distance from source to voxel along the central axis
                    depth = (src[v, 0] - px) * nxv + (src[v, 1] - py) * nyv + (src[v, 2] - pz) * nzv
                    if depth <= 0.0:
                        continue
                    mag = sdd / depth
                    hx = src[v, 0] + (px - src[v, 0]) * mag - pix00[v, 0]
                    hy = src[v, 1] + (py - src[v, 1]) * mag - pix00[v, 1]
                    hz = src[v, 2] + (pz - src[v, 2]) * mag - pix00[v, 2]
                    cf = (hx * cu0 + hy * cu1 + hz * cu2) / cu_len2
                    rf = (hx * ru0 + hy * ru1 + hz * ru2) / ru_len2
                    c0 = int(math.floor(cf))
                    r0 = int(math.floor(rf))
                    if c0 < -1 or c0 >= cols or r0 < -1 or r0 >= rows:
                        continue
                    wc = cf - c0
                    wr = rf - r0
                    val = 0.0
                    if r0 >= 0:
                        if c0 >= 0:
                            val += filt[v, r0, c0] * (1.0 - wr) * (1.0 - wc)
                        if c0 + 1 < cols:
                            val += filt[v, r0, c0 + 1] * (1.0 - wr) * wc
                    if r0 + 1 < rows:
                        if c0 >= 0:
                            val += filt[v, r0 + 1, c0] * wr * (1.0 - wc)
                        if c0 + 1 < cols:
                            val += filt[v, r0 + 1, c0 + 1] * wr * wc
                    out[k, j, i] += w_v * mag * mag * val


@njit(cache=True)
def sum_partials(partial, out):
    """Merge per-view partial grids in fixed view order."""
    nv = partial.shape[0]
    for v in range(nv):
        out += partial[v]
