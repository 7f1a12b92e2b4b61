"""Numba kernels for the hot voxel loops.

Everything here works on raw arrays in voxel coordinates; the typed wrappers
live in volume.py / transforms.py / losses.py. Conventions:

- scalar volumes are C-contiguous (nx, ny, nz) arrays indexed [x, y, z]
- vector fields are C-contiguous (nx, ny, nz, 3), last axis = (x, y, z)
- sample coordinates outside the grid are clamped to the boundary face
- all kernels are serial and deterministic

The Euler integrator caches the trilinear cell polynomial between steps and
advances two particles at once; with 1024 sub-steps a particle crosses only
a handful of cells, so the refetch branch is cold and the inner loop is pure
register arithmetic.
"""

import numpy as np
from numba import njit

F32 = np.float32


@njit(cache=True, fastmath=True)
def sample3d(data, xs, ys, zs, out):
    """Clamped trilinear sampling of a scalar volume at given points."""
    nx, ny, nz = data.shape
    fnx = F32(nx - 1)
    fny = F32(ny - 1)
    fnz = F32(nz - 1)
    zero = F32(0.0)
    one = F32(1.0)
    for q in range(xs.shape[0]):
        x = min(max(xs[q], zero), fnx)
        y = min(max(ys[q], zero), fny)
        z = min(max(zs[q], zero), fnz)
        i0 = min(int(x), nx - 2)
        j0 = min(int(y), ny - 2)
        k0 = min(int(z), nz - 2)
        fx = x - i0
        fy = y - j0
        fz = z - k0
        gx = one - fx
        gy = one - fy
        gz = one - fz
        c00 = data[i0, j0, k0] * gz + data[i0, j0, k0 + 1] * fz
        c01 = data[i0, j0 + 1, k0] * gz + data[i0, j0 + 1, k0 + 1] * fz
        c10 = data[i0 + 1, j0, k0] * gz + data[i0 + 1, j0, k0 + 1] * fz
        c11 = data[i0 + 1, j0 + 1, k0] * gz + data[i0 + 1, j0 + 1, k0 + 1] * fz
        out[q] = (c00 * gy + c01 * fy) * gx + (c10 * gy + c11 * fy) * fx


@njit(cache=True, fastmath=True)
def sample3d_grad(data, xs, ys, zs, val, gx_out, gy_out, gz_out):
    """Trilinear sample plus the spatial derivative of the interpolant.

    The derivative is the analytic gradient of the piecewise-trilinear
    surrogate (constant per cell along each axis); for clamped points the
    derivative is reported as 0 along the clamped axis.
    """
    nx, ny, nz = data.shape
    fnx = F32(nx - 1)
    fny = F32(ny - 1)
    fnz = F32(nz - 1)
    zero = F32(0.0)
    one = F32(1.0)
    for q in range(xs.shape[0]):
        xr = xs[q]
        yr = ys[q]
        zr = zs[q]
        x = min(max(xr, zero), fnx)
        y = min(max(yr, zero), fny)
        z = min(max(zr, zero), fnz)
        i0 = min(int(x), nx - 2)
        j0 = min(int(y), ny - 2)
        k0 = min(int(z), nz - 2)
        fx = x - i0
        fy = y - j0
        fz = z - k0
        gx = one - fx
        gy = one - fy
        gz = one - fz
        v000 = data[i0, j0, k0]
        v001 = data[i0, j0, k0 + 1]
        v010 = data[i0, j0 + 1, k0]
        v011 = data[i0, j0 + 1, k0 + 1]
        v100 = data[i0 + 1, j0, k0]
        v101 = data[i0 + 1, j0, k0 + 1]
        v110 = data[i0 + 1, j0 + 1, k0]
        v111 = data[i0 + 1, j0 + 1, k0 + 1]
        c00 = v000 * gz + v001 * fz
        c01 = v010 * gz + v011 * fz
        c10 = v100 * gz + v101 * fz
        c11 = v110 * gz + v111 * fz
        d00 = v100 - v000
        d01 = v101 - v001
        d10 = v110 - v010
        d11 = v111 - v011
        val[q] = (c00 * gy + c01 * fy) * gx + (c10 * gy + c11 * fy) * fx
        dx = (d00 * gz + d01 * fz) * gy + (d10 * gz + d11 * fz) * fy
        dy = (c01 - c00) * gx + (c11 - c10) * fx
        dz = ((v001 - v000) * gy + (v011 - v010) * fy) * gx + (
            (v101 - v100) * gy + (v111 - v110) * fy
        ) * fx
        gx_out[q] = dx if (xr > zero and xr < fnx) else zero
        gy_out[q] = dy if (yr > zero and yr < fny) else zero
        gz_out[q] = dz if (zr > zero and zr < fnz) else zero


@njit(cache=True, fastmath=True)
def sample_field(field, xs, ys, zs, out):
    """Clamped trilinear sampling of a 3-vector field at given points."""
    nx, ny, nz, _ = field.shape
    fnx = F32(nx - 1)
    fny = F32(ny - 1)
    fnz = F32(nz - 1)
    zero = F32(0.0)
    one = F32(1.0)
    for q in range(xs.shape[0]):
        x = min(max(xs[q], zero), fnx)
        y = min(max(ys[q], zero), fny)
        z = min(max(zs[q], zero), fnz)
        i0 = min(int(x), nx - 2)
        j0 = min(int(y), ny - 2)
        k0 = min(int(z), nz - 2)
        fx = x - i0
        fy = y - j0
        fz = z - k0
        gx = one - fx
        gy = one - fy
        gz = one - fz
        w00 = gy * gz
        w01 = gy * fz
        w10 = fy * gz
        w11 = fy * fz
        for c in range(3):
            c0 = (
                field[i0, j0, k0, c] * w00
                + field[i0, j0, k0 + 1, c] * w01
                + field[i0, j0 + 1, k0, c] * w10
                + field[i0, j0 + 1, k0 + 1, c] * w11
            )
            c1 = (
                field[i0 + 1, j0, k0, c] * w00
                + field[i0 + 1, j0, k0 + 1, c] * w01
                + field[i0 + 1, j0 + 1, k0, c] * w10
                + field[i0 + 1, j0 + 1, k0 + 1, c] * w11
            )
            out[q, c] = c0 * gx + c1 * fx


@njit(cache=True, fastmath=True)
def splat_field(force, xs, ys, zs, out):
    """Adjoint of sample_field: scatter each force vector to its 8 corners."""
    nx, ny, nz, _ = out.shape
    fnx = F32(nx - 1)
    fny = F32(ny - 1)
    fnz = F32(nz - 1)
    zero = F32(0.0)
    one = F32(1.0)
    for q in range(xs.shape[0]):
        x = min(max(xs[q], zero), fnx)
        y = min(max(ys[q], zero), fny)
        z = min(max(zs[q], zero), fnz)
        i0 = min(int(x), nx - 2)
        j0 = min(int(y), ny - 2)
        k0 = min(int(z), nz - 2)
        fx = x - i0
        fy = y - j0
        fz = z - k0
        gx = one - fx
        gy = one - fy
        gz = one - fz
        w00 = gy * gz
        w01 = gy * fz
        w10 = fy * gz
        w11 = fy * fz
        for c in range(3):
            f = force[q, c]
            out[i0, j0, k0, c] += f * w00 * gx
            out[i0, j0, k0 + 1, c] += f * w01 * gx
            out[i0, j0 + 1, k0, c] += f * w10 * gx
            out[i0, j0 + 1, k0 + 1, c] += f * w11 * gx
            out[i0 + 1, j0, k0, c] += f * w00 * fx
            out[i0 + 1, j0, k0 + 1, c] += f * w01 * fx
            out[i0 + 1, j0 + 1, k0, c] += f * w10 * fx
            out[i0 + 1, j0 + 1, k0 + 1, c] += f * w11 * fx


@njit(cache=True, fastmath=True, inline="always")
def _cell_coeffs(vc, b, nz, syx):
    """Trilinear polynomial coefficients of one component over one cell."""
    v000 = vc[b]
    v001 = vc[b + 1]
    v010 = vc[b + nz]
    v011 = vc[b + nz + 1]
    v100 = vc[b + syx]
    v101 = vc[b + syx + 1]
    v110 = vc[b + syx + nz]
    v111 = vc[b + syx + nz + 1]
    return (
        v000,
        v100 - v000,
        v010 - v000,
        v001 - v000,
        v110 - v100 - v010 + v000,
        v101 - v100 - v001 + v000,
        v011 - v010 - v001 + v000,
        v111 - v110 - v101 - v011 + v100 + v010 + v001 - v000,
    )


@njit(cache=True, fastmath=True)
def euler_flow(vx, vy, vz, nx, ny, nz, n_steps, vmax, out):
    """Dense forward-Euler flow of a stationary velocity field.

    Starts one particle per voxel and integrates n_steps equal sub-steps of
    the clamped-sampled field; writes the final displacement into out
    (flat layout: ux block, uy block, uz block). vmax must bound the
    per-component magnitude of the field; it sizes the guaranteed-safe
    step bursts that skip the cell-exit check.
    """
    dt = F32(1.0 / n_steps)
    step_max = max(vmax, F32(1e-12)) * dt
    syx = ny * nz
    fnx = F32(nx - 1)
    fny = F32(ny - 1)
    fnz = F32(nz - 1)
    one = F32(1.0)
    zero = F32(0.0)
    V = nx * ny * nz
    for ix in range(nx):
        for iy in range(ny):
            base_o = (ix * ny + iy) * nz
            for iz in range(0, nz - 1, 2):
                # two interleaved particles (lanes a, b) to hide fma latency
                i0a = min(ix, nx - 2)
                j0a = min(iy, ny - 2)
                k0a = iz
                i0b = i0a
                j0b = j0a
                k0b = min(iz + 1, nz - 2)
                fxa = F32(ix - i0a)
                fya = F32(iy - j0a)
                fza = zero
                fxb = fxa
                fyb = fya
                fzb = F32(iz + 1 - k0b)
                ba = i0a * syx + j0a * nz + k0a
                ax = _cell_coeffs(vx, ba, nz, syx)
                ay = _cell_coeffs(vy, ba, nz, syx)
                az = _cell_coeffs(vz, ba, nz, syx)
                bb = i0b * syx + j0b * nz + k0b
                bx = _cell_coeffs(vx, bb, nz, syx)
                by = _cell_coeffs(vy, bb, nz, syx)
                bz = _cell_coeffs(vz, bb, nz, syx)
                done = 0
                while done < n_steps:
                    da = min(
                        min(fxa, one - fxa),
                        min(min(fya, one - fya), min(fza, one - fza)),
                    )
                    db = min(
                        min(fxb, one - fxb),
                        min(min(fyb, one - fyb), min(fzb, one - fzb)),
                    )
                    burst = min(int(min(da, db) / step_max), n_steps - done)
                    n_inner = burst if burst >= 1 else 1
                    for _ in range(n_inner):
                        xy = fxa * fya
                        xz = fxa * fza
                        yz = fya * fza
                        xyz = xy * fza
                        sxa = (
                            ax[0] + ax[1] * fxa + ax[2] * fya + ax[3] * fza
                            + ax[4] * xy + ax[5] * xz + ax[6] * yz + ax[7] * xyz
                        )
                        sya = (
                            ay[0] + ay[1] * fxa + ay[2] * fya + ay[3] * fza
                            + ay[4] * xy + ay[5] * xz + ay[6] * yz + ay[7] * xyz
                        )
                        sza = (
                            az[0] + az[1] * fxa + az[2] * fya + az[3] * fza
                            + az[4] * xy + az[5] * xz + az[6] * yz + az[7] * xyz
                        )
                        xy = fxb * fyb
                        xz = fxb * fzb
                        yz = fyb * fzb
                        xyz = xy * fzb
                        sxb = (
                            bx[0] + bx[1] * fxb + bx[2] * fyb + bx[3] * fzb
                            + bx[4] * xy + bx[5] * xz + bx[6] * yz + bx[7] * xyz
                        )
                        syb = (
                            by[0] + by[1] * fxb + by[2] * fyb + by[3] * fzb
                            + by[4] * xy + by[5] * xz + by[6] * yz + by[7] * xyz
                        )
                        szb = (
                            bz[0] + bz[1] * fxb + bz[2] * fyb + bz[3] * fzb
                            + bz[4] * xy + bz[5] * xz + bz[6] * yz + bz[7] * xyz
                        )
                        fxa += dt * sxa
                        fya += dt * sya
                        fza += dt * sza
                        fxb += dt * sxb
                        fyb += dt * syb
                        fzb += dt * szb
                    done += n_inner
                    if (
                        fxa < zero or fxa > one or fya < zero or fya > one
                        or fza < zero or fza > one
                    ):
                        x = min(max(F32(i0a) + fxa, zero), fnx)
                        y = min(max(F32(j0a) + fya, zero), fny)
                        z = min(max(F32(k0a) + fza, zero), fnz)
                        i0a = min(int(x), nx - 2)
                        j0a = min(int(y), ny - 2)
                        k0a = min(int(z), nz - 2)
                        fxa = x - i0a
                        fya = y - j0a
                        fza = z - k0a
                        ba = i0a * syx + j0a * nz + k0a
                        ax = _cell_coeffs(vx, ba, nz, syx)
                        ay = _cell_coeffs(vy, ba, nz, syx)
                        az = _cell_coeffs(vz, ba, nz, syx)
                    if (
                        fxb < zero or fxb > one or fyb < zero or fyb > one
                        or fzb < zero or fzb > one
                    ):
                        x = min(max(F32(i0b) + fxb, zero), fnx)
                        y = min(max(F32(j0b) + fyb, zero), fny)
                        z = min(max(F32(k0b) + fzb, zero), fnz)
                        i0b = min(int(x), nx - 2)
                        j0b = min(int(y), ny - 2)
                        k0b = min(int(z), nz - 2)
                        fxb = x - i0b
                        fyb = y - j0b
                        fzb = z - k0b
                        bb = i0b * syx + j0b * nz + k0b
                        bx = _cell_coeffs(vx, bb, nz, syx)
                        by = _cell_coeffs(vy, bb, nz, syx)
                        bz = _cell_coeffs(vz, bb, nz, syx)
                o = base_o + iz
                out[o] = F32(i0a) + fxa - ix
                out[o + V] = F32(j0a) + fya - iy
                out[o + 2 * V] = F32(k0a) + fza - iz
                o2 = base_o + iz + 1
                out[o2] = F32(i0b) + fxb - ix
                out[o2 + V] = F32(j0b) + fyb - iy
                out[o2 + 2 * V] = F32(k0b) + fzb - (iz + 1)
            if nz % 2 == 1:
                # odd nz: last z-column particle runs single-lane
                iz = nz - 1
                i0a = min(ix, nx - 2)
                j0a = min(iy, ny - 2)
                k0a = nz - 2
                fxa = F32(ix - i0a)
                fya = F32(iy - j0a)
                fza = one
                ba = i0a * syx + j0a * nz + k0a
                ax = _cell_coeffs(vx, ba, nz, syx)
                ay = _cell_coeffs(vy, ba, nz, syx)
                az = _cell_coeffs(vz, ba, nz, syx)
                for _ in range(n_steps):
                    xy = fxa * fya
                    xz = fxa * fza
                    yz = fya * fza
                    xyz = xy * fza
                    sxa = (
                        ax[0] + ax[1] * fxa + ax[2] * fya + ax[3] * fza
                        + ax[4] * xy + ax[5] * xz + ax[6] * yz + ax[7] * xyz
                    )
                    sya = (
                        ay[0] + ay[1] * fxa + ay[2] * fya + ay[3] * fza
                        + ay[4] * xy + ay[5] * xz + ay[6] * yz + ay[7] * xyz
                    )
                    sza = (
                        az[0] + az[1] * fxa + az[2] * fya + az[3] * fza
                        + az[4] * xy + az[5] * xz + az[6] * yz + az[7] * xyz
                    )
                    fxa += dt * sxa
                    fya += dt * sya
                    fza += dt * sza
                    if (
                        fxa < zero or fxa > one or fya < zero or fya > one
                        or fza < zero or fza > one
                    ):
                        x = min(max(F32(i0a) + fxa, zero), fnx)
                        y = min(max(F32(j0a) + fya, zero), fny)
                        z = min(max(F32(k0a) + fza, zero), fnz)
                        i0a = min(int(x), nx - 2)
                        j0a = min(int(y), ny - 2)
                        k0a = min(int(z), nz - 2)
                        fxa = x - i0a
                        fya = y - j0a
                        fza = z - k0a
                        ba = i0a * syx + j0a * nz + k0a
                        ax = _cell_coeffs(vx, ba, nz, syx)
                        ay = _cell_coeffs(vy, ba, nz, syx)
                        az = _cell_coeffs(vz, ba, nz, syx)
                o = base_o + iz
                out[o] = F32(i0a) + fxa - ix
                out[o + V] = F32(j0a) + fya - iy
                out[o + 2 * V] = F32(k0a) + fza - iz


@njit(cache=True)
def parzen_taps(vals, bins, sigma, radius, base_out, w_out):
    """Per-voxel normalized Parzen window weights on the bin lattice.

    Values are clamped to [0, 1]; each voxel gets up to 2*radius+1 taps
    centered on its nearest bin, normalized to sum 1 (partition of unity).
    base_out[q] is the first active bin index, w_out[q, :] the weights.
    """
    width = 1.0 / bins
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    for q in range(vals.shape[0]):
        x = min(max(float(vals[q]), 0.0), 1.0)
        ic = int(x * bins)
        if ic > bins - 1:
            ic = bins - 1
        lo = max(ic - radius, 0)
        hi = min(ic + radius, bins - 1)
        s = 0.0
        for i in range(lo, hi + 1):
            c = (i + 0.5) * width
            w = np.exp(-(x - c) * (x - c) * inv2s2)
            w_out[q, i - lo] = w
            s += w
        inv = 1.0 / s
        for i in range(lo, hi + 1):
            w_out[q, i - lo] *= inv
        for i in range(hi + 1 - lo, w_out.shape[1]):
            w_out[q, i] = 0.0
        base_out[q] = lo


@njit(cache=True)
def mi_joint_pre(x, y_base, y_w, bins, sigma, radius, joint):
    """Accumulate the Parzen joint histogram of x against precomputed taps.

    joint must be zeroed (bins, bins) float64; accumulation is serial and
    deterministic. Total accumulated mass equals the voxel count.
    """
    width = 1.0 / bins
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    ntaps = y_w.shape[1]
    for q in range(x.shape[0]):
        v = min(max(float(x[q]), 0.0), 1.0)
        ic = int(v * bins)
        if ic > bins - 1:
            ic = bins - 1
        lo = max(ic - radius, 0)
        hi = min(ic + radius, bins - 1)
        s = 0.0
        wx = np.empty(2 * radius + 1, np.float64)
        for i in range(lo, hi + 1):
            c = (i + 0.5) * width
            w = np.exp(-(v - c) * (v - c) * inv2s2)
            wx[i - lo] = w
            s += w
        inv = 1.0 / s
        jb = y_base[q]
        for i in range(lo, hi + 1):
            wxi = wx[i - lo] * inv
            for j in range(ntaps):
                wyj = y_w[q, j]
                if wyj > 0.0:
                    joint[i, jb + j] += wxi * wyj


@njit(cache=True, fastmath=True)
def mi_joint_affine(mov, a, y_base, y_w, bins, sigma, radius, joint):
    """Fused affine warp + Parzen joint accumulation.

    Samples mov at A.g + t for every voxel g of the fixed grid and feeds the
    warped intensity straight into the joint histogram against the fixed
    image's precomputed taps. Avoids materializing the warped volume during
    finite-difference loss probing.
    """
    nx, ny, nz = mov.shape
    fnx = F32(nx - 1)
    fny = F32(ny - 1)
    fnz = F32(nz - 1)
    zero = F32(0.0)
    one = F32(1.0)
    a00 = F32(a[0, 0]); a01 = F32(a[0, 1]); a02 = F32(a[0, 2]); a03 = F32(a[0, 3])
    a10 = F32(a[1, 0]); a11 = F32(a[1, 1]); a12 = F32(a[1, 2]); a13 = F32(a[1, 3])
    a20 = F32(a[2, 0]); a21 = F32(a[2, 1]); a22 = F32(a[2, 2]); a23 = F32(a[2, 3])
    width = 1.0 / bins
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    ntaps = y_w.shape[1]
    wx = np.empty(2 * radius + 1, np.float64)
    q = 0
    for ix in range(nx):
        for iy in range(ny):
            xpart = a00 * ix + a01 * iy + a03
            ypart = a10 * ix + a11 * iy + a13
            zpart = a20 * ix + a21 * iy + a23
            for iz in range(nz):
                x = min(max(xpart + a02 * iz, zero), fnx)
                y = min(max(ypart + a12 * iz, zero), fny)
                z = min(max(zpart + a22 * iz, zero), fnz)
                i0 = min(int(x), nx - 2)
                j0 = min(int(y), ny - 2)
                k0 = min(int(z), nz - 2)
                fx = x - i0
                fy = y - j0
                fz = z - k0
                gz = one - fz
                c00 = mov[i0, j0, k0] * gz + mov[i0, j0, k0 + 1] * fz
                c01 = mov[i0, j0 + 1, k0] * gz + mov[i0, j0 + 1, k0 + 1] * fz
                c10 = mov[i0 + 1, j0, k0] * gz + mov[i0 + 1, j0, k0 + 1] * fz
                c11 = mov[i0 + 1, j0 + 1, k0] * gz + mov[i0 + 1, j0 + 1, k0 + 1] * fz
                gy = one - fy
                val = (c00 * gy + c01 * fy) * (one - fx) + (c10 * gy + c11 * fy) * fx
                v = min(max(float(val), 0.0), 1.0)
                ic = int(v * bins)
                if ic > bins - 1:
                    ic = bins - 1
                lo = max(ic - radius, 0)
                hi = min(ic + radius, bins - 1)
                s = 0.0
                for i in range(lo, hi + 1):
                    c = (i + 0.5) * width
                    w = np.exp(-(v - c) * (v - c) * inv2s2)
                    wx[i - lo] = w
                    s += w
                inv = 1.0 / s
                jb = y_base[q]
                for i in range(lo, hi + 1):
                    wxi = wx[i - lo] * inv
                    for j in range(ntaps):
                        wyj = y_w[q, j]
                        if wyj > 0.0:
                            joint[i, jb + j] += wxi * wyj
                q += 1


@njit(cache=True)
def mi_grad_pre(x, y_base, y_w, g_mat, bins, sigma, radius, grad_out):
    """Gradient of MI with respect to the x image, against fixed y taps.

    g_mat is log(p_ij / (px_i py_j)) with zeros where p_ij == 0; the output
    is dMI/dx[q] including the 1/V joint normalization. Voxels clamped at
    the window boundary get zero gradient.
    """
    width = 1.0 / bins
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    inv_s2 = 1.0 / (sigma * sigma)
    ntaps = y_w.shape[1]
    n = x.shape[0]
    inv_n = 1.0 / n
    wx = np.empty(2 * radius + 1, np.float64)
    dw = np.empty(2 * radius + 1, np.float64)
    for q in range(n):
        v = float(x[q])
        if v < 0.0 or v > 1.0:
            grad_out[q] = 0.0
            continue
        ic = int(v * bins)
        if ic > bins - 1:
            ic = bins - 1
        lo = max(ic - radius, 0)
        hi = min(ic + radius, bins - 1)
        s = 0.0
        sp = 0.0
        for i in range(lo, hi + 1):
            c = (i + 0.5) * width
            w = np.exp(-(v - c) * (v - c) * inv2s2)
            d = w * (c - v) * inv_s2
            wx[i - lo] = w
            dw[i - lo] = d
            s += w
            sp += d
        inv = 1.0 / s
        jb = y_base[q]
        acc = 0.0
        for i in range(lo, hi + 1):
            t = 0.0
            for j in range(ntaps):
                wyj = y_w[q, j]
                if wyj > 0.0:
                    t += wyj * g_mat[i, jb + j]
            dnorm = (dw[i - lo] - wx[i - lo] * inv * sp) * inv
            acc += dnorm * t
        grad_out[q] = acc * inv_n
