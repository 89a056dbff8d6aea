"""Numba kernels: Joseph-method ray integration and weighted backprojection.

Conventions (shared with `core`): source at ``R * (sin(b), cos(b))``,
virtual flat detector through the isocenter with u-axis ``(cos(b), -sin(b))``
and v parallel to z.  Volumes are indexed ``[x, y, z]`` with voxel centers
``origin + (i - (n - 1) / 2) * pitch``.

Rays step along the dominant in-plane axis (Joseph), sampling the two
transverse axes bilinearly.  Kernels parallelize over independent output
slices only, so results do not depend on the thread count.
"""

import math

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _frac_index(p, o, pitch, n):
    return (p - o) / pitch + (n - 1) / 2.0


@njit(cache=True)
def _ray_mono(vol, na, nb, nz, oa, ob, oz, pitch, sa, sb, ga, gb, gz):
    """Line integral of `vol` along one ray, stepping axis-a planes.

    `vol` is viewed with the stepping axis first; the source z is 0.
    """
    acc = 0.0
    inv_ga = 1.0 / ga
    for i in range(na):
        pa = oa + (i - (na - 1) / 2.0) * pitch
        t = (pa - sa) * inv_ga
        pb = sb + t * gb
        pz = t * gz
        fb = _frac_index(pb, ob, pitch, nb)
        fz = _frac_index(pz, oz, pitch, nz)
        ib = int(math.floor(fb))
        iz = int(math.floor(fz))
        wb = fb - ib
        wz = fz - iz
        if ib < -1 or ib > nb - 1 or iz < -1 or iz > nz - 1:
            continue
        v00 = vol[i, ib, iz] if (ib >= 0 and iz >= 0) else 0.0
        v10 = vol[i, ib + 1, iz] if (ib + 1 <= nb - 1 and iz >= 0) else 0.0
        v01 = vol[i, ib, iz + 1] if (ib >= 0 and iz + 1 <= nz - 1) else 0.0
        v11 = vol[i, ib + 1, iz + 1] if (ib + 1 <= nb - 1 and iz + 1 <= nz - 1) else 0.0
        acc += (1.0 - wb) * ((1.0 - wz) * v00 + wz * v01) \
            + wb * ((1.0 - wz) * v10 + wz * v11)
    norm = math.sqrt(ga * ga + gb * gb + gz * gz)
    return acc * pitch * norm / abs(ga)


@njit(cache=True, parallel=True)
def joseph_mono(vol, vol_yx, pitch, ox, oy, oz, R, betas, u, v):
    """Line integrals of a scalar volume for all (beta, u, v) rays.

    `vol_yx` must be `vol.transpose(1, 0, 2)`; it is passed in so both axis
    orders are available without copies inside the parallel loop.
    """
    nx, ny, nz = vol.shape
    nb_views = betas.size
    nu = u.size
    nv = v.size
    out = np.zeros((nb_views, nu, nv))
    for ib in prange(nb_views):
        b = betas[ib]
        sinb = math.sin(b)
        cosb = math.cos(b)
        sx = R * sinb
        sy = R * cosb
        for iu in range(nu):
            gx = u[iu] * cosb - R * sinb
            gy = -u[iu] * sinb - R * cosb
            for iv in range(nv):
                gz = v[iv]
                if abs(gx) >= abs(gy):
                    out[ib, iu, iv] = _ray_mono(
                        vol, nx, ny, nz, ox, oy, oz, pitch,
                        sx, sy, gx, gy, gz)
                else:
                    out[ib, iu, iv] = _ray_mono(
                        vol_yx, ny, nx, nz, oy, ox, oz, pitch,
                        sy, sx, gy, gx, gz)
    return out


@njit(cache=True)
def _ray_lengths(labels, na, nb, nz, oa, ob, oz, pitch,
                 sa, sb, ga, gb, gz, lengths):
    """Per-material intersection lengths for one ray (Joseph weights)."""
    lengths[:] = 0.0
    inv_ga = 1.0 / ga
    for i in range(na):
        pa = oa + (i - (na - 1) / 2.0) * pitch
        t = (pa - sa) * inv_ga
        pb = sb + t * gb
        pz = t * gz
        fb = _frac_index(pb, ob, pitch, nb)
        fz = _frac_index(pz, oz, pitch, nz)
        ib = int(math.floor(fb))
        iz = int(math.floor(fz))
        wb = fb - ib
        wz = fz - iz
        if ib < -1 or ib > nb - 1 or iz < -1 or iz > nz - 1:
            continue
        if ib >= 0 and iz >= 0:
            lengths[labels[i, ib, iz]] += (1.0 - wb) * (1.0 - wz)
        if ib + 1 <= nb - 1 and iz >= 0:
            lengths[labels[i, ib + 1, iz]] += wb * (1.0 - wz)
        if ib >= 0 and iz + 1 <= nz - 1:
            lengths[labels[i, ib, iz + 1]] += (1.0 - wb) * wz
        if ib + 1 <= nb - 1 and iz + 1 <= nz - 1:
            lengths[labels[i, ib + 1, iz + 1]] += wb * wz
    scale = pitch * math.sqrt(ga * ga + gb * gb + gz * gz) / abs(ga)
    for m in range(lengths.size):
        lengths[m] *= scale


@njit(cache=True, parallel=True)
def joseph_poly(labels, labels_yx, pitch, ox, oy, oz, R, betas, u, v,
                mu_table, weights, p_clamp):
    """Polychromatic log-attenuation for all rays of a labeled volume.

    For each ray the per-material path lengths L_m are accumulated once,
    then ``p = -ln sum_E w(E) exp(-sum_m mu_m(E) L_m)``, clamped at
    `p_clamp` for (near-)opaque rays.  Returns (sinogram, clamp count).
    `mu_table` has shape (n_materials, n_energies); air must be label 0
    with zero attenuation so out-of-grid samples are harmless.
    """
    nx, ny, nz = labels.shape
    nb_views = betas.size
    nu = u.size
    nv = v.size
    n_mat = mu_table.shape[0]
    n_e = weights.size
    t_floor = math.exp(-p_clamp)
    out = np.zeros((nb_views, nu, nv))
    n_clamped = 0
    for ib in prange(nb_views):
        b = betas[ib]
        sinb = math.sin(b)
        cosb = math.cos(b)
        sx = R * sinb
        sy = R * cosb
        lengths = np.empty(n_mat)
        for iu in range(nu):
            gx = u[iu] * cosb - R * sinb
            gy = -u[iu] * sinb - R * cosb
            for iv in range(nv):
                gz = v[iv]
                if abs(gx) >= abs(gy):
                    _ray_lengths(labels, nx, ny, nz, ox, oy, oz, pitch,
                                 sx, sy, gx, gy, gz, lengths)
                else:
                    _ray_lengths(labels_yx, ny, nx, nz, oy, ox, oz, pitch,
                                 sy, sx, gy, gx, gz, lengths)
                trans = 0.0
                for ie in range(n_e):
                    s = 0.0
                    for m in range(n_mat):
                        s += mu_table[m, ie] * lengths[m]
                    trans += weights[ie] * math.exp(-s)
                if trans <= t_floor:
                    out[ib, iu, iv] = p_clamp
                    n_clamped += 1
                else:
                    out[ib, iu, iv] = -math.log(trans)
    return out, n_clamped


@njit(cache=True, parallel=True)
def backproject_cone(q, betas, u0, du, v0, dv, R, nx, ny, nz,
                     pitch, ox, oy, oz):
    """Distance-weighted FDK backprojection of filtered rows `q`.

    ``f += (dbeta / 2) * (R / L)^2 * q(beta, u_p, v_p)`` with bilinear
    detector interpolation; samples beyond the detector contribute zero.
    """
    nb_views, nu, nv = q.shape
    dbeta = 2.0 * math.pi / nb_views
    out = np.zeros((nx, ny, nz))
    for ix in prange(nx):
        x = ox + (ix - (nx - 1) / 2.0) * pitch
        for ib in range(nb_views):
            b = betas[ib]
            sinb = math.sin(b)
            cosb = math.cos(b)
            xs = x * sinb
            xc = x * cosb
            for iy in range(ny):
                y = oy + (iy - (ny - 1) / 2.0) * pitch
                L = R - xs - y * cosb
                w = (R / L) * (R / L)
                up = R * (xc - y * sinb) / L
                fu = (up - u0) / du
                iu = int(math.floor(fu))
                wu = fu - iu
                if iu < -1 or iu > nu - 1:
                    continue
                vscale = R / L
                for iz in range(nz):
                    z = oz + (iz - (nz - 1) / 2.0) * pitch
                    vp = vscale * z
                    fv = (vp - v0) / dv
                    iv = int(math.floor(fv))
                    wv = fv - iv
                    if iv < -1 or iv > nv - 1:
                        continue
                    q00 = q[ib, iu, iv] if (iu >= 0 and iv >= 0) else 0.0
                    q10 = q[ib, iu + 1, iv] if (iu + 1 <= nu - 1 and iv >= 0) else 0.0
                    q01 = q[ib, iu, iv + 1] if (iu >= 0 and iv + 1 <= nv - 1) else 0.0
                    q11 = q[ib, iu + 1, iv + 1] \
                        if (iu + 1 <= nu - 1 and iv + 1 <= nv - 1) else 0.0
                    val = (1.0 - wu) * ((1.0 - wv) * q00 + wv * q01) \
                        + wu * ((1.0 - wv) * q10 + wv * q11)
                    out[ix, iy, iz] += w * val
    return out * (dbeta / 2.0)


@njit(cache=True, parallel=True)
def backproject_fan(q, betas, u0, du, R, nx, ny, pitch, ox, oy):
    """Mid-plane counterpart of `backproject_cone` for 2-D fan-beam FBP."""
    nb_views, nu = q.shape
    dbeta = 2.0 * math.pi / nb_views
    out = np.zeros((nx, ny))
    for ix in prange(nx):
        x = ox + (ix - (nx - 1) / 2.0) * pitch
        for ib in range(nb_views):
            b = betas[ib]
            sinb = math.sin(b)
            cosb = math.cos(b)
            xs = x * sinb
            xc = x * cosb
            for iy in range(ny):
                y = oy + (iy - (ny - 1) / 2.0) * pitch
                L = R - xs - y * cosb
                w = (R / L) * (R / L)
                up = R * (xc - y * sinb) / L
                fu = (up - u0) / du
                iu = int(math.floor(fu))
                wu = fu - iu
                if iu < -1 or iu > nu - 1:
                    continue
                q0 = q[ib, iu] if iu >= 0 else 0.0
                q1 = q[ib, iu + 1] if iu + 1 <= nu - 1 else 0.0
                out[ix, iy] += w * ((1.0 - wu) * q0 + wu * q1)
    return out * (dbeta / 2.0)
