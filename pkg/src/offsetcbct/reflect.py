"""Conjugate-ray reflection: fill the short-arm gap of an offset-detector
sinogram from the opposing half-rotation.

The missing band u in [-ell, -eps] is read from the conjugate sample
(beta + pi + 2 atan(-u/R), -u, v); on the doubly-covered overlap (-eps, eps)
the direct and conjugate estimates are cosine-blended.  v passes through
unchanged, so off-plane samples carry the cone-beam approximation error,
which vanishes at v = 0.
"""

from __future__ import annotations

import numpy as np

from .core import ScanGeometry, Sinogram, blend_weight, conjugate_angle


def reflect_fill(sinogram: Sinogram, geometry: ScanGeometry) -> Sinogram:
    """Fill u in [-ell, ell] from the measured arm [-eps, ell].

    Conjugate lookups interpolate linearly in beta (with wraparound); -u
    lands exactly on the symmetric u-lattice.  Output columns: identity on
    [eps, ell], blended on (-eps, eps), pure conjugate on [-ell, -eps].
    """
    if sinogram.geometry != geometry:
        raise ValueError("sinogram/geometry mismatch")
    if geometry.eps <= 0:
        raise ValueError("reflection needs a positive overlap eps")
    meas_cols = np.flatnonzero(sinogram.measured_mask)
    if meas_cols.size == 0:
        raise ValueError("sinogram has no measured columns")
    u_meas = sinogram.u_centers[meas_cols]
    if u_meas[0] > -geometry.eps + geometry.du or \
            u_meas[-1] < geometry.ell - geometry.du:
        raise ValueError("measured region does not cover [-eps, ell]")
    P = sinogram.data[:, meas_cols, :]
    n_views = geometry.n_views
    du = geometry.du
    u_out = geometry.u_fullarm
    out = np.empty((n_views, u_out.size, geometry.n_v))

    def measured_index(u):
        j = int(round((u - u_meas[0]) / du))
        if j < 0 or j >= u_meas.size or abs(u_meas[j] - u) > 1e-6 * du:
            raise AssertionError(f"u={u} not on the measured lattice")
        return j

    def conjugate_column(u):
        # beta_u - beta is constant per u: a fractional circular shift
        shift = conjugate_angle(0.0, u, geometry) / geometry.dbeta
        i0 = int(np.floor(shift))
        w = shift - i0
        j = measured_index(-u)
        col = P[:, j, :]
        a = np.roll(col, -i0, axis=0)
        b = np.roll(col, -(i0 + 1), axis=0)
        return (1.0 - w) * a + w * b

    for k, u in enumerate(u_out):
        if u >= geometry.eps:
            out[:, k, :] = P[:, measured_index(u), :]
        elif u > -geometry.eps:
            w = blend_weight(u, geometry.eps)
            out[:, k, :] = w * conjugate_column(u) \
                + (1.0 - w) * P[:, measured_index(u), :]
        else:
            out[:, k, :] = conjugate_column(u)
    meta = dict(sinogram.meta)
    meta["reflected"] = True
    return Sinogram(data=out, geometry=geometry, u_centers=u_out,
                    measured_mask=np.ones(u_out.size, dtype=bool), meta=meta)
