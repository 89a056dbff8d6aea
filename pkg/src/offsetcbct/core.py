"""Scan geometry, array containers, coordinate maps and the offset-detector
subsampling operator shared by all other modules.

Detector coordinates are expressed at isocenter scale (virtual detector
through the rotation axis), so the conjugate-ray identity and the consistency
transform apply without magnification bookkeeping.  The source at view angle
beta sits at ``R * (sin(beta), cos(beta))`` and the detector u-axis points
along ``(cos(beta), -sin(beta))``; this orientation makes the conjugate view
angle exactly ``beta + pi + 2 atan(-u / R)``.

All u-grids live on a single cell-centered lattice of pitch ``du`` whose cell
edges fall on integer multiples of ``du``; the measured arm, the reflected
full arm and the non-truncated detector are slices of that lattice.  This
makes ``u -> -u`` an exact index flip and offset subsampling an exact slice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * np.pi

RAW_DTYPE = np.dtype("<f4")  # file format: little-endian float32
FORMAT_NAME = "offsetcbct-raw"
FORMAT_VERSION = 1


def wrap_angle(beta):
    """Wrap angle(s) into the half-open interval [0, 2*pi)."""
    return beta - TWO_PI * np.floor(beta / TWO_PI)


@dataclass(frozen=True)
class ScanGeometry:
    """Circular-trajectory cone-beam geometry with an offset detector.

    Parameters
    ----------
    R : float
        Source-to-isocenter distance (mm).
    D : float
        Source-to-physical-detector distance (mm); informational only, all
        detector coordinates here are at isocenter scale.
    eps : float
        Short-arm half-extent (mm): the detector covers u in [-eps, ell].
    ell : float
        Long-arm extent (mm).
    ell_full : float
        Half-extent of the full (non-truncated) virtual detector (mm).
    n_views : int
        Number of view angles, uniform on [0, 2*pi).
    n_u : int
        Number of measured detector samples across [-eps, ell].
    n_v : int
        Number of axial detector rows; must be odd so v = 0 is a sample.
    v_extent : float
        Axial half-height of the detector at isocenter scale (mm).
    voxel_pitch : float
        Default reconstruction voxel pitch (mm).
    """

    R: float
    D: float
    eps: float
    ell: float
    ell_full: float
    n_views: int
    n_u: int
    n_v: int
    v_extent: float
    voxel_pitch: float = 1.0

    def __post_init__(self):
        vals = [self.R, self.D, self.eps, self.ell, self.ell_full,
                self.v_extent, self.voxel_pitch]
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("geometry parameters must be finite")
        if self.R <= 0:
            raise ValueError("source radius R must be positive")
        if not (0 < self.eps < self.ell <= self.ell_full):
            raise ValueError(
                "detector extents must satisfy 0 < eps < ell <= ell_full "
                f"(got eps={self.eps}, ell={self.ell}, ell_full={self.ell_full})")
        if self.n_views < 4:
            raise ValueError("need at least 4 views")
        if self.n_u < 2:
            raise ValueError("need at least 2 detector samples")
        if self.n_v < 1 or self.n_v % 2 == 0:
            raise ValueError("n_v must be odd so the v = 0 row is sampled")
        if self.v_extent < 0 or (self.n_v > 1 and self.v_extent == 0):
            raise ValueError("v_extent must be positive for multi-row detectors")
        du = (self.eps + self.ell) / self.n_u
        for name, extent in (("ell", self.ell), ("ell_full", self.ell_full),
                             ("eps", self.eps)):
            if abs(extent / du - round(extent / du)) > 1e-9:
                raise ValueError(
                    f"{name} must be an integer number of detector cells "
                    f"(du={du:.6g})")

    # -- derived grids -------------------------------------------------

    @property
    def du(self) -> float:
        return (self.eps + self.ell) / self.n_u

    @property
    def dv(self) -> float:
        if self.n_v == 1:
            return 0.0
        return 2.0 * self.v_extent / (self.n_v - 1)

    @property
    def dbeta(self) -> float:
        return TWO_PI / self.n_views

    @property
    def betas(self) -> np.ndarray:
        return np.arange(self.n_views) * self.dbeta

    @property
    def v_centers(self) -> np.ndarray:
        if self.n_v == 1:
            return np.zeros(1)
        return (np.arange(self.n_v) - (self.n_v - 1) / 2.0) * self.dv

    def _lattice(self, half_extent: float) -> np.ndarray:
        n = int(round(2.0 * half_extent / self.du))
        return (np.arange(n) + 0.5) * self.du - half_extent

    @property
    def u_measured(self) -> np.ndarray:
        """Centers of the measured arm, u in [-eps, ell]."""
        return (np.arange(self.n_u) + 0.5) * self.du - self.eps

    @property
    def u_fullarm(self) -> np.ndarray:
        """Centers of the reflected full arm, u in [-ell, ell]."""
        return self._lattice(self.ell)

    @property
    def u_detector(self) -> np.ndarray:
        """Centers of the non-truncated detector, u in [-ell_full, ell_full]."""
        return self._lattice(self.ell_full)

    @property
    def mid_v_index(self) -> int:
        return (self.n_v - 1) // 2

    def to_dict(self) -> dict:
        return {"R": self.R, "D": self.D, "eps": self.eps, "ell": self.ell,
                "ell_full": self.ell_full, "n_views": self.n_views,
                "n_u": self.n_u, "n_v": self.n_v, "v_extent": self.v_extent,
                "voxel_pitch": self.voxel_pitch}

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        return cls(R=float(d["R"]), D=float(d["D"]), eps=float(d["eps"]),
                   ell=float(d["ell"]), ell_full=float(d["ell_full"]),
                   n_views=int(d["n_views"]), n_u=int(d["n_u"]),
                   n_v=int(d["n_v"]), v_extent=float(d["v_extent"]),
                   voxel_pitch=float(d.get("voxel_pitch", 1.0)))


def desk_geometry(**overrides) -> ScanGeometry:
    """Desk-scale default geometry: 360 views, 256 measured u-samples of
    which 24 overlap the short arm, at 0.5 mm isocenter pitch."""
    params = dict(R=500.0, D=1000.0, eps=12.0, ell=116.0, ell_full=160.0,
                  n_views=360, n_u=256, n_v=33, v_extent=24.0,
                  voxel_pitch=1.0)
    params.update(overrides)
    return ScanGeometry(**params)


def full_scale_geometry(**overrides) -> ScanGeometry:
    """Production-scale geometry: 720 views x 654 samples (605 on the long
    arm).  659 detector rows rather than 658 so the mid-plane is sampled."""
    du = 0.4
    params = dict(R=500.0, D=1000.0, eps=49 * du, ell=605 * du,
                  ell_full=654 * du, n_views=720, n_u=654, n_v=659,
                  v_extent=0.4 * 329, voxel_pitch=0.4)
    params.update(overrides)
    return ScanGeometry(**params)


@dataclass
class Sinogram:
    """Log-attenuation samples over (view angle, detector u, detector v).

    ``data`` is indexed ``[beta, u, v]``.  ``u_centers`` may describe the
    measured detector, the reflected full arm or an extrapolation-padded
    grid, but always lies on the geometry's u-lattice.  ``measured_mask``
    flags which u columns hold measured (vs missing/filled) data.
    """

    data: np.ndarray
    geometry: ScanGeometry
    u_centers: np.ndarray
    measured_mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.u_centers = np.asarray(self.u_centers, dtype=np.float64)
        self.measured_mask = np.asarray(self.measured_mask, dtype=bool)
        if self.data.ndim != 3:
            raise ValueError("sinogram data must be 3-D (beta, u, v)")
        nb, nu, nv = self.data.shape
        if nb != self.geometry.n_views:
            raise ValueError("view count does not match geometry")
        if nv != self.geometry.n_v:
            raise ValueError("row count does not match geometry")
        if nu != self.u_centers.size or nu != self.measured_mask.size:
            raise ValueError("u axis metadata does not match data shape")
        if nu > 1:
            steps = np.diff(self.u_centers)
            if not np.allclose(steps, self.geometry.du, rtol=0, atol=1e-9):
                raise ValueError("u grid must be uniform with the geometry pitch")

    @property
    def betas(self) -> np.ndarray:
        return self.geometry.betas

    @property
    def v_centers(self) -> np.ndarray:
        return self.geometry.v_centers

    def midplane(self) -> np.ndarray:
        """The v = 0 slice, shape (n_views, n_u)."""
        return self.data[:, :, self.geometry.mid_v_index]

    def u_index(self, u: float) -> int:
        """Index of the sample center at coordinate ``u`` (must lie on grid)."""
        j = int(round((u - self.u_centers[0]) / self.geometry.du))
        if j < 0 or j >= self.u_centers.size or \
                abs(self.u_centers[j] - u) > 1e-6 * self.geometry.du + 1e-12:
            raise ValueError(f"u={u} is not a sample center of this sinogram")
        return j

    def validate_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise ValueError("sinogram contains non-finite values")
        if not self.meta.get("noisy", False) and np.any(self.data < -1e-9):
            raise ValueError("negative attenuation in a noise-free sinogram")


@dataclass
class Volume:
    """Attenuation (or material label) grid on a voxel lattice.

    ``data`` is indexed ``[x, y, z]``; voxel (i, j, k) is centered at
    ``origin + ((i - (n-1)/2) * pitch, ...)`` so the grid is centered on the
    isocenter unless ``origin`` overrides.
    """

    data: np.ndarray
    voxel_pitch: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("volume data must be 3-D")
        if self.voxel_pitch <= 0:
            raise ValueError("voxel pitch must be positive")
        if self.origin.shape != (3,):
            raise ValueError("origin must be a 3-vector")

    def axis_coords(self, axis: int) -> np.ndarray:
        n = self.data.shape[axis]
        return (np.arange(n) - (n - 1) / 2.0) * self.voxel_pitch + self.origin[axis]

    @property
    def mid_z_index(self) -> int:
        return (self.data.shape[2] - 1) // 2

    def mid_slice(self) -> np.ndarray:
        return self.data[:, :, self.mid_z_index]


# -- conjugate-ray machinery ------------------------------------------


def conjugate_angle(beta, u, geometry: ScanGeometry):
    """View angle whose detector sample at -u measures the same ray.

    For a flat virtual detector at isocenter scale the ray (beta, u) is
    traversed in the opposite direction from
    ``beta_u = beta + pi + 2*atan(-u / R)``, wrapped into [0, 2*pi).
    Accepts scalars or arrays.
    """
    beta = np.asarray(beta, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite angle or detector coordinate")
    out = wrap_angle(beta + np.pi + 2.0 * np.arctan2(-u, geometry.R))
    if out.ndim == 0:
        return float(out)
    return out


def blend_weight(u, epsilon: float):
    """Overlap weight for the reflected sample on the doubly-covered band.

    ``(1 - cos(pi * (eps - u) / (2 * eps))) / 2`` on u in (-eps, eps):
    1 at the short-arm edge, 0 at the overlap's long-arm edge, and
    ``w(u) + w(-u) = 1`` exactly.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= -epsilon) or np.any(u >= epsilon):
        raise ValueError("blend weight is defined on the open overlap (-eps, eps)")
    w = 0.5 * (1.0 - np.cos(np.pi * (epsilon - u) / (2.0 * epsilon)))
    if w.ndim == 0:
        return float(w)
    return w


def subsample_offset(full_sinogram: Sinogram, geometry: ScanGeometry) -> Sinogram:
    """Offset-detector acquisition: keep u in [-eps, ell], zero the rest.

    The input must cover the full detector [-ell_full, ell_full]; the output
    keeps that grid with the missing columns zeroed and the validity mask
    marking [-eps, ell] as measured.
    """
    if full_sinogram.geometry != geometry:
        raise ValueError("sinogram geometry does not match requested truncation")
    u = full_sinogram.u_centers
    expected = geometry.u_detector
    if u.size != expected.size or not np.allclose(u, expected, atol=1e-9):
        raise ValueError("input does not cover the full detector [-ell_full, ell_full]")
    keep = (u > -geometry.eps) & (u < geometry.ell)
    data = np.where(keep[None, :, None], full_sinogram.data, 0.0)
    meta = dict(full_sinogram.meta)
    return Sinogram(data=data, geometry=geometry, u_centers=u.copy(),
                    measured_mask=keep, meta=meta)


def crop_to_measured(sinogram: Sinogram) -> Sinogram:
    """Drop unmeasured columns, keeping the contiguous measured arm."""
    idx = np.flatnonzero(sinogram.measured_mask)
    if idx.size == 0:
        raise ValueError("sinogram has no measured columns")
    sl = slice(idx[0], idx[-1] + 1)
    if not sinogram.measured_mask[sl].all():
        raise ValueError("measured region is not contiguous")
    return Sinogram(data=sinogram.data[:, sl, :].copy(),
                    geometry=sinogram.geometry,
                    u_centers=sinogram.u_centers[sl].copy(),
                    measured_mask=np.ones(idx.size, dtype=bool),
                    meta=dict(sinogram.meta))


# -- file formats ------------------------------------------------------
#
# Raw little-endian float32 payload (C order) next to a JSON sidecar that
# carries the shape, axis grids and geometry.  ``path`` is a stem: writing
# "P" produces "P.raw" and "P.json".


def _write_raw(path_stem: Path, array: np.ndarray):
    payload = np.ascontiguousarray(array, dtype=RAW_DTYPE)
    path_stem.with_suffix(".raw").write_bytes(payload.tobytes())


def _read_raw(path_stem: Path, shape) -> np.ndarray:
    raw = path_stem.with_suffix(".raw").read_bytes()
    arr = np.frombuffer(raw, dtype=RAW_DTYPE).reshape(shape)
    return arr.astype(np.float64)


def save_sinogram(sinogram: Sinogram, path) -> Path:
    stem = Path(path)
    sidecar = {
        "format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": "sinogram",
        "dtype": RAW_DTYPE.str, "shape": list(sinogram.data.shape),
        "u0": float(sinogram.u_centers[0]), "du": sinogram.geometry.du,
        "measured_mask": [bool(b) for b in sinogram.measured_mask],
        "geometry": sinogram.geometry.to_dict(),
        "meta": sinogram.meta,
    }
    _write_raw(stem, sinogram.data)
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return stem.with_suffix(".json")


def load_sinogram(path) -> Sinogram:
    stem = Path(path)
    if stem.suffix == ".json":
        stem = stem.with_suffix("")
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    if sidecar.get("kind") != "sinogram":
        raise ValueError(f"{stem}: not a sinogram file")
    geometry = ScanGeometry.from_dict(sidecar["geometry"])
    data = _read_raw(stem, sidecar["shape"])
    n_u = sidecar["shape"][1]
    u_centers = sidecar["u0"] + np.arange(n_u) * sidecar["du"]
    return Sinogram(data=data, geometry=geometry, u_centers=u_centers,
                    measured_mask=np.asarray(sidecar["measured_mask"], dtype=bool),
                    meta=sidecar.get("meta", {}))


def save_volume(volume: Volume, path) -> Path:
    stem = Path(path)
    sidecar = {
        "format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": "volume",
        "dtype": RAW_DTYPE.str, "shape": list(volume.data.shape),
        "voxel_pitch": volume.voxel_pitch,
        "origin": [float(x) for x in volume.origin],
    }
    _write_raw(stem, volume.data)
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return stem.with_suffix(".json")


def load_volume(path) -> Volume:
    stem = Path(path)
    if stem.suffix == ".json":
        stem = stem.with_suffix("")
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    if sidecar.get("kind") != "volume":
        raise ValueError(f"{stem}: not a volume file")
    data = _read_raw(stem, sidecar["shape"])
    return Volume(data=data, voxel_pitch=float(sidecar["voxel_pitch"]),
                  origin=np.asarray(sidecar["origin"]))


def save_geometry(geometry: ScanGeometry, path) -> Path:
    p = Path(path)
    p.write_text(json.dumps(geometry.to_dict(), indent=1, sort_keys=True))
    return p


def load_geometry(path) -> ScanGeometry:
    return ScanGeometry.from_dict(json.loads(Path(path).read_text()))
