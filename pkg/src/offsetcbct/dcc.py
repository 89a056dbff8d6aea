"""Data-consistency-driven sinogram correction for truncated fan-beam data.

A consistent fan-beam sinogram g (sources on a circle of radius R, flat
virtual detector through the isocenter) satisfies, for every horizontal line
y = y0 that misses the object, the moment condition that

    T_k(x) = integral over beta of
             g(beta, u_beta) * R^2 * (x - R sin(beta))^k
             / ( sqrt(R^2 + u_beta^2) * (R cos(beta) - y0)^(k+1) )

is a polynomial of degree k in x, where ``u_beta = R (x cos b - y0 sin b) /
(R - x sin b - y0 cos b)`` is the detector coordinate of the ray through the
point (x, y0) and the integration arc [beta_l, beta_r], beta_l =
acos(y0 / R), holds the sources on the far side of the line.  (The published
form of u_beta is written for the opposite rotation orientation and without
the isocenter-scale factor R; the version here is re-derived for this
package's source convention and confirmed by the degree-k polynomiality
checks.)  Beam hardening breaks the condition; the four-parameter corrector
below is fitted by minimizing the squared x-slope of T_0, then applied to
the whole sinogram.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .core import ScanGeometry, Sinogram


@dataclass(frozen=True)
class CorrectorParams:
    """Four-parameter sinogram corrector with threshold `Lambda`.

    Values at or below Lambda are kept; above it the correction is
    ``h(p) + lam1 (p - Lambda) + lam2 (p - Lambda)^2 + lam3 (p - Lambda)^3``
    where h is the exponential kernel of `h_eval` (h(Lambda) = Lambda and
    h'(Lambda) = 1 for any lam0 > 0, so the corrector is continuous).
    """

    lam0: float
    lam1: float = 0.0
    lam2: float = 0.0
    lam3: float = 0.0
    Lambda: float = 1.0

    def __post_init__(self):
        if not np.isfinite([self.lam0, self.lam1, self.lam2, self.lam3,
                            self.Lambda]).all():
            raise ValueError("corrector parameters must be finite")
        if self.lam0 <= 0:
            raise ValueError("lam0 must be positive")
        if self.Lambda <= 0:
            raise ValueError("Lambda must be positive")

    def to_dict(self) -> dict:
        return {"lam0": self.lam0, "lam1": self.lam1, "lam2": self.lam2,
                "lam3": self.lam3, "Lambda": self.Lambda}


def h_eval(t, lam0: float, Lambda: float):
    """Exponential corrector kernel, in the overflow-safe centered form
    ``Lambda cosh(lam0 (t - Lambda)) + sinh(lam0 (t - Lambda)) / lam0``.

    Raises OverflowError when lam0 * |t - Lambda| exceeds the exp range,
    which signals mis-scaled parameters rather than a numerical accident.
    """
    if lam0 <= 0:
        raise ValueError("lam0 must be positive")
    if Lambda <= 0:
        raise ValueError("Lambda must be positive")
    t = np.asarray(t, dtype=np.float64)
    s = lam0 * (t - Lambda)
    if np.any(np.abs(s) > 700.0):
        raise OverflowError("corrector argument out of exp range; "
                            "lam0 or the attenuation scale is off")
    out = Lambda * np.cosh(s) + np.sinh(s) / lam0
    if out.ndim == 0:
        return float(out)
    return out


def corrector_apply(sinogram, params: CorrectorParams):
    """Apply the corrector pointwise: identity at or below Lambda, the
    exponential-plus-polynomial branch above it.

    Accepts a Sinogram (returns a corrected Sinogram) or a bare array.
    """
    if isinstance(sinogram, Sinogram):
        data = corrector_apply(sinogram.data, params)
        meta = dict(sinogram.meta)
        meta["corrector"] = params.to_dict()
        return Sinogram(data=data, geometry=sinogram.geometry,
                        u_centers=sinogram.u_centers.copy(),
                        measured_mask=sinogram.measured_mask.copy(), meta=meta)
    p = np.asarray(sinogram, dtype=np.float64)
    out = p.copy()
    above = p > params.Lambda
    if np.any(above):
        s = p[above] - params.Lambda
        h = h_eval(p[above], params.lam0, params.Lambda)
        out[above] = h + params.lam1 * s + params.lam2 * s ** 2 \
            + params.lam3 * s ** 3
    if not np.all(np.isfinite(out)):
        raise OverflowError("corrected sinogram is not finite")
    return out


@dataclass
class ConsistencyConfig:
    """Configuration of the consistency transform and the parameter fit.

    y0 / x_range / Lambda are chosen automatically from the data when None.
    The beta quadrature runs on the native view grid restricted to the arc
    where the line y = y0 is on the far side of the source, shrunk by
    `beta_margin_views` views to stay clear of the arc endpoints.
    """

    y0: float | None = None
    k_max: int = 0
    n_x: int = 64
    x_range: tuple | None = None
    beta_margin_views: int = 2
    support_threshold: float = 0.01
    y0_margin_samples: float = 16.0
    Lambda: float | None = None
    v_index: int | None = None
    restarts: int = 4
    max_evals: int = 500
    to_report: dict = field(default_factory=dict)


def choose_y0(rows: np.ndarray, u_centers: np.ndarray,
              geometry: ScanGeometry, threshold: float = 0.01,
              margin_samples: float = 16.0) -> float:
    """Smallest |y0| whose horizontal line clears the sinogram support.

    The ray (beta, u = R cot(beta)) is the horizontal line y = R cos(beta);
    scanning all views for rows above `threshold * max` gives the occupied
    y-band, which y0 must clear by `margin_samples` detector cells.
    """
    R = geometry.R
    betas = geometry.betas
    u_edge = np.abs(u_centers).max()
    # the ray (beta, u = -R cot(beta)) is the horizontal line y = R cos(beta)
    with np.errstate(divide="ignore"):
        u_h = -R * np.cos(betas) / np.sin(betas)
    valid = np.isfinite(u_h) & (np.abs(u_h) <= u_edge)
    if not np.any(valid):
        raise ValueError("no horizontal rays inside the detector range")
    floor = threshold * rows.max()
    heights = []
    hit = []
    for i in np.flatnonzero(valid):
        val = np.interp(u_h[i], u_centers, rows[i])
        heights.append(R * np.cos(betas[i]))
        hit.append(val > floor)
    heights = np.asarray(heights)
    hit = np.asarray(hit)
    margin = margin_samples * geometry.du
    if not hit.any():
        # no visible support: any interior line works, take the midline area
        return margin
    band = 0.95 * geometry.ell
    candidates = []
    # place y0 a margin beyond the nearest scan ray verified to clear the
    # object (the height samples are coarse near the top of the FOV)
    clear_above = heights[~hit & (heights > heights[hit].max())]
    if clear_above.size:
        upper = clear_above.min() + margin
        if upper < band:
            candidates.append(upper)
    clear_below = heights[~hit & (heights < heights[hit].min())]
    if clear_below.size:
        lower = clear_below.max() - margin
        if lower > -band:
            candidates.append(lower)
    if not candidates:
        raise ValueError("no line inside the ROI clears the scanned object; "
                         "set y0 explicitly")
    return float(min(candidates, key=abs))


def _u_beta(x, betas, y0: float, R: float):
    """Detector coordinate of the ray through (x, y0) at each view angle."""
    x = np.asarray(x, dtype=np.float64)
    sinb = np.sin(betas)
    cosb = np.cos(betas)
    L = R - x[..., None] * sinb - y0 * cosb
    return R * (x[..., None] * cosb - y0 * sinb) / L, L


def _beta_arc(geometry: ScanGeometry, y0: float, margin_views: int):
    """Native view indices on the far-side arc [beta_l, beta_r]."""
    beta_l = np.arccos(np.clip(y0 / geometry.R, -1.0, 1.0))
    beta_r = 2.0 * np.pi - beta_l
    betas = geometry.betas
    pad = margin_views * geometry.dbeta
    idx = np.flatnonzero((betas >= beta_l + pad) & (betas <= beta_r - pad))
    if idx.size < 8:
        raise ValueError("integration arc has too few views; |y0| too large")
    return idx


def admissible_x_range(geometry: ScanGeometry, y0: float, u_limit: float,
                       margin_samples: float = 2.0,
                       beta_margin_views: int = 2) -> float:
    """Largest symmetric half-range of x whose rays through (x, y0) stay
    within |u| <= u_limit - margin over the whole integration arc."""
    idx = _beta_arc(geometry, y0, beta_margin_views)
    betas = geometry.betas[idx]
    limit = u_limit - margin_samples * geometry.du
    xs = np.linspace(0.0, u_limit, 256)
    u, _ = _u_beta(xs, betas, y0, geometry.R)
    u_abs = np.abs(u).max(axis=1)
    # also the mirrored x (u_beta is not even in x)
    u_neg, _ = _u_beta(-xs, betas, y0, geometry.R)
    u_abs = np.maximum(u_abs, np.abs(u_neg).max(axis=1))
    ok = np.flatnonzero(u_abs <= limit)
    if ok.size == 0 or ok[0] != 0:
        raise ValueError("no admissible x range; y0 too close to the FOV edge")
    run_end = 0
    for i in ok:
        if i == run_end:
            run_end += 1
        else:
            break
    return float(xs[run_end - 1])


def consistency_transform(rows: np.ndarray, u_centers: np.ndarray,
                          k: int, cfg: ConsistencyConfig,
                          geometry: ScanGeometry,
                          x_grid: np.ndarray | None = None) -> tuple:
    """Sampled consistency transform T_k(x) of a mid-plane sinogram.

    `rows` is (n_views, n_u) on the u-lattice `u_centers`.  Returns
    (x_grid, T).  Raises if some requested x needs data beyond the detector,
    naming the offending x.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape != (geometry.n_views, u_centers.size):
        raise ValueError("rows must be (n_views, n_u) matching the geometry")
    R = geometry.R
    y0 = cfg.y0
    if y0 is None:
        y0 = choose_y0(rows, u_centers, geometry, cfg.support_threshold,
                       cfg.y0_margin_samples)
    idx = _beta_arc(geometry, y0, cfg.beta_margin_views)
    betas = geometry.betas[idx]
    if x_grid is None:
        if cfg.x_range is not None:
            lo, hi = cfg.x_range
        else:
            half = admissible_x_range(geometry, y0, np.abs(u_centers).max(),
                                      beta_margin_views=cfg.beta_margin_views)
            lo, hi = -half, half
        x_grid = np.linspace(lo, hi, cfg.n_x)
    u, L = _u_beta(x_grid, betas, y0, R)
    u_edge = np.abs(u_centers).max() + geometry.du / 2.0
    bad = np.abs(u) > u_edge
    if np.any(bad):
        x_bad = x_grid[np.any(bad, axis=1)][0]
        raise ValueError(
            f"x = {x_bad:.3f} mm requires |u| beyond the detector "
            "(x grid too wide for this y0)")
    # sample each view's row at its u_beta (linear interpolation in u)
    vals = np.empty_like(u)
    for j, i in enumerate(idx):
        vals[:, j] = np.interp(u[:, j], u_centers, rows[i])
    denom = R * np.cos(betas) - y0
    weight = R * R / (np.sqrt(R * R + u * u) * denom ** (k + 1))
    if k > 0:
        weight = weight * (x_grid[:, None] - R * np.sin(betas)) ** k
    T = np.trapezoid(vals * weight, dx=geometry.dbeta, axis=1)
    return x_grid, T


def consistency_cost(params: CorrectorParams, rows: np.ndarray,
                     u_centers: np.ndarray, cfg: ConsistencyConfig,
                     geometry: ScanGeometry,
                     x_grid: np.ndarray | None = None) -> float:
    """Squared x-slope energy of T_0 after applying the corrector:
    the Eq.-(15)-style objective, integrated by trapezoid over the x grid."""
    corrected = corrector_apply(rows, params)
    x, T = consistency_transform(corrected, u_centers, 0, cfg, geometry,
                                 x_grid=x_grid)
    dx = x[1] - x[0]
    dT = (T[2:] - T[:-2]) / (2.0 * dx)
    with np.errstate(over="raise"):
        try:
            cost = float(np.trapezoid(dT * dT, dx=dx))
        except FloatingPointError:
            raise OverflowError("consistency cost overflow") from None
    if not np.isfinite(cost):
        raise OverflowError("consistency cost overflow")
    return cost


def choose_lambda_threshold(rows: np.ndarray) -> float:
    """Threshold separating the bulk of attenuation values from the
    metal-affected tail: the largest empty histogram gap above the median
    with real mass beyond it, falling back to the 95th percentile when no
    clear gap exists."""
    vals = np.asarray(rows, dtype=np.float64).ravel()
    vals = vals[vals > 0.05 * vals.max()]
    if vals.size == 0:
        raise ValueError("sinogram has no positive values")
    lo, hi = vals.min(), vals.max()
    if hi <= lo:
        return float(hi)
    counts, edges = np.histogram(vals, bins=128, range=(lo, hi))
    median = np.median(vals)
    best_len, best_start, run, start = 0, -1, 0, 0
    for i, c in enumerate(counts):
        if c == 0 and edges[i] > median:
            if run == 0:
                start = i
            run += 1
            if run > best_len:
                best_len, best_start = run, start
        else:
            run = 0
    gap_width = best_len * (edges[1] - edges[0])
    if best_len > 0 and gap_width >= (hi - lo) / 32.0:
        tail_mass = counts[best_start + best_len:].sum() / vals.size
        if tail_mass >= 0.005:
            return float(edges[best_start])
    return float(np.percentile(vals, 95.0))


@dataclass
class FitResult:
    """Fitted corrector plus diagnostics of the consistency optimization."""

    params: CorrectorParams
    initial_cost: float
    final_cost: float
    restart_costs: list
    n_evaluations: int
    converged: bool
    monotone: bool
    y0: float
    x_range: tuple
    v_index: int

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(),
                "initial_cost": self.initial_cost,
                "final_cost": self.final_cost,
                "restart_costs": self.restart_costs,
                "n_evaluations": self.n_evaluations,
                "converged": self.converged, "monotone": self.monotone,
                "y0": self.y0, "x_range": list(self.x_range),
                "v_index": self.v_index}


def _is_monotone(params: CorrectorParams, p_max: float) -> bool:
    p = np.linspace(0.0, max(p_max, params.Lambda * 1.01), 512)
    try:
        f = corrector_apply(p, params)
    except OverflowError:
        return False
    return bool(np.all(np.diff(f) > 0))


def fit_params(sinogram: Sinogram, cfg: ConsistencyConfig,
               geometry: ScanGeometry) -> FitResult:
    """Fit the corrector parameters on one sinogram slice (v = 0 unless
    `cfg.v_index` says otherwise) by derivative-free simplex descent.

    lam0 stays positive by optimizing its log.  The optimizer restarts from
    `cfg.restarts` scaled initial simplices around the identity-like start
    (1/Lambda, 0, 0, 0); everything is deterministic for a fixed config.
    Non-convergence within the budget returns the best point found, flagged.
    """
    v_index = geometry.mid_v_index if cfg.v_index is None else cfg.v_index
    rows = sinogram.data[:, :, v_index]
    u_centers = sinogram.u_centers
    Lambda = cfg.Lambda
    if Lambda is None:
        Lambda = choose_lambda_threshold(rows)
    y0 = cfg.y0
    if y0 is None:
        y0 = choose_y0(rows, u_centers, geometry, cfg.support_threshold,
                       cfg.y0_margin_samples)
    run_cfg = ConsistencyConfig(
        y0=y0, n_x=cfg.n_x, x_range=cfg.x_range,
        beta_margin_views=cfg.beta_margin_views,
        support_threshold=cfg.support_threshold,
        y0_margin_samples=cfg.y0_margin_samples)
    if run_cfg.x_range is None:
        half = admissible_x_range(geometry, y0, np.abs(u_centers).max(),
                                  beta_margin_views=cfg.beta_margin_views)
        run_cfg.x_range = (-half, half)
    x_grid = np.linspace(run_cfg.x_range[0], run_cfg.x_range[1], run_cfg.n_x)

    n_evals = 0
    p_max = float(rows.max())
    p_probe = np.linspace(min(Lambda, p_max), max(p_max, Lambda * 1.01), 256)

    def objective(theta):
        nonlocal n_evals
        n_evals += 1
        if not np.all(np.isfinite(theta)) or abs(theta[0]) > 50.0:
            return 1e300
        params = CorrectorParams(lam0=float(np.exp(theta[0])),
                                 lam1=float(theta[1]), lam2=float(theta[2]),
                                 lam3=float(theta[3]), Lambda=Lambda)
        try:
            # keep the search inside the physically sane family: the
            # corrector must stay increasing and bounded on the data range
            f = corrector_apply(p_probe, params)
            slopes = np.diff(f)
            if slopes.min() <= 0.0:
                return 1e250 * (1.0 - float(slopes.min()))
            if f[-1] > 4.0 * p_max:
                return 1e250 * float(f[-1] / p_max)
            return consistency_cost(params, rows, u_centers, run_cfg,
                                    geometry, x_grid=x_grid)
        except (OverflowError, FloatingPointError):
            return 1e300

    x0 = np.array([np.log(1.0 / Lambda), 0.0, 0.0, 0.0])
    initial_cost = objective(x0)
    steps = np.array([0.4, 0.3, 0.1, 0.03])
    best = (initial_cost, x0, True)
    restart_costs = []
    for scale in (1.0, 0.5, 2.0, 4.0)[:cfg.restarts]:
        simplex = np.vstack([x0] + [x0 + scale * steps[i] * np.eye(4)[i]
                                    for i in range(4)])
        res = optimize.minimize(
            objective, x0, method="Nelder-Mead",
            options={"initial_simplex": simplex, "maxfev": cfg.max_evals,
                     "fatol": max(1e-8 * max(initial_cost, 1e-30), 1e-300),
                     "xatol": 1e-6, "adaptive": False})
        restart_costs.append(float(res.fun))
        if res.fun < best[0]:
            best = (float(res.fun), np.asarray(res.x), bool(res.success))
    final_cost, theta, converged = best
    params = CorrectorParams(lam0=float(np.exp(theta[0])),
                             lam1=float(theta[1]), lam2=float(theta[2]),
                             lam3=float(theta[3]), Lambda=Lambda)
    monotone = _is_monotone(params, float(rows.max()))
    return FitResult(params=params, initial_cost=float(initial_cost),
                     final_cost=float(final_cost),
                     restart_costs=restart_costs, n_evaluations=n_evals,
                     converged=converged, monotone=monotone, y0=float(y0),
                     x_range=tuple(run_cfg.x_range), v_index=int(v_index))
