"""Atmospheric delay and noise samplers.

All samplers are pure functions of their parameters and an integer seed.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, NumericError
from .raster import TWO_PI, GridKind, GridMeta, PhaseGrid
from .rng import make_rng

DENSE_LIMIT = 16384
COARSE_TARGET = 4096
JITTER = 1e-10


@dataclass(frozen=True)
class TurbulenceParams:
    sigma: float = 1.0  # radians
    corr_length: float = 5000.0  # meters

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ConfigError(f"turbulence sigma must be >= 0, got {self.sigma}")
        if not self.corr_length > 0:
            raise ConfigError(f"correlation length must be > 0, got {self.corr_length}")


@dataclass(frozen=True, eq=False)
class StratifiedParams:
    """Elevation-correlated delay.

    ``synthetic_dem`` scales an elevation raster (meters) by ``coefficient``
    (rad/m). ``external_ztd`` interpolates a zenith-delay grid (radians) whose
    pixel centers start at ``ztd_origin`` (east, north of the first row's first
    pixel, rows running south).
    """

    mode: str = "synthetic_dem"
    coefficient: float = 0.0
    elevation: np.ndarray | None = None
    ztd: PhaseGrid | None = None
    ztd_origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.mode not in ("synthetic_dem", "external_ztd"):
            raise ConfigError(f"unknown stratified mode {self.mode!r}")
        if self.mode == "synthetic_dem":
            if self.elevation is None or not np.isfinite(self.elevation).all():
                raise ConfigError("synthetic_dem mode needs a finite elevation raster")
        elif self.ztd is None:
            raise ConfigError("external_ztd mode needs a ZTD grid")


@dataclass(frozen=True)
class PatchyNoiseParams:
    coverage: float = 0.15
    smoothing_scale: float = 6.0  # pixels
    offset_range: tuple = (0.0, TWO_PI)
    coverage_bounds: tuple = (0.05, 0.30)

    def __post_init__(self):
        lo, hi = self.coverage_bounds
        if not lo <= self.coverage <= hi:
            raise ConfigError(f"coverage {self.coverage} outside bounds {self.coverage_bounds}")
        if not self.smoothing_scale > 0:
            raise ConfigError("smoothing_scale must be positive")
        a, b = self.offset_range
        if not 0.0 <= a <= b <= TWO_PI:
            raise ConfigError(f"offset range must lie within [0, 2pi), got {self.offset_range}")


def _slant_factor(meta: GridMeta):
    lu = meta.los[2]
    if lu == 0:
        raise DataError("line-of-sight has no vertical component; grazing geometry unsupported")
    return 1.0 / lu


def fractal_dem(shape, seed, relief=(0.0, 2000.0), exponent=-2.0):
    """Fractal elevation surface with power spectrum ~ |k|^exponent, scaled to ``relief``."""
    rng = make_rng(seed)
    h, w = shape
    white = rng.standard_normal(shape)
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.rfftfreq(w)[None, :]
    k = np.hypot(kx, ky)
    k[0, 0] = np.inf
    spec = np.fft.rfft2(white) * k ** (exponent / 2.0)
    surf = np.fft.irfft2(spec, s=shape)
    lo, hi = relief
    span = surf.max() - surf.min()
    if span == 0:
        return np.full(shape, lo)
    return lo + (surf - surf.min()) / span * (hi - lo)


def _bilinear(grid, rows, cols):
    return ndimage.map_coordinates(grid, [rows, cols], order=1, mode="nearest")


def stratified_delay(params: StratifiedParams, meta: GridMeta, shape) -> PhaseGrid:
    scale = _slant_factor(meta)
    out_meta = meta.with_kind(GridKind.UNWRAPPED)
    if params.mode == "synthetic_dem":
        elev = np.asarray(params.elevation, dtype=np.float64)
        if elev.shape != tuple(shape):
            raise DataError(f"elevation shape {elev.shape} does not match scene {tuple(shape)}")
        return PhaseGrid(params.coefficient * elev * scale, out_meta)

    ztd = params.ztd
    h, w = shape
    dx, dy = meta.pixel_spacing
    zdx, zdy = ztd.meta.pixel_spacing
    e0, n0 = params.ztd_origin
    east = (np.arange(w) + 0.5) * dx
    north = (h - np.arange(h) - 0.5) * dy
    cols = (east - e0) / zdx
    rows = (n0 - north) / zdy
    tol = 1e-9
    if cols.min() < -tol or cols.max() > ztd.width - 1 + tol or rows.min() < -tol or rows.max() > ztd.height - 1 + tol:
        raise DataError("ZTD raster does not cover the scene footprint")
    rr, cc = np.meshgrid(np.clip(rows, 0, ztd.height - 1), np.clip(cols, 0, ztd.width - 1), indexing="ij")
    vals = _bilinear(ztd.values, rr, cc)
    return PhaseGrid(vals * scale, out_meta)


def exponential_covariance(shape, pixel_spacing, corr_length, sigma=1.0):
    h, w = shape
    dx, dy = pixel_spacing
    yy, xx = np.meshgrid(np.arange(h) * dy, np.arange(w) * dx, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    return sigma**2 * np.exp(-d / corr_length)


@functools.lru_cache(maxsize=4)
def _unit_cholesky(shape, pixel_spacing, corr_length):
    cov = exponential_covariance(shape, pixel_spacing, corr_length)
    cov[np.diag_indices_from(cov)] += JITTER
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"exponential covariance not positive definite for shape={shape}, "
            f"spacing={pixel_spacing}, L={corr_length}: {exc}") from exc
    factor.flags.writeable = False
    return factor


def turbulence_factor(shape, pixel_spacing, corr_length, sigma=1.0):
    """Lower Cholesky factor of the (jittered) exponential covariance."""
    return sigma * _unit_cholesky(tuple(shape), tuple(float(s) for s in pixel_spacing), float(corr_length))


def _dense_field(shape, pixel_spacing, params, rng):
    factor = _unit_cholesky(tuple(shape), tuple(float(s) for s in pixel_spacing), float(params.corr_length))
    z = rng.standard_normal(factor.shape[0])
    return params.sigma * (factor @ z).reshape(shape)


def sample_turbulence(params: TurbulenceParams, shape, pixel_spacing, seed, meta: GridMeta = None) -> PhaseGrid:
    """Zero-mean Gaussian field with covariance sigma^2 exp(-r / L)."""
    shape = tuple(int(s) for s in shape)
    meta = (meta or GridMeta(pixel_spacing=pixel_spacing)).with_kind(GridKind.UNWRAPPED)
    if params.sigma == 0:
        return PhaseGrid(np.zeros(shape), meta)
    rng = make_rng(seed)
    h, w = shape
    if h * w <= DENSE_LIMIT:
        return PhaseGrid(_dense_field(shape, pixel_spacing, params, rng), meta)

    f = math.ceil(math.sqrt(h * w / COARSE_TARGET))
    coarse_shape = (math.ceil(h / f), math.ceil(w / f))
    coarse_spacing = (pixel_spacing[0] * f, pixel_spacing[1] * f)
    coarse = _dense_field(coarse_shape, coarse_spacing, params, rng)
    rows = (np.arange(h) + 0.5) / f - 0.5
    cols = (np.arange(w) + 0.5) / f - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    fine = ndimage.map_coordinates(coarse, [rr, cc], order=3, mode="nearest")
    d_coarse = max(coarse_spacing)
    resid_std = params.sigma * math.sqrt(1.0 - math.exp(-d_coarse / params.corr_length))
    fine = fine + resid_std * rng.standard_normal(shape)
    return PhaseGrid(fine, meta)


def sample_patchy_noise(params: PatchyNoiseParams, shape, seed, meta: GridMeta = None):
    """Piecewise-constant phase offsets on thresholded smooth-field patches.

    Returns ``(noise, patch_mask)``.
    """
    h, w = shape
    if h * w < 100:
        raise DataError(f"grid of {h * w} pixels too small to calibrate patch coverage")
    rng = make_rng(seed)
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=params.smoothing_scale,
                                    truncate=3.0, mode="reflect")
    thr = np.quantile(field, 1.0 - params.coverage)
    patch_mask = field > thr
    labels, n = ndimage.label(patch_mask)  # 4-connectivity
    lo, hi = params.offset_range
    offsets = np.concatenate([[0.0], rng.uniform(lo, hi, size=n)])
    noise = offsets[labels]
    meta = (meta or GridMeta()).with_kind(GridKind.UNWRAPPED)
    return PhaseGrid(noise, meta), patch_mask


def sample_measurement_noise(std, shape, seed, meta: GridMeta = None) -> PhaseGrid:
    if std < 0:
        raise ConfigError(f"noise std must be >= 0, got {std}")
    meta = (meta or GridMeta()).with_kind(GridKind.UNWRAPPED)
    if std == 0:
        return PhaseGrid(np.zeros(shape), meta)
    return PhaseGrid(std * make_rng(seed).standard_normal(shape), meta)
