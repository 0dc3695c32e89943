"""Overlapping-tile inference with smooth-window fusion, and the resize baseline."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

from .baseline import align_2pi
from .diffusion import DiffusionSchedule, SamplerConfig, ddim_sample
from .errors import ConfigError, DataError
from .raster import TWO_PI, GridKind, PhaseGrid, check_congruent
from .rng import make_rng

WINDOW_FLOOR = 1e-3


@dataclass(frozen=True)
class TilePlan:
    height: int
    width: int
    tile_size: int
    overlap: int
    origins: tuple  # (row0, col0) per tile, row-major

    @property
    def stride(self):
        return self.tile_size - self.overlap

    def __len__(self):
        return len(self.origins)

    def support(self, k):
        r, c = self.origins[k]
        return slice(r, r + self.tile_size), slice(c, c + self.tile_size)


def _axis_origins(n, tile, stride):
    starts = list(range(0, n - tile + 1, stride))
    if starts[-1] + tile < n:
        starts.append(n - tile)
    return starts


def plan_tiles(height, width, tile_size=256, overlap=128) -> TilePlan:
    stride = tile_size - overlap
    if stride <= 0 or overlap < 0:
        raise ConfigError(f"need 0 <= overlap < tile_size, got tile {tile_size}, overlap {overlap}")
    if tile_size > min(height, width):
        raise ConfigError(f"tile {tile_size} larger than image {height}x{width}; pad first")
    rows = _axis_origins(height, tile_size, stride)
    cols = _axis_origins(width, tile_size, stride)
    return TilePlan(height, width, tile_size, overlap, tuple((r, c) for r in rows for c in cols))


def hann_window(tile_size, floor=WINDOW_FLOOR) -> np.ndarray:
    """Separable raised-cosine weights, strictly positive, peaked at the center."""
    if tile_size < 2:
        raise ConfigError("window needs tile_size >= 2")
    i = np.arange(tile_size)
    h = floor + (1.0 - floor) * np.sin(np.pi * (i + 0.5) / tile_size) ** 2
    h = 0.5 * (h + h[::-1])  # exact flip symmetry despite sin rounding
    return np.outer(h, h)


def fuse_tiles(predictions, plan: TilePlan, weights) -> np.ndarray:
    """Weighted average of overlapping tile predictions (accumulated in plan order)."""
    if len(predictions) != len(plan):
        raise DataError(f"{len(predictions)} predictions for {len(plan)} tiles")
    weights = np.asarray(weights, dtype=np.float64)
    num = np.zeros((plan.height, plan.width))
    den = np.zeros((plan.height, plan.width))
    single = np.zeros((plan.height, plan.width))
    count = np.zeros((plan.height, plan.width), dtype=np.int32)
    for k, pred in enumerate(predictions):
        pred = np.asarray(pred, dtype=np.float64)
        if pred.shape != (plan.tile_size, plan.tile_size):
            raise DataError(f"tile {k} has shape {pred.shape}")
        sl = plan.support(k)
        num[sl] += weights * pred
        den[sl] += weights
        single[sl] = pred
        count[sl] += 1
    assert (den > 0).all(), "uncovered pixel in tile fusion"
    # pixels seen by one tile take its value exactly (w * p / w can differ by an ulp)
    return np.where(count == 1, single, num / den)


@dataclass(frozen=True)
class InferConfig:
    tile_size: int = 256
    overlap: int = 128
    eta: float = 0.0
    steps: int = 50
    seed: int = 0
    workers: int = 1
    tiles_per_batch: int = 4
    align: bool = True  # shift each tile by the 2 pi multiple nearest the conditioning
    snap: bool = False  # project the fused result onto values congruent with the observation

    def __post_init__(self):
        if self.workers < 1 or self.tiles_per_batch < 1:
            raise ConfigError("workers and tiles_per_batch must be >= 1")
        SamplerConfig(self.eta, self.steps)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown inference keys: {sorted(unknown)}")
        return cls(**d)

    def sampler(self):
        return SamplerConfig(self.eta, self.steps)


def _dtype_of(net):
    return getattr(net, "dtype", np.float64)


def _refine(net, sched, cfg: InferConfig, cond_tiles, scale, tile_ids):
    """DDIM-refine a stack of normalised conditioning tiles."""
    dtype = _dtype_of(net)
    c = np.nan_to_num(cond_tiles / scale).astype(dtype)
    xT = np.stack([make_rng(cfg.seed, k).standard_normal(c.shape[1:]) for k in tile_ids]).astype(dtype)
    rng = make_rng(cfg.seed, 2**31 + int(tile_ids[0])) if cfg.eta > 0 else None
    out = ddim_sample(xT, c, net, cfg.sampler(), sched, rng)
    return np.asarray(out, dtype=np.float64) * scale


def _pad_to(arr, tile):
    h, w = arr.shape
    ph, pw = max(0, tile - h), max(0, tile - w)
    if ph == 0 and pw == 0:
        return arr, (h, w)
    return np.pad(arr, ((0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge"), (h, w)


def _finish(values, wrapped: PhaseGrid, cfg: InferConfig):
    if cfg.snap:
        values = snap_to_wrapped(values, wrapped.values)
    values = np.where(wrapped.valid, values, np.nan)
    return PhaseGrid(values, wrapped.meta.with_kind(GridKind.UNWRAPPED), wrapped.mask)


def snap_to_wrapped(values, wrapped):
    """Nearest values congruent (mod 2 pi) with the wrapped observation."""
    return wrapped + TWO_PI * np.round((values - wrapped) / TWO_PI)


def _check_inputs(wrapped, cond):
    if cond is None:
        raise ConfigError("conditioning is required for the conditional model")
    check_congruent(wrapped, cond, "wrapped and conditioning")


def infer_tiled(wrapped: PhaseGrid, cond: PhaseGrid, net, sched: DiffusionSchedule, cfg: InferConfig,
                scale: float) -> PhaseGrid:
    _check_inputs(wrapped, cond)
    cvals = np.where(cond.valid, cond.values, np.nan)
    filled = np.where(np.isfinite(cvals), cvals, np.nanmean(cvals))
    padded, (h, w) = _pad_to(filled, cfg.tile_size)
    plan = plan_tiles(padded.shape[0], padded.shape[1], cfg.tile_size, cfg.overlap)
    groups = [list(range(i, min(i + cfg.tiles_per_batch, len(plan))))
              for i in range(0, len(plan), cfg.tiles_per_batch)]

    def run(group):
        tiles = np.stack([padded[plan.support(k)] for k in group])
        out = _refine(net, sched, cfg, tiles, scale, group)
        if cfg.align:
            out = np.stack([o + TWO_PI * align_2pi(o, t) for o, t in zip(out, tiles)])
        return out

    if cfg.workers == 1:
        results = [run(g) for g in groups]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run, groups))
    preds = [tile for res in results for tile in res]
    fused = fuse_tiles(preds, plan, hann_window(cfg.tile_size))[:h, :w]
    return _finish(fused, wrapped, cfg)


def resize_bilinear(arr, shape):
    """Bilinear resampling with pixel-center alignment."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape == tuple(shape):
        return arr.copy()
    h, w = arr.shape
    H, W = shape
    rows = (np.arange(H) + 0.5) * h / H - 0.5
    cols = (np.arange(W) + 0.5) * w / W - 0.5
    rr, cc = np.meshgrid(np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1), indexing="ij")
    return ndimage.map_coordinates(arr, [rr, cc], order=1, mode="nearest")


def infer_resized(wrapped: PhaseGrid, cond: PhaseGrid, net, sched: DiffusionSchedule, cfg: InferConfig,
                  scale: float) -> PhaseGrid:
    _check_inputs(wrapped, cond)
    cvals = np.where(cond.valid, cond.values, np.nan)
    filled = np.where(np.isfinite(cvals), cvals, np.nanmean(cvals))
    n = cfg.tile_size
    small = resize_bilinear(filled, (n, n))
    out = _refine(net, sched, cfg, small[None], scale, [0])[0]
    if cfg.align:
        out = out + TWO_PI * align_2pi(out, small)
    return _finish(resize_bilinear(out, filled.shape), wrapped, cfg)
