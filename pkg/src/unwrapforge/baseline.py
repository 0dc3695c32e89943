"""Built-in conditioning unwrapper and external conditioning ingestion."""

from __future__ import annotations

import heapq
import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .raster import TWO_PI, GridKind, GridMeta, PhaseGrid, grid_from_bytes, wrap


def compute_residues(wrapped: PhaseGrid) -> np.ndarray:
    """Integer charge of every elementary 2x2 loop, shape (h-1, w-1).

    The loop at (i, j) visits (i, j) -> (i, j+1) -> (i+1, j+1) -> (i+1, j).
    Loops touching a masked pixel get charge 0.
    """
    w = np.where(wrapped.valid, wrapped.values, 0.0)
    a, b = w[:-1, :-1], w[:-1, 1:]
    c, d = w[1:, 1:], w[1:, :-1]
    circ = wrap(b - a) + wrap(c - b) + wrap(d - c) + wrap(a - d)
    charge = np.rint(circ / TWO_PI).astype(np.int8)
    v = wrapped.valid
    ok = v[:-1, :-1] & v[:-1, 1:] & v[1:, 1:] & v[1:, :-1]
    return np.where(ok, charge, 0).astype(np.int8)


def boundary_circulation(wrapped: PhaseGrid) -> float:
    """Sum of wrapped differences around the outer boundary, same orientation as the loops."""
    w = wrapped.values
    top = wrap(np.diff(w[0, :])).sum()
    right = wrap(np.diff(w[:, -1])).sum()
    bottom = -wrap(np.diff(w[-1, :])).sum()
    left = -wrap(np.diff(w[:, 0])).sum()
    return float(top + right + bottom + left)


def quality_map(wrapped: PhaseGrid) -> np.ndarray:
    """Phase-derivative-variance quality in [0, 1] (1 = most reliable)."""
    w = np.where(wrapped.valid, wrapped.values, 0.0)
    h, wd = w.shape
    dx = np.zeros_like(w)
    dy = np.zeros_like(w)
    if wd > 1:
        gx = wrap(np.diff(w, axis=1))
        dx[:, :-1] = gx
        dx[:, -1] = gx[:, -1]
    if h > 1:
        gy = wrap(np.diff(w, axis=0))
        dy[:-1, :] = gy
        dy[-1, :] = gy[-1, :]
    var = 0.0
    for g in (dx, dy):
        m = ndimage.uniform_filter(g, size=3, mode="reflect")
        m2 = ndimage.uniform_filter(g * g, size=3, mode="reflect")
        var = var + np.maximum(m2 - m * m, 0.0)
    q = np.exp(-var)
    valid = wrapped.valid
    if not valid.any():
        return np.zeros_like(q)
    qmin, qmax = q[valid].min(), q[valid].max()
    # variance below float noise counts as flat
    if qmax - qmin < 1e-12:
        out = np.ones_like(q)
    else:
        out = (q - qmin) / (qmax - qmin)
    return np.where(valid, out, 0.0)


def unwrap_quality_guided(wrapped: PhaseGrid, quality: np.ndarray | None = None) -> PhaseGrid:
    """Region-growing unwrapper guided by a quality map.

    Growth starts at the highest-quality valid pixel, which keeps its wrapped
    value. Each newly reached pixel takes the integer ambiguity of its
    highest-quality unwrapped neighbour plus the wrapped step between them, so
    the result is always congruent with ``wrapped``. Ties are broken by
    row-major index.
    """
    if quality is None:
        quality = quality_map(wrapped)
    h, w = wrapped.shape
    valid = wrapped.valid.ravel()
    if not valid.any():
        raise DataError("no valid pixels to unwrap")
    phase = np.where(wrapped.valid, wrapped.values, 0.0).ravel()
    q = np.where(valid, np.asarray(quality, dtype=np.float64).ravel(), -np.inf)

    cand = np.flatnonzero(valid & (q == q[valid].max()))
    seed = int(cand[0])
    amb = np.zeros(h * w, dtype=np.int64)
    done = np.zeros(h * w, dtype=bool)
    ql = q.tolist()
    pl = phase.tolist()
    vl = valid.tolist()

    def neighbours(p):
        r, c = divmod(p, w)
        if r > 0:
            yield p - w
        if c > 0:
            yield p - 1
        if c < w - 1:
            yield p + 1
        if r < h - 1:
            yield p + w

    done[seed] = True
    heap = []
    for n in neighbours(seed):
        if vl[n]:
            heapq.heappush(heap, (-ql[n], n))
    while heap:
        _, p = heapq.heappop(heap)
        if done[p]:
            continue
        best = -1
        for n in neighbours(p):
            if done[n] and (best < 0 or ql[n] > ql[best] or (ql[n] == ql[best] and n < best)):
                best = n
        amb[p] = amb[best] + round((pl[best] - pl[p]) / TWO_PI)
        done[p] = True
        for n in neighbours(p):
            if vl[n] and not done[n]:
                heapq.heappush(heap, (-ql[n], n))

    out = np.where(done, phase + TWO_PI * amb, np.nan).reshape(h, w)
    mask = wrapped.mask
    if not done[valid].all():
        # valid pixels unreachable from the seed stay unwrapped-out
        mask = done.reshape(h, w)
    return PhaseGrid(out, wrapped.meta.with_kind(GridKind.CONDITIONING), mask)


def ingest_conditioning(path, expected_shape, meta: GridMeta | None = None) -> PhaseGrid:
    """Load an externally produced unwrapped raster (PGRD v1 or raw float32)."""
    buf = Path(path).read_bytes()
    h, w = expected_shape
    if buf[:4] == b"PGRD":
        g = grid_from_bytes(buf)
        if g.shape != (h, w):
            raise DataError(f"conditioning is {g.shape}, expected {(h, w)}")
        return g.with_values(g.values, GridKind.CONDITIONING)
    if len(buf) != 4 * h * w:
        raise DataError(f"raw conditioning has {len(buf)} bytes, expected {4 * h * w} for {w}x{h}")
    values = np.frombuffer(buf, dtype="<f4").reshape(h, w).astype(np.float64)
    finite = np.isfinite(values)
    mask = None if finite.all() else finite
    return PhaseGrid(values, (meta or GridMeta()).with_kind(GridKind.CONDITIONING), mask)


def align_2pi(values, reference, valid=None):
    """Integer k minimising mean |values + 2 pi k - reference| over ``valid``."""
    values = np.asarray(values, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(values) & np.isfinite(reference)
    d = (reference - values)[valid]
    if d.size == 0:
        return 0
    k0 = int(math.floor(np.median(d) / TWO_PI + 0.5))
    costs = [(np.abs(d - TWO_PI * k).mean(), k) for k in (k0 - 1, k0, k0 + 1)]
    return min(costs)[1]
