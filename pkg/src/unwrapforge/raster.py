"""Phase rasters, the wrapping operator and the PGRD v1 grid file format."""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    DimensionOverflowError,
    GridFormatError,
    TruncatedFileError,
    VersionMismatchError,
)

TWO_PI = 2.0 * math.pi

# C-band, Sentinel-1
DEFAULT_WAVELENGTH = 0.0556


def _default_los():
    # ascending pass, 39 deg incidence, heading -10 deg (ground -> satellite)
    inc, head = math.radians(39.0), math.radians(-10.0)
    v = np.array([-math.sin(inc) * math.cos(head), math.sin(inc) * math.sin(head), math.cos(inc)])
    return tuple(float(c) for c in v / np.linalg.norm(v))


DEFAULT_LOS = _default_los()


class GridKind(enum.IntEnum):
    UNWRAPPED = 0
    WRAPPED = 1
    CONDITIONING = 2
    DISPLACEMENT = 3
    WEIGHT = 4


@dataclass(frozen=True)
class GridMeta:
    pixel_spacing: tuple = (100.0, 100.0)  # meters/pixel along x (columns), y (rows)
    wavelength: float = DEFAULT_WAVELENGTH
    los: tuple = DEFAULT_LOS  # unit vector (east, north, up)
    kind: GridKind = GridKind.UNWRAPPED

    def __post_init__(self):
        sx, sy = (float(v) for v in self.pixel_spacing)
        object.__setattr__(self, "pixel_spacing", (sx, sy))
        object.__setattr__(self, "los", tuple(float(v) for v in self.los))
        object.__setattr__(self, "kind", GridKind(self.kind))
        if not (sx > 0 and sy > 0):
            raise DataError(f"pixel spacing must be positive, got {self.pixel_spacing}")
        if not self.wavelength > 0:
            raise DataError(f"wavelength must be positive, got {self.wavelength}")
        if len(self.los) != 3 or abs(math.sqrt(sum(c * c for c in self.los)) - 1.0) > 1e-9:
            raise DataError(f"line-of-sight vector must have unit norm, got {self.los}")

    def with_kind(self, kind):
        return replace(self, kind=GridKind(kind))


@dataclass(frozen=True, eq=False)
class PhaseGrid:
    """Immutable 2-D raster of phase (radians), row-major with top-left origin.

    ``mask`` is True for valid pixels; masked pixels may hold NaN. Values are
    held in float64 regardless of the on-disk precision.
    """

    values: np.ndarray
    meta: GridMeta = field(default_factory=GridMeta)
    mask: np.ndarray | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 2:
            raise DataError(f"phase grid must be 2-D, got shape {values.shape}")
        mask = None
        if self.mask is not None:
            mask = np.array(self.mask, dtype=bool, copy=True)
            if mask.shape != values.shape:
                raise DataError(f"mask shape {mask.shape} != values shape {values.shape}")
        valid = values if mask is None else values[mask]
        bad = ~np.isfinite(valid)
        if bad.any():
            flat = np.flatnonzero(~np.isfinite(values) & (True if mask is None else mask))
            raise DataError(f"non-finite value at valid pixel index {int(flat[0])}")
        if self.meta.kind == GridKind.WRAPPED and valid.size:
            if valid.min() < -math.pi or valid.max() >= math.pi:
                raise DataError("wrapped grid has values outside [-pi, pi)")
        values.flags.writeable = False
        if mask is not None:
            mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    @property
    def kind(self):
        return self.meta.kind

    @property
    def valid(self):
        """Boolean validity raster (all True when no mask is attached)."""
        if self.mask is None:
            return np.ones(self.shape, dtype=bool)
        return self.mask

    def with_values(self, values, kind=None):
        meta = self.meta if kind is None else self.meta.with_kind(kind)
        return PhaseGrid(values, meta, self.mask)


def _wrap_array(phi):
    phi = np.asarray(phi, dtype=np.float64)
    inside = (phi >= -math.pi) & (phi < math.pi)
    out = np.mod(phi + math.pi, TWO_PI) - math.pi
    # mod can round up to exactly 2*pi for tiny negative arguments
    out = np.where(out >= math.pi, out - TWO_PI, out)
    out = np.where(out < -math.pi, -math.pi, out)
    # values already in range are returned untouched so wrapping is idempotent bitwise
    return np.where(inside, phi, out)


def wrap(phi):
    """Wrap an array (or scalar) of phases into [-pi, pi)."""
    out = _wrap_array(phi)
    return float(out) if out.ndim == 0 else out


def wrap_phase(phi: PhaseGrid) -> PhaseGrid:
    values = phi.values
    valid = phi.valid
    bad = valid & ~np.isfinite(values)
    if bad.any():
        raise DataError(f"non-finite value at pixel index {int(np.flatnonzero(bad)[0])}")
    out = np.where(valid, _wrap_array(np.where(valid, values, 0.0)), np.nan)
    return PhaseGrid(out, phi.meta.with_kind(GridKind.WRAPPED), phi.mask)


def check_congruent(a: PhaseGrid, b: PhaseGrid, what="grids"):
    if a.shape != b.shape:
        raise DataError(f"{what} differ in shape: {a.shape} vs {b.shape}")
    if not np.array_equal(a.valid, b.valid):
        raise DataError(f"{what} differ in validity mask")


def rewrap_residual(unwrapped: PhaseGrid, wrapped: PhaseGrid) -> PhaseGrid:
    """Wrapped difference between an unwrapped solution and the observation."""
    check_congruent(unwrapped, wrapped)
    valid = unwrapped.valid
    diff = np.where(valid, unwrapped.values - wrapped.values, 0.0)
    out = np.where(valid, _wrap_array(diff), np.nan)
    return PhaseGrid(out, unwrapped.meta.with_kind(GridKind.UNWRAPPED), unwrapped.mask)


# --- PGRD v1 ---------------------------------------------------------------

MAGIC = b"PGRD"
VERSION = 1
_HEAD = struct.Struct("<4sBBBBIIdd")  # 32 bytes
_HEAD2 = struct.Struct("<dddd")  # pixel_spacing_y, los -> 64-byte header total
HEADER_SIZE = _HEAD.size + _HEAD2.size
MAX_PIXELS = 2**31
_F32_POS_PI = np.nextafter(np.float32(math.pi), np.float32(0))
_F32_NEG_PI = np.nextafter(np.float32(-math.pi), np.float32(0))


def grid_to_bytes(grid: PhaseGrid) -> bytes:
    has_mask = grid.mask is not None
    h, w = grid.shape
    sx, sy = grid.meta.pixel_spacing
    head = _HEAD.pack(MAGIC, VERSION, int(grid.kind), 1 if has_mask else 0, 0, w, h,
                      grid.meta.wavelength, sx)
    head += _HEAD2.pack(sy, *grid.meta.los)
    payload = np.where(grid.valid, grid.values, np.nan).astype("<f4")
    if grid.kind == GridKind.WRAPPED:
        # float32 rounding may push values just inside +-pi onto or past the boundary
        payload = np.clip(payload, _F32_NEG_PI, _F32_POS_PI)
    parts = [head, payload.tobytes()]
    if has_mask:
        parts.append(np.packbits(grid.mask.ravel(), bitorder="little").tobytes())
    return b"".join(parts)


def grid_from_bytes(buf: bytes) -> PhaseGrid:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < HEADER_SIZE:
        raise TruncatedFileError(f"header truncated: {len(buf)} < {HEADER_SIZE} bytes")
    _, version, kind, flags, _, w, h, wavelength, sx = _HEAD.unpack_from(buf, 0)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported PGRD version {version}")
    if w == 0 or h == 0 or w * h > MAX_PIXELS:
        raise DimensionOverflowError(f"unsupported dimensions {w}x{h}")
    try:
        kind = GridKind(kind)
    except ValueError as exc:
        raise GridFormatError(f"unknown grid kind {kind}") from exc
    sy, le, ln, lu = _HEAD2.unpack_from(buf, _HEAD.size)
    n = w * h
    has_mask = bool(flags & 1)
    expected = HEADER_SIZE + 4 * n + (math.ceil(n / 8) if has_mask else 0)
    if len(buf) < expected:
        raise TruncatedFileError(f"payload truncated: {len(buf)} < {expected} bytes")
    values = np.frombuffer(buf, dtype="<f4", count=n, offset=HEADER_SIZE).reshape(h, w)
    mask = None
    if has_mask:
        bits = np.frombuffer(buf, dtype=np.uint8, count=math.ceil(n / 8), offset=HEADER_SIZE + 4 * n)
        mask = np.unpackbits(bits, bitorder="little")[:n].astype(bool).reshape(h, w)
    meta = GridMeta((sx, sy), wavelength, (le, ln, lu), kind)
    return PhaseGrid(values.astype(np.float64), meta, mask)


def write_grid(grid: PhaseGrid, path):
    Path(path).write_bytes(grid_to_bytes(grid))


def read_grid(path) -> PhaseGrid:
    return grid_from_bytes(Path(path).read_bytes())


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name.split(".")[0] + ".meta.json")


def write_sidecar(path, seed, components, generator_version, **extra):
    doc = {"seed": seed, "components": list(components), "generator_version": generator_version}
    doc.update(extra)
    sidecar_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def read_sidecar(path) -> dict:
    return json.loads(sidecar_path(path).read_text())
