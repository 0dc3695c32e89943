"""Coseismic surface deformation from rectangular dislocations.

Surface displacements use Okada's (1985) closed-form half-space expressions
for a uniform-slip rectangle in a Poisson solid (nu = 0.25). Grid pixels are
placed at their centers: ``east = (col + 0.5) * dx`` and
``north = (height - row - 0.5) * dy`` so north points up the raster.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, DataError
from .raster import GridKind, GridMeta, PhaseGrid, check_congruent
from .rng import make_rng

# mu / (lambda + mu); lambda = mu for nu = 0.25
MEDIUM_RATIO = 0.5
EDGE_TOL = 1e-6
EDGE_SHIFT = 1e-3


@dataclass(frozen=True)
class FaultSource:
    center_east: float  # top-edge midpoint, meters
    center_north: float
    depth: float  # depth of the top edge, meters
    strike: float  # degrees clockwise from north; the fault dips to the right
    dip: float
    rake: float
    slip: float
    length: float
    width: float
    surface_breaking: bool = False

    def __post_init__(self):
        if not 0 < self.dip <= 90:
            raise DataError(f"dip must lie in (0, 90], got {self.dip}")
        if self.length <= 0 or self.width <= 0:
            raise DataError("fault length and width must be positive")
        if self.slip < 0:
            raise DataError(f"slip must be non-negative, got {self.slip}")
        if self.depth < 0 or (self.depth == 0 and not self.surface_breaking):
            raise DataError(f"top depth must be > 0 unless surface_breaking, got {self.depth}")
        object.__setattr__(self, "strike", float(self.strike) % 360.0)

    def with_slip(self, slip):
        d = asdict(self)
        d["slip"] = slip
        return FaultSource(**d)


@dataclass(frozen=True)
class FractureSpec:
    anchor: tuple  # (east, north) meters, a point on the fracture line
    normal: tuple  # unit 2-vector (east, north)
    delta: float  # radians added on the +normal side, subtracted on the other

    def __post_init__(self):
        n = tuple(float(v) for v in self.normal)
        if len(n) != 2 or abs(math.hypot(*n) - 1.0) > 1e-9:
            raise DataError(f"fracture normal must be a unit 2-vector, got {self.normal}")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "anchor", tuple(float(v) for v in self.anchor))


@dataclass(frozen=True)
class DisplacementField:
    east: PhaseGrid
    north: PhaseGrid
    up: PhaseGrid

    def components(self):
        return self.east, self.north, self.up


def grid_coordinates(meta: GridMeta, shape):
    """(east, north) coordinates in meters of every pixel center."""
    h, w = shape
    dx, dy = meta.pixel_spacing
    east = (np.arange(w) + 0.5) * dx
    north = (h - np.arange(h) - 0.5) * dy
    return np.broadcast_to(east[None, :], shape), np.broadcast_to(north[:, None], shape)


def _chinnery_terms(xi, eta, q, sd, cd):
    """Strike-slip and dip-slip integrands at one rectangle corner (arrays)."""
    a = MEDIUM_RATIO
    R = np.sqrt(xi * xi + eta * eta + q * q)
    yt = eta * cd + q * sd
    dt = eta * sd - q * cd
    X = np.sqrt(xi * xi + q * q)
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.where(q == 0, 0.0, np.arctan(xi * eta / (q * R)))
        # R + eta vanishes only on the down-dip extension of an edge
        re = R + eta
        ln_re = np.where(re > 1e-12 * np.maximum(R, 1.0), np.log(np.abs(re)), -np.log(R - eta))
        rd = R + dt
        if cd > 1e-12:
            i5 = np.where(
                xi == 0, 0.0,
                a * 2.0 / cd * np.arctan((eta * (X + q * cd) + X * (R + X) * sd) / (xi * (R + X) * cd)),
            )
            i4 = a / cd * (np.log(rd) - sd * ln_re)
            i3 = a * (yt / (cd * rd) - ln_re) + sd / cd * i4
            i1 = a * (-xi / (cd * rd)) - sd / cd * i5
        else:
            # vertical-fault limit
            i1 = -0.5 * a * xi * q / rd**2
            i3 = 0.5 * a * (eta / rd + yt * q / rd**2 - ln_re)
            i4 = -a * q / rd
            i5 = -a * xi * sd / rd
        i2 = -a * ln_re - i3
        r_re = R * (R + eta)
        r_rx = R * (R + xi)
        ss = (
            xi * q / r_re + theta + i1 * sd,
            yt * q / r_re + q * cd / (R + eta) + i2 * sd,
            dt * q / r_re + q * sd / (R + eta) + i4 * sd,
        )
        ds = (
            q / R - i3 * sd * cd,
            yt * q / r_rx + cd * theta - i1 * sd * cd,
            dt * q / r_rx + sd * theta - i5 * sd * cd,
        )
    return ss, ds


def _okada_frame(source: FaultSource, east, north):
    s = math.radians(source.strike)
    dip = math.radians(source.dip)
    ax = (math.sin(s), math.cos(s))  # along strike
    ay = (-math.cos(s), math.sin(s))  # left of strike (up-dip side)
    back = source.width * math.cos(dip)
    ox = source.center_east - 0.5 * source.length * ax[0] - back * ay[0]
    oy = source.center_north - 0.5 * source.length * ax[1] - back * ay[1]
    de, dn = east - ox, north - oy
    return de * ax[0] + dn * ax[1], de * ay[0] + dn * ay[1], ax, ay


def okada_surface(source: FaultSource, east, north):
    """Surface (east, north, up) displacement in meters at arbitrary points."""
    east = np.asarray(east, dtype=np.float64)
    north = np.asarray(north, dtype=np.float64)
    dip = math.radians(source.dip)
    sd = math.sin(dip)
    cd = 0.0 if source.dip == 90 else math.cos(dip)
    L, W = source.length, source.width
    d = source.depth + W * sd

    x, y, ax, ay = _okada_frame(source, east, north)
    q = y * sd - d * cd
    p = y * cd + d * sd
    near = (np.abs(x) < EDGE_TOL) | (np.abs(x - L) < EDGE_TOL) | (np.abs(q) < EDGE_TOL) \
        | (np.abs(p) < EDGE_TOL) | (np.abs(p - W) < EDGE_TOL)
    if near.any():
        east = np.where(near, east + EDGE_SHIFT, east)
        x, y, ax, ay = _okada_frame(source, east, north)
        q = y * sd - d * cd
        p = y * cd + d * sd

    # accumulate the unit-slip solution and scale once so the output is exactly linear in slip
    rake = math.radians(source.rake)
    u1 = math.cos(rake)
    u2 = math.sin(rake)
    ux = np.zeros_like(x)
    uy = np.zeros_like(x)
    uz = np.zeros_like(x)
    for xi, eta, sgn in ((x, p, 1.0), (x, p - W, -1.0), (x - L, p, -1.0), (x - L, p - W, 1.0)):
        ss, ds = _chinnery_terms(xi, eta, q, sd, cd)
        c1 = -sgn * u1 / (2.0 * math.pi)
        c2 = -sgn * u2 / (2.0 * math.pi)
        ux += c1 * ss[0] + c2 * ds[0]
        uy += c1 * ss[1] + c2 * ds[1]
        uz += c1 * ss[2] + c2 * ds[2]
    ue = source.slip * (ux * ax[0] + uy * ay[0])
    un = source.slip * (ux * ax[1] + uy * ay[1])
    out = (ue, un, source.slip * uz)
    if not all(np.isfinite(c).all() for c in out):
        raise DataError("non-finite displacement from dislocation source")
    return out


def okada_displacement(source: FaultSource, meta: GridMeta, shape) -> DisplacementField:
    east, north = grid_coordinates(meta, shape)
    if source.slip == 0:
        comps = [np.zeros(shape)] * 3
    else:
        comps = okada_surface(source, east, north)
    m = meta.with_kind(GridKind.DISPLACEMENT)
    return DisplacementField(*(PhaseGrid(c, m) for c in comps))


def project_los(disp: DisplacementField, meta: GridMeta) -> PhaseGrid:
    """Line-of-sight phase, (4 pi / wavelength) * (u . l)."""
    le, ln, lu = meta.los
    u = le * disp.east.values + ln * disp.north.values + lu * disp.up.values
    return PhaseGrid(4.0 * math.pi / meta.wavelength * u, meta.with_kind(GridKind.UNWRAPPED), disp.east.mask)


def apply_fracture(phi: PhaseGrid, frac: FractureSpec) -> PhaseGrid:
    """Offset the phase by +/- delta on either side of a straight fracture line."""
    east, north = grid_coordinates(phi.meta, phi.shape)
    side = np.sign((east - frac.anchor[0]) * frac.normal[0] + (north - frac.anchor[1]) * frac.normal[1])
    return phi.with_values(phi.values + frac.delta * side)


def superpose(grids) -> PhaseGrid:
    grids = list(grids)
    if not grids:
        raise DataError("nothing to superpose")
    total = np.array(grids[0].values)
    for g in grids[1:]:
        check_congruent(grids[0], g)
        total = total + g.values
    return grids[0].with_values(total)


# --- Monte Carlo source sampling ---------------------------------------------

_RANGE_FIELDS = ("depth", "strike", "dip", "rake", "slip", "length", "width")


@dataclass(frozen=True)
class SourceSamplerConfig:
    depth: tuple = (500.0, 8000.0)
    strike: tuple = (0.0, 360.0)
    dip: tuple = (30.0, 90.0)
    rake: tuple = (-180.0, 180.0)
    slip: tuple = (0.05, 0.6)
    length: tuple = (2000.0, 10000.0)
    width: tuple = (1500.0, 6000.0)
    # None samples over the scene footprint (with a 15% margin)
    center_east: tuple | None = None
    center_north: tuple | None = None
    p_two_sources: float = 0.3
    p_fracture_given_shallow: float = 0.5
    shallow_depth_threshold: float = 4000.0
    fracture_delta: tuple = (-2.0, 2.0)
    max_fractures: int = 1
    p_surface_breaking: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (list, tuple)):
                if len(v) != 2 or not (v[0] <= v[1]):
                    raise ConfigError(f"range {f.name} must be (min, max) with min <= max, got {v}")
                object.__setattr__(self, f.name, (float(v[0]), float(v[1])))
        for name in ("p_two_sources", "p_fracture_given_shallow", "p_surface_breaking"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {p}")
        lo, hi = self.dip
        if lo <= 0 or hi > 90:
            raise ConfigError(f"dip range must lie in (0, 90], got {self.dip}")
        if self.depth[0] < 0 or self.slip[0] < 0 or self.length[0] <= 0 or self.width[0] <= 0:
            raise ConfigError("depth/slip must be >= 0 and length/width > 0")
        if self.max_fractures < 1:
            raise ConfigError("max_fractures must be >= 1")

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown source sampler keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        return asdict(self)


def _uniform(rng, bounds):
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def sample_sources(cfg: SourceSamplerConfig, seed, meta: GridMeta = None, shape=(256, 256)):
    """Draw one or two fault sources and any fracture lines for a scene.

    Returns ``(sources, fractures)``. The draw order is fixed so the result is
    a pure function of ``seed``.
    """
    rng = make_rng(seed)
    meta = meta or GridMeta()
    h, w = shape
    ext_e, ext_n = w * meta.pixel_spacing[0], h * meta.pixel_spacing[1]
    ce = cfg.center_east or (0.15 * ext_e, 0.85 * ext_e)
    cn = cfg.center_north or (0.15 * ext_n, 0.85 * ext_n)

    n_src = 2 if rng.random() < cfg.p_two_sources else 1
    sources = []
    for _ in range(n_src):
        vals = {name: _uniform(rng, getattr(cfg, name)) for name in _RANGE_FIELDS}
        surface = rng.random() < cfg.p_surface_breaking
        if surface:
            vals["depth"] = 0.0
        elif vals["depth"] == 0:
            vals["depth"] = 1.0
        vals["strike"] %= 360.0
        vals["dip"] = min(max(vals["dip"], 1e-3), 90.0)
        vals["rake"] = (vals["rake"] + 180.0) % 360.0 - 180.0
        sources.append(FaultSource(center_east=_uniform(rng, ce), center_north=_uniform(rng, cn),
                                   surface_breaking=surface, **vals))

    fractures = []
    shallow = any(s.depth < cfg.shallow_depth_threshold for s in sources)
    # always consume the draw so later streams do not depend on the branch
    u = rng.random()
    if shallow and u < cfg.p_fracture_given_shallow:
        for _ in range(int(rng.integers(1, cfg.max_fractures + 1))):
            anchor = (_uniform(rng, (0.0, ext_e)), _uniform(rng, (0.0, ext_n)))
            ang = float(rng.uniform(0.0, 2.0 * math.pi))
            fractures.append(FractureSpec(anchor, (math.cos(ang), math.sin(ang)),
                                          _uniform(rng, cfg.fracture_delta)))
    return sources, fractures


def deformation_phase(sources, fractures, meta: GridMeta, shape) -> PhaseGrid:
    """Superposed LOS phase of all sources with fracture offsets applied."""
    parts = [project_los(okada_displacement(s, meta, shape), meta) for s in sources]
    phi = superpose(parts) if parts else PhaseGrid(np.zeros(shape), meta.with_kind(GridKind.UNWRAPPED))
    for f in fractures:
        phi = apply_fracture(phi, f)
    return phi


def source_to_dict(src: FaultSource):
    return asdict(src)


def fracture_to_dict(frac: FractureSpec):
    return {"anchor": list(frac.anchor), "normal": list(frac.normal), "delta": frac.delta}
