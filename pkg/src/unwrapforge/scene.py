"""Scene composition and reproducible synthetic datasets."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .atmosphere import (
    PatchyNoiseParams,
    StratifiedParams,
    TurbulenceParams,
    fractal_dem,
    sample_measurement_noise,
    sample_patchy_noise,
    sample_turbulence,
    stratified_delay,
)
from .baseline import ingest_conditioning, quality_map, unwrap_quality_guided
from .errors import ConfigError, DataError, UnwrapForgeError
from .okada import (
    SourceSamplerConfig,
    deformation_phase,
    fracture_to_dict,
    sample_sources,
    source_to_dict,
)
from .raster import (
    GridKind,
    GridMeta,
    PhaseGrid,
    check_congruent,
    read_grid,
    rewrap_residual,
    wrap_phase,
    write_grid,
)
from . import rng as streams

log = logging.getLogger(__name__)

GENERATOR_VERSION = f"unwrapforge-{__version__}"
COMPONENTS = ("D", "S", "T", "noise")
SCENE_FILES = ("truth", "wrapped", "cond") + COMPONENTS


@dataclass(eq=False)
class SceneRecord:
    truth: PhaseGrid
    wrapped: PhaseGrid
    conditioning: PhaseGrid | None
    components: dict
    seed: int | None = None
    info: dict = field(default_factory=dict)


def compose_scene(D: PhaseGrid, S: PhaseGrid, T: PhaseGrid, noise: PhaseGrid) -> SceneRecord:
    for name, g in (("S", S), ("T", T), ("noise", noise)):
        check_congruent(D, g, f"components D and {name}")
    truth = D.with_values(D.values + S.values + T.values + noise.values, GridKind.UNWRAPPED)
    return SceneRecord(truth, wrap_phase(truth), None, {"D": D, "S": S, "T": T, "noise": noise})


def normalize(phi: PhaseGrid, scale: float) -> np.ndarray:
    if not scale > 0:
        raise ConfigError(f"normalization scale must be positive, got {scale}")
    return phi.values / scale


def denormalize(grid, scale: float, meta: GridMeta | None = None, mask=None) -> PhaseGrid:
    if not scale > 0:
        raise ConfigError(f"normalization scale must be positive, got {scale}")
    return PhaseGrid(np.asarray(grid, dtype=np.float64) * scale,
                     (meta or GridMeta()).with_kind(GridKind.UNWRAPPED), mask)


# --- generator configuration ---------------------------------------------------

def _as_range(v):
    if isinstance(v, (int, float)):
        return (float(v), float(v))
    lo, hi = v
    if lo > hi:
        raise ConfigError(f"range must be (min, max) with min <= max, got {v}")
    return (float(lo), float(hi))


@dataclass
class GeneratorConfig:
    shape: tuple = (64, 64)
    pixel_spacing: tuple = (200.0, 200.0)
    wavelength: float = 0.0556
    los: tuple | None = None
    sources: SourceSamplerConfig = field(default_factory=SourceSamplerConfig)
    # stratified: per-scene coefficient (rad/m) and DEM relief (m)
    stratified_mode: str = "synthetic_dem"
    stratified_coefficient: tuple = (-0.0015, 0.0015)
    relief: tuple = (0.0, 2000.0)
    ztd_path: str | None = None
    ztd_origin: tuple = (0.0, 0.0)
    turbulence_sigma: tuple = (0.5, 1.5)
    turbulence_corr_length: float = 5000.0
    patch_coverage: tuple = (0.05, 0.30)
    patch_smoothing: float = 3.0
    measurement_std: tuple = (0.0, 0.3)
    conditioning: str = "builtin"  # or "external"
    external_conditioning_dir: str | None = None
    train_count: int | None = None

    def __post_init__(self):
        if isinstance(self.sources, dict):
            self.sources = SourceSamplerConfig.from_dict(self.sources)
        self.shape = tuple(int(s) for s in self.shape)
        self.pixel_spacing = tuple(float(s) for s in self.pixel_spacing)
        for name in ("stratified_coefficient", "relief", "turbulence_sigma", "patch_coverage", "measurement_std"):
            setattr(self, name, _as_range(getattr(self, name)))
        if len(self.shape) != 2 or min(self.shape) < 1:
            raise ConfigError(f"bad scene shape {self.shape}")
        if self.stratified_mode not in ("synthetic_dem", "external_ztd"):
            raise ConfigError(f"unknown stratified mode {self.stratified_mode!r}")
        if self.stratified_mode == "external_ztd" and not self.ztd_path:
            raise ConfigError("external_ztd mode needs ztd_path")
        if self.conditioning not in ("builtin", "external"):
            raise ConfigError(f"unknown conditioning source {self.conditioning!r}")
        if self.conditioning == "external" and not self.external_conditioning_dir:
            raise ConfigError("external conditioning needs external_conditioning_dir")
        PatchyNoiseParams(coverage=self.patch_coverage[0], smoothing_scale=self.patch_smoothing)
        PatchyNoiseParams(coverage=self.patch_coverage[1], smoothing_scale=self.patch_smoothing)
        self.meta()

    def meta(self) -> GridMeta:
        kw = {"pixel_spacing": self.pixel_spacing, "wavelength": self.wavelength}
        if self.los is not None:
            kw["los"] = tuple(self.los)
        return GridMeta(**kw)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, UnwrapForgeError):
                raise
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        d = asdict(self)
        d["sources"] = self.sources.to_dict()
        return json.loads(json.dumps(d))


def scene_seed(master_seed, index):
    """64-bit identifier of a scene's stream (recorded in the sidecar)."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1, 2**32], dtype=np.uint64))


def generate_scene(cfg: GeneratorConfig, master_seed, index, conditioning=True) -> SceneRecord:
    """Simulate one scene; every random draw comes from the (master_seed, index) stream."""
    meta = cfg.meta()
    shape = cfg.shape
    sub = lambda k: np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index), k))
    par = streams.make_rng(master_seed, index, streams.STREAM_SCENE_PARAMS)
    draw = lambda r: float(par.uniform(*r)) if r[1] > r[0] else r[0]
    k_strat = draw(cfg.stratified_coefficient)
    sigma = draw(cfg.turbulence_sigma)
    coverage = draw(cfg.patch_coverage)
    meas_std = draw(cfg.measurement_std)

    sources, fractures = sample_sources(cfg.sources, _seed_int(sub(streams.STREAM_SOURCES)), meta, shape)
    D = deformation_phase(sources, fractures, meta, shape)

    if cfg.stratified_mode == "synthetic_dem":
        dem = fractal_dem(shape, _seed_int(sub(streams.STREAM_STRATIFIED)), cfg.relief)
        S = stratified_delay(StratifiedParams("synthetic_dem", k_strat, elevation=dem), meta, shape)
    else:
        ztd = read_grid(cfg.ztd_path)
        S = stratified_delay(StratifiedParams("external_ztd", ztd=ztd, ztd_origin=tuple(cfg.ztd_origin)), meta, shape)

    T = sample_turbulence(TurbulenceParams(sigma, cfg.turbulence_corr_length), shape, meta.pixel_spacing,
                          _seed_int(sub(streams.STREAM_TURBULENCE)), meta)
    patchy, patch_mask = sample_patchy_noise(
        PatchyNoiseParams(coverage=coverage, smoothing_scale=cfg.patch_smoothing), shape,
        _seed_int(sub(streams.STREAM_PATCHY)), meta)
    meas = sample_measurement_noise(meas_std, shape, _seed_int(sub(streams.STREAM_MEASUREMENT)), meta)
    noise = patchy.with_values(patchy.values + meas.values)

    rec = compose_scene(D, S, T, noise)
    rec.seed = scene_seed(master_seed, index)
    rec.info = {
        "index": int(index),
        "sources": [source_to_dict(s) for s in sources],
        "fractures": [fracture_to_dict(f) for f in fractures],
        "stratified_coefficient": k_strat,
        "turbulence_sigma": sigma,
        "patch_coverage": coverage,
        "realized_patch_fraction": float(patch_mask.mean()),
        "measurement_std": meas_std,
    }
    if conditioning:
        if cfg.conditioning == "builtin":
            rec.conditioning = unwrap_quality_guided(rec.wrapped, quality_map(rec.wrapped))
        else:
            path = Path(cfg.external_conditioning_dir) / f"{index:06d}.pgrd"
            if not path.exists():
                path = path.with_suffix(".raw")
            rec.conditioning = ingest_conditioning(path, shape, meta)
    return rec


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def scene_dir(root, index) -> Path:
    return Path(root) / "scenes" / f"{index:06d}"


def write_scene(rec: SceneRecord, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_grid(rec.truth, directory / "truth.pgrd")
    write_grid(rec.wrapped, directory / "wrapped.pgrd")
    if rec.conditioning is not None:
        write_grid(rec.conditioning, directory / "cond.pgrd")
    for name in COMPONENTS:
        write_grid(rec.components[name], directory / f"{name}.pgrd")
    meta = {"seed": rec.seed, "components": list(COMPONENTS), "generator_version": GENERATOR_VERSION}
    meta.update(rec.info)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_scene(directory) -> SceneRecord:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
        comps = {name: read_grid(directory / f"{name}.pgrd") for name in COMPONENTS}
        cond_path = directory / "cond.pgrd"
        cond = read_grid(cond_path) if cond_path.exists() else None
        rec = SceneRecord(read_grid(directory / "truth.pgrd"), read_grid(directory / "wrapped.pgrd"),
                          cond, comps, meta.get("seed"), meta)
    except FileNotFoundError as exc:
        raise DataError(f"incomplete scene directory {directory}: {exc}") from exc
    return rec


def generate_dataset(cfg: GeneratorConfig, master_seed, out_dir, count, train_count=None) -> dict:
    """Write ``count`` scenes plus ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise DataError(f"output directory {out_dir} is not writable")
    if train_count is None:
        train_count = cfg.train_count if cfg.train_count is not None else (count * 10) // 11
    if not 0 <= train_count <= count:
        raise ConfigError(f"train_count {train_count} outside [0, {count}]")

    entries, skipped = [], []
    for index in range(count):
        try:
            rec = generate_scene(cfg, master_seed, index)
        except UnwrapForgeError as exc:
            log.warning("scene %d skipped: %s", index, exc)
            skipped.append({"index": index, "reason": str(exc)})
            continue
        write_scene(rec, scene_dir(out_dir, index))
        entries.append({
            "index": index,
            "path": f"scenes/{index:06d}",
            "split": "train" if index < train_count else "test",
        })
        log.debug("scene %d written", index)

    scale = normalization_scale(out_dir, [e for e in entries if e["split"] == "train"])
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "master_seed": int(master_seed),
        "total": count,
        "train": train_count,
        "test": count - train_count,
        "normalization_scale": scale,
        "scenes": entries,
        "skipped": skipped,
        "config": cfg.to_dict(),
    }
    write_manifest(manifest, out_dir)
    return manifest


def normalization_scale(root, entries, quantile=99.0) -> float:
    """99th percentile of |truth| over the given scenes (1.0 when empty)."""
    if not entries:
        return 1.0
    vals = [np.abs(read_grid(Path(root) / e["path"] / "truth.pgrd").values).ravel() for e in entries]
    scale = float(np.percentile(np.concatenate(vals), quantile))
    return scale if scale > 0 else 1.0


def write_manifest(manifest, root):
    Path(root, "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json in {root}")
    man = json.loads(path.read_text())
    if man["train"] + man["test"] != man["total"]:
        raise DataError("manifest split counts do not add up")
    return man


def split_entries(manifest, split):
    return [e for e in manifest["scenes"] if e["split"] == split]


def audit_dataset(root, rtol=1e-5) -> list:
    """Check every scene loads, is congruent and satisfies the scene invariants.

    Returns a list of problems (empty when the dataset is sound). Stored
    values are float32, so identities are checked at float32 tolerance.
    """
    man = load_manifest(root)
    problems = []
    for e in man["scenes"]:
        try:
            rec = load_scene(Path(root) / e["path"])
        except UnwrapForgeError as exc:
            problems.append(f"{e['path']}: {exc}")
            continue
        grids = [rec.truth, rec.wrapped] + [rec.components[c] for c in COMPONENTS]
        if rec.conditioning is not None:
            grids.append(rec.conditioning)
        try:
            for g in grids[1:]:
                check_congruent(grids[0], g)
        except DataError as exc:
            problems.append(f"{e['path']}: {exc}")
            continue
        total = sum(rec.components[c].values for c in COMPONENTS)
        tol = rtol * (1.0 + np.abs(rec.truth.values).max())
        if np.abs(total - rec.truth.values).max() > tol * 4:
            problems.append(f"{e['path']}: truth != D + S + T + noise")
        res = rewrap_residual(rec.truth, rec.wrapped).values
        if np.nanmax(np.abs(res)) > tol:
            problems.append(f"{e['path']}: wrapped != wrap(truth)")
        if rec.conditioning is not None:
            cres = rewrap_residual(rec.conditioning, rec.wrapped).values
            if np.nanmax(np.abs(cres)) > tol:
                problems.append(f"{e['path']}: conditioning does not rewrap to the observation")
    return problems
