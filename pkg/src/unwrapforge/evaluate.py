"""NRMSE, rewrap consistency and JSON evaluation reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .raster import PhaseGrid, check_congruent, read_grid, wrap
from .scene import load_manifest, split_entries


def nrmse(pred: PhaseGrid, ref: PhaseGrid, remove_offset=True) -> float:
    """Percent RMSE over valid pixels, normalised by the reference's dynamic range."""
    if pred.shape != ref.shape:
        raise DataError(f"prediction {pred.shape} and reference {ref.shape} differ in shape")
    valid = pred.valid & ref.valid & np.isfinite(pred.values) & np.isfinite(ref.values)
    if not valid.any():
        raise DataError("no valid pixels to compare")
    r = ref.values[valid]
    rng = float(r.max() - r.min())
    if rng <= 0:
        raise DataError("reference has zero dynamic range")
    err = pred.values[valid] - r
    if remove_offset:
        err = err - err.mean()
    return 100.0 * float(np.sqrt(np.mean(err * err))) / rng


def rewrap_rms(pred: PhaseGrid, wrapped: PhaseGrid) -> float:
    check_congruent(pred, wrapped)
    valid = pred.valid & np.isfinite(pred.values)
    res = wrap(pred.values[valid] - wrapped.values[valid])
    return float(np.sqrt(np.mean(np.square(res))))


@dataclass
class EvalReport:
    mode: str
    scene_count: int
    per_scene: dict  # scene index (str) -> NRMSE percent
    mean_nrmse: float | None
    median_nrmse: float | None
    rewrap_rms: float | None
    remove_offset: bool
    mean_nrmse_other: float | None = None  # same scenes under the opposite offset convention
    missing: list = field(default_factory=list)
    complete: bool = True
    config: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def prediction_path(pred_dir, index):
    return Path(pred_dir) / f"{index:06d}.pgrd"


def evaluate_run(data_root, pred_dir, mode, split="test", remove_offset=True, config=None) -> EvalReport:
    """Score every prediction of a split against the truth and the observation."""
    man = load_manifest(data_root)
    per_scene, other, res_sq, res_n, missing = {}, [], 0.0, 0, []
    for e in split_entries(man, split):
        path = prediction_path(pred_dir, e["index"])
        if not path.exists():
            missing.append(e["index"])
            continue
        scene = Path(data_root) / e["path"]
        truth = read_grid(scene / "truth.pgrd")
        wrapped = read_grid(scene / "wrapped.pgrd")
        pred = read_grid(path)
        per_scene[f"{e['index']:06d}"] = nrmse(pred, truth, remove_offset)
        other.append(nrmse(pred, truth, not remove_offset))
        r = rewrap_rms(pred, wrapped)
        res_sq += r * r
        res_n += 1
    vals = list(per_scene.values())
    return EvalReport(
        mode=mode,
        scene_count=len(vals),
        per_scene=per_scene,
        mean_nrmse=float(np.mean(vals)) if vals else None,
        median_nrmse=float(np.median(vals)) if vals else None,
        rewrap_rms=float(np.sqrt(res_sq / res_n)) if res_n else None,
        remove_offset=remove_offset,
        mean_nrmse_other=float(np.mean(other)) if other else None,
        missing=missing,
        complete=not missing,
        config=config or {},
    )


def format_table(reports) -> str:
    width = max([12] + [len(r.mode) + 2 for r in reports])
    lines = [f"{'mode':<{width}}{'scenes':>8}{'mean %':>12}{'median %':>12}{'rewrap rms':>12}"]

    def fmt(v, spec, w):
        return format(v, spec) if v is not None else "-".rjust(w)

    for r in reports:
        lines.append(f"{r.mode:<{width}}{r.scene_count:>8}{fmt(r.mean_nrmse, '12.3f', 12)}"
                     f"{fmt(r.median_nrmse, '12.3f', 12)}{fmt(r.rewrap_rms, '12.2e', 12)}"
                     + ("" if r.complete else f"  (missing {len(r.missing)})"))
    return "\n".join(lines)
