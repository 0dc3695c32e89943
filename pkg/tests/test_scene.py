import math
from pathlib import Path

import numpy as np
import pytest

from unwrapforge.errors import ConfigError
from unwrapforge.raster import GridKind, PhaseGrid, wrap
from unwrapforge.scene import (
    GeneratorConfig,
    audit_dataset,
    compose_scene,
    denormalize,
    generate_dataset,
    generate_scene,
    load_manifest,
    load_scene,
    normalize,
    split_entries,
)

SMALL = GeneratorConfig(shape=(32, 32))


def _zeros(shape=(4, 4)):
    return PhaseGrid(np.zeros(shape))


def _tree(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_compose_zero_and_identity():
    rec = compose_scene(_zeros(), _zeros(), _zeros(), _zeros())
    assert not rec.truth.values.any() and not rec.wrapped.values.any()
    phi = PhaseGrid(np.random.default_rng(0).normal(size=(4, 4)))
    assert np.array_equal(compose_scene(phi, _zeros(), _zeros(), _zeros()).truth.values, phi.values)


def test_compose_three_pi():
    rec = compose_scene(PhaseGrid(np.full((3, 3), 3 * math.pi)), _zeros((3, 3)), _zeros((3, 3)), _zeros((3, 3)))
    assert np.allclose(rec.truth.values, 3 * math.pi)
    assert np.allclose(rec.wrapped.values, -math.pi)
    assert rec.wrapped.kind == GridKind.WRAPPED


def test_normalize_roundtrip():
    phi = PhaseGrid(np.full((2, 2), 20.0))
    assert np.array_equal(normalize(phi, 20.0), np.ones((2, 2)))
    assert np.array_equal(normalize(phi, 1.0), phi.values)
    g = PhaseGrid(np.random.default_rng(1).normal(scale=30, size=(16, 16)))
    back = denormalize(normalize(g, 17.3), 17.3)
    assert np.abs(back.values - g.values).max() < 1e-12
    with pytest.raises(ConfigError):
        normalize(g, 0.0)


def test_generate_scene_invariants():
    rec = generate_scene(SMALL, 3, 0)
    assert np.array_equal(rec.wrapped.values, wrap(rec.truth.values))
    total = sum(rec.components[k].values for k in ("D", "S", "T", "noise"))
    assert np.allclose(total, rec.truth.values, atol=1e-12)
    assert 0.05 <= rec.info["patch_coverage"] <= 0.30
    assert np.abs(wrap(rec.conditioning.values - rec.wrapped.values)).max() < 1e-9
    again = generate_scene(SMALL, 3, 0)
    assert np.array_equal(again.truth.values, rec.truth.values)
    assert not np.array_equal(generate_scene(SMALL, 3, 1).truth.values, rec.truth.values)


def test_dataset_is_deterministic(tmp_path):
    generate_dataset(SMALL, 7, tmp_path / "a", 4)
    generate_dataset(SMALL, 7, tmp_path / "b", 4)
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    assert audit_dataset(tmp_path / "a") == []


def test_dataset_split_counts(tmp_path):
    man = generate_dataset(SMALL, 1, tmp_path, 11)
    assert (man["train"], man["test"], man["total"]) == (10, 1, 11)
    assert len(split_entries(load_manifest(tmp_path), "test")) == 1
    assert man["normalization_scale"] > 0
    rec = load_scene(tmp_path / "scenes" / "000010")
    assert rec.conditioning is not None and rec.info["index"] == 10


def test_full_scale_split_arithmetic():
    # the full configuration keeps 10 of every 11 scenes for training
    count = 11000
    train = (count * 10) // 11
    assert (train, count - train) == (10000, 1000)


def test_generator_config_validation():
    with pytest.raises(ConfigError):
        GeneratorConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        GeneratorConfig.from_dict({"patch_coverage": [0.01, 0.5]})
    with pytest.raises(ConfigError):
        GeneratorConfig.from_dict({"conditioning": "external"})
    cfg = GeneratorConfig.from_dict({"shape": [48, 40], "turbulence_sigma": 1.0})
    assert GeneratorConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_external_conditioning(tmp_path):
    ext = tmp_path / "ext"
    ext.mkdir()
    rec = generate_scene(SMALL, 2, 0, conditioning=False)
    (ext / "000000.raw").write_bytes(rec.truth.values.astype("<f4").tobytes())
    cfg = GeneratorConfig(shape=(32, 32), conditioning="external", external_conditioning_dir=str(ext))
    out = generate_scene(cfg, 2, 0)
    assert np.allclose(out.conditioning.values, rec.truth.values, atol=1e-4)
