import math

import numpy as np
import pytest

from okada_oracle import okada85, okada_enu
from unwrapforge.errors import DataError
from unwrapforge.okada import (
    DisplacementField,
    FaultSource,
    FractureSpec,
    SourceSamplerConfig,
    apply_fracture,
    deformation_phase,
    okada_displacement,
    okada_surface,
    project_los,
    sample_sources,
    superpose,
)
from unwrapforge.raster import GridKind, GridMeta, PhaseGrid

CHECKPOINT_SOURCE = FaultSource(center_east=0.0, center_north=0.0, depth=3000.0, strike=0.0, dip=70.0,
                                rake=0.0, slip=1.0, length=10000.0, width=5000.0)

# (east, north) -> (u_e, u_n, u_u) in meters; frozen from tests/okada_oracle.py, which
# reproduces the published checkpoint table for the half-space solution (see below)
CHECKPOINT = {
    (1500.0, 2500.0): (0.01647901229360238, 0.05876277432301835, 0.03569818766237139),
    (-3000.0, 4000.0): (0.02323476184900114, -0.028305023641148175, -0.011072524485815138),
    (5000.0, -6000.0): (-0.058015882083882864, 0.06410570509809332, -0.0474640542677604),
    (12000.0, 8000.0): (0.03145482461801363, 0.025604794844926504, 0.007677650079836319),
    (-800.0, -9000.0): (-0.01161590092619652, 0.005919484018759746, -0.008543336554641484),
}


def _random_source(rng, **over):
    kw = dict(center_east=rng.uniform(-5000, 5000), center_north=rng.uniform(-5000, 5000),
              depth=rng.uniform(500, 8000), strike=rng.uniform(0, 360), dip=rng.uniform(10, 90),
              rake=rng.uniform(-180, 180), slip=rng.uniform(0.1, 2), length=rng.uniform(2000, 10000),
              width=rng.uniform(1500, 6000))
    kw.update(over)
    return FaultSource(**kw)


def test_oracle_reproduces_published_table():
    # x=2, y=3, d=4, dip 70, L=3, W=2 (unit slip)
    ss = okada85(2, 3, 4, 70, 3, 2, 1, 0)
    ds = okada85(2, 3, 4, 70, 3, 2, 0, 1)
    assert ss == pytest.approx((-8.689e-3, -4.298e-3, -2.747e-3), abs=5e-7)
    assert ds == pytest.approx((-4.682e-3, -3.527e-2, -3.564e-2), abs=5e-6)


def test_checkpoint_points():
    pts = np.array(list(CHECKPOINT))
    ue, un, uu = okada_surface(CHECKPOINT_SOURCE, pts[:, 0], pts[:, 1])
    got = np.stack([ue, un, uu], axis=1)
    want = np.array(list(CHECKPOINT.values()))
    assert np.abs(got - want).max() < 1e-8


def test_matches_oracle_on_random_sources():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(40):
        src = _random_source(rng, dip=float(rng.choice([rng.uniform(10, 89), 90.0])))
        e, n = rng.uniform(-30000, 30000, 2)
        got = np.array([c.item() for c in okada_surface(src, e, n)])
        want = np.array(okada_enu(e, n, src.center_east, src.center_north, src.depth, src.strike, src.dip,
                                  src.rake, src.slip, src.length, src.width))
        worst = max(worst, np.abs(got - want).max())
    assert worst < 1e-10


def test_zero_slip_is_zero():
    meta = GridMeta((500.0, 500.0))
    disp = okada_displacement(CHECKPOINT_SOURCE.with_slip(0.0), meta, (16, 16))
    assert all(np.array_equal(c.values, np.zeros((16, 16))) for c in disp.components())
    ue, un, uu = okada_surface(CHECKPOINT_SOURCE.with_slip(0.0), np.array([100.0]), np.array([-50.0]))
    assert not (ue.any() or un.any() or uu.any())


def test_linear_in_slip():
    rng = np.random.default_rng(7)
    e, n = rng.uniform(-20000, 20000, (2, 200))
    for _ in range(5):
        src = _random_source(rng)
        a = np.array(okada_surface(src, e, n))
        b = np.array(okada_surface(src.with_slip(2 * src.slip), e, n))
        assert np.abs(b - 2 * a).max() <= 1e-12 * np.abs(b).max()


def test_two_source_superposition():
    rng = np.random.default_rng(8)
    meta = GridMeta((400.0, 400.0))
    a, b = _random_source(rng), _random_source(rng)
    pa = project_los(okada_displacement(a, meta, (24, 24)), meta)
    pb = project_los(okada_displacement(b, meta, (24, 24)), meta)
    joint = deformation_phase([a, b], [], meta, (24, 24))
    summed = superpose([pa, pb])
    assert np.abs(joint.values - summed.values).max() <= 1e-12 * np.abs(joint.values).max()


def test_far_field_decay():
    src = _random_source(np.random.default_rng(9), center_east=0.0, center_north=0.0)
    ang = np.linspace(0, 2 * math.pi, 360, endpoint=False)
    means = []
    for r in (30e3, 60e3, 120e3, 240e3):
        u = np.array(okada_surface(src, r * np.cos(ang), r * np.sin(ang)))
        means.append(np.sqrt((u ** 2).sum(axis=0)).mean())
    assert all(a > b for a, b in zip(means, means[1:]))
    # point-source far field falls off as 1/r^2
    assert means[-2] / means[-1] == pytest.approx(4.0, rel=0.1)


def test_edge_points_are_finite():
    # points exactly on the surface trace of a vertical, surface-breaking fault
    src = FaultSource(0.0, 0.0, 0.0, 0.0, 90.0, 0.0, 1.0, 4000.0, 2000.0, surface_breaking=True)
    ue, un, uu = okada_surface(src, np.zeros(5), np.linspace(-3000, 3000, 5))
    assert np.isfinite(ue).all() and np.isfinite(un).all() and np.isfinite(uu).all()


def test_fault_validation():
    with pytest.raises(DataError):
        FaultSource(0, 0, 0.0, 0, 45, 0, 1, 1000, 1000)
    with pytest.raises(DataError):
        FaultSource(0, 0, 1000, 0, 0, 0, 1, 1000, 1000)
    with pytest.raises(DataError):
        FractureSpec((0, 0), (1.0, 1.0), 1.0)


def _disp(ue, un, uu, meta, shape=(3, 3)):
    m = meta.with_kind(GridKind.DISPLACEMENT)
    return DisplacementField(*(PhaseGrid(np.full(shape, v), m) for v in (ue, un, uu)))


def test_project_los_cases():
    meta = GridMeta(los=(0.0, 0.0, 1.0), wavelength=0.0556)
    phi = project_los(_disp(0.0, 0.0, 0.01, meta), meta)
    assert np.allclose(phi.values, 4 * math.pi * 0.01 / 0.0556)
    # 0.04 pi / 0.0556 evaluated by hand
    assert phi.values[0, 0] == pytest.approx(2.26014, abs=5e-6)
    # perpendicular motion is invisible
    assert np.array_equal(project_los(_disp(0.3, -0.2, 0.0, meta), meta).values, np.zeros((3, 3)))
    m2 = GridMeta()
    k = m2.wavelength / (4 * math.pi)
    one = project_los(_disp(*(c * k for c in m2.los), m2), m2)
    assert np.allclose(one.values, 1.0, atol=1e-12)


def test_apply_fracture():
    meta = GridMeta((1.0, 1.0))
    zero = PhaseGrid(np.zeros((3, 5)), meta)
    frac = FractureSpec(anchor=(2.5, 1.5), normal=(1.0, 0.0), delta=1.0)
    out = apply_fracture(zero, frac).values
    assert np.array_equal(out[:, :2], -np.ones((3, 2)))
    assert np.array_equal(out[:, 3:], np.ones((3, 2)))
    assert np.array_equal(out[:, 2], np.zeros(3))
    assert np.array_equal(apply_fracture(zero, FractureSpec((2.5, 1.5), (1.0, 0.0), 0.0)).values, zero.values)


def test_superpose_identities():
    rng = np.random.default_rng(3)
    phi = PhaseGrid(rng.normal(size=(4, 4)))
    assert np.array_equal(superpose([phi, phi.with_values(np.zeros((4, 4)))]).values, phi.values)
    assert np.array_equal(superpose([phi, phi.with_values(-phi.values)]).values, np.zeros((4, 4)))


def test_sampler_boundaries_and_determinism():
    one = SourceSamplerConfig(p_two_sources=0.0)
    none = SourceSamplerConfig(p_fracture_given_shallow=0.0, p_two_sources=1.0)
    for seed in range(30):
        assert len(sample_sources(one, seed)[0]) == 1
        srcs, fr = sample_sources(none, seed)
        assert len(srcs) == 2 and fr == []
    cfg = SourceSamplerConfig()
    assert sample_sources(cfg, 42) == sample_sources(cfg, 42)
    counts = [len(sample_sources(cfg, s)[0]) for s in range(200)]
    assert 0.2 < counts.count(2) / 200 < 0.4
    assert SourceSamplerConfig.from_dict(cfg.to_dict()) == cfg
