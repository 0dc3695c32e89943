import math

import numpy as np
import pytest

from unwrapforge.baseline import (
    align_2pi,
    boundary_circulation,
    compute_residues,
    ingest_conditioning,
    quality_map,
    unwrap_quality_guided,
)
from unwrapforge.errors import DataError
from unwrapforge.raster import TWO_PI, GridKind, GridMeta, PhaseGrid, wrap, wrap_phase, write_grid


def _bump(n=48, amp=15.0, width=10.0):
    y, x = np.mgrid[:n, :n]
    return amp * np.exp(-((x - n / 2) ** 2 + (y - n / 2.5) ** 2) / (2 * width**2))


def test_residues_of_smooth_fields_vanish():
    ramp = np.add.outer(np.arange(10) * 0.7, np.arange(12) * -1.3)
    assert not compute_residues(wrap_phase(PhaseGrid(ramp))).any()
    assert not compute_residues(wrap_phase(PhaseGrid(np.full((5, 5), 2.0)))).any()


def test_single_vortex():
    y, x = np.mgrid[:9, :9]
    vortex = np.arctan2(y - 4.5, x - 4.5)
    res = compute_residues(wrap_phase(PhaseGrid(vortex)))
    assert np.count_nonzero(res) == 1
    assert abs(int(res[4, 4])) == 1
    # brute force: loop sums by hand at every cell
    w = wrap(vortex)
    for i in range(8):
        for j in range(8):
            loop = [w[i, j], w[i, j + 1], w[i + 1, j + 1], w[i + 1, j], w[i, j]]
            s = sum(wrap(b - a) for a, b in zip(loop, loop[1:]))
            assert round(s / TWO_PI) == res[i, j]


def test_residue_charges_sum_to_boundary_circulation():
    rng = np.random.default_rng(0)
    g = wrap_phase(PhaseGrid(rng.uniform(-10, 10, (12, 15))))
    assert compute_residues(g).sum() == round(boundary_circulation(g) / TWO_PI)


def test_quality_constant_and_offset_invariance():
    assert np.array_equal(quality_map(wrap_phase(PhaseGrid(np.full((6, 6), 1.0)))), np.ones((6, 6)))
    rng = np.random.default_rng(1)
    phi = rng.normal(size=(16, 16)).cumsum(axis=1)
    q1 = quality_map(wrap_phase(PhaseGrid(phi)))
    q2 = quality_map(wrap_phase(PhaseGrid(phi + 0.8)))
    assert np.allclose(q1, q2, atol=1e-9)


def test_quality_lower_at_patch_boundary():
    phi = 0.05 * np.add.outer(np.arange(40), np.arange(40)).astype(float)
    phi[10:20, 10:20] += 2.5
    q = quality_map(wrap_phase(PhaseGrid(phi)))
    assert q[10, 15] < q[30, 30]
    assert q[15, 19] < q[30, 30]


def test_itoh_valid_bump_recovered():
    truth = _bump()
    assert np.abs(np.diff(truth, axis=0)).max() < math.pi
    out = unwrap_quality_guided(wrap_phase(PhaseGrid(truth)))
    d = out.values - truth
    assert np.abs(d - d.mean()).max() < 1e-9
    assert out.kind == GridKind.CONDITIONING


def test_constant_field_gives_constant_output():
    out = unwrap_quality_guided(wrap_phase(PhaseGrid(np.full((7, 9), 1.25))))
    assert np.ptp(out.values) == 0.0


def test_output_congruent_with_observation_on_noisy_scene():
    rng = np.random.default_rng(3)
    noisy = _bump() + rng.normal(scale=1.2, size=(48, 48))
    w = wrap_phase(PhaseGrid(noisy))
    out = unwrap_quality_guided(w)
    assert np.array_equal(wrap(out.values), w.values) or np.abs(wrap(out.values - w.values)).max() < 1e-12
    k = (out.values - w.values) / TWO_PI
    assert np.abs(k - np.round(k)).max() < 1e-12


def test_masked_pixels_propagate():
    truth = _bump(20, 6.0, 5.0)
    mask = np.ones((20, 20), bool)
    mask[5:8, 5:8] = False
    g = wrap_phase(PhaseGrid(np.where(mask, truth, np.nan), mask=mask))
    out = unwrap_quality_guided(g)
    assert np.array_equal(out.mask, mask)
    assert np.isnan(out.values[~mask]).all()
    d = out.values[mask] - truth[mask]
    assert np.ptp(d) < 1e-9


def test_ingest_conditioning(tmp_path):
    g = PhaseGrid(np.arange(12, dtype=np.float32).reshape(3, 4).astype(float), GridMeta(kind=GridKind.CONDITIONING))
    write_grid(g, tmp_path / "c.pgrd")
    back = ingest_conditioning(tmp_path / "c.pgrd", (3, 4))
    assert np.array_equal(back.values, g.values)

    raw = tmp_path / "c.raw"
    raw.write_bytes(np.arange(12, dtype="<f4").tobytes())
    assert np.array_equal(ingest_conditioning(raw, (3, 4)).values, g.values)
    with pytest.raises(DataError, match="bytes"):
        ingest_conditioning(raw, (4, 4))
    with pytest.raises(DataError):
        ingest_conditioning(tmp_path / "c.pgrd", (4, 3))


def test_align_2pi():
    rng = np.random.default_rng(4)
    ref = rng.normal(size=(8, 8))
    for k in (-3, 0, 2):
        assert align_2pi(ref - TWO_PI * k + 0.1 * rng.normal(size=(8, 8)), ref) == k
