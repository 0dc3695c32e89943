import numpy as np
import pytest

from unwrapforge import autodiff as ad
from unwrapforge.denoiser import (
    Adam,
    Denoiser,
    DenoiserConfig,
    build_denoiser,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    timestep_embedding,
)
from unwrapforge.diffusion import cosine_schedule
from unwrapforge.errors import ConfigError, DataError

TINY = DenoiserConfig(base_channels=4, depth=2)
SCHED = cosine_schedule(1000)


def tiny_probe_errors(n=50, seed=0):
    """Relative errors of analytic vs central-difference gradients (64-bit)."""
    net = Denoiser(TINY, seed=1, dtype=np.float64, schedule=SCHED)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 8, 8))
    c = rng.standard_normal((2, 8, 8))
    t = np.array([3, 500])
    target = rng.standard_normal((2, 8, 8, 1))

    def loss():
        return ad.weighted_mse(net.forward(x, c, t), target, np.ones(2))

    ad.zero_grad(net.params.values())
    ad.backward(loss())
    names = sorted(net.params)
    errs, h = [], 1e-4
    for _ in range(n):
        p = net.params[names[rng.integers(len(names))]]
        idx = tuple(int(rng.integers(s)) for s in p.data.shape)
        g = p.grad[idx]
        old = p.data[idx]
        p.data[idx] = old + h
        lp = float(loss().data)
        p.data[idx] = old - h
        lm = float(loss().data)
        p.data[idx] = old
        fd = (lp - lm) / (2 * h)
        errs.append(abs(fd - g) / max(abs(fd), abs(g), 1e-8))
    return errs


def test_gradient_of_half_square_norm():
    p = ad.parameter(np.array([1.5, -2.0, 0.25]))
    out = ad.scale(ad.total(ad.mul(p, p)), 0.5)
    ad.backward(out)
    assert np.array_equal(p.grad, p.data)


def test_backward_without_forward_rejected():
    with pytest.raises(RuntimeError):
        ad.backward(ad.parameter(np.ones(3)))


def test_zero_upstream_gradient():
    net = Denoiser(TINY, seed=2, dtype=np.float64, schedule=SCHED)
    x = np.random.default_rng(0).standard_normal((1, 8, 8))
    out = ad.total(net.forward(x, x, np.array([7])))
    ad.backward(out, grad=0.0)
    for p in net.params.values():
        assert p.grad is None or not np.any(p.grad)


def test_finite_difference_probe():
    assert max(tiny_probe_errors(20, seed=3)) < 1e-4


def test_conv_matches_direct_convolution():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 5, 6, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    out = ad.conv3x3(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 5, 6, 3))
    for i in range(5):
        for j in range(6):
            ref[0, i, j] = np.einsum("abc,abcd->d", xp[0, i:i + 3, j:j + 3], w) + b
    assert np.allclose(out, ref, atol=1e-12)
    strided = ad.conv3x3(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride=2).data
    assert np.allclose(strided, ref[:, ::2, ::2], atol=1e-12)


def test_shape_and_determinism():
    net = build_denoiser(TINY, seed=5, schedule=SCHED)
    rng = np.random.default_rng(5)
    for shape in ((1, 8, 8), (3, 16, 12)):
        x = rng.standard_normal(shape).astype(np.float32)
        out = net.predict_noise(x, x, np.full(shape[0], 10))
        assert out.shape == shape
        assert np.isfinite(out).all()
    a = build_denoiser(TINY, seed=5, schedule=SCHED).state()
    b = build_denoiser(TINY, seed=5, schedule=SCHED).state()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_default_parameter_count():
    assert build_denoiser().parameter_count() == 410657
    assert build_denoiser(TINY).parameter_count() == 3173


def test_untrained_output_bounded_and_pure():
    net = build_denoiser(seed=6, schedule=SCHED)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 64, 64)).astype(np.float32)
    c = rng.standard_normal((2, 64, 64)).astype(np.float32)
    t = np.array([1, 1000])
    a = net.predict_noise(x, c, t)
    assert np.isfinite(a).all() and np.abs(a).max() < 100
    assert np.array_equal(a, net.predict_noise(x, c, t))


def test_shift_equivariance_interior():
    net = Denoiser(DenoiserConfig(), seed=3, dtype=np.float64, schedule=SCHED)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 80, 80))
    c = rng.standard_normal((1, 80, 80))
    t = np.array([100])
    a = net.predict_noise(x[:, :64, :64], c[:, :64, :64], t)[0]
    b = net.predict_noise(x[:, 8:72, 8:72], c[:, 8:72, 8:72], t)[0]
    # a[8 + i] and b[i] see the same input; compare 16 px away from every border
    assert np.abs(a[24:48, 24:48] - b[16:40, 16:40]).max() < 1e-5


def test_tile_and_input_validation():
    net = build_denoiser(seed=0, schedule=SCHED)
    with pytest.raises(ConfigError):
        net.predict_noise(np.zeros((1, 30, 30), np.float32), np.zeros((1, 30, 30), np.float32), np.array([1]))
    with pytest.raises(ConfigError):
        DenoiserConfig(time_embed_dim=7)


def test_timestep_embedding():
    e = timestep_embedding(np.array([0, 5]), 8)
    assert e.shape == (2, 8)
    assert np.array_equal(e[0], np.r_[np.zeros(4), np.ones(4)])
    assert e[1, 0] == pytest.approx(np.sin(5.0))
    assert e[1, 3] == pytest.approx(np.sin(5.0 * 1e-4))


def test_adam_first_step_moves_by_lr():
    p = ad.parameter(np.array([1.0, -1.0]))
    p.grad = np.array([0.3, -2.0])
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    # bias-corrected first Adam step is lr * sign(g)
    assert np.allclose(p.data, [0.9, -0.9], atol=1e-7)


def test_checkpoint_roundtrip(tmp_path):
    net = build_denoiser(TINY, seed=8, schedule=SCHED)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 8, 8)).astype(np.float32)
    opt = Adam(net.params, lr=1e-3)
    ad.backward(ad.weighted_mse(net.forward(x, x, np.array([2, 9])), np.zeros((2, 8, 8, 1), np.float32), np.ones(2)))
    opt.step()
    path = tmp_path / "m.uwck"
    save_checkpoint(path, net, {"normalization_scale": 3.5}, opt)
    assert path.read_bytes()[:4] == b"UWCK"
    back, header, opt2 = load_checkpoint(path)
    assert header["normalization_scale"] == 3.5
    assert all(np.array_equal(net.state()[k], back.state()[k]) for k in net.params)
    assert np.array_equal(net.predict_noise(x, x, np.array([4, 4])), back.predict_noise(x, x, np.array([4, 4])))
    assert opt2.step_count == 1
    assert all(np.array_equal(opt.m[k], opt2.m[k]) for k in opt.m)


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.uwck"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(DataError):
        read_checkpoint(bad)
    net = build_denoiser(TINY, seed=0, schedule=SCHED)
    good = tmp_path / "g.uwck"
    save_checkpoint(good, net, {})
    bad.write_bytes(good.read_bytes()[:-10])
    with pytest.raises(DataError):
        read_checkpoint(bad)


def test_velocity_head_matches_noise_head_algebra():
    noise = Denoiser(DenoiserConfig(base_channels=4, depth=2, head="noise"), seed=9, dtype=np.float64)
    vel = Denoiser(TINY, seed=9, dtype=np.float64, schedule=SCHED)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 8, 8))
    c = rng.standard_normal((2, 8, 8))
    t = np.array([1, 1000])
    raw = noise.predict_noise(x, c, t)
    a = SCHED.alpha_cum[t][:, None, None]
    want = np.sqrt(1 - a) * x + np.sqrt(a) * raw
    assert np.allclose(vel.predict_noise(x, c, t), want, rtol=0, atol=1e-12)
    # the implied clean estimate stays bounded where alpha_cum -> 0
    x0 = (x - np.sqrt(1 - a) * vel.predict_noise(x, c, t)) / np.sqrt(a)
    assert np.allclose(x0, np.sqrt(a) * x - np.sqrt(1 - a) * raw, atol=1e-6)


def test_velocity_head_needs_schedule():
    net = Denoiser(TINY, seed=0)
    x = np.zeros((1, 8, 8), np.float32)
    with pytest.raises(ConfigError, match="schedule"):
        net.predict_noise(x, x, np.array([3]))
    net.use_schedule(cosine_schedule(10))
    with pytest.raises(ConfigError):
        net.predict_noise(x, x, np.array([11]))
    with pytest.raises(ConfigError):
        DenoiserConfig(head="x0")
    with pytest.raises(ConfigError):
        DenoiserConfig.from_dict({"width": 3})


def test_checkpoint_carries_schedule(tmp_path):
    sched = cosine_schedule(50, weighting="velocity")
    net = build_denoiser(TINY, seed=1, schedule=sched)
    save_checkpoint(tmp_path / "m.uwck", net, {})
    back, header, _ = load_checkpoint(tmp_path / "m.uwck")
    assert header["schedule"] == {"T": 50, "kind": "cosine", "weighting": "velocity"}
    assert np.array_equal(back.alpha_cum, sched.alpha_cum)
