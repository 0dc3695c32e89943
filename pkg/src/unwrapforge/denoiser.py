"""Noise-prediction U-Net eps(x_t, c, t) built on :mod:`unwrapforge.autodiff`."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .diffusion import schedule_from_dict
from .errors import ConfigError, DataError
from .rng import make_rng

# "noise": the last convolution is eps directly.
# "velocity": the last convolution is v and eps = sqrt(1 - a) x_t + sqrt(a) v with
# a = alpha_cum[t], which keeps x0 = sqrt(a) x_t - sqrt(1 - a) v bounded as a -> 0.
HEADS = ("velocity", "noise")


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 32
    depth: int = 3
    time_embed_dim: int = 64
    channel_mult: tuple = (1, 2, 2)
    in_channels: int = 2
    out_channels: int = 1
    head: str = "velocity"  # or "noise"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigError(f"unknown output head {self.head!r}; expected one of {HEADS}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")
        mult = tuple(int(m) for m in self.channel_mult)
        if len(mult) < self.depth:
            mult = mult + (mult[-1],) * (self.depth - len(mult))
        object.__setattr__(self, "channel_mult", mult[: self.depth])

    @property
    def channels(self):
        return [self.base_channels * m for m in self.channel_mult]

    def check_tile(self, h, w):
        f = 2 ** (self.depth - 1)
        if h % f or w % f:
            raise ConfigError(f"tile {h}x{w} not divisible by {f} for depth {self.depth}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})

    def to_dict(self):
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d


def timestep_embedding(t, dim, dtype=np.float64):
    """Sinusoidal embedding with periods spaced geometrically from 1 to 1e4."""
    half = dim // 2
    freqs = np.exp(-math.log(1e4) * np.arange(half) / max(half - 1, 1))
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


class Denoiser:
    """Encoder-decoder with skip connections and per-level timestep biases."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), seed=0, dtype=np.float32, schedule=None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.schedule = None
        self.alpha_cum = None
        if schedule is not None:
            self.use_schedule(schedule)
        rng = make_rng(seed)
        ch = cfg.channels
        E = cfg.time_embed_dim

        def conv(name, cin, cout):
            bound = 1.0 / math.sqrt(9 * cin)
            self._add(f"{name}.w", rng.uniform(-bound, bound, (3, 3, cin, cout)))
            self._add(f"{name}.b", rng.uniform(-bound, bound, (cout,)))

        def dense(name, din, dout):
            bound = 1.0 / math.sqrt(din)
            self._add(f"{name}.w", rng.uniform(-bound, bound, (din, dout)))
            self._add(f"{name}.b", rng.uniform(-bound, bound, (dout,)))

        def block(name, cin, cout):
            conv(f"{name}.conv1", cin, cout)
            dense(f"{name}.temb1", E, cout)
            dense(f"{name}.temb2", cout, cout)
            conv(f"{name}.conv2", cout, cout)

        block("enc0", cfg.in_channels, ch[0])
        for lvl in range(1, cfg.depth):
            conv(f"down{lvl}", ch[lvl - 1], ch[lvl - 1])
            block(f"enc{lvl}", ch[lvl - 1], ch[lvl])
        for lvl in range(cfg.depth - 2, -1, -1):
            conv(f"up{lvl}", ch[lvl + 1], ch[lvl])
            block(f"dec{lvl}", 2 * ch[lvl], ch[lvl])
        conv("out", ch[0], cfg.out_channels)

    def use_schedule(self, schedule):
        """Attach the diffusion schedule the velocity head needs."""
        self.schedule = schedule
        self.alpha_cum = np.asarray(schedule.alpha_cum, dtype=np.float64)

    def _add(self, name, value):
        self.params[name] = ad.parameter(np.asarray(value, dtype=self.dtype), name)

    def parameter_count(self):
        return int(sum(p.data.size for p in self.params.values()))

    def _block(self, name, x, emb):
        p = self.params
        h = ad.conv3x3(x, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"])
        e = ad.silu(ad.linear(emb, p[f"{name}.temb1.w"], p[f"{name}.temb1.b"]))
        e = ad.linear(e, p[f"{name}.temb2.w"], p[f"{name}.temb2.b"])
        h = ad.silu(ad.add_channel_bias(h, e))
        return ad.silu(ad.conv3x3(h, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"]))

    def forward(self, x_t, c, t) -> ad.Tensor:
        """x_t, c: (N, H, W) arrays; t: (N,) timesteps. Returns a (N, H, W, 1) tensor."""
        cfg = self.cfg
        x_t = np.asarray(x_t)
        c = np.asarray(c)
        if x_t.ndim == 2:
            x_t, c = x_t[None], c[None]
        if x_t.shape != c.shape:
            raise ConfigError(f"x_t {x_t.shape} and conditioning {c.shape} differ in shape")
        n, h, w = x_t.shape
        cfg.check_tile(h, w)
        t = np.broadcast_to(np.asarray(t), (n,))
        x = np.stack([x_t, np.nan_to_num(c)], axis=-1).astype(self.dtype)
        emb = ad.Tensor(timestep_embedding(t, cfg.time_embed_dim, self.dtype))
        p = self.params
        h_ = self._block("enc0", ad.Tensor(x), emb)
        skips = [h_]
        for lvl in range(1, cfg.depth):
            h_ = ad.conv3x3(h_, p[f"down{lvl}.w"], p[f"down{lvl}.b"], stride=2)
            h_ = self._block(f"enc{lvl}", h_, emb)
            skips.append(h_)
        for lvl in range(cfg.depth - 2, -1, -1):
            # convolve at the coarse resolution, then nearest-neighbour upsample
            h_ = ad.upsample2(ad.conv3x3(h_, p[f"up{lvl}.w"], p[f"up{lvl}.b"]))
            h_ = self._block(f"dec{lvl}", ad.concat_channels(h_, skips[lvl]), emb)
        out = ad.conv3x3(h_, p["out.w"], p["out.b"])
        if cfg.head == "noise":
            return out
        if self.alpha_cum is None:
            raise ConfigError("the velocity head needs the diffusion schedule (use_schedule)")
        if np.any(t < 0) or np.any(t >= self.alpha_cum.shape[0]):
            raise ConfigError(f"timestep outside the attached schedule [0, {self.alpha_cum.shape[0] - 1}]")
        a = self.alpha_cum[t.astype(np.int64)].reshape(n, 1, 1, 1)
        skip = (np.sqrt(1.0 - a) * x_t[..., None]).astype(self.dtype)
        return ad.add(ad.mul(out, ad.Tensor(np.sqrt(a).astype(self.dtype))), ad.Tensor(skip))

    def predict_noise(self, x_t, c, t):
        """Noise estimate with the same leading shape as ``x_t``."""
        squeeze = np.ndim(x_t) == 2
        with ad.no_grad():
            out = self.forward(x_t, c, t).data[..., 0]
        if not np.isfinite(out).all():
            raise DataError("denoiser produced non-finite output")
        return out[0] if squeeze else out

    __call__ = predict_noise

    def state(self):
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state):
        missing = set(self.params) - set(state)
        if missing:
            raise DataError(f"checkpoint lacks parameters {sorted(missing)[:3]}...")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.data.shape:
                raise DataError(f"parameter {k} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(self.dtype)


def build_denoiser(cfg: DenoiserConfig = DenoiserConfig(), seed=0, dtype=np.float32, schedule=None) -> Denoiser:
    return Denoiser(cfg, seed, dtype, schedule)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params  # dict name -> Tensor
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k in sorted(self.params):
            p = self.params[k]
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if self.lr:
                upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
                p.data = (p.data - upd).astype(p.data.dtype)


# --- checkpoint file ---------------------------------------------------------

CKPT_MAGIC = b"UWCK"
CKPT_VERSION = 1


def save_checkpoint(path, net: Denoiser, meta: dict, optimizer: Adam | None = None):
    """Write parameters (and Adam moments) with a JSON header block."""
    header = dict(meta)
    header["denoiser"] = net.cfg.to_dict()
    if net.schedule is not None:
        header.setdefault("schedule", net.schedule.to_dict())
    if optimizer is not None:
        header["optimizer"] = {"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                               "eps": optimizer.eps, "step": optimizer.step_count}
    block = json.dumps(header, sort_keys=True).encode()
    records = [(k, v) for k, v in sorted(net.state().items())]
    if optimizer is not None:
        records += [(f"adam.m/{k}", optimizer.m[k]) for k in sorted(optimizer.m)]
        records += [(f"adam.v/{k}", optimizer.v[k]) for k in sorted(optimizer.v)]
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(block)), block, struct.pack("<I", len(records))]
    for name, arr in records:
        nb = name.encode()
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path):
    """Return ``(header, tensors)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a UWCK checkpoint")
    try:
        version, blen = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        off = 12
        header = json.loads(buf[off:off + blen].decode())
        off += blen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nl].decode()
            off += nl
            (nd,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{nd}I", buf, off)
            off += 4 * nd
            size = int(np.prod(dims)) if nd else 1
            if off + 4 * size > len(buf):
                raise DataError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).copy()
            off += 4 * size
    except struct.error as exc:
        raise DataError(f"{path}: truncated checkpoint") from exc
    return header, tensors


def load_checkpoint(path, dtype=np.float32):
    """Rebuild the network from a checkpoint. Returns ``(net, header, optimizer)``."""
    header, tensors = read_checkpoint(path)
    schedule = schedule_from_dict(header["schedule"]) if "schedule" in header else None
    net = Denoiser(DenoiserConfig.from_dict(header["denoiser"]), seed=0, dtype=dtype, schedule=schedule)
    net.load_state({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    opt = None
    if "optimizer" in header:
        o = header["optimizer"]
        opt = Adam(net.params, o["lr"], o["beta1"], o["beta2"], o["eps"])
        opt.step_count = o["step"]
        for k in net.params:
            opt.m[k] = tensors[f"adam.m/{k}"].astype(dtype)
            opt.v[k] = tensors[f"adam.v/{k}"].astype(dtype)
    return net, header, opt
