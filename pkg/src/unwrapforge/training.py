"""Training loop for the conditional noise predictor."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .baseline import align_2pi
from .denoiser import Adam, Denoiser, save_checkpoint
from .diffusion import DiffusionSchedule, draw_training_batch
from .errors import ConfigError, DataError, NumericError
from .raster import TWO_PI
from .rng import make_rng
from .scene import load_manifest, load_scene, split_entries

log = logging.getLogger(__name__)

EPOCH_STREAM = 1  # rng path (seed, EPOCH_STREAM, epoch) for the scene shuffle
TIMESTEP_STREAM = 2  # rng path for the timestep sequence offset
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch: int = 4
    steps: int = 2000
    seed: int = 0
    log_every: int = 100
    lr_decay: str = "cosine"  # or "constant"
    timesteps: str = "stratified"  # or "independent"
    min_lr_frac: float = 0.05
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if self.lr < 0 or self.batch < 1 or self.steps < 0:
            raise ConfigError("need lr >= 0, batch >= 1, steps >= 0")
        if self.lr_decay not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr_decay {self.lr_decay!r}")
        if self.timesteps not in ("stratified", "independent"):
            raise ConfigError(f"unknown timesteps {self.timesteps!r}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def lr_at(self, step):
        if self.lr_decay == "constant" or self.steps <= 1:
            return self.lr
        frac = step / (self.steps - 1)
        return self.lr * (self.min_lr_frac + (1 - self.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))


def aligned_target(truth, cond):
    """Truth shifted by the 2 pi multiple that best matches the conditioning.

    The conditioning is only defined up to a global 2 pi k, so the network is
    trained against the representative of the truth nearest to it.
    """
    valid = np.isfinite(cond) & np.isfinite(truth)
    return truth + TWO_PI * align_2pi(truth, cond, valid)


def load_training_arrays(root, split="train", dtype=np.float32):
    """Normalised (x0, c) stacks for a manifest split, plus the scale."""
    man = load_manifest(root)
    scale = float(man["normalization_scale"])
    entries = split_entries(man, split)
    if not entries:
        raise DataError(f"manifest split {split!r} is empty")
    x0, cs = [], []
    for e in entries:
        rec = load_scene(Path(root) / e["path"])
        if rec.conditioning is None:
            raise DataError(f"scene {e['path']} has no conditioning")
        c = rec.conditioning.values
        x0.append(np.nan_to_num(aligned_target(rec.truth.values, c)) / scale)
        cs.append(np.nan_to_num(c) / scale)
    return np.stack(x0).astype(dtype), np.stack(cs).astype(dtype), scale


def batch_indices(seed, step, bsz, n):
    """Scene indices for ``step``: positions step*bsz.. of the concatenated epoch shuffles."""
    pos = np.arange(step * bsz, (step + 1) * bsz)
    epochs = pos // n
    out = np.empty(bsz, np.int64)
    for e in np.unique(epochs):
        perm = make_rng(seed, EPOCH_STREAM, int(e)).permutation(n)
        sel = epochs == e
        out[sel] = perm[pos[sel] % n]
    return np.sort(out)


def train(net: Denoiser, x0, cond, sched: DiffusionSchedule, cfg: TrainConfig, optimizer=None,
          start_step=0, progress=None):
    """Optimise ``net`` in place; returns ``(optimizer, loss_trace)``.

    Batches walk through a fresh shuffle of the scenes each epoch.
    Stratified timesteps take their offset from a golden-ratio sequence
    over steps, so any run of steps covers [1, T] evenly. Noise comes from
    the stream ``(seed, step)``. A run is reproducible and resumable.
    """
    net.use_schedule(sched)
    params = net.params
    opt = optimizer or Adam(params, lr=cfg.lr)
    n = x0.shape[0]
    bsz = min(cfg.batch, n)
    stratified = cfg.timesteps == "stratified"
    offset = make_rng(cfg.seed, TIMESTEP_STREAM).random()
    trace = []
    first = None
    over = 0
    for step in range(start_step, cfg.steps):
        rng = make_rng(cfg.seed, step)
        idx = batch_indices(cfg.seed, step, bsz, n)
        xb, cb = x0[idx], cond[idx]
        if stratified:
            t, eps, xt = draw_training_batch(xb, rng, sched, True, (offset + step * GOLDEN) % 1.0)
        else:
            t, eps, xt = draw_training_batch(xb, rng, sched)
        out = net.forward(xt, cb, t)
        loss = ad.weighted_mse(out, eps[..., None], sched.weight(t))
        ad.zero_grad(params.values())
        ad.backward(loss)
        opt.lr = cfg.lr_at(step)
        opt.step()
        val = float(loss.data)
        if not math.isfinite(val):
            raise NumericError(f"non-finite loss at step {step}")
        trace.append(val)
        if first is None:
            first = val
        over = over + 1 if val > cfg.divergence_factor * first else 0
        if over >= cfg.divergence_patience:
            raise NumericError(f"training diverged: loss above {cfg.divergence_factor}x initial "
                               f"for {over} steps (step {step})")
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            recent = trace[-cfg.log_every:]
            log.info("step %d loss %.5f", step + 1, sum(recent) / len(recent))
            if progress:
                progress(step + 1, sum(recent) / len(recent))
    return opt, trace


def window_means(trace, window=200):
    return [float(np.mean(trace[i:i + window])) for i in range(0, len(trace) - window + 1, window)]


def train_from_dataset(root, out_path, net: Denoiser, sched: DiffusionSchedule, cfg: TrainConfig, progress=None):
    x0, cond, scale = load_training_arrays(root, dtype=net.dtype)
    opt, trace = train(net, x0, cond, sched, cfg, progress=progress)
    meta = {"step": cfg.steps, "normalization_scale": scale, "schedule": sched.to_dict(),
            "train": asdict(cfg), "tile": list(x0.shape[1:])}
    save_checkpoint(out_path, net, meta, opt)
    return trace
