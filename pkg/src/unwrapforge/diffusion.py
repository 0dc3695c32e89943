"""Cosine variance schedule, forward noising and the DDIM reverse sampler.

Indexing: ``alpha_cum[t]`` for t = 0..T with ``alpha_cum[0] = 1`` so a step to
t = 0 lands on the clean estimate. ``alpha_cum`` is the cumulative product of
``1 - beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

COSINE_OFFSET = 0.008
MAX_BETA = 0.999
WEIGHTINGS = ("uniform", "velocity")
VELOCITY_WEIGHT_CAP = 1e4


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    T: int
    beta: np.ndarray  # beta[t], t = 1..T (beta[0] unused, 0)
    alpha_cum: np.ndarray  # length T + 1
    weights: np.ndarray | None = None  # optional per-timestep loss weights w_t, length T + 1
    weighting: str = "uniform"  # "uniform", "velocity", or "custom" for an explicit w_t array

    def weight(self, t):
        if self.weights is None:
            return np.ones(np.shape(t))
        return self.weights[np.asarray(t)]

    def to_dict(self):
        d = {"T": self.T, "kind": "cosine"}
        if self.weighting == "custom":
            d["w_t"] = self.weights[1:].tolist()
        elif self.weighting != "uniform":
            d["weighting"] = self.weighting
        return d


def velocity_weights(alpha_cum, cap=VELOCITY_WEIGHT_CAP):
    """w_t = min(1 / alpha_cum[t], cap) for t = 1..T.

    With the velocity output head this turns the noise loss into the
    velocity loss, so high-noise steps are not drowned out by low-noise ones.
    """
    return np.minimum(1.0 / np.asarray(alpha_cum)[1:], cap)


def cosine_schedule(T: int, weights=None, weighting=None) -> DiffusionSchedule:
    if T < 2:
        raise ConfigError(f"diffusion needs T >= 2, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
    ac = f / f[0]
    beta = np.zeros(T + 1)
    beta[1:] = np.minimum(1.0 - ac[1:] / ac[:-1], MAX_BETA)
    alpha_cum = np.concatenate([[1.0], np.cumprod(1.0 - beta[1:])])
    if weights is not None and weighting not in (None, "custom"):
        raise ConfigError("give either explicit w_t or a named weighting, not both")
    if weights is not None:
        weighting = "custom"
    weighting = weighting or "uniform"
    if weighting == "velocity":
        weights = velocity_weights(alpha_cum)
    elif weighting not in WEIGHTINGS + ("custom",):
        raise ConfigError(f"unknown loss weighting {weighting!r}; expected one of {WEIGHTINGS}")
    w = None
    if weights is not None:
        w = np.concatenate([[0.0], np.asarray(weights, dtype=np.float64)])
        if w.shape != (T + 1,):
            raise ConfigError(f"w_t must have {T} entries")
    return DiffusionSchedule(T, beta, alpha_cum, w, weighting)


def schedule_from_dict(d) -> DiffusionSchedule:
    return cosine_schedule(int(d["T"]), d.get("w_t"), d.get("weighting"))


@dataclass(frozen=True)
class SamplerConfig:
    eta: float = 0.0
    steps: int = 50
    timesteps: tuple | None = None  # explicit strictly increasing subsequence in [1, T]

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.timesteps is not None:
            ts = tuple(int(v) for v in self.timesteps)
            if len(ts) != self.steps or any(b <= a for a, b in zip(ts, ts[1:])) or ts[0] < 1:
                raise ConfigError("timesteps must be a strictly increasing sequence of length steps")
            object.__setattr__(self, "timesteps", ts)

    def subsequence(self, T):
        if self.timesteps is not None:
            if self.timesteps[-1] > T:
                raise ConfigError(f"timestep {self.timesteps[-1]} exceeds T={T}")
            return list(self.timesteps)
        if self.steps > T:
            raise ConfigError(f"{self.steps} steps exceed T={T}")
        return [int(round(k * T / self.steps)) for k in range(1, self.steps + 1)]


def _check_t(t, sched):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ConfigError(f"timestep outside [1, {sched.T}]")


def _bcast(v, x):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        return v
    return v.reshape(v.shape + (1,) * (np.ndim(x) - v.ndim))


def forward_sample(x0, t, eps, sched: DiffusionSchedule):
    """Closed-form q(x_t | x_0). ``t`` may be a scalar or one entry per batch item."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ConfigError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    _check_t(t, sched)
    a = _bcast(sched.alpha_cum[np.asarray(t)], x0)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def forward_step(x_prev, t, z, sched: DiffusionSchedule):
    """One Markov step q(x_t | x_{t-1})."""
    _check_t(t, sched)
    b = sched.beta[t]
    return math.sqrt(1.0 - b) * np.asarray(x_prev) + math.sqrt(b) * np.asarray(z)


def draw_training_batch(x0, rng, sched: DiffusionSchedule, stratified=False, u0=None):
    """Per item: t ~ U{1..T}, eps ~ N(0, I); returns (t, eps, x_t).

    ``stratified`` spreads the batch evenly over [1, T] from one shared
    uniform offset ``u0`` (drawn from ``rng`` when not given). Each item
    stays uniform on {1..T}; the batch loss has lower variance.
    """
    n = x0.shape[0]
    if stratified:
        u0 = rng.random() if u0 is None else u0
        u = (u0 + np.arange(n) / n) % 1.0
        t = np.minimum(np.floor(u * sched.T).astype(np.int64) + 1, sched.T)
    else:
        t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype, copy=False)
    return t, eps, forward_sample(x0, t, eps, sched).astype(x0.dtype, copy=False)


def weighted_loss(eps, eps_hat, t, sched: DiffusionSchedule) -> float:
    eps = np.asarray(eps, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    n = eps.shape[0]
    per = eps[0].size
    w = sched.weight(t)
    return float(np.sum(w * ((eps - eps_hat) ** 2).reshape(n, -1).sum(axis=1)) / (n * per))


def diffusion_loss(x0, cond, net, sched: DiffusionSchedule, rng) -> float:
    """Weighted noise-prediction MSE for a batch. ``net(x_t, c, t)`` returns eps_hat."""
    x0 = np.asarray(x0)
    cond = np.asarray(cond)
    if x0.shape != cond.shape:
        raise ConfigError(f"x0 {x0.shape} and cond {cond.shape} differ in shape")
    t, eps, xt = draw_training_batch(x0, rng, sched)
    return weighted_loss(eps, net(xt, cond, t), t, sched)


def ddim_x0_estimate(x_t, eps_hat, t, sched: DiffusionSchedule):
    a = sched.alpha_cum[t]
    if a <= 0:
        raise NumericError(f"alpha_cum[{t}] = {a}; cannot invert")
    return (np.asarray(x_t) - math.sqrt(1.0 - a) * np.asarray(eps_hat)) / math.sqrt(a)


def ddim_sigma(t, t_prev, eta, sched: DiffusionSchedule):
    a, ap = sched.alpha_cum[t], sched.alpha_cum[t_prev]
    return eta * math.sqrt((1.0 - ap) / (1.0 - a)) * math.sqrt(1.0 - a / ap)


def ddim_step(x_t, eps_hat, t, t_prev, cfg: SamplerConfig, sched: DiffusionSchedule, rng=None):
    if not t > t_prev >= 0:
        raise ConfigError(f"need t > t_prev >= 0, got {t}, {t_prev}")
    ap = sched.alpha_cum[t_prev]
    x0 = ddim_x0_estimate(x_t, eps_hat, t, sched)
    sigma = ddim_sigma(t, t_prev, cfg.eta, sched)
    dir2 = 1.0 - ap - sigma * sigma
    if dir2 < 0:
        if dir2 > -1e-12:
            dir2 = 0.0
        else:
            raise NumericError(f"negative direction variance {dir2} at t={t}")
    out = math.sqrt(ap) * x0 + math.sqrt(dir2) * np.asarray(eps_hat)
    if sigma > 0:
        if rng is None:
            raise ConfigError("stochastic DDIM step (eta > 0) needs an rng")
        out = out + sigma * rng.standard_normal(np.shape(x_t)).astype(np.asarray(x_t).dtype, copy=False)
    return out


def ddim_sample(x_T, cond, net, cfg: SamplerConfig, sched: DiffusionSchedule, rng=None):
    """Run DDIM from ``x_T`` down the timestep subsequence and return x0_hat."""
    ts = cfg.subsequence(sched.T)
    x = np.asarray(x_T)
    n = x.shape[0] if x.ndim > 2 else 1
    prev = [0] + ts[:-1]
    for t, tp in zip(reversed(ts), reversed(prev)):
        eps_hat = net(x, cond, np.full(n, t))
        x = ddim_step(x, eps_hat, t, tp, cfg, sched, rng).astype(np.asarray(x_T).dtype, copy=False)
    return x
