"""Gaussian diffusion over windows: schedule, corruption, losses, ELBO, sampling.

Notation follows the usual DDPM bookkeeping with ``sigma_t`` the per-step
variance, ``alpha_t = 1 - sigma_t`` and ``alpha_bar_t`` the running product.
Steps are 1-based everywhere in the public API; arrays are stored 0-based.

Any object with a ``mode`` attribute (``"eps"`` or ``"x0"``) and a
``predict(x_t, t)`` method taking (B, L, C) windows and a (B,) step array
can act as the model, which is how the tests plug in oracle stubs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class NoiseSchedule:
    sigma: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return self.sigma.size

    def check_step(self, t, lo: int = 1) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < lo) or np.any(t > self.T):
            raise ContractError(f"diffusion step outside [{lo}, {self.T}]: {t}")
        return t

    def abar(self, t) -> np.ndarray:
        """alpha_bar at 1-based step ``t``; ``t == 0`` gives 1."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])

    def posterior_variance(self, t) -> np.ndarray:
        t = np.asarray(t)
        return (1.0 - self.abar(t - 1)) / (1.0 - self.abar(t)) * self.sigma[t - 1]


def make_linear_schedule(T: int = 100, sigma_1: float = 1e-4, sigma_T: float = 0.05) -> NoiseSchedule:
    if T < 2 or not (0.0 < sigma_1 < sigma_T < 1.0):
        raise ContractError(f"need T >= 2 and 0 < sigma_1 < sigma_T < 1, got T={T}, {sigma_1}, {sigma_T}")
    sigma = sigma_1 + np.arange(T) / (T - 1) * (sigma_T - sigma_1)
    sigma[-1] = sigma_T
    alpha = 1.0 - sigma
    return NoiseSchedule(sigma=sigma, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _expand(v: np.ndarray, ndim: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def forward_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` is a scalar or one step per batch row."""
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ContractError(f"noise shape {eps.shape} != data shape {x0.shape}")
    t = schedule.check_step(t)
    ab = _expand(schedule.abar(t), x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def reconstruct_x0(x_t, t, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    x_t, eps_hat = np.asarray(x_t, dtype=np.float64), np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ContractError(f"prediction shape {eps_hat.shape} != input shape {x_t.shape}")
    t = schedule.check_step(t)
    ab = _expand(schedule.abar(t), x_t.ndim)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def x0_estimate(model, x_t, t, schedule: NoiseSchedule, prediction=None) -> np.ndarray:
    """Clean-window estimate from a model output, whatever the parameterization."""
    if prediction is None:
        prediction = model.predict(x_t, t)
    if model.mode == "x0":
        return prediction
    return reconstruct_x0(x_t, t, prediction, schedule)


def posterior_coefficients(t, schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Weights (on x0, on x_t) of the mean of q(x_{t-1} | x_t, x0); valid for t >= 1."""
    t = np.asarray(t)
    ab, ab_prev = schedule.abar(t), schedule.abar(t - 1)
    sig = schedule.sigma[t - 1]
    return np.sqrt(ab_prev) * sig / (1.0 - ab), np.sqrt(schedule.alpha[t - 1]) * (1.0 - ab_prev) / (1.0 - ab)


def posterior_q(x_t, x0, t: int, schedule: NoiseSchedule) -> tuple[np.ndarray, float]:
    """Mean and (scalar) variance of q(x_{t-1} | x_t, x0) for 2 <= t <= T."""
    if not 2 <= t <= schedule.T:
        raise ContractError(f"posterior_q needs 2 <= t <= {schedule.T}; t=1 is the reconstruction term")
    c0, ct = posterior_coefficients(t, schedule)
    mean = c0 * np.asarray(x0, dtype=np.float64) + ct * np.asarray(x_t, dtype=np.float64)
    return mean, float(schedule.posterior_variance(t))


@dataclass(frozen=True)
class LossDraws:
    """Per-element draws shared by the diffusion loss and the physics loss."""

    t: np.ndarray
    eps: np.ndarray
    x_t: np.ndarray


def draw(x0: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator) -> LossDraws:
    t = rng.integers(1, schedule.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    return LossDraws(t=t, eps=eps, x_t=forward_sample(x0, t, eps, schedule))


def simplified_loss(x0, model, schedule: NoiseSchedule, rng: np.random.Generator) -> tuple[float, LossDraws]:
    """Mean over the batch of the per-window squared error of the model's target.

    The target is the injected noise in ``eps`` mode and the clean window in
    ``x0`` mode.  The draws are returned for reuse by the physics loss.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 3 or x0.shape[0] == 0:
        raise ContractError("simplified_loss needs a non-empty (B, L, C) batch")
    d = draw(x0, schedule, rng)
    pred = model.predict(d.x_t, d.t)
    target = d.eps if model.mode == "eps" else x0
    return float(np.sum((target - pred) ** 2) / x0.shape[0]), d


@dataclass(frozen=True)
class ElboSettings:
    """``steps = None`` sums every KL term; an integer subsamples that many steps."""

    seed: int = 0
    steps: int | None = None


def _elbo_plan(schedule: NoiseSchedule, settings: ElboSettings) -> tuple[np.ndarray, float]:
    full = np.arange(2, schedule.T + 1)
    if settings.steps is None or settings.steps >= full.size:
        return full, 1.0
    if settings.steps < 1:
        raise ContractError("ELBO step subsample must be positive")
    rng = np.random.default_rng([settings.seed, 1])
    chosen = np.sort(rng.choice(full, size=settings.steps, replace=False))
    return chosen, full.size / settings.steps


def elbo_terms(x0: np.ndarray, model, schedule: NoiseSchedule, settings: ElboSettings = ElboSettings(), chunk: int = 4096) -> dict[str, np.ndarray]:
    """Per-window prior, KL-sum and reconstruction terms of the negative ELBO.

    Every window sees the same seeded noise sequence, so a window's value does
    not depend on which other windows are scored alongside it.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 2:
        x0 = x0[None]
    n, dims = x0.shape[0], x0[0].size
    ab_T = schedule.alpha_bar[-1]
    prior = 0.5 * np.sum((ab_T * x0**2).reshape(n, -1), axis=1) + 0.5 * dims * (
        (1.0 - ab_T) - 1.0 - np.log(1.0 - ab_T)
    )
    steps, weight = _elbo_plan(schedule, settings)
    all_steps = np.concatenate([[1], steps])
    noise_rng = np.random.default_rng([settings.seed, 0])
    noise = noise_rng.standard_normal((schedule.T,) + x0.shape[1:])

    kl = np.zeros(n)
    recon = None
    per_call = max(1, chunk // n)
    for start in range(0, all_steps.size, per_call):
        block = all_steps[start : start + per_call]
        tt = np.repeat(block, n)
        ww = np.tile(np.arange(n), block.size)
        x_t = forward_sample(x0[ww], tt, noise[tt - 1], schedule)
        err = (x0[ww] - x0_estimate(model, x_t, tt, schedule)).reshape(block.size, n, -1)
        for k, t in enumerate(block):
            sq = np.sum(err[k] ** 2, axis=1)
            if t == 1:
                s1 = schedule.sigma[0]
                recon = 0.5 * sq / s1 + 0.5 * dims * (LOG_2PI + np.log(s1))
            else:
                # model mean shares the posterior coefficients with x0 replaced by its estimate
                c0, _ = posterior_coefficients(t, schedule)
                kl += c0**2 * sq / (2.0 * schedule.posterior_variance(t))
    kl *= weight
    return {"prior": prior, "kl": kl, "recon": recon}


def elbo(x0, model, schedule: NoiseSchedule, seed: int = 0, steps: int | None = None) -> float | np.ndarray:
    """Negative ELBO (lower is a better fit) for one window or a batch of windows."""
    x0 = np.asarray(x0, dtype=np.float64)
    terms = elbo_terms(x0, model, schedule, ElboSettings(seed=seed, steps=steps))
    total = terms["prior"] + terms["kl"] + terms["recon"]
    return float(total[0]) if x0.ndim == 2 else total


def sample(model, schedule: NoiseSchedule, n: int, seed: int, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Ancestral sampling with the posterior variance; returns (n, L, C)."""
    if shape is None:
        shape = (model.config.window, model.config.channels)
    if n == 0:
        return np.empty((0,) + tuple(shape))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n,) + tuple(shape))
    for t in range(schedule.T, 0, -1):
        tt = np.full(n, t)
        xhat = x0_estimate(model, x, tt, schedule)
        c0, ct = posterior_coefficients(t, schedule)
        mean = c0 * xhat + ct * x
        if t > 1:
            x = mean + np.sqrt(schedule.posterior_variance(t)) * rng.standard_normal(x.shape)
        else:
            x = mean
    return x
