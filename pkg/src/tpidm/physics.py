"""Physics residuals, step-weight schedules and the weighted physics loss.

Residuals come in two flavours.  :func:`residual` works on plain arrays and
uses the exact ``sign`` for Coulomb friction; it is what evaluation and the
data generators check against.  :func:`residual_var` builds the same
expressions on a tape so the loss can be differentiated, and replaces
``sign(v)`` with ``tanh(v / kappa)``.

Derivatives are second-order finite differences: central in the interior,
three-point one-sided at both ends.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .data import ScaleParams
from .diffcore import Tape, Var
from .errors import ContractError

SCHEDULE_KINDS = ("log-sigmoid", "hard-sigmoid", "sigmoid", "relu")

# Table defaults (m, n, l) per schedule kind
SCHEDULE_DEFAULTS = {
    "log-sigmoid": (0.01, 0.1, 0.1),
    "hard-sigmoid": (0.01, 1.0, 1.0),
    "sigmoid": (0.01, 1.0, 1.0),
    "relu": (0.001, 0.01, 0.9),
}


# -- physical models ---------------------------------------------------------


@dataclass(frozen=True)
class LotkaVolterra:
    alpha: float = 1.1
    beta: float = 0.4
    delta: float = 0.4
    gamma: float = 0.1
    prey: int = 0
    predator: int = 1

    def channels(self) -> tuple[int, ...]:
        return (self.prey, self.predator)


@dataclass(frozen=True)
class Ohm:
    """``dV/dt = R dI/dt`` for each (voltage channel, current channel) pair."""

    resistance: tuple[float, ...] = (1.0,)
    pairs: tuple[tuple[int, int], ...] = ((0, 1),)

    def __post_init__(self):
        if len(self.resistance) not in (1, len(self.pairs)):
            raise ContractError("give one resistance, or one per voltage/current pair")

    def channels(self) -> tuple[int, ...]:
        return tuple(c for pair in self.pairs for c in pair)

    def r(self, k: int) -> float:
        return self.resistance[0] if len(self.resistance) == 1 else self.resistance[k]


@dataclass(frozen=True)
class EmpsIdm:
    """``tau = M q'' + Fv q' + Fc sign(q') + offset``."""

    mass: float = 95.1
    viscous: float = 203.5
    coulomb: float = 20.4
    offset: float = -3.1
    tau: int = 0
    q: int = 1
    kappa: float = 1e-3

    def channels(self) -> tuple[int, ...]:
        return (self.tau, self.q)


@dataclass(frozen=True)
class IdealGas:
    """``P v' + v P' = R T'`` with ``v = V / m``, and ``mdot = rho Q``."""

    gas_constant: float = 287.05
    density: float = 1.2
    pressure: int = 0
    volume: int = 1
    temperature: int = 2
    mass: int = 3
    mass_flow: int = 4
    volume_flow: int = 5

    def channels(self) -> tuple[int, ...]:
        return (self.pressure, self.volume, self.temperature, self.mass, self.mass_flow, self.volume_flow)


PhysicsModel = Union[LotkaVolterra, Ohm, EmpsIdm, IdealGas]


def check_channels(model: PhysicsModel, n_channels: int) -> None:
    bad = [c for c in model.channels() if not 0 <= c < n_channels]
    if bad:
        raise ContractError(f"{type(model).__name__} refers to channel(s) {bad} but data has {n_channels}")


# -- derivatives ---------------------------------------------------------------


def finite_diff(series, dt: float, axis: int = 0) -> np.ndarray:
    """First derivative along ``axis``; exact for polynomials up to degree two."""
    x = np.asarray(series, dtype=np.float64)
    if x.shape[axis] < 3 or dt <= 0:
        raise ContractError(f"finite_diff needs at least 3 samples and dt > 0 (got {x.shape[axis]}, {dt})")
    x = np.moveaxis(x, axis, 0)
    d = np.empty_like(x)
    d[1:-1] = (x[2:] - x[:-2]) / (2.0 * dt)
    d[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) / (2.0 * dt)
    d[-1] = (3.0 * x[-1] - 4.0 * x[-2] + x[-3]) / (2.0 * dt)
    return np.moveaxis(d, 0, axis)


def finite_diff_var(tape: Tape, x: Var, dt: float) -> Var:
    """:func:`finite_diff` along axis 0 of a tape node."""
    if x.shape[0] < 3 or dt <= 0:
        raise ContractError(f"finite_diff needs at least 3 samples and dt > 0 (got {x.shape[0]}, {dt})")
    h = 1.0 / (2.0 * dt)
    interior = (x[2:] - x[:-2]) * h
    first = (x[0:1] * -3.0 + x[1:2] * 4.0 - x[2:3]) * h
    last = (x[-1:] * 3.0 - x[-2:-1] * 4.0 + x[-3:-2]) * h
    return tape.concat([first, interior, last], axis=0)


# -- residuals -----------------------------------------------------------------


def residual(model: PhysicsModel, window, dt: float) -> np.ndarray:
    """Per-timestep residuals of ``window`` (L, C) in physical units; returns (L, R)."""
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 2:
        raise ContractError(f"residual expects one (L, C) window, got {w.shape}")
    check_channels(model, w.shape[1])
    d = finite_diff(w, dt, axis=0)
    if isinstance(model, LotkaVolterra):
        x, y = w[:, model.prey], w[:, model.predator]
        return np.stack(
            [
                d[:, model.prey] - (model.alpha * x - model.beta * x * y),
                d[:, model.predator] - (model.delta * x * y - model.gamma * y),
            ],
            axis=1,
        )
    if isinstance(model, Ohm):
        return np.stack([d[:, v] - model.r(k) * d[:, i] for k, (v, i) in enumerate(model.pairs)], axis=1)
    if isinstance(model, EmpsIdm):
        dq = d[:, model.q]
        ddq = finite_diff(dq, dt)
        tau = w[:, model.tau]
        pred = model.mass * ddq + model.viscous * dq + model.coulomb * np.sign(dq) + model.offset
        return (tau - pred)[:, None]
    if isinstance(model, IdealGas):
        v = w[:, model.volume] / w[:, model.mass]
        p, temp = w[:, model.pressure], w[:, model.temperature]
        gas = p * finite_diff(v, dt) + v * d[:, model.pressure] - model.gas_constant * d[:, model.temperature]
        flow = w[:, model.mass_flow] - model.density * w[:, model.volume_flow]
        return np.stack([gas, flow], axis=1)
    raise ContractError(f"unknown physics model {model!r}")


def residual_var(tape: Tape, model: PhysicsModel, x: Var, dt: float) -> Var:
    """Tape version of :func:`residual` for time-major batches (L, B, C) -> (L, B, R)."""
    check_channels(model, x.shape[-1])

    def ch(k):
        return x[..., k : k + 1]

    if isinstance(model, LotkaVolterra):
        prey, pred = ch(model.prey), ch(model.predator)
        xy = prey * pred
        r1 = finite_diff_var(tape, prey, dt) - (prey * model.alpha - xy * model.beta)
        r2 = finite_diff_var(tape, pred, dt) - (xy * model.delta - pred * model.gamma)
        return tape.concat([r1, r2], axis=-1)
    if isinstance(model, Ohm):
        parts = [
            finite_diff_var(tape, ch(v), dt) - finite_diff_var(tape, ch(i), dt) * model.r(k)
            for k, (v, i) in enumerate(model.pairs)
        ]
        return tape.concat(parts, axis=-1)
    if isinstance(model, EmpsIdm):
        dq = finite_diff_var(tape, ch(model.q), dt)
        ddq = finite_diff_var(tape, dq, dt)
        friction = tape.tanh(dq * (1.0 / model.kappa)) * model.coulomb
        return ch(model.tau) - (ddq * model.mass + dq * model.viscous + friction + model.offset)
    if isinstance(model, IdealGas):
        # v = V / m needs a division; V and m are data channels of the estimate, so
        # divide through the reciprocal of the observed mass, held constant
        inv_m = 1.0 / x.value[..., model.mass : model.mass + 1]
        v = ch(model.volume) * inv_m
        p = ch(model.pressure)
        gas = p * finite_diff_var(tape, v, dt) + v * finite_diff_var(tape, p, dt) - finite_diff_var(
            tape, ch(model.temperature), dt
        ) * model.gas_constant
        flow = ch(model.mass_flow) - ch(model.volume_flow) * model.density
        return tape.concat([gas, flow], axis=-1)
    raise ContractError(f"unknown physics model {model!r}")


# -- step weights --------------------------------------------------------------


def _f(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "log-sigmoid":
        return -np.logaddexp(0.0, -z)
    if kind == "hard-sigmoid":
        return np.clip(z + 3.0, 0.0, 6.0) / 6.0
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if kind == "relu":
        return np.maximum(z, 0.0)
    raise ContractError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")


@dataclass(frozen=True)
class WeightSchedule:
    """Per-step physics weight ``clamp(f(z(s)) (m - n) + l, 0, 1)`` and its running product.

    ``z(s) = 6 (2 s / T - 1)`` for the sigmoid family and ``s / T`` for relu.
    """

    kind: str = "log-sigmoid"
    m: float = 0.01
    n: float = 0.1
    l: float = 0.1
    T: int = 100
    clamp: bool = True
    lam: np.ndarray = field(init=False, repr=False, compare=False)
    lam_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 1:
            raise ContractError("schedule needs T >= 1")
        s = np.arange(1, self.T + 1)
        lam = _f(self.kind, self.argument(s)) * (self.m - self.n) + self.l
        if self.clamp:
            lam = np.clip(lam, 0.0, 1.0)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "lam_bar", np.concatenate([[1.0], np.cumprod(lam)]))

    @classmethod
    def default(cls, kind: str, T: int = 100) -> WeightSchedule:
        if kind not in SCHEDULE_DEFAULTS:
            raise ContractError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
        m, n, l = SCHEDULE_DEFAULTS[kind]
        return cls(kind=kind, m=m, n=n, l=l, T=T)

    def argument(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if self.kind == "relu":
            return s / self.T
        return 6.0 * (2.0 * s / self.T - 1.0)


def pinn_weight(s: int, schedule: WeightSchedule) -> float:
    if not 1 <= s <= schedule.T:
        raise ContractError(f"step {s} outside [1, {schedule.T}]")
    return float(schedule.lam[s - 1])


def cumulative_weight(t, schedule: WeightSchedule):
    """Product of the per-step weights over 1..t (1 for t = 0); accepts arrays."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.T):
        raise ContractError(f"step outside [0, {schedule.T}]")
    out = schedule.lam_bar[t]
    return float(out) if out.ndim == 0 else out


# -- losses ----------------------------------------------------------------------


@dataclass(frozen=True)
class PhysicsTerm:
    """Everything the weighted physics loss needs besides the estimate itself."""

    model: PhysicsModel
    schedule: WeightSchedule
    scale: ScaleParams
    dt: float


def to_physical_var(tape: Tape, x: Var, scale: ScaleParams) -> Var:
    half = 0.5 * (scale.high - scale.low)
    return x * half + (scale.low + half)


def pinn_loss_var(tape: Tape, xhat: Var, t: np.ndarray, term: PhysicsTerm) -> Var:
    """Weighted physics loss for a time-major estimate (L, B, C) on [-1, 1] scale.

    Each element's mean squared residual is weighted by the running product
    of step weights at its draw ``t``; the batch mean is returned.
    """
    if xhat.shape[-1] != term.scale.low.size:
        raise ContractError(f"estimate has {xhat.shape[-1]} channels, scaling has {term.scale.low.size}")
    res = residual_var(tape, term.model, to_physical_var(tape, xhat, term.scale), term.dt)
    w = cumulative_weight(np.asarray(t), term.schedule).reshape(1, -1, 1)
    return tape.mean((res * res) * w)


def pinn_loss(xhat, t, term: PhysicsTerm) -> float:
    """Array version of :func:`pinn_loss_var` for (B, L, C) estimates."""
    xhat = np.asarray(xhat, dtype=np.float64)
    tape = Tape()
    return float(pinn_loss_var(tape, tape.const(xhat.transpose(1, 0, 2)), np.asarray(t), term).value)


@dataclass(frozen=True)
class LossParts:
    total: Var
    l_dm: Var
    l_pi: Var | None


def composite_graph(tape: Tape, weights: dict[str, Var], model, x0: np.ndarray, draws, schedule, term: PhysicsTerm | None) -> LossParts:
    """Diffusion loss plus (optionally) the weighted physics loss on one set of draws.

    ``model`` is a :class:`~tpidm.seqnet.Denoiser`; ``draws`` come from
    :func:`tpidm.diffusion.draw` and are shared by both terms.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    batch = x0.shape[0]
    pred = model.forward(tape, weights, draws.x_t, draws.t)
    x0_tm = x0.transpose(1, 0, 2)
    if model.mode == "eps":
        target = draws.eps.transpose(1, 0, 2)
    else:
        target = x0_tm
    l_dm = tape.sumsq(pred - target) * (1.0 / batch)
    if term is None:
        return LossParts(total=l_dm, l_dm=l_dm, l_pi=None)
    if model.mode == "eps":
        ab = schedule.abar(draws.t).reshape(1, -1, 1)
        x_t_tm = draws.x_t.transpose(1, 0, 2)
        xhat = (x_t_tm - pred * np.sqrt(1.0 - ab)) * (1.0 / np.sqrt(ab))
    else:
        xhat = pred
    l_pi = pinn_loss_var(tape, xhat, draws.t, term)
    return LossParts(total=l_dm + l_pi, l_dm=l_dm, l_pi=l_pi)


def composite_loss(x0, model, schedule, term: PhysicsTerm | None, rng: np.random.Generator) -> tuple[float, float, float]:
    """(total, diffusion part, physics part) for one batch; no gradients recorded."""
    from .diffusion import draw

    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 3 or x0.shape[0] == 0:
        raise ContractError("composite_loss needs a non-empty (B, L, C) batch")
    tape = Tape()
    weights = {k: tape.const(v) for k, v in model.weights().items()}
    parts = composite_graph(tape, weights, model, x0, draw(x0, schedule, rng), schedule, term)
    l_pi = 0.0 if parts.l_pi is None else float(parts.l_pi.value)
    return float(parts.total.value), float(parts.l_dm.value), l_pi
