"""Random finite-difference cases shared by the unit and acceptance suites."""

from __future__ import annotations

import numpy as np

from tpidm.data import ScaleParams
from tpidm.diffcore import grad_check
from tpidm.diffusion import draw, make_linear_schedule
from tpidm.physics import LotkaVolterra, PhysicsTerm, WeightSchedule
from tpidm.seqnet import Denoiser, DenoiserConfig, uniform_init, param_layout
from tpidm.training import loss_and_grad


def _project(tape, y, key):
    # random weighting keeps symmetric terms from cancelling; ``key`` fixes the
    # weights so every evaluation of one case sees the same ones
    r = np.random.default_rng(key).normal(size=y.shape)
    return tape.sumsq(y * tape.const(r)) + tape.mean(y * tape.const(r))


def _unary(op):
    def case(rng):
        x = rng.normal(size=(3, 4))
        key = int(rng.integers(2**31))
        return (lambda tape, v: _project(tape, getattr(tape, op)(v), key)), x

    return case


def _linear_x(rng):
    w, b = rng.normal(size=(4, 3)), rng.normal(size=3)
    key = int(rng.integers(2**31))
    return (lambda tape, v: _project(tape, tape.linear(v, tape.const(w), tape.const(b)), key)), rng.normal(size=(2, 5, 4))


def _linear_w(rng):
    x, b = rng.normal(size=(5, 4)), rng.normal(size=3)
    key = int(rng.integers(2**31))
    return (lambda tape, v: _project(tape, tape.linear(tape.const(x), v, tape.const(b)), key)), rng.normal(size=(4, 3))


def _linear_b(rng):
    x, w = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    key = int(rng.integers(2**31))
    return (lambda tape, v: _project(tape, tape.linear(tape.const(x), tape.const(w), v), key)), rng.normal(size=3)


def _add_broadcast(rng):
    other = rng.normal(size=(3, 4))
    key = int(rng.integers(2**31))
    return (lambda tape, v: _project(tape, tape.add(tape.const(other), v), key)), rng.normal(size=(1, 4))


def _mul(rng):
    other = rng.normal(size=(3, 4))
    key = int(rng.integers(2**31))
    return (lambda tape, v: _project(tape, tape.mul(v, tape.const(other)) * v, key)), rng.normal(size=(3, 4))


def _concat(rng):
    other = rng.normal(size=(3, 2))
    key = int(rng.integers(2**31))
    return (lambda tape, v: _project(tape, tape.concat([v, tape.const(other), v], axis=-1), key)), rng.normal(size=(3, 4))


def _slice(rng):
    key = int(rng.integers(2**31))
    return (lambda tape, v: _project(tape, tape.slice(v, (slice(1, 3), Ellipsis)) + v[2:4, 0:5], key)), rng.normal(size=(4, 5, 3))


def _reductions(rng):
    return (lambda tape, v: tape.mean(v) * tape.sumsq(v)), rng.normal(size=(2, 3))


def _lstm_input(which):
    def case(rng):
        steps, batch, n_in, hidden = 4, 2, 3, 2
        parts = {
            "x": rng.normal(size=(steps, batch, n_in)),
            "w_x": rng.normal(size=(n_in, 4 * hidden)) * 0.5,
            "w_h": rng.normal(size=(hidden, 4 * hidden)) * 0.5,
            "b": rng.normal(size=4 * hidden) * 0.5,
        }
        start = parts.pop(which)
        key = int(rng.integers(2**31))

        def fn(tape, v):
            args = {k: tape.const(a) for k, a in parts.items()}
            args[which] = v
            return _project(tape, tape.lstm(args["x"], args["w_x"], args["w_h"], args["b"]), key)

        return fn, start

    return case


PRIMITIVE_CASES = {
    "linear.x": _linear_x,
    "linear.w": _linear_w,
    "linear.b": _linear_b,
    "sigmoid": _unary("sigmoid"),
    "tanh": _unary("tanh"),
    "silu": _unary("silu"),
    "exp": _unary("exp"),
    "add": _add_broadcast,
    "mul": _mul,
    "concat": _concat,
    "slice": _slice,
    "mean.sumsq": _reductions,
    "lstm.x": _lstm_input("x"),
    "lstm.w_x": _lstm_input("w_x"),
    "lstm.w_h": _lstm_input("w_h"),
    "lstm.b": _lstm_input("b"),
}


def primitive_errors(instances: int, seed: int = 0) -> dict[str, float]:
    """Worst relative error per primitive over ``instances`` random cases in total."""
    rng = np.random.default_rng(seed)
    names = list(PRIMITIVE_CASES)
    worst = dict.fromkeys(names, 0.0)
    for i in range(instances):
        name = names[i % len(names)]
        fn, start = PRIMITIVE_CASES[name](rng)
        worst[name] = max(worst[name], grad_check(fn, start))
    return worst


def denoiser_error(seed: int, physics: bool = True, mode: str = "eps", h: float = 1e-5) -> float:
    """Relative error of the full training-loss gradient on a tiny denoiser."""
    rng = np.random.default_rng(seed)
    config = DenoiserConfig(channels=2, window=6, steps=10, encoder=(3, 4), decoder=(3, 2), mode=mode)
    layout = param_layout(config.layer_sizes(), config.head_shape())
    # random head so the check is not trivially zero at init
    model = Denoiser(config, uniform_init(layout, rng))
    schedule = make_linear_schedule(10, 1e-3, 0.2)
    x0 = rng.uniform(-1, 1, size=(3, 6, 2))
    draws = draw(x0, schedule, rng)
    term = None
    if physics:
        scale = ScaleParams(np.array([0.1, 0.5]), np.array([8.0, 6.0]))
        term = PhysicsTerm(LotkaVolterra(), WeightSchedule.default("log-sigmoid", 10), scale, 0.1)

    def total(flat):
        return loss_and_grad(Denoiser(config, flat), x0, draws, schedule, term)[0]

    analytic = loss_and_grad(model, x0, draws, schedule, term)[3]
    numeric = np.empty_like(analytic)
    for i in range(analytic.size):
        up, down = model.params.copy(), model.params.copy()
        up[i] += h
        down[i] -= h
        numeric[i] = (total(up) - total(down)) / (2 * h)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def denoiser_directional_error(seed: int, h: float = 1e-5) -> float:
    """Directional-derivative check of the full training loss along one random direction.

    The model, batch, parameterisation mode and physics term are all drawn
    from ``seed``, so many cheap instances cover the end-to-end path.
    """
    rng = np.random.default_rng(seed)
    mode = "eps" if rng.random() < 0.5 else "x0"
    window = int(rng.integers(4, 9))
    config = DenoiserConfig(channels=2, window=window, steps=10, encoder=(3, 4), decoder=(3, 2), mode=mode)
    model = Denoiser(config, uniform_init(param_layout(config.layer_sizes(), config.head_shape()), rng))
    schedule = make_linear_schedule(10, 1e-3, 0.2)
    x0 = rng.uniform(-1, 1, size=(int(rng.integers(1, 5)), window, 2))
    draws = draw(x0, schedule, rng)
    term = None
    if rng.random() < 0.75:
        scale = ScaleParams(np.array([0.1, 0.5]), np.array([8.0, 6.0]))
        kind = str(rng.choice(["log-sigmoid", "hard-sigmoid", "sigmoid", "relu"]))
        term = PhysicsTerm(LotkaVolterra(), WeightSchedule.default(kind, 10), scale, 0.1)
    direction = rng.normal(size=model.params.size)
    direction /= np.linalg.norm(direction)

    def total(flat):
        return loss_and_grad(Denoiser(config, flat), x0, draws, schedule, term)[0]

    analytic = float(loss_and_grad(model, x0, draws, schedule, term)[3] @ direction)
    numeric = (total(model.params + h * direction) - total(model.params - h * direction)) / (2 * h)
    return abs(analytic - numeric) / max(1.0, abs(analytic))
