"""Mini-batch Adam training of the denoiser with the optional physics term."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffcore import AdamState, Tape, adam_step, backward
from .diffusion import NoiseSchedule, draw
from .errors import ContractError, NumericError
from .physics import PhysicsTerm, composite_graph
from .seqnet import Denoiser

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "l_dm", "l_pi", "total")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 128
    lr: float = 1e-4
    l2: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError(f"epochs must be >= 0 and batch size >= 1, got {self.epochs}, {self.batch_size}")
        if not (self.lr > 0 and math.isfinite(self.lr)) or self.l2 < 0:
            raise ContractError(f"learning rate must be positive and L2 non-negative, got {self.lr}, {self.l2}")


@dataclass
class TrainResult:
    model: Denoiser
    epochs: list[tuple[int, float, float, float]] = field(default_factory=list)
    steps: int = 0


class DivergedError(NumericError):
    """Training produced a non-finite loss; ``result`` holds everything up to the last finite epoch."""

    def __init__(self, message: str, result: TrainResult):
        super().__init__(message, where=result.steps)
        self.result = result


def loss_and_grad(model: Denoiser, x0: np.ndarray, draws, schedule: NoiseSchedule, term: PhysicsTerm | None) -> tuple[float, float, float, np.ndarray]:
    """(total, l_dm, l_pi, flat gradient) for one batch and one set of draws."""
    tape = Tape()
    weights = {name: tape.leaf(value) for name, value in model.weights().items()}
    parts = composite_graph(tape, weights, model, x0, draws, schedule, term)
    total = float(parts.total.value)
    l_dm = float(parts.l_dm.value)
    l_pi = 0.0 if parts.l_pi is None else float(parts.l_pi.value)
    if not math.isfinite(total):
        raise NumericError(f"non-finite training loss {total}")
    grads = backward(tape, parts.total)
    flat = np.concatenate([grads.get(weights[name].id, np.zeros(shape)).ravel() for name, shape in model.layout])
    return total, l_dm, l_pi, flat


def train(
    model: Denoiser,
    windows: np.ndarray,
    schedule: NoiseSchedule,
    term: PhysicsTerm | None,
    config: TrainConfig,
    on_epoch: Callable[[int, float, float, float], None] | None = None,
) -> TrainResult:
    """Train on scaled windows (N, L, C); the returned model is rounded to float32.

    Shuffling and diffusion draws use independent streams derived from
    ``config.seed``, so switching the physics term on or off leaves both
    streams untouched.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[0] == 0:
        raise ContractError(f"training needs a non-empty (N, L, C) array, got {windows.shape}")
    shuffle_rng = np.random.default_rng([config.seed, 2])
    draw_rng = np.random.default_rng([config.seed, 3])
    params = model.params.copy()
    state = AdamState.zeros(params.size, lr=config.lr, l2=config.l2)
    result = TrainResult(model=model.rounded())
    n = windows.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, config.batch_size):
            x0 = windows[order[start : start + config.batch_size]]
            current = Denoiser(model.config, params)
            d = draw(x0, schedule, draw_rng)
            try:
                total, l_dm, l_pi, grad = loss_and_grad(current, x0, d, schedule, term)
            except NumericError as exc:
                raise DivergedError(f"training diverged in epoch {epoch} (step {result.steps + 1}): {exc}", result) from exc
            if total < l_dm:
                raise NumericError(f"composite loss {total} fell below the diffusion loss {l_dm}")
            params, state = adam_step(params, grad, state)
            if not np.all(np.isfinite(params)):
                raise DivergedError(f"parameters became non-finite in epoch {epoch}", result)
            result.steps += 1
            sums += (l_dm, l_pi, total)
            batches += 1
        means = sums / batches
        row = (epoch, float(means[0]), float(means[1]), float(means[2]))
        result.epochs.append(row)
        result.model = Denoiser(model.config, params).rounded()
        log.info("epoch %d l_dm=%.6g l_pi=%.6g total=%.6g", *row)
        if on_epoch is not None:
            on_epoch(*row)
    result.model = Denoiser(model.config, params).rounded()
    return result
