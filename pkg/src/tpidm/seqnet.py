"""LSTM encoder-decoder denoiser.

The network maps a noisy window ``x_t`` (L x C) and a diffusion step ``t`` to a
prediction of the same shape: the injected noise in ``eps`` mode or the clean
window in ``x0`` mode.

Layout, time-major throughout (L, B, .):

* the step enters as one extra input channel carrying ``t / T``;
* a stack of LSTM layers (encoder widths then decoder widths) with SiLU on
  the hidden sequence between consecutive layers;
* a time-distributed linear head ``C -> C`` so predictions are not confined
  to the (-1, 1) range of an LSTM hidden state.

The decoder consumes the encoder's full hidden sequence; the encoder's last
width is the latent size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import _kernels
from .diffcore import Tape, Var
from .errors import ContractError

MODES = ("eps", "x0")


@dataclass(frozen=True)
class LstmLayerParams:
    """Weights of one LSTM layer, gate blocks ordered (input, forget, cell, output)."""

    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        hidden = self.w_h.shape[0]
        if hidden == 0 or self.w_h.shape != (hidden, 4 * hidden) or self.w_x.shape[1] != 4 * hidden or self.b.shape != (4 * hidden,):
            raise ContractError(
                f"inconsistent LSTM layer: w_x {self.w_x.shape}, w_h {self.w_h.shape}, b {self.b.shape}"
            )

    @property
    def input_size(self) -> int:
        return self.w_x.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]


def lstm_cell(tape: Tape, x, h, c, params: dict[str, Var] | LstmLayerParams) -> tuple[Var, Var]:
    """One LSTM step composed from tape primitives.

    ``x`` is (B, in) and ``h``, ``c`` are (B, H).  This is the reference
    implementation the fused sequence kernel is tested against.
    """
    if isinstance(params, LstmLayerParams):
        params = {"w_x": params.w_x, "w_h": params.w_h, "b": params.b}
    w_x, w_h, b = params["w_x"], params["w_h"], params["b"]
    w_x_val = w_x.value if isinstance(w_x, Var) else np.asarray(w_x)
    w_h_val = w_h.value if isinstance(w_h, Var) else np.asarray(w_h)
    hidden = w_h_val.shape[0]
    x, h, c = tape._as_var(x), tape._as_var(h), tape._as_var(c)
    if x.shape[-1] != w_x_val.shape[0] or h.shape[-1] != hidden or c.shape[-1] != hidden:
        raise ContractError(
            f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape} do not fit weights {w_x_val.shape}/{w_h_val.shape}"
        )
    w = tape.concat([w_x, w_h], axis=0)
    z = tape.linear(tape.concat([x, h], axis=-1), w, b)
    i = tape.sigmoid(z[..., 0:hidden])
    f = tape.sigmoid(z[..., hidden : 2 * hidden])
    g = tape.tanh(z[..., 2 * hidden : 3 * hidden])
    o = tape.sigmoid(z[..., 3 * hidden : 4 * hidden])
    c_new = f * c + i * g
    h_new = o * tape.tanh(c_new)
    return h_new, c_new


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture of the denoiser.

    ``decoder[-1]`` must equal ``channels``.  Defaults are the Predator-Prey
    widths: encoder 8, 16, 32 and decoder 16, 8, 2.
    """

    channels: int = 2
    window: int = 100
    steps: int = 100
    encoder: tuple[int, ...] = (8, 16, 32)
    decoder: tuple[int, ...] = (16, 8, 2)
    mode: str = "eps"
    skip: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown parameterization mode {self.mode!r}; expected one of {MODES}")
        widths = tuple(self.encoder) + tuple(self.decoder)
        if not self.encoder or not self.decoder or any(int(w) <= 0 for w in widths):
            raise ContractError(f"layer widths must be positive, got encoder {self.encoder} decoder {self.decoder}")
        if self.decoder[-1] != self.channels:
            raise ContractError(f"decoder output width {self.decoder[-1]} != channel count {self.channels}")
        if self.window < 1 or self.steps < 1:
            raise ContractError("window and steps must be positive")

    @property
    def latent(self) -> int:
        return self.encoder[-1]

    def layer_sizes(self) -> list[tuple[int, int]]:
        """(input, hidden) per LSTM layer; the first input includes the step channel."""
        widths = list(self.encoder) + list(self.decoder)
        inputs = [self.channels + 1] + widths[:-1]
        return list(zip(inputs, widths))

    def head_shape(self) -> tuple[int, int]:
        return (2 * self.channels if self.skip else self.channels, self.channels)


def param_layout(layer_sizes: list[tuple[int, int]], head: tuple[int, int] | None) -> list[tuple[str, tuple[int, ...]]]:
    layout = []
    for k, (n_in, hidden) in enumerate(layer_sizes):
        layout += [(f"lstm{k}.w_x", (n_in, 4 * hidden)), (f"lstm{k}.w_h", (hidden, 4 * hidden)), (f"lstm{k}.b", (4 * hidden,))]
    if head is not None:
        layout += [("head.w", head), ("head.b", (head[1],))]
    return layout


def unpack(flat: np.ndarray, layout) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape))
        out[name] = flat[pos : pos + n].reshape(shape)
        pos += n
    if pos != flat.size:
        raise ContractError(f"parameter vector has {flat.size} entries, layout needs {pos}")
    return out


def uniform_init(layout, rng: np.random.Generator) -> np.ndarray:
    """Uniform in +-1/sqrt(fan): the hidden size for LSTM weights, the input size for dense ones."""
    bounds = init_bounds(layout)
    return rng.uniform(-1.0, 1.0, size=bounds.size) * bounds


def init_bounds(layout) -> np.ndarray:
    """Per-entry init bound, aligned with the flat parameter vector."""
    bounds, prev_fan = [], 1
    for name, shape in layout:
        if name.startswith("lstm"):
            fan = shape[0] if name.endswith(".w_h") else shape[-1] // 4
        else:
            fan = shape[0] if len(shape) == 2 else prev_fan
        prev_fan = fan
        bounds.append(np.full(int(np.prod(shape)), 1.0 / np.sqrt(fan)))
    return np.concatenate(bounds)


def stack_forward(tape: Tape, x: Var, weights: dict[str, Var], n_layers: int, first: int = 0) -> Var:
    """Layers ``first .. first + n_layers - 1`` with SiLU between consecutive layers."""
    h = x
    for k in range(first, first + n_layers):
        if k > first:
            h = tape.silu(h)
        h = tape.lstm(h, weights[f"lstm{k}.w_x"], weights[f"lstm{k}.w_h"], weights[f"lstm{k}.b"])
    return h


def stack_predict(x: np.ndarray, weights: dict[str, np.ndarray], n_layers: int, first: int = 0) -> np.ndarray:
    """Tape-free evaluation of :func:`stack_forward`."""
    h = x
    for k in range(first, first + n_layers):
        if k > first:
            h = h * (0.5 + 0.5 * np.tanh(0.5 * h))
        h, _ = _kernels.lstm_forward(h, weights[f"lstm{k}.w_x"], weights[f"lstm{k}.w_h"], weights[f"lstm{k}.b"], keep=False)
    return h


@dataclass
class Denoiser:
    """Parameters plus architecture.  ``params`` is one flat float64 vector."""

    config: DenoiserConfig
    params: np.ndarray
    layout: list = field(init=False, repr=False)

    def __post_init__(self):
        self.layout = param_layout(self.config.layer_sizes(), self.config.head_shape())
        self.params = np.asarray(self.params, dtype=np.float64)
        unpack(self.params, self.layout)

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def n_layers(self) -> int:
        return len(self.config.encoder) + len(self.config.decoder)

    def weights(self) -> dict[str, np.ndarray]:
        return unpack(self.params, self.layout)

    def layers(self) -> Iterator[LstmLayerParams]:
        w = self.weights()
        for k in range(self.n_layers):
            yield LstmLayerParams(w[f"lstm{k}.w_x"], w[f"lstm{k}.w_h"], w[f"lstm{k}.b"])

    def _inputs(self, x_t: np.ndarray, t: np.ndarray) -> np.ndarray:
        cfg = self.config
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.ndim != 3 or x_t.shape[1:] != (cfg.window, cfg.channels):
            raise ContractError(f"expected windows of shape (B, {cfg.window}, {cfg.channels}), got {x_t.shape}")
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        if np.any(t < 1) or np.any(t > cfg.steps):
            raise ContractError(f"diffusion step must lie in [1, {cfg.steps}]")
        step = np.broadcast_to((t / cfg.steps)[None, :, None], (cfg.window, x_t.shape[0], 1))
        return np.concatenate([x_t.transpose(1, 0, 2), step], axis=2)

    def forward(self, tape: Tape, weights: dict[str, Var], x_t: np.ndarray, t: np.ndarray) -> Var:
        """Prediction as a time-major (L, B, C) node on ``tape``."""
        inputs = self._inputs(x_t, t)
        h = stack_forward(tape, tape.const(inputs), weights, self.n_layers)
        if self.config.skip:
            h = tape.concat([h, tape.const(inputs[..., : self.config.channels])], axis=-1)
        return tape.linear(h, weights["head.w"], weights["head.b"])

    def predict(self, x_t: np.ndarray, t, chunk: int = 2048) -> np.ndarray:
        """Batch prediction (B, L, C) without recording a tape."""
        x_t = np.asarray(x_t, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        w = self.weights()
        out = np.empty_like(x_t)
        for start in range(0, x_t.shape[0], chunk):
            sl = slice(start, start + chunk)
            inputs = self._inputs(x_t[sl], t[sl])
            h = stack_predict(inputs, w, self.n_layers)
            if self.config.skip:
                h = np.concatenate([h, inputs[..., : self.config.channels]], axis=-1)
            out[sl] = (h @ w["head.w"] + w["head.b"]).transpose(1, 0, 2)
        return out

    def rounded(self) -> Denoiser:
        """Copy whose parameters are exactly representable in float32."""
        return Denoiser(self.config, self.params.astype(np.float32).astype(np.float64))


def init_params(config: DenoiserConfig, seed: int) -> Denoiser:
    """Seeded uniform initialisation in +-1/sqrt(hidden) per LSTM layer; the output head starts at zero."""
    layout = param_layout(config.layer_sizes(), config.head_shape())
    flat = uniform_init(layout, np.random.default_rng(seed))
    head = sum(int(np.prod(shape)) for name, shape in layout if name.startswith("head."))
    flat[flat.size - head :] = 0.0
    return Denoiser(config, flat)


def denoise(model: Denoiser, x_t: np.ndarray, t) -> np.ndarray:
    """Predict noise or clean signal for one window (L, C) or a batch (B, L, C)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim == 2:
        return model.predict(x_t[None], np.atleast_1d(t))[0]
    return model.predict(x_t, t)
