"""Autoencoder, variational autoencoder and k-means anomaly detectors.

The two networks reuse the denoiser's LSTM stack (same widths, SiLU between
layers, linear output head) without the diffusion-step input channel.  All
scores are "higher means more anomalous" and feed straight into
:func:`tpidm.detect.calibrate_threshold`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import AdamState, Tape, Var, adam_step, backward
from .errors import ContractError, NumericError
from .seqnet import param_layout, stack_forward, stack_predict, uniform_init, unpack

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StackConfig:
    channels: int = 2
    window: int = 100
    encoder: tuple[int, ...] = (8, 16, 32)
    decoder: tuple[int, ...] = (16, 8, 2)

    def __post_init__(self):
        if self.decoder[-1] != self.channels:
            raise ContractError(f"decoder output width {self.decoder[-1]} != channel count {self.channels}")
        if any(w <= 0 for w in tuple(self.encoder) + tuple(self.decoder)):
            raise ContractError("layer widths must be positive")

    @property
    def latent(self) -> int:
        return self.encoder[-1]

    def layer_sizes(self) -> list[tuple[int, int]]:
        widths = list(self.encoder) + list(self.decoder)
        return list(zip([self.channels] + widths[:-1], widths))


def _layout(config: StackConfig, variational: bool):
    layout = param_layout(config.layer_sizes(), (config.channels, config.channels))
    if variational:
        z = config.latent
        layout += [("mu.w", (z, z)), ("mu.b", (z,)), ("logvar.w", (z, z)), ("logvar.b", (z,))]
    return layout


@dataclass
class Autoencoder:
    config: StackConfig
    params: np.ndarray
    variational: bool = False
    trained: bool = False
    layout: list = field(init=False, repr=False)

    def __post_init__(self):
        self.layout = _layout(self.config, self.variational)
        self.params = np.asarray(self.params, dtype=np.float64)
        unpack(self.params, self.layout)

    @property
    def n_encoder(self) -> int:
        return len(self.config.encoder)

    @property
    def n_decoder(self) -> int:
        return len(self.config.decoder)

    def weights(self) -> dict[str, np.ndarray]:
        return unpack(self.params, self.layout)

    def _check(self, windows) -> np.ndarray:
        w = np.asarray(windows, dtype=np.float64)
        if w.ndim == 2:
            w = w[None]
        if w.ndim != 3 or w.shape[1:] != (self.config.window, self.config.channels):
            raise ContractError(f"expected windows (N, {self.config.window}, {self.config.channels}), got {w.shape}")
        return w

    def encode(self, windows) -> tuple[np.ndarray, np.ndarray | None]:
        """Latent sequence (N, L, Z); for the VAE the (mean, log-variance) pair."""
        wts = self.weights()
        x = self._check(windows).transpose(1, 0, 2)
        h = stack_predict(x, wts, self.n_encoder)
        if not self.variational:
            return h.transpose(1, 0, 2), None
        h = h * (0.5 + 0.5 * np.tanh(0.5 * h))
        mu = h @ wts["mu.w"] + wts["mu.b"]
        logvar = h @ wts["logvar.w"] + wts["logvar.b"]
        return mu.transpose(1, 0, 2), logvar.transpose(1, 0, 2)

    def decode(self, z) -> np.ndarray:
        wts = self.weights()
        z = np.asarray(z, dtype=np.float64).transpose(1, 0, 2)
        h = z * (0.5 + 0.5 * np.tanh(0.5 * z))
        h = stack_predict(h, wts, self.n_decoder, first=self.n_encoder)
        return (h @ wts["head.w"] + wts["head.b"]).transpose(1, 0, 2)

    def graph(self, tape: Tape, wts: dict[str, Var], x: np.ndarray, eps: np.ndarray | None):
        """(reconstruction, mean, log-variance) nodes for a time-major batch ``x``."""
        h = stack_forward(tape, tape.const(x), wts, self.n_encoder)
        mu = logvar = None
        if self.variational:
            h = tape.silu(h)
            mu = tape.linear(h, wts["mu.w"], wts["mu.b"])
            logvar = tape.linear(h, wts["logvar.w"], wts["logvar.b"])
            h = mu + tape.exp(logvar * 0.5) * eps
        h = stack_forward(tape, tape.silu(h), wts, self.n_decoder, first=self.n_encoder)
        return tape.linear(h, wts["head.w"], wts["head.b"]), mu, logvar


def init_autoencoder(config: StackConfig, seed: int, variational: bool = False) -> Autoencoder:
    layout = _layout(config, variational)
    return Autoencoder(config, uniform_init(layout, np.random.default_rng(seed)), variational=variational)


def kl_standard_normal(mu, logvar) -> np.ndarray:
    """Closed-form KL(N(mu, exp(logvar)) || N(0, 1)) summed over all but the first axis."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if not np.all(np.isfinite(logvar)):
        raise NumericError("non-finite log-variance")
    kl = 0.5 * (mu**2 + np.exp(logvar) - 1.0 - logvar)
    return kl.reshape(kl.shape[0], -1).sum(axis=1) if kl.ndim > 1 else kl


def _batch_loss(model: Autoencoder, tape: Tape, wts, x0: np.ndarray, rng: np.random.Generator) -> Var:
    x = x0.transpose(1, 0, 2)
    eps = rng.standard_normal((x.shape[0], x.shape[1], model.config.latent)) if model.variational else None
    recon, mu, logvar = model.graph(tape, wts, x, eps)
    n = x0.shape[0]
    if not model.variational:
        return tape.mean((recon - x) * (recon - x))
    rec = tape.sumsq(recon - x) * (0.5 / n)
    size = mu.value.size
    kl = (tape.sumsq(mu) + tape.mean(tape.exp(logvar) - logvar) * size) * (0.5 / n) + (-0.5 * size / n)
    return rec + kl


def fit_autoencoder(model: Autoencoder, windows, epochs: int = 80, batch_size: int = 128, lr: float = 1e-4, l2: float = 1e-6, seed: int = 0) -> Autoencoder:
    """Adam on reconstruction MSE (AE) or the negative ELBO with unit-variance likelihood (VAE)."""
    windows = model._check(windows)
    shuffle_rng = np.random.default_rng([seed, 2])
    noise_rng = np.random.default_rng([seed, 4])
    params = model.params.copy()
    state = AdamState.zeros(params.size, lr=lr, l2=l2)
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(windows.shape[0])
        total = 0.0
        for start in range(0, order.size, batch_size):
            current = Autoencoder(model.config, params, model.variational)
            tape = Tape()
            wts = {name: tape.leaf(v) for name, v in current.weights().items()}
            loss = _batch_loss(current, tape, wts, windows[order[start : start + batch_size]], noise_rng)
            value = float(loss.value)
            if not math.isfinite(value):
                raise NumericError(f"baseline training diverged in epoch {epoch}", where=epoch)
            grads = backward(tape, loss)
            flat = np.concatenate([grads.get(wts[n].id, np.zeros(s)).ravel() for n, s in current.layout])
            params, state = adam_step(params, flat, state)
            total += value
        log.debug("baseline epoch %d loss %.6g", epoch, total)
    return Autoencoder(model.config, params.astype(np.float32).astype(np.float64), model.variational, trained=True)


def ae_score(windows, model: Autoencoder) -> np.ndarray:
    """Mean squared reconstruction error per window."""
    if not model.trained:
        raise ContractError("ae_score needs a trained autoencoder")
    w = model._check(windows)
    z, _ = model.encode(w)
    return np.mean((model.decode(z) - w) ** 2, axis=(1, 2))


def vae_score(windows, model: Autoencoder, seed: int = 0) -> np.ndarray:
    """Negative ELBO per window: unit-variance Gaussian reconstruction plus analytic KL.

    One reparameterised latent draw per window, from a noise sequence shared by
    all windows so that scores do not depend on batch composition.
    """
    if not model.trained or not model.variational:
        raise ContractError("vae_score needs a trained variational autoencoder")
    w = model._check(windows)
    mu, logvar = model.encode(w)
    kl = kl_standard_normal(mu, logvar)
    eps = np.random.default_rng(seed).standard_normal(mu.shape[1:])
    recon = model.decode(mu + np.exp(0.5 * logvar) * eps)
    nll = 0.5 * np.sum((recon - w) ** 2, axis=(1, 2)) + 0.5 * w[0].size * math.log(2.0 * math.pi)
    return nll + kl


# -- k-means -----------------------------------------------------------------------------


@dataclass(frozen=True)
class KMeansModel:
    centroids: np.ndarray
    inertia: float
    iterations: int
    history: tuple[float, ...] = ()

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _sq_dist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(axis=1)[:, None] - 2.0 * x @ c.T + (c * c).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_fit(windows, k: int = 4, seed: int = 0, tol: float = 1e-6, max_iter: int = 300) -> KMeansModel:
    """k-means++ seeding followed by Lloyd iterations on flattened windows."""
    x = np.asarray(windows, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    n = x.shape[0]
    if k < 1:
        raise ContractError(f"k must be at least 1, got {k}")
    if k > n:
        raise ContractError(f"k={k} exceeds the number of windows ({n})")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = _sq_dist(x, centroids[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        idx = rng.choice(n, p=closest / total) if total > 0 else rng.integers(n)
        centroids[j] = x[idx]
        closest = np.minimum(closest, _sq_dist(x, centroids[j : j + 1])[:, 0])
    history = []
    prev = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dist(x, centroids)
        assign = d.argmin(axis=1)
        inertia = float(d[np.arange(n), assign].sum())
        history.append(inertia)
        for j in range(k):
            members = x[assign == j]
            if members.shape[0]:
                centroids[j] = members.mean(axis=0)
        if prev < math.inf and (prev - inertia) <= tol * max(prev, 1e-300):
            break
        prev = inertia
    d = _sq_dist(x, centroids)
    inertia = float(d.min(axis=1).sum())
    return KMeansModel(centroids, inertia, it, tuple(history))


def kmeans_score(windows, model: KMeansModel) -> np.ndarray:
    """Euclidean distance from each flattened window to its nearest centroid."""
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim == 2 and x.shape[1] != model.centroids.shape[1] and x.size == model.centroids.shape[1]:
        x = x[None]  # a single (L, C) window
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != model.centroids.shape[1]:
        raise ContractError(f"window size {x.shape[1]} does not match centroids {model.centroids.shape[1]}")
    return np.sqrt(_sq_dist(x, model.centroids).min(axis=1))
