"""Config-driven pipeline shared by the CLI and the acceptance harness."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from . import data, physics
from .config import ExperimentConfig
from .detect import ScoreReport, ThresholdConfig, calibrate_threshold, classify_and_f1, score_windows
from .diffusion import NoiseSchedule, make_linear_schedule
from .errors import ContractError
from .seqnet import Denoiser, DenoiserConfig, init_params
from .training import TrainConfig, TrainResult, train


def build_series(cfg: ExperimentConfig) -> data.TimeSeries:
    """Generate (or load) the series described by the dataset section."""
    d = cfg.dataset
    segments = [data.Segment(s, n, f) for s, n, f in d.segments]
    if d.generator == "lv":
        a, b, dl, g = d.lv_params
        return data.inject_anomaly_lv(segments, a, b, dl, g, d.lv_init[0], d.lv_init[1], n=d.n, dt=d.dt)
    if d.generator == "emps":
        series = data.simulate_emps(n=d.n, dt=d.dt)
        return data.scale_amplitude(series, segments)
    if d.generator == "gas":
        series = data.simulate_gas(n=d.n, dt=d.dt)
        return data.scale_amplitude(series, segments)
    return data.load_csv(d.path, d.columns or None, d.dt)


@dataclass
class Prepared:
    series: data.TimeSeries
    scale: data.ScaleParams
    train: data.WindowSet
    val: data.WindowSet
    eval: data.WindowSet


def prepare(series: data.TimeSeries, cfg: ExperimentConfig) -> Prepared:
    """Scale, window and split.

    Points before ``train_end`` form the training region: only its normal
    windows are used for training and validation, and the scaling is fitted
    on it alone.  The evaluation set is drawn from windows lying entirely at
    or after ``train_end``, so it shares no points with training.
    """
    d = cfg.dataset
    n = len(series)
    if not d.window <= d.train_end <= n - d.window:
        raise ContractError(f"train_end={d.train_end} must leave a window on both sides of a {n}-point series")
    region = series.values[: d.train_end]
    scale = data.ScaleParams.fit(region[~series.labels[: d.train_end]])
    scaled, _ = data.scale_to_unit(series.values, scale)
    fit_windows = data.window(scaled[: d.train_end], d.window, series.labels[: d.train_end])
    fit_windows = fit_windows.take(np.flatnonzero(~fit_windows.labels))
    train_set, val_set = data.split_train_val(fit_windows, d.split_ratio, seed=d.seed)
    if d.train_stride > 1:
        train_set = train_set.take(np.arange(0, len(train_set), d.train_stride))
    test = data.window(scaled[d.train_end :], d.window, series.labels[d.train_end :], offset=d.train_end)
    normal = test.take(np.flatnonzero(~test.labels))
    anomalous = test.take(np.flatnonzero(test.labels))
    eval_set = data.build_eval_set(normal, anomalous, d.eval_normal, d.eval_anomalous, seed=d.eval_seed)
    return Prepared(series, scale, train_set, val_set, eval_set)


def noise_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    m = cfg.model
    return make_linear_schedule(m.steps, m.sigma_1, m.sigma_T)


def denoiser_config(cfg: ExperimentConfig, channels: int) -> DenoiserConfig:
    m = cfg.model
    return DenoiserConfig(
        channels=channels, window=cfg.dataset.window, steps=m.steps, encoder=m.encoder, decoder=m.decoder, mode=m.mode
    )


def physics_model(cfg: ExperimentConfig) -> physics.PhysicsModel:
    p = cfg.physics
    params, ch = p.params, p.channels
    if p.model == "lv":
        prey, predator = ch if ch else (0, 1)
        return physics.LotkaVolterra(*(params or cfg.dataset.lv_params), prey=prey, predator=predator)
    if p.model == "ohm":
        pairs = tuple(zip(ch[0::2], ch[1::2])) if ch else ((0, 1),)
        return physics.Ohm(resistance=params or (1.0,), pairs=pairs)
    if p.model == "emps":
        base = physics.EmpsIdm(*params) if params else physics.EmpsIdm()
        if ch:
            base = physics.EmpsIdm(base.mass, base.viscous, base.coulomb, base.offset, tau=ch[0], q=ch[1])
        return base
    gas = physics.IdealGas(*params) if params else physics.IdealGas()
    if ch:
        gas = physics.IdealGas(gas.gas_constant, gas.density, *ch)
    return gas


def weight_schedule(cfg: ExperimentConfig) -> physics.WeightSchedule:
    p = cfg.physics
    base = physics.WeightSchedule.default(p.schedule, cfg.model.steps)
    m = base.m if math.isnan(p.m) else p.m
    n = base.n if math.isnan(p.n) else p.n
    l = base.l if math.isnan(p.l) else p.l
    return physics.WeightSchedule(kind=p.schedule, m=m, n=n, l=l, T=cfg.model.steps)


def physics_term(cfg: ExperimentConfig, scale: data.ScaleParams, dt: float) -> physics.PhysicsTerm | None:
    if not cfg.physics.enabled:
        return None
    return physics.PhysicsTerm(physics_model(cfg), weight_schedule(cfg), scale, dt)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.training
    return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, l2=t.l2, seed=t.seed)


def fit(cfg: ExperimentConfig, prep: Prepared, on_epoch=None) -> TrainResult:
    model = init_params(denoiser_config(cfg, prep.series.channels), cfg.training.seed)
    term = physics_term(cfg, prep.scale, prep.series.dt)
    if term is not None:
        physics.check_channels(term.model, prep.series.channels)
    return train(model, prep.train.windows, noise_schedule(cfg), term, train_config(cfg), on_epoch=on_epoch)


def elbo_steps(cfg: ExperimentConfig) -> int | None:
    return cfg.detection.elbo_steps or None


def evaluate(model: Denoiser, prep: Prepared, cfg: ExperimentConfig) -> ScoreReport:
    """Calibrate on the validation windows, then classify the evaluation set."""
    sched = noise_schedule(cfg)
    det = cfg.detection
    val_scores = score_windows(prep.val.windows, model, sched, det.elbo_seed, elbo_steps(cfg))
    threshold = calibrate_threshold(val_scores, ThresholdConfig(det.trim, det.k))
    scores = score_windows(prep.eval.windows, model, sched, det.elbo_seed, elbo_steps(cfg))
    return classify_and_f1(scores, threshold, prep.eval.labels)


def checkpoint_meta(cfg: ExperimentConfig, result: TrainResult, prep: Prepared) -> dict:
    return {
        "config": cfgmod.dump(cfg),
        "steps": result.steps,
        "seed": cfg.training.seed,
        "scale": prep.scale.to_dict(),
        "dt": prep.series.dt,
        "channels": list(prep.series.names),
        "layout": [[name, list(shape)] for name, shape in result.model.layout],
    }
