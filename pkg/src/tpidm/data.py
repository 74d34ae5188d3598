"""Synthetic generators, CSV ingestion, scaling, windowing and splits."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, NumericError, ParseError, SchemaError

LABEL_COLUMN = "label"


@dataclass
class TimeSeries:
    """``values`` is (N, C); ``labels`` flags anomalous points."""

    values: np.ndarray
    dt: float
    names: tuple[str, ...]
    labels: np.ndarray | None = None
    units: tuple[str, ...] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ContractError(f"series values must be (N, C), got {self.values.shape}")
        n, c = self.values.shape
        if not np.all(np.isfinite(self.values)):
            raise ContractError("series values must be finite")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ContractError(f"dt must be positive and finite, got {self.dt}")
        self.names = tuple(self.names)
        if len(self.names) != c:
            raise ContractError(f"{len(self.names)} channel names for {c} channels")
        self.labels = np.zeros(n, dtype=bool) if self.labels is None else np.asarray(self.labels, dtype=bool)
        if self.labels.shape != (n,):
            raise ContractError(f"labels length {self.labels.shape} != series length {n}")
        if self.units is None:
            self.units = ("",) * c
        self.units = tuple(self.units)
        if len(self.units) != c:
            raise ContractError(f"{len(self.units)} units for {c} channels")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.names.index(name)]
        except ValueError:
            raise SchemaError(f"no channel named {name!r}; have {self.names}") from None


# -- Lotka-Volterra ------------------------------------------------------------


LV_PARAMS = (1.1, 0.4, 0.4, 0.1)


def _lv_run(params, x, y, n, dt, out, offset):
    a, b, d, g = params

    def f(x, y):
        return a * x - b * x * y, d * x * y - g * y

    for k in range(n):
        k1x, k1y = f(x, y)
        k2x, k2y = f(x + 0.5 * dt * k1x, y + 0.5 * dt * k1y)
        k3x, k3y = f(x + 0.5 * dt * k2x, y + 0.5 * dt * k2y)
        k4x, k4y = f(x + dt * k3x, y + dt * k3y)
        x += dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        y += dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
        if not (math.isfinite(x) and math.isfinite(y)):
            raise NumericError(f"Lotka-Volterra state became non-finite at step {offset + k + 1}", where=offset + k + 1)
        out[offset + k + 1] = (x, y)
    return x, y


def _check_lv_params(params, n, dt, x0, y0):
    if len(params) != 4 or any(not (p > 0 and math.isfinite(p)) for p in params):
        raise ContractError(f"Lotka-Volterra parameters must be positive and finite, got {params}")
    if not (x0 > 0 and y0 > 0):
        raise ContractError(f"initial populations must be positive, got ({x0}, {y0})")
    if n < 2 or not dt > 0:
        raise ContractError(f"need n >= 2 and dt > 0, got n={n}, dt={dt}")


def simulate_lv(alpha=1.1, beta=0.4, delta=0.4, gamma=0.1, x0=10.0, y0=2.0, n=100_000, dt=0.01) -> TimeSeries:
    """Classic RK4 integration of the predator-prey equations; ``n`` samples including the start."""
    params = (float(alpha), float(beta), float(delta), float(gamma))
    _check_lv_params(params, n, dt, x0, y0)
    out = np.empty((n, 2))
    out[0] = (x0, y0)
    _lv_run(params, float(x0), float(y0), n - 1, dt, out, 0)
    return TimeSeries(out, dt, ("prey", "predator"), meta={"generator": "lv", "params": list(params), "x0": x0, "y0": y0})


def lv_first_integral(x, y, alpha=1.1, beta=0.4, delta=0.4, gamma=0.1):
    return delta * x - gamma * np.log(x) + beta * y - alpha * np.log(y)


@dataclass(frozen=True)
class Segment:
    """Points ``start .. start + length - 1`` are anomalous."""

    start: int
    length: int
    scale: float = 1.5

    @property
    def stop(self) -> int:
        return self.start + self.length


def check_segments(segments: Sequence[Segment], n: int) -> list[Segment]:
    segs = sorted(segments, key=lambda s: s.start)
    for s in segs:
        if s.length < 1 or s.start < 1 or s.stop > n:
            raise ContractError(f"segment {s} does not fit inside (0, {n})")
    for a, b in zip(segs, segs[1:]):
        if b.start < a.stop:
            raise ContractError(f"anomaly segments overlap: {a} and {b}")
    return segs


def inject_anomaly_lv(segments: Sequence[Segment], alpha=1.1, beta=0.4, delta=0.4, gamma=0.1, x0=10.0, y0=2.0, n=100_000, dt=0.01) -> TimeSeries:
    """Simulate with all four parameters multiplied by each segment's scale inside it.

    The state carries over across segment boundaries, so the path is continuous.
    """
    params = (float(alpha), float(beta), float(delta), float(gamma))
    _check_lv_params(params, n, dt, x0, y0)
    segs = check_segments(segments, n)
    if any(s.scale == 1.0 for s in segs):
        warnings.warn("anomaly segment with scale 1.0 leaves the series unchanged", stacklevel=2)
    out = np.empty((n, 2))
    out[0] = (x0, y0)
    labels = np.zeros(n, dtype=bool)
    x, y = float(x0), float(y0)
    pos = 0
    # sample k+1 is produced by the dynamics active over step k
    for s in segs:
        x, y = _lv_run(params, x, y, s.start - 1 - pos, dt, out, pos)
        pos = s.start - 1
        x, y = _lv_run(tuple(p * s.scale for p in params), x, y, s.length, dt, out, pos)
        pos = s.stop - 1
        labels[s.start : s.stop] = True
    _lv_run(params, x, y, n - 1 - pos, dt, out, pos)
    meta = {
        "generator": "lv",
        "params": list(params),
        "x0": x0,
        "y0": y0,
        "segments": [[s.start, s.length, s.scale] for s in segs],
    }
    return TimeSeries(out, dt, ("prey", "predator"), labels=labels, meta=meta)


# -- EMPS-like drive -------------------------------------------------------------


def simulate_emps(mass=95.1, viscous=203.5, coulomb=20.4, offset=-3.1, amplitude=150.0, freq=0.5, n=10_000, dt=0.001) -> TimeSeries:
    """Prismatic drive under ``tau = offset + amplitude sin(2 pi freq t)``; channels (tau, q, dq).

    At rest the axis sticks while ``|tau - offset|`` does not exceed the
    Coulomb level.
    """
    if not mass > 0:
        raise ContractError(f"mass must be positive, got {mass}")
    if n < 2 or not dt > 0:
        raise ContractError(f"need n >= 2 and dt > 0, got n={n}, dt={dt}")
    t = np.arange(n) * dt
    tau = offset + amplitude * np.sin(2.0 * np.pi * freq * t)
    q = np.zeros(n)
    dq = np.zeros(n)
    qk, vk = 0.0, 0.0
    for k in range(n - 1):
        drive = 0.5 * (tau[k] + tau[k + 1]) - offset
        if vk == 0.0 and abs(drive) <= coulomb:
            q[k + 1], dq[k + 1] = qk, 0.0
            continue
        sgn = math.copysign(1.0, vk) if vk != 0.0 else math.copysign(1.0, drive)
        acc = (drive - viscous * vk - coulomb * sgn) / mass
        v_new = vk + dt * acc
        if vk != 0.0 and v_new * vk < 0.0:
            v_new = 0.0  # friction cannot reverse the motion within one step
        qk += 0.5 * dt * (vk + v_new)
        vk = v_new
        q[k + 1], dq[k + 1] = qk, vk
    meta = {"generator": "emps", "params": [mass, viscous, coulomb, offset], "amplitude": amplitude, "freq": freq}
    return TimeSeries(np.stack([tau, q, dq], axis=1), dt, ("tau", "q", "dq"), units=("N", "m", "m/s"), meta=meta)


def scale_amplitude(series: TimeSeries, segments: Sequence[Segment], channels: Sequence[int] | None = None) -> TimeSeries:
    """Multiply the chosen channels by each segment's scale inside the segment and label it."""
    segs = check_segments(segments, len(series))
    values = series.values.copy()
    labels = series.labels.copy()
    cols = list(range(series.channels)) if channels is None else list(channels)
    for s in segs:
        values[s.start : s.stop, cols] *= s.scale
        labels[s.start : s.stop] = True
    meta = dict(series.meta, amplitude_segments=[[s.start, s.length, s.scale] for s in segs])
    return TimeSeries(values, series.dt, series.names, labels=labels, units=series.units, meta=meta)


# -- compressed air --------------------------------------------------------------


def simulate_gas(gas_constant=287.05, density=1.2, n=10_000, dt=0.01, temp_amp=5.0, vol_amp=0.05, period=20.0) -> TimeSeries:
    """Channels (P, V, T, m, mdot, Q) that satisfy ``P v = R T`` and ``mdot = rho Q`` exactly.

    Temperature and specific volume follow slow sinusoids; the stored mass
    grows linearly so the flow channels are non-trivial.
    """
    if not density > 0 or not gas_constant > 0:
        raise ContractError(f"gas constant and density must be positive, got {gas_constant}, {density}")
    if n < 2 or not dt > 0:
        raise ContractError(f"need n >= 2 and dt > 0, got n={n}, dt={dt}")
    t = np.arange(n) * dt
    w = 2.0 * np.pi / period
    temp = 293.15 + temp_amp * np.sin(w * t)
    v = 0.8 * (1.0 + vol_amp * np.cos(0.5 * w * t))
    p = gas_constant * temp / v
    mass_rate = 0.01
    m = 2.0 + mass_rate * t
    mdot = np.full(n, mass_rate)
    q = mdot / density
    values = np.stack([p, v * m, temp, m, mdot, q], axis=1)
    meta = {"generator": "gas", "params": [gas_constant, density]}
    return TimeSeries(
        values, dt, ("P", "V", "T", "m", "mdot", "Q"), units=("Pa", "m3", "K", "kg", "kg/s", "m3/s"), meta=meta
    )


# -- CSV -------------------------------------------------------------------------


def write_csv(series: TimeSeries, path) -> None:
    """CSV with a header row and a trailing ``label`` column, plus ``<path>.meta.json``."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(series.names) + [LABEL_COLUMN])
        for row, lab in zip(series.values.tolist(), series.labels.tolist()):
            writer.writerow([repr(v) for v in row] + [int(lab)])
    meta = {"dt": series.dt, "names": list(series.names), "units": list(series.units), **series.meta}
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_meta(path) -> dict | None:
    side = Path(str(path) + ".meta.json")
    if not side.exists():
        return None
    with open(side, encoding="utf-8") as fh:
        return json.load(fh)


def load_csv(path, columns: Sequence[str] | None = None, dt: float | None = None, label_column: str | None = LABEL_COLUMN) -> TimeSeries:
    """Read numeric columns by header name.

    ``columns`` defaults to every column except the label column.  ``dt``
    defaults to the sidecar metadata when one exists.
    """
    path = Path(path)
    meta = read_meta(path) or {}
    if dt is None:
        if "dt" not in meta:
            raise SchemaError(f"{path}: no dt given and no metadata sidecar with one")
        dt = float(meta["dt"])
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        has_label = label_column is not None and label_column in header
        if columns is None:
            columns = [h for h in header if h != label_column]
        missing = [c for c in columns if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}; header is {header}")
        idx = [header.index(c) for c in columns]
        lab_idx = header.index(label_column) if has_label else None
        rows, labels = [], []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {r} has {len(row)} fields, header has {len(header)}", row=r)
            vals = []
            for i in idx:
                try:
                    vals.append(float(row[i]))
                except ValueError:
                    raise ParseError(f"{path}: row {r}, column {header[i]!r}: {row[i]!r} is not a number", row=r, column=header[i]) from None
            rows.append(vals)
            if lab_idx is not None:
                cell = row[lab_idx].strip()
                if cell not in ("0", "1"):
                    raise ParseError(f"{path}: row {r}, column {label_column!r}: label must be 0 or 1, got {cell!r}", row=r, column=label_column)
                labels.append(cell == "1")
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    units = meta.get("units") if list(meta.get("names", [])) == list(columns) else None
    extra = {k: v for k, v in meta.items() if k not in ("dt", "names", "units")}
    return TimeSeries(np.array(rows), dt, tuple(columns), labels=np.array(labels) if has_label else None, units=units, meta=extra)


# -- scaling ---------------------------------------------------------------------


@dataclass(frozen=True)
class ScaleParams:
    """Per-channel ``low``/``high`` mapped to -1/+1."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.asarray(self.low, dtype=np.float64)
        high = np.asarray(self.high, dtype=np.float64)
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        if low.shape != high.shape or low.ndim != 1:
            raise ContractError("scale bounds must be matching 1-D arrays")
        bad = np.flatnonzero(~(high > low))
        if bad.size:
            raise ContractError(f"channel {int(bad[0])} is constant (or inverted); cannot scale it to [-1, 1]")

    @classmethod
    def fit(cls, values) -> ScaleParams:
        v = np.asarray(values, dtype=np.float64).reshape(-1, np.shape(values)[-1])
        low, high = v.min(axis=0), v.max(axis=0)
        flat = np.flatnonzero(~(high > low))
        if flat.size:
            raise ContractError(f"channel {int(flat[0])} is constant; cannot scale it to [-1, 1]")
        return cls(low, high)

    def to_dict(self) -> dict:
        return {"low": self.low.tolist(), "high": self.high.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> ScaleParams:
        return cls(np.array(d["low"], dtype=np.float64), np.array(d["high"], dtype=np.float64))


def scale_to_unit(values, params: ScaleParams | None = None) -> tuple[np.ndarray, ScaleParams]:
    """Affine map of each channel (last axis) onto [-1, 1]; fits ``params`` when none are given."""
    values = np.asarray(values, dtype=np.float64)
    if params is None:
        params = ScaleParams.fit(values)
    return 2.0 * (values - params.low) / (params.high - params.low) - 1.0, params


def unscale(scaled, params: ScaleParams) -> np.ndarray:
    return (np.asarray(scaled, dtype=np.float64) + 1.0) * 0.5 * (params.high - params.low) + params.low


# -- windows -----------------------------------------------------------------------


@dataclass
class WindowSet:
    """Windows (M, L, C), per-window labels and the start index of each window in its series."""

    windows: np.ndarray
    labels: np.ndarray
    starts: np.ndarray

    def __len__(self) -> int:
        return self.windows.shape[0]

    def take(self, idx) -> WindowSet:
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(np.ascontiguousarray(self.windows[idx]), self.labels[idx], self.starts[idx])

    @staticmethod
    def concat(parts: Sequence[WindowSet]) -> WindowSet:
        return WindowSet(
            np.concatenate([p.windows for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.starts for p in parts]),
        )


def window(values, length: int, labels=None, stride: int = 1, offset: int = 0) -> WindowSet:
    """Sliding windows; a window is anomalous iff any point it covers is.

    ``offset`` is added to the reported start indices so that windows cut from
    a slice can still be traced back to the full series.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    n = values.shape[0]
    if length < 1 or stride < 1:
        raise ContractError(f"window length and stride must be positive, got {length}, {stride}")
    if n < length:
        raise ContractError(f"series of {n} points is shorter than the window length {length}")
    starts = np.arange(0, n - length + 1, stride)
    view = np.lib.stride_tricks.sliding_window_view(values, length, axis=0).transpose(0, 2, 1)
    lab = np.zeros(n, dtype=bool) if labels is None else np.asarray(labels, dtype=bool)
    if lab.shape != (n,):
        raise ContractError(f"labels length {lab.shape} != series length {n}")
    csum = np.concatenate([[0], np.cumsum(lab)])
    win_labels = (csum[starts + length] - csum[starts]) > 0
    return WindowSet(np.ascontiguousarray(view[starts]), win_labels, starts + offset)


def split_train_val(windows: WindowSet, ratio: float = 0.9, seed: int = 0) -> tuple[WindowSet, WindowSet]:
    """Seeded shuffle then split ``ratio : 1 - ratio``."""
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"split ratio must lie in (0, 1), got {ratio}")
    n = len(windows)
    n_train = int(round(ratio * n))
    if n_train < 1 or n_train >= n:
        raise ContractError(f"cannot split {n} windows at ratio {ratio}")
    perm = np.random.default_rng(seed).permutation(n)
    return windows.take(np.sort(perm[:n_train])), windows.take(np.sort(perm[n_train:]))


def build_eval_set(normal: WindowSet, anomalous: WindowSet, n_normal: int = 700, n_anomalous: int = 300, seed: int = 0) -> WindowSet:
    """Seeded draw without replacement: normal windows first, then anomalous ones."""
    if len(normal) < n_normal or len(anomalous) < n_anomalous:
        raise ContractError(
            f"eval pools too small: need {n_normal} normal / {n_anomalous} anomalous, "
            f"have {len(normal)} / {len(anomalous)}"
        )
    rng = np.random.default_rng(seed)
    a = np.sort(rng.choice(len(normal), n_normal, replace=False))
    b = np.sort(rng.choice(len(anomalous), n_anomalous, replace=False))
    return WindowSet.concat([normal.take(a), anomalous.take(b)])
