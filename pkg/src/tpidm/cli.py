"""Command-line entry point: ``tpidm <command> [options]``.

Exit codes: 0 success, 1 invalid input or config, 2 numeric/runtime
failure, 3 file-system or checkpoint problem.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout
from threadpoolctl import threadpool_limits

from . import checkpoint, config as cfgmod, data, experiment, plotting
from .detect import pca2, score_windows, write_metrics_json, write_pca_csv, write_scores_csv
from .diffusion import sample
from .errors import ContractError, CorruptCheckpointError, NumericError, ParseError, SchemaError, TpidmError
from .seqnet import Denoiser

log = logging.getLogger("tpidm")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


# -- helpers -------------------------------------------------------------------------


def _config(args, from_checkpoint: dict | None = None) -> cfgmod.ExperimentConfig:
    if args.config:
        cfg = cfgmod.load(args.config)
    elif from_checkpoint is not None:
        cfg = cfgmod.loads(from_checkpoint["config"])
    else:
        cfg = cfgmod.desk_preset()
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


@contextlib.contextmanager
def _locked(out: Path):
    lock = FileLock(str(out / ".tpidm.lock"), timeout=0)
    try:
        with lock:
            yield
    except Timeout:
        raise OSError(f"{out} is in use by another tpidm process") from None


def _series(args, cfg) -> data.TimeSeries:
    if args.data:
        return data.load_csv(args.data, cfg.dataset.columns or None, None if data.read_meta(args.data) else cfg.dataset.dt)
    return experiment.build_series(cfg)


def _load_model(path) -> tuple[Denoiser, dict, cfgmod.ExperimentConfig]:
    ckpt = checkpoint.load(path)
    meta = ckpt.meta
    try:
        cfg = cfgmod.loads(meta["config"])
        model_cfg = experiment.denoiser_config(cfg, len(meta["channels"]))
        model = Denoiser(model_cfg, ckpt.params)
    except (KeyError, ContractError) as exc:
        raise CorruptCheckpointError(f"{path}: metadata does not match the parameter blob ({exc})") from exc
    return model, meta, cfg


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- commands ------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, dataset=replace(cfg.dataset, seed=args.seed))
    if cfg.dataset.generator == "csv":
        raise ContractError("gen-data needs a synthetic generator (lv, emps or gas)")
    out = _out_dir(args)
    with _locked(out):
        series = experiment.build_series(cfg)
        series.meta["seed"] = cfg.dataset.seed
        path = out / "data.csv"
        data.write_csv(series, path)
    print(f"wrote {path} ({len(series)} rows, {series.channels} channels)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = _out_dir(args)
    with _locked(out):
        series = _series(args, cfg)
        prep = experiment.prepare(series, cfg)
        rows = []
        try:
            result = experiment.fit(cfg, prep, on_epoch=lambda *r: rows.append(r))
        finally:
            _write_rows(out / "training_log.csv", ["epoch", "l_dm", "l_pi", "total"], [[e, repr(a), repr(b), repr(c)] for e, a, b, c in rows])
        ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
        checkpoint.save(ckpt_path, result.model.params, experiment.checkpoint_meta(cfg, result, prep))
        if rows:
            plotting.plot_training(rows, out / "training_loss.png")
    print(f"wrote {ckpt_path} after {result.steps} steps")
    return EXIT_OK


def cmd_detect(args) -> int:
    model, meta, ckpt_cfg = _load_model(args.checkpoint)
    cfg = _config(args, meta) if args.config else ckpt_cfg
    out = _out_dir(args)
    with _locked(out):
        prep = experiment.prepare(_series(args, cfg), cfg)
        report = experiment.evaluate(model, prep, cfg)
        write_scores_csv(report, out / "scores.csv", window_ids=prep.eval.starts)
        write_metrics_json(report, out / "metrics.json", cfgmod.to_dict(cfg))
        plotting.plot_scores(report.scores, report.truth, report.threshold, out / "scores.png")
    print(json.dumps({"f1": report.f1, "precision": report.precision, "recall": report.recall, "threshold": report.threshold}))
    return EXIT_OK


def _generated(model: Denoiser, cfg, n: int, seed: int) -> np.ndarray:
    return sample(model, experiment.noise_schedule(cfg), n, seed)


def cmd_sample(args) -> int:
    model, meta, cfg = _load_model(args.checkpoint)
    seed = 0 if args.seed is None else args.seed
    out = _out_dir(args)
    with _locked(out):
        windows = data.unscale(_generated(model, cfg, args.n, seed), data.ScaleParams.from_dict(meta["scale"]))
        rows = [[i, k] + [repr(v) for v in step] for i, win in enumerate(windows.tolist()) for k, step in enumerate(win)]
        _write_rows(out / "samples.csv", ["window_id", "step"] + list(meta["channels"]), rows)
    print(f"wrote {out / 'samples.csv'} ({args.n} windows)")
    return EXIT_OK


def _read_samples(path, channels) -> np.ndarray:
    table: dict[int, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ["window_id", "step", *channels] if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        for r, row in enumerate(reader, start=2):
            try:
                table.setdefault(int(row["window_id"]), []).append([float(row[c]) for c in channels])
            except ValueError:
                raise ParseError(f"{path}: row {r} is not numeric", row=r) from None
    return np.array([table[k] for k in sorted(table)])


def cmd_pca(args) -> int:
    model, meta, cfg = _load_model(args.checkpoint)
    seed = 0 if args.seed is None else args.seed
    out = _out_dir(args)
    scale = data.ScaleParams.from_dict(meta["scale"])
    with _locked(out):
        prep = experiment.prepare(_series(args, cfg), cfg)
        reference = prep.eval.windows[~prep.eval.labels]
        if args.generated:
            generated, _ = data.scale_to_unit(_read_samples(args.generated, meta["channels"]), scale)
        else:
            generated = _generated(model, cfg, args.n, seed)
        result = pca2(reference, generated)
        write_pca_csv(result, out / "pca.csv")
        plotting.plot_pca(result.reference, result.generated, result.ratios, out / "pca.png")
    print(json.dumps({"explained_variance_ratio": result.ratios.tolist()}))
    return EXIT_OK


def cmd_bench(args) -> int:
    model, meta, cfg = _load_model(args.checkpoint)
    prep = experiment.prepare(_series(args, cfg), cfg)
    windows = prep.eval.windows
    reps = int(np.ceil(args.n / windows.shape[0]))
    windows = np.concatenate([windows] * reps)[: args.n]
    start = time.perf_counter()
    score_windows(windows, model, experiment.noise_schedule(cfg), cfg.detection.elbo_seed, experiment.elbo_steps(cfg))
    elapsed = time.perf_counter() - start
    report = {"windows": int(windows.shape[0]), "seconds": elapsed, "windows_per_second": windows.shape[0] / elapsed}
    if args.out:
        out = _out_dir(args)
        with open(out / "bench.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    print(json.dumps(report))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpidm", description="Physics-informed diffusion anomaly detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="experiment config (INI); defaults to the desk preset")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen-data", help="simulate a dataset and write it as CSV")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a denoiser and write a checkpoint")
    common(p)
    p.add_argument("--data", help="CSV written by gen-data (default: generate from the config)")
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/model.ckpt)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="score the evaluation set and report F1")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("sample", help="generate windows by ancestral sampling")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=16)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("pca", help="PCA of generated against original windows")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--generated", help="samples.csv from the sample command (default: sample afresh)")
    p.add_argument("--n", type=int, default=200)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("bench", help="time scoring of a batch of windows")
    common(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--n", type=int, default=1000)
    p.set_defaults(func=cmd_bench)
    return parser


def _threads() -> int | None:
    raw = os.environ.get("TPIDM_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ContractError(f"TPIDM_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ContractError(f"TPIDM_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except (ContractError, SchemaError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CorruptCheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, TpidmError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
