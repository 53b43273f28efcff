"""Command-line driver: train, probe, sweep, decal, report.

    leakybnn train --config exp.cfg --mode map train.alpha=0
    leakybnn probe --config exp.cfg --checkpoint runs/map_....ckpt
    leakybnn sweep --config exp.cfg --jobs 2 sweep.slopes=-0.5,0
    leakybnn decal --config exp.cfg
    leakybnn report runs/sweep.csv other/sweep.csv
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import functools
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import calibration, checkpoint, probe, records
from .config import ExperimentConfig, load_config
from .dataset import load_dataset, make_split
from .errors import LeakyBNNError
from .nn import PointNetwork, predict_proba
from .svg import Series, write_chart
from .training import TrainConfig, VariationalPosterior, predict_bayes, train_map, train_mfvi


def _slope_tag(alpha: float) -> str:
    return f"a{alpha:+.3f}"


@functools.lru_cache(maxsize=4)
def _dataset(data_dir: str):
    path = Path(data_dir)
    if not path.is_dir():
        raise FileNotFoundError(f"data directory not found: {path}")
    return load_dataset(path)


def _split(cfg: ExperimentConfig, seed: int):
    images, labels = _dataset(cfg.data.dir)
    return make_split(images, labels, cfg.data.train_n, cfg.data.val_n, seed)


def _train_cfg(cfg: ExperimentConfig, alpha: float, seed: int) -> TrainConfig:
    return dataclasses.replace(cfg.train, alpha=float(alpha), seed=int(seed))


def _fit(cfg: ExperimentConfig, mode: str, alpha: float, seed: int):
    split = _split(cfg, seed)
    tcfg = _train_cfg(cfg, alpha, seed)
    fit = train_map if mode == "map" else train_mfvi
    model, record = fit(cfg.architecture(), split, tcfg)
    return model, record, split


def _probs(model, x, cfg: ExperimentConfig, seed: int):
    if isinstance(model, VariationalPosterior):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
        return predict_bayes(model, x, cfg.train.mc_samples_predict, rng)
    return predict_proba(model, x)


# ---------------------------------------------------------------- train

def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    mode, alpha, seed = cfg.run.mode, cfg.train.alpha, cfg.train.seed
    t0 = time.perf_counter()
    model, record, split = _fit(cfg, mode, alpha, seed)
    stem = f"{mode}_{cfg.data.name}_{cfg.model_name()}_{_slope_tag(alpha)}_s{seed}"
    checkpoint.save(out / f"{stem}.ckpt", model)
    records.write_run_csv(out / f"{stem}.csv", record)
    records.write_timing_csv(out / f"{stem}.timing.csv", [("train", time.perf_counter() - t0)])
    (xtr, ytr), (xva, yva) = split.train, split.val
    train_pred = calibration.PredictionBatch(_probs(model, xtr.pixels, cfg, seed), ytr.labels)
    line = f"{stem}: train_acc={calibration.accuracy(train_pred):.4f}"
    if yva.count:
        val_pred = calibration.PredictionBatch(_probs(model, xva.pixels, cfg, seed), yva.labels)
        bins = calibration.reliability_rows(val_pred, cfg.train.n_bins)
        calibration.write_reliability_csv(out / f"{stem}.reliability.csv", bins)
        line += f" val_acc={calibration.accuracy(val_pred):.4f} val_ece={calibration.ece_from_bins(bins):.4f}"
    print(line)
    return 0


# ---------------------------------------------------------------- probe

def cmd_probe(cfg: ExperimentConfig, out: Path, ckpt: Path) -> int:
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = checkpoint.load(ckpt)
    net = model.mean_network() if isinstance(model, VariationalPosterior) else model
    if net.arch != cfg.architecture():
        raise LeakyBNNError(f"{ckpt}: checkpoint architecture does not match model config ({cfg.model_name()})")
    split = _split(cfg, cfg.train.seed)
    data = split.train
    pc = cfg.probe
    res = probe.survey(net, data, pc.layer, pc.weights, np.random.default_rng(pc.seed), n_points=pc.n_points,
                       half_width=pc.half_width, flat_tol=pc.flat_tol, near_frac=pc.near_frac,
                       probe_bound=pc.probe_bound)
    probe.write_survey_csv(out / "survey.csv", res)
    prof_dir = out / "profiles"
    prof_dir.mkdir(exist_ok=True)
    for k, (addr, scan, rep) in enumerate(zip(res.addresses, res.scans, res.reports)):
        stem = prof_dir / f"w{k:03d}_L{addr.layer}_o{addr.out}_i{addr.in_}"
        probe.write_profile_csv(f"{stem}.csv", scan)
        series = [Series("likelihood (scaled)", scan.grid.tolist(), scan.normalized_likelihood().tolist())]
        title = f"layer {addr.layer}, out {addr.out}, in {addr.in_}, slope {net.alpha:g}"
        if rep.has_left_plateau:
            title += " (plateau)"
        write_chart(f"{stem}.svg", series, title=title, xlabel="weight value", ylabel="likelihood / max",
                    markers=False)
    summary = (f"survey: layer={pc.layer} weights={len(res.addresses)} slope={net.alpha:g} "
               f"plateau_fraction={res.frac_plateau:.3f} near_mode_fraction={res.frac_near_mode:.3f}")
    if pc.verify and net.alpha == 0.0 and net.arch.is_hidden(pc.layer):
        passed, tested = _verify_all(net, data, res, out / "verify.csv")
        summary += f" proposition_checks={passed}/{tested}"
    print(summary)
    return 0


def _verify_all(net: PointNetwork, data, res, path: Path):
    rows, passed, tested = [], 0, 0
    for addr, rep in zip(res.addresses, res.reports):
        if not math.isfinite(rep.theoretical_w_star):
            continue
        v = probe.verify_proposition(net, addr, data)
        tested += 1
        passed += v.passed
        for c in v.checks:
            rows.append([addr.layer, addr.out, addr.in_, repr(v.w_star), repr(c.delta), repr(c.grad_backprop),
                         repr(c.grad_fd), repr(c.loglik), int(v.passed)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "out_idx", "in_idx", "w_star", "delta", "grad_backprop", "grad_fd", "loglik", "passed"])
        w.writerows(rows)
    return passed, tested


# ---------------------------------------------------------------- sweep

def _sweep_trial(cfg: ExperimentConfig, alpha: float, seed: int) -> records.SweepRow:
    t0 = time.perf_counter()
    try:
        _, record, _ = _fit(cfg, "mfvi", alpha, seed)
        last = record.rows[-1]
        return records.SweepRow(cfg.data.name, cfg.model_name(), alpha, seed, last.val_acc, last.val_ece,
                                "ok", time.perf_counter() - t0)
    except (LeakyBNNError, ValueError, FloatingPointError) as e:
        msg = f"error: {type(e).__name__}: {e}".replace("\n", " ")
        return records.SweepRow(cfg.data.name, cfg.model_name(), alpha, seed, math.nan, math.nan, msg,
                                time.perf_counter() - t0)


def _run_trials(fn, cfg, trials, jobs: int):
    if jobs <= 1 or len(trials) <= 1:
        return [fn(cfg, *t) for t in trials]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, cfg, *t) for t in trials]
        return [f.result() for f in futures]  # submission order, not completion order


def _per_slope(rows, attr):
    slopes = sorted({r.slope for r in rows})
    mean, lo, hi = [], [], []
    for s in slopes:
        vals = [getattr(r, attr) for r in rows if r.slope == s and r.status == "ok"]
        mean.append(records.finite_mean(vals))
        lo.append(min(vals) if vals else math.nan)
        hi.append(max(vals) if vals else math.nan)
    return slopes, mean, lo, hi


def cmd_sweep(cfg: ExperimentConfig, out: Path, jobs: int) -> int:
    if not cfg.sweep.slopes:
        raise LeakyBNNError("sweep.slopes is empty")
    _dataset(cfg.data.dir)  # fail fast on a missing data directory
    trials = [(float(s), int(seed)) for s in cfg.sweep.slopes for seed in cfg.sweep.seeds]
    rows = _run_trials(_sweep_trial, cfg, trials, jobs)
    records.write_sweep_csv(out / "sweep.csv", rows)
    records.write_timing_csv(out / "sweep.timing.csv",
                             [(f"{_slope_tag(r.slope)}_s{r.seed}", r.wall_time) for r in rows])
    for attr, name in (("val_ece", "ECE"), ("val_acc", "accuracy")):
        slopes, mean, lo, hi = _per_slope(rows, attr)
        write_chart(out / f"sweep_{attr}.svg", [Series(f"mean {name} (band: min-max)", slopes, mean, lo, hi)],
                    title=f"{name} vs slope, {cfg.data.name} {cfg.model_name()}, {len(cfg.sweep.seeds)} seeds",
                    xlabel="negative slope", ylabel=f"validation {name}")
    slopes, ece_mean, _, _ = _per_slope(rows, "val_ece")
    _, acc_mean, _, _ = _per_slope(rows, "val_acc")
    print(f"{'slope':>8} {'acc':>8} {'ece':>8}")
    for s, a, e in zip(slopes, acc_mean, ece_mean):
        print(f"{s:8.3f} {a:8.4f} {e:8.4f}")
    failed = sum(r.status != "ok" for r in rows)
    if failed:
        print(f"{failed} of {len(rows)} trials failed; see sweep.csv", file=sys.stderr)
    return 0


# ---------------------------------------------------------------- decal

def _decal_trial(cfg: ExperimentConfig, alpha: float, seed: int):
    _, record, _ = _fit(cfg, "mfvi", alpha, seed)
    return alpha, record


def decalibration_gap(ece_curve, tail: int = 1) -> tuple[float, int]:
    """Late-training ECE (mean of the last ``tail`` epochs) minus the curve minimum; and the argmin epoch."""
    ece_curve = np.asarray(ece_curve, dtype=np.float64)
    late = float(np.mean(ece_curve[-tail:]))
    k = int(np.argmin(ece_curve))
    return late - float(ece_curve[k]), k + 1


def cmd_decal(cfg: ExperimentConfig, out: Path, jobs: int) -> int:
    if not cfg.decal.slopes:
        raise LeakyBNNError("decal.slopes is empty")
    _dataset(cfg.data.dir)
    seed = cfg.train.seed
    t0 = time.perf_counter()
    results = _run_trials(_decal_trial, cfg, [(float(a), seed) for a in cfg.decal.slopes], jobs)
    rows = [(a, r.epoch, r.val_acc, r.val_ece) for a, rec in results for r in rec.rows]
    records.write_decal_csv(out / "decal.csv", rows)
    records.write_timing_csv(out / "decal.timing.csv", [("decal", time.perf_counter() - t0)])
    for attr, name in (("val_ece", "ECE"), ("val_acc", "accuracy")):
        series = [Series(f"slope {a:g}", rec.column("epoch").tolist(), rec.column(attr).tolist()) for a, rec in results]
        write_chart(out / f"decal_{attr}.svg", series, title=f"validation {name} during training",
                    xlabel="epoch", ylabel=name)
    gap_rows = []
    for a, rec in results:
        gap, at = decalibration_gap(rec.column("val_ece"), cfg.decal.tail)
        gap_rows.append([float(a), at, float(rec.column("val_ece").min()), float(rec.rows[-1].val_ece), gap])
        print(f"slope {a:g}: min ECE {gap_rows[-1][2]:.4f} at epoch {at}, final ECE {gap_rows[-1][3]:.4f}, "
              f"decalibration gap {gap:.4f}")
    records.write_csv(out / "decal_gap.csv", "leakybnn.decal_gap/1",
                   ["slope", "min_epoch", "min_ece", "final_ece", "gap"], gap_rows)
    return 0


# ---------------------------------------------------------------- report

def build_report(rows, leaky_slope: float = -0.5, relu_slope: float = 0.0):
    """Per (dataset, model): mean accuracy and ECE for the leaky and ReLU slopes."""
    table = []
    for key in sorted({(r.dataset, r.model) for r in rows}):
        ok = [r for r in rows if (r.dataset, r.model) == key and r.status == "ok"]
        lk = [r for r in ok if r.slope == leaky_slope]
        rl = [r for r in ok if r.slope == relu_slope]
        table.append({
            "dataset": key[0], "model": key[1],
            "acc_leaky": records.finite_mean([r.val_acc for r in lk]),
            "acc_relu": records.finite_mean([r.val_acc for r in rl]),
            "ece_leaky": records.finite_mean([r.val_ece for r in lk]),
            "ece_relu": records.finite_mean([r.val_ece for r in rl]),
            "n_leaky": len(lk), "n_relu": len(rl),
        })
    return table


REPORT_COLUMNS = ["dataset", "model", "acc_leaky", "acc_relu", "ece_leaky", "ece_relu", "n_leaky", "n_relu"]


def format_report(table, leaky_slope: float) -> str:
    head = (f"{'dataset':<8} {'model':<14} {'acc leaky':>10} {'acc relu':>9} {'ece leaky':>10} {'ece relu':>9}"
            f"   (leaky = slope {leaky_slope:g})")
    lines = [head]
    for t in table:
        lines.append(f"{t['dataset']:<8} {t['model']:<14} {t['acc_leaky']:10.4f} {t['acc_relu']:9.4f} "
                     f"{t['ece_leaky']:10.4f} {t['ece_relu']:9.4f}")
    return "\n".join(lines)


def cmd_report(paths, out: Path, leaky_slope: float) -> int:
    rows = []
    for p in paths:
        rows += records.read_sweep_csv(p)
    table = build_report(rows, leaky_slope)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for t in table:
            w.writerow([records.cell(t[c]) for c in REPORT_COLUMNS])
    text = format_report(table, leaky_slope)
    (out / "report.txt").write_text(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="leakybnn", description="Leaky-ReLU Bayesian NN experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="config file of dotted key = value lines")
        p.add_argument("--out", type=Path, help="output directory (default: run.out)")
        p.add_argument("--jobs", type=int, default=1, help="parallel trials")
        p.add_argument("overrides", nargs="*", metavar="key=value")

    p = sub.add_parser("train", help="train one MAP or MFVI model")
    common(p)
    p.add_argument("--mode", choices=["map", "mfvi"])
    p = sub.add_parser("probe", help="likelihood-profile survey of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--layer", type=int)
    p.add_argument("-K", "--weights", type=int)
    p = sub.add_parser("sweep", help="MFVI over slopes x seeds")
    common(p)
    p = sub.add_parser("decal", help="per-epoch validation curves per slope")
    common(p)
    p = sub.add_parser("report", help="aggregate sweep CSVs into a comparison table")
    p.add_argument("csvs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--leaky-slope", type=float, default=-0.5)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    # overrides may follow options, where argparse leaves them unparsed
    stray = [e for e in extra if e.startswith("-")]
    if stray or (extra and args.command == "report"):
        parser.error(f"unrecognized arguments: {' '.join(stray or extra)}")
    if extra:
        args.overrides = list(args.overrides) + extra
    try:
        if args.command == "report":
            args.out.mkdir(parents=True, exist_ok=True)
            return cmd_report(args.csvs, args.out, args.leaky_slope)
        overrides = list(args.overrides)
        if getattr(args, "mode", None):
            overrides.append(f"run.mode={args.mode}")
        if getattr(args, "layer", None) is not None:
            overrides.append(f"probe.layer={args.layer}")
        if getattr(args, "weights", None) is not None:
            overrides.append(f"probe.weights={args.weights}")
        bad = [o for o in overrides if "=" not in o]
        if bad:
            raise LeakyBNNError(f"overrides must look like key=value: {bad}")
        cfg = load_config(args.config, overrides)
        out = args.out or Path(cfg.run.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "probe":
            return cmd_probe(cfg, out, args.checkpoint)
        if args.command == "sweep":
            return cmd_sweep(cfg, out, args.jobs)
        return cmd_decal(cfg, out, args.jobs)
    except (LeakyBNNError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
