"""Desk-scale experiment templates shared by the command line and the acceptance suite.

Each ``run_*`` function takes a resolved config (see :mod:`studentflow.config`),
writes everything into ``cfg["out"]`` and returns a report dict. Every output
directory holds the resolved ``config.json``, a plain-text ``run.log``, metrics
CSVs and JSON checkpoints. Metrics are bitwise reproducible for a fixed config
and seed because all randomness flows from :func:`studentflow.special.make_rng`.

Random streams per seed ``s``: data generation ``(s, 10)``, split ``(s, 11)``,
train/val contamination ``(s, 12)``, test contamination ``(s, 13)``,
dequantisation ``(s, 14)``; model initialization uses ``s`` directly and the
trainer draws its batches from ``(s, 1)``.
"""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import save_model
from .config import (
    ConfigError,
    dump_config,
    outlier_kind_from,
    parse_nu,
    train_config_from,
)
from .data import (
    DataError,
    Dataset,
    UniformBox,
    dequantize,
    downsample,
    gen_rings,
    gen_two_moons,
    inject_outliers,
    load_idx,
    split_dataset,
)
from .flow import build_flow
from .robust import emit_fig1_curves
from .special import make_rng
from .svg import Series, write_panels
from .trainer import CONVERGED, DIVERGED, Clip, Constant, evaluate, to_bits_per_dim, train

log = logging.getLogger("studentflow")

STREAM_DATA, STREAM_SPLIT, STREAM_OUTLIERS, STREAM_TEST_OUTLIERS, STREAM_DEQUANT = 10, 11, 12, 13, 14


# -- run directory plumbing -----------------------------------------------------------------

@contextlib.contextmanager
def run_directory(cfg: dict):
    """Create the output directory, write the resolved config and log to ``run.log``."""
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(handler)
    old_level = log.level
    log.setLevel(logging.INFO)
    try:
        log.info("experiment %s seed %s", cfg["experiment"], cfg["seed"])
        yield out
        log.info("done")
    except Exception as err:
        log.error("failed: %s: %s", type(err).__name__, err)
        raise
    finally:
        log.removeHandler(handler)
        log.setLevel(old_level)
        handler.close()


def _write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def _nu_label(nu: float) -> str:
    return "inf" if math.isinf(nu) else f"{nu:g}"


# -- data --------------------------------------------------------------------------------------

def _is_image(cfg) -> bool:
    return cfg["data"]["source"] == "idx"


def _load_image_rows(cfg, path):
    ds = load_idx(path)
    if ds.X.ndim != 3:
        raise DataError(f"{path}: expected N x H x W images, got shape {ds.X.shape}")
    size = cfg["data"]["downsample"]
    return (downsample(ds, size) if size else ds).X


def build_dataset(cfg: dict, seed: int) -> Dataset:
    """The clean, split dataset for ``seed`` (integer-valued for image sources)."""
    d = cfg["data"]
    if d["source"] == "two_moons":
        ds = gen_two_moons(d["n"], d["noise_sd"], make_rng(seed, STREAM_DATA))
    elif d["source"] == "rings":
        ds = gen_rings(d["n"], tuple(d["radii"]), d["noise_sd"], make_rng(seed, STREAM_DATA))
    else:
        ds = load_idx(d["path"])
        if ds.X.ndim != 3:
            raise DataError(f"{d['path']}: expected N x H x W images, got shape {ds.X.shape}")
        if d["downsample"]:
            ds = downsample(ds, d["downsample"])
    return split_dataset(ds, tuple(d["split"]), make_rng(seed, STREAM_SPLIT))


class _Quantized:
    """Floor outlier draws onto the integer grid ``[0, 2**bits)`` so they can be dequantised."""

    def __init__(self, kind, bits):
        self.kind, self.bits = kind, bits

    def draw(self, m, row_shape, rng):
        return np.clip(np.floor(self.kind.draw(m, row_shape, rng)), 0, 2**self.bits - 1)

    def __repr__(self):
        return f"Quantized({self.kind!r}, bits={self.bits})"


def outlier_kind(cfg: dict, row_shape):
    kind = outlier_kind_from(cfg, row_shape, lambda p: _load_image_rows(cfg, p) if _is_image(cfg)
                             else _load_flat_rows(p))
    if _is_image(cfg):
        bits = cfg["data"]["bits"]
        if isinstance(kind, UniformBox):
            # noise images centered in the pixel range; scale is the half-width in pixel units
            kind = UniformBox(kind.scale, center=2 ** (bits - 1))
        kind = _Quantized(kind, bits)
    return kind


def _load_flat_rows(path):
    try:
        rows = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as err:
        raise DataError(f"{path}: cannot read foreign rows: {err}") from err
    return rows


def contaminate(cfg: dict, ds: Dataset, seed: int, fraction: float, targets, stream: int) -> Dataset:
    if fraction == 0:
        return ds
    kind = outlier_kind(cfg, ds.row_shape)
    return inject_outliers(ds, fraction, kind, tuple(targets), make_rng(seed, stream))


def finalize(cfg: dict, ds: Dataset, seed: int) -> Dataset:
    """Dequantise image data and add the channel axis; toy data passes through."""
    if not _is_image(cfg):
        return ds
    ds = dequantize(ds, cfg["data"]["bits"], make_rng(seed, STREAM_DEQUANT))
    return replace(ds, X=ds.X[:, None, :, :])


def _outlier_audit(ds: Dataset) -> list:
    return [{"split": r["split"], "kind": r["kind"], "rows": r["rows"]}
            for r in ds.meta.get("outliers", [])]


# -- models ----------------------------------------------------------------------------------

def build_model(cfg: dict, ds: Dataset, seed: int, base: str | None = None, nu: float | None = None):
    m = cfg["model"]
    base = base or m["base"]
    nu = parse_nu(m["nu"], "model.nu") if nu is None and base in ("student_t", "t", "student") else nu
    try:
        return build_flow(ds.row_shape, base, nu, K=m["K"], L=m["L"], hidden=m["hidden"],
                          activation=m["activation"], seed=seed, actnorm=m["actnorm"])
    except ValueError as err:
        raise ConfigError("model", str(err)) from err


def _train_and_save(model, ds, tcfg, out: Path, label: str, checkpoint_every: int = 0):
    out.mkdir(parents=True, exist_ok=True)

    def on_eval(rec):
        if checkpoint_every and rec["step"] % checkpoint_every == 0:
            save_model(model, out / f"model_step{rec['step']}.json")

    metrics = train(model, ds, tcfg, on_eval)
    metrics.to_csv(out / "metrics.csv")
    save_model(model, out / "model.json")
    final = metrics.final
    log.info("%s: %s after %d steps, val %.6g %s, max grad norm %.4g, clipped steps %d",
             label, metrics.status, final["step"], final["val_nll"], metrics.units,
             metrics.max_grad_norm, metrics.clipped_steps)
    return metrics


# -- fig1 ------------------------------------------------------------------------------------------

def run_fig1(cfg: dict) -> dict:
    f = cfg["fig1"]
    with run_directory(cfg) as out:
        curves, files = emit_fig1_curves(out, f["half_width"], f["step"], parse_nu(f["nu"], "fig1.nu"),
                                         f["plot_range"])
        for c in curves:
            log.info("%s: max |psi| on grid %.6g", c.label, float(np.abs(c.psi).max()))
    return {"out": str(out), "files": [str(p) for p in files], "diverged": False}


# -- single training run ---------------------------------------------------------------------

def run_train_single(cfg: dict) -> dict:
    seed = cfg["seed"]
    o = cfg["data"]["outliers"]
    with run_directory(cfg) as out:
        ds = build_dataset(cfg, seed)
        ds = contaminate(cfg, ds, seed, o["fraction"], o["targets"], STREAM_OUTLIERS)
        ds = finalize(cfg, ds, seed)
        log.info("data: %s rows, row shape %s, %d contaminated", len(ds), ds.row_shape,
                 int(ds.contamination.sum()))
        model = build_model(cfg, ds, seed)
        metrics = _train_and_save(model, ds, train_config_from(cfg), out, "train",
                                  cfg["train"]["checkpoint_every"])
        X_test = ds.rows("test").astype(float)
        bits = cfg["data"]["bits"] if _is_image(cfg) else None
        test_nll = to_bits_per_dim(evaluate(model, X_test), bits) if len(X_test) else math.nan
        summary = {
            "status": metrics.status,
            "diverged_at": metrics.diverged_at,
            "message": metrics.message,
            "units": metrics.units,
            "final": {k: float(v) for k, v in metrics.final.items()},
            "best_val": {k: float(v) for k, v in metrics.best.items()},
            "test_nll": test_nll,
            "max_grad_norm": metrics.max_grad_norm,
            "clipped_steps": metrics.clipped_steps,
            "contaminated_rows": _outlier_audit(ds),
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"out": str(out), "metrics": metrics, "model": model, "summary": summary,
            "diverged": metrics.status == DIVERGED}


# -- stability matrix ----------------------------------------------------------------------

STABILITY_HEADER = ["lr_label", "lr", "variant", "base", "nu", "clip_norm", "seed", "status",
                    "diverged_at", "final_val_nll", "best_val_nll", "final_train_nll",
                    "max_grad_norm", "clipped_steps"]


def _stability_variants(s: dict):
    nu = parse_nu(s["nu"], "stability.nu")
    return [
        ("gaussian", "gaussian", None, None),
        ("gaussian_clip", "gaussian", None, Clip(norm=float(s["clip_norm"]))),
        ("student_t", "student_t", nu, None),
    ]


def run_stability(cfg: dict) -> dict:
    """Train {Gaussian, Gaussian + norm clipping, Student-t} at a low and a high constant lr.

    The same contaminated dataset is used by every variant of a seed. The
    report counts, at the high lr, seeds where the plain Gaussian run diverged
    or ended with a validation NLL at least ``ratio`` times the t run's.
    """
    s = cfg["stability"]
    o = cfg["data"]["outliers"]
    rows, curves = [], {}
    with run_directory(cfg) as out:
        for seed in s["seeds"]:
            ds = build_dataset(cfg, seed)
            ds = contaminate(cfg, ds, seed, o["fraction"], o["targets"], STREAM_OUTLIERS)
            ds = finalize(cfg, ds, seed)
            for lr_label, lr in (("low", float(s["low_lr"])), ("high", float(s["high_lr"]))):
                for variant, base, nu, clip in _stability_variants(s):
                    tcfg = train_config_from(cfg, seed=seed, lr_schedule=Constant(lr), clip=clip)
                    model = build_model(cfg, ds, seed, base, nu)
                    run_dir = out / lr_label / variant / f"seed{seed}"
                    metrics = _train_and_save(model, ds, tcfg, run_dir, f"{lr_label}/{variant}/seed{seed}")
                    rows.append({
                        "lr_label": lr_label, "lr": lr, "variant": variant, "base": base,
                        "nu": None if nu is None else _nu_label(nu),
                        "clip_norm": None if clip is None else clip.norm, "seed": seed,
                        "status": metrics.status, "diverged_at": metrics.diverged_at,
                        "final_val_nll": float(metrics.final_val_nll),
                        "best_val_nll": float(metrics.best["val_nll"]),
                        "final_train_nll": float(metrics.final["train_nll"]),
                        "max_grad_norm": float(metrics.max_grad_norm),
                        "clipped_steps": metrics.clipped_steps,
                    })
                    curves[(lr_label, variant, seed)] = metrics.records
            with (out / f"contamination_seed{seed}.json").open("w") as fh:
                json.dump({"seed": seed, "outliers": _outlier_audit(ds)}, fh, indent=1)
        _write_csv(out / "summary.csv", STABILITY_HEADER, ([r[k] for k in STABILITY_HEADER] for r in rows))
        report = stability_outcome(rows, float(s["ratio"]))
        (out / "outcome.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        for lr_label in ("low", "high"):
            _stability_chart(out / f"loss_{lr_label}.svg", curves, lr_label, s)
        log.info("outcome: %s", json.dumps(report, sort_keys=True))
    return {"out": str(out), "rows": rows, "outcome": report,
            "diverged": any(r["status"] == DIVERGED for r in rows)}


def stability_outcome(rows: list, ratio: float = 1.5) -> dict:
    """Per-lr counts used to judge the stability experiment."""
    out = {}
    for lr_label in sorted({r["lr_label"] for r in rows}):
        by = {(r["variant"], r["seed"]): r for r in rows if r["lr_label"] == lr_label}
        seeds = sorted({seed for _, seed in by})
        unstable = 0
        for seed in seeds:
            g, t = by.get(("gaussian", seed)), by.get(("student_t", seed))
            if g is None or t is None:
                continue
            if g["status"] == DIVERGED or (t["status"] == CONVERGED and
                                           g["final_val_nll"] >= ratio * t["final_val_nll"]):
                unstable += 1
        out[lr_label] = {
            "seeds": len(seeds),
            "gaussian_unstable": unstable,
            "converged": {v: sum(1 for (vv, _), r in by.items() if vv == v and r["status"] == CONVERGED)
                          for v in sorted({v for v, _ in by})},
        }
    return out


def _stability_chart(path, curves, lr_label, s):
    panels = []
    for variant, _, _, _ in _stability_variants(s):
        series = []
        for seed in s["seeds"]:
            recs = curves.get((lr_label, variant, seed), [])
            if not recs:
                continue
            start = recs[0]["train_nll"]
            cap = 10 * abs(start) if math.isfinite(start) and start != 0 else 100.0
            ys = [min(r["train_nll"], cap) if math.isfinite(r["train_nll"]) else cap for r in recs]
            series.append(Series(f"seed {seed}", [r["step"] for r in recs], ys))
        panels.append((variant, series))
    write_panels(path, panels, title=f"Training NLL, {lr_label} lr", xlabel="step", ylabel="NLL")


# -- contamination grid ----------------------------------------------------------------------

GRID_CONDITIONS = (("clean", "clean"), ("clean", "outliers"), ("outliers", "clean"), ("outliers", "outliers"))


def _grid_cell(args):
    """Train one (seed, train condition, nu) model and score it on both test sets."""
    cfg, seed, train_cond, nu, out_dir = args
    g = cfg["grid"]
    clean = build_dataset(cfg, seed)
    targets = [t for t in cfg["data"]["outliers"]["targets"] if t != "test"] or ["train"]
    train_ds = clean if train_cond == "clean" else contaminate(
        cfg, clean, seed, g["fraction"], targets, STREAM_OUTLIERS)
    test_bad = contaminate(cfg, clean, seed, g["fraction"], ["test"], STREAM_TEST_OUTLIERS)
    train_ds, clean_f, test_bad = (finalize(cfg, d, seed) for d in (train_ds, clean, test_bad))
    gaussian = math.isinf(nu)
    base = "gaussian" if gaussian else "student_t"
    # norm clipping for the conventional flow only
    clip = Clip(norm=float(g["clip_norm"])) if gaussian else train_config_from(cfg).clip
    tcfg = train_config_from(cfg, seed=seed, clip=clip)
    model = build_model(cfg, train_ds, seed, base, None if gaussian else nu)
    label = f"train_{train_cond}/nu_{_nu_label(nu)}/seed{seed}"
    metrics = _train_and_save(model, train_ds, tcfg, Path(out_dir) / label, label)
    bits = cfg["data"]["bits"] if _is_image(cfg) else None
    scores = {
        "clean": to_bits_per_dim(evaluate(model, clean_f.rows("test").astype(float)), bits),
        "outliers": to_bits_per_dim(evaluate(model, test_bad.rows("test").astype(float)), bits),
    }
    audit = {"train": _outlier_audit(train_ds), "test": _outlier_audit(test_bad)}
    return {"seed": seed, "train": train_cond, "nu": nu, "status": metrics.status,
            "diverged_at": metrics.diverged_at, "scores": scores, "audit": audit,
            "units": metrics.units}


def run_contamination_grid(cfg: dict) -> dict:
    """Clean/contaminated training crossed with clean/contaminated test sets, for each nu.

    Writes ``table.csv`` (means over seeds, one row per train/test pair, with
    deltas relative to the Gaussian base), ``runs.csv`` (every cell and seed)
    and ``contamination.json`` (contaminated row indices per seed).
    """
    g = cfg["grid"]
    nus = [parse_nu(v, "grid.nus") for v in g["nus"]]
    with run_directory(cfg) as out:
        jobs = [(cfg, seed, cond, nu, str(out)) for seed in g["seeds"] for cond in ("clean", "outliers")
                for nu in nus]
        if cfg["workers"] > 1:
            with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
                cells = list(pool.map(_grid_cell, jobs))
            for c in cells:
                log.info("train_%s/nu_%s/seed%d: %s", c["train"], _nu_label(c["nu"]), c["seed"], c["status"])
        else:
            cells = [_grid_cell(job) for job in jobs]
        units = cells[0]["units"] if cells else "nats/dim"
        runs = []
        for c in cells:
            for test_cond, nll in c["scores"].items():
                ref = next(x for x in cells if x["seed"] == c["seed"] and x["train"] == c["train"]
                           and math.isinf(x["nu"]))["scores"][test_cond]
                runs.append([c["train"], test_cond, _nu_label(c["nu"]), c["seed"], c["status"],
                             float(nll), float(nll - ref)])
        _write_csv(out / "runs.csv", ["train", "test", "nu", "seed", "status", "nll", "delta"], runs)
        table = grid_table(runs, nus)
        header = ["train", "test"]
        for nu in nus:
            header += [f"nll_nu={_nu_label(nu)}", f"delta_nu={_nu_label(nu)}"]
        _write_csv(out / "table.csv", header, ([r["train"], r["test"]] + [
            v for nu in nus for v in (r["nll"][_nu_label(nu)], r["delta"][_nu_label(nu)])] for r in table))
        audit = {"units": units, "seeds": list(g["seeds"]), "fraction": g["fraction"],
                 "streams": {"train_val_outliers": STREAM_OUTLIERS, "test_outliers": STREAM_TEST_OUTLIERS},
                 "cells": [{"seed": c["seed"], "train": c["train"], "nu": _nu_label(c["nu"]),
                            "outliers": c["audit"]} for c in cells if math.isinf(c["nu"])]}
        (out / "contamination.json").write_text(json.dumps(audit, indent=1, sort_keys=True) + "\n")
        log.info("table (%s): %s", units, json.dumps(table, sort_keys=True))
    return {"out": str(out), "table": table, "runs": runs, "units": units,
            "diverged": any(c["status"] == DIVERGED for c in cells)}


def grid_table(runs: list, nus) -> list:
    """Mean NLL and mean delta over seeds for each (train, test) pair and nu."""
    table = []
    for train_cond, test_cond in GRID_CONDITIONS:
        row = {"train": train_cond, "test": test_cond, "nll": {}, "delta": {}}
        for nu in nus:
            sel = [r for r in runs if r[0] == train_cond and r[1] == test_cond and r[2] == _nu_label(nu)]
            row["nll"][_nu_label(nu)] = float(np.mean([r[5] for r in sel])) if sel else math.nan
            row["delta"][_nu_label(nu)] = float(np.mean([r[6] for r in sel])) if sel else math.nan
        table.append(row)
    return table


RUNNERS = {
    "fig1": run_fig1,
    "train": run_train_single,
    "stability": run_stability,
    "grid": run_contamination_grid,
}
