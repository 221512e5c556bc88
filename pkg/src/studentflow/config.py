"""Experiment configuration: JSON files, dotted overrides and validation.

A config is a nested dict of plain JSON values. :func:`default_config`
returns the fully populated defaults for one experiment; a user file only
needs the fields it changes. Overrides use dotted paths such as
``train.max_steps=200`` or ``model.nu=inf``; the value is parsed as JSON
when possible and kept as a string otherwise.

Infinite degrees of freedom are written ``"inf"`` (JSON has no infinity);
``null`` and ``"inf"`` both select the Gaussian base.
"""
from __future__ import annotations

import copy
import json
import math
from pathlib import Path

from .data import ForeignDataset, ShiftedCluster, UniformBox
from .trainer import Clip, Constant, Cosine, Noam, TrainConfig

EXPERIMENTS = ("fig1", "train", "stability", "grid")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


_COMMON = {
    "seed": 0,
    "out": "runs",
    "workers": 1,
    "data": {
        "source": "two_moons",  # two_moons | rings | idx
        "n": 2500,
        "noise_sd": 0.1,
        "radii": [1.0, 2.0, 3.0],
        "path": None,
        "downsample": None,  # side length after average pooling, idx only
        "bits": 8,
        "split": [0.8, 0.1, 0.1],
        "outliers": {
            "fraction": 0.0,
            "kind": "uniform_box",  # uniform_box | shifted_cluster | foreign
            "scale": 10.0,
            "offset": [6.0, 6.0],
            "sd": 0.5,
            "path": None,
            "targets": ["train", "val"],
        },
    },
    "model": {
        "base": "student_t",
        "nu": 50.0,
        "K": 6,
        "L": 1,
        "hidden": 64,
        "activation": "tanh",
        "actnorm": True,
    },
    "train": {
        "lr_schedule": {"kind": "constant", "lr": 1e-3},
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "clip": {"kind": "none"},
        "batch_size": 256,
        "max_steps": 1000,
        "eval_every": 100,
        "init_rows": 512,
        "record_wallclock": False,
        "checkpoint_every": 0,  # extra checkpoints at eval steps that are multiples; 0 = final only
    },
}

_SECTIONS = {
    "fig1": {"nu": 5.0, "half_width": 50.0, "step": 0.01, "plot_range": 4.0},
    "stability": {
        "high_lr": 5e-3,
        "low_lr": 1e-4,
        "nu": 50.0,
        "clip_norm": 100.0,
        "seeds": [0, 1, 2, 3, 4],
        "ratio": 1.5,
    },
    "grid": {
        "nus": ["inf", 20.0, 50.0, 1000.0],
        "fraction": 0.01,
        "seeds": [0, 1, 2],
        "clip_norm": 100.0,
    },
}

# experiment-specific defaults layered over the common ones
_OVERRIDES = {
    "fig1": {},
    "train": {},
    "stability": {
        "data": {"noise_sd": 0.02, "outliers": {"fraction": 0.02, "scale": 10.0}},
        "train": {"max_steps": 3000, "eval_every": 150},
    },
    "grid": {
        "data": {"source": "rings", "n": 5000, "noise_sd": 0.1,
                 "outliers": {"fraction": 0.01, "scale": 4.0}},
        "model": {"K": 4, "hidden": 32},
        "train": {"max_steps": 5000, "eval_every": 500,
                  "lr_schedule": {"kind": "cosine", "lr_start": 3e-3, "lr_end": 1e-4,
                                  "total_steps": 5000}},
    },
}


def merge(base: dict, update: dict, path: str = "") -> dict:
    """Recursively overlay ``update`` on a copy of ``base``; unknown keys are errors."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(where, "unknown field")
        if isinstance(out[key], dict) and key != "lr_schedule" and key != "clip":
            if not isinstance(value, dict):
                raise ConfigError(where, f"expected an object, got {value!r}")
            out[key] = merge(out[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def default_config(experiment: str) -> dict:
    if experiment not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    cfg = {"experiment": experiment, **copy.deepcopy(_COMMON)}
    if experiment in _SECTIONS:
        cfg[experiment] = copy.deepcopy(_SECTIONS[experiment])
    return merge(cfg, _OVERRIDES[experiment])


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError("--config", f"cannot read {path}: {err.strerror}") from err
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError("--config", f"{path}: invalid JSON at line {err.lineno} column {err.colno} "
                                      f"(offset {err.pos}): {err.msg}") from err
    if not isinstance(obj, dict):
        raise ConfigError("--config", f"{path}: top level must be an object")
    return obj


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply one ``dotted.path=value`` override in place."""
    key, sep, raw = assignment.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError("--set", f"expected key=value, got {assignment!r}")
    parts = key.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(".".join(parts[: i + 1]), "unknown field")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or (leaf not in node and not _free_form(parts)):
        raise ConfigError(key, "unknown field")
    node[leaf] = _parse_value(raw)
    return cfg


def _free_form(parts) -> bool:
    # schedule and clip objects have kind-dependent fields
    return len(parts) >= 2 and parts[-2] in ("lr_schedule", "clip")


def resolve_config(experiment: str, file_cfg: dict | None = None, overrides=(),
                   seed: int | None = None, out: str | None = None) -> dict:
    """Defaults, then the file, then ``--set`` overrides, then ``--seed``/``--out``; validated."""
    cfg = default_config(experiment)
    if file_cfg:
        file_cfg = dict(file_cfg)
        named = file_cfg.pop("experiment", experiment)
        if named != experiment:
            raise ConfigError("experiment", f"config file is for {named!r}, command is {experiment!r}")
        cfg = merge(cfg, file_cfg)
    for assignment in overrides:
        apply_override(cfg, assignment)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    validate(cfg)
    return cfg


# -- validation and conversion ---------------------------------------------------------------

def _num(cfg, path, lo=None, hi=None, integer=False, allow_inf=False):
    node = cfg
    for part in path.split("."):
        node = node[part]
    value = node
    if allow_inf and (value is None or (isinstance(value, str) and value.lower() in ("inf", "infinity"))):
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if not math.isfinite(value) and not allow_inf:
        raise ConfigError(path, f"expected a finite number, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(path, f"must be >= {lo}, got {value!r}")
    if hi is not None and value > hi:
        raise ConfigError(path, f"must be <= {hi}, got {value!r}")
    return int(value) if integer else float(value)


def parse_nu(value, field: str) -> float:
    if value is None or (isinstance(value, str) and value.lower() in ("inf", "infinity")):
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
        raise ConfigError(field, f"degrees of freedom must be > 0 or \"inf\", got {value!r}")
    return float(value)


def _choice(value, field, options):
    if value not in options:
        raise ConfigError(field, f"expected one of {options}, got {value!r}")
    return value


def schedule_from(obj: dict, field: str = "train.lr_schedule"):
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError(field, "expected an object with a 'kind'")
    kind = _choice(obj["kind"], f"{field}.kind", ("constant", "cosine", "noam"))
    wanted = {"constant": ("lr",), "cosine": ("lr_start", "lr_end", "total_steps"),
              "noam": ("peak", "floor", "warmup")}[kind]
    extra = set(obj) - set(wanted) - {"kind"}
    if extra:
        raise ConfigError(f"{field}.{sorted(extra)[0]}", f"unknown field for a {kind} schedule")
    vals = {}
    for name in wanted:
        if name not in obj:
            raise ConfigError(f"{field}.{name}", "missing")
        vals[name] = _check_num(obj[name], f"{field}.{name}", integer=name in ("total_steps", "warmup"))
    if kind == "constant":
        return Constant(vals["lr"])
    if kind == "cosine":
        if vals["total_steps"] < 1:
            raise ConfigError(f"{field}.total_steps", "must be >= 1")
        return Cosine(vals["lr_start"], vals["lr_end"], vals["total_steps"])
    if vals["warmup"] < 1:
        raise ConfigError(f"{field}.warmup", "must be >= 1")
    return Noam(vals["peak"], vals["floor"], vals["warmup"])


def _check_num(value, field, integer=False, lo=0.0):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(field, f"expected a finite number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(field, f"expected an integer, got {value!r}")
    if value < lo:
        raise ConfigError(field, f"must be >= {lo}, got {value!r}")
    return int(value) if integer else float(value)


def clip_from(obj: dict, field: str = "train.clip") -> Clip | None:
    if obj is None:
        return None
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError(field, "expected an object with a 'kind'")
    kind = _choice(obj["kind"], f"{field}.kind", ("none", "norm", "element", "both"))
    if kind == "none":
        return None
    if kind == "both":
        for name in ("norm", "element"):
            if name not in obj:
                raise ConfigError(f"{field}.{name}", "missing")
        return Clip(norm=_check_num(obj["norm"], f"{field}.norm"),
                    element=_check_num(obj["element"], f"{field}.element"))
    if "threshold" not in obj:
        raise ConfigError(f"{field}.threshold", "missing")
    t = _check_num(obj["threshold"], f"{field}.threshold")
    return Clip(norm=t) if kind == "norm" else Clip(element=t)


def train_config_from(cfg: dict, seed: int | None = None, **changes) -> TrainConfig:
    t = cfg["train"]
    betas = t["betas"]
    if not (isinstance(betas, list) and len(betas) == 2):
        raise ConfigError("train.betas", f"expected two numbers, got {betas!r}")
    b1 = _check_num(betas[0], "train.betas[0]")
    b2 = _check_num(betas[1], "train.betas[1]")
    if not (b1 < 1 and b2 < 1):
        raise ConfigError("train.betas", "each beta must be < 1")
    kwargs = dict(
        lr_schedule=schedule_from(t["lr_schedule"]),
        betas=(b1, b2),
        eps=_num(cfg, "train.eps", lo=0),
        clip=clip_from(t["clip"]),
        batch_size=_num(cfg, "train.batch_size", lo=1, integer=True),
        max_steps=_num(cfg, "train.max_steps", lo=0, integer=True),
        eval_every=_num(cfg, "train.eval_every", lo=1, integer=True),
        seed=cfg["seed"] if seed is None else seed,
        init_rows=_num(cfg, "train.init_rows", lo=2, integer=True),
        record_wallclock=bool(t["record_wallclock"]),
    )
    kwargs.update(changes)
    return TrainConfig(**kwargs)


def outlier_kind_from(cfg: dict, row_shape, load_rows=None):
    o = cfg["data"]["outliers"]
    kind = _choice(o["kind"], "data.outliers.kind", ("uniform_box", "shifted_cluster", "foreign"))
    if kind == "uniform_box":
        return UniformBox(_num(cfg, "data.outliers.scale", lo=0))
    if kind == "shifted_cluster":
        offset = o["offset"]
        if not isinstance(offset, list) or len(offset) != int(_prod(row_shape)):
            raise ConfigError("data.outliers.offset",
                              f"expected a list of {int(_prod(row_shape))} numbers, got {offset!r}")
        return ShiftedCluster([_check_num(v, "data.outliers.offset", lo=-math.inf) for v in offset],
                              _num(cfg, "data.outliers.sd", lo=0))
    if not o["path"]:
        raise ConfigError("data.outliers.path", "foreign outliers need a path")
    return ForeignDataset(load_rows(o["path"]))


def _prod(shape):
    out = 1
    for s in shape:
        out *= s
    return out


def validate(cfg: dict) -> None:
    """Check every field the experiments read; raises :class:`ConfigError`."""
    if not isinstance(cfg.get("seed"), int) or isinstance(cfg["seed"], bool) or not 0 <= cfg["seed"] < 2**63:
        raise ConfigError("seed", f"expected a non-negative integer, got {cfg.get('seed')!r}")
    if not isinstance(cfg["out"], str) or not cfg["out"]:
        raise ConfigError("out", "expected a directory path")
    _num(cfg, "workers", lo=1, integer=True)
    d = cfg["data"]
    _choice(d["source"], "data.source", ("two_moons", "rings", "idx"))
    if d["source"] == "idx":
        if not d["path"]:
            raise ConfigError("data.path", "idx data needs a path")
        if d["downsample"] is not None:
            _num(cfg, "data.downsample", lo=1, integer=True)
    else:
        _num(cfg, "data.n", lo=10, integer=True)
        _num(cfg, "data.noise_sd", lo=0)
    if not isinstance(d["radii"], list) or not d["radii"]:
        raise ConfigError("data.radii", "expected a non-empty list")
    for i, r in enumerate(d["radii"]):
        _check_num(r, f"data.radii[{i}]")
    _num(cfg, "data.bits", lo=1, hi=16, integer=True)
    split = d["split"]
    if not isinstance(split, list) or len(split) != 3:
        raise ConfigError("data.split", f"expected three fractions, got {split!r}")
    if abs(sum(_check_num(v, "data.split") for v in split) - 1.0) > 1e-9:
        raise ConfigError("data.split", "fractions must sum to 1")
    _num(cfg, "data.outliers.fraction", lo=0, hi=0.5)
    _choice(d["outliers"]["kind"], "data.outliers.kind", ("uniform_box", "shifted_cluster", "foreign"))
    targets = d["outliers"]["targets"]
    if not isinstance(targets, list) or any(t not in ("train", "val", "test") for t in targets):
        raise ConfigError("data.outliers.targets", f"expected a list drawn from train/val/test, got {targets!r}")

    m = cfg["model"]
    from .base import KINDS
    base = m["base"]
    if base in ("t", "student"):
        base = "student_t"
    _choice(base, "model.base", KINDS)
    if base == "student_t":
        parse_nu(m["nu"], "model.nu")
    _num(cfg, "model.K", lo=1, integer=True)
    _num(cfg, "model.L", lo=1, integer=True)
    _num(cfg, "model.hidden", lo=1, integer=True)
    _choice(m["activation"], "model.activation", ("tanh", "relu"))
    if not isinstance(m["actnorm"], bool):
        raise ConfigError("model.actnorm", "expected true or false")
    train_config_from(cfg)
    _num(cfg, "train.checkpoint_every", lo=0, integer=True)

    exp = cfg["experiment"]
    if exp == "fig1":
        f = cfg["fig1"]
        if not parse_nu(f["nu"], "fig1.nu") > 2 or math.isinf(parse_nu(f["nu"], "fig1.nu")):
            raise ConfigError("fig1.nu", "the variance-1 t curve needs a finite nu > 2")
        _num(cfg, "fig1.half_width", lo=1e-9)
        _num(cfg, "fig1.step", lo=1e-9)
        _num(cfg, "fig1.plot_range", lo=1e-9)
    elif exp == "stability":
        _num(cfg, "stability.high_lr", lo=0)
        _num(cfg, "stability.low_lr", lo=0)
        parse_nu(cfg["stability"]["nu"], "stability.nu")
        _num(cfg, "stability.clip_norm", lo=0)
        _num(cfg, "stability.ratio", lo=0)
        _seeds(cfg, "stability.seeds")
    elif exp == "grid":
        nus = cfg["grid"]["nus"]
        if not isinstance(nus, list) or not nus:
            raise ConfigError("grid.nus", "expected a non-empty list")
        parsed = [parse_nu(v, f"grid.nus[{i}]") for i, v in enumerate(nus)]
        if math.inf not in parsed:
            raise ConfigError("grid.nus", "deltas are relative to nu=inf, which must be in the list")
        _num(cfg, "grid.fraction", lo=0, hi=0.5)
        _num(cfg, "grid.clip_norm", lo=0)
        _seeds(cfg, "grid.seeds")


def _seeds(cfg, path):
    section, key = path.split(".")
    seeds = cfg[section][key]
    if not isinstance(seeds, list) or not seeds or any(
            isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in seeds):
        raise ConfigError(path, f"expected a non-empty list of non-negative integers, got {seeds!r}")
    return seeds


def dump_config(cfg: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path
