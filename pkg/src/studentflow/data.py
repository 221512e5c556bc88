"""Datasets: toy 2-D densities, outlier injection, IDX images, dequantisation, splits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .idx import read_idx

__all__ = [
    "Dataset",
    "UniformBox",
    "ShiftedCluster",
    "ForeignDataset",
    "gen_two_moons",
    "gen_rings",
    "inject_outliers",
    "load_idx",
    "downsample",
    "dequantize",
    "split_dataset",
]

SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Observations plus split indices and a per-row contamination mask."""

    X: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    contamination: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_array(cls, X, **meta) -> "Dataset":
        n = len(X)
        empty = np.zeros(0, dtype=np.int64)
        return cls(X, np.arange(n), empty, empty.copy(), np.zeros(n, dtype=bool), dict(meta))

    def __len__(self):
        return len(self.X)

    @property
    def row_shape(self) -> tuple[int, ...]:
        return tuple(self.X.shape[1:])

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise KeyError(f"unknown split {split!r}")
        return getattr(self, split)

    def rows(self, split: str) -> np.ndarray:
        return self.X[self.indices(split)]

    def check(self):
        n = len(self.X)
        allidx = np.concatenate([self.train, self.val, self.test])
        if allidx.size != n or not np.array_equal(np.sort(allidx), np.arange(n)):
            raise DataError("splits must be disjoint and cover every row")
        if self.contamination.shape != (n,):
            raise DataError("contamination mask length must equal the number of rows")


def _normalize(x: np.ndarray) -> tuple[np.ndarray, dict]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return (x - mean) / std, {"mean": mean.tolist(), "std": std.tolist()}


def gen_two_moons(n: int = 2000, noise_sd: float = 0.1, rng: np.random.Generator | None = None) -> Dataset:
    """Two interleaved half circles, standardized to zero mean and unit variance per axis."""
    if n < 10:
        raise DataError(f"n must be >= 10, got {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    n_outer = n // 2
    n_inner = n - n_outer
    t_out = rng.uniform(0.0, math.pi, n_outer)
    t_in = rng.uniform(0.0, math.pi, n_inner)
    outer = np.stack([np.cos(t_out), np.sin(t_out)], axis=1)
    inner = np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1)
    x = np.concatenate([outer, inner]) + noise_sd * rng.standard_normal((n, 2))
    x = x[rng.permutation(n)]
    x, norm = _normalize(x)
    return Dataset.from_array(x, source=f"two_moons(n={n}, noise_sd={noise_sd})", normalization=norm,
                              dequantized=False, bits=None)


def gen_rings(n: int = 2000, radii=(1.0, 2.0, 3.0), noise_sd: float = 0.1,
              rng: np.random.Generator | None = None) -> Dataset:
    """Concentric noisy circles, points split evenly across ``radii``; standardized."""
    if n < 10:
        raise DataError(f"n must be >= 10, got {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    radii = np.asarray(radii, dtype=float)
    which = np.arange(n) % radii.size
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    r = radii[which]
    x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    x = x + noise_sd * rng.standard_normal((n, 2))
    x = x[rng.permutation(n)]
    x, norm = _normalize(x)
    return Dataset.from_array(x, source=f"rings(n={n}, radii={radii.tolist()}, noise_sd={noise_sd})",
                              normalization=norm, dequantized=False, bits=None)


@dataclass(frozen=True)
class UniformBox:
    """Uniform draws from the cube ``[center - scale, center + scale]^D``."""

    scale: float
    center: float = 0.0

    def draw(self, m, row_shape, rng):
        return self.center + rng.uniform(-self.scale, self.scale, (m,) + tuple(row_shape))


@dataclass(frozen=True)
class ShiftedCluster:
    """Gaussian blob ``N(offset, sd^2 I)``; ``offset`` is a scalar or a row."""

    offset: object
    sd: float = 0.1

    def draw(self, m, row_shape, rng):
        off = np.broadcast_to(np.asarray(self.offset, dtype=float), row_shape)
        return off + self.sd * rng.standard_normal((m,) + tuple(row_shape))


@dataclass(frozen=True)
class ForeignDataset:
    """Rows taken from another dataset of the same row shape."""

    rows: np.ndarray

    def draw(self, m, row_shape, rng):
        rows = np.asarray(self.rows)
        if tuple(rows.shape[1:]) != tuple(row_shape):
            raise DataError(f"foreign rows have shape {rows.shape[1:]}, dataset rows {tuple(row_shape)}")
        pick = rng.choice(len(rows), size=m, replace=m > len(rows))
        return rows[pick]


def outlier_count(p: float, n: int) -> int:
    # guard against p*n landing a hair above an integer
    return int(math.ceil(round(p * n, 9)))


def inject_outliers(ds: Dataset, p: float, kind, targets=("train",), rng=None) -> Dataset:
    """Replace ``ceil(p * |split|)`` rows of each target split with outlier draws.

    Returns a new dataset; ``ds`` is untouched. The replaced rows and their
    original values are listed in ``meta["outliers"]``.
    """
    if not 0.0 <= p <= 0.5:
        raise DataError(f"outlier fraction must lie in [0, 0.5], got {p}")
    if isinstance(targets, str):
        targets = (targets,)
    if p == 0.0:
        return ds
    rng = rng if rng is not None else np.random.default_rng(0)
    X = ds.X.copy()
    mask = ds.contamination.copy()
    records = list(ds.meta.get("outliers", []))
    for split in targets:
        idx = ds.indices(split)
        m = outlier_count(p, idx.size)
        if m == 0:
            continue
        chosen = np.sort(rng.choice(idx, size=m, replace=False))
        draws = kind.draw(m, ds.row_shape, rng)
        records.append({"split": split, "kind": repr(kind) if not isinstance(kind, ForeignDataset)
                        else "ForeignDataset", "rows": chosen.tolist(), "original": X[chosen].copy()})
        X[chosen] = draws
        mask[chosen] = True
    meta = dict(ds.meta)
    meta["outliers"] = records
    return replace(ds, X=X, contamination=mask, meta=meta)


def load_idx(path) -> Dataset:
    """Read an IDX file into a dataset (images come back as N x H x W bytes)."""
    X = read_idx(path)
    return Dataset.from_array(X, source=f"idx:{path}", dequantized=False,
                              bits=8 if X.dtype == np.uint8 else None)


def downsample(ds: Dataset, size: int) -> Dataset:
    """Average-pool N x H x W images to ``size x size``.

    When ``H`` is not a multiple of ``size`` the image is first center-cropped
    to ``size * (H // size)`` (e.g. 28 -> 24 -> 8). Pooled values are
    rounded back to integers so they can still be dequantised.
    """
    X = np.asarray(ds.X)
    n, h, w = X.shape[:3]
    fh, fw = h // size, w // size
    if fh < 1 or fw < 1:
        raise DataError(f"cannot downsample {h}x{w} to {size}x{size}")
    top, left = (h - fh * size) // 2, (w - fw * size) // 2
    crop = X[:, top:top + fh * size, left:left + fw * size].astype(float)
    pooled = crop.reshape(n, size, fh, size, fw).mean(axis=(2, 4))
    out = np.rint(pooled).astype(X.dtype)
    meta = dict(ds.meta, downsample=f"{h}x{w}->{size}x{size}")
    return replace(ds, X=out, meta=meta)


def dequantize_values(x, u, bits: int = 8) -> np.ndarray:
    """``(x + u) / 2**bits``; ``u`` is the uniform noise."""
    return (np.asarray(x, dtype=float) + u) / float(2**bits)


def dequantize(ds: Dataset, bits: int = 8, rng: np.random.Generator | None = None) -> Dataset:
    """Uniform dequantisation of integer data in ``[0, 2**bits)`` to ``[0, 1)``.

    NLLs on the result convert to bits/dim via :func:`studentflow.trainer.to_bits_per_dim`,
    which adds the ``bits`` offset per dimension.
    """
    X = np.asarray(ds.X)
    xf = X.astype(float)
    if not np.all(xf == np.floor(xf)) or xf.min() < 0 or xf.max() >= 2**bits:
        raise DataError(f"dequantize needs integers in [0, {2**bits})")
    rng = rng if rng is not None else np.random.default_rng(0)
    u = rng.random(X.shape)
    out = dequantize_values(xf, u, bits)
    # (x + u) / 2**bits can round up to exactly 1.0 for u within an ulp of 1
    out = np.minimum(out, np.nextafter(1.0, 0.0))
    return replace(ds, X=out, meta=dict(ds.meta, dequantized=True, bits=bits))


def split_dataset(ds: Dataset, fractions=(0.8, 0.1, 0.1), rng: np.random.Generator | None = None) -> Dataset:
    """Shuffle rows into train/val/test index sets with the given fractions."""
    f = np.asarray(fractions, dtype=float)
    if f.shape != (3,) or np.any(f < 0) or not math.isclose(f.sum(), 1.0, abs_tol=1e-9):
        raise DataError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(ds.X)
    perm = rng.permutation(n)
    n_train = int(round(f[0] * n))
    n_val = min(int(round(f[1] * n)), n - n_train)
    out = replace(ds, train=np.sort(perm[:n_train]), val=np.sort(perm[n_train:n_train + n_val]),
                  test=np.sort(perm[n_train + n_val:]), meta=dict(ds.meta, split=f.tolist()))
    return out
