"""Penalty (rho) and influence (psi) functions of the base families in 1-D.

``rho(eps) = -log p(eps) + log p(0)`` and ``psi = d rho / d eps``. By default
the families have unit scale, matching the bases in :mod:`studentflow.base`.
With ``standardized=True`` each density is first rescaled to variance 1:
Student-t by ``sqrt((nu - 2) / nu)`` (needs ``nu > 2``), Laplace by
``1 / sqrt(2)``; the unit Gaussian already has variance 1.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .base import GAUSSIAN, LAPLACE, STUDENT_T, make_base
from .svg import Series, write_panels

__all__ = [
    "PenaltyCurve",
    "scale_for_unit_variance",
    "density",
    "penalty",
    "influence",
    "influence_bound",
    "emit_fig1_curves",
    "UNBOUNDED",
]

UNBOUNDED = math.inf
FAMILIES = (GAUSSIAN, LAPLACE, STUDENT_T)
FIG1_NU = 5.0  # artifact default; nu of the plotted t curve is a free choice


def _canonical(kind: str) -> str:
    kind = kind.lower().replace("-", "_")
    if kind in ("t", "student", "studentt"):
        kind = STUDENT_T
    if kind not in FAMILIES:
        raise ValueError(f"unknown family {kind!r}")
    return kind


def scale_for_unit_variance(kind: str, nu: float | None = None) -> float:
    kind = _canonical(kind)
    if kind == GAUSSIAN:
        return 1.0
    if kind == LAPLACE:
        return 1.0 / math.sqrt(2.0)
    if nu is None or not nu > 2.0:
        raise ValueError(f"standardized Student-t needs nu > 2 (finite variance), got {nu}")
    return math.sqrt((nu - 2.0) / nu)


def _scale(kind, nu, standardized):
    return scale_for_unit_variance(kind, nu) if standardized else 1.0


def _rho_unit(kind, nu, e):
    if kind == GAUSSIAN:
        return 0.5 * e * e
    if kind == LAPLACE:
        return np.abs(e)
    return 0.5 * (nu + 1.0) * np.log1p(e * e / nu)


def _psi_unit(kind, nu, e):
    if kind == GAUSSIAN:
        return e
    if kind == LAPLACE:
        return np.sign(e)
    return (nu + 1.0) * e / (nu + e * e)


def _out(v):
    return float(v) if np.ndim(v) == 0 else v


def density(kind: str, nu: float | None, eps, standardized: bool = False):
    """1-D density of the family, optionally rescaled to variance 1."""
    kind = _canonical(kind)
    c = _scale(kind, nu, standardized)
    e = np.asarray(eps, dtype=float) / c
    logp0 = make_base(kind, 1, nu).log_prob(np.zeros(1))
    return _out(np.exp(logp0 - _rho_unit(kind, nu, e)) / c)


def penalty(kind: str, nu: float | None, eps, standardized: bool = False):
    """``rho(eps)``, zero at ``eps = 0``."""
    kind = _canonical(kind)
    c = _scale(kind, nu, standardized)
    return _out(_rho_unit(kind, nu, np.asarray(eps, dtype=float) / c))


def influence(kind: str, nu: float | None, eps, standardized: bool = False):
    """``psi(eps) = d rho / d eps``; the Laplace family returns 0 at ``eps = 0``."""
    kind = _canonical(kind)
    c = _scale(kind, nu, standardized)
    return _out(_psi_unit(kind, nu, np.asarray(eps, dtype=float) / c) / c)


def influence_bound(kind: str, nu: float | None = None, standardized: bool = False) -> float:
    """``sup |psi|``: ``inf`` for the Gaussian, ``1`` for unit Laplace, ``(nu+1)/(2 sqrt(nu))`` for t."""
    kind = _canonical(kind)
    c = _scale(kind, nu, standardized)
    if kind == GAUSSIAN:
        return UNBOUNDED
    if kind == LAPLACE:
        return 1.0 / c
    # psi peaks at eps = sqrt(nu) (unit scale)
    return (nu + 1.0) / (2.0 * math.sqrt(nu)) / c


@dataclass
class PenaltyCurve:
    kind: str
    nu: float | None
    grid: np.ndarray
    density: np.ndarray
    rho: np.ndarray
    psi: np.ndarray
    standardized: bool = True

    @property
    def label(self) -> str:
        return f"student_t(nu={self.nu:g})" if self.kind == STUDENT_T else self.kind

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epsilon", "density", "penalty", "influence"])
            for row in zip(self.grid, self.density, self.rho, self.psi):
                w.writerow([repr(float(v)) for v in row])
        return path


def fig1_curves(half_width: float = 50.0, step: float = 0.01, nu: float = FIG1_NU,
                standardized: bool = True) -> list[PenaltyCurve]:
    n = int(round(half_width / step))
    grid = np.linspace(-half_width, half_width, 2 * n + 1)
    curves = []
    for kind in FAMILIES:
        k_nu = nu if kind == STUDENT_T else None
        curves.append(PenaltyCurve(
            kind, k_nu, grid,
            density(kind, k_nu, grid, standardized),
            penalty(kind, k_nu, grid, standardized),
            influence(kind, k_nu, grid, standardized),
            standardized,
        ))
    return curves


def emit_fig1_curves(out_dir, half_width: float = 50.0, step: float = 0.01, nu: float = FIG1_NU,
                     plot_range: float = 4.0) -> tuple[list[PenaltyCurve], list[Path]]:
    """Write one CSV per family and a three-panel SVG of the variance-1 curves.

    The CSVs cover ``[-half_width, half_width]`` so the densities can be
    checked by quadrature; the SVG shows ``[-plot_range, plot_range]``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = fig1_curves(half_width, step, nu)
    files = [c.to_csv(out_dir / f"fig1_{c.kind}.csv") for c in curves]
    keep = np.abs(curves[0].grid) <= plot_range
    styles = {GAUSSIAN: "6,4", LAPLACE: "2,3", STUDENT_T: None}
    panels = []
    for title, attr in (("density p(x)", "density"), ("penalty rho(eps)", "rho"),
                        ("influence psi(eps)", "psi")):
        series = [Series(c.label, c.grid[keep], getattr(c, attr)[keep], dash=styles[c.kind])
                  for c in curves]
        panels.append((title, series))
    files.append(write_panels(out_dir / "fig1.svg", panels,
                              title=f"Variance-1 normal, Laplace and Student-t (nu={nu:g})"))
    return curves, files
