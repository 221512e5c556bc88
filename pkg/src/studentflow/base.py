"""Base (latent) distributions: Gaussian, multivariate Student-t and Laplace.

Every base has location 0 and unit scale; the flow layers take care of
location and scale. Inputs are batches of shape ``(n, dim)``; a single
vector of shape ``(dim,)`` is also accepted and gives a scalar back.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .special import DomainError, log_gamma, sample_chi_square

__all__ = ["BaseDistribution", "make_base", "log_prob", "grad_log_prob", "sample"]

GAUSSIAN = "gaussian"
STUDENT_T = "student_t"
LAPLACE = "laplace"
KINDS = (GAUSSIAN, STUDENT_T, LAPLACE)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class BaseDistribution:
    """Fixed latent density ``Z`` with mean 0 and identity scale.

    ``nu`` is only meaningful for ``kind == "student_t"``; it is a fixed
    hyperparameter and is never trained.
    """

    kind: str
    dim: int
    nu: float | None = None
    _const: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown base kind {self.kind!r}; expected one of {KINDS}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")
        if self.kind == STUDENT_T:
            if self.nu is None or not self.nu > 0 or math.isinf(self.nu):
                raise DomainError(f"student_t needs finite nu > 0, got {self.nu}")
            nu, d = float(self.nu), self.dim
            const = log_gamma(0.5 * (nu + d)) - log_gamma(0.5 * nu) - 0.5 * d * math.log(math.pi * nu)
        elif self.kind == GAUSSIAN:
            const = -0.5 * self.dim * _LOG_2PI
        else:
            const = -self.dim * math.log(2.0)
        object.__setattr__(self, "_const", const)

    @property
    def label(self) -> str:
        if self.kind == STUDENT_T:
            return f"student_t(nu={self.nu:g})"
        return self.kind

    def log_prob(self, x):
        return log_prob(self, x)

    def grad_log_prob(self, x):
        return grad_log_prob(self, x)

    def sample(self, n, rng):
        return sample(self, n, rng)


def make_base(kind: str, dim: int, nu: float | None = None) -> BaseDistribution:
    """Build a base distribution; ``student_t`` with ``nu = inf`` is the Gaussian."""
    kind = kind.lower().replace("-", "_")
    if kind in ("t", "student", "studentt"):
        kind = STUDENT_T
    if kind == STUDENT_T and nu is not None and math.isinf(float(nu)):
        return BaseDistribution(GAUSSIAN, dim)
    if kind != STUDENT_T:
        nu = None
    return BaseDistribution(kind, dim, None if nu is None else float(nu))


def _as_batch(dist: BaseDistribution, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dist.dim:
        raise ValueError(f"expected shape (n, {dist.dim}), got {np.shape(x)}")
    return x, single


def log_prob(dist: BaseDistribution, x):
    """Log-density at each row of ``x``."""
    x, single = _as_batch(dist, x)
    if dist.kind == STUDENT_T:
        nu = dist.nu
        sq = np.einsum("ij,ij->i", x, x)
        out = dist._const - 0.5 * (nu + dist.dim) * np.log1p(sq / nu)
    elif dist.kind == GAUSSIAN:
        out = dist._const - 0.5 * np.einsum("ij,ij->i", x, x)
    else:
        out = dist._const - np.abs(x).sum(axis=1)
    return float(out[0]) if single else out


def grad_log_prob(dist: BaseDistribution, x):
    """Gradient of :func:`log_prob` with respect to ``x``.

    The Laplace base returns the subgradient 0 for components exactly at 0.
    """
    x, single = _as_batch(dist, x)
    if dist.kind == STUDENT_T:
        nu = dist.nu
        sq = np.einsum("ij,ij->i", x, x)
        out = -((nu + dist.dim) / (nu + sq))[:, None] * x
    elif dist.kind == GAUSSIAN:
        out = -x
    else:
        out = -np.sign(x)
    return out[0] if single else out


def sample(dist: BaseDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` rows from ``dist``.

    Student-t rows are ``z / sqrt(w / nu)`` with ``z ~ N(0, I)`` and a single
    ``w ~ chi2(nu)`` shared by all components of the row.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    d = dist.dim
    if dist.kind == LAPLACE:
        return rng.laplace(0.0, 1.0, size=(n, d))
    z = rng.standard_normal((n, d))
    if dist.kind == GAUSSIAN:
        return z
    w = sample_chi_square(dist.nu, n, rng) / dist.nu
    return z / np.sqrt(w)[:, None]
