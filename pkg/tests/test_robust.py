import csv
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from scipy import integrate

from studentflow.base import make_base
from studentflow.robust import (
    UNBOUNDED,
    density,
    emit_fig1_curves,
    fig1_curves,
    influence,
    influence_bound,
    penalty,
    scale_for_unit_variance,
)

FAMILIES = [("gaussian", None), ("laplace", None), ("student_t", 1.0), ("student_t", 5.0),
            ("student_t", 50.0), ("student_t", 1000.0)]
# (kind, nu, standardized); the variance-1 rescaling needs nu > 2
CASES = [(k, nu, False) for k, nu in FAMILIES] + [(k, nu, True) for k, nu in FAMILIES if nu is None or nu > 2]


def test_penalty_examples():
    assert penalty("gaussian", None, 2.0) == 2.0
    assert penalty("laplace", None, 2.0) == 2.0
    assert penalty("student_t", 1.0, 1.0) == pytest.approx(math.log(2.0), abs=1e-15)


def test_influence_examples():
    assert influence("gaussian", None, -3.0) == -3.0
    assert influence("student_t", 1.0, 1.0) == pytest.approx(1.0, abs=1e-15)
    far = influence("student_t", 50.0, 1000.0)
    assert far == pytest.approx(51 * 1000 / (50 + 1e6), rel=1e-12)
    assert abs(far - 0.051) < 5e-4
    assert influence("student_t", 50.0, 1001.0) < far
    assert influence("laplace", None, 0.0) == 0.0
    assert influence("laplace", None, -0.2) == -1.0


def test_influence_bound_examples():
    assert influence_bound("student_t", 50.0) == pytest.approx(51 / (2 * math.sqrt(50)), rel=1e-15)
    assert influence_bound("student_t", 50.0) == pytest.approx(3.6062, abs=1e-4)
    assert influence_bound("laplace") == 1.0
    assert influence_bound("gaussian") is UNBOUNDED and math.isinf(UNBOUNDED)


@pytest.mark.parametrize("nu", [1.0, 20.0, 50.0, 1000.0])
def test_influence_bound_is_grid_supremum(nu):
    # dense grid refined around the maximizer sqrt(nu)
    grid = np.concatenate([np.linspace(0, 200, 400_001), math.sqrt(nu) + np.linspace(-1e-3, 1e-3, 2001)])
    assert abs(np.max(influence("student_t", nu, grid)) - influence_bound("student_t", nu)) <= 1e-6


@pytest.mark.parametrize("kind,nu,standardized", CASES)
def test_rho_zero_and_symmetry(kind, nu, standardized):
    assert penalty(kind, nu, 0.0, standardized) == 0.0
    e = np.linspace(-30, 30, 1201)
    np.testing.assert_array_equal(penalty(kind, nu, e, standardized), penalty(kind, nu, -e, standardized))
    np.testing.assert_array_equal(influence(kind, nu, e, standardized), -influence(kind, nu, -e, standardized))


@pytest.mark.parametrize("kind,nu,standardized", CASES)
def test_psi_is_derivative_of_rho(kind, nu, standardized):
    e = np.linspace(-20, 20, 4001)
    e = e[np.abs(e) > 1e-3]  # Laplace kink
    h = 1e-5
    fd = (penalty(kind, nu, e + h, standardized) - penalty(kind, nu, e - h, standardized)) / (2 * h)
    assert np.abs(fd - influence(kind, nu, e, standardized)).max() < 1e-6


@pytest.mark.parametrize("kind,nu", FAMILIES)
def test_psi_is_negative_base_gradient(kind, nu):
    base = make_base(kind, 1, nu)
    e = np.linspace(-15, 15, 301)[:, None]
    np.testing.assert_allclose(influence(kind, nu, e[:, 0]), -base.grad_log_prob(e)[:, 0], atol=1e-12, rtol=0)


@pytest.mark.parametrize("nu", [1.0, 5.0, 50.0])
def test_t_influence_redescends(nu):
    up = np.linspace(0, math.sqrt(nu), 500)
    down = np.linspace(math.sqrt(nu), 1e4, 5000)
    assert np.all(np.diff(influence("student_t", nu, up)) > 0)
    assert np.all(np.diff(influence("student_t", nu, down)) < 0)
    assert influence("student_t", nu, 1e12) < 1e-10


def test_standardized_requires_finite_variance():
    with pytest.raises(ValueError):
        penalty("student_t", 2.0, 1.0, standardized=True)
    with pytest.raises(ValueError):
        scale_for_unit_variance("student_t", 1.5)


def test_scales():
    assert scale_for_unit_variance("laplace") == pytest.approx(1 / math.sqrt(2))
    assert scale_for_unit_variance("student_t", 5.0) == pytest.approx(math.sqrt(3 / 5))
    assert scale_for_unit_variance("gaussian") == 1.0


@pytest.mark.parametrize("kind,nu", [("gaussian", None), ("laplace", None), ("student_t", 3.0), ("student_t", 50.0)])
def test_standardized_density_moments_quad(kind, nu):
    f = lambda e: density(kind, nu, e, True)
    mass = integrate.quad(f, -np.inf, np.inf, points=None, limit=500)[0]
    var = integrate.quad(lambda e: e * e * f(e), -np.inf, np.inf, limit=500)[0]
    assert mass == pytest.approx(1.0, abs=1e-8)
    assert var == pytest.approx(1.0, abs=1e-6)


def test_fig1_curves_on_grid():
    for c in fig1_curves():
        assert c.rho[len(c.grid) // 2] == 0.0 and c.grid[len(c.grid) // 2] == 0.0
        assert abs(np.trapezoid(c.density, c.grid) - 1.0) <= 1e-4, c.label
        assert abs(np.trapezoid(c.grid**2 * c.density, c.grid) - 1.0) <= 1e-3, c.label


def test_emit_fig1_files(tmp_path):
    curves, files = emit_fig1_curves(tmp_path)
    names = sorted(p.name for p in files)
    assert names == ["fig1.svg", "fig1_gaussian.csv", "fig1_laplace.csv", "fig1_student_t.csv"]
    for c in curves:
        with open(tmp_path / f"fig1_{c.kind}.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epsilon", "density", "penalty", "influence"]
        data = np.array(rows[1:], dtype=float)
        np.testing.assert_array_equal(data[:, 0], c.grid)
        np.testing.assert_array_equal(data[:, 2], c.rho)
    root = ET.parse(tmp_path / "fig1.svg").getroot()
    assert root.tag.endswith("svg")
    polylines = [el for el in root.iter() if el.tag.endswith("polyline")]
    assert len(polylines) == 9  # three families in each of three panels
