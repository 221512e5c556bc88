import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from studentflow.base import BaseDistribution, grad_log_prob, log_prob, make_base, sample
from studentflow.special import DomainError, log_gamma, make_rng, sample_chi_square, sample_gamma

mpmath.mp.dps = 40


def mp_loggamma(a):
    return float(mpmath.loggamma(mpmath.mpf(a)))


# -- log_gamma ------------------------------------------------------------------

def test_log_gamma_examples():
    assert log_gamma(1.0) == 0.0
    assert log_gamma(0.5) == pytest.approx(0.5 * math.log(math.pi), rel=1e-14)
    assert log_gamma(26.0) - log_gamma(25.0) == pytest.approx(math.log(25.0), rel=1e-12)


@pytest.mark.parametrize("a", [0.0, -1.0, -0.5, float("nan")])
def test_log_gamma_domain(a):
    with pytest.raises(DomainError):
        log_gamma(a)


def test_log_gamma_relative_error_on_range():
    # dense sweep including the neighbourhoods of the zeros at 1 and 2
    grid = np.concatenate([
        np.linspace(0.5, 3.0, 1001),
        np.linspace(0.999, 1.001, 41),
        np.linspace(1.999, 2.001, 41),
        np.geomspace(3.0, 1000.0, 400),
    ])
    worst = 0.0
    for a in grid:
        ref = mp_loggamma(a)
        if ref == 0.0:
            assert log_gamma(a) == 0.0
            continue
        worst = max(worst, abs(log_gamma(a) - ref) / abs(ref))
    assert worst <= 1e-10


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=0.01, max_value=0.5))
def test_log_gamma_reflection_region(a):
    assert log_gamma(a) == pytest.approx(mp_loggamma(a), rel=1e-10)


# -- samplers -------------------------------------------------------------------

def test_chi_square_mean():
    x = sample_chi_square(50.0, 200_000, make_rng(1))
    assert abs(x.mean() - 50.0) <= 0.5


def test_chi_square_variance():
    x = sample_chi_square(2.0, 200_000, make_rng(2))
    assert abs(x.var() - 4.0) <= 0.15


def test_chi_square_replay():
    a = sample_chi_square(1.0, 1, make_rng(7))
    b = sample_chi_square(1.0, 1, make_rng(7))
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("nu", [0.0, -2.0])
def test_chi_square_domain(nu):
    with pytest.raises(DomainError):
        sample_chi_square(nu, 10, make_rng(0))


@pytest.mark.parametrize("shape", [0.05, 0.3, 1.0, 2.5, 25.0])
def test_gamma_sampler_matches_cdf(shape):
    x = sample_gamma(shape, 50_000, make_rng(3))
    assert stats.kstest(x, stats.gamma(shape).cdf).statistic < 0.01


def test_make_rng_streams_differ():
    a = make_rng(5, 1).random(4)
    b = make_rng(5, 2).random(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, make_rng(5, 1).random(4))


# -- log_prob -------------------------------------------------------------------

def test_log_prob_examples():
    assert log_prob(make_base("student_t", 1, 1.0), [0.0]) == pytest.approx(-math.log(math.pi), abs=1e-12)
    assert log_prob(make_base("gaussian", 1), [0.0]) == pytest.approx(-0.9189385332046727, abs=1e-12)
    # Gamma(26)/Gamma(25) = 25, so the constant is ln 25 - ln(50 pi) = -ln(2 pi)
    assert log_prob(make_base("student_t", 2, 50.0), [0.0, 0.0]) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)


def test_log_prob_matches_scipy_multivariate_t():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((20, 3)) * 2
    ours = log_prob(make_base("student_t", 3, 4.5), x)
    ref = stats.multivariate_t(np.zeros(3), np.eye(3), df=4.5).logpdf(x)
    np.testing.assert_allclose(ours, ref, rtol=1e-12)


def test_log_prob_shape_mismatch():
    with pytest.raises(ValueError):
        log_prob(make_base("gaussian", 2), np.zeros((4, 3)))


def test_student_t_infinite_nu_is_gaussian():
    assert make_base("student_t", 3, math.inf).kind == "gaussian"


@pytest.mark.parametrize("kind,nu", [("gaussian", None), ("laplace", None),
                                     ("student_t", 20.0), ("student_t", 50.0)])
def test_normalization_1d_finite_grid(kind, nu):
    # [-60, 60]: the neglected tail mass is below 1e-12 for these families
    dist = make_base(kind, 1, nu)
    val, _ = integrate.quad(lambda t: math.exp(log_prob(dist, [t])), -60, 60,
                            points=[0.0], limit=400, epsabs=1e-12, epsrel=1e-12)
    assert abs(val - 1.0) < 1e-6


@pytest.mark.parametrize("nu", [1.0, 2.0])
def test_normalization_1d_fat_tails_whole_line(nu):
    # nu <= 2 loses ~1/x^nu tail mass outside [-60, 60]; integrate over R instead
    dist = make_base("student_t", 1, nu)
    f = lambda t: math.exp(log_prob(dist, [t]))
    val = integrate.quad(f, -np.inf, 0, epsabs=1e-12, epsrel=1e-12)[0] + \
        integrate.quad(f, 0, np.inf, epsabs=1e-12, epsrel=1e-12)[0]
    assert abs(val - 1.0) < 1e-6


@pytest.mark.parametrize("kind,nu", [("gaussian", None), ("student_t", 3.0), ("student_t", 50.0)])
def test_normalization_2d_radial(kind, nu):
    dist = make_base(kind, 2, nu)
    f = lambda r: 2 * math.pi * r * math.exp(log_prob(dist, [r, 0.0]))
    val = integrate.quad(f, 0, np.inf, epsabs=1e-12, epsrel=1e-12, limit=200)[0]
    assert abs(val - 1.0) < 1e-6


def test_normalization_2d_laplace_monte_carlo():
    # importance sampling from a wider Gaussian
    rng = make_rng(11)
    s = 3.0
    z = rng.standard_normal((400_000, 2)) * s
    logq = -np.log(2 * math.pi * s * s) - 0.5 * (z**2).sum(1) / s**2
    w = np.exp(log_prob(make_base("laplace", 2), z) - logq)
    assert abs(w.mean() - 1.0) < 4 * w.std() / math.sqrt(w.size)


def _exact_t_minus_gauss(d, r, nu=10**6):
    s = mpmath.mpf(d * r * r)
    nu = mpmath.mpf(nu)
    t = (mpmath.loggamma((nu + d) / 2) - mpmath.loggamma(nu / 2) - mpmath.mpf(d) / 2 * mpmath.log(mpmath.pi * nu)
         - (nu + d) / 2 * mpmath.log1p(s / nu))
    g = -mpmath.mpf(d) / 2 * mpmath.log(2 * mpmath.pi) - s / 2
    return float(t - g)


@pytest.mark.parametrize("d", [1, 4])
@pytest.mark.parametrize("r", [0.0, 1.0, -1.0, 3.0, -3.0, 6.0, -6.0])
def test_gaussian_limit_matches_exact_gap(d, r):
    x = np.full(d, r)
    diff = log_prob(make_base("student_t", d, 1e6), x) - log_prob(make_base("gaussian", d), x)
    assert diff == pytest.approx(_exact_t_minus_gauss(d, r), abs=1e-8)


@pytest.mark.parametrize("d,r", [(1, 0.0), (1, 1.0), (1, -3.0), (4, 0.0), (4, -1.0)])
def test_gaussian_limit_close(d, r):
    # the exact gap is ~ (d(d-2)/4 - d|x|^2/2 + |x|^4/4) / nu, under 1e-4 only for small |x|
    x = np.full(d, r)
    diff = log_prob(make_base("student_t", d, 1e6), x) - log_prob(make_base("gaussian", d), x)
    assert abs(diff) < 1e-4


def test_fatter_tails_at_radius_ten():
    for d in (1, 2, 5):
        x = np.zeros(d)
        x[0] = 10.0
        g = log_prob(make_base("gaussian", d), x)
        for nu in (1.0, 5.0, 50.0, 1000.0):
            assert log_prob(make_base("student_t", d, nu), x) > g


# -- grad_log_prob ---------------------------------------------------------------

def test_grad_examples():
    assert grad_log_prob(make_base("student_t", 1, 1.0), [1.0])[0] == pytest.approx(-1.0)
    np.testing.assert_array_equal(grad_log_prob(make_base("gaussian", 3), [1.0, -2.0, 0.0]), [-1.0, 2.0, 0.0])
    g = [abs(grad_log_prob(make_base("student_t", 1, 50.0), [x])[0]) for x in (1e2, 1e3, 1e4, 1e6)]
    assert g == sorted(g, reverse=True) and g[-1] < 1e-4


def test_laplace_subgradient_at_zero():
    np.testing.assert_array_equal(grad_log_prob(make_base("laplace", 3), [0.0, 2.0, -1.0]), [0.0, -1.0, 1.0])


@pytest.mark.parametrize("kind,nu", [("gaussian", None), ("laplace", None), ("student_t", 1.0),
                                     ("student_t", 5.0), ("student_t", 50.0)])
def test_grad_matches_finite_differences(kind, nu):
    d = 3
    dist = make_base(kind, d, nu)
    rng = np.random.default_rng(42)
    pts = rng.standard_normal((100, d)) * 2.0
    h = 1e-5
    for x in pts:
        fd = np.empty(d)
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            fd[j] = (log_prob(dist, x + e) - log_prob(dist, x - e)) / (2 * h)
        g = grad_log_prob(dist, x)
        assert np.linalg.norm(g - fd) / np.linalg.norm(g) < 1e-6


def test_bounded_influence_sup():
    grid = np.linspace(-100, 100, 2_000_001)
    for nu in (1.0, 4.0, 50.0):
        psi = -grad_log_prob(make_base("student_t", 1, nu), grid[:, None])[:, 0]
        bound = (nu + 1) / (2 * math.sqrt(nu))
        assert abs(np.abs(psi).max() - bound) < 1e-6
        assert abs(abs(grid[np.argmax(psi)]) - math.sqrt(nu)) < 1e-3


# -- sample ----------------------------------------------------------------------

def test_sample_t_variance():
    x = sample(make_base("student_t", 1, 5.0), 200_000, make_rng(21))
    assert abs(x.var() - 5.0 / 3.0) < 0.05


def test_sample_t_large_nu_is_normal():
    x = sample(make_base("student_t", 1, 1e6), 200_000, make_rng(22))[:, 0]
    assert stats.kstest(x, stats.norm.cdf).statistic < 0.005


def test_sample_t_radius_is_f_distributed():
    d, nu = 3, 4.0
    x = sample(make_base("student_t", d, nu), 200_000, make_rng(23))
    r = (x**2).sum(1) / d
    assert stats.kstest(r, stats.f(d, nu).cdf).statistic < 0.01


def test_sample_t_shares_scale_across_row():
    # with a shared chi2 draw the direction is uniform and independent of the radius:
    # the per-row ratio x / |x| must match a Gaussian's, unlike independent 1-D t draws
    x = sample(make_base("student_t", 2, 1.0), 100_000, make_rng(24))
    u = x / np.linalg.norm(x, axis=1, keepdims=True)
    angle = np.arctan2(u[:, 1], u[:, 0])
    assert stats.kstest(angle, stats.uniform(-math.pi, 2 * math.pi).cdf).statistic < 0.01


def test_sample_laplace_and_gaussian_moments():
    lap = sample(make_base("laplace", 2, None), 200_000, make_rng(25))
    np.testing.assert_allclose(lap.var(0), 2.0, atol=0.05)
    gau = sample(make_base("gaussian", 2, None), 200_000, make_rng(26))
    np.testing.assert_allclose(gau.var(0), 1.0, atol=0.02)


def test_sample_determinism_and_n():
    dist = make_base("student_t", 2, 3.0)
    assert np.array_equal(sample(dist, 5, make_rng(1)), sample(dist, 5, make_rng(1)))
    with pytest.raises(ValueError):
        sample(dist, 0, make_rng(1))


def test_invalid_base():
    with pytest.raises(ValueError):
        BaseDistribution("cauchy", 2)
    with pytest.raises(ValueError):
        BaseDistribution("gaussian", 0)
    with pytest.raises(DomainError):
        BaseDistribution("student_t", 2, -1.0)
