import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import CubicHermiteSpline

from gplio import so3
from gplio.gp_interp import general_coeffs, interp_coeffs, interp_rotation, interp_vector
from gplio.gp_prior import CA, CV, RW, transition

from conftest import random_rotation
from oracles import close, oracle_coeffs

KINDS = [RW, CV, CA]


@pytest.mark.parametrize("kind", KINDS)
def test_endpoints(kind):
    for dt in (0.01, 0.5, 3.0):
        c0 = interp_coeffs(kind, dt, 0.0)
        c1 = interp_coeffs(kind, dt, dt)
        m = kind.order
        np.testing.assert_allclose(c0.lam, np.eye(m), atol=1e-12)
        np.testing.assert_allclose(c0.psi, 0.0, atol=1e-12)
        np.testing.assert_allclose(c1.lam, 0.0, atol=1e-9)
        np.testing.assert_allclose(c1.psi, np.eye(m), atol=1e-9)


def test_table_examples():
    c = interp_coeffs(RW, 1.0, 0.25)
    np.testing.assert_allclose(c.full()[0], 0.75 * np.eye(3))
    np.testing.assert_allclose(c.full()[1], 0.25 * np.eye(3))
    c = interp_coeffs(CV, 1.0, 0.5)
    np.testing.assert_allclose(c.lam[0], [0.5, 0.125])
    np.testing.assert_allclose(c.psi[0], [0.5, -0.125])


@pytest.mark.parametrize("kind", KINDS)
def test_closed_form_matches_general_construction(rng, kind):
    for _ in range(100):
        dt = rng.uniform(0.01, 2.0)
        tau = rng.uniform(0.0, 1.0) * dt
        qc = np.diag(rng.uniform(0.1, 10.0, 3))
        c = interp_coeffs(kind, dt, tau)
        lam, psi = c.full(3)
        glam, gpsi = general_coeffs(kind, dt, tau, qc)
        assert close(lam, glam, 1e-9)
        assert close(psi, gpsi, 1e-9)


@pytest.mark.parametrize("kind", KINDS)
def test_closed_form_matches_quadrature_oracle(rng, kind):
    for _ in range(5):
        dt = rng.uniform(0.5, 2.0)
        tau = rng.uniform(0.05, 0.95) * dt
        lam, psi = oracle_coeffs(kind, dt, tau)
        c = interp_coeffs(kind, dt, tau)
        assert close(c.lam, lam, 1e-9)
        assert close(c.psi, psi, 1e-9)


@pytest.mark.parametrize("kind", KINDS)
def test_coefficient_identity(rng, kind):
    for _ in range(100):
        dt = rng.uniform(0.01, 2.0)
        tau = rng.uniform(0.0, dt)
        c = interp_coeffs(kind, dt, tau)
        lhs = c.lam + c.psi @ transition(kind, dt, 1)
        assert close(lhs, transition(kind, tau, 1), 1e-10)


def test_rw_is_linear_interpolation(rng):
    for _ in range(20):
        dt = rng.uniform(0.01, 1.0)
        tau = rng.uniform(0.0, dt)
        xl, xr = rng.normal(size=3), rng.normal(size=3)
        got = interp_vector(xl, xr, interp_coeffs(RW, dt, tau))
        np.testing.assert_allclose(got, np.array([np.interp(tau, [0, dt], [a, b]) for a, b in zip(xl, xr)]))


def test_cv_is_cubic_hermite(rng):
    for _ in range(20):
        dt = rng.uniform(0.01, 1.0)
        tau = rng.uniform(0.0, dt)
        xl, xr = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        got = interp_vector(xl, xr, interp_coeffs(CV, dt, tau))
        spline = CubicHermiteSpline([0.0, dt], np.stack([xl[0], xr[0]]), np.stack([xl[1], xr[1]]))
        np.testing.assert_allclose(got[0], spline(tau), atol=1e-12)
        np.testing.assert_allclose(got[1], spline(tau, 1), atol=1e-10)


def test_cv_hermite_midpoint():
    got = interp_vector(np.zeros(6), np.r_[1.0, 0, 0, 0, 0, 0], interp_coeffs(CV, 1.0, 0.5))
    np.testing.assert_allclose(got[:3], [0.5, 0, 0])


@pytest.mark.parametrize("kind", [CV, CA])
def test_position_derivative_matches_velocity(rng, kind):
    dt = 0.3
    xl, xr = rng.normal(size=(kind.order, 3)), rng.normal(size=(kind.order, 3))
    h = 1e-5
    for tau in (0.05, 0.15, 0.25):
        fwd = interp_vector(xl, xr, interp_coeffs(kind, dt, tau + h))[0]
        bwd = interp_vector(xl, xr, interp_coeffs(kind, dt, tau - h))[0]
        mid = interp_vector(xl, xr, interp_coeffs(kind, dt, tau))[1]
        np.testing.assert_allclose((fwd - bwd) / (2 * h), mid, atol=1e-7)


def test_argument_errors():
    with pytest.raises(ValueError):
        interp_coeffs(CV, 0.1, 0.2)
    with pytest.raises(ValueError):
        interp_coeffs(CV, 0.1, -1e-3)
    with pytest.raises(ValueError):
        interp_coeffs(CV, 0.0, 0.0)
    with pytest.raises(ValueError):
        interp_vector(np.zeros(6), np.zeros(9), interp_coeffs(CV, 0.1, 0.05))
    with pytest.raises(ValueError):
        interp_vector(np.zeros(7), np.zeros(7), interp_coeffs(CV, 0.1, 0.05))


def test_rotation_half_way():
    R, w = interp_rotation(np.eye(3), np.zeros(3), so3.exp([0.2, 0, 0]), np.zeros(3), interp_coeffs(CV, 1.0, 0.5))
    np.testing.assert_allclose(R, so3.exp([0.1, 0, 0]), atol=1e-14)
    # Hermite slope at the midpoint is 1.5 * 0.2 / dt
    np.testing.assert_allclose(w, [0.3, 0, 0], atol=1e-14)


def test_rotation_endpoints(rng):
    for _ in range(1000):
        Rl = random_rotation(rng)
        Rr = Rl @ so3.exp(rng.uniform(-1.5, 1.5, 3))
        wl, wr = rng.normal(size=(2, 3))
        dt = rng.uniform(0.01, 1.0)
        R0, w0 = interp_rotation(Rl, wl, Rr, wr, interp_coeffs(CV, dt, 0.0))
        R1, w1 = interp_rotation(Rl, wl, Rr, wr, interp_coeffs(CV, dt, dt))
        np.testing.assert_allclose(R0, Rl, atol=1e-9)
        np.testing.assert_allclose(w0, wl, atol=1e-9)
        np.testing.assert_allclose(R1, Rr, atol=1e-9)
        np.testing.assert_allclose(w1, wr, atol=1e-9)


def test_rotation_rejects_half_turn():
    with pytest.raises(ValueError):
        interp_rotation(np.eye(3), np.zeros(3), so3.exp([np.pi, 0, 0]), np.zeros(3), interp_coeffs(CV, 1.0, 0.5))
    with pytest.raises(ValueError):
        interp_rotation(np.eye(3), np.zeros(3), np.eye(3), np.zeros(3), interp_coeffs(CA, 1.0, 0.5))


@given(st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
@settings(max_examples=100, deadline=None)
def test_rotation_left_invariance(alpha, seed):
    rng = np.random.default_rng(seed)
    G, Rl = random_rotation(rng, 2)
    Rr = Rl @ so3.exp(rng.uniform(-1.0, 1.0, 3))
    wl, wr = rng.normal(size=(2, 3))
    c = interp_coeffs(CV, 0.1, 0.1 * alpha)
    R, w = interp_rotation(Rl, wl, Rr, wr, c)
    RG, wG = interp_rotation(G @ Rl, wl, G @ Rr, wr, c)
    np.testing.assert_allclose(RG, G @ R, atol=1e-12)
    np.testing.assert_allclose(wG, w, atol=1e-12)


@given(st.floats(0.0, 1.0), st.sampled_from(KINDS))
@settings(max_examples=100, deadline=None)
def test_constant_state_is_preserved(alpha, kind):
    # a state moving exactly along the prior mean is reproduced
    x0 = np.zeros((kind.order, 1))
    x0[:, 0] = np.arange(1, kind.order + 1)
    dt = 0.7
    xr = transition(kind, dt, 1) @ x0
    got = interp_vector(x0, xr, interp_coeffs(kind, dt, alpha * dt))
    np.testing.assert_allclose(got, transition(kind, alpha * dt, 1) @ x0, atol=1e-10)
