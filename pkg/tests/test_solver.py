import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gplio import so3
from gplio.factors import NoiseModel
from gplio.gp_prior import CV, HybridPrior, hybrid_process_noise, hybrid_transition
from gplio.measurements import ImuBatch, LidarBatch, MeasurementBatch
from gplio.solver import (
    Context,
    FactorBlock,
    MarginalPrior,
    NormalEquations,
    SolverConfig,
    Window,
    accumulate,
    associate,
    build_normal_equations,
    marginalize,
    optimize,
    schur_marginalize,
    slide_window,
    solve_block_tridiagonal,
    solve_dense,
    solve_step,
)
from gplio.trajectory import Extrinsics, Gravity, KnotState, propagate
from gplio.voxel_map import VoxelMap

import marginal_oracle


def random_spd(rng, n, cond=1e3):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return (Q * np.geomspace(1.0, cond, n)) @ Q.T


def random_chain_system(rng, n_knots, D):
    """Block-tridiagonal SPD system assembled from random two-knot factors."""
    blocks = [FactorBlock(0, rng.normal(size=(D, D)), rng.normal(size=D), np.eye(D))]
    for k in range(n_knots - 1):
        blocks.append(FactorBlock(k, rng.normal(size=(D + 2, 2 * D)), rng.normal(size=D + 2), random_spd(rng, D + 2, 10)))
    return blocks


# -- normal equations ------------------------------------------------------------------


def test_factor_block_info_is_whitened_gauss_newton(rng):
    f = FactorBlock(1, rng.normal(size=(4, 6)), rng.normal(size=4), random_spd(rng, 4))
    H, b, energy = f.info()
    np.testing.assert_allclose(H, f.J.T @ f.W @ f.J)
    np.testing.assert_allclose(b, f.J.T @ f.W @ f.e)
    assert energy == pytest.approx(0.5 * f.e @ f.W @ f.e)


def test_accumulate_places_blocks(rng):
    D = 3
    blocks = random_chain_system(rng, 4, D)
    ne = accumulate(blocks, 4, D)
    H = np.zeros((12, 12))
    b = np.zeros(12)
    for f in blocks:
        sl = slice(f.first * D, f.first * D + f.J.shape[1])
        H[sl, sl] += f.J.T @ f.W @ f.J
        b[sl] += f.J.T @ f.W @ f.e
    np.testing.assert_allclose(ne.H, H)
    np.testing.assert_allclose(ne.b, b)
    np.testing.assert_array_equal(ne.block(0, 2), 0)
    assert ne.n_knots == 4


def test_linear_gauss_newton_step_is_least_squares(rng):
    """One step from x = 0 solves the stacked weighted least squares."""
    D, n = 2, 3
    blocks = random_chain_system(rng, n, D)
    ne = accumulate(blocks, n, D)
    A = np.zeros((0, n * D))
    z = np.zeros(0)
    for f in blocks:
        L = np.linalg.cholesky(f.W).T
        full = np.zeros((len(f.e), n * D))
        full[:, f.first * D:f.first * D + f.J.shape[1]] = f.J
        A = np.vstack([A, L @ full])
        z = np.concatenate([z, -L @ f.e])
    x, *_ = np.linalg.lstsq(A, z, rcond=None)
    np.testing.assert_allclose(solve_step(ne), x, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("n_knots", [1, 2, 3, 6])
@pytest.mark.parametrize("D", [1, 3, 9])
def test_block_tridiagonal_matches_dense(rng, n_knots, D):
    ne = accumulate(random_chain_system(rng, n_knots, D), n_knots, D)
    rhs = rng.normal(size=(n_knots * D, 2))
    x = solve_block_tridiagonal(ne.H, rhs, D)
    np.testing.assert_allclose(x, solve_dense(ne.H, rhs), rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(ne.H @ x, rhs, atol=1e-9)


def test_block_tridiagonal_rejects_indefinite():
    H = np.diag([1.0, -1.0, 2.0, 3.0])
    with pytest.raises(np.linalg.LinAlgError):
        solve_block_tridiagonal(H, np.ones(4), 2)


def test_damped_step_shrinks(rng):
    ne = accumulate(random_chain_system(rng, 3, 2), 3, 2)
    norms = [np.linalg.norm(solve_step(ne, lam)) for lam in (0.0, 1.0, 100.0)]
    assert norms[0] > norms[1] > norms[2]
    np.testing.assert_allclose(solve_step(ne, dense=True), solve_step(ne), rtol=1e-10)


# -- marginalization -------------------------------------------------------------------


@pytest.mark.parametrize("n_drop", [1, 3, 5])
def test_schur_matches_covariance_block(rng, n_drop):
    """Marginal information is the inverse of the kept covariance block."""
    H = random_spd(rng, 8)
    b = rng.normal(size=8)
    Hm, bm = schur_marginalize(H, b, n_drop)
    cov = np.linalg.inv(H)
    np.testing.assert_allclose(Hm, np.linalg.inv(cov[n_drop:, n_drop:]), rtol=1e-8, atol=1e-10)
    # the minimizer of the kept variables is unchanged
    np.testing.assert_allclose(-np.linalg.solve(Hm, bm), -(cov @ b)[n_drop:], rtol=1e-8, atol=1e-10)


def test_schur_clamps_negative_eigenvalues(caplog):
    H = np.diag([1.0, 1.0, -1e-3])
    with caplog.at_level(logging.WARNING, logger="gplio.solver"):
        Hm, _ = schur_marginalize(H, np.zeros(3), 1)
    assert "clamped" in caplog.text
    assert np.linalg.eigvalsh(Hm).min() >= 0


@pytest.mark.parametrize("n_knots", [2, 3, 4, 5])
@pytest.mark.parametrize("K", [1, 2, 3])
def test_sliding_window_equals_full_batch(n_knots, K):
    rng = np.random.default_rng(100 * n_knots + K)
    for _ in range(5):
        assert marginal_oracle.max_discrepancy(rng, n_knots, K) < 1e-7


def test_marginal_prior_vector_energy(rng):
    H = random_spd(rng, 4)
    b = rng.normal(size=4)
    lin = rng.normal(size=4)
    mp = MarginalPrior(lin, H, b)
    x = rng.normal(size=4)
    r = x - lin
    assert mp.energy(x) == pytest.approx(0.5 * r @ H @ r + b @ r)
    Hx, g, e = mp.linearize(x)
    np.testing.assert_allclose(Hx, H)
    np.testing.assert_allclose(g, H @ r + b)
    assert e == pytest.approx(mp.energy(x))


def test_marginal_prior_covariance_roundtrip(rng):
    cov = random_spd(rng, 5, 50)
    mp = MarginalPrior.from_covariance(np.zeros(5), cov)
    np.testing.assert_allclose(mp.covariance(), cov, rtol=1e-9)
    np.testing.assert_array_equal(mp.b, 0)


def test_marginal_prior_on_knot_uses_tangent_residual(rng):
    prior = HybridPrior(rotation=CV, translation=CV)
    lin = KnotState.zero(0, prior)
    mp = MarginalPrior.from_covariance(lin, np.eye(prior.dim))
    delta = rng.normal(size=prior.dim) * 0.1
    x = lin.retract(delta, prior)
    assert mp.energy(x, prior) == pytest.approx(0.5 * delta @ delta, rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_schur_preserves_positive_definiteness(seed):
    rng = np.random.default_rng(seed)
    H = random_spd(rng, 6, 1e4)
    Hm, _ = schur_marginalize(H, np.zeros(6), 2)
    assert np.linalg.eigvalsh(Hm).min() > 0


# -- configuration ---------------------------------------------------------------------


@pytest.mark.parametrize("kwargs", [
    {"max_iterations": 0},
    {"reassociate_every": 0},
    {"tolerance": 0.0},
    {"damping_initial": -1.0},
    {"damping_factor": 1.0},
    {"max_neighbor_distance": 0.0},
])
def test_solver_config_validation(kwargs):
    with pytest.raises(ValueError):
        SolverConfig(**kwargs)


# -- nonlinear window ------------------------------------------------------------------

ROOM = [(np.array(n, float), c) for n, c in [
    ([1, 0, 0], 7.8), ([-1, 0, 0], 7.8), ([0, 1, 0], 5.8),
    ([0, -1, 0], 5.8), ([0, 0, -1], 0.2), ([0, 0, 1], 4.8),
]]  # outward normals n with walls n.x = c, all off voxel boundaries


def room_map():
    g = np.arange(-7.875, 7.9, 0.25)
    pts = []
    for n, c in ROOM:
        u, v = np.meshgrid(g, g)
        u, v = u.ravel(), v.ravel()
        axis = int(np.argmax(np.abs(n)))
        others = [i for i in range(3) if i != axis]
        p = np.zeros((len(u), 3))
        p[:, axis] = c * n[axis]
        p[:, others[0]], p[:, others[1]] = u, v
        p[:, 2] += 2.3 if axis != 2 else 0.0  # walls span -0.2 < z < 4.8
        inside = (np.abs(p[:, 0]) <= 7.8) & (np.abs(p[:, 1]) <= 5.8) & (p[:, 2] >= -0.2) & (p[:, 2] <= 4.8)
        pts.append(p[inside])
    m = VoxelMap()
    m.insert(np.concatenate(pts))
    return m


def ray_cast(origin, dirs):
    best = np.full(len(dirs), np.inf)
    for n, c in ROOM:
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (c - origin @ n) / denom
        best = np.where((denom > 1e-9) & (s < best), s, best)
    return origin + best[:, None] * dirs


def truth(t):
    R = so3.exp(np.array([0.0, 0.0, 0.4 * t]))
    p = np.array([0.5 * t, 0.2 * t, 1.5])
    return R, p


def scan(rng, t0, t1, n=300, pose=truth):
    """Noise-free ray hits away from the room's edges, in the body frame."""
    t = np.sort(rng.uniform(t0, t1, 2 * n))
    dirs = rng.normal(size=(2 * n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pb = np.empty((2 * n, 3))
    keep = np.empty(2 * n, dtype=bool)
    for i, ti in enumerate(t):
        R, p = pose(ti)
        pw = ray_cast(p, (R @ dirs[i])[None])[0]
        gaps = np.sort([c - n_ @ pw for n_, c in ROOM])
        keep[i] = gaps[1] > 0.75  # the plane fit is only clean away from corners
        pb[i] = R.T @ (pw - p)
    idx = np.flatnonzero(keep)[:n]
    return MeasurementBatch(lidar=LidarBatch(pb[idx], t[idx], np.zeros(len(idx), dtype=np.int64)))


def true_knot(t, prior):
    k = KnotState.zero(int(round(t * 1e9)), prior)
    k.R, k.p = truth(t)
    k.w = np.array([0.0, 0.0, 0.4])
    k.v = np.array([0.5, 0.2, 0.0])
    return k


@pytest.fixture(scope="module")
def lidar_context():
    prior = HybridPrior(rotation=CV, translation=CV)
    return Context(prior, Extrinsics(), Gravity(), NoiseModel(), room_map(), use_gyro=False, use_accel=False)


def test_optimize_recovers_perturbed_window(rng, lidar_context):
    ctx = lidar_context
    prior = ctx.prior
    knots = [true_knot(0.0, prior), true_knot(0.1, prior), true_knot(0.2, prior)]
    batches = [scan(rng, 0.0, 0.1), scan(rng, 0.1, 0.2)]
    marginal = MarginalPrior.from_covariance(knots[0].copy(), np.eye(prior.dim) * 1e-2)
    start = [k.retract(np.r_[rng.normal(size=3) * 0.02, np.zeros(3), rng.normal(size=3) * 0.05, np.zeros(3)], prior)
             for k in knots]
    window = Window(start, batches, marginal)
    res = optimize(window, ctx, SolverConfig(max_iterations=20))
    assert res.converged and not res.diverged
    after = [r["energy_after"] for r in res.records]
    assert all(b <= a * (1 + 1e-9) for a, b in zip([res.records[0]["energy"]] + after, after))
    for est, ref in zip(window.knots, knots):
        np.testing.assert_allclose(est.p, ref.p, atol=2e-3)
        assert np.linalg.norm(so3.log(ref.R.T @ est.R)) < 2e-3
    assert res.counts.as_dict()["lidar"] > 400


def test_slide_window_shifts_out_oldest_segment(rng, lidar_context):
    ctx = lidar_context
    prior = ctx.prior
    k0 = true_knot(0.0, prior)
    window = Window([k0], [], MarginalPrior.from_covariance(k0.copy(), np.eye(prior.dim) * 1e-4))
    res, dropped = slide_window(window, scan(rng, 0.0, 0.1), 0.1, ctx, K=2, segment_id=0)
    assert dropped is None and window.n_segments == 1
    res, dropped = slide_window(window, scan(rng, 0.1, 0.2), 0.1, ctx, K=2, segment_id=1)
    assert not res.diverged
    left, right, batch = dropped
    assert left.t == pytest.approx(0.0) and right.t == pytest.approx(0.1)
    assert window.n_segments == 1 and window.knots[0] is right
    assert window.marginal.lin.t_ns == right.t_ns
    assert window.marginal.lin is not right  # frozen copy
    np.testing.assert_allclose(window.knots[-1].p, truth(0.2)[1], atol=5e-3)


def test_empty_map_keeps_prediction(rng):
    prior = HybridPrior(rotation=CV, translation=CV)
    ctx = Context(prior, Extrinsics(), Gravity(), NoiseModel(), VoxelMap(), use_gyro=False, use_accel=False)
    k0 = true_knot(0.0, prior)
    window = Window([k0, propagate(k0, 0.1, prior)], [scan(rng, 0.0, 0.1)],
                    MarginalPrior.from_covariance(k0.copy(), np.eye(prior.dim) * 1e-4))
    res = optimize(window, ctx)
    assert res.converged and not res.diverged
    np.testing.assert_allclose(window.knots[1].p, propagate(k0, 0.1, prior).p, atol=1e-9)


def prior_only_window(prior, n_knots=4, dt=0.1):
    k0 = KnotState.zero(0, prior)
    k0.v = np.array([1.0, -0.5, 0.2])
    knots = [k0]
    for _ in range(n_knots - 1):
        knots.append(propagate(knots[-1], dt, prior))
    batches = [MeasurementBatch() for _ in range(n_knots - 1)]
    return Window(knots, batches, MarginalPrior.from_covariance(k0.copy(), np.eye(prior.dim) * 0.3))


def test_prior_only_normal_equations():
    prior = HybridPrior(rotation=CV, translation=CV)
    ctx = Context(prior, Extrinsics(), Gravity(), NoiseModel(), VoxelMap(), use_gyro=False, use_accel=False)
    window = prior_only_window(prior)
    ne, counts = build_normal_equations(window, ctx, associate(window, ctx, SolverConfig()))
    D = prior.dim
    phi, qinv = hybrid_transition(prior, 0.1), np.linalg.inv(hybrid_process_noise(prior, 0.1))
    A = np.hstack([-phi, np.eye(D)])
    H = np.zeros((4 * D, 4 * D))
    H[:D, :D] = np.eye(D) / 0.3
    for k in range(3):
        H[k * D:(k + 2) * D, k * D:(k + 2) * D] += A.T @ qinv @ A
    np.testing.assert_allclose(ne.H, H, rtol=1e-9, atol=1e-9 * np.abs(H).max())
    # the prior mean is the MAP: zero residuals give a zero step
    np.testing.assert_allclose(ne.b, 0.0, atol=1e-12)
    np.testing.assert_allclose(solve_step(ne), 0.0, atol=1e-12)
    assert counts.as_dict() == {"lidar": 0, "gyro": 0, "accel": 0}


def test_single_factor_touches_one_block(rng):
    D = 3
    ne = accumulate([FactorBlock(2, rng.normal(size=(2, D)), rng.normal(size=2), np.eye(2))], 4, D)
    nonzero = [(i, j) for i in range(4) for j in range(4) if np.any(ne.block(i, j))]
    assert nonzero == [(2, 2)]


def test_marginal_of_prior_only_segment_is_propagated_covariance():
    """With only its own prior on the oldest knot, eliminating it leaves
    ``(Phi K0 Phi^T + Q)^-1`` on the next knot."""
    prior = HybridPrior(rotation=CV, translation=CV)
    ctx = Context(prior, Extrinsics(), Gravity(), NoiseModel(), VoxelMap(), use_gyro=False, use_accel=False)
    window = prior_only_window(prior, n_knots=2)
    k0 = np.diag(np.linspace(0.1, 1.0, prior.dim))
    window.marginal = MarginalPrior.from_covariance(window.knots[0].copy(), k0)
    m = marginalize(window, ctx)
    phi = hybrid_transition(prior, 0.1)
    expected = np.linalg.inv(phi @ k0 @ phi.T + hybrid_process_noise(prior, 0.1))
    np.testing.assert_allclose(m.H, expected, rtol=1e-8, atol=1e-8 * np.abs(expected).max())
    np.testing.assert_allclose(m.b, 0.0, atol=1e-10)


def test_two_knot_marginal_equals_gaussian_conditioning(rng):
    """Marginalizing x0 from a dense two-knot Gaussian matches its covariance block."""
    D = 4
    cov = random_spd(rng, 2 * D, 100)
    mean = rng.normal(size=2 * D)
    H = np.linalg.inv(cov)
    b = -H @ mean  # gradient at x = 0
    Hm, bm = schur_marginalize(H, b, D)
    np.testing.assert_allclose(np.linalg.inv(Hm), cov[D:, D:], rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(-np.linalg.solve(Hm, bm), mean[D:], rtol=1e-8, atol=1e-10)


def test_window_information_is_block_tridiagonal(rng, lidar_context):
    ctx = lidar_context
    prior = ctx.prior
    knots = [true_knot(0.1 * k, prior) for k in range(5)]
    window = Window(knots, [scan(rng, 0.1 * k, 0.1 * (k + 1), n=100) for k in range(4)],
                    MarginalPrior.from_covariance(knots[0].copy(), np.eye(prior.dim)))
    ne, counts = build_normal_equations(window, ctx, associate(window, ctx, SolverConfig()))
    assert counts.lidar > 300
    for i in range(5):
        for j in range(5):
            assert np.any(ne.block(i, j)) == (abs(i - j) <= 1), (i, j)
    np.testing.assert_allclose(ne.H, ne.H.T, atol=1e-9 * np.abs(ne.H).max())


def test_noiseless_window_recovers_truth(rng, lidar_context):
    ctx = lidar_context
    prior = ctx.prior
    knots = [true_knot(0.1 * k, prior) for k in range(3)]
    batches = [scan(rng, 0.0, 0.1), scan(rng, 0.1, 0.2)]
    marginal = MarginalPrior.from_covariance(knots[0].copy(), np.eye(prior.dim) * 1e-2)
    start = [k.retract(np.r_[rng.normal(size=3) * 0.01, np.zeros(3), rng.normal(size=3) * 0.02, np.zeros(3)], prior)
             for k in knots]
    window = Window(start, batches, marginal)
    res = optimize(window, ctx, SolverConfig(max_iterations=30, tolerance=1e-10))
    assert res.converged and not res.diverged
    for est, ref in zip(window.knots, knots):
        np.testing.assert_allclose(est.p, ref.p, atol=1e-6)
        assert np.linalg.norm(so3.log(ref.R.T @ est.R)) < 1e-6


def test_stationary_gyro_offset_is_absorbed_into_bias(rng):
    """A constant gyro reading on a still platform ends up in ``b_g``, not in ``omega``."""
    prior = HybridPrior(rotation=CV, translation=CV, n_gyro_bias=1)
    ctx = Context(prior, Extrinsics(), Gravity(), NoiseModel(), room_map(), use_gyro=True, use_accel=False)

    def still(t):
        return np.eye(3), np.array([0.5, 0.2, 1.5])

    k0 = KnotState.zero(0, prior)
    k0.p = still(0.0)[1]
    cov = np.eye(prior.dim) * 1e-4
    cov[prior.gyro_bias_slice(0), prior.gyro_bias_slice(0)] = np.eye(3)  # bias unknown at start
    window = Window([k0], [], MarginalPrior.from_covariance(k0.copy(), cov))
    for k in range(3):
        t = np.linspace(0.1 * k, 0.1 * (k + 1), 20, endpoint=False)
        gyro = ImuBatch(np.tile([0.01, 0.0, 0.0], (20, 1)), t, np.zeros(20, dtype=np.int64))
        batch = MeasurementBatch(lidar=scan(rng, 0.1 * k, 0.1 * (k + 1), pose=still).lidar, gyro=gyro)
        res, _ = slide_window(window, batch, 0.1, ctx, K=3, cfg=SolverConfig(tolerance=1e-8), segment_id=k)
        assert not res.diverged
    last = window.knots[-1]
    np.testing.assert_allclose(last.bg[0], [0.01, 0.0, 0.0], atol=1e-4)
    np.testing.assert_allclose(last.w, 0.0, atol=1e-4)
