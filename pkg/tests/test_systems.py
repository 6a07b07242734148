from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scoreda.assimilation import Trajectory
from scoreda.errors import InputError, IntegrationError
from scoreda.guidance import MeasurementOp, ObservationModel
from scoreda.systems import (
    EX_SITU,
    IN_SITU,
    LinearGaussianSSM,
    Lorenz96Config,
    SyntheticModalities,
    cell_wasserstein,
    enkf_assimilate,
    gaussian_posterior_spread,
    kalman_filter,
    kalman_smoother,
    l96_tendency,
    make_background,
    make_observations,
    rmse,
    simulate_lgssm,
    simulate_lorenz96,
    synthesize,
    wasserstein_1d,
)

from oracles import joint_gaussian_posterior, l96_rhs_loop, lgssm_joint, wasserstein_lp


def _ssm(d, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(d, d))
    A *= 0.9 / max(1.0, np.abs(np.linalg.eigvals(A)).max())
    B = rng.normal(size=(d, d))
    return LinearGaussianSSM(A, 0.3 * np.eye(d) + 0.1 * B @ B.T, rng.normal(size=d), np.eye(d))


def _observations(model, T, seed, every=1):
    truth = simulate_lgssm(model, T, seed)
    rng = np.random.default_rng(seed + 100)
    op = MeasurementOp.mask(model.dim, indices=[0])
    obs = []
    for t in range(T):
        if t % every:
            obs.append([])
            continue
        y = op(truth.values[t]) + 0.5 * rng.normal(size=op.out_dim)
        obs.append([ObservationModel(y, op, 0.25)])
    return truth, obs


def _brute_posterior(model, obs):
    T, d = len(obs), model.dim
    mean, cov = lgssm_joint(model.A, model.Q, model.m0, model.P0, T)
    rows, ys, rs = [], [], []
    for t, olist in enumerate(obs):
        for o in olist:
            H = np.zeros((o.op.out_dim, T * d))
            H[:, t * d : (t + 1) * d] = o.op.matrix()
            rows.append(H)
            ys.append(np.atleast_1d(o.y))
            rs.append(np.full(o.op.out_dim, o.noise_variance))
    return joint_gaussian_posterior(mean, cov, np.vstack(rows), np.diag(np.concatenate(rs)), np.concatenate(ys))


def test_joint_prior_matches_enumeration():
    m = _ssm(3, 0)
    mean, cov = m.joint_prior(4)
    em, ec = lgssm_joint(m.A, m.Q, m.m0, m.P0, 4)
    np.testing.assert_allclose(mean, em, atol=1e-12)
    np.testing.assert_allclose(cov, ec, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([(1, 6), (2, 5), (3, 4), (4, 3), (2, 2)]), st.integers(0, 10_000), st.integers(1, 2))
def test_smoother_equals_joint_conditioning(shape, seed, every):
    d, T = shape
    model = _ssm(d, seed)
    _, obs = _observations(model, T, seed, every)
    res = kalman_smoother(model, obs)
    pm, pc = _brute_posterior(model, obs)
    np.testing.assert_allclose(res.means.reshape(-1), pm, atol=1e-10)
    for t in range(T):
        np.testing.assert_allclose(res.covs[t], pc[t * d : (t + 1) * d, t * d : (t + 1) * d], atol=1e-10)


def test_filter_last_step_equals_smoother_last_step():
    model = _ssm(2, 3)
    _, obs = _observations(model, 6, 3)
    f = kalman_filter(model, obs)
    s = kalman_smoother(model, obs)
    np.testing.assert_allclose(f.filtered_means[-1], s.means[-1])


def test_filter_rejects_wrong_operator():
    model = _ssm(2, 0)
    obs = [[ObservationModel(np.zeros(1), MeasurementOp.mask(3, indices=[0]), 0.1)]]
    with pytest.raises(InputError):
        kalman_filter(model, obs)


def test_ssm_validation():
    with pytest.raises(InputError):
        LinearGaussianSSM(np.eye(2), -np.eye(2), np.zeros(2), np.eye(2))
    with pytest.raises(InputError):
        LinearGaussianSSM(np.eye(3), np.eye(2), np.zeros(2), np.eye(2))


def test_enkf_approaches_kalman_with_large_ensemble():
    model = _ssm(2, 1)
    _, obs = _observations(model, 5, 1)
    kf = kalman_filter(model, obs)
    rng = np.random.default_rng(0)
    ens = model.m0 + rng.normal(size=(20000, 2)) @ np.linalg.cholesky(model.P0).T
    out = enkf_assimilate(model, ens, obs, seed=0)
    np.testing.assert_allclose(out[-1].mean(0), kf.filtered_means[-1], atol=0.03)
    np.testing.assert_allclose(np.cov(out[-1].T), kf.filtered_covs[-1], atol=0.03)


def test_enkf_errors():
    model = _ssm(2, 1)
    with pytest.raises(InputError):
        enkf_assimilate(model, np.zeros((1, 2)), [[]])
    with pytest.warns(RuntimeWarning):
        op = MeasurementOp.identity(2)
        enkf_assimilate(model, np.zeros((4, 2)), [[ObservationModel(np.zeros(2), op, 0.1)]])


@settings(max_examples=20, deadline=None)
@given(st.integers(4, 30), st.integers(0, 2**31 - 1))
def test_l96_tendency_matches_loop(n, seed):
    x = np.random.default_rng(seed).normal(size=n) * 5
    np.testing.assert_allclose(l96_tendency(x, 8.0), l96_rhs_loop(x, 8.0), atol=1e-12)


def test_l96_simulation():
    cfg = Lorenz96Config(N=10, spinup=200, save_every=2)
    a = simulate_lorenz96(cfg, 30, seed=1)
    b = simulate_lorenz96(cfg, 30, seed=1)
    assert np.array_equal(a.values, b.values) and a.values.shape == (30, 10)
    assert a.dt == pytest.approx(0.02)
    # fixed point x = F stays put
    fixed = simulate_lorenz96(Lorenz96Config(N=6, spinup=0), 5, 0, x0=np.full(6, 8.0))
    np.testing.assert_allclose(fixed.values, 8.0)
    with pytest.raises(IntegrationError):
        simulate_lorenz96(Lorenz96Config(N=6, spinup=0, dt=1.0), 50, 0, x0=np.full(6, 8.0) + np.arange(6))
    with pytest.raises(InputError):
        Lorenz96Config(N=3)


def test_synthetic_modalities_shapes_and_noise():
    truth = simulate_lorenz96(Lorenz96Config(N=40, spinup=100), 400, 0)
    mods = SyntheticModalities(coarsening=4, noise_variance=0.5, gap=3)
    arrays = synthesize(truth.values, mods, seed=2)
    assert arrays[IN_SITU].shape == (400, 14) and arrays[EX_SITU].shape == (400, 10)
    resid = arrays[IN_SITU] - truth.values[:, ::3]
    assert resid.var() == pytest.approx(0.5, rel=0.05)
    bg = make_background(truth, mods, 2)
    assert np.isnan(bg.values[:, 1]).all() and np.isfinite(bg.values[:, ::3]).all()
    obs = make_observations(truth, mods, 2)
    assert [o.tag for o in obs[0]] == [EX_SITU, IN_SITU]
    np.testing.assert_array_equal(obs[5][1].y, arrays[IN_SITU][5])


def test_modality_streams_are_independent():
    v = np.zeros((3, 8))
    a = synthesize(v, SyntheticModalities(coarsening=2, gap=1), 0)
    b = synthesize(v, {IN_SITU: (MeasurementOp.mask(8, gap=1), 0.1)}, 0)
    np.testing.assert_array_equal(a[IN_SITU], b[IN_SITU])


@settings(max_examples=20, deadline=None)
@given(
    st.lists(st.floats(-10, 10), min_size=1, max_size=7),
    st.lists(st.floats(-10, 10), min_size=1, max_size=7),
)
def test_wasserstein_matches_transport_lp(a, b):
    assert wasserstein_1d(a, b) == pytest.approx(wasserstein_lp(a, b), abs=1e-7)


def test_wasserstein_errors_and_cells():
    with pytest.raises(InputError):
        wasserstein_1d([], [1.0])
    with pytest.raises(InputError):
        wasserstein_1d([np.nan], [1.0])
    truth = np.arange(6.0).reshape(3, 2)
    assert cell_wasserstein(truth, truth).tolist() == [0.0, 0.0]
    np.testing.assert_allclose(cell_wasserstein(np.stack([truth + 1, truth - 1]), truth), [1.0, 1.0])


def test_rmse():
    assert rmse(Trajectory(np.zeros((2, 2))), np.ones((2, 2))) == 1.0
    with pytest.raises(InputError):
        rmse(np.zeros(3), np.zeros(4))


def _random_cov(n, seed):
    B = np.random.default_rng(seed).normal(size=(n, n))
    return B @ B.T / n + 0.1 * np.eye(n)


def test_posterior_spread_matches_dense_conditioning():
    n = 8
    cov = _random_cov(n, 0)
    obs = [
        ObservationModel(np.zeros(4), MeasurementOp.mask(n, gap=2), 0.3),
        ObservationModel(np.zeros(2), MeasurementOp.coarsen(n, 4), 0.1),
    ]
    H = np.vstack([o.op.matrix() for o in obs])
    R = np.diag([0.3] * 4 + [0.1] * 2)
    _, pc = joint_gaussian_posterior(np.zeros(n), cov, H, R, np.zeros(6))
    np.testing.assert_allclose(gaussian_posterior_spread(cov, obs), np.sqrt(np.diag(pc)), rtol=1e-9)
    np.testing.assert_allclose(gaussian_posterior_spread(cov, []), np.sqrt(np.diag(cov)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.floats(0.01, 4.0), st.integers(1, 5))
def test_extra_modality_never_increases_oracle_spread(seed, coarsening, var, gap):
    n = 16
    cov = _random_cov(n, seed)
    ops = SyntheticModalities(coarsening=coarsening, noise_variance=var, gap=gap).operators(n)
    base = [ObservationModel(np.zeros(ops[IN_SITU].out_dim), ops[IN_SITU], var)]
    both = base + [ObservationModel(np.zeros(ops[EX_SITU].out_dim), ops[EX_SITU], var)]
    assert np.all(gaussian_posterior_spread(cov, both) <= gaussian_posterior_spread(cov, base) + 1e-10)
