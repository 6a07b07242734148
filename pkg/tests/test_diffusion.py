from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from scoreda.diffusion import (
    SIGMA_FLOOR,
    DiffusionSchedule,
    NoiseSource,
    RowNoise,
    forward_perturb,
)
from scoreda.errors import DomainError, InputError

from oracles import ve_moments_ode, vp_moments_ode

VP = DiffusionSchedule.vp()
VE = DiffusionSchedule.ve()
times = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


def test_vp_boundaries():
    assert VP.mu(0.0) == 1.0
    assert VP.sigma(0.0) <= 1e-3
    assert VP.mu(1.0) <= 1e-3


def test_ve_boundaries():
    assert VE.mu(0.0) == 1.0
    assert VE.sigma(0.0) <= 1e-3
    assert VE.sigma(1.0) == pytest.approx(np.sqrt(VE.sigma_max**2 - VE.sigma_min**2))


def test_vp_moments_match_ode():
    ts = np.linspace(0.01, 1.0, 50)
    m, v = vp_moments_ode(VP.beta_min, VP.beta_max, ts)
    np.testing.assert_allclose(VP.mu(ts), m, rtol=1e-6)
    np.testing.assert_allclose(VP.variance(ts), v, rtol=1e-6)


def test_ve_moments_match_ode():
    ts = np.linspace(0.01, 1.0, 50)
    v = ve_moments_ode(VE.sigma_min, VE.sigma_max, ts)
    np.testing.assert_allclose(VE.variance(ts), v, rtol=1e-6)


def test_drift_and_diffusion_satisfy_moment_equations():
    # d mu/dt = f mu and d var/dt = 2 f var + g^2, checked by central differences
    h = 1e-6
    for s in (VP, VE):
        for t in (0.1, 0.4, 0.9):
            dmu = (s.mu(t + h) - s.mu(t - h)) / (2 * h)
            dvar = (s.variance(t + h) - s.variance(t - h)) / (2 * h)
            assert dmu == pytest.approx(s.drift(t) * s.mu(t), rel=1e-6, abs=1e-12)
            assert dvar == pytest.approx(2 * s.drift(t) * s.variance(t) + s.diffusion(t) ** 2, rel=1e-6)


@given(times)
def test_vp_preserves_unit_variance(t):
    assert VP.mu(t) ** 2 + VP.variance(t) == pytest.approx(1.0, abs=1e-12)


@given(times, times)
def test_sigma_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    for s in (VP, VE):
        assert s.sigma(lo) <= s.sigma(hi) + 1e-15
        assert s.mu(lo) >= s.mu(hi) - 1e-15


def test_sigma_floor():
    assert VP.sigma(0.0) == SIGMA_FLOOR
    assert VE.sigma(0.0) == SIGMA_FLOOR


@pytest.mark.parametrize("t", [-0.1, 1.5, np.array([0.2, 1.01])])
def test_time_outside_unit_interval_rejected(t):
    with pytest.raises(DomainError):
        VP.mu(t)


def test_types_follow_input():
    assert isinstance(VP.mu(0.5), float)
    assert isinstance(VP.sigma(np.array([0.5])), np.ndarray)
    out = VP.sigma(torch.tensor([0.2, 0.5], dtype=torch.float64))
    assert isinstance(out, torch.Tensor)
    np.testing.assert_allclose(out.numpy(), VP.sigma(np.array([0.2, 0.5])))


def test_invalid_schedule():
    with pytest.raises(InputError):
        DiffusionSchedule("vp", beta_min=2.0, beta_max=1.0)
    with pytest.raises(InputError):
        DiffusionSchedule("cosine")


def test_schedule_roundtrip():
    for s in (VP, VE, DiffusionSchedule.vp(0.2, 15.0)):
        again = DiffusionSchedule.from_dict(s.to_dict())
        assert again == s
        assert again.identifier == s.identifier


def test_noise_source_reproducible_and_independent():
    a = NoiseSource(3, (1, 2)).normal((4, 5))
    b = NoiseSource(3, (1, 2)).normal((4, 5))
    c = NoiseSource(3, (2, 1)).normal((4, 5))
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    with pytest.raises(InputError):
        NoiseSource(-1)


def test_row_noise_is_batch_invariant():
    full = RowNoise([NoiseSource(0, (i,)) for i in range(4)], 3, chunk=2)
    draws = np.stack([full.draw().numpy() for _ in range(5)])
    single = RowNoise([NoiseSource(0, (2,))], 3, chunk=3)
    mine = np.stack([single.draw().numpy()[0] for _ in range(5)])
    np.testing.assert_array_equal(draws[:, 2], mine)


def test_forward_perturb_moments():
    x = np.full((20000, 2), 2.0)
    out = forward_perturb(VP, x, 0.3, NoiseSource(0))
    assert out.mean() == pytest.approx(2.0 * VP.mu(0.3), abs=0.02)
    assert out.std() == pytest.approx(VP.sigma(0.3), rel=0.02)
    with pytest.raises(InputError):
        forward_perturb(VP, np.array([np.nan]), 0.3, NoiseSource(0))
    with pytest.raises(InputError):
        forward_perturb(VP, x, 0.3)


def test_forward_perturb_per_row_times():
    x = torch.ones(3, 2, dtype=torch.float64)
    t = torch.tensor([0.0, 0.5, 1.0], dtype=torch.float64)
    out = forward_perturb(VP, x, t, eps=torch.zeros_like(x))
    np.testing.assert_allclose(out[:, 0].numpy(), VP.mu(t).numpy())
