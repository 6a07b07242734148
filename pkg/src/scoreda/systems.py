"""
Synthetic truths, observation synthesis, classical baselines and metrics.

* Linear-Gaussian state-space model with an exact Kalman filter / RTS
  smoother, and a stochastic (perturbed-observation) EnKF.
* Lorenz-96 ring integrated with classical RK4.
* Synthetic in-situ (masked points) and ex-situ (smoothed, coarsened
  footprint) modalities plus a degraded background product.
* Order-1 Wasserstein distance and RMSE.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .assimilation import Trajectory
from .diffusion import NoiseSource
from .errors import InputError, IntegrationError, NumericError
from .guidance import MeasurementOp, ObservationModel, apply_op

# stream ids for synthetic data
_TRUTH, _BACKGROUND, _IN_SITU, _EX_SITU = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# linear-Gaussian state-space model


def _spd(mat: np.ndarray, name: str) -> np.ndarray:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T, atol=1e-12):
        raise InputError(f"{name} must be a symmetric square matrix")
    if np.linalg.eigvalsh(mat).min() <= 0:
        raise InputError(f"{name} must be positive definite")
    return mat


@dataclass
class LinearGaussianSSM:
    """``x_0 ~ N(m0, P0)``, ``x_{t+1} = A x_t + w_t``, ``w_t ~ N(0, Q)``."""

    A: np.ndarray
    Q: np.ndarray
    m0: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.m0 = np.atleast_1d(np.asarray(self.m0, dtype=float))
        self.Q = _spd(self.Q, "Q")
        self.P0 = _spd(self.P0, "P0")
        d = self.m0.size
        if self.A.shape != (d, d) or self.Q.shape != (d, d) or self.P0.shape != (d, d):
            raise InputError("LGSSM matrices must all be dim x dim")

    @property
    def dim(self) -> int:
        return self.m0.size

    def prior_moments(self, T: int) -> tuple[np.ndarray, np.ndarray]:
        """Marginal means ``(T, d)`` and covariances ``(T, d, d)``."""
        m, P = self.m0.copy(), self.P0.copy()
        means, covs = [], []
        for _ in range(T):
            means.append(m)
            covs.append(P)
            m, P = self.A @ m, self.A @ P @ self.A.T + self.Q
        return np.array(means), np.array(covs)

    def joint_prior(self, T: int) -> tuple[np.ndarray, np.ndarray]:
        """Mean ``(T d,)`` and covariance ``(T d, T d)`` of the stacked trajectory."""
        means, covs = self.prior_moments(T)
        d = self.dim
        C = np.zeros((T * d, T * d))
        for s in range(T):
            C[s * d : (s + 1) * d, s * d : (s + 1) * d] = covs[s]
            prop = np.eye(d)
            for t in range(s + 1, T):
                prop = self.A @ prop
                block = prop @ covs[s]
                C[t * d : (t + 1) * d, s * d : (s + 1) * d] = block
                C[s * d : (s + 1) * d, t * d : (t + 1) * d] = block.T
        return means.reshape(-1), C


def simulate_lgssm(model: LinearGaussianSSM, T: int, seed: int) -> Trajectory:
    if T < 1:
        raise InputError("T must be >= 1")
    rng = NoiseSource(seed, _TRUTH).rng
    Lp = np.linalg.cholesky(model.P0)
    Lq = np.linalg.cholesky(model.Q)
    x = model.m0 + Lp @ rng.standard_normal(model.dim)
    out = [x]
    for _ in range(T - 1):
        x = model.A @ x + Lq @ rng.standard_normal(model.dim)
        out.append(x)
    return Trajectory(np.array(out), role="truth")


def _stack_obs(obs: Sequence[ObservationModel]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    H = np.concatenate([o.op.matrix() for o in obs])
    y = np.concatenate([np.asarray(o.y, dtype=float).reshape(-1) for o in obs])
    r = np.concatenate([np.full(o.op.out_dim, float(o.noise_variance)) for o in obs])
    return H, y, r


@dataclass
class KalmanResult:
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    predicted_means: np.ndarray
    predicted_covs: np.ndarray
    means: np.ndarray | None = None
    covs: np.ndarray | None = None


def kalman_filter(model: LinearGaussianSSM, observations: Sequence[Sequence[ObservationModel]]) -> KalmanResult:
    """Exact filtering moments for per-step observation lists."""
    T = len(observations)
    d = model.dim
    fm, fc, pm, pc = [], [], [], []
    m, P = model.m0.copy(), model.P0.copy()
    for t in range(T):
        if t > 0:
            m, P = model.A @ m, model.A @ P @ model.A.T + model.Q
        pm.append(m)
        pc.append(P)
        obs = list(observations[t])
        if obs:
            H, y, r = _stack_obs(obs)
            if H.shape[1] != d:
                raise InputError(f"observation operator at step {t} expects length {H.shape[1]}, state has {d}")
            S = H @ P @ H.T + np.diag(r)
            try:
                c = np.linalg.cholesky(S)
            except np.linalg.LinAlgError as exc:
                raise NumericError(f"singular innovation covariance at step {t}") from exc
            G = np.linalg.solve(c.T, np.linalg.solve(c, H @ P)).T  # P H^T S^-1
            m = m + G @ (y - H @ m)
            P = P - G @ H @ P
            P = 0.5 * (P + P.T)
        fm.append(m)
        fc.append(P)
    return KalmanResult(np.array(fm), np.array(fc), np.array(pm), np.array(pc))


def kalman_smoother(model: LinearGaussianSSM, observations: Sequence[Sequence[ObservationModel]]) -> KalmanResult:
    """Rauch-Tung-Striebel smoother; ``means``/``covs`` hold the posterior marginals."""
    res = kalman_filter(model, observations)
    T = len(observations)
    ms, Ps = res.filtered_means.copy(), res.filtered_covs.copy()
    for t in range(T - 2, -1, -1):
        Pp = res.predicted_covs[t + 1]
        J = np.linalg.solve(Pp, model.A @ res.filtered_covs[t]).T  # P_f A^T Pp^-1
        ms[t] = res.filtered_means[t] + J @ (ms[t + 1] - res.predicted_means[t + 1])
        Ps[t] = res.filtered_covs[t] + J @ (Ps[t + 1] - Pp) @ J.T
        Ps[t] = 0.5 * (Ps[t] + Ps[t].T)
    res.means, res.covs = ms, Ps
    return res


def enkf_assimilate(
    model: LinearGaussianSSM,
    ensemble: np.ndarray,
    observations: Sequence[Sequence[ObservationModel]],
    seed: int = 0,
) -> np.ndarray:
    """Stochastic perturbed-observation EnKF.

    Parameters
    ----------
    ensemble : (N_e, d)
        Initial ensemble, a draw from the prior at step 0.

    Returns
    -------
    (T, N_e, d) analysis ensembles, one per step.
    """
    X = np.array(ensemble, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InputError("EnKF needs an (N_e, d) ensemble with N_e >= 2")
    ne, d = X.shape
    src = NoiseSource(seed, 21)
    obs_rng, proc_rng = src.spawn(0).rng, src.spawn(1).rng
    Lq = np.linalg.cholesky(model.Q)
    out = []
    for t, obs in enumerate(observations):
        if t > 0:
            X = X @ model.A.T + proc_rng.standard_normal((ne, d)) @ Lq.T
        obs = list(obs)
        if obs:
            H, y, r = _stack_obs(obs)
            A = X - X.mean(axis=0)
            P = A.T @ A / (ne - 1)
            if np.trace(P) <= 1e-12 * max(1.0, float(np.abs(X).max())):
                warnings.warn("degenerate ensemble covariance; applying additive inflation", RuntimeWarning, stacklevel=2)
                P = P + 1e-8 * np.eye(d)
            S = H @ P @ H.T + np.diag(r)
            Y = y[None, :] + obs_rng.standard_normal((ne, y.size)) * np.sqrt(r)[None, :]
            innov = Y - X @ H.T
            X = X + np.linalg.lstsq(S, innov.T, rcond=None)[0].T @ (H @ P)
        out.append(X.copy())
    return np.array(out)


def gaussian_posterior_spread(cov: np.ndarray, observations: Sequence[ObservationModel]) -> np.ndarray:
    """Per-cell posterior standard deviation of ``N(., cov)`` after linear observations.

    Used as a linear-Gaussian oracle: it depends only on the operators and
    noise variances, never on the observed values.
    """
    P = _spd(cov, "cov")
    obs = list(observations)
    if not obs:
        return np.sqrt(np.diag(P))
    H, _, r = _stack_obs(obs)
    if H.shape[1] != P.shape[0]:
        raise InputError(f"operators expect length {H.shape[1]}, covariance has {P.shape[0]}")
    S = H @ P @ H.T + np.diag(r)
    PH = P @ H.T
    post = P - PH @ np.linalg.pinv(S, hermitian=True) @ PH.T
    return np.sqrt(np.clip(np.diag(post), 0.0, None))


# ---------------------------------------------------------------------------
# Lorenz-96


@dataclass
class Lorenz96Config:
    """Lorenz-96 ring ``dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F``.

    ``dt`` is the RK4 step; every ``save_every``-th state is kept and
    ``spinup`` steps are discarded first.
    """

    N: int = 40
    F: float = 8.0
    dt: float = 0.01
    spinup: int = 1000
    save_every: int = 5

    def __post_init__(self):
        issues = []
        if self.N < 4:
            issues.append("N must be >= 4")
        if not (self.dt > 0):
            issues.append("dt must be positive")
        if self.spinup < 0 or self.save_every < 1:
            issues.append("spinup must be >= 0 and save_every >= 1")
        if issues:
            raise InputError("invalid Lorenz-96 config: " + "; ".join(issues))

    def to_dict(self) -> dict:
        return asdict(self)


def l96_tendency(x: np.ndarray, F: float) -> np.ndarray:
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + F


def _rk4(x: np.ndarray, dt: float, F: float) -> np.ndarray:
    k1 = l96_tendency(x, F)
    k2 = l96_tendency(x + 0.5 * dt * k1, F)
    k3 = l96_tendency(x + 0.5 * dt * k2, F)
    k4 = l96_tendency(x + dt * k3, F)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def simulate_lorenz96(cfg: Lorenz96Config, T: int, seed: int, x0: np.ndarray | None = None) -> Trajectory:
    """Integrate a truth trajectory of ``T`` saved states.

    Without ``x0`` the start is ``F`` plus a small seeded perturbation.

    Raises
    ------
    IntegrationError
        If any state exceeds ``1e3`` in magnitude or becomes non-finite.
    """
    if T < 1:
        raise InputError("T must be >= 1")
    if x0 is None:
        x = cfg.F + 0.01 * NoiseSource(seed, _TRUTH).normal(cfg.N)
    else:
        x = np.array(x0, dtype=float)
        if x.shape != (cfg.N,):
            raise InputError(f"x0 must have length {cfg.N}")
    out = np.empty((T, cfg.N))
    total = cfg.spinup + (T - 1) * cfg.save_every
    k_out = 0
    for k in range(total + 1):
        if k >= cfg.spinup and (k - cfg.spinup) % cfg.save_every == 0:
            out[k_out] = x
            k_out += 1
        if k == total:
            break
        x = _rk4(x, cfg.dt, cfg.F)
        if not np.all(np.abs(x) <= 1e3):
            raise IntegrationError(f"Lorenz-96 integration blew up at step {k + 1}")
    return Trajectory(out, dt=cfg.dt * cfg.save_every, role="truth")


# ---------------------------------------------------------------------------
# synthetic modalities


IN_SITU, EX_SITU, BACKGROUND = "in_situ", "ex_situ", "background"


@dataclass
class SyntheticModalities:
    """Degradation knobs shared by the background and both observation types.

    * in-situ: every ``gap``-th cell (starting at ``offset``);
    * ex-situ: Gaussian smoothing of width ``coarsening / 2`` followed by
      block averaging by ``coarsening``;
    * background: coarsened, replicated back to the grid, masked by ``gap``.

    All carry additive Gaussian noise of variance ``noise_variance``.
    """

    coarsening: int = 4
    noise_variance: float = 0.1
    gap: int = 1
    offset: int = 0

    def __post_init__(self):
        if self.coarsening < 1 or self.gap < 1:
            raise InputError("coarsening and gap must be >= 1")
        if not (self.noise_variance >= 0):
            raise InputError("noise variance must be >= 0")

    def operators(self, n: int) -> dict[str, MeasurementOp]:
        c = self.coarsening
        return {
            IN_SITU: MeasurementOp.mask(n, gap=self.gap, offset=self.offset),
            EX_SITU: MeasurementOp.compose([MeasurementOp.gaussian_smooth(n, c / 2.0), MeasurementOp.coarsen(n, c)]),
        }

    def background_op(self, n: int) -> MeasurementOp:
        c = self.coarsening
        return MeasurementOp.compose(
            [MeasurementOp.coarsen(n, c), MeasurementOp.upsample(n, c), MeasurementOp.mask(n, gap=self.gap, offset=self.offset)]
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _spec(modalities, n: int) -> dict[str, tuple[MeasurementOp, float]]:
    if isinstance(modalities, SyntheticModalities):
        return {k: (op, modalities.noise_variance) for k, op in modalities.operators(n).items()}
    return dict(modalities)


def synthesize(values: np.ndarray, modalities, seed: int) -> dict[str, np.ndarray]:
    """Noisy observation arrays ``(T, m)`` per modality tag for states ``(T, n)``."""
    values = np.asarray(values, dtype=float)
    n = values.shape[-1]
    out = {}
    for j, (tag, (op, var)) in enumerate(sorted(_spec(modalities, n).items())):
        if op.in_dim != n:
            raise InputError(f"[{tag}] operator expects length {op.in_dim}, state has {n}")
        clean = apply_op(op, values)
        stream = {IN_SITU: _IN_SITU, EX_SITU: _EX_SITU}.get(tag, 10 + j)
        out[tag] = clean + NoiseSource(seed, stream).normal(clean.shape) * np.sqrt(var)
    return out


def synthesize_background(values: np.ndarray, modalities: SyntheticModalities, seed: int) -> np.ndarray:
    """Degraded background ``(T, n)`` with NaN off the sampling mask."""
    values = np.asarray(values, dtype=float)
    op = modalities.background_op(values.shape[-1])
    coarse = apply_op(op, values)
    coarse = coarse + NoiseSource(seed, _BACKGROUND).normal(coarse.shape) * np.sqrt(modalities.noise_variance)
    return op.ops[-1].regrid(coarse)


def make_observations(
    truth: Trajectory,
    modalities: SyntheticModalities | Mapping[str, tuple[MeasurementOp, float]],
    seed: int,
) -> list[list[ObservationModel]]:
    """Per-step observation sets ``y = A(truth_t) + noise``.

    ``modalities`` is a :class:`SyntheticModalities` or a mapping from tag to
    ``(operator, noise variance)``.  Each tag draws from its own stream.
    """
    spec = _spec(modalities, truth.n)
    arrays = synthesize(truth.values, spec, seed)
    out: list[list[ObservationModel]] = [[] for _ in range(truth.T)]
    for tag in sorted(arrays):
        op, var = spec[tag]
        for t in range(truth.T):
            out[t].append(ObservationModel(arrays[tag][t], op, float(var), tag))
    return out


def make_background(truth: Trajectory, modalities: SyntheticModalities, seed: int) -> Trajectory:
    """Degraded prior product on the state grid; NaN off the sampling mask."""
    return Trajectory(synthesize_background(truth.values, modalities, seed), dt=truth.dt, role="background")


# ---------------------------------------------------------------------------
# metrics


def wasserstein_1d(a, b) -> float:
    """Order-1 Wasserstein distance between two empirical 1-D distributions."""
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise InputError("wasserstein_1d needs non-empty samples")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise InputError("wasserstein_1d needs finite samples")
    return float(stats.wasserstein_distance(a, b))


def cell_wasserstein(members: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-cell distance between pooled analysis values and the truth.

    ``members`` is ``(M, T, N)`` (or ``(T, N)``); at each cell the values of
    all members over all steps form one sample, the truth over all steps the
    other.
    """
    m = np.asarray(members, dtype=float)
    if m.ndim == 2:
        m = m[None]
    truth = np.asarray(truth, dtype=float)
    if m.shape[1:] != truth.shape:
        raise InputError("analysis and truth shapes differ")
    return np.array([wasserstein_1d(m[:, :, i], truth[:, i]) for i in range(truth.shape[1])])


def rmse(a, b) -> float:
    """Root mean squared cellwise difference of two equally shaped trajectories."""
    a = a.values if isinstance(a, Trajectory) else np.asarray(a, dtype=float)
    b = b.values if isinstance(b, Trajectory) else np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))
