"""
Reverse-time predictor-corrector sampling.

The predictor is the exponential-integrator step

    x(t') = (mu'/mu) x(t) + (mu'/mu - sigma'/sigma) sigma^2 s(x(t), t)

taken between consecutive nodes of a uniform grid from 1 down to ``t_floor``.
After every predictor step ``corrections`` Langevin steps

    x <- x + delta s(x, t') + sqrt(2 delta) eps

are applied at the new node.  The step ``delta`` depends on
``corrector_scaling``:

* ``"curvature"`` (default): ``tau sigma^2 / max(1, sigma^2 L)`` with
  ``L = sum_i ||A_i||^2 / (mu^2 sigma_y,i^2 + gamma sigma^2)`` the curvature
  of the guidance terms under a frozen denoiser.  The step is the same for
  every row, so the Langevin chain keeps its target; without observations it
  reduces to ``"sigma2"``.
* ``"snr"``: ``tau sigma^2 / max(1, mean(eps_hat^2))`` per row, with
  ``eps_hat = -sigma s`` the (guided) noise estimate.  The row-dependent step
  biases the chain towards heavier tails, most visibly in low dimension.
* ``"sigma2"``: ``tau sigma(t')^2``.
* ``"none"``: ``tau``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .diffusion import MU_FLOOR, SIGMA_FLOOR, DiffusionSchedule, NoiseSource, RowNoise
from .errors import ConfigError, InputError, NumericError, NumericGuardError
from .guidance import GuidanceConfig, ObservationModel, conditional_score
from .score import NoisePredictor, model_score

ScoreFn = Callable[[Tensor, float], Tensor]


SCALINGS = ("curvature", "snr", "sigma2", "none")


@dataclass
class SamplerConfig:
    """Reverse-process discretisation.

    Parameters
    ----------
    n_steps : int
        Predictor steps between ``t = 1`` and ``t = t_floor``.
    corrections : int
        Langevin steps after each predictor step (0 disables the corrector).
    tau : float
        Langevin amplitude.
    corrector_scaling : {"curvature", "snr", "sigma2", "none"}
        Langevin step rule, see the module docstring.
    """

    n_steps: int = 512
    corrections: int = 1
    tau: float = 0.5
    t_floor: float = 1e-3
    seed: int = 0
    corrector_scaling: str = "curvature"

    def __post_init__(self):
        issues = []
        if self.n_steps < 1:
            issues.append("n_steps must be >= 1")
        if self.corrections < 0:
            issues.append("corrections must be >= 0")
        if not (self.tau > 0):
            issues.append("tau must be positive")
        if not (0 < self.t_floor < 1):
            issues.append("t_floor must lie in (0, 1)")
        if self.corrector_scaling not in SCALINGS:
            issues.append(f"unknown corrector_scaling {self.corrector_scaling!r}")
        if issues:
            raise ConfigError("invalid sampler config", issues)

    def time_grid(self) -> np.ndarray:
        return np.linspace(1.0, self.t_floor, self.n_steps + 1)

    def step_size(self, schedule: DiffusionSchedule, t: float, score: Tensor | None = None, curvature: float = 0.0):
        """Langevin step at ``t``; a ``(rows, 1)`` tensor for ``"snr"``.

        ``curvature`` is the guidance curvature ``L`` used by ``"curvature"``.
        """
        if self.corrector_scaling == "none":
            return self.tau
        s2 = schedule.sigma(t) ** 2
        if self.corrector_scaling == "curvature":
            c = s2 * curvature
            return 0.0 if math.isinf(c) else self.tau * s2 / max(1.0, c)
        if self.corrector_scaling == "sigma2" or score is None:
            return self.tau * s2
        snr = (s2 * score.detach().square().mean(dim=-1, keepdim=True)).clamp(min=1.0)
        return self.tau * s2 / snr


@dataclass
class SampleResult:
    """Final states plus per-row failure bookkeeping.

    ``nonfinite_step[i]`` is the index of the first predictor step after which
    row ``i`` stopped being finite, or ``-1``.
    """

    samples: Tensor
    nonfinite_step: np.ndarray
    times: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))

    @property
    def failed(self) -> np.ndarray:
        return self.nonfinite_step >= 0

    @property
    def n_failed(self) -> int:
        return int(self.failed.sum())


def ei_predictor_step(x_t: Tensor, t: float, dt: float, score_fn, schedule: DiffusionSchedule, score: Tensor | None = None) -> Tensor:
    """One exponential-integrator step from ``t`` to ``t - dt``.

    ``score`` may be passed when it was already evaluated at ``(x_t, t)``.
    """
    t, dt = float(t), float(dt)
    if dt < 0 or t - dt < 0:
        raise InputError(f"invalid predictor step t={t}, dt={dt}")
    if dt == 0:
        return x_t.clone()
    mu, sigma = schedule.mu(t), schedule.sigma(t)
    if mu < MU_FLOOR or schedule.variance(t) < SIGMA_FLOOR**2:
        raise NumericGuardError(f"predictor step at t={t} with mu={mu:.3g}, sigma={sigma:.3g} below floor")
    t2 = t - dt
    mu2, sigma2 = schedule.mu(t2), schedule.sigma(t2)
    s = score_fn(x_t, t) if score is None else score
    ratio = mu2 / mu
    return ratio * x_t + (ratio - sigma2 / sigma) * sigma * sigma * s


def guidance_curvature(observations: Sequence[ObservationModel], t: float, schedule: DiffusionSchedule, gamma: float) -> float:
    """``sum_i ||A_i||_2^2 / (mu^2 sigma_y,i^2 + gamma sigma^2)``, the Hessian bound of the guidance terms."""
    return _curvature([(_op_norm2(o.op), o.noise_variance) for o in observations], t, schedule, gamma)


def _op_norm2(op) -> float:
    return float(np.linalg.norm(op.matrix(), 2) ** 2)


def _curvature(terms: list[tuple[float, float]], t: float, schedule: DiffusionSchedule, gamma: float) -> float:
    mu, sigma = schedule.mu(float(t)), schedule.sigma(float(t))
    total = 0.0
    for norm2, var in terms:
        den = mu * mu * var + gamma * sigma * sigma
        total += norm2 / den if den > 0 else math.inf
    return total


def lmc_corrector_step(x_t: Tensor, t: float, score_fn, tau: float, noise=None, eps: Tensor | None = None, step_scale: float = 1.0) -> Tensor:
    """Langevin correction ``x + delta s + sqrt(2 delta) eps`` with ``delta = tau * step_scale``.

    ``eps`` is drawn from ``noise`` (a :class:`NoiseSource` or
    :class:`RowNoise`) unless given.
    """
    if not (tau > 0):
        raise InputError("tau must be positive")
    delta = float(tau) * float(step_scale)
    if eps is None:
        eps = _draw(noise, x_t)
    out = x_t + delta * score_fn(x_t, t) + math.sqrt(2.0 * delta) * eps
    if not bool(torch.isfinite(out).all()):
        raise NumericError(f"non-finite Langevin update at t={float(t):.6g}")
    return out


def _draw(noise, like: Tensor) -> Tensor:
    if noise is None:
        raise InputError("a noise source or explicit eps is required")
    if isinstance(noise, RowNoise):
        if len(noise) != like.shape[0] or noise.dim != like.shape[-1]:
            raise InputError("RowNoise shape does not match the state batch")
        return noise.draw(like.dtype)
    return noise.normal_like(like)


def make_score_fn(
    model: NoisePredictor,
    schedule: DiffusionSchedule,
    observations: Sequence[ObservationModel] | None = None,
    guidance: GuidanceConfig | None = None,
    check_finite: bool = False,
) -> ScoreFn:
    """Unconditional or observation-guided score as a function of ``(x, t)``."""
    if observations:
        obs = list(observations)
        cfg = guidance or GuidanceConfig()
        return lambda x, t: conditional_score(x, t, obs, model, schedule, cfg, check_finite=check_finite)

    def uncond(x, t):
        with torch.no_grad():
            return model_score(model, x, t, schedule)

    return uncond


def sample(
    model: NoisePredictor,
    schedule: DiffusionSchedule,
    cfg: SamplerConfig | None = None,
    observations: Sequence[ObservationModel] | None = None,
    guidance: GuidanceConfig | None = None,
    n_samples: int = 1,
    dim: int | None = None,
    noise: NoiseSource | RowNoise | None = None,
    dtype: torch.dtype | None = None,
    score_fn: ScoreFn | None = None,
) -> SampleResult:
    """Draw ``n_samples`` states by predictor-corrector integration.

    Parameters
    ----------
    model : callable
        Noise predictor ``(x_t, t) -> eps_hat`` (a :class:`ScoreModel` or an
        oracle).  Ignored for the score when ``score_fn`` is given.
    observations : list of ObservationModel, optional
        When present the guided conditional score is used.  Batched ``y``
        (one row per sample) is supported.
    noise : NoiseSource or RowNoise, optional
        Source of the initial draw and the Langevin noise.  Defaults to
        ``NoiseSource(cfg.seed)``.  A :class:`RowNoise` makes each row's
        trajectory independent of the batch it is computed in.

    Returns
    -------
    SampleResult
        Rows that become non-finite are kept as NaN and flagged with the
        predictor step at which they failed; other rows are unaffected.
    """
    cfg = cfg or SamplerConfig()
    dim = dim if dim is not None else getattr(model, "dim", None)
    if dim is None:
        raise InputError("state dimension unknown; pass dim")
    if dtype is None:
        dtype = getattr(model, "torch_dtype", torch.float64)
    if noise is None:
        noise = NoiseSource(cfg.seed)
    if isinstance(noise, RowNoise) and len(noise) != n_samples:
        raise InputError("RowNoise must have one stream per sample")
    if score_fn is None:
        score_fn = make_score_fn(model, schedule, observations, guidance)

    grid = cfg.time_grid()
    gamma = (guidance or GuidanceConfig()).gamma
    terms = []
    if observations and cfg.corrector_scaling == "curvature":
        norms: dict[str, float] = {}
        for o in observations:
            key = o.op.key
            if key not in norms:
                norms[key] = _op_norm2(o.op)
            terms.append((norms[key], o.noise_variance))
    probe = torch.empty((n_samples, dim), dtype=dtype)
    x = schedule.sigma(1.0) * _draw(noise, probe)
    bad_step = np.full(n_samples, -1, dtype=np.int64)

    for k in range(cfg.n_steps):
        t, t2 = float(grid[k]), float(grid[k + 1])
        x = ei_predictor_step(x, t, t - t2, score_fn, schedule)
        for _ in range(cfg.corrections):
            eps = _draw(noise, x)
            s = score_fn(x, t2)
            delta = cfg.step_size(schedule, t2, s, _curvature(terms, t2, schedule, gamma))
            x = x + delta * s + (2.0 * delta) ** 0.5 * eps
        x = x.detach()
        finite = torch.isfinite(x).all(dim=-1).numpy()
        new_bad = (~finite) & (bad_step < 0)
        if new_bad.any():
            bad_step[new_bad] = k
            x[torch.from_numpy(~finite)] = float("nan")
    return SampleResult(samples=x, nonfinite_step=bad_step, times=grid)
