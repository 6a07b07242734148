"""
Linear-SDE diffusion processes and their Gaussian perturbation kernels.

A forward process ``dx = f(t) x dt + g(t) dw`` with scalar coefficients has
the closed-form kernel ``p(x(t) | x) = N(mu(t) x, sigma(t)^2 I)`` where

    d mu / dt      = f(t) mu,                 mu(0) = 1
    d sigma^2 / dt = 2 f(t) sigma^2 + g(t)^2,  sigma(0) = 0

Two families are provided:

* variance preserving (VP): ``beta(t) = beta_min + t (beta_max - beta_min)``,
  ``f = -beta / 2``, ``g = sqrt(beta)``, ``mu = exp(-B(t) / 2)`` and
  ``sigma^2 = 1 - mu^2`` with ``B`` the integral of ``beta``.
* variance exploding (VE): ``f = 0`` and
  ``sigma^2 = sigma_min^2 ((sigma_max / sigma_min)^(2t) - 1)``.

Every time-dependent function accepts a python float, a numpy array or a
torch tensor and returns the same kind.  Times must lie in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np
import torch

from .errors import DomainError, InputError

SIGMA_FLOOR = 1e-4
MU_FLOOR = 1e-4

VARIANCE_PRESERVING = "variance_preserving"
VARIANCE_EXPLODING = "variance_exploding"
_KIND_ALIASES = {"vp": VARIANCE_PRESERVING, "ve": VARIANCE_EXPLODING}


def _lib(t):
    return torch if isinstance(t, torch.Tensor) else np


def _check_time(t) -> None:
    if isinstance(t, torch.Tensor):
        if t.numel() == 0:
            return
        lo, hi = float(t.min()), float(t.max())
    else:
        arr = np.asarray(t, dtype=float)
        if arr.size == 0:
            return
        lo, hi = float(arr.min()), float(arr.max())
    if not (0.0 <= lo and hi <= 1.0):
        raise DomainError(f"diffusion time must lie in [0, 1], got range [{lo}, {hi}]")


def _out(value, like):
    # python floats in, python floats out
    if isinstance(like, (float, int)) and not isinstance(like, bool):
        return float(value)
    return value


@dataclass(frozen=True)
class DiffusionSchedule:
    """Analytic coefficients of a linear forward SDE.

    Parameters
    ----------
    kind : str
        ``"variance_preserving"`` (alias ``"vp"``) or
        ``"variance_exploding"`` (alias ``"ve"``).
    beta_min, beta_max : float
        Noise-rate bounds of the VP family.  The default ``beta_max`` is
        chosen so that ``mu(1) <= 1e-3``.
    sigma_min, sigma_max : float
        Geometric bounds of the VE family.
    """

    kind: str = VARIANCE_PRESERVING
    beta_min: float = 0.1
    beta_max: float = 28.0
    sigma_min: float = 0.01
    sigma_max: float = 10.0

    def __post_init__(self):
        kind = _KIND_ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind == VARIANCE_PRESERVING:
            if not (0 < self.beta_min < self.beta_max):
                raise InputError("VP schedule needs 0 < beta_min < beta_max")
        elif kind == VARIANCE_EXPLODING:
            if not (0 < self.sigma_min < self.sigma_max):
                raise InputError("VE schedule needs 0 < sigma_min < sigma_max")
        else:
            raise InputError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def vp(cls, beta_min: float = 0.1, beta_max: float = 28.0) -> "DiffusionSchedule":
        return cls(VARIANCE_PRESERVING, beta_min=beta_min, beta_max=beta_max)

    @classmethod
    def ve(cls, sigma_min: float = 0.01, sigma_max: float = 10.0) -> "DiffusionSchedule":
        return cls(VARIANCE_EXPLODING, sigma_min=sigma_min, sigma_max=sigma_max)

    @property
    def is_vp(self) -> bool:
        return self.kind == VARIANCE_PRESERVING

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        if self.is_vp:
            d.pop("sigma_min"), d.pop("sigma_max")
        else:
            d.pop("beta_min"), d.pop("beta_max")
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DiffusionSchedule":
        return cls(**d)

    @property
    def identifier(self) -> str:
        """Stable string used to tag persisted models."""
        if self.is_vp:
            return f"vp(beta_min={self.beta_min!r},beta_max={self.beta_max!r})"
        return f"ve(sigma_min={self.sigma_min!r},sigma_max={self.sigma_max!r})"

    # -- raw closed forms (no domain check, no floor) ---------------------

    def _beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def _beta_integral(self, t):
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t

    def variance(self, t):
        """Unclamped kernel variance ``sigma(t)^2``."""
        _check_time(t)
        xp = _lib(t)
        tt = np.asarray(t, dtype=float) if xp is np else t
        if self.is_vp:
            return _out(-xp.expm1(-self._beta_integral(tt)), t)
        log_ratio = math.log(self.sigma_max / self.sigma_min)
        return _out(self.sigma_min**2 * xp.expm1(2.0 * log_ratio * tt), t)

    # -- public coefficient functions ------------------------------------

    def mu(self, t):
        _check_time(t)
        xp = _lib(t)
        if self.is_vp:
            tt = np.asarray(t, dtype=float) if xp is np else t
            return _out(xp.exp(-0.5 * self._beta_integral(tt)), t)
        if xp is torch:
            return torch.ones_like(t)
        return _out(np.ones_like(np.asarray(t, dtype=float)), t)

    def sigma(self, t):
        var = self.variance(t)
        xp = _lib(var)
        if xp is torch:
            return torch.clamp(torch.sqrt(var), min=SIGMA_FLOOR)
        return _out(np.maximum(np.sqrt(var), SIGMA_FLOOR), t)

    def drift(self, t):
        _check_time(t)
        xp = _lib(t)
        if self.is_vp:
            tt = np.asarray(t, dtype=float) if xp is np else t
            return _out(-0.5 * self._beta(tt), t)
        if xp is torch:
            return torch.zeros_like(t)
        return _out(np.zeros_like(np.asarray(t, dtype=float)), t)

    def diffusion(self, t):
        _check_time(t)
        xp = _lib(t)
        tt = np.asarray(t, dtype=float) if xp is np else t
        if self.is_vp:
            return _out(xp.sqrt(self._beta(tt)), t)
        log_ratio = math.log(self.sigma_max / self.sigma_min)
        g2 = 2.0 * log_ratio * self.sigma_min**2 * xp.exp(2.0 * log_ratio * tt)
        return _out(xp.sqrt(g2), t)


def mean_scale(schedule: DiffusionSchedule, t):
    """Kernel mean coefficient ``mu(t)``."""
    return schedule.mu(t)


def std_dev(schedule: DiffusionSchedule, t):
    """Kernel standard deviation ``sigma(t)``, floored at ``SIGMA_FLOOR``."""
    return schedule.sigma(t)


def drift_coeff(schedule: DiffusionSchedule, t):
    return schedule.drift(t)


def diffusion_coeff(schedule: DiffusionSchedule, t):
    return schedule.diffusion(t)


class NoiseSource:
    """Seeded stream of standard Gaussian draws.

    Identical ``(seed, stream)`` pairs yield bit-identical sequences; distinct
    streams are statistically independent (``numpy.random.SeedSequence``
    spawn keys).  Instances are stateful and must not be shared between
    concurrent tasks.

    Parameters
    ----------
    seed : int
        Non-negative 64-bit seed.
    stream : int or tuple of int
        Stream identifier.  Tuples address nested streams, e.g.
        ``(member, window)``.
    """

    def __init__(self, seed: int, stream: int | Sequence[int] = 0):
        if seed < 0:
            raise InputError("seed must be non-negative")
        key = (stream,) if isinstance(stream, (int, np.integer)) else tuple(stream)
        if any(int(k) < 0 for k in key):
            raise InputError("stream ids must be non-negative")
        self.seed = int(seed)
        self.stream = tuple(int(k) for k in key)
        self._rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.stream))
        )

    def __repr__(self) -> str:
        return f"NoiseSource(seed={self.seed}, stream={self.stream})"

    @property
    def rng(self) -> np.random.Generator:
        return self._rng

    def spawn(self, *key: int) -> "NoiseSource":
        """Independent child stream addressed by ``key``."""
        return NoiseSource(self.seed, self.stream + tuple(key))

    def normal(self, shape) -> np.ndarray:
        return self._rng.standard_normal(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._rng.uniform(low, high, shape)

    def normal_like(self, x: torch.Tensor) -> torch.Tensor:
        return torch.from_numpy(self.normal(tuple(x.shape))).to(x.dtype)


class RowNoise:
    """Per-row Gaussian draws from independent streams.

    Row ``i`` always consumes stream ``sources[i]`` in the same order, so the
    values a row sees do not depend on how rows are grouped into batches.
    Draws are buffered in chunks of ``chunk`` vectors per row.
    """

    def __init__(self, sources: Sequence[NoiseSource], dim: int, chunk: int = 32):
        self.sources = list(sources)
        self.dim = int(dim)
        self.chunk = int(chunk)
        self._buf = np.empty((len(self.sources), 0, self.dim))
        self._pos = 0

    def __len__(self) -> int:
        return len(self.sources)

    def draw(self, dtype=torch.float64) -> torch.Tensor:
        if self._pos >= self._buf.shape[1]:
            self._buf = np.stack([s.normal((self.chunk, self.dim)) for s in self.sources])
            self._pos = 0
        out = self._buf[:, self._pos, :]
        self._pos += 1
        return torch.from_numpy(np.ascontiguousarray(out)).to(dtype)


def forward_perturb(schedule: DiffusionSchedule, x, t, noise: NoiseSource | None = None, eps=None):
    """Draw ``x(t) = mu(t) x + sigma(t) eps`` from the perturbation kernel.

    ``x`` may be a numpy array or a torch tensor of shape ``(..., d)``; ``t``
    a scalar or an array broadcastable against the leading dimensions.
    Either a ``NoiseSource`` or an explicit ``eps`` must be supplied.
    """
    is_torch = isinstance(x, torch.Tensor)
    finite = torch.isfinite(x).all() if is_torch else np.isfinite(np.asarray(x)).all()
    if not bool(finite):
        raise InputError("forward_perturb received non-finite input")
    if eps is None:
        if noise is None:
            raise InputError("forward_perturb needs a NoiseSource or explicit eps")
        eps = noise.normal(tuple(x.shape))
        if is_torch:
            eps = torch.from_numpy(eps).to(x.dtype)
    mu = schedule.mu(t)
    sigma = schedule.sigma(t)
    if not isinstance(t, (float, int)):
        mu = mu[..., None]
        sigma = sigma[..., None]
    return mu * x + sigma * eps
