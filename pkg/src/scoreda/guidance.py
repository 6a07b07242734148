"""
Conditional-score assembly for observation-guided sampling.

Pieces:

* :class:`MeasurementOp` -- linear degradations (coarsen, mask, smooth, ...)
  acting on the last axis, each with an exact adjoint.
* :func:`tweedie_denoise` -- ``x_hat = (x_t + sigma^2 s) / mu``.
* :func:`likelihood_score` -- gradient of ``log N(y | A x_hat, v(t))`` with
  ``v(t) = sigma_y^2 + gamma sigma(t)^2 / mu(t)^2``.
* :func:`conditional_score` -- unconditional score plus the sum of
  per-modality likelihood scores.

The likelihood is evaluated in the algebraically equivalent form
``-||mu y - A(x_t + sigma^2 s)||^2 / (2 (mu^2 sigma_y^2 + gamma sigma^2))``
which never divides by ``mu`` and so stays finite as ``mu(t) -> 0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from torch import Tensor

from .diffusion import MU_FLOOR, DiffusionSchedule, _check_time
from .errors import ConfigError, InputError, NumericError, NumericGuardError
from .score import NoisePredictor, predict_noise, score_from_noise

IDENTITY = "identity"
COARSEN = "coarsen"
UPSAMPLE = "upsample"
MASK = "mask"
SMOOTH = "gaussian_smooth"
COMPOSE = "compose"

DIFFERENTIATE = "differentiate_through_score"
FROZEN = "frozen_denoiser"


def _as_tensor(v) -> tuple[Tensor, bool]:
    if isinstance(v, Tensor):
        return v, False
    return torch.as_tensor(np.asarray(v, dtype=float)), True


@dataclass(frozen=True, eq=False)
class MeasurementOp:
    """Linear measurement operator on the last axis.

    Build instances with the constructors (:meth:`identity`,
    :meth:`coarsen`, :meth:`upsample`, :meth:`mask`, :meth:`gaussian_smooth`,
    :meth:`compose`).  ``compose([a, b])`` applies ``a`` first.

    Coarsening averages consecutive blocks of ``factor`` cells; a trailing
    partial block is averaged over the cells it has.  Smoothing is a circular
    convolution with a normalised Gaussian of standard deviation ``width``
    cells.
    """

    kind: str
    in_dim: int
    params: tuple = ()
    ops: tuple["MeasurementOp", ...] = ()

    # -- constructors ------------------------------------------------------

    @classmethod
    def identity(cls, n: int) -> "MeasurementOp":
        return cls(IDENTITY, int(n))

    @classmethod
    def coarsen(cls, n: int, factor: int) -> "MeasurementOp":
        if factor < 1:
            raise InputError("coarsening factor must be >= 1")
        return cls(COARSEN, int(n), (("factor", int(factor)),))

    @classmethod
    def upsample(cls, n_out: int, factor: int) -> "MeasurementOp":
        """Nearest-neighbour replication from ``ceil(n_out / factor)`` cells."""
        if factor < 1:
            raise InputError("upsampling factor must be >= 1")
        return cls(UPSAMPLE, math.ceil(n_out / factor), (("factor", int(factor)), ("n_out", int(n_out))))

    @classmethod
    def mask(cls, n: int, gap: int | None = None, indices: Sequence[int] | None = None, offset: int = 0) -> "MeasurementOp":
        if (gap is None) == (indices is None):
            raise InputError("mask needs exactly one of gap or indices")
        if gap is not None:
            if gap < 1:
                raise InputError("sampling gap must be >= 1")
            idx = tuple(range(int(offset), int(n), int(gap)))
        else:
            idx = tuple(int(i) for i in indices)
            if len(set(idx)) != len(idx):
                raise InputError("mask indices must be unique")
        if any(i < 0 or i >= n for i in idx):
            raise InputError(f"mask index out of range for length {n}")
        return cls(MASK, int(n), (("indices", idx),))

    @classmethod
    def mask_from_file(cls, path: str | Path, n: int) -> "MeasurementOp":
        """Mask from a plain-text list, one zero-based index per line."""
        lines = Path(path).read_text().split()
        return cls.mask(n, indices=[int(s) for s in lines])

    @classmethod
    def gaussian_smooth(cls, n: int, width: float) -> "MeasurementOp":
        if width < 0:
            raise InputError("smoothing width must be >= 0")
        return cls(SMOOTH, int(n), (("width", float(width)),))

    @classmethod
    def compose(cls, ops: Sequence["MeasurementOp"]) -> "MeasurementOp":
        ops = tuple(ops)
        if not ops:
            raise InputError("compose needs at least one operator")
        for a, b in zip(ops, ops[1:]):
            if a.out_dim != b.in_dim:
                raise InputError(f"cannot compose {a.kind} (out {a.out_dim}) with {b.kind} (in {b.in_dim})")
        return cls(COMPOSE, ops[0].in_dim, (), ops)

    # -- structure -----------------------------------------------------------

    def param(self, name: str):
        return dict(self.params)[name]

    @cached_property
    def out_dim(self) -> int:
        if self.kind in (IDENTITY, SMOOTH):
            return self.in_dim
        if self.kind == COARSEN:
            return math.ceil(self.in_dim / self.param("factor"))
        if self.kind == UPSAMPLE:
            return self.param("n_out")
        if self.kind == MASK:
            return len(self.param("indices"))
        return self.ops[-1].out_dim

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "in_dim": self.in_dim}
        for k, v in self.params:
            d[k] = list(v) if isinstance(v, tuple) else v
        if self.ops:
            d["ops"] = [o.to_dict() for o in self.ops]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MeasurementOp":
        kind, n = d["kind"], d.get("in_dim")
        if kind == IDENTITY:
            return cls.identity(n)
        if kind == COARSEN:
            return cls.coarsen(n, d["factor"])
        if kind == UPSAMPLE:
            return cls.upsample(d["n_out"], d["factor"])
        if kind == MASK:
            if "indices" in d:
                return cls.mask(n, indices=d["indices"])
            return cls.mask(n, gap=d["gap"], offset=d.get("offset", 0))
        if kind == SMOOTH:
            return cls.gaussian_smooth(n, d["width"])
        if kind == COMPOSE:
            return cls.compose([cls.from_dict(o) for o in d["ops"]])
        raise InputError(f"unknown measurement operator kind {kind!r}")

    @cached_property
    def key(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def __eq__(self, other) -> bool:
        return isinstance(other, MeasurementOp) and self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    @cached_property
    def _blocks(self) -> Tensor:
        return torch.arange(self.in_dim if self.kind == COARSEN else self.param("n_out")) // self.param("factor")

    @cached_property
    def _block_counts(self) -> Tensor:
        return torch.bincount(self._blocks).to(torch.float64)

    @cached_property
    def _indices(self) -> Tensor:
        return torch.tensor(self.param("indices"), dtype=torch.long)

    @cached_property
    def _kernel_matrix(self) -> Tensor:
        n, w = self.in_dim, self.param("width")
        if w == 0:
            return torch.eye(n, dtype=torch.float64)
        offsets = np.arange(n)
        dist = np.minimum(offsets, n - offsets)  # circular distance
        row = np.exp(-0.5 * (dist / w) ** 2)
        row[dist > 4 * w] = 0.0
        row /= row.sum()
        mat = np.stack([np.roll(row, i) for i in range(n)])
        return torch.from_numpy(mat)

    # -- application ---------------------------------------------------------

    def _apply(self, v: Tensor) -> Tensor:
        if v.shape[-1] != self.in_dim:
            raise InputError(f"{self.kind} expects length {self.in_dim}, got {v.shape[-1]}")
        k = self.kind
        if k == IDENTITY:
            return v
        if k == COARSEN:
            out = v.new_zeros(*v.shape[:-1], self.out_dim).index_add(-1, self._blocks, v)
            return out / self._block_counts.to(v.dtype)
        if k == UPSAMPLE:
            return v[..., self._blocks]
        if k == MASK:
            return v[..., self._indices]
        if k == SMOOTH:
            return v @ self._kernel_matrix.to(v.dtype).T
        for op in self.ops:
            v = op._apply(v)
        return v

    def _adjoint(self, w: Tensor) -> Tensor:
        if w.shape[-1] != self.out_dim:
            raise InputError(f"{self.kind} adjoint expects length {self.out_dim}, got {w.shape[-1]}")
        k = self.kind
        if k == IDENTITY:
            return w
        if k == COARSEN:
            return (w / self._block_counts.to(w.dtype))[..., self._blocks]
        if k == UPSAMPLE:
            return w.new_zeros(*w.shape[:-1], self.in_dim).index_add(-1, self._blocks, w)
        if k == MASK:
            return w.new_zeros(*w.shape[:-1], self.in_dim).index_add(-1, self._indices, w)
        if k == SMOOTH:
            return w @ self._kernel_matrix.to(w.dtype)
        for op in reversed(self.ops):
            w = op._adjoint(w)
        return w

    def __call__(self, v):
        return apply_op(self, v)

    def matrix(self) -> np.ndarray:
        """Dense ``(out_dim, in_dim)`` representation."""
        eye = torch.eye(self.in_dim, dtype=torch.float64)
        return self._apply(eye).T.numpy().copy()

    def regrid(self, y) -> np.ndarray:
        """Place an observation back on the input grid.

        Masked-out cells become NaN, coarse cells are replicated and
        smoothing is left as is.  Used to lay observations out as channels
        on the state grid.
        """
        v, _ = _as_tensor(y)
        v = v.to(torch.float64)
        return self._regrid(v).numpy()

    def _regrid(self, v: Tensor) -> Tensor:
        k = self.kind
        if k in (IDENTITY, SMOOTH):
            return v
        if k == COARSEN:
            return v[..., self._blocks]
        if k == UPSAMPLE:
            out = v.new_zeros(*v.shape[:-1], self.in_dim).index_add(-1, self._blocks, v)
            return out / self._block_counts.to(v.dtype)
        if k == MASK:
            out = torch.full((*v.shape[:-1], self.in_dim), float("nan"), dtype=v.dtype)
            out[..., self._indices] = v
            return out
        for op in reversed(self.ops):
            v = op._regrid(v)
        return v


def apply_op(op: MeasurementOp, v):
    """Apply ``op`` to the last axis of ``v`` (numpy in, numpy out)."""
    t, was_np = _as_tensor(v)
    out = op._apply(t)
    return out.numpy() if was_np else out


def apply_op_transpose(op: MeasurementOp, w):
    """Apply the adjoint ``op^T`` to the last axis of ``w``."""
    t, was_np = _as_tensor(w)
    out = op._adjoint(t)
    return out.numpy() if was_np else out


def window_slice(k: int, window: int, n: int) -> MeasurementOp:
    """Selects step ``k`` of a flattened ``(window, n)`` trajectory."""
    return MeasurementOp.mask(window * n, indices=range(k * n, (k + 1) * n))


@dataclass
class ObservationModel:
    """One observed modality ``y ~ N(op(x), noise_variance I)``.

    ``y`` has shape ``(m,)`` or ``(batch, m)``; a batched ``y`` pairs row
    ``i`` with state row ``i``.
    """

    y: Any
    op: MeasurementOp
    noise_variance: float
    tag: str = "obs"

    def __post_init__(self):
        shape = np.shape(self.y)
        if not shape or shape[-1] != self.op.out_dim:
            raise InputError(
                f"[{self.tag}] observation length {shape[-1] if shape else None} != operator output {self.op.out_dim}"
            )
        if not (self.noise_variance >= 0):
            raise InputError(f"[{self.tag}] noise variance must be >= 0")

    def sort_key(self) -> tuple[str, str, float]:
        return (self.tag, self.op.key, float(self.noise_variance))

    def y_tensor(self, like: Tensor) -> Tensor:
        return torch.as_tensor(np.asarray(self.y) if not isinstance(self.y, Tensor) else self.y, dtype=like.dtype)


@dataclass
class GuidanceConfig:
    """Likelihood-guidance settings.

    ``gamma`` scales the stability term ``gamma sigma^2 / mu^2`` added to the
    observation variance.  ``mode`` selects how ``d x_hat / d x_t`` enters the
    gradient: the exact chain rule through the noise predictor, or the
    ``I / mu`` approximation that treats the denoiser as frozen.
    """

    gamma: float = 1e-2
    mode: str = DIFFERENTIATE

    def __post_init__(self):
        if not (self.gamma >= 0):
            raise ConfigError("gamma must be non-negative")
        if self.mode not in (DIFFERENTIATE, FROZEN):
            raise ConfigError(f"unknown likelihood mode {self.mode!r}")


def tweedie_denoise(x_t: Tensor, t, model: NoisePredictor, schedule: DiffusionSchedule) -> Tensor:
    """Tweedie estimate of the clean sample, ``(x_t + sigma^2 s) / mu``."""
    _check_time(t)
    mu = schedule.mu(float(t))
    if mu < MU_FLOOR:
        raise NumericGuardError(f"mu(t)={mu} below floor {MU_FLOOR}; use the likelihood path instead")
    sigma = schedule.sigma(float(t))
    s = score_from_noise(predict_noise(model, x_t, t), t, schedule)
    return (x_t + sigma * sigma * s) / mu


def _check_obs(x_t: Tensor, obs: ObservationModel) -> None:
    if obs.op.in_dim != x_t.shape[-1]:
        raise InputError(f"[{obs.tag}] operator expects state length {obs.op.in_dim}, got {x_t.shape[-1]}")
    ys = np.shape(obs.y)
    if len(ys) == 2 and x_t.dim() == 2 and ys[0] != x_t.shape[0]:
        raise InputError(f"[{obs.tag}] batched y has {ys[0]} rows for {x_t.shape[0]} states")


def _scaled_denominator(obs: ObservationModel, mu: float, sigma: float, gamma: float) -> float:
    v = obs.noise_variance + (gamma * sigma**2 / mu**2 if mu > 0 else math.inf)
    if not (v > 0):
        raise ConfigError(f"[{obs.tag}] total likelihood variance v(t)={v} must be positive")
    return mu * mu * obs.noise_variance + gamma * sigma * sigma


def _guided_terms(x_t, t, observations, model, schedule, cfg, check_finite):
    """Unconditional score and summed likelihood gradient in one pass."""
    mu = schedule.mu(float(t))
    sigma = schedule.sigma(float(t))
    obs_sorted = sorted(observations, key=ObservationModel.sort_key)
    for o in obs_sorted:
        _check_obs(x_t, o)
    dens = [_scaled_denominator(o, mu, sigma, cfg.gamma) for o in obs_sorted]

    if cfg.mode == DIFFERENTIATE and obs_sorted:
        with torch.enable_grad():
            x = x_t.detach().requires_grad_(True)
            s = score_from_noise(predict_noise(model, x, t), t, schedule)
            z = x + sigma * sigma * s  # mu * x_hat
            total = None
            for o, den in zip(obs_sorted, dens):
                r = mu * o.y_tensor(x) - o.op._apply(z)
                term = -0.5 * r.square().sum(-1) / den
                total = term if total is None else total + term
            (grad,) = torch.autograd.grad(total.sum(), x)
        s = s.detach()
    else:
        with torch.no_grad():
            s = score_from_noise(predict_noise(model, x_t, t), t, schedule)
            grad = torch.zeros_like(s)
            z = x_t + sigma * sigma * s
            for o, den in zip(obs_sorted, dens):
                r = mu * o.y_tensor(z) - o.op._apply(z)
                grad = grad + o.op._adjoint(r) / den
    if check_finite and not bool(torch.isfinite(grad).all()):
        tags = ",".join(o.tag for o in obs_sorted)
        raise NumericError(f"non-finite likelihood gradient at t={float(t):.6g} [{tags}]")
    return s, grad


def likelihood_variance(obs: ObservationModel, t, schedule: DiffusionSchedule, gamma: float) -> float:
    """Total variance ``v(t) = sigma_y^2 + gamma sigma(t)^2 / mu(t)^2`` (inf once mu underflows)."""
    _check_time(t)
    mu, sigma = schedule.mu(float(t)), schedule.sigma(float(t))
    return obs.noise_variance + (gamma * sigma**2 / mu**2 if mu > 0 else math.inf)


def likelihood_score(
    x_t: Tensor,
    t,
    obs: ObservationModel,
    model: NoisePredictor,
    schedule: DiffusionSchedule,
    cfg: GuidanceConfig | None = None,
    check_finite: bool = True,
    wrt: str = "x_t",
) -> Tensor:
    """``grad log N(y | A x_hat(x_t), sigma_y^2 + gamma sigma^2 / mu^2)``.

    With ``wrt="x_t"`` (default) the gradient is taken with respect to the
    noisy state as configured by ``cfg.mode``.  ``wrt="x_hat"`` returns the
    gradient with respect to the denoised estimate, ``A^T (y - A x_hat) / v``,
    i.e. the likelihood's own sensitivity without the denoiser Jacobian.
    """
    cfg = cfg or GuidanceConfig()
    _check_time(t)
    if wrt == "x_hat":
        frozen = GuidanceConfig(cfg.gamma, FROZEN)
        _, grad = _guided_terms(x_t, t, [obs], model, schedule, frozen, check_finite)
        return grad * schedule.mu(float(t))
    if wrt != "x_t":
        raise InputError(f"wrt must be 'x_t' or 'x_hat', got {wrt!r}")
    _, grad = _guided_terms(x_t, t, [obs], model, schedule, cfg, check_finite)
    return grad


def conditional_score(
    x_t: Tensor,
    t,
    observations: Sequence[ObservationModel],
    model: NoisePredictor,
    schedule: DiffusionSchedule,
    cfg: GuidanceConfig | None = None,
    check_finite: bool = True,
) -> Tensor:
    """Unconditional score plus the likelihood scores of all modalities.

    Modalities are conditionally independent given ``x_t``; their terms are
    summed in a canonical order so the result does not depend on the order of
    ``observations``.
    """
    cfg = cfg or GuidanceConfig()
    _check_time(t)
    s, grad = _guided_terms(x_t, t, list(observations), model, schedule, cfg, check_finite)
    return s + grad
