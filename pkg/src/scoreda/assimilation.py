"""
Trajectory-level assimilation with windowed (Markov-blanket) diffusion priors.

A trajectory of ``T`` states is cut into windows of ``K`` consecutive steps.
Each window is sampled from the guided reverse process of a prior trained on
flattened ``K``-step windows, then overlapping cells are averaged.

Pixel mode conditions the state-space prior on the background (identity
operator, or a mask where the background is undefined) and, when
multimodal, on every observation lifted to the window.  Latent mode encodes
background and observations step by step with the codec, conditions the
latent prior on the encoded stack through an identity operator, and decodes
the sampled latents.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch

from .diffusion import DiffusionSchedule, NoiseSource, RowNoise
from .errors import ConfigError, InputError, ScoreDAError
from .guidance import GuidanceConfig, MeasurementOp, ObservationModel, apply_op, window_slice
from .latent import decode, encode
from .sampler import SamplerConfig, sample

ROLES = ("truth", "background", "analysis")
PIXEL, LATENT = "pixel", "latent"
UNIMODAL, MULTIMODAL = "unimodal", "multimodal"


@dataclass
class Trajectory:
    """``T x N_x`` state sequence.

    Backgrounds may contain NaN where no prior estimate exists (for example
    a sparse, regridded product); truths and analyses must be finite.
    """

    values: np.ndarray
    dt: float = 1.0
    role: str = "truth"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise InputError("trajectory values must be a (T, N_x) array with T >= 1")
        if self.role not in ROLES:
            raise InputError(f"unknown trajectory role {self.role!r}")
        if self.role != "background" and not np.isfinite(v).all():
            raise InputError(f"{self.role} trajectory contains non-finite values")
        self.values = v

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]


@dataclass
class WindowConfig:
    """Blanket size ``K`` and window stride (defaults to ``K``)."""

    K: int = 5
    stride: int | None = None

    def __post_init__(self):
        if self.stride is None:
            self.stride = self.K
        if self.K < 1 or not (1 <= self.stride <= self.K):
            raise ConfigError("window config needs 1 <= stride <= K", [f"K={self.K}", f"stride={self.stride}"])


def build_windows(T: int, cfg: WindowConfig) -> list[np.ndarray]:
    """Zero-based index windows of length ``K`` covering ``0..T-1``.

    Windows start every ``stride`` steps; a final window aligned to the end
    is appended when the stride does not land on it.
    """
    if cfg.K > T:
        raise ConfigError(f"blanket size K={cfg.K} exceeds trajectory length T={T}")
    starts = list(range(0, T - cfg.K + 1, cfg.stride))
    if starts[-1] != T - cfg.K:
        starts.append(T - cfg.K)
    return [np.arange(s, s + cfg.K) for s in starts]


def window_coverage(T: int, windows: Sequence[np.ndarray]) -> np.ndarray:
    """Number of windows covering each step (stitching weights are ``1/count``)."""
    counts = np.zeros(T, dtype=int)
    for w in windows:
        counts[w] += 1
    return counts


@dataclass
class AssimilationProblem:
    """Everything needed to assimilate one trajectory.

    Attributes
    ----------
    observations : list of list of ObservationModel
        One (possibly empty) list per time step; operators act on a single
        state of length ``N_x``.
    background_variance : float
        Error variance assigned to the background term.
    latent_variance : float
        Observation variance of the encoded stack in latent mode.
    """

    background: Trajectory
    observations: list[list[ObservationModel]] = field(default_factory=list)
    mode: str = PIXEL
    modalities: str = UNIMODAL
    ensemble_size: int = 8
    background_variance: float = 1.0
    latent_variance: float = 1.0
    window: WindowConfig = field(default_factory=WindowConfig)
    use_background: bool = True

    def __post_init__(self):
        issues = []
        if self.mode not in (PIXEL, LATENT):
            issues.append(f"mode: unknown value {self.mode!r}")
        if self.modalities not in (UNIMODAL, MULTIMODAL):
            issues.append(f"modalities: unknown value {self.modalities!r}")
        if self.ensemble_size < 1:
            issues.append("ensemble_size: must be >= 1")
        if not self.observations:
            self.observations = [[] for _ in range(self.background.T)]
        if len(self.observations) != self.background.T:
            issues.append(f"observations: {len(self.observations)} steps for a trajectory of length {self.background.T}")
        if issues:
            raise ConfigError("invalid assimilation problem", issues)

    def step_observations(self, t: int) -> list[ObservationModel]:
        return list(self.observations[t]) if self.modalities == MULTIMODAL else []


@dataclass
class AnalysisEnsemble:
    """Analysis members ``(M, T, N_x)``.

    ``failures`` lists ``{"member", "window", "step"}`` records for members
    whose sampling produced non-finite states; those members are NaN.
    """

    members: np.ndarray
    dt: float = 1.0
    failures: list[dict[str, int]] = field(default_factory=list)

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=float)
        if self.members.ndim != 3 or self.members.shape[0] < 1:
            raise InputError("ensemble members must be a non-empty (M, T, N_x) array")

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.members).all(axis=(1, 2))

    @property
    def mean(self) -> np.ndarray:
        return summarize(self).mean

    @property
    def spread(self) -> np.ndarray:
        return summarize(self).std

    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(m, self.dt, "analysis") for m in self.members[self.valid]]


@dataclass
class Summary:
    mean: np.ndarray
    std: np.ndarray
    quantiles: dict[float, np.ndarray]
    n_members: int


def summarize(ensemble, levels: Sequence[float] = (0.05, 0.25, 0.5, 0.75, 0.95)) -> Summary:
    """Per-cell mean, sample standard deviation and quantiles.

    Accepts an :class:`AnalysisEnsemble`, a list of trajectories or an
    ``(M, ...)`` array.  Members with non-finite values are excluded.  A
    single member has zero spread.
    """
    if isinstance(ensemble, AnalysisEnsemble):
        arr = ensemble.members
    elif isinstance(ensemble, (list, tuple)) and ensemble and isinstance(ensemble[0], Trajectory):
        arr = np.stack([t.values for t in ensemble])
    else:
        arr = np.asarray(ensemble, dtype=float)
    if arr.ndim < 1 or arr.shape[0] == 0:
        raise InputError("cannot summarise an empty ensemble")
    ok = np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
    arr = arr[ok]
    if arr.shape[0] == 0:
        raise InputError("no finite ensemble members to summarise")
    mean = arr.mean(axis=0)
    std = arr.std(axis=0, ddof=1) if arr.shape[0] > 1 else np.zeros_like(mean)
    qs = {float(q): np.quantile(arr, q, axis=0) for q in sorted(levels)}
    return Summary(mean=mean, std=std, quantiles=qs, n_members=int(arr.shape[0]))


# ---------------------------------------------------------------------------
# conditioning in model space


def _ones_response(op: MeasurementOp) -> np.ndarray:
    return apply_op(op, np.ones(op.in_dim))


def _normalise(obs: ObservationModel, shift: float, scale: float) -> ObservationModel:
    y = (np.asarray(obs.y, dtype=float) - shift * _ones_response(obs.op)) / scale
    return ObservationModel(y, obs.op, obs.noise_variance / scale**2, obs.tag)


def _background_obs(values: np.ndarray, variance: float) -> ObservationModel | None:
    finite = np.isfinite(values)
    if not finite.any():
        return None
    n = values.size
    op = MeasurementOp.identity(n) if finite.all() else MeasurementOp.mask(n, indices=np.flatnonzero(finite))
    return ObservationModel(values[finite], op, variance, "background")


def _pixel_window_obs(problem: AssimilationProblem, steps: np.ndarray, shift: float, scale: float) -> list[ObservationModel]:
    K, n = len(steps), problem.background.n
    out = []
    for k, t in enumerate(steps):
        sl = window_slice(k, K, n)
        step_obs = []
        if problem.use_background:
            b = _background_obs(problem.background.values[t], problem.background_variance)
            if b is not None:
                step_obs.append(b)
        step_obs += problem.step_observations(int(t))
        for o in step_obs:
            if o.op.in_dim != n:
                raise InputError(f"[{o.tag}] operator input {o.op.in_dim} != state length {n} at step {t}")
            lifted = ObservationModel(o.y, MeasurementOp.compose([sl, o.op]), o.noise_variance, f"{o.tag}@{k}")
            out.append(_normalise(lifted, shift, scale))
    return out


def _codec_channels(codec, obs: Sequence[ObservationModel], n: int) -> dict[str, np.ndarray]:
    lengths = dict(codec.layout)
    chans: dict[str, np.ndarray] = {}
    for o in obs:
        if o.tag not in lengths:
            raise InputError(f"modality {o.tag!r} is not in the codec layout {list(lengths)}")
        m = lengths[o.tag]
        if m == o.op.out_dim:
            chans[o.tag] = np.asarray(o.y, dtype=float)
        elif m == o.op.in_dim == n:
            chans[o.tag] = o.op.regrid(o.y)
        else:
            raise InputError(f"modality {o.tag!r} length {o.op.out_dim} does not fit codec channel of length {m}")
    return chans


def encode_steps(problem: AssimilationProblem, codec) -> np.ndarray:
    """Per-step latent codes ``(T, L)`` of background plus selected observations."""
    bg = problem.background.values
    n = problem.background.n
    z = []
    for t in range(problem.background.T):
        state = bg[t] if problem.use_background else np.full(n, np.nan)
        z.append(encode(codec, state, _codec_channels(codec, problem.step_observations(t), n)))
    return np.stack(z)


def _latent_window_obs(z: np.ndarray, steps: np.ndarray, variance: float, shift: float, scale: float) -> list[ObservationModel]:
    y = z[steps].reshape(-1)
    o = ObservationModel(y, MeasurementOp.identity(y.size), variance, "latent")
    return [_normalise(o, shift, scale)]


# ---------------------------------------------------------------------------
# driver


def _structure_key(obs: Sequence[ObservationModel]) -> tuple:
    return tuple(sorted(o.sort_key() for o in obs))


def assimilate(
    problem: AssimilationProblem,
    model,
    schedule: DiffusionSchedule,
    sampler_cfg: SamplerConfig | None = None,
    guidance: GuidanceConfig | None = None,
    codec=None,
    max_batch: int = 512,
) -> AnalysisEnsemble:
    """Sample an analysis ensemble for ``problem``.

    Parameters
    ----------
    model : ScoreModel or noise predictor
        Prior over flattened windows (``K * N_x`` in pixel mode, ``K * L`` in
        latent mode).  ``model.shift`` and ``model.scale`` map physical values
        into model space.
    codec : LinearCodec or NeuralCodec, optional
        Required in latent mode.

    Notes
    -----
    The noise of member ``m`` in window ``w`` comes from the stream
    ``(m, w)`` of ``sampler_cfg.seed``, so results do not depend on how rows
    are batched or in which order windows are processed.
    """
    sampler_cfg = sampler_cfg or SamplerConfig()
    guidance = guidance or GuidanceConfig()
    bg = problem.background
    T, n, K = bg.T, bg.n, problem.window.K
    M = problem.ensemble_size
    windows = build_windows(T, problem.window)
    shift = float(getattr(model, "shift", 0.0))
    scale = float(getattr(model, "scale", 1.0))

    if problem.mode == LATENT:
        if codec is None:
            raise ConfigError("latent mode requires a codec")
        z = encode_steps(problem, codec)
        width = codec.latent_dim
        win_obs = [_latent_window_obs(z, w, problem.latent_variance, shift, scale) for w in windows]
    else:
        width = n
        win_obs = [_pixel_window_obs(problem, w, shift, scale) for w in windows]
    dim = K * width
    model_dim = getattr(model, "dim", dim)
    if model_dim != dim:
        raise InputError(f"prior expects windows of length {model_dim}, problem needs {dim}")

    groups: dict[tuple, list[int]] = {}
    for wi, obs in enumerate(win_obs):
        groups.setdefault(_structure_key(obs), []).append(wi)

    samples = np.full((len(windows), M, dim), np.nan)
    failures: list[dict[str, int]] = []
    for key in sorted(groups, key=lambda k: groups[k][0]):
        widx = groups[key]
        rows = [(wi, m) for wi in widx for m in range(M)]
        for lo in range(0, len(rows), max_batch):
            chunk = rows[lo : lo + max_batch]
            chunk_w = sorted({wi for wi, _ in chunk})
            # rows of a chunk are (window, member) pairs, windows contiguous
            per_w = {wi: [m for w2, m in chunk if w2 == wi] for wi in chunk_w}
            stacked = _stack_rows([win_obs[wi] for wi in chunk_w], [len(per_w[wi]) for wi in chunk_w])
            sources = [NoiseSource(sampler_cfg.seed, (m, wi)) for wi, m in chunk]
            try:
                res = sample(
                    model, schedule, sampler_cfg, observations=stacked or None, guidance=guidance,
                    n_samples=len(chunk), dim=dim, noise=RowNoise(sources, dim),
                )
            except ScoreDAError as exc:
                raise _tagged(exc, f"window {chunk_w[0]}") from exc
            out = res.samples.detach().double().numpy()
            for r, (wi, m) in enumerate(chunk):
                samples[wi, m] = out[r]
                if res.nonfinite_step[r] >= 0:
                    failures.append({"member": m, "window": wi, "step": int(res.nonfinite_step[r])})

    phys = samples * scale + shift
    if problem.mode == LATENT:
        lat = phys.reshape(len(windows), M, K, width)
        states = decode(codec, lat.reshape(-1, width)).reshape(len(windows), M, K, n)
    else:
        states = phys.reshape(len(windows), M, K, n)

    total = np.zeros((M, T, n))
    counts = window_coverage(T, windows)
    for wi, w in enumerate(windows):
        total[:, w, :] += states[wi]
    members = total / counts[None, :, None]
    failures.sort(key=lambda f: (f["member"], f["window"]))
    return AnalysisEnsemble(members, dt=bg.dt, failures=failures)


def _stack_rows(obs_lists: list[list[ObservationModel]], reps: list[int]) -> list[ObservationModel]:
    if not obs_lists[0]:
        return []
    ordered = [sorted(lst, key=ObservationModel.sort_key) for lst in obs_lists]
    out = []
    for j, o in enumerate(ordered[0]):
        ys = np.concatenate([np.repeat(np.asarray(lst[j].y, dtype=float)[None], r, axis=0) for lst, r in zip(ordered, reps)])
        out.append(ObservationModel(ys, o.op, o.noise_variance, o.tag))
    return out


def _tagged(exc: Exception, where: str) -> Exception:
    try:
        new = type(exc)(f"[{where}] {exc}")
    except TypeError:
        new = ScoreDAError(f"[{where}] {exc}")
    return new
