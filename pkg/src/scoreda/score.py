"""
Noise-prediction networks, denoising score matching and closed-form scores.

The networks predict the injected noise ``eps`` of the perturbation kernel;
the score is recovered as ``s = -eps / sigma(t)``.  Anything with the call
signature ``model(x_t, t) -> eps_hat`` can be used where a "model" is
expected, including the oracles' :meth:`GaussianOracle.noise_predictor`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .diffusion import SIGMA_FLOOR, DiffusionSchedule, NoiseSource, _check_time
from .errors import DescriptorMismatch, InputError, NumericGuardError, TrainingError
from .io import load_container, save_container

_DTYPES = {"float32": torch.float32, "float64": torch.float64}
_ACTIVATIONS = {"silu": nn.SiLU, "relu": nn.ReLU, "gelu": nn.GELU, "tanh": nn.Tanh}

NoisePredictor = Callable[[Tensor, Any], Tensor]


def _time_vector(t, batch: int, like: Tensor) -> Tensor:
    if isinstance(t, Tensor):
        t = t.to(like.dtype)
        return t.expand(batch) if t.dim() == 0 else t.reshape(batch)
    return torch.full((batch,), float(t), dtype=like.dtype)


class SinusoidalEmbedding(nn.Module):
    def __init__(self, width: int = 64, max_freq: float = 1000.0):
        super().__init__()
        if width % 2:
            raise InputError("embedding width must be even")
        freqs = torch.exp(torch.linspace(0.0, math.log(max_freq), width // 2, dtype=torch.float64))
        self.register_buffer("freqs", freqs, persistent=False)

    def forward(self, t: Tensor) -> Tensor:
        angles = t[:, None] * self.freqs.to(t.dtype)[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class _TimeNet(nn.Module):
    # sinusoidal features -> two linear layers (hidden, embedding)
    def __init__(self, embedding: int, hidden: int, act):
        super().__init__()
        self.features = SinusoidalEmbedding(embedding)
        self.net = nn.Sequential(nn.Linear(embedding, hidden), act(), nn.Linear(hidden, embedding))

    def forward(self, t: Tensor) -> Tensor:
        return self.net(self.features(t))


class _MLPBody(nn.Module):
    def __init__(self, dim, hidden, embedding, depth, act):
        super().__init__()
        layers: list[nn.Module] = [nn.Linear(dim + embedding, hidden), act()]
        for _ in range(depth - 1):
            layers += [nn.Linear(hidden, hidden), act()]
        self.net = nn.Sequential(*layers)
        self.head = nn.Linear(hidden, dim)

    def forward(self, x, emb):
        return self.head(self.net(torch.cat([x, emb], dim=-1)))


class _ConvBlock(nn.Module):
    def __init__(self, channels, embedding, kernel, act):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv1d(channels, channels, kernel, padding=pad, padding_mode="circular")
        self.conv2 = nn.Conv1d(channels, channels, kernel, padding=pad, padding_mode="circular")
        self.temb = nn.Linear(embedding, channels)
        self.act = act()

    def forward(self, h, emb):
        r = self.conv1(self.act(h)) + self.temb(emb)[:, :, None]
        return h + self.conv2(self.act(r))


class _ConvBody(nn.Module):
    """Residual 1-D convolutions with circular padding over a periodic axis."""

    def __init__(self, shape, hidden, embedding, depth, kernel, act):
        super().__init__()
        self.shape = tuple(shape)
        c_in = self.shape[0]
        pad = kernel // 2
        self.inp = nn.Conv1d(c_in, hidden, kernel, padding=pad, padding_mode="circular")
        self.blocks = nn.ModuleList(_ConvBlock(hidden, embedding, kernel, act) for _ in range(depth))
        self.act = act()
        self.head = nn.Conv1d(hidden, c_in, kernel, padding=pad, padding_mode="circular")

    def forward(self, x, emb):
        b = x.shape[0]
        h = self.inp(x.reshape(b, *self.shape))
        for blk in self.blocks:
            h = blk(h, emb)
        return self.head(self.act(h)).reshape(b, -1)


class ScoreModel(nn.Module):
    """Time-conditioned noise predictor ``eps_phi(x(t), t)``.

    Parameters
    ----------
    dim : int
        Length of the (flattened) state vector.
    arch : {"mlp", "conv"}
        Dense network, or residual 1-D convolution with circular padding.
        The convolutional variant reads the state as ``shape = (channels,
        length)``, e.g. ``(K, N_x)`` for a window of ``K`` periodic states.
    hidden, embedding, depth : int
        Hidden width (channels for ``conv``), time-embedding width and number
        of hidden layers (residual blocks for ``conv``).
    shift, scale : float
        Affine standardisation of the training data, stored with the model so
        that callers can map physical values into model space.
    skip : bool
        Add a learned time-dependent multiple of the input, ``g(t) x``, to the
        network output.  Near ``t = 1`` the optimal noise predictor is close
        to a multiple of ``x``, which a plain MLP learns only approximately.
    zero_head : bool
        Zero-initialise the output layer (and the skip gate), making the fresh
        model the zero map.
    """

    def __init__(
        self,
        dim: int,
        arch: str = "mlp",
        hidden: int = 256,
        embedding: int = 64,
        depth: int = 3,
        activation: str = "silu",
        shape: Sequence[int] | None = None,
        kernel: int = 5,
        dtype: str = "float64",
        seed: int = 0,
        skip: bool = True,
        zero_head: bool = False,
        shift: float = 0.0,
        scale: float = 1.0,
    ):
        super().__init__()
        if arch not in ("mlp", "conv"):
            raise InputError(f"unknown architecture {arch!r}")
        if arch == "conv":
            if shape is None or int(np.prod(shape)) != dim:
                raise InputError("conv architecture needs shape with prod(shape) == dim")
        self.dim = int(dim)
        self.arch = arch
        self.hidden = int(hidden)
        self.embedding = int(embedding)
        self.depth = int(depth)
        self.activation = activation
        self.shape = None if shape is None else [int(s) for s in shape]
        self.kernel = int(kernel)
        self.dtype_name = dtype
        self.seed = int(seed)
        self.skip = bool(skip)
        self.shift = float(shift)
        self.scale = float(scale)
        act = _ACTIVATIONS[activation]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.time_net = _TimeNet(self.embedding, self.hidden, act)
            if arch == "mlp":
                self.body = _MLPBody(self.dim, self.hidden, self.embedding, self.depth, act)
            else:
                self.body = _ConvBody(self.shape, self.hidden, self.embedding, self.depth, self.kernel, act)
            self.gate = nn.Linear(self.embedding, 1) if self.skip else None
        if self.gate is not None:
            nn.init.zeros_(self.gate.weight)
            nn.init.zeros_(self.gate.bias)
        if zero_head:
            nn.init.zeros_(self.body.head.weight)
            nn.init.zeros_(self.body.head.bias)
        self.to(_DTYPES[dtype])

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype_name]

    def descriptor(self) -> dict[str, Any]:
        return {
            "dim": self.dim,
            "arch": self.arch,
            "hidden": self.hidden,
            "embedding": self.embedding,
            "depth": self.depth,
            "activation": self.activation,
            "shape": self.shape,
            "kernel": self.kernel,
            "skip": self.skip,
            "dtype": self.dtype_name,
        }

    def forward(self, x: Tensor, t) -> Tensor:
        squeeze = x.dim() == 1
        if squeeze:
            x = x[None]
        x = x.to(self.torch_dtype)
        tv = _time_vector(t, x.shape[0], x)
        emb = self.time_net(tv)
        out = self.body(x, emb)
        if self.gate is not None:
            out = out + self.gate(emb) * x
        return out[0] if squeeze else out

    def flat_parameters(self) -> Tensor:
        return nn.utils.parameters_to_vector(self.parameters()).detach().clone()


def predict_noise(model: NoisePredictor, x_t: Tensor, t) -> Tensor:
    """Evaluate ``eps_hat = model(x_t, t)`` with dimension and time checks."""
    dim = getattr(model, "dim", None)
    if dim is not None and x_t.shape[-1] != dim:
        raise InputError(f"state has length {x_t.shape[-1]}, model expects {dim}")
    _check_time(t)
    out = model(x_t, t)
    if out.shape != x_t.shape:
        raise InputError(f"model output shape {tuple(out.shape)} != input {tuple(x_t.shape)}")
    return out


def _sigma_column(schedule: DiffusionSchedule, t, like: Tensor):
    if isinstance(t, Tensor) and t.dim() > 0:
        return schedule.sigma(t.to(like.dtype)).reshape(-1, *([1] * (like.dim() - 1)))
    return schedule.sigma(float(t))


def score_from_noise(eps: Tensor, t, schedule: DiffusionSchedule) -> Tensor:
    """Convert a noise prediction to a score, ``s = -eps / sigma(t)``."""
    sigma = _sigma_column(schedule, t, eps)
    smin = float(sigma.min()) if isinstance(sigma, Tensor) else sigma
    if smin < SIGMA_FLOOR:
        raise NumericGuardError(f"sigma(t)={smin} below floor {SIGMA_FLOOR}")
    return -eps / sigma


def model_score(model: NoisePredictor, x_t: Tensor, t, schedule: DiffusionSchedule) -> Tensor:
    return score_from_noise(predict_noise(model, x_t, t), t, schedule)


# ---------------------------------------------------------------------------
# closed-form oracles


def _coeffs(schedule, t, x):
    if isinstance(t, Tensor) and t.dim() > 0:
        tt = t.to(x.dtype)
        return schedule.mu(tt)[:, None], schedule.sigma(tt)[:, None]
    return schedule.mu(float(t)), schedule.sigma(float(t))


class GaussianOracle:
    """Data distribution ``N(mean, cov)`` with exact perturbed scores.

    Under the kernel, ``x(t) ~ N(mu m, mu^2 C + sigma^2 I)``; the covariance is
    diagonalised once so the score costs one rotation per call.
    """

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(mean.size)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        if cov.shape != (mean.size, mean.size):
            raise InputError("covariance shape does not match mean")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise InputError("covariance must be symmetric")
        evals, evecs = np.linalg.eigh(cov)
        if evals.min() <= 1e-12 * max(1.0, evals.max()):
            raise InputError("covariance must be positive definite")
        self.mean = mean
        self.cov = cov
        self._evals = torch.from_numpy(evals)
        self._evecs = torch.from_numpy(evecs)
        self._mean = torch.from_numpy(mean)

    @property
    def dim(self) -> int:
        return self.mean.size

    def perturbed(self, schedule: DiffusionSchedule, t: float) -> tuple[np.ndarray, np.ndarray]:
        mu, sigma = schedule.mu(float(t)), schedule.sigma(float(t))
        return mu * self.mean, mu**2 * self.cov + sigma**2 * np.eye(self.dim)

    def score(self, schedule: DiffusionSchedule, x_t: Tensor, t) -> Tensor:
        mu, sigma = _coeffs(schedule, t, x_t)
        u = self._evecs.to(x_t.dtype)
        lam = self._evals.to(x_t.dtype)
        r = (x_t - mu * self._mean.to(x_t.dtype)) @ u
        return -(r / (mu * mu * lam + sigma * sigma)) @ u.T

    def posterior_mean(self, schedule: DiffusionSchedule, x_t: Tensor, t) -> Tensor:
        """``E[x | x(t)]`` by Gaussian conditioning (independent of the score)."""
        mu, sigma = _coeffs(schedule, t, x_t)
        u = self._evecs.to(x_t.dtype)
        lam = self._evals.to(x_t.dtype)
        m = self._mean.to(x_t.dtype)
        r = (x_t - mu * m) @ u
        gain = mu * lam / (mu * mu * lam + sigma * sigma)
        return m + (gain * r) @ u.T

    def noise_predictor(self, schedule: DiffusionSchedule) -> "OracleNoise":
        return OracleNoise(self, schedule)


class GaussianMixtureOracle:
    """Finite Gaussian mixture with exact perturbed scores."""

    def __init__(self, weights, means, covs):
        self.weights = np.asarray(weights, dtype=float)
        self.weights = self.weights / self.weights.sum()
        self.components = [GaussianOracle(m, c) for m, c in zip(means, covs)]

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(len(self.components), size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for j, comp in enumerate(self.components):
            idx = np.flatnonzero(k == j)
            out[idx] = rng.multivariate_normal(comp.mean, comp.cov, size=idx.size)
        return out

    def log_component_densities(self, schedule, x_t: Tensor, t) -> Tensor:
        mu, sigma = _coeffs(schedule, t, x_t)
        logs = []
        for w, comp in zip(self.weights, self.components):
            u = comp._evecs.to(x_t.dtype)
            lam = mu * mu * comp._evals.to(x_t.dtype) + sigma * sigma
            r = (x_t - mu * comp._mean.to(x_t.dtype)) @ u
            lam = lam.expand_as(r) if isinstance(lam, Tensor) else lam
            logs.append(math.log(w) - 0.5 * (r * r / lam + torch.log(torch.as_tensor(lam, dtype=x_t.dtype))).sum(-1))
        return torch.stack(logs, dim=-1)

    def score(self, schedule: DiffusionSchedule, x_t: Tensor, t) -> Tensor:
        resp = torch.softmax(self.log_component_densities(schedule, x_t, t), dim=-1)
        scores = torch.stack([c.score(schedule, x_t, t) for c in self.components], dim=-1)
        return (scores * resp[..., None, :]).sum(-1)

    def noise_predictor(self, schedule: DiffusionSchedule) -> "OracleNoise":
        return OracleNoise(self, schedule)


class OracleNoise:
    """Exact noise predictor ``eps*(x_t, t) = -sigma(t) * score``."""

    def __init__(self, oracle, schedule: DiffusionSchedule):
        self.oracle = oracle
        self.schedule = schedule
        self.dim = oracle.dim

    def __call__(self, x_t: Tensor, t) -> Tensor:
        _, sigma = _coeffs(self.schedule, t, x_t)
        return -sigma * self.oracle.score(self.schedule, x_t, t)


def analytic_score(oracle: GaussianOracle, schedule: DiffusionSchedule, x_t: Tensor, t) -> Tensor:
    """Exact gradient of the perturbed Gaussian log density at ``x_t``."""
    _check_time(t)
    return oracle.score(schedule, x_t, t)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    """Optimiser settings; AdamW with linear learning-rate decay to zero."""

    epochs: int = 64
    batch_size: int = 64
    lr: float = 2e-4
    weight_decay: float = 1e-3
    lr_schedule: str = "linear"
    seed: int = 0
    t_floor: float = 1e-3
    validation_size: int = 512
    smoothing_window: int = 5

    def __post_init__(self):
        if self.lr <= 0:
            raise InputError("learning rate must be positive")
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.lr_schedule not in ("linear", "constant"):
            raise InputError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    smoothed_val_loss: list[float] = field(default_factory=list)
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def monotone(self) -> bool:
        return not self.diagnostics.get("nonmonotone_validation", False)


def dsm_loss(
    model: NoisePredictor,
    x: Tensor,
    schedule: DiffusionSchedule,
    noise: NoiseSource | None = None,
    t_floor: float = 1e-3,
    t: Tensor | None = None,
    eps: Tensor | None = None,
) -> Tensor:
    """Denoising score-matching loss ``mean_b || eps_phi(mu x + sigma eps, t) - eps ||^2``.

    ``t ~ U[t_floor, 1]`` and ``eps ~ N(0, I)`` are drawn from ``noise``
    unless passed explicitly.
    """
    if x.dim() != 2 or x.shape[0] == 0:
        raise InputError("dsm_loss needs a non-empty (batch, dim) tensor")
    b = x.shape[0]
    if t is None:
        if noise is None:
            raise InputError("dsm_loss needs a NoiseSource when t is not given")
        t = torch.from_numpy(noise.uniform(t_floor, 1.0, b)).to(x.dtype)
    if eps is None:
        if noise is None:
            raise InputError("dsm_loss needs a NoiseSource when eps is not given")
        eps = noise.normal_like(x)
    mu = schedule.mu(t)[:, None]
    sigma = schedule.sigma(t)[:, None]
    x_t = mu * x + sigma * eps
    pred = model(x_t, t)
    return (pred - eps).square().sum(-1).mean()


def _moving_average(values: Sequence[float], window: int) -> list[float]:
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(values[lo : i + 1])))
    return out


def train(
    model: ScoreModel,
    dataset,
    config: TrainConfig,
    schedule: DiffusionSchedule,
    validation=None,
    log: Callable[[str], None] | None = None,
) -> tuple[ScoreModel, TrainHistory]:
    """Fit ``model`` by denoising score matching.

    Parameters
    ----------
    dataset : array-like, shape (n, dim)
        Clean samples, already in model space (standardised).
    validation : array-like, optional
        Clean samples for the fixed validation batch.  Defaults to a seeded
        subset of ``dataset``.

    Returns
    -------
    model, history
        ``history.diagnostics["nonmonotone_validation"]`` flags a smoothed
        validation curve that is not non-increasing.

    Raises
    ------
    TrainingError
        If a batch loss is non-finite or exceeds ``1e6``.
    """
    dtype = model.torch_dtype
    data = torch.as_tensor(np.asarray(dataset), dtype=dtype)
    if data.dim() != 2 or data.shape[0] == 0:
        raise InputError("dataset must be a non-empty (n, dim) array")
    if data.shape[1] != model.dim:
        raise InputError(f"dataset dim {data.shape[1]} != model dim {model.dim}")
    n = data.shape[0]

    base = NoiseSource(config.seed, stream=7)
    order_rng = base.spawn(1)
    batch_noise = base.spawn(2)
    val_noise = base.spawn(3)
    if validation is None:
        idx = order_rng.rng.choice(n, size=min(config.validation_size, n), replace=False)
        val_x = data[np.sort(idx)]
    else:
        val_x = torch.as_tensor(np.asarray(validation), dtype=dtype)
    val_t = torch.from_numpy(val_noise.uniform(config.t_floor, 1.0, val_x.shape[0])).to(dtype)
    val_eps = val_noise.normal_like(val_x)

    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    if config.lr_schedule == "linear":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: max(0.0, 1.0 - k / total))
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: 1.0)

    history = TrainHistory()
    for epoch in range(config.epochs):
        model.train()
        perm = torch.from_numpy(order_rng.rng.permutation(n))
        running = 0.0
        for k in range(steps_per_epoch):
            xb = data[perm[k * config.batch_size : (k + 1) * config.batch_size]]
            loss = dsm_loss(model, xb, schedule, batch_noise, t_floor=config.t_floor)
            value = loss.item()
            if not math.isfinite(value) or value > 1e6:
                raise TrainingError(f"training loss diverged ({value})", epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            running += value * xb.shape[0]
        model.eval()
        with torch.no_grad():
            val = float(dsm_loss(model, val_x, schedule, t=val_t, eps=val_eps))
        history.train_loss.append(running / n)
        history.val_loss.append(val)
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs} train {running / n:.5f} val {val:.5f}")

    history.smoothed_val_loss = _moving_average(history.val_loss, config.smoothing_window)
    sm = history.smoothed_val_loss
    if any(b > a * (1 + 1e-9) for a, b in zip(sm, sm[1:])):
        history.diagnostics["nonmonotone_validation"] = True
    return model, history


# ---------------------------------------------------------------------------
# persistence


def save_model(path: str | Path, model: ScoreModel, schedule: DiffusionSchedule, meta: dict | None = None) -> Path:
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    info = {
        "kind": "score_model",
        "descriptor": model.descriptor(),
        "schedule": schedule.to_dict(),
        "schedule_id": schedule.identifier,
        "normalization": {"shift": model.shift, "scale": model.scale},
        "seed": model.seed,
    }
    if meta:
        info["meta"] = meta
    return save_container(path, arrays, info)


def load_model(
    path: str | Path,
    descriptor: dict[str, Any] | None = None,
    schedule: DiffusionSchedule | None = None,
) -> tuple[ScoreModel, DiffusionSchedule, dict]:
    """Load a persisted model, refusing descriptor or schedule mismatches."""
    arrays, info = load_container(path)
    if info.get("kind") != "score_model":
        raise DescriptorMismatch(f"{path} is not a score model container")
    stored = info["descriptor"]
    if descriptor is not None:
        diff = {k for k in set(stored) | set(descriptor) if stored.get(k) != descriptor.get(k)}
        if diff:
            raise DescriptorMismatch(f"architecture mismatch in fields {sorted(diff)}")
    stored_schedule = DiffusionSchedule.from_dict(info["schedule"])
    if schedule is not None and schedule.identifier != stored_schedule.identifier:
        raise DescriptorMismatch(
            f"schedule mismatch: stored {stored_schedule.identifier}, expected {schedule.identifier}"
        )
    norm = info.get("normalization", {})
    model = ScoreModel(
        **stored, seed=info.get("seed", 0), shift=norm.get("shift", 0.0), scale=norm.get("scale", 1.0)
    )
    state = {k[len("param/") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    model.eval()
    return model, stored_schedule, info.get("meta", {})
