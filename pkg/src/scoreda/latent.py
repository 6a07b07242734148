"""
Unified latent codec over concatenated state and observation channels.

The encoder input is assembled from an ordered channel layout
``[(name, length), ...]``; the first entry is the state (background).  Each
channel contributes its values followed by a per-cell presence flag.  Missing
cells (NaN) and missing modalities are filled with the channel's training mean
and flagged absent, so the fill rule is deterministic.

Two codecs share the interface:

* :class:`LinearCodec` -- affine encoder and decoder; :func:`fit_linear_codec`
  gives the principal-subspace solution.
* :class:`NeuralCodec` -- dense encoder and decoder of ``layers`` linear maps
  each, fit by :func:`train_codec`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .diffusion import NoiseSource
from .errors import DescriptorMismatch, InputError, TrainingError
from .io import load_container, save_container

Layout = list[tuple[str, int]]


def _norm_layout(layout) -> Layout:
    out = [(str(n), int(m)) for n, m in layout]
    if not out:
        raise InputError("channel layout needs at least the state channel")
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise InputError("channel names must be unique")
    return out


class _CodecBase:
    layout: Layout
    latent_dim: int
    fill: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.layout[0][1]

    @property
    def input_dim(self) -> int:
        return 2 * sum(m for _, m in self.layout)

    def layout_descriptor(self) -> list[list]:
        return [[n, m] for n, m in self.layout]

    def assemble(self, state, observations=None) -> np.ndarray:
        """Encoder input (values and presence flags) as a float array.

        ``observations`` is either a mapping from channel name to values, or
        a sequence of ``(name, values)`` pairs in layout order.  Absent
        channels and NaN cells are filled.  Shapes ``(len,)`` or
        ``(batch, len)``.
        """
        chans: dict[str, Any] = {self.layout[0][0]: state}
        if observations is None:
            pass
        elif isinstance(observations, Mapping):
            chans.update(observations)
        else:
            pairs = list(observations)
            names = [n for n, _ in pairs]
            expected = [n for n, _ in self.layout[1:] if n in names]
            if names != expected:
                raise InputError(f"modality order {names} does not match layout {[n for n, _ in self.layout[1:]]}")
            chans.update(dict(pairs))
        unknown = set(chans) - {n for n, _ in self.layout}
        if unknown:
            raise InputError(f"channels {sorted(unknown)} not in codec layout")

        batch_shape = None
        for n, v in chans.items():
            if v is not None:
                shp = np.shape(v)[:-1]
                if batch_shape is None:
                    batch_shape = shp
                elif shp != batch_shape:
                    raise InputError("channels disagree on batch shape")
        batch_shape = batch_shape or ()

        parts, offset = [], 0
        for name, m in self.layout:
            fill = self.fill[offset : offset + m]
            offset += m
            v = chans.get(name)
            if v is None:
                vals = np.broadcast_to(fill, (*batch_shape, m))
                flags = np.zeros((*batch_shape, m))
            else:
                v = np.asarray(v, dtype=float)
                if v.shape[-1] != m:
                    raise InputError(f"channel {name!r} has length {v.shape[-1]}, layout expects {m}")
                present = np.isfinite(v)
                vals = np.where(present, v, fill)
                flags = present.astype(float)
            parts += [vals, flags]
        return np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------------------
# linear codec


class LinearCodec(_CodecBase):
    """Affine codec ``z = W_e u + b_e``, ``x = W_d z + b_d``.

    ``u`` is the assembled encoder input (see :meth:`assemble`).
    """

    kind = "linear"

    def __init__(self, layout, enc_w, enc_b, dec_w, dec_b, fill=None):
        self.layout = _norm_layout(layout)
        self.enc_w = np.asarray(enc_w, dtype=float)
        self.enc_b = np.asarray(enc_b, dtype=float)
        self.dec_w = np.asarray(dec_w, dtype=float)
        self.dec_b = np.asarray(dec_b, dtype=float)
        self.latent_dim = self.enc_w.shape[0]
        total = sum(m for _, m in self.layout)
        self.fill = np.zeros(total) if fill is None else np.asarray(fill, dtype=float)
        if self.enc_w.shape != (self.latent_dim, self.input_dim) or self.dec_w.shape != (self.state_dim, self.latent_dim):
            raise InputError("linear codec weight shapes do not match layout and latent dim")

    @classmethod
    def identity(cls, n: int) -> "LinearCodec":
        enc = np.zeros((n, 2 * n))
        enc[:, :n] = np.eye(n)
        return cls([("state", n)], enc, np.zeros(n), np.eye(n), np.zeros(n))

    def _encode(self, u: np.ndarray) -> np.ndarray:
        return u @ self.enc_w.T + self.enc_b

    def _decode(self, z: np.ndarray) -> np.ndarray:
        return z @ self.dec_w.T + self.dec_b

    def arrays(self) -> dict[str, np.ndarray]:
        return {"enc_w": self.enc_w, "enc_b": self.enc_b, "dec_w": self.dec_w, "dec_b": self.dec_b, "fill": self.fill}

    def config(self) -> dict[str, Any]:
        return {"latent_dim": self.latent_dim}


def fit_linear_codec(states, latent_dim: int, layout=None) -> LinearCodec:
    """Principal-subspace codec fit on clean states.

    The encoder projects the centred state channel onto the leading
    ``latent_dim`` principal directions and ignores observation channels;
    the decoder maps back.  Rank-deficient data triggers a warning.
    """
    x = np.asarray(states, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError("states must be a non-empty (n, N_x) array")
    n, d = x.shape
    if not (1 <= latent_dim <= d):
        raise InputError(f"latent_dim must lie in [1, {d}]")
    if n < latent_dim:
        raise InputError("need at least latent_dim rows")
    layout = _norm_layout(layout or [("state", d)])
    if layout[0][1] != d:
        raise InputError("state channel length does not match data")
    mean = x.mean(axis=0)
    xc = x - mean
    _, svals, vt = np.linalg.svd(xc, full_matrices=False)
    tol = svals.max(initial=0.0) * max(n, d) * np.finfo(float).eps
    rank = int((svals > tol).sum())
    if rank < latent_dim:
        warnings.warn(f"data rank {rank} is below latent_dim {latent_dim}", RuntimeWarning, stacklevel=2)
    basis = vt[:latent_dim]  # (L, d)
    total = sum(m for _, m in layout)
    enc = np.zeros((latent_dim, 2 * total))
    enc[:, :d] = basis
    fill = np.zeros(total)
    fill[:d] = mean
    return LinearCodec(layout, enc, -basis @ mean, basis.T, mean, fill=fill)


# ---------------------------------------------------------------------------
# neural codec


@dataclass
class CodecConfig:
    """Neural codec architecture and optimiser settings.

    ``align_weight`` scales a latent alignment penalty that pulls the
    encoding of degraded inputs towards the (detached) encoding of the same
    state seen clean, so latents of observations and of states share one
    space.
    """

    latent_dim: int = 16
    hidden: int = 256
    layers: int = 5
    activation: str = "silu"
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    align_weight: float = 1.0
    recon_bound: float = 0.1
    validation_fraction: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.latent_dim < 1 or self.layers < 1 or self.hidden < 1:
            raise InputError("latent_dim, layers and hidden must be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or not (self.lr > 0):
            raise InputError("epochs, batch_size and lr must be positive")
        if not (0 <= self.validation_fraction < 1):
            raise InputError("validation_fraction must lie in [0, 1)")


_ACTS = {"silu": nn.SiLU, "relu": nn.ReLU, "gelu": nn.GELU, "tanh": nn.Tanh}
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def _mlp(d_in: int, hidden: int, d_out: int, layers: int, act) -> nn.Sequential:
    dims = [d_in] + [hidden] * (layers - 1) + [d_out]
    mods: list[nn.Module] = []
    for i in range(layers):
        mods.append(nn.Linear(dims[i], dims[i + 1]))
        if i < layers - 1:
            mods.append(act())
    return nn.Sequential(*mods)


class NeuralCodec(_CodecBase, nn.Module):
    """Dense encoder ``f: R^D -> R^L`` and decoder ``g: R^L -> R^{N_x}``.

    Inputs and outputs are standardised internally with per-channel
    statistics fixed at training time.
    """

    kind = "neural"

    def __init__(self, layout, cfg: CodecConfig, fill=None, in_scale=None, out_mean=None, out_scale=None):
        nn.Module.__init__(self)
        self.layout = _norm_layout(layout)
        self.cfg = cfg
        self.latent_dim = cfg.latent_dim
        total = sum(m for _, m in self.layout)
        self.fill = np.zeros(total) if fill is None else np.asarray(fill, dtype=float)
        self.in_scale = np.ones(self.input_dim) if in_scale is None else np.asarray(in_scale, dtype=float)
        self.out_mean = np.zeros(self.state_dim) if out_mean is None else np.asarray(out_mean, dtype=float)
        self.out_scale = 1.0 if out_scale is None else float(out_scale)
        act = _ACTS[cfg.activation]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.encoder = _mlp(self.input_dim, cfg.hidden, cfg.latent_dim, cfg.layers, act)
            self.decoder = _mlp(cfg.latent_dim, cfg.hidden, self.state_dim, cfg.layers, act)
        self.to(_DTYPES[cfg.dtype])

    @property
    def torch_dtype(self):
        return _DTYPES[self.cfg.dtype]

    def _in_offset(self) -> np.ndarray:
        # centre values with the fill (training mean); flags are left as is
        parts, off = [], 0
        for _, m in self.layout:
            parts += [self.fill[off : off + m], np.zeros(m)]
            off += m
        return np.concatenate(parts)

    def encode_tensor(self, u: Tensor) -> Tensor:
        off = torch.as_tensor(self._in_offset(), dtype=u.dtype)
        sc = torch.as_tensor(self.in_scale, dtype=u.dtype)
        return self.encoder((u - off) / sc)

    def decode_tensor(self, z: Tensor) -> Tensor:
        return self.decoder(z) * self.out_scale + torch.as_tensor(self.out_mean, dtype=z.dtype)

    def _encode(self, u: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.encode_tensor(torch.as_tensor(u, dtype=self.torch_dtype)).double().numpy()

    def _decode(self, z: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.decode_tensor(torch.as_tensor(z, dtype=self.torch_dtype)).double().numpy()

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        out.update(fill=self.fill, in_scale=self.in_scale, out_mean=self.out_mean, out_scale=np.array(self.out_scale))
        return out

    def config(self) -> dict[str, Any]:
        return asdict(self.cfg)


Codec = LinearCodec | NeuralCodec


def encode(codec: Codec, state, observations=None) -> np.ndarray:
    """Latent code of a state and its observation channels."""
    return codec._encode(codec.assemble(state, observations))


def decode(codec: Codec, latent) -> np.ndarray:
    """Map latent codes back to the state grid."""
    z = np.asarray(latent, dtype=float)
    if z.shape[-1] != codec.latent_dim:
        raise InputError(f"latent has length {z.shape[-1]}, codec expects {codec.latent_dim}")
    return codec._decode(z)


def relative_error(pred, target) -> float:
    """``||pred - target|| / ||target - mean(target)||`` over all rows."""
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    denom = np.linalg.norm(target - target.mean(axis=0))
    return float(np.linalg.norm(pred - target) / max(denom, 1e-300))


@dataclass
class CodecData:
    """Training pairs for the neural codec.

    Attributes
    ----------
    targets : (n, N_x)
        Clean states the decoder must reproduce.
    channels : mapping name -> (n, len)
        Encoder inputs per channel; NaN marks missing cells.
    """

    targets: np.ndarray
    channels: dict[str, np.ndarray]

    def __len__(self) -> int:
        return int(np.shape(self.targets)[0])

    def subset(self, idx) -> "CodecData":
        return CodecData(self.targets[idx], {k: v[idx] for k, v in self.channels.items()})


@dataclass
class CodecHistory:
    train_loss: list[float] = field(default_factory=list)
    val_error: list[float] = field(default_factory=list)
    diagnostics: dict[str, Any] = field(default_factory=dict)


def train_codec(data: CodecData, layout, cfg: CodecConfig, log=None) -> tuple[NeuralCodec, CodecHistory]:
    """Fit a :class:`NeuralCodec` by reconstruction of the clean state.

    The loss is the mean squared error of ``g(f(u))`` against the target
    state (state channels only), for the degraded input ``u`` and for the
    clean state alone ``u_clean``.  With ``align_weight > 0`` the second
    half of the epochs adds ``align_weight`` times the squared distance of
    both ``f(u)`` and ``f(u_clean)`` to fixed targets: the clean encodings
    recorded at the end of the first half, with the distance measured in
    units of their variance.  Fixed targets keep the latent scale from
    drifting.

    Returns
    -------
    codec, history
        ``history.diagnostics["round_trip_violation"]`` is set when the
        relative validation reconstruction error exceeds ``cfg.recon_bound``.
    """
    n = len(data)
    if n == 0:
        raise InputError("codec training set is empty")
    layout = _norm_layout(layout)
    targets = np.asarray(data.targets, dtype=float)
    if targets.shape[1] != layout[0][1]:
        raise InputError("target length does not match the state channel")

    # per-channel fill (training mean over present cells) and input scale
    fills, scales = [], []
    for name, m in layout:
        v = data.channels.get(name)
        if v is None or not np.isfinite(v).any():
            mean, sd = np.zeros(m), 1.0
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                mean = np.nanmean(v, axis=0)
            mean = np.where(np.isfinite(mean), mean, np.nanmean(v))
            sd = float(np.nanstd(v)) or 1.0
        fills.append(mean)
        scales += [np.full(m, sd), np.ones(m)]
    fill = np.concatenate(fills)
    codec = NeuralCodec(
        layout, cfg, fill=fill, in_scale=np.concatenate(scales),
        out_mean=targets.mean(axis=0), out_scale=float(targets.std()) or 1.0,
    )
    dt = codec.torch_dtype

    src = NoiseSource(cfg.seed, stream=11)
    perm = src.spawn(0).rng.permutation(n)
    n_val = int(round(cfg.validation_fraction * n))
    val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    u_all = torch.as_tensor(codec.assemble(data.targets if layout[0][0] not in data.channels else data.channels[layout[0][0]],
                                           {k: v for k, v in data.channels.items() if k != layout[0][0]}), dtype=dt)
    u_clean = torch.as_tensor(codec.assemble(targets), dtype=dt)
    tgt = torch.as_tensor(targets, dtype=dt)

    opt = torch.optim.AdamW(codec.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps = math.ceil(len(tr_idx) / cfg.batch_size) * cfg.epochs
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: max(0.0, 1.0 - k / steps))
    order = src.spawn(1)
    hist = CodecHistory()
    out_scale = codec.out_scale
    align_from = cfg.epochs // 2 if cfg.align_weight > 0 else cfg.epochs
    anchors = None
    for epoch in range(cfg.epochs):
        if epoch == align_from:
            codec.eval()
            with torch.no_grad():
                anchors = torch.cat([codec.encode_tensor(u_clean[k : k + 4096]) for k in range(0, n, 4096)])
                anchor_var = anchors[torch.from_numpy(tr_idx)].var(dim=0).mean().clamp_min(1e-12)
        codec.train()
        ep = order.rng.permutation(tr_idx)
        running = 0.0
        for k in range(0, len(ep), cfg.batch_size):
            b = torch.from_numpy(ep[k : k + cfg.batch_size])
            z = codec.encode_tensor(u_all[b])
            z_ref = codec.encode_tensor(u_clean[b])
            rec = (codec.decode_tensor(z) - tgt[b]) / out_scale
            rec_ref = (codec.decode_tensor(z_ref) - tgt[b]) / out_scale
            loss = rec.square().mean() + rec_ref.square().mean()
            if anchors is not None:
                a = anchors[b]
                loss = loss + cfg.align_weight * ((z - a).square().mean() + (z_ref - a).square().mean()) / anchor_var
            value = loss.item()
            if not math.isfinite(value) or value > 1e6:
                raise TrainingError(f"codec loss diverged ({value})", epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            running += value * len(b)
        hist.train_loss.append(running / max(len(tr_idx), 1))
        if n_val:
            codec.eval()
            with torch.no_grad():
                pred = codec.decode_tensor(codec.encode_tensor(u_all[torch.from_numpy(val_idx)])).double().numpy()
            hist.val_error.append(relative_error(pred, targets[val_idx]))
        if log is not None:
            msg = f"codec epoch {epoch + 1}/{cfg.epochs} loss {hist.train_loss[-1]:.5f}"
            log(msg + (f" val {hist.val_error[-1]:.4f}" if hist.val_error else ""))
    codec.eval()
    if hist.val_error and hist.val_error[-1] > cfg.recon_bound:
        hist.diagnostics["round_trip_violation"] = True
    return codec, hist


def calibrate_latent_variance(codec: Codec, degraded: CodecData) -> float:
    """Mean squared latent discrepancy between degraded and clean encodings.

    Used as the observation variance when conditioning on an encoded
    observation stack in latent space.
    """
    name = codec.layout[0][0]
    state = degraded.channels.get(name, degraded.targets)
    others = {k: v for k, v in degraded.channels.items() if k != name}
    z_obs = encode(codec, state, others)
    z_ref = encode(codec, degraded.targets)
    return float(np.mean((z_obs - z_ref) ** 2))


# ---------------------------------------------------------------------------
# persistence


def save_codec(path: str | Path, codec: Codec, meta: dict | None = None) -> Path:
    info = {"kind": "codec", "codec": codec.kind, "layout": codec.layout_descriptor(), "config": codec.config()}
    if meta:
        info["meta"] = meta
    return save_container(path, codec.arrays(), info)


def load_codec(path: str | Path, layout=None) -> tuple[Codec, dict]:
    """Load a codec; a ``layout`` that differs from the stored one is an error."""
    arrays, info = load_container(path)
    if info.get("kind") != "codec":
        raise DescriptorMismatch(f"{path} is not a codec container")
    stored = _norm_layout(info["layout"])
    if layout is not None and _norm_layout(layout) != stored:
        raise DescriptorMismatch(f"codec layout mismatch: stored {stored}, requested {_norm_layout(layout)}")
    if info["codec"] == "linear":
        codec = LinearCodec(stored, arrays["enc_w"], arrays["enc_b"], arrays["dec_w"], arrays["dec_b"], fill=arrays["fill"])
    else:
        cfg = CodecConfig(**info["config"])
        codec = NeuralCodec(stored, cfg, fill=arrays["fill"], in_scale=arrays["in_scale"],
                            out_mean=arrays["out_mean"], out_scale=float(np.asarray(arrays["out_scale"]).reshape(-1)[0]))
        state = {k[len("param/") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
        codec.load_state_dict(state)
        codec.eval()
    return codec, info.get("meta", {})
