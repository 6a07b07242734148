"""
Experiment configuration and the stages behind the command-line driver.

A run directory holds one sub-directory per seed::

    <out>/seed_<k>/data.npz           truths, backgrounds, observations
    <out>/seed_<k>/codec.npz          latent codec
    <out>/seed_<k>/score_pixel.npz    state-space window prior
    <out>/seed_<k>/score_latent.npz   latent window prior
    <out>/seed_<k>/analyses/*.npz     analysis ensembles per grid point and mode
    <out>/report.csv, report.json, series/*.csv

Every artifact records the content hash of the inputs that produced it, so
stages are skipped when rerun with an unchanged configuration.  Everything
written to the report is a deterministic function of configuration and seed;
wall-clock timings go to a separate ``timing.json``.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import yaml
from scipy import stats

from .assimilation import (
    LATENT,
    MULTIMODAL,
    PIXEL,
    UNIMODAL,
    AnalysisEnsemble,
    AssimilationProblem,
    Trajectory,
    WindowConfig,
    assimilate,
    summarize,
)
from .diffusion import DiffusionSchedule
from .errors import ArtifactMissingError, ConfigError, InputError, ScoreDAError
from .guidance import GuidanceConfig, ObservationModel
from .io import canonical_json, content_hash, file_hash, load_container, read_meta, save_container
from .latent import CodecConfig, CodecData, encode, load_codec, save_codec, train_codec
from .sampler import SamplerConfig
from .score import ScoreModel, TrainConfig, load_model, save_model, train
from .systems import (
    BACKGROUND,
    EX_SITU,
    IN_SITU,
    LinearGaussianSSM,
    Lorenz96Config,
    SyntheticModalities,
    cell_wasserstein,
    gaussian_posterior_spread,
    rmse,
    simulate_lgssm,
    simulate_lorenz96,
    synthesize,
    synthesize_background,
)

MODE_NAMES = ("pixel-unimodal", "pixel-multimodal", "latent-unimodal", "latent-multimodal")
OBS_TAGS = (IN_SITU, EX_SITU)


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 32-bit seed for a named sub-task of ``seed``."""
    return int(np.random.SeedSequence(seed, spawn_key=tuple(keys)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# configuration


def _from_dict(cls, d: dict | None, section: str, issues: list[str]):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    for k in sorted(set(d) - names):
        issues.append(f"{section}.{k}: unknown field")
        d.pop(k)
    try:
        return cls(**d)
    except (ValueError, TypeError) as exc:
        issues.append(f"{section}: {exc}")
        return cls()


@dataclass
class GridPoint:
    index: int
    coarsening: int
    noise_variance: float
    gap: int

    def modalities(self) -> SyntheticModalities:
        return SyntheticModalities(self.coarsening, self.noise_variance, self.gap)

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ExperimentConfig:
    """Full experiment description; see ``docs/example_config.yaml``."""

    system: str = "lorenz96"
    lorenz96: dict = field(default_factory=dict)
    lgssm: dict = field(default_factory=dict)
    data: dict = field(default_factory=lambda: {"train_steps": 4000, "val_steps": 200, "eval_steps": 20})
    schedule: dict = field(default_factory=lambda: {"kind": "variance_preserving"})
    window: dict = field(default_factory=lambda: {"K": 5})
    score: dict = field(default_factory=dict)
    latent_score: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    latent_train: dict = field(default_factory=dict)
    codec: dict = field(default_factory=dict)
    codec_augment: dict = field(default_factory=lambda: {"copies": 4, "dropout": 0.3, "roll": True})
    score_augment: dict = field(default_factory=lambda: {"roll_copies": 4})
    sampler: dict = field(default_factory=dict)
    guidance: dict = field(default_factory=dict)
    grid: dict = field(default_factory=lambda: {"coarsening": [4, 15, 20], "noise_variance": [0.1, 2.0, 4.0], "gap": [1, 12, 16]})
    modes: list = field(default_factory=lambda: list(MODE_NAMES))
    ensemble_size: int = 8
    seeds: list = field(default_factory=lambda: [0])
    feature_ablation: dict = field(default_factory=dict)
    out: str = "runs/default"

    # typed views, filled by validate()
    def validate(self) -> "ExperimentConfig":
        issues: list[str] = []
        if self.system not in ("lorenz96", "lgssm"):
            issues.append(f"system: must be lorenz96 or lgssm, got {self.system!r}")
        if self.system == "lorenz96":
            self.l96 = _from_dict(Lorenz96Config, self.lorenz96, "lorenz96", issues)
            self.state_dim = self.l96.N if hasattr(self.l96, "N") else 0
        else:
            try:
                self.ssm = LinearGaussianSSM(**self.lgssm)
                self.state_dim = self.ssm.dim
            except (ValueError, TypeError) as exc:
                issues.append(f"lgssm: {exc}")
                self.state_dim = 0
        for k in ("train_steps", "val_steps", "eval_steps"):
            v = self.data.get(k)
            if not isinstance(v, int) or v < 1:
                issues.append(f"data.{k}: must be a positive integer")
        try:
            self.schedule_obj = DiffusionSchedule.from_dict(self.schedule)
        except (ValueError, TypeError) as exc:
            issues.append(f"schedule: {exc}")
        self.window_cfg = _from_dict(WindowConfig, self.window, "window", issues)
        self.train_cfg = _from_dict(TrainConfig, self.train, "train", issues)
        self.latent_train_cfg = _from_dict(TrainConfig, {**self.train, **self.latent_train}, "latent_train", issues)
        # latent size defaults to a quarter of the state length
        codec = {"latent_dim": max(1, self.state_dim // 4), **self.codec}
        self.codec_cfg = _from_dict(CodecConfig, codec, "codec", issues)
        self.sampler_cfg = _from_dict(SamplerConfig, self.sampler, "sampler", issues)
        self.guidance_cfg = _from_dict(GuidanceConfig, self.guidance, "guidance", issues)
        for axis in ("coarsening", "noise_variance", "gap"):
            vals = self.grid.get(axis)
            if not isinstance(vals, list) or not vals:
                issues.append(f"grid.{axis}: must be a non-empty list")
            elif axis != "noise_variance" and any((not isinstance(v, int)) or v < 1 for v in vals):
                issues.append(f"grid.{axis}: entries must be integers >= 1")
            elif axis == "noise_variance" and any(not isinstance(v, (int, float)) or v < 0 for v in vals):
                issues.append(f"grid.{axis}: entries must be non-negative numbers")
        extra = set(self.codec_augment) - {"copies", "dropout", "roll"}
        if extra:
            issues.append(f"codec_augment: unknown fields {sorted(extra)}")
        c = self.codec_augment.get("copies", 4)
        if not isinstance(c, int) or c < 1:
            issues.append("codec_augment.copies: must be a positive integer")
        if not (0 <= self.codec_augment.get("dropout", 0.3) < 1):
            issues.append("codec_augment.dropout: must lie in [0, 1)")
        extra = set(self.score_augment) - {"roll_copies"}
        if extra:
            issues.append(f"score_augment: unknown fields {sorted(extra)}")
        r = self.score_augment.get("roll_copies", 0)
        if not isinstance(r, int) or r < 0:
            issues.append("score_augment.roll_copies: must be a non-negative integer")
        if not self.modes or any(m not in MODE_NAMES for m in self.modes):
            issues.append(f"modes: entries must be among {list(MODE_NAMES)}")
        if not isinstance(self.ensemble_size, int) or self.ensemble_size < 1:
            issues.append("ensemble_size: must be a positive integer")
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            issues.append("seeds: must be a non-empty list of non-negative integers")
        if self.state_dim and isinstance(self.grid.get("gap"), list):
            if any(isinstance(g, int) and g > self.state_dim for g in self.grid["gap"]):
                issues.append("grid.gap: gap larger than the state dimension leaves no in-situ cells")
        if isinstance(self.data.get("eval_steps"), int) and isinstance(self.window.get("K", 5), int):
            if self.window.get("K", 5) > self.data["eval_steps"]:
                issues.append("window.K: larger than data.eval_steps")
        if issues:
            raise ConfigError("invalid experiment configuration", issues)
        return self

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        issues = []
        known = {f.name for f in fields(cls)}
        for k in sorted(set(d) - known):
            issues.append(f"{k}: unknown top-level field")
        if issues:
            raise ConfigError("invalid experiment configuration", issues)
        return cls(**d).validate()

    def grid_points(self) -> list[GridPoint]:
        g = self.grid
        combos = itertools.product(g["coarsening"], g["noise_variance"], g["gap"])
        return [GridPoint(i, int(c), float(s), int(k)) for i, (c, s, k) in enumerate(combos)]

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw.update(overrides or {})
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# artifacts


def seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return cfg.out_dir / f"seed_{seed}"


PRODUCERS = {
    "data.npz": "simulate",
    "codec.npz": "train-codec",
    "score_pixel.npz": "train-score --mode pixel",
    "score_latent.npz": "train-score --mode latent",
}


def require(path: Path) -> Path:
    if not path.exists():
        cmd = PRODUCERS.get(path.name, "assimilate")
        raise ArtifactMissingError(f"missing artifact {path}; produce it with `scoreda {cmd} --config <config>`")
    return path


def _up_to_date(path: Path, input_hash: str) -> bool:
    if not path.exists():
        return False
    try:
        return read_meta(path).get("input_hash") == input_hash
    except Exception:
        return False


# ---------------------------------------------------------------------------
# simulate


def _simulate_truth(cfg: ExperimentConfig, T: int, seed: int) -> Trajectory:
    if cfg.system == "lorenz96":
        return simulate_lorenz96(cfg.l96, T, seed)
    return simulate_lgssm(cfg.ssm, T, seed)


def _degrade(values: np.ndarray, gp: GridPoint, seed: int) -> dict[str, np.ndarray]:
    mods = gp.modalities()
    out = {BACKGROUND: synthesize_background(values, mods, seed)}
    out.update(synthesize(values, mods, seed))
    return out


def simulate_stage(cfg: ExperimentConfig, seed: int, log=print) -> Path:
    path = seed_dir(cfg, seed) / "data.npz"
    h = content_hash("simulate", cfg.system, cfg.lorenz96, cfg.lgssm, cfg.data, cfg.grid, seed)
    if _up_to_date(path, h):
        return path
    arrays: dict[str, np.ndarray] = {}
    for j, split in enumerate(("train", "val", "eval")):
        T = cfg.data[f"{split}_steps"]
        arrays[f"truth_{split}"] = _simulate_truth(cfg, T, derive_seed(seed, 0, j)).values
    for gp in cfg.grid_points():
        for j, split in enumerate(("val", "eval")):
            deg = _degrade(arrays[f"truth_{split}"], gp, derive_seed(seed, 1, gp.index, j))
            for tag, v in deg.items():
                arrays[f"gp{gp.index}_{split}_{tag}"] = v
    meta = {"input_hash": h, "seed": seed, "grid": [g.as_dict() for g in cfg.grid_points()], "system": cfg.system}
    save_container(path, arrays, meta)
    log(f"[seed {seed}] simulated {cfg.system} data -> {path}")
    return path


def load_data(cfg: ExperimentConfig, seed: int) -> tuple[dict[str, np.ndarray], dict]:
    return load_container(require(seed_dir(cfg, seed) / "data.npz"))


# ---------------------------------------------------------------------------
# codec


def codec_layout(n: int) -> list[tuple[str, int]]:
    return [(BACKGROUND, n), (IN_SITU, n), (EX_SITU, n)]


def _codec_channels(deg: dict[str, np.ndarray], gp: GridPoint, n: int, tags: Iterable[str]) -> dict[str, np.ndarray]:
    ops = gp.modalities().operators(n)
    chans = {BACKGROUND: deg[BACKGROUND]}
    for tag in tags:
        chans[tag] = ops[tag].regrid(deg[tag])
    return chans


def _cyclic(cfg: ExperimentConfig) -> bool:
    # the Lorenz-96 ring is invariant under cyclic shifts; the LGSSM is not
    return cfg.system == "lorenz96"


def _roll_rows(values: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Roll each ``values[i]`` (shape ``(K, n)``) by ``shifts[i]`` along the last axis."""
    n = values.shape[-1]
    idx = (np.arange(n)[None, :] - np.asarray(shifts)[:, None]) % n
    return np.take_along_axis(values, idx[:, None, :], axis=-1)


def _augmented_codec_data(cfg: ExperimentConfig, truth: np.ndarray, seed: int) -> CodecData:
    copies = int(cfg.codec_augment.get("copies", 4))
    p_drop = float(cfg.codec_augment.get("dropout", 0.3))
    roll = bool(cfg.codec_augment.get("roll", True)) and _cyclic(cfg)
    n = truth.shape[1]
    gps = cfg.grid_points()
    rng = np.random.default_rng(derive_seed(seed, 2))
    targets, chans = [], {BACKGROUND: [], IN_SITU: [], EX_SITU: []}
    for c in range(copies):
        if roll:
            truth_c = _roll_rows(truth[:, None, :], rng.integers(0, n, size=truth.shape[0]))[:, 0]
        else:
            truth_c = truth
        assign = rng.integers(0, len(gps), size=truth.shape[0])
        for gp in gps:
            idx = np.flatnonzero(assign == gp.index)
            if idx.size == 0:
                continue
            deg = _degrade(truth_c[idx], gp, derive_seed(seed, 3, c, gp.index))
            ch = _codec_channels(deg, gp, n, OBS_TAGS)
            for tag in OBS_TAGS:
                drop = rng.random(idx.size) < p_drop
                ch[tag][drop] = np.nan
            targets.append(truth_c[idx])
            for k in chans:
                chans[k].append(ch[k])
    return CodecData(np.concatenate(targets), {k: np.concatenate(v) for k, v in chans.items()})


def train_codec_stage(cfg: ExperimentConfig, seed: int, log=print) -> Path:
    data_path = require(seed_dir(cfg, seed) / "data.npz")
    path = seed_dir(cfg, seed) / "codec.npz"
    h = content_hash("codec", file_hash(data_path), cfg.codec, cfg.codec_augment, seed)
    if _up_to_date(path, h):
        return path
    arrays, _ = load_container(data_path)
    truth = arrays["truth_train"]
    cdata = _augmented_codec_data(cfg, truth, seed)
    ccfg = CodecConfig(**{**asdict(cfg.codec_cfg), "seed": derive_seed(seed, 4)})
    codec, hist = train_codec(cdata, codec_layout(truth.shape[1]), ccfg, log=None)
    z = encode(codec, arrays["truth_val"])
    from .latent import decode, relative_error

    err = relative_error(decode(codec, z), arrays["truth_val"])
    meta = {"input_hash": h, "seed": seed, "val_round_trip": err, "diagnostics": hist.diagnostics}
    save_codec(path, codec, meta)
    log(f"[seed {seed}] codec trained, held-out round-trip error {err:.4f} -> {path}")
    return path


# ---------------------------------------------------------------------------
# score priors


def _windows(values: np.ndarray, K: int) -> np.ndarray:
    T = values.shape[0]
    return np.stack([values[i : i + K].reshape(-1) for i in range(T - K + 1)])


def _score_kwargs(section: dict, dim: int, K: int, width: int) -> dict:
    kw = {"hidden": 256, "embedding": 64, "depth": 3, "dtype": "float32"}
    kw.update(section)
    if kw.get("arch", "mlp") == "conv":
        kw["shape"] = [K, width]
    return kw


def train_score_stage(cfg: ExperimentConfig, seed: int, mode: str, log=print) -> Path:
    if mode not in (PIXEL, LATENT):
        raise ConfigError(f"unknown score mode {mode!r}", ["mode: must be pixel or latent"])
    sd = seed_dir(cfg, seed)
    data_path = require(sd / "data.npz")
    path = sd / f"score_{mode}.npz"
    arrays, _ = load_container(data_path)
    K = cfg.window_cfg.K
    section = cfg.score if mode == PIXEL else {**cfg.score, **cfg.latent_score}
    tcfg = cfg.train_cfg if mode == PIXEL else cfg.latent_train_cfg
    upstream = [file_hash(data_path)]
    if mode == LATENT:
        codec_path = require(sd / "codec.npz")
        upstream.append(file_hash(codec_path))
    h = content_hash("score", mode, upstream, section, asdict(tcfg), cfg.schedule, K, cfg.score_augment, seed)
    if _up_to_date(path, h):
        return path

    truth = arrays["truth_train"]
    n = truth.shape[1]
    win = _windows(truth, K).reshape(-1, K, n)
    copies = int(cfg.score_augment.get("roll_copies", 0)) if _cyclic(cfg) else 0
    if copies:
        rng = np.random.default_rng(derive_seed(seed, 8, 0 if mode == PIXEL else 1))
        win = np.concatenate([win] + [_roll_rows(win, rng.integers(0, n, size=len(win))) for _ in range(copies)])
    if mode == PIXEL:
        width = n
    else:
        codec, _ = load_codec(codec_path)
        width = codec.latent_dim
        win = encode(codec, win.reshape(-1, n)).reshape(len(win), K, width)
    data = win.reshape(len(win), K * width)
    shift, scale = float(data.mean()), float(data.std()) or 1.0
    model = ScoreModel(data.shape[1], seed=derive_seed(seed, 5), shift=shift, scale=scale, **_score_kwargs(section, data.shape[1], K, width))
    tc = TrainConfig(**{**asdict(tcfg), "seed": derive_seed(seed, 6)})
    model, hist = train(model, (data - shift) / scale, tc, cfg.schedule_obj)
    meta = {"input_hash": h, "seed": seed, "mode": mode, "final_val_loss": hist.val_loss[-1], "diagnostics": hist.diagnostics}
    save_model(path, model, cfg.schedule_obj, meta)
    log(f"[seed {seed}] {mode} score prior trained (val loss {hist.val_loss[-1]:.4f}) -> {path}")
    return path


# ---------------------------------------------------------------------------
# assimilation


def _step_observations(arrays, gp: GridPoint, split: str, n: int, tags: Sequence[str]) -> list[list[ObservationModel]]:
    ops = gp.modalities().operators(n)
    T = arrays[f"truth_{split}"].shape[0]
    out: list[list[ObservationModel]] = [[] for _ in range(T)]
    for tag in tags:
        y = arrays[f"gp{gp.index}_{split}_{tag}"]
        for t in range(T):
            out[t].append(ObservationModel(y[t], ops[tag], gp.noise_variance, tag))
    return out


def _background_variance(arrays, gp: GridPoint) -> float:
    bg = arrays[f"gp{gp.index}_val_{BACKGROUND}"]
    truth = arrays["truth_val"]
    ok = np.isfinite(bg)
    return float(np.mean((bg[ok] - truth[ok]) ** 2))


def _latent_variance(codec, arrays, gp: GridPoint, tags: Sequence[str]) -> float:
    n = arrays["truth_val"].shape[1]
    deg = {BACKGROUND: arrays[f"gp{gp.index}_val_{BACKGROUND}"]}
    for tag in tags:
        deg[tag] = arrays[f"gp{gp.index}_val_{tag}"]
    chans = _codec_channels(deg, gp, n, tags)
    z_obs = encode(codec, chans.pop(BACKGROUND), chans)
    z_ref = encode(codec, arrays["truth_val"])
    return float(np.mean((z_obs - z_ref) ** 2))


def analysis_path(cfg: ExperimentConfig, seed: int, gp: GridPoint, mode_name: str, tags: Sequence[str] | None = None) -> Path:
    suffix = "" if tags is None else "_" + "+".join(sorted(tags)) if tags else "_none"
    return seed_dir(cfg, seed) / "analyses" / f"gp{gp.index:03d}_{mode_name}{suffix}.npz"


def build_problem(
    cfg: ExperimentConfig,
    seed: int,
    gp: GridPoint,
    mode_name: str,
    tags: Sequence[str] | None = None,
    split: str = "eval",
) -> tuple[AssimilationProblem, ScoreModel, DiffusionSchedule, Any]:
    """Assimilation problem on one split plus the prior (and codec) it needs."""
    mode, mods = mode_name.split("-")
    sd = seed_dir(cfg, seed)
    arrays, _ = load_data(cfg, seed)
    model, schedule, _ = load_model(require(sd / f"score_{mode}.npz"))
    use_tags = list(OBS_TAGS if tags is None else tags) if mods == MULTIMODAL else []
    n = arrays[f"truth_{split}"].shape[1]
    problem = AssimilationProblem(
        background=Trajectory(arrays[f"gp{gp.index}_{split}_{BACKGROUND}"], role="background"),
        observations=_step_observations(arrays, gp, split, n, use_tags),
        mode=mode,
        modalities=mods,
        ensemble_size=cfg.ensemble_size,
        background_variance=_background_variance(arrays, gp),
        window=cfg.window_cfg,
    )
    codec = None
    if mode == LATENT:
        codec, _ = load_codec(require(sd / "codec.npz"))
        problem.latent_variance = _latent_variance(codec, arrays, gp, use_tags)
    return problem, model, schedule, codec


def assimilate_stage(
    cfg: ExperimentConfig,
    seed: int,
    gp: GridPoint,
    mode_name: str,
    tags: Sequence[str] | None = None,
    log=print,
) -> Path:
    """Assimilate the evaluation trajectory at one grid point in one mode.

    ``tags`` overrides the observation modalities used by multimodal modes
    (feature ablation).
    """
    mode, mods = mode_name.split("-")
    sd = seed_dir(cfg, seed)
    data_path = require(sd / "data.npz")
    model_path = require(sd / f"score_{mode}.npz")
    upstream = [file_hash(data_path), file_hash(model_path)]
    if mode == LATENT:
        codec_path = require(sd / "codec.npz")
        upstream.append(file_hash(codec_path))
    use_tags = list(OBS_TAGS if tags is None else tags) if mods == MULTIMODAL else []
    path = analysis_path(cfg, seed, gp, mode_name, tags)
    h = content_hash("assimilate", upstream, gp.as_dict(), mode_name, use_tags, cfg.sampler, cfg.guidance, cfg.window, cfg.ensemble_size, seed)
    if _up_to_date(path, h):
        return path

    problem, model, schedule, codec = build_problem(cfg, seed, gp, mode_name, tags)
    scfg = SamplerConfig(**{**asdict(cfg.sampler_cfg), "seed": derive_seed(seed, 7, gp.index)})
    ens = assimilate(problem, model, schedule, scfg, cfg.guidance_cfg, codec=codec)
    meta = {
        "input_hash": h,
        "seed": seed,
        "grid_point": gp.as_dict(),
        "mode": mode_name,
        "tags": use_tags,
        "failures": ens.failures,
        "background_variance": problem.background_variance,
        "latent_variance": problem.latent_variance if mode == LATENT else None,
    }
    save_container(path, {"members": ens.members}, meta)
    log(f"[seed {seed}] gp{gp.index} {mode_name}{'' if tags is None else ' ' + '+'.join(use_tags)}: {len(ens.failures)} failed member-windows")
    return path


def evaluate(members: np.ndarray, truth: np.ndarray) -> dict[str, Any]:
    """Metrics of an analysis ensemble against the truth.

    The per-cell Wasserstein distance compares the ensemble-mean trajectory
    with the truth over the evaluation period, cell by cell.
    """
    ens = AnalysisEnsemble(members)
    valid = ens.valid
    if not valid.any():
        raise ScoreDAError("all ensemble members are non-finite")
    s = summarize(ens)
    w_cells = cell_wasserstein(s.mean, truth)
    return {
        "wasserstein": float(w_cells.mean()),
        "wasserstein_cells": w_cells,
        "rmse": rmse(s.mean, truth),
        "spread": float(s.std.mean()),
        "valid_members": int(valid.sum()),
    }


# ---------------------------------------------------------------------------
# ablation and reporting


@dataclass
class StageFailure:
    seed: int
    stage: str
    grid_index: int | None
    mode: str | None
    error: str

    def as_dict(self) -> dict:
        return asdict(self)


def prepare_seed(cfg: ExperimentConfig, seed: int, log=print) -> None:
    simulate_stage(cfg, seed, log)
    modes = {m.split("-")[0] for m in cfg.modes}
    if LATENT in modes:
        train_codec_stage(cfg, seed, log)
        train_score_stage(cfg, seed, LATENT, log)
    if PIXEL in modes:
        train_score_stage(cfg, seed, PIXEL, log)


def ablate(cfg: ExperimentConfig, log=print, grid_filter: Callable[[GridPoint], bool] | None = None) -> tuple[dict, list[StageFailure]]:
    """Run every (seed, grid point, mode) and write the report.

    Missing upstream artifacts are produced first.  A failing grid point is
    recorded and does not abort the remaining ones.
    """
    failures: list[StageFailure] = []
    timing: dict[str, float] = {}
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        try:
            prepare_seed(cfg, seed, log)
        except ScoreDAError as exc:
            failures.append(StageFailure(seed, "prepare", None, None, f"{type(exc).__name__}: {exc}"))
            continue
        timing[f"seed_{seed}/prepare"] = time.perf_counter() - t0
        for gp in cfg.grid_points():
            if grid_filter is not None and not grid_filter(gp):
                continue
            for mode_name in cfg.modes:
                t0 = time.perf_counter()
                try:
                    assimilate_stage(cfg, seed, gp, mode_name, log=log)
                except Exception as exc:  # crash isolation per grid point
                    failures.append(StageFailure(seed, "assimilate", gp.index, mode_name, f"{type(exc).__name__}: {exc}"))
                timing[f"seed_{seed}/gp{gp.index}/{mode_name}"] = time.perf_counter() - t0
    report = build_report(cfg, grid_filter=grid_filter)
    failures += [StageFailure(**f) for f in report.pop("_failures")]
    write_failures(cfg, failures)
    (cfg.out_dir / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True))
    return report, failures


def write_failures(cfg: ExperimentConfig, failures: list[StageFailure]) -> None:
    path = cfg.out_dir / "failures.json"
    if failures:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps([f.as_dict() for f in failures], indent=1, sort_keys=True))
    elif path.exists():
        path.unlink()


REPORT_COLUMNS = [
    "mode", "grid_index", "coarsening", "noise_variance", "gap",
    "wasserstein", "rmse", "spread", "n_seeds", "failed_member_windows",
]


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def build_report(cfg: ExperimentConfig, grid_filter=None) -> dict:
    """Assemble ``report.csv``, ``report.json`` and ``series/*.csv`` from analyses."""
    rows, per_seed, missing = [], [], []
    for gp in cfg.grid_points():
        if grid_filter is not None and not grid_filter(gp):
            continue
        for mode_name in cfg.modes:
            metrics, hashes, n_fail = [], {}, 0
            for seed in cfg.seeds:
                path = analysis_path(cfg, seed, gp, mode_name)
                if not path.exists():
                    missing.append({"seed": seed, "stage": "report", "grid_index": gp.index, "mode": mode_name,
                                    "error": f"ArtifactMissingError: {path} (run `scoreda assimilate`)"})
                    continue
                arrays, meta = load_container(path)
                truth, _ = load_data(cfg, seed)
                try:
                    m = evaluate(arrays["members"], truth["truth_eval"])
                except ScoreDAError as exc:
                    missing.append({"seed": seed, "stage": "report", "grid_index": gp.index, "mode": mode_name,
                                    "error": f"{type(exc).__name__}: {exc}"})
                    continue
                n_fail += len(meta.get("failures", []))
                hashes[str(seed)] = file_hash(path)
                metrics.append(m)
                per_seed.append({"seed": seed, "grid_index": gp.index, "mode": mode_name,
                                 **{k: m[k] for k in ("wasserstein", "rmse", "spread", "valid_members")}})
            row = {"mode": mode_name, **{k: getattr(gp, k) for k in ("coarsening", "noise_variance", "gap")}, "grid_index": gp.index}
            for k in ("wasserstein", "rmse", "spread"):
                row[k] = float(np.mean([m[k] for m in metrics])) if metrics else float("nan")
            row["n_seeds"] = len(metrics)
            row["failed_member_windows"] = n_fail
            row["artifact_hashes"] = hashes
            rows.append(row)

    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    (out / "report.csv").write_text(buf.getvalue())

    series = _series(rows)
    sdir = out / "series"
    sdir.mkdir(exist_ok=True)
    for name, pts in series.items():
        b = io.StringIO()
        sw = csv.writer(b, lineterminator="\n")
        sw.writerow(["x", "wasserstein", "rmse"])
        for p in pts:
            sw.writerow([_fmt(p["x"]), _fmt(p["wasserstein"]), _fmt(p["rmse"])])
        (sdir / f"{name}.csv").write_text(b.getvalue())

    report = {
        "config_hash": content_hash(cfg.to_dict()),
        "config": cfg.to_dict(),
        "rows": rows,
        "per_seed": per_seed,
        "series": series,
    }
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True, default=_json_default))
    report["_failures"] = missing
    return report


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _series(rows: list[dict]) -> dict[str, list[dict]]:
    """Per-axis curves: metric averaged over grid points sharing the axis value."""
    out: dict[str, list[dict]] = {}
    for axis in ("coarsening", "noise_variance", "gap"):
        for mode in sorted({r["mode"] for r in rows}):
            pts = []
            for x in sorted({r[axis] for r in rows if r["mode"] == mode}):
                sel = [r for r in rows if r["mode"] == mode and r[axis] == x and r["n_seeds"] > 0]
                if not sel:
                    continue
                pts.append({
                    "x": x,
                    "wasserstein": float(np.mean([r["wasserstein"] for r in sel])),
                    "rmse": float(np.mean([r["rmse"] for r in sel])),
                })
            out[f"{axis}__{mode}"] = pts
    return out


def severe_axis_comparison(report: dict, cfg: ExperimentConfig, better: str = "latent-multimodal", worse: str = "pixel-unimodal") -> dict[str, dict]:
    """Mean Wasserstein per mode at the most severe value of each axis."""
    severe = {
        "coarsening": max(cfg.grid["coarsening"]),
        "noise_variance": max(cfg.grid["noise_variance"]),
        "gap": max(cfg.grid["gap"]),
    }
    out = {}
    for axis, v in severe.items():
        vals = {}
        for mode in (better, worse):
            sel = [r["wasserstein"] for r in report["rows"] if r["mode"] == mode and r[axis] == v and r["n_seeds"] > 0]
            vals[mode] = float(np.mean(sel)) if sel else float("nan")
        out[axis] = {"value": v, **vals, "holds": bool(vals[better] <= vals[worse])}
    return out


# ---------------------------------------------------------------------------
# multimodal feature ablation


def feature_ablation_points(cfg: ExperimentConfig) -> list[GridPoint]:
    """Grid points where one axis is severe and the others are at their mildest."""
    g = cfg.grid
    mild = (min(g["coarsening"]), min(g["noise_variance"]), min(g["gap"]))
    targets = {
        (max(g["coarsening"]), mild[1], mild[2]),
        (mild[0], max(g["noise_variance"]), mild[2]),
        (mild[0], mild[1], max(g["gap"])),
    }
    chosen = cfg.feature_ablation.get("grid_indices")
    pts = cfg.grid_points()
    if chosen is not None:
        return [p for p in pts if p.index in set(chosen)]
    return [p for p in pts if (p.coarsening, p.noise_variance, p.gap) in targets]


def _oracle_spreads(arrays, gp: GridPoint, base: Sequence[str], added: Sequence[str]) -> dict[str, Any]:
    """Linear-Gaussian posterior spread with and without the added modalities.

    The prior is the climatological Gaussian of the training truth; the
    background enters as an observation with its validation error variance.
    """
    truth = arrays["truth_train"]
    n = truth.shape[1]
    cov = np.cov(truth.T)
    cov = 0.5 * (cov + cov.T) + 1e-9 * np.eye(n)
    mods = gp.modalities()
    ops = mods.operators(n)
    bop = mods.background_op(n)
    bg = ObservationModel(np.zeros(bop.out_dim), bop, max(_background_variance(arrays, gp), 1e-12), BACKGROUND)
    var = max(gp.noise_variance, 1e-12)

    def spread(tags):
        obs = [bg] + [ObservationModel(np.zeros(ops[t].out_dim), ops[t], var, t) for t in tags]
        return gaussian_posterior_spread(cov, obs)

    without, with_ = spread(base), spread(list(base) + list(added))
    return {
        "mean_without": float(without.mean()),
        "mean_with": float(with_.mean()),
        "max_increase": float(np.max(with_ - without)),
    }


def feature_ablation(cfg: ExperimentConfig, log=print) -> tuple[dict, list[StageFailure]]:
    """Latent multimodal with in-situ only versus in-situ plus ex-situ.

    Reports the per-cell paired difference of the Wasserstein distance
    (with minus without ex-situ) and a paired t-test over all cells.
    """
    mode_name = cfg.feature_ablation.get("mode", "latent-multimodal")
    base = list(cfg.feature_ablation.get("base", [IN_SITU]))
    added = list(cfg.feature_ablation.get("added", [EX_SITU]))
    failures: list[StageFailure] = []
    diffs, without, rows, oracle = [], [], [], []
    for seed in cfg.seeds:
        try:
            prepare_seed(cfg, seed, log)
        except ScoreDAError as exc:
            failures.append(StageFailure(seed, "prepare", None, None, f"{type(exc).__name__}: {exc}"))
            continue
        arrays, _ = load_data(cfg, seed)
        for gp in feature_ablation_points(cfg):
            try:
                res = {}
                for label, tags in (("without", base), ("with", base + added)):
                    p = assimilate_stage(cfg, seed, gp, mode_name, tags=tags, log=log)
                    res[label] = evaluate(load_container(p)[0]["members"], arrays["truth_eval"])
            except Exception as exc:
                failures.append(StageFailure(seed, "feature-ablation", gp.index, mode_name, f"{type(exc).__name__}: {exc}"))
                continue
            d = res["with"]["wasserstein_cells"] - res["without"]["wasserstein_cells"]
            diffs.append(d)
            without.append(res["without"]["wasserstein_cells"])
            spread = _oracle_spreads(arrays, gp, base, added)
            oracle.append({"seed": seed, "grid_index": gp.index, **spread})
            for cell, v in enumerate(d):
                rows.append([seed, gp.index, cell, res["without"]["wasserstein_cells"][cell], res["with"]["wasserstein_cells"][cell], v])
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "grid_index", "cell", "wasserstein_without", "wasserstein_with", "difference"])
    for r in rows:
        w.writerow([_fmt(x) if isinstance(x, float) else _fmt(float(x)) if isinstance(x, np.floating) else x for x in r])
    (out / "feature_ablation.csv").write_text(buf.getvalue())
    summary: dict[str, Any] = {"mode": mode_name, "base": base, "added": added, "n_cells": int(sum(len(d) for d in diffs))}
    if diffs:
        alld = np.concatenate(diffs)
        t = stats.ttest_1samp(alld, 0.0)
        summary.update(
            mean_difference=float(alld.mean()),
            mean_abs_difference=float(np.abs(alld).mean()),
            mean_wasserstein_without=float(np.concatenate(without).mean()),
            fraction_cells_changed=float(np.mean(np.abs(alld) > 0)),
            t_statistic=float(t.statistic),
            p_value=float(t.pvalue),
        )
    if oracle:
        summary["oracle_spread"] = oracle
        summary["oracle_spread_max_increase"] = float(max(o["max_increase"] for o in oracle))
    (out / "feature_ablation.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    write_failures(cfg, failures)
    return summary, failures
