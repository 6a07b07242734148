"""Score-based data assimilation in state space and in a learned latent space."""

from .diffusion import DiffusionSchedule, NoiseSource, RowNoise, forward_perturb
from .errors import (
    ArtifactMissingError,
    ConfigError,
    DescriptorMismatch,
    DomainError,
    InputError,
    IntegrationError,
    NumericError,
    NumericGuardError,
    ScoreDAError,
    TrainingError,
)
from .guidance import GuidanceConfig, MeasurementOp, ObservationModel, conditional_score, likelihood_score, tweedie_denoise
from .sampler import SamplerConfig, SampleResult, sample
from .score import GaussianOracle, ScoreModel, TrainConfig, dsm_loss, load_model, save_model, train
from .assimilation import AnalysisEnsemble, AssimilationProblem, Trajectory, WindowConfig, assimilate, summarize
from .latent import CodecConfig, LinearCodec, NeuralCodec, decode, encode, train_codec
from .systems import (
    LinearGaussianSSM,
    Lorenz96Config,
    SyntheticModalities,
    enkf_assimilate,
    gaussian_posterior_spread,
    kalman_filter,
    kalman_smoother,
    simulate_lgssm,
    simulate_lorenz96,
)

__version__ = "0.1.0"
