"""Pitch-adaptive autoregressive waveform models and the sinusoid study."""

from .errors import (
    CheckpointError,
    CheckpointVersionError,
    ConfigurationError,
    DataError,
    MeasurementError,
    QPNetError,
    TrainingDivergedError,
    UsageError,
    WavFormatError,
)
from .model import (
    ARCHITECTURES,
    AuxTrack,
    DilationPlan,
    MacroblockSpec,
    ModelConfig,
    NetworkParams,
    build_dilation_plan,
    compute_dilation_factor,
    effective_receptive_field_length,
    forward_teacher_forced,
    init_params,
    interpolate_f0,
    load_checkpoint,
    named_config,
    receptive_field_length,
    save_checkpoint,
)
from .sampler import GenerationRequest, generate, generate_batch
from .signal import AudioClip, QuantizedClip, estimate_snr, mulaw_decode, mulaw_encode, synth_sinusoid
from .training import DatasetSpec, TrainingConfig, build_sinusoid_dataset, train

__version__ = "0.1.0"
