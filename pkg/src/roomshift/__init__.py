"""Re-render audio into the acoustic space of another recording.

The pipeline: simulate room impulse responses, build a paired spectrogram
dataset, train a residual transformer to move log-spectrograms between
spaces, resynthesize with Griffin-Lim, and judge the result with a trained
same-space/different-space scorer.
"""

__version__ = "0.1.0"

from .audio_io import CANONICAL_RATE, AudioClip, read_wav, write_wav
from .dsp import (
    MODEL_FRAMES,
    GriffinLimResult,
    LogSpectrogram,
    StftConfig,
    convolve,
    fixed_log_spectrogram,
    griffin_lim,
    istft,
    log_magnitude,
    minmax_loss,
    read_spec1,
    stft,
    write_spec1,
)
from .errors import (
    ConfigError,
    DataError,
    ManifestError,
    NumericError,
    RoomshiftError,
    UnsupportedCodecError,
    WavFormatError,
)
from .evaluator import EvaluatorHyper, EvaluatorModel, evaluate_transfer, load_evaluator, save_evaluator
from .rir import RoomIr, RoomSpec, image_source_rir, measure_rt60, noise_decay_rir, sabine_rt60, sample_room
from .seeding import child_rng, child_seed
from .training import TrainConfig, TrainResult, train_evaluator, train_transfer
from .transfer_model import (
    TransferHyper,
    TransferModel,
    TransferRender,
    load_transfer_model,
    save_transfer_model,
    transfer_waveform,
)

__all__ = [
    "AudioClip",
    "CANONICAL_RATE",
    "ConfigError",
    "DataError",
    "EvaluatorHyper",
    "EvaluatorModel",
    "GriffinLimResult",
    "LogSpectrogram",
    "MODEL_FRAMES",
    "ManifestError",
    "NumericError",
    "RoomIr",
    "RoomSpec",
    "RoomshiftError",
    "StftConfig",
    "TrainConfig",
    "TrainResult",
    "TransferHyper",
    "TransferModel",
    "TransferRender",
    "UnsupportedCodecError",
    "WavFormatError",
    "child_rng",
    "child_seed",
    "convolve",
    "evaluate_transfer",
    "fixed_log_spectrogram",
    "griffin_lim",
    "image_source_rir",
    "istft",
    "load_evaluator",
    "load_transfer_model",
    "log_magnitude",
    "measure_rt60",
    "minmax_loss",
    "noise_decay_rir",
    "read_spec1",
    "read_wav",
    "sabine_rt60",
    "sample_room",
    "save_evaluator",
    "save_transfer_model",
    "stft",
    "train_evaluator",
    "train_transfer",
    "transfer_waveform",
    "write_spec1",
    "write_wav",
    "__version__",
]
