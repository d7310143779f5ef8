"""Time-frequency analysis/synthesis, FFT convolution, Griffin-Lim, min-max loss.

Everything here runs in float64; the neural side casts down to float32 at
its own boundary. All functions are pure, so they are safe to call from
any number of threads at once.

The log-magnitude layer is what justifies residual learning: convolving a
signal with a time-invariant kernel multiplies STFT magnitudes, which in
the log domain is an additive shift. The tests pin that identity exactly
for delta-like kernels (for full reverberant kernels it is a cross-frame
approximation, not an identity, and is not asserted).
"""

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .audio_io import AudioClip
from .errors import DataError
from .fileio import atomic_write_bytes

MODEL_FRAMES = 300  # time steps for one 3 s analysis window at defaults


@lru_cache(maxsize=8)
def _hann(fft_size):
    # periodic Hann; w[0] = 0, which the overlap-add normalization tolerates
    n = np.arange(fft_size)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / fft_size)


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 512
    hop: int = 160
    sample_rate: int = 16000
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.hop <= 0 or self.fft_size <= 0:
            raise ValueError(f"fft_size/hop must be positive, got {self.fft_size}/{self.hop}")
        if self.hop > self.fft_size // 2:
            raise ValueError(f"hop {self.hop} > fft_size/2 breaks the reconstruction guarantee")
        if self.log_floor <= 0.0:
            raise ValueError("log_floor must be positive")

    @property
    def bins(self):
        return self.fft_size // 2 + 1

    @property
    def window(self):
        return _hann(self.fft_size)

    def fixed_length(self, frames=MODEL_FRAMES):
        """Sample count that yields exactly `frames` STFT frames."""
        return (frames - 1) * self.hop + self.fft_size


@dataclass
class ComplexSpectrogram:
    grid: np.ndarray  # (bins, frames) complex
    config: StftConfig

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.complex128)
        if self.grid.ndim != 2 or self.grid.shape[0] != self.config.bins or self.grid.shape[1] < 1:
            raise ValueError(f"bad complex grid shape {self.grid.shape} for bins={self.config.bins}")


@dataclass
class LogSpectrogram:
    grid: np.ndarray  # (bins, frames) natural-log magnitude
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2 or self.grid.shape[0] != self.config.bins:
            raise ValueError(f"bad log grid shape {self.grid.shape} for bins={self.config.bins}")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("log spectrogram contains non-finite entries")

    @property
    def shape(self):
        return self.grid.shape


def stft(clip, cfg=StftConfig()):
    """Hann-windowed one-sided STFT; frame k covers samples [k*hop, k*hop+fft_size)."""
    x = np.asarray(clip.samples, dtype=np.float64)
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f"clip rate {clip.sample_rate} != config rate {cfg.sample_rate}")
    if len(x) < cfg.fft_size:
        raise ValueError(f"clip too short for analysis: {len(x)} < fft_size {cfg.fft_size}")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.fft_size)[:: cfg.hop]
    grid = np.fft.rfft(frames * cfg.window, axis=1).T
    return ComplexSpectrogram(grid, cfg)


def istft(spec):
    """Weighted overlap-add inverse with squared-window normalization.

    This is the least-squares signal estimate for the given grid, which is
    what makes the Griffin-Lim error sequence non-increasing.
    """
    cfg = spec.config
    frames = np.fft.irfft(spec.grid.T, n=cfg.fft_size, axis=1)
    n_frames = frames.shape[0]
    length = (n_frames - 1) * cfg.hop + cfg.fft_size
    out = np.zeros(length)
    wsum = np.zeros(length)
    w = cfg.window
    ww = w * w
    for k in range(n_frames):
        lo = k * cfg.hop
        out[lo : lo + cfg.fft_size] += frames[k] * w
        wsum[lo : lo + cfg.fft_size] += ww
    # interior window-sum is bounded away from zero at any legal hop
    assert wsum[cfg.fft_size : length - cfg.fft_size].min(initial=np.inf) > 1e-8
    nonzero = wsum > 1e-12
    out[nonzero] /= wsum[nonzero]
    return AudioClip(out, cfg.sample_rate)


def log_magnitude(spec):
    """Natural-log magnitude with floor: entry = ln(max(|value|, log_floor))."""
    cfg = spec.config
    return LogSpectrogram(np.log(np.maximum(np.abs(spec.grid), cfg.log_floor)), cfg)


def frame_fixed(clip, cfg=StftConfig(), frames=MODEL_FRAMES):
    """Cut or zero-pad the clip so its STFT has exactly `frames` frames."""
    need = cfg.fixed_length(frames)
    x = np.asarray(clip.samples, dtype=np.float64)
    if len(x) >= need:
        x = x[:need]
    else:
        x = np.concatenate([x, np.zeros(need - len(x))])
    return AudioClip(x, clip.sample_rate)


def fixed_log_spectrogram(clip, cfg=StftConfig(), frames=MODEL_FRAMES):
    """257 x 300 (at defaults) log-magnitude grid of the fixed-length framing."""
    return log_magnitude(stft(frame_fixed(clip, cfg, frames), cfg))


@dataclass
class GriffinLimResult:
    clip: AudioClip
    convergence: np.ndarray  # spectral-convergence error per iteration


def griffin_lim(mag, iterations=60):
    """Reconstruct a waveform from a log-magnitude grid.

    Starts at zero phase, then alternates signal-consistency (istft/stft)
    and magnitude-replacement projections. Per-iteration spectral
    convergence ||  |S_est| - M ||_F / ||M||_F is recorded.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    cfg = mag.config
    target = np.exp(mag.grid)
    target_norm = np.linalg.norm(target)
    spec = ComplexSpectrogram(target.astype(np.complex128), cfg)
    errors = np.empty(iterations)
    for i in range(iterations):
        clip = istft(spec)
        estimate = stft(clip, cfg)
        est_mag = np.abs(estimate.grid)
        errors[i] = np.linalg.norm(est_mag - target) / target_norm
        phase = estimate.grid / np.maximum(est_mag, 1e-300)
        spec = ComplexSpectrogram(target * phase, cfg)
    return GriffinLimResult(istft(spec), errors)


def convolve(x, h, block=4096):
    """Full linear convolution via uniformly partitioned overlap-add FFT.

    Both the input and the kernel are split into `block`-sample chunks,
    transformed at 2*block points, and multiplied/accumulated per delay
    diagonal, so arbitrarily long reverb kernels cost O(N log block).
    Output length is len(x) + len(h) - 1.
    """
    if x.sample_rate != h.sample_rate:
        raise ValueError(f"sample rates differ: {x.sample_rate} vs {h.sample_rate}")
    a = np.asarray(x.samples, dtype=np.float64)
    b = np.asarray(h.samples, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("convolution inputs must be non-empty")

    out_len = a.size + b.size - 1
    nfft = 2 * block
    n_a = -(-a.size // block)
    n_b = -(-b.size // block)
    a_pad = np.zeros(n_a * block)
    a_pad[: a.size] = a
    b_pad = np.zeros(n_b * block)
    b_pad[: b.size] = b
    A = np.fft.rfft(a_pad.reshape(n_a, block), n=nfft, axis=1)
    B = np.fft.rfft(b_pad.reshape(n_b, block), n=nfft, axis=1)

    diags = np.zeros((n_a + n_b - 1, A.shape[1]), dtype=np.complex128)
    for p in range(n_b):
        diags[p : p + n_a] += A * B[p]
    segments = np.fft.irfft(diags, n=nfft, axis=1)

    y = np.zeros((n_a + n_b - 1) * block + block)
    for d in range(segments.shape[0]):
        y[d * block : d * block + nfft] += segments[d]
    return AudioClip(y[:out_len], x.sample_rate)


def minmax_loss(target, predicted):
    """Sum over time frames of the per-frame max |deviation| over frequency."""
    if target.grid.shape != predicted.grid.shape:
        raise ValueError(f"shape mismatch: {target.grid.shape} vs {predicted.grid.shape}")
    return float(np.abs(target.grid - predicted.grid).max(axis=0).sum())


# --- SPEC1 container ------------------------------------------------------
#
# magic "SPEC", version u8=1, u32 bins, u32 frames, u32 sample_rate, u32 hop,
# then bin-major float32 little-endian payload.

_SPEC1_MAGIC = b"SPEC"
_SPEC1_HEADER = struct.Struct("<4sBIIII")


def write_spec1(spec, path):
    bins, frames = spec.grid.shape
    header = _SPEC1_HEADER.pack(_SPEC1_MAGIC, 1, bins, frames, spec.config.sample_rate, spec.config.hop)
    atomic_write_bytes(path, header + spec.grid.astype("<f4").tobytes())


def read_spec1(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _SPEC1_HEADER.size:
        raise DataError(f"{path}: truncated SPEC1 header")
    magic, version, bins, frames, sample_rate, hop = _SPEC1_HEADER.unpack_from(blob, 0)
    if magic != _SPEC1_MAGIC:
        raise DataError(f"{path}: bad SPEC1 magic {magic!r}")
    if version != 1:
        raise DataError(f"{path}: unsupported SPEC1 version {version}")
    payload = blob[_SPEC1_HEADER.size :]
    if len(payload) != bins * frames * 4:
        raise DataError(f"{path}: SPEC1 payload size {len(payload)} != {bins}x{frames} float32")
    grid = np.frombuffer(payload, dtype="<f4").reshape(bins, frames)
    cfg = StftConfig(fft_size=(bins - 1) * 2, hop=hop, sample_rate=sample_rate)
    return LogSpectrogram(grid.astype(np.float64), cfg)


def stft_to_dict(cfg):
    return {"fft_size": cfg.fft_size, "hop": cfg.hop, "sample_rate": cfg.sample_rate, "log_floor": cfg.log_floor}


def stft_from_dict(d):
    return StftConfig(fft_size=d["fft_size"], hop=d["hop"], sample_rate=d["sample_rate"], log_floor=d["log_floor"])
