"""WAV reading/writing and amplitude utilities.

Reads RIFF/WAVE PCM16 or IEEE float32 (any channel count, downmixed to
mono by arithmetic mean), writes mono float32. The canonical pipeline
sample rate is 16 kHz; readers accept any rate, pipeline entry points
reject non-canonical clips.

All operations are pure: they never mutate their input clip.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, UnsupportedCodecError, WavFormatError
from .fileio import atomic_write_bytes

CANONICAL_RATE = 16000

_FMT_PCM = 1
_FMT_IEEE_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


@dataclass
class AudioClip:
    """Mono waveform: float samples (nominal [-1, 1]) plus sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"clip samples must be 1-D, got shape {self.samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def _require_same_rate(*clips):
    rates = {c.sample_rate for c in clips}
    if len(rates) > 1:
        raise ValueError(f"sample rates differ: {sorted(rates)}")


def read_wav(path):
    """Read a PCM16 or float32 RIFF/WAVE file as a mono AudioClip.

    Multi-channel audio is averaged to mono; PCM16 is scaled by 1/32768.
    Raises FileNotFoundError, WavFormatError (broken container) or
    UnsupportedCodecError (valid WAV, unsupported encoding) distinctly.
    """
    with open(path, "rb") as fh:
        data = fh.read()

    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: fmt chunk truncated")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise WavFormatError(f"{path}: data chunk truncated")
            payload = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None or payload is None:
        raise WavFormatError(f"{path}: missing fmt/data chunk")

    audio_format, channels, sample_rate, _, block_align, bits = fmt
    if audio_format == _FMT_EXTENSIBLE:
        raise UnsupportedCodecError(f"{path}: WAVE_FORMAT_EXTENSIBLE not supported")
    if channels < 1:
        raise WavFormatError(f"{path}: channel count {channels}")

    if audio_format == _FMT_PCM and bits == 16:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % (2 * channels)], dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif audio_format == _FMT_IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % (4 * channels)], dtype="<f4")
        samples = raw.astype(np.float64)
    else:
        raise UnsupportedCodecError(
            f"{path}: unsupported codec (format={audio_format}, bits={bits}); need PCM16 or float32"
        )

    if channels > 1:
        samples = samples[: len(samples) - len(samples) % channels]
        samples = samples.reshape(-1, channels).mean(axis=1)
    return AudioClip(samples, sample_rate)


def write_wav(clip, path):
    """Write a clip as mono float32 WAV (atomic; nothing left behind on error)."""
    samples = np.asarray(clip.samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("refusing to write an empty clip")
    if not np.all(np.isfinite(samples)):
        raise NumericError(f"clip contains non-finite samples (writing {path})")

    payload = samples.astype("<f4").tobytes()
    n = len(payload)
    header = b"".join(
        [
            b"RIFF",
            struct.pack("<I", 4 + (8 + 16) + (8 + 4) + (8 + n)),
            b"WAVE",
            b"fmt ",
            struct.pack("<IHHIIHH", 16, _FMT_IEEE_FLOAT, 1, clip.sample_rate, clip.sample_rate * 4, 4, 32),
            b"fact",
            struct.pack("<II", 4, samples.size),
            b"data",
            struct.pack("<I", n),
        ]
    )
    atomic_write_bytes(path, header + payload)


def peak_normalize(clip, target_peak=1.0):
    """Scale so max |sample| equals target_peak (shape preserved)."""
    if not 0.0 < target_peak <= 1.0:
        raise ValueError(f"target_peak must be in (0, 1], got {target_peak}")
    peak = float(np.max(np.abs(clip.samples))) if clip.samples.size else 0.0
    if peak <= 0.0:
        raise ValueError("cannot normalize an all-zero clip")
    return AudioClip(clip.samples * (target_peak / peak), clip.sample_rate)


def random_gain(clip, rng, lo=0.1, hi=1.0):
    """Peak-normalize then scale by u ~ Uniform[lo, hi] drawn from `rng`."""
    if not 0.0 < lo <= hi <= 1.0:
        raise ValueError(f"need 0 < lo <= hi <= 1, got lo={lo}, hi={hi}")
    u = float(rng.uniform(lo, hi))
    return peak_normalize(clip, target_peak=u)


def require_finite(clip, what="clip"):
    if not np.all(np.isfinite(clip.samples)):
        raise NumericError(f"{what} contains non-finite samples")
    return clip
