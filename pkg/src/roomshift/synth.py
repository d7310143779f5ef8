"""Deterministic dry test signals.

All generators run at the canonical 16 kHz rate and return peak-normalized
AudioClips. Content is parameterized by an RNG so a seeded corpus is fully
reproducible without shipping audio files.
"""

import math
from dataclasses import dataclass

import numpy as np

from .audio_io import CANONICAL_RATE, AudioClip, peak_normalize

DEFAULT_DURATION = 3.0
SIGNAL_KINDS = ("tone", "noise", "chirp", "pluck")


def _time_axis(duration, fs):
    n = int(round(duration * fs))
    if n <= 0:
        raise ValueError(f"duration {duration} too short at fs {fs}")
    return np.arange(n) / fs


def tone(freq, duration=DEFAULT_DURATION, fs=CANONICAL_RATE, harmonics=1):
    """Sum of `harmonics` partials at multiples of freq, 1/k amplitude rolloff."""
    if not 0 < freq < fs / 2:
        raise ValueError(f"freq {freq} outside (0, {fs / 2})")
    t = _time_axis(duration, fs)
    x = np.zeros_like(t)
    for k in range(1, harmonics + 1):
        fk = freq * k
        if fk >= fs / 2:
            break
        x += np.sin(2.0 * math.pi * fk * t) / k
    return peak_normalize(AudioClip(x, fs))


def noise(duration=DEFAULT_DURATION, fs=CANONICAL_RATE, rng=None, lowpass_hz=None):
    """White Gaussian noise, optionally brick-wall lowpassed in the DFT domain."""
    if rng is None:
        raise ValueError("noise() needs an explicit rng for reproducibility")
    t = _time_axis(duration, fs)
    x = rng.standard_normal(len(t))
    if lowpass_hz is not None:
        spectrum = np.fft.rfft(x)
        cutoff_bin = int(lowpass_hz * len(x) / fs)
        spectrum[cutoff_bin + 1 :] = 0.0
        x = np.fft.irfft(spectrum, n=len(x))
    return peak_normalize(AudioClip(x, fs))


def chirp(f0, f1, duration=DEFAULT_DURATION, fs=CANONICAL_RATE):
    """Linear sweep from f0 to f1 Hz."""
    for f in (f0, f1):
        if not 0 < f < fs / 2:
            raise ValueError(f"chirp endpoint {f} outside (0, {fs / 2})")
    t = _time_axis(duration, fs)
    phase = 2.0 * math.pi * (f0 * t + 0.5 * (f1 - f0) * t * t / duration)
    return peak_normalize(AudioClip(np.sin(phase), fs))


def pluck(freq, duration=DEFAULT_DURATION, fs=CANONICAL_RATE, rng=None, decay=0.996):
    """Karplus-Strong plucked string: noise burst through a decaying feedback loop."""
    if rng is None:
        raise ValueError("pluck() needs an explicit rng for reproducibility")
    if not 0 < freq < fs / 2:
        raise ValueError(f"freq {freq} outside (0, {fs / 2})")
    n = int(round(duration * fs))
    period = max(2, int(round(fs / freq)))
    buf = rng.uniform(-1.0, 1.0, size=period)
    x = np.empty(n)
    idx = 0
    for i in range(n):
        x[i] = buf[idx]
        nxt = (idx + 1) % period
        buf[idx] = decay * 0.5 * (buf[idx] + buf[nxt])
        idx = nxt
    return peak_normalize(AudioClip(x, fs))


@dataclass(frozen=True)
class SignalRecipe:
    kind: str  # one of SIGNAL_KINDS
    params: tuple  # kind-specific scalars, fixed at draw time

    def render(self, rng, duration=DEFAULT_DURATION, fs=CANONICAL_RATE):
        """Render to audio. `rng` drives the stochastic kinds (noise, pluck)."""
        if self.kind == "tone":
            freq, harmonics = self.params
            return tone(freq, duration, fs, harmonics=int(harmonics))
        if self.kind == "noise":
            (lowpass_hz,) = self.params
            return noise(duration, fs, rng=rng, lowpass_hz=lowpass_hz)
        if self.kind == "chirp":
            f0, f1 = self.params
            return chirp(f0, f1, duration, fs)
        if self.kind == "pluck":
            (freq,) = self.params
            return pluck(freq, duration, fs, rng=rng)
        raise ValueError(f"unknown signal kind {self.kind!r}")


def draw_recipe(rng):
    """Sample one SignalRecipe, uniform over the four kinds."""
    kind = SIGNAL_KINDS[int(rng.integers(len(SIGNAL_KINDS)))]
    if kind == "tone":
        return SignalRecipe("tone", (float(rng.uniform(80.0, 2000.0)), float(rng.integers(1, 9))))
    if kind == "noise":
        return SignalRecipe("noise", (float(rng.uniform(1000.0, 7500.0)),))
    if kind == "chirp":
        f0 = float(rng.uniform(50.0, 1000.0))
        f1 = float(rng.uniform(f0 * 1.5, 7000.0))
        return SignalRecipe("chirp", (f0, f1))
    return SignalRecipe("pluck", (float(rng.uniform(80.0, 1200.0)),))
