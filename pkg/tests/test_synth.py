"""Dry signal generators."""

import numpy as np
import pytest

from roomshift.dsp import StftConfig, fixed_log_spectrogram
from roomshift.synth import SIGNAL_KINDS, SignalRecipe, chirp, draw_recipe, noise, pluck, tone

CFG = StftConfig()


def test_tone_concentrates_in_the_right_bin():
    spec = fixed_log_spectrogram(tone(440.0))
    # 440 Hz * 512 / 16000 = 14.08 -> bin 14 in every interior frame
    assert np.all(np.argmax(spec.grid[:, 10:290], axis=0) == 14)


def test_tone_harmonics_stop_below_nyquist():
    # 3000 Hz: partials at 3000 and 6000 fit, 9000 does not
    clip = tone(3000.0, harmonics=5)
    spectrum = np.abs(np.fft.rfft(clip.samples))
    freqs = np.fft.rfftfreq(len(clip.samples), 1.0 / 16000)
    strong = freqs[spectrum > spectrum.max() * 0.1]
    assert strong.max() < 6100.0


def test_generators_duration_and_peak():
    rng = np.random.default_rng(0)
    clips = [
        tone(440.0, duration=0.5),
        noise(duration=0.5, rng=rng),
        chirp(100.0, 4000.0, duration=0.5),
        pluck(440.0, duration=0.5, rng=rng),
    ]
    for clip in clips:
        assert len(clip.samples) == 8000
        assert np.max(np.abs(clip.samples)) == pytest.approx(1.0)


def test_noise_lowpass_zeroes_the_stopband():
    clip = noise(duration=1.0, rng=np.random.default_rng(1), lowpass_hz=2000.0)
    spectrum = np.abs(np.fft.rfft(clip.samples))
    freqs = np.fft.rfftfreq(len(clip.samples), 1.0 / 16000)
    passband_floor = spectrum[(freqs > 100) & (freqs < 1900)].mean()
    assert spectrum[freqs > 2100].max() < 1e-9 * passband_floor


def test_stochastic_kinds_are_seed_deterministic():
    a = noise(rng=np.random.default_rng(7))
    b = noise(rng=np.random.default_rng(7))
    assert np.array_equal(a.samples, b.samples)
    a = pluck(220.0, rng=np.random.default_rng(7))
    b = pluck(220.0, rng=np.random.default_rng(7))
    assert np.array_equal(a.samples, b.samples)


def test_stochastic_kinds_require_rng():
    with pytest.raises(ValueError):
        noise()
    with pytest.raises(ValueError):
        pluck(220.0)


def test_pluck_pitch_lands_near_target():
    clip = pluck(200.0, duration=1.0, rng=np.random.default_rng(3))
    spectrum = np.abs(np.fft.rfft(clip.samples[4000:]))
    freqs = np.fft.rfftfreq(len(clip.samples) - 4000, 1.0 / 16000)
    assert abs(freqs[np.argmax(spectrum)] - 200.0) < 10.0


def test_frequency_bounds_validated():
    for bad in (0.0, 8000.0, -100.0):
        with pytest.raises(ValueError):
            tone(bad)
    with pytest.raises(ValueError):
        chirp(100.0, 9000.0)
    with pytest.raises(ValueError):
        tone(440.0, duration=0.0)


def test_recipe_render_matches_direct_call():
    recipe = SignalRecipe("tone", (440.0, 3.0))
    a = recipe.render(np.random.default_rng(0))
    assert np.array_equal(a.samples, tone(440.0, harmonics=3).samples)
    recipe = SignalRecipe("pluck", (330.0,))
    a = recipe.render(np.random.default_rng(5))
    assert np.array_equal(a.samples, pluck(330.0, rng=np.random.default_rng(5)).samples)
    with pytest.raises(ValueError):
        SignalRecipe("organ", ()).render(np.random.default_rng(0))


def test_draw_recipe_covers_kinds_within_ranges():
    rng = np.random.default_rng(11)
    seen = set()
    for _ in range(400):
        recipe = draw_recipe(rng)
        seen.add(recipe.kind)
        if recipe.kind == "tone":
            freq, harmonics = recipe.params
            assert 80.0 <= freq <= 2000.0 and 1 <= harmonics <= 8
        elif recipe.kind == "noise":
            assert 1000.0 <= recipe.params[0] <= 7500.0
        elif recipe.kind == "chirp":
            f0, f1 = recipe.params
            assert 50.0 <= f0 <= 1000.0 and f0 * 1.5 <= f1 <= 7000.0
        else:
            assert 80.0 <= recipe.params[0] <= 1200.0
        recipe.render(rng, duration=0.05)  # every draw is renderable
    assert seen == set(SIGNAL_KINDS)
