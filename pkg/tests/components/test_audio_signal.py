# hierflow
# This test module is used to test the feature extraction, pitch estimation, inversion and metrics of audio_signal.

import os

import numpy as np
import pytest

from components import audio_signal
from lib.class_helper import N_MELS, SAMPLE_RATE, ConfigurationError, CorpusError, DimensionError, MelSpectrogram, ValidationError, Waveform


def sine(frequency, seconds=0.5, amplitude=0.5):
    t = np.arange(int(seconds * SAMPLE_RATE)) / SAMPLE_RATE
    return Waveform(amplitude * np.sin(2 * np.pi * frequency * t))


def test_log_mel_shape_and_floor():
    silence = Waveform(np.zeros(SAMPLE_RATE))
    mel = audio_signal.log_mel(silence)
    assert mel.frames.shape == (51, N_MELS), "One second has floor(16000 / 320) + 1 frames"
    assert audio_signal.frame_count(SAMPLE_RATE) == 51
    assert np.allclose(mel.frames, np.log(audio_signal.LOG_FLOOR)), "Silence has to sit on the log floor"

    with pytest.raises(ValidationError):
        audio_signal.log_mel(Waveform(np.zeros(8000), sample_rate=8000))


def test_log_mel_peak_follows_the_tone():
    mel = audio_signal.log_mel(sine(1000.0))
    peak = np.argmax(mel.frames[5:-5].mean(axis=0))
    centers = audio_signal.mel_center_frequencies()
    assert abs(centers[peak] - 1000.0) < 80.0, f"Peak at {centers[peak]} Hz for a 1 kHz tone"
    assert audio_signal.mel_filterbank().shape == (N_MELS, 641)


def test_energy():
    frames = np.zeros((2, N_MELS))
    frames[0, :2] = [3.0, 4.0]
    assert np.allclose(audio_signal.energy(frames), [5.0, 0.0])
    assert np.allclose(audio_signal.energy(MelSpectrogram(frames)), [5.0, 0.0])
    assert audio_signal.energy(np.ones((1, N_MELS)))[0] == pytest.approx(np.sqrt(80.0), abs=1e-9)


def test_estimate_pitch():
    """A 200 Hz tone is voiced everywhere at 200 Hz, silence is unvoiced."""
    f0, voicing = audio_signal.estimate_pitch(sine(200.0))
    assert len(f0) == audio_signal.frame_count(SAMPLE_RATE // 2)
    assert voicing.all(), "A clean tone has to be voiced"
    assert np.allclose(f0, 200.0, atol=2.0), f"Estimated {f0.min()} - {f0.max()} Hz for a 200 Hz tone"

    f0, voicing = audio_signal.estimate_pitch(Waveform(np.zeros(SAMPLE_RATE // 2)), n_frames=10)
    assert len(f0) == 10 and not voicing.any() and np.all(f0 == 0.0)


def test_estimate_pitch_tracks_220_hz():
    f0, voicing = audio_signal.estimate_pitch(sine(220.0))
    assert voicing.any()
    assert np.all(np.abs(f0[voicing] - 220.0) <= 3.0), f"Estimated {f0[voicing].min()} - {f0[voicing].max()} Hz for 220 Hz"


def test_white_noise_is_mostly_unvoiced():
    noise = Waveform(0.3 * np.random.default_rng(0).standard_normal(SAMPLE_RATE))
    _, voicing = audio_signal.estimate_pitch(noise)
    assert voicing.mean() < 0.5, f"{voicing.mean():.0%} of the white noise frames are voiced"


def test_standardize_pitch():
    f0 = np.array([100.0, 200.0, 0.0, 300.0])
    voicing = f0 > 0
    pitch = audio_signal.standardize_pitch(f0, voicing)
    assert np.allclose(pitch, [-1.224744871, 0.0, 0.0, 1.224744871])
    assert np.all(audio_signal.standardize_pitch(np.full(4, 150.0), np.ones(4, dtype=bool)) == 0.0)
    assert np.all(audio_signal.standardize_pitch(np.array([0.0, 120.0]), np.array([False, True])) == 0.0)
    with pytest.raises(DimensionError):
        audio_signal.standardize_pitch(f0, voicing[:2])


def test_prosody_contours():
    contours = audio_signal.prosody_contours(sine(150.0))
    assert len(contours.pitch) == len(contours.energy) == audio_signal.frame_count(SAMPLE_RATE // 2)
    assert contours.voicing.all()
    assert np.all(contours.energy >= 0)


def test_griffin_lim_round_trip():
    mel = audio_signal.log_mel(sine(440.0))
    audio = audio_signal.griffin_lim(mel, iters=30)
    assert len(audio) == (mel.n_frames - 1) * 320
    again = audio_signal.log_mel(audio)
    assert again.n_frames == mel.n_frames, "Re-extraction has to give the same number of frames"
    peak = np.argmax(mel.frames[5:-5].mean(axis=0))
    peak_again = np.argmax(again.frames[5:-5].mean(axis=0))
    assert abs(int(peak) - int(peak_again)) <= 1, "The round trip moved the spectral peak"
    assert audio_signal.mel_error(mel, mel) == 0.0

    with pytest.raises(ConfigurationError):
        audio_signal.griffin_lim(mel, iters=0)
    with pytest.raises(DimensionError):
        audio_signal.mel_error(mel, mel.trimmed(3))


def test_griffin_lim_improves_with_iterations(tiny_corpus):
    """Re-extracting the inverted mel of a corpus sample gets closer to it with 60 iterations than with 1."""
    samples, _, _ = tiny_corpus
    mel = samples[0].mel
    errors = {}
    for iters in [1, 60]:
        again = audio_signal.log_mel(audio_signal.griffin_lim(mel, iters=iters))
        errors[iters] = audio_signal.mel_error(again, mel)
    assert errors[60] <= errors[1], f"Error after 60 iterations {errors[60]}, after 1 {errors[1]}"


def test_griffin_lim_of_the_floor_is_near_silent():
    floor = MelSpectrogram(np.full((20, N_MELS), np.log(audio_signal.LOG_FLOOR)))
    audio = audio_signal.griffin_lim(floor, iters=10)
    assert np.max(np.abs(audio.samples)) < 1e-2


def test_files(tmp_path):
    wave = sine(300.0, seconds=0.1)
    path = os.path.join(str(tmp_path), "tone.wav")
    audio_signal.write_wav(path, wave)
    loaded = audio_signal.read_wav(path)
    assert loaded.sample_rate == SAMPLE_RATE and len(loaded) == len(wave)
    assert np.max(np.abs(loaded.samples - wave.samples)) < 1e-4, "PCM 16 quantization error too large"
    with pytest.raises(CorpusError):
        audio_signal.read_wav(os.path.join(str(tmp_path), "missing.wav"))

    mel = audio_signal.log_mel(wave)
    mel_path = os.path.join(str(tmp_path), "mel.csv")
    audio_signal.write_mel_csv(mel_path, mel)
    assert np.allclose(audio_signal.read_mel_csv(mel_path).frames, mel.frames, rtol=1e-8)

    contours_path = os.path.join(str(tmp_path), "contours.csv")
    audio_signal.write_contours_csv(contours_path, audio_signal.prosody_contours(wave, mel))
    assert os.path.isfile(contours_path)


def test_metrics():
    assert audio_signal.rmse_f0([100.0, 0.0, 200.0], [110.0, 150.0, 0.0]) == pytest.approx(10.0)
    assert audio_signal.rmse_f0([0.0, 100.0], [100.0, 0.0]) is None, "No mutually voiced frame means absent"
    assert audio_signal.mae_energy([1.0, 2.0], [2.0, 2.0]) == pytest.approx(0.5)
    with pytest.raises(DimensionError):
        audio_signal.mae_energy([1.0], [1.0, 2.0])
    assert audio_signal.cosine_sim([1.0, 2.0], [2.0, 4.0]) == pytest.approx(1.0)
    assert audio_signal.cosine_sim([1.0, 0.0], [-1.0, 0.0]) == pytest.approx(-1.0)
    assert audio_signal.cosine_sim([0.0, 0.0], [1.0, 0.0]) is None
