# hierflow
# This module is used to extract and invert the audio features of hierflow and to compute its objective metrics.
#
# This module is capable of:
# [X] Log-mel spectrograms (16 kHz, hop 320, window 1280, 80 HTK mel bins 0-8000 Hz, centred STFT)
# [X] Frame energy (L2 norm over the mel bins)
# [X] YIN pitch estimation aligned to the mel frames and pitch standardization
# [X] Griffin-Lim inversion through the pseudo-inverse of the mel filterbank
# [X] WAV (PCM 16-bit mono) and CSV import/export
# [X] Metrics: RMSE of F0 over mutually voiced frames, MAE of energy, cosine similarity

import librosa
import numpy as np
import soundfile

import lib.logging_helper as logging_helper
from lib.class_helper import (
    HOP_LENGTH,
    N_MELS,
    SAMPLE_RATE,
    WIN_LENGTH,
    ConfigurationError,
    CorpusError,
    DimensionError,
    MelSpectrogram,
    ProsodyContours,
    ValidationError,
    Waveform,
)
from lib.generic_helper import read_csv, write_csv

mlog = logging_helper.Log("components.audio_signal")

LOG_FLOOR = 1e-5
FMIN = 0.0
FMAX = 8000.0
PITCH_FMIN = 60.0
PITCH_FMAX = 500.0
YIN_THRESHOLD = 0.15
MEL_COLUMNS = [f"mel_{k}" for k in range(N_MELS)]

_FILTERBANK = None
_FILTERBANK_PINV = None


def mel_filterbank():
    """Returns the 80 x 641 HTK mel filterbank (triangles with unit peak)."""
    global _FILTERBANK, _FILTERBANK_PINV
    if _FILTERBANK is None:
        _FILTERBANK = librosa.filters.mel(
            sr=SAMPLE_RATE, n_fft=WIN_LENGTH, n_mels=N_MELS, fmin=FMIN, fmax=FMAX, htk=True, norm=None, dtype=np.float64
        )
        _FILTERBANK_PINV = np.linalg.pinv(_FILTERBANK)
    return _FILTERBANK


def mel_center_frequencies():
    """Center frequency in Hz of every mel filter."""
    return librosa.mel_frequencies(n_mels=N_MELS + 2, fmin=FMIN, fmax=FMAX, htk=True)[1:-1]


def frame_count(n_samples):
    """Number of mel frames of a waveform with n_samples samples (centred STFT)."""
    return n_samples // HOP_LENGTH + 1


def _check_rate(w: Waveform):
    if w.sample_rate != SAMPLE_RATE:
        raise ValidationError(f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate} Hz (resampling is not supported)")


def _magnitude(samples):
    spectrum = librosa.stft(
        samples,
        n_fft=WIN_LENGTH,
        hop_length=HOP_LENGTH,
        win_length=WIN_LENGTH,
        window="hann",
        center=True,
        pad_mode="reflect",
    )
    return np.abs(spectrum)


def log_mel(w: Waveform) -> MelSpectrogram:
    """Computes the log-mel spectrogram of a 16 kHz waveform.

    Args:
        w (Waveform): The audio

    Returns:
        MelSpectrogram: floor(N / 320) + 1 frames of log(max(mel, 1e-5))
    """
    _check_rate(w)
    mel = mel_filterbank() @ _magnitude(w.samples)
    frames = np.log(np.maximum(mel, LOG_FLOOR)).T
    return MelSpectrogram(np.ascontiguousarray(frames))


def energy(m):
    """Frequency-wise L2 norm of every frame of a mel-spectrogram (MelSpectrogram or T x 80 array)."""
    frames = m.frames if isinstance(m, MelSpectrogram) else np.asarray(m, dtype=np.float64)
    return np.sqrt(np.sum(frames**2, axis=-1))


############################################
#### Pitch ####
############################################


def _analysis_frames(samples, n_frames):
    """Cuts one 1280 sample frame per mel frame, centred on t * hop and shifted inward at the clip edges."""
    if len(samples) < WIN_LENGTH:
        samples = np.pad(samples, (0, WIN_LENGTH - len(samples)))
    starts = np.clip(np.arange(n_frames) * HOP_LENGTH - WIN_LENGTH // 2, 0, len(samples) - WIN_LENGTH)
    index = starts[:, None] + np.arange(WIN_LENGTH)[None, :]
    return samples[index]


def _cmnd(frames, tau_max):
    """Cumulative mean normalized difference function of every frame for lags 0..tau_max."""
    width = WIN_LENGTH - tau_max
    diff = np.zeros((frames.shape[0], tau_max + 1))
    head = frames[:, :width]
    for tau in range(1, tau_max + 1):
        diff[:, tau] = np.sum((head - frames[:, tau : tau + width]) ** 2, axis=1)
    cumulative = np.cumsum(diff[:, 1:], axis=1)
    cmnd = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        normalized = diff[:, 1:] * np.arange(1, tau_max + 1) / cumulative
    cmnd[:, 1:] = np.where(cumulative > 0, normalized, 1.0)
    return cmnd


def estimate_pitch(w: Waveform, n_frames=None):
    """YIN pitch estimation with one estimate per mel frame.

    Args:
        w (Waveform): The 16 kHz audio
        n_frames (int): Number of frames (default: the mel frame count of w)

    Returns:
        tuple: (f0_hz, voicing) with f0 = 0 on unvoiced frames
    """
    _check_rate(w)
    n_frames = frame_count(len(w)) if n_frames is None else n_frames
    tau_min = int(np.floor(SAMPLE_RATE / PITCH_FMAX))
    tau_max = int(np.ceil(SAMPLE_RATE / PITCH_FMIN))
    cmnd = _cmnd(_analysis_frames(w.samples, n_frames), tau_max)

    f0 = np.zeros(n_frames)
    voicing = np.zeros(n_frames, dtype=bool)
    for t in range(n_frames):
        below = np.nonzero(cmnd[t, tau_min:tau_max] < YIN_THRESHOLD)[0]
        if len(below) == 0:
            continue
        tau = tau_min + below[0]
        while tau + 1 < tau_max and cmnd[t, tau + 1] < cmnd[t, tau]:
            tau += 1
        a, b, c = cmnd[t, tau - 1], cmnd[t, tau], cmnd[t, tau + 1]
        curvature = a - 2.0 * b + c
        shift = 0.5 * (a - c) / curvature if curvature > 0 else 0.0
        frequency = SAMPLE_RATE / (tau + shift)
        if PITCH_FMIN <= frequency <= PITCH_FMAX:
            f0[t] = frequency
            voicing[t] = True
    return f0, voicing


def standardize_pitch(f0, voicing):
    """Standardizes F0 to zero mean and unit (population) variance over the voiced frames.

    Unvoiced frames are 0. Degenerate sequences (constant, or fewer than 2 voiced frames) map to 0.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    voicing = np.asarray(voicing, dtype=bool)
    if f0.shape != voicing.shape:
        raise DimensionError("f0 and voicing need the same length")
    out = np.zeros_like(f0)
    voiced = f0[voicing]
    if len(voiced) < 2:
        return out
    std = voiced.std()
    if std < 1e-12:
        return out
    out[voicing] = (voiced - voiced.mean()) / std
    return out


def prosody_contours(w: Waveform, m: MelSpectrogram = None):
    """Pitch, voicing and energy of a waveform at the frame rate of its mel-spectrogram."""
    m = log_mel(w) if m is None else m
    f0, voicing = estimate_pitch(w, n_frames=m.n_frames)
    return ProsodyContours(standardize_pitch(f0, voicing), voicing, energy(m), f0_hz=f0)


############################################
#### Inversion ####
############################################


def griffin_lim(m: MelSpectrogram, iters=60):
    """Inverts a log-mel spectrogram to audio.

    The linear magnitude is the pseudo-inverse of the filterbank applied to exp(mel), clamped at 0. Phase is
    recovered by Griffin-Lim starting from zero phase.

    Args:
        m (MelSpectrogram): The log-mel spectrogram
        iters (int): Griffin-Lim iterations

    Returns:
        Waveform: (T - 1) * 320 samples, so re-extraction yields T frames again
    """
    if iters < 1:
        raise ConfigurationError(f"griffin_lim needs iters >= 1, got {iters}")
    mel_filterbank()
    magnitude = np.maximum(_FILTERBANK_PINV @ np.exp(m.frames.T), 0.0)
    samples = librosa.griffinlim(
        magnitude,
        n_iter=iters,
        hop_length=HOP_LENGTH,
        win_length=WIN_LENGTH,
        n_fft=WIN_LENGTH,
        window="hann",
        center=True,
        pad_mode="reflect",
        momentum=0.0,
        init=None,
        length=(m.n_frames - 1) * HOP_LENGTH,
    )
    return Waveform(samples)


def mel_error(a: MelSpectrogram, b: MelSpectrogram):
    """L2 distance between two log-mel spectrograms of the same shape."""
    if a.frames.shape != b.frames.shape:
        raise DimensionError(f"mel shapes {a.frames.shape} and {b.frames.shape} differ")
    return float(np.linalg.norm(a.frames - b.frames))


############################################
#### Files ####
############################################


def write_wav(path, w: Waveform):
    """Writes PCM 16-bit mono WAV (samples are clipped to [-1, 1])."""
    try:
        soundfile.write(path, np.clip(w.samples, -1.0, 1.0), w.sample_rate, subtype="PCM_16")
    except (OSError, RuntimeError) as e:
        raise CorpusError(f"Could not write {path}: {e}") from e


def read_wav(path) -> Waveform:
    try:
        samples, rate = soundfile.read(path, dtype="float64")
    except (OSError, RuntimeError) as e:
        raise CorpusError(f"Could not read {path}: {e}") from e
    if samples.ndim != 1:
        raise ValidationError(f"{path} is not mono")
    return Waveform(samples, rate)


def write_mel_csv(path, m: MelSpectrogram):
    write_csv(path, m.frames, columns=MEL_COLUMNS)


def read_mel_csv(path) -> MelSpectrogram:
    frame = read_csv(path)
    if list(frame.columns) != MEL_COLUMNS:
        raise ValidationError(f"{path} is not a mel CSV")
    return MelSpectrogram(frame.to_numpy(dtype=np.float64))


def write_contours_csv(path, contours: ProsodyContours):
    rows = {"pitch": contours.pitch, "voicing": contours.voicing.astype(int), "energy": contours.energy}
    if contours.f0_hz is not None:
        rows["f0_hz"] = contours.f0_hz
    write_csv(path, rows)


############################################
#### Metrics ####
############################################


def rmse_f0(a, b):
    """RMSE between two raw F0 sequences (Hz, 0 = unvoiced) over the frames voiced in both. None if there is none."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"F0 sequences of length {len(a)} and {len(b)} differ")
    voiced = (a > 0) & (b > 0)
    if not voiced.any():
        return None
    return float(np.sqrt(np.mean((a[voiced] - b[voiced]) ** 2)))


def mae_energy(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"energy sequences of length {len(a)} and {len(b)} differ")
    return float(np.mean(np.abs(a - b)))


def cosine_sim(a, b):
    """Cosine similarity in [-1, 1]. None if one of the vectors is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError("vectors need the same length")
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        return None
    return float(np.clip(np.dot(a, b) / norm, -1.0, 1.0))
