# hierflow
# This module is a helper module that provides the important classes of the hierflow project:
# the exception hierarchy, the audio/corpus data types, the configuration types and the report rows.

import json
import math
from typing import List, Optional

import numpy as np

SAMPLE_RATE = 16000  # Canonical sample rate of every waveform
HOP_LENGTH = 320  # Mel hop size in samples (50 frames per second)
WIN_LENGTH = 1280  # Mel window size in samples
N_MELS = 80  # Number of mel bins
VIDEO_FPS = 25
SAMPLES_PER_VIDEO_FRAME = SAMPLE_RATE // VIDEO_FPS  # 640 samples, i.e. two mel hops

ENCODER_FLAGS = ["hier", "timbre_stage", "prosody_stage", "face_id", "expr", "weighted_sum", "masked_pred"]


###############################################################################
# Exceptions
###############################################################################


class HierflowError(Exception):
    """Base class of every error raised by hierflow."""


class ConfigurationError(HierflowError, ValueError):
    """An invalid setting (config file value, layer hyperparameter or command option)."""


class ValidationError(HierflowError, ValueError):
    """Invalid data handed to an operation."""


class DimensionError(ValidationError):
    """Shapes of the inputs do not fit together."""


class GradientCheckError(HierflowError, ArithmeticError):
    """A gradient or a loss component is not finite."""


class CorpusError(HierflowError, OSError):
    """A corpus, checkpoint or output location is missing or unreadable."""


def del_none_from_dict(d):
    """Deletes keys with the value None from a dictionary, recursively.

    Args:
        d (dict): The dictionary to remove the keys from (altered in place)

    Returns:
        dict: The cleaned dictionary
    """
    for key, value in list(d.items()):
        if value is None:
            del d[key]
        elif isinstance(value, dict):
            del_none_from_dict(value)
    return d


def _json(obj_dict):
    return json.dumps(del_none_from_dict(obj_dict), indent=4, sort_keys=False, default=str)


def _require_finite(name, array):
    if not np.all(np.isfinite(array)):
        raise ValidationError(f"{name} contains non-finite values")


###############################################################################
# Audio types
###############################################################################


class Waveform:
    """Waveform class. Mono audio samples with their sample rate.

    Attributes:
        samples (np.ndarray): The samples (float64, nominally within [-1, 1])
        sample_rate (int): The sample rate in Hz
    """

    def __init__(self, samples, sample_rate: int = SAMPLE_RATE):
        if sample_rate is None or sample_rate <= 0:
            raise ValidationError(f"sample_rate must be positive, got {sample_rate}")
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DimensionError(f"A waveform has to be one dimensional, got shape {samples.shape}")
        _require_finite("Waveform", samples)
        self.samples = samples
        self.sample_rate = int(sample_rate)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        """Duration in seconds."""
        return len(self.samples) / self.sample_rate

    def to_dict(self):
        return {"sample_rate": self.sample_rate, "n_samples": len(self.samples), "duration_s": self.duration}

    def __str__(self):
        return _json(self.to_dict())


class MelSpectrogram:
    """MelSpectrogram class. A log-scale mel-spectrogram, one row per frame.

    Attributes:
        frames (np.ndarray): T x 80 log mel energies
        hop (int): The hop size in samples
        window (int): The window size in samples
    """

    def __init__(self, frames, hop: int = HOP_LENGTH, window: int = WIN_LENGTH):
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != N_MELS:
            raise DimensionError(f"A mel-spectrogram has to be T x {N_MELS}, got shape {frames.shape}")
        _require_finite("MelSpectrogram", frames)
        self.frames = frames
        self.hop = hop
        self.window = window

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def trimmed(self, n_frames):
        """Returns a copy holding only the first n_frames frames."""
        if n_frames > self.n_frames:
            raise ValidationError(f"Cannot trim {self.n_frames} mel frames to {n_frames}")
        return MelSpectrogram(self.frames[:n_frames], hop=self.hop, window=self.window)

    def to_dict(self):
        return {"n_frames": self.n_frames, "n_mels": N_MELS, "hop": self.hop, "window": self.window}

    def __str__(self):
        return _json(self.to_dict())


class ProsodyContours:
    """ProsodyContours class. Per mel frame pitch (standardized), voicing and energy.

    Attributes:
        pitch (np.ndarray): Standardized F0 (0 on unvoiced frames)
        voicing (np.ndarray): Boolean voicing decision per frame
        energy (np.ndarray): Non-negative energy per frame
        f0_hz (np.ndarray): Raw F0 in Hz (0 on unvoiced frames)
    """

    def __init__(self, pitch, voicing, energy, f0_hz=None):
        self.pitch = np.asarray(pitch, dtype=np.float64)
        self.voicing = np.asarray(voicing, dtype=bool)
        self.energy = np.asarray(energy, dtype=np.float64)
        self.f0_hz = None if f0_hz is None else np.asarray(f0_hz, dtype=np.float64)
        if not (len(self.pitch) == len(self.voicing) == len(self.energy)):
            raise DimensionError("pitch, voicing and energy need the same number of frames")
        if np.any(self.energy < 0):
            raise ValidationError("energy has to be non-negative")

    def to_dict(self):
        return {"n_frames": len(self.pitch), "voiced_frames": int(self.voicing.sum())}

    def __str__(self):
        return _json(self.to_dict())


###############################################################################
# Corpus types
###############################################################################


class LatentFactors:
    """LatentFactors class. The ground truth generative factors behind one synthetic clip.

    Attributes:
        unit_seq (np.ndarray): Content symbol per video frame
        speaker_vec (np.ndarray): Speaker identity vector
        pitch_curve (np.ndarray): F0 in Hz per video frame
        energy_curve (np.ndarray): Loudness per video frame
    """

    def __init__(self, unit_seq, speaker_vec, pitch_curve, energy_curve, n_units: Optional[int] = None):
        self.unit_seq = np.asarray(unit_seq, dtype=np.int64)
        self.speaker_vec = np.asarray(speaker_vec, dtype=np.float64)
        self.pitch_curve = np.asarray(pitch_curve, dtype=np.float64)
        self.energy_curve = np.asarray(energy_curve, dtype=np.float64)

        if self.duration < 4:
            raise ValidationError(f"A clip needs at least 4 video frames, got {self.duration}")
        if len(self.pitch_curve) != self.duration or len(self.energy_curve) != self.duration:
            raise DimensionError("pitch_curve and energy_curve need one value per video frame")
        if np.any(self.unit_seq < 0) or (n_units is not None and np.any(self.unit_seq >= n_units)):
            raise ValidationError("unit ids out of range")
        _require_finite("pitch_curve", self.pitch_curve)
        _require_finite("energy_curve", self.energy_curve)

    @property
    def duration(self):
        """Duration in video frames (25 fps)."""
        return len(self.unit_seq)

    def to_dict(self):
        return {"duration": self.duration, "speaker_dim": len(self.speaker_vec)}

    def __str__(self):
        return _json(self.to_dict())


class AttributeTargets:
    """AttributeTargets class. The acoustic attribute targets of one clip at mel rate.

    Attributes:
        content_units (np.ndarray): k-means cluster id per mel frame
        timbre_vec (np.ndarray): Time averaged timbre vector
        pitch (np.ndarray): Standardized pitch per mel frame
        energy (np.ndarray): Energy per mel frame
        f0_hz (np.ndarray): Raw F0 in Hz per mel frame (0 if unvoiced)
        voicing (np.ndarray): Voicing decision per mel frame
    """

    def __init__(self, content_units, timbre_vec, pitch, energy, f0_hz=None, voicing=None):
        self.content_units = np.asarray(content_units, dtype=np.int64)
        self.timbre_vec = np.asarray(timbre_vec, dtype=np.float64)
        self.pitch = np.asarray(pitch, dtype=np.float64)
        self.energy = np.asarray(energy, dtype=np.float64)
        n = len(self.content_units)
        self.f0_hz = np.zeros(n) if f0_hz is None else np.asarray(f0_hz, dtype=np.float64)
        self.voicing = (self.f0_hz > 0) if voicing is None else np.asarray(voicing, dtype=bool)

        if not (len(self.pitch) == len(self.energy) == len(self.f0_hz) == len(self.voicing) == n):
            raise DimensionError("every per-frame target needs one value per mel frame")
        if self.timbre_vec.ndim != 1:
            raise DimensionError("timbre_vec has to be a vector")
        _require_finite("pitch", self.pitch)
        _require_finite("energy", self.energy)
        _require_finite("timbre_vec", self.timbre_vec)

    @property
    def n_frames(self):
        return len(self.content_units)

    def cropped(self, start, stop):
        """Returns the targets of mel frames [start, stop)."""
        return AttributeTargets(
            self.content_units[start:stop],
            self.timbre_vec,
            self.pitch[start:stop],
            self.energy[start:stop],
            f0_hz=self.f0_hz[start:stop],
            voicing=self.voicing[start:stop],
        )

    def to_dict(self):
        return {"n_frames": self.n_frames, "timbre_dim": len(self.timbre_vec)}

    def __str__(self):
        return _json(self.to_dict())


class SyntheticSample:
    """SyntheticSample class. One paired training example of the synthetic corpus.

    Attributes:
        sample_id (str): The id of the sample (e.g. 'sample_0003')
        factors (LatentFactors): The generative factors (None when loaded without them)
        audio (Waveform): The clip audio, video_frames x 640 samples long
        lip_layers (np.ndarray): L x T_video x D_l lip encoder layer outputs
        face_id (np.ndarray): D_f face identity vector
        expr_feats (np.ndarray): T_video x D_e facial expression features
        mel (MelSpectrogram): The target mel-spectrogram, 2 x T_video frames
        acoustic_content (np.ndarray): T_mel x D content feature stream (last layer analog)
        acoustic_timbre (np.ndarray): T_mel x D_t timbre feature stream (first layer analog)
        targets (AttributeTargets): The attribute targets (None until make_targets ran)
    """

    def __init__(
        self,
        sample_id: str,
        factors: Optional[LatentFactors],
        audio: Waveform,
        lip_layers,
        face_id,
        expr_feats,
        mel: MelSpectrogram,
        acoustic_content,
        acoustic_timbre,
        targets: Optional[AttributeTargets] = None,
    ):
        self.sample_id = sample_id
        self.factors = factors
        self.audio = audio
        self.lip_layers = np.asarray(lip_layers, dtype=np.float64)
        self.face_id = np.asarray(face_id, dtype=np.float64)
        self.expr_feats = np.asarray(expr_feats, dtype=np.float64)
        self.mel = mel
        self.acoustic_content = np.asarray(acoustic_content, dtype=np.float64)
        self.acoustic_timbre = np.asarray(acoustic_timbre, dtype=np.float64)
        self.targets = targets

        video_frames = self.lip_layers.shape[1]
        if self.expr_feats.shape[0] != video_frames:
            raise DimensionError("expr_feats and lip_layers disagree on the number of video frames")
        if mel.n_frames != 2 * video_frames:
            raise DimensionError(f"mel has {mel.n_frames} frames, expected 2 x {video_frames}")
        if len(self.acoustic_content) != mel.n_frames or len(self.acoustic_timbre) != mel.n_frames:
            raise DimensionError("acoustic feature streams have to be at mel rate")
        if targets is not None and targets.n_frames != mel.n_frames:
            raise DimensionError("targets have to be at mel rate")

    @property
    def video_frames(self):
        return self.lip_layers.shape[1]

    @property
    def mel_frames(self):
        return self.mel.n_frames

    def to_dict(self):
        return {
            "sample_id": self.sample_id,
            "video_frames": self.video_frames,
            "mel_frames": self.mel_frames,
            "lip_layers": list(self.lip_layers.shape),
            "has_targets": self.targets is not None,
        }

    def __str__(self):
        return _json(self.to_dict())


class KMeansModel:
    """KMeansModel class. Centroids of a fitted k-means quantizer.

    Attributes:
        centroids (np.ndarray): K x D centroid matrix
        objective_trace (List[float]): Within-cluster sum of squares after every Lloyd iteration
    """

    def __init__(self, centroids, objective_trace: Optional[List[float]] = None):
        self.centroids = np.asarray(centroids, dtype=np.float64)
        if self.centroids.ndim != 2:
            raise DimensionError("centroids have to be a K x D matrix")
        if self.K < 2:
            raise ValidationError(f"k-means needs K >= 2, got {self.K}")
        _require_finite("centroids", self.centroids)
        self.objective_trace = list(objective_trace or [])

    @property
    def K(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]

    def to_dict(self):
        return {"K": self.K, "dim": self.dim, "iterations": len(self.objective_trace)}

    def __str__(self):
        return _json(self.to_dict())


###############################################################################
# Model outputs
###############################################################################


class VisualEncoding:
    """VisualEncoding class. The encoder output mu plus the attribute predictions made on the way.

    Attributes:
        mu (torch.Tensor): T_mel x 80 conditioning of the decoder
        unit_pred (torch.Tensor): Predicted unit id per mel frame (argmax of CP)
        timbre_pred (torch.Tensor): Predicted timbre vector (None if the stage is off)
        pitch_pred (torch.Tensor): Predicted standardized pitch (None if the stage is off)
        energy_pred (torch.Tensor): Predicted energy (None if the stage is off)
    """

    def __init__(self, mu, unit_pred=None, timbre_pred=None, pitch_pred=None, energy_pred=None):
        if mu.dim() != 2 or mu.shape[1] != N_MELS:
            raise DimensionError(f"mu has to be T x {N_MELS}, got {tuple(mu.shape)}")
        self.mu = mu
        self.unit_pred = unit_pred
        self.timbre_pred = timbre_pred
        self.pitch_pred = pitch_pred
        self.energy_pred = energy_pred

    @property
    def n_frames(self):
        return self.mu.shape[0]


class EncoderLosses:
    """EncoderLosses class. The attribute predictor losses of one encoder pass (scalars)."""

    def __init__(self, content, timbre, prosody):
        self.content = content
        self.timbre = timbre
        self.prosody = prosody

    def to_dict(self):
        return {"L_c": float(self.content), "L_t": float(self.timbre), "L_p": float(self.prosody)}

    def __str__(self):
        return _json(self.to_dict())


###############################################################################
# Configuration types
###############################################################################


class CorpusConfig:
    """CorpusConfig class. Settings of the synthetic corpus generator."""

    def __init__(
        self,
        n_samples: int = 64,
        n_units: int = 16,
        n_clusters: int = 32,
        lip_layers: int = 4,
        lip_dim: int = 16,
        face_dim: int = 8,
        expr_dim: int = 16,
        speaker_dim: int = 8,
        timbre_dim: int = 16,
        content_dim: int = 16,
        min_frames: int = 48,
        max_frames: int = 120,
        noise: float = 0.1,
        unit_frames: int = 3,
        harmonics: int = 8,
    ):
        if n_samples < 1:
            raise ConfigurationError(f"n_samples has to be >= 1, got {n_samples}")
        if n_units < 2 or n_clusters < 2:
            raise ConfigurationError("n_units and n_clusters have to be >= 2")
        if min_frames < 4 or max_frames < min_frames:
            raise ConfigurationError("need 4 <= min_frames <= max_frames")
        if noise < 0:
            raise ConfigurationError("noise has to be >= 0")
        self.n_samples = n_samples
        self.n_units = n_units
        self.n_clusters = n_clusters
        self.lip_layers = lip_layers
        self.lip_dim = lip_dim
        self.face_dim = face_dim
        self.expr_dim = expr_dim
        self.speaker_dim = speaker_dim
        self.timbre_dim = timbre_dim
        self.content_dim = content_dim
        self.min_frames = min_frames
        self.max_frames = max_frames
        self.noise = float(noise)
        self.unit_frames = unit_frames
        self.harmonics = harmonics

    def to_dict(self):
        return dict(vars(self))

    def __str__(self):
        return _json(self.to_dict())


class EncoderConfig:
    """EncoderConfig class. Sizes of the hierarchical visual encoder and its ablation flags.

    The ablation flags are: hier, timbre_stage, prosody_stage, face_id, expr, weighted_sum, masked_pred.
    """

    def __init__(
        self,
        hidden_dim: int = 32,
        n_units: int = 32,
        lip_layers: int = 4,
        lip_dim: int = 16,
        face_dim: int = 8,
        expr_dim: int = 16,
        timbre_dim: int = 16,
        heads: int = 4,
        mapper_layers: int = 2,
        output_layers: int = 2,
        predictor_blocks: int = 2,
        kernel_size: int = 3,
        label_smoothing: float = 0.9,
        **flags,
    ):
        if not 0 < label_smoothing <= 1:
            raise ConfigurationError(f"label_smoothing alpha has to be in (0, 1], got {label_smoothing}")
        if hidden_dim % heads != 0:
            raise ConfigurationError(f"hidden_dim {hidden_dim} is not divisible by {heads} heads")
        if kernel_size % 2 == 0 or kernel_size < 3:
            raise ConfigurationError(f"kernel_size has to be odd and >= 3, got {kernel_size}")
        unknown = set(flags) - set(ENCODER_FLAGS)
        if unknown:
            raise ConfigurationError(f"Unknown ablation flag(s): {sorted(unknown)}")

        self.hidden_dim = hidden_dim
        self.n_units = n_units
        self.lip_layers = lip_layers
        self.lip_dim = lip_dim
        self.face_dim = face_dim
        self.expr_dim = expr_dim
        self.timbre_dim = timbre_dim
        self.heads = heads
        self.mapper_layers = mapper_layers
        self.output_layers = output_layers
        self.predictor_blocks = predictor_blocks
        self.kernel_size = kernel_size
        self.label_smoothing = float(label_smoothing)
        for flag in ENCODER_FLAGS:
            setattr(self, flag, bool(flags.get(flag, True)))

    def flags(self):
        """Returns the ablation flags as a dict."""
        return {flag: getattr(self, flag) for flag in ENCODER_FLAGS}

    def with_flags(self, **flags):
        """Returns a copy with some ablation flags replaced."""
        settings = self.to_dict()
        settings.update(flags)
        return EncoderConfig(**settings)

    def to_dict(self):
        return dict(vars(self))

    def __str__(self):
        return _json(self.to_dict())


class DecoderConfig:
    """DecoderConfig class. Sizes of the U-shaped vector field network."""

    def __init__(
        self,
        n_feats: int = 80,
        channels=(64, 128),
        time_embedding_dim: int = 64,
        heads: int = 4,
        kernel_size: int = 3,
    ):
        channels = tuple(int(c) for c in channels)
        if len(channels) != 2:
            raise ConfigurationError("the vector field network has exactly two resolution levels")
        if channels[-1] % heads != 0:
            raise ConfigurationError(f"bottleneck width {channels[-1]} is not divisible by {heads} heads")
        self.n_feats = n_feats
        self.channels = channels
        self.time_embedding_dim = time_embedding_dim
        self.heads = heads
        self.kernel_size = kernel_size

    def to_dict(self):
        settings = dict(vars(self))
        settings["channels"] = list(self.channels)
        return settings

    def __str__(self):
        return _json(self.to_dict())


class FlowConfig:
    """FlowConfig class. Settings of the flow matching objective.

    Attributes:
        sigma_min (float): Minimum noise level of the OT path
        cfg_drop_prob (float): Probability of replacing mu by the null condition during training
        lambda_c, lambda_t, lambda_p (float): Weights of the attribute losses in the total loss
        cosine_schedule (bool): Draw t with the cosine schedule instead of uniformly
        prior (str): 'standard' (x0 ~ N(0, I)) or 'mu_centered' (x0 ~ N(mu, I))
    """

    def __init__(
        self,
        sigma_min: float = 1e-4,
        cfg_drop_prob: float = 0.1,
        lambda_c: float = 0.5,
        lambda_t: float = 0.5,
        lambda_p: float = 0.5,
        cosine_schedule: bool = True,
        prior: str = "standard",
    ):
        if not 0 < sigma_min < 1:
            raise ConfigurationError(f"sigma_min has to be in (0, 1), got {sigma_min}")
        if not 0 <= cfg_drop_prob < 1:
            raise ConfigurationError(f"cfg_drop_prob has to be in [0, 1), got {cfg_drop_prob}")
        if min(lambda_c, lambda_t, lambda_p) < 0:
            raise ConfigurationError("loss weights have to be >= 0")
        if prior not in ["standard", "mu_centered"]:
            raise ConfigurationError(f"prior has to be 'standard' or 'mu_centered', got {prior}")
        self.sigma_min = float(sigma_min)
        self.cfg_drop_prob = float(cfg_drop_prob)
        self.lambda_c = float(lambda_c)
        self.lambda_t = float(lambda_t)
        self.lambda_p = float(lambda_p)
        self.cosine_schedule = bool(cosine_schedule)
        self.prior = prior

    def to_dict(self):
        return dict(vars(self))

    def __str__(self):
        return _json(self.to_dict())


class SamplerConfig:
    """SamplerConfig class. Settings of the CFG Euler sampler."""

    def __init__(self, steps: int = 10, beta: float = 0.7, seed: int = 0):
        if steps < 1:
            raise ConfigurationError(f"steps has to be >= 1, got {steps}")
        if beta < 0:
            raise ConfigurationError(f"beta has to be >= 0, got {beta}")
        self.steps = int(steps)
        self.beta = float(beta)
        self.seed = int(seed)

    def to_dict(self):
        return dict(vars(self))

    def __str__(self):
        return _json(self.to_dict())


class OptimizerConfig:
    """OptimizerConfig class. AdamW settings with per-step learning rate decay."""

    def __init__(
        self,
        lr: float = 1e-4,
        beta1: float = 0.8,
        beta2: float = 0.99,
        eps: float = 1e-9,
        weight_decay: float = 0.01,
        lr_decay: float = 0.999 ** (1 / 8),
    ):
        if lr <= 0:
            raise ConfigurationError(f"lr has to be > 0, got {lr}")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ConfigurationError("beta1 and beta2 have to be in [0, 1)")
        if not 0 < lr_decay <= 1:
            raise ConfigurationError(f"lr_decay has to be in (0, 1], got {lr_decay}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.lr_decay = float(lr_decay)

    def to_dict(self):
        return dict(vars(self))

    def __str__(self):
        return _json(self.to_dict())


class RunConfig:
    """RunConfig class. Everything a command needs to run.

    Attributes:
        corpus_path (str): Directory of the synthetic corpus
        seed (int): Seed of corpus generation and training
        corpus (CorpusConfig), encoder (EncoderConfig), decoder (DecoderConfig), flow (FlowConfig),
        sampler (SamplerConfig), optimizer (OptimizerConfig): The component settings
        train_steps (int): Number of optimizer steps of 'train'
        crop_frames (int): Training crop length in video frames (96 -> 192 mel frames)
        checkpoint_dir (str), out_dir (str): Output locations
        checkpoint_interval (int): Steps between checkpoints
        log_flush_interval (int): Steps between loss log flushes
        eval_samples (int): Number of corpus samples used by sample/eval/sweep/ablate
        griffin_lim_iters (int): Griffin-Lim iterations of the audio round trip
        sweep_betas (List[float]): Guidance scales of 'sweep-guidance'
        ablate_steps (int): Training steps of every 'ablate' leg
    """

    def __init__(
        self,
        corpus_path: str,
        seed: int = 0,
        corpus: Optional[CorpusConfig] = None,
        encoder: Optional[EncoderConfig] = None,
        decoder: Optional[DecoderConfig] = None,
        flow: Optional[FlowConfig] = None,
        sampler: Optional[SamplerConfig] = None,
        optimizer: Optional[OptimizerConfig] = None,
        train_steps: int = 2000,
        crop_frames: int = 96,
        checkpoint_dir: str = "runs/checkpoints",
        out_dir: str = "runs/out",
        checkpoint_interval: int = 500,
        log_flush_interval: int = 10,
        eval_samples: int = 8,
        griffin_lim_iters: int = 60,
        sweep_betas: Optional[List[float]] = None,
        ablate_steps: int = 500,
    ):
        if crop_frames < 1:
            raise ConfigurationError(f"crop_frames has to be >= 1, got {crop_frames}")
        if train_steps < 0 or ablate_steps < 0:
            raise ConfigurationError("step counts have to be >= 0")
        if log_flush_interval < 1 or checkpoint_interval < 1:
            raise ConfigurationError("intervals have to be >= 1")
        self.corpus_path = corpus_path
        self.seed = int(seed)
        self.corpus = corpus or CorpusConfig()
        self.encoder = encoder or EncoderConfig()
        self.decoder = decoder or DecoderConfig()
        self.flow = flow or FlowConfig()
        self.sampler = sampler or SamplerConfig()
        self.optimizer = optimizer or OptimizerConfig()
        self.train_steps = int(train_steps)
        self.crop_frames = int(crop_frames)
        self.checkpoint_dir = checkpoint_dir
        self.out_dir = out_dir
        self.checkpoint_interval = int(checkpoint_interval)
        self.log_flush_interval = int(log_flush_interval)
        self.eval_samples = int(eval_samples)
        self.griffin_lim_iters = int(griffin_lim_iters)
        self.sweep_betas = list(sweep_betas) if sweep_betas is not None else [0.0, 0.5, 0.7, 1.0, 2.0, 4.0]
        self.ablate_steps = int(ablate_steps)

    def to_dict(self):
        settings = dict(vars(self))
        for key in ["corpus", "encoder", "decoder", "flow", "sampler", "optimizer"]:
            settings[key] = settings[key].to_dict()
        return settings

    def __str__(self):
        return _json(self.to_dict())


###############################################################################
# Reports
###############################################################################


class MetricsRow:
    """MetricsRow class. One line of an evaluation report. Absent values are None, non-finite values are kept.

    Attributes:
        label (str): The run label
        rmse_f0 (float): RMSE of F0 in Hz over mutually voiced frames
        mae_energy (float): MAE between the energy sequences
        timbre_cosine (float): Cosine similarity of the oracle timbre embeddings (SECS analog)
        unit_accuracy (float): Fraction of frames whose predicted unit equals the target unit
        loss_final (float): Mean L_total over the last logged steps of the run
        n_samples (int): Number of evaluated samples
    """

    COLUMNS = ["label", "rmse_f0", "mae_energy", "timbre_cosine", "unit_accuracy", "loss_final", "n_samples"]

    def __init__(
        self,
        label: str,
        rmse_f0: Optional[float] = None,
        mae_energy: Optional[float] = None,
        timbre_cosine: Optional[float] = None,
        unit_accuracy: Optional[float] = None,
        loss_final: Optional[float] = None,
        n_samples: int = 0,
    ):
        self.label = label
        self.rmse_f0 = _float_or_none(rmse_f0)
        self.mae_energy = _float_or_none(mae_energy)
        self.timbre_cosine = _float_or_none(timbre_cosine)
        self.unit_accuracy = _float_or_none(unit_accuracy)
        self.loss_final = _float_or_none(loss_final)
        self.n_samples = int(n_samples)

    def is_finite(self):
        """Returns whether energy and timbre metrics are present and every present metric is finite.

        rmse_f0 may be absent (no mutually voiced frame), a NaN rmse_f0 is a failure.
        """
        if self.mae_energy is None or self.timbre_cosine is None:
            return False
        present = [self.rmse_f0, self.mae_energy, self.timbre_cosine, self.unit_accuracy, self.loss_final]
        return all(math.isfinite(value) for value in present if value is not None)

    def to_dict(self):
        return {column: getattr(self, column) for column in self.COLUMNS}

    def __str__(self):
        return _json(self.to_dict())


def _float_or_none(value):
    return None if value is None else float(value)
