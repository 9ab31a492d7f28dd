# hierflow
# This module is used to generate the synthetic paired corpus hierflow trains on and to derive its attribute targets.
#
# This module is capable of:
# [X] Generating samples from latent factors (content units, speaker vector, pitch and energy curves):
#     harmonic audio plus oracle lip/face/expression features and two oracle acoustic feature streams
# [X] k-means (k-means++ seeding, Lloyd iterations with farthest-point reseeding of empty clusters)
# [X] Attribute targets: content units, timbre vector, standardized pitch, energy
# [X] A fixed timbre embedding of mel-spectrograms (used for the timbre cosine metric)
# [X] Saving and loading the corpus (per sample directory, manifest, k-means model, corpus statistics)
#
# Every sample owns an RNG derived from (seed, sample index), the maps shared by all samples use one derived from the seed.

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import yaml
from scipy.spatial.distance import cdist
from sklearn.cluster import kmeans_plusplus

import lib.logging_helper as logging_helper
from components import audio_signal
from lib.class_helper import (
    N_MELS,
    SAMPLE_RATE,
    SAMPLES_PER_VIDEO_FRAME,
    VIDEO_FPS,
    AttributeTargets,
    ConfigurationError,
    CorpusConfig,
    CorpusError,
    DimensionError,
    KMeansModel,
    LatentFactors,
    MelSpectrogram,
    SyntheticSample,
    ValidationError,
    Waveform,
)
from lib.generic_helper import derive_seed, ensure_dir, read_container, read_csv, worker_cap, write_container, write_csv

mlog = logging_helper.Log("components.synthdata")

KMEANS_MAX_ITER = 100
TIMBRE_EMBEDDING_DIM = 16
TIMBRE_EMBEDDING_SEED = 20240917
TARGET_COLUMNS = ["content_unit", "pitch", "energy", "f0_hz", "voicing"]
MANIFEST_COLUMNS = ["sample_id", "video_frames", "mel_frames", "duration_s"]


class CorpusWorld:
    """The maps shared by every sample of a corpus (feature affines, harmonic profiles, acoustic embeddings)."""

    def __init__(self, seed, cfg: CorpusConfig):
        rng = np.random.default_rng(derive_seed(seed))
        self.cfg = cfg
        self.lip_weights = rng.standard_normal((cfg.lip_layers, cfg.n_units, cfg.lip_dim))
        self.lip_bias = rng.standard_normal((cfg.lip_layers, cfg.lip_dim)) * 0.1
        self.face_weights = rng.standard_normal((cfg.speaker_dim, cfg.face_dim)) / np.sqrt(cfg.speaker_dim)
        self.face_bias = rng.standard_normal(cfg.face_dim) * 0.1
        self.expr_weights = rng.standard_normal((2, cfg.expr_dim))
        self.expr_bias = rng.standard_normal(cfg.expr_dim) * 0.1
        self.content_embedding = rng.standard_normal((cfg.n_units, cfg.content_dim))
        self.timbre_weights = rng.standard_normal((cfg.speaker_dim, cfg.timbre_dim)) / np.sqrt(cfg.speaker_dim)
        self.timbre_bias = rng.standard_normal(cfg.timbre_dim) * 0.1
        # Harmonic amplitudes per unit; the fundamental always stays strong
        self.harmonic_profiles = rng.uniform(0.1, 1.0, (cfg.n_units, cfg.harmonics))
        self.harmonic_profiles[:, 0] = rng.uniform(0.7, 1.0, cfg.n_units)


############################################
#### Corpus generation ####
############################################


def sample_factors(rng, cfg: CorpusConfig):
    """Draws the latent factors of one clip."""
    duration = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
    units = []
    while len(units) < duration:
        length = int(rng.integers(max(1, cfg.unit_frames - 1), cfg.unit_frames + 2))
        units.extend([int(rng.integers(cfg.n_units))] * length)
    unit_seq = np.array(units[:duration])

    speaker_vec = rng.standard_normal(cfg.speaker_dim)
    seconds = np.arange(duration) / VIDEO_FPS
    base = rng.uniform(100.0, 220.0)
    pitch_curve = base + rng.uniform(4.0, 12.0) * np.sin(2 * np.pi * seconds / rng.uniform(1.2, 2.5) + rng.uniform(0, 2 * np.pi))
    level = rng.uniform(0.3, 0.7)
    energy_curve = level * (1.0 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * seconds + rng.uniform(0, 2 * np.pi)))
    return LatentFactors(unit_seq, speaker_vec, pitch_curve, energy_curve, n_units=cfg.n_units)


def synthesize_audio(factors: LatentFactors, world: CorpusWorld):
    """Harmonic audio: a continuous-phase fundamental at pitch_curve Hz, unit dependent harmonic amplitudes,
    a speaker dependent spectral tilt and the energy_curve envelope. Exactly duration x 640 samples."""
    n_samples = factors.duration * SAMPLES_PER_VIDEO_FRAME
    frame_times = (np.arange(factors.duration) + 0.5) * SAMPLES_PER_VIDEO_FRAME
    sample_times = np.arange(n_samples)
    f0 = np.interp(sample_times, frame_times, factors.pitch_curve)
    envelope = np.interp(sample_times, frame_times, factors.energy_curve)
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE

    harmonics = world.cfg.harmonics
    tilt = np.exp(-(0.35 + 0.15 * np.tanh(factors.speaker_vec[0])) * np.arange(harmonics))
    profiles = world.harmonic_profiles[factors.unit_seq] * tilt  # duration x harmonics
    profiles = profiles / profiles.sum(axis=1, keepdims=True)
    amplitudes = np.stack([np.interp(sample_times, frame_times, profiles[:, h]) for h in range(harmonics)])

    numbers = np.arange(1, harmonics + 1)[:, None]
    audible = (numbers * f0[None, :]) < 0.95 * SAMPLE_RATE / 2
    samples = envelope * np.sum(np.where(audible, amplitudes * np.sin(numbers * phase[None, :]), 0.0), axis=0)
    return Waveform(samples)


def synthesize_sample(sample_id, factors: LatentFactors, world: CorpusWorld, rng):
    """Builds one SyntheticSample (without targets) from its latent factors."""
    cfg = world.cfg
    frames = factors.duration
    one_hot = np.eye(cfg.n_units)[factors.unit_seq]

    lip_layers = np.empty((cfg.lip_layers, frames, cfg.lip_dim))
    for layer in range(cfg.lip_layers):
        sigma = cfg.noise * (cfg.lip_layers - layer)
        lip_layers[layer] = one_hot @ world.lip_weights[layer] + world.lip_bias[layer]
        lip_layers[layer] += sigma * rng.standard_normal((frames, cfg.lip_dim))

    face_id = factors.speaker_vec @ world.face_weights + world.face_bias + cfg.noise * rng.standard_normal(cfg.face_dim)
    prosody = np.stack([(factors.pitch_curve - 160.0) / 40.0, factors.energy_curve], axis=1)
    expr_feats = prosody @ world.expr_weights + world.expr_bias + cfg.noise * rng.standard_normal((frames, cfg.expr_dim))

    audio = synthesize_audio(factors, world)
    mel = audio_signal.log_mel(audio).trimmed(2 * frames)

    mel_units = np.repeat(factors.unit_seq, 2)
    acoustic_content = world.content_embedding[mel_units] + cfg.noise * rng.standard_normal((2 * frames, cfg.content_dim))
    timbre = factors.speaker_vec @ world.timbre_weights + world.timbre_bias
    acoustic_timbre = timbre + cfg.noise * rng.standard_normal((2 * frames, cfg.timbre_dim))

    return SyntheticSample(sample_id, factors, audio, lip_layers, face_id, expr_feats, mel, acoustic_content, acoustic_timbre)


def sample_name(index):
    return f"sample_{index:04d}"


def gen_corpus(seed, n_samples, cfg: CorpusConfig = None):
    """Generates a corpus. A pure function of (seed, n_samples, cfg).

    Args:
        seed (int): The corpus seed
        n_samples (int): Number of samples
        cfg (CorpusConfig): Dimensions and noise level

    Returns:
        List[SyntheticSample]: The samples (targets not yet populated)
    """
    cfg = cfg or CorpusConfig()
    if n_samples < 1:
        raise ConfigurationError(f"n_samples has to be >= 1, got {n_samples}")
    world = CorpusWorld(seed, cfg)

    def build(index):
        rng = np.random.default_rng(derive_seed(seed, index))
        factors = sample_factors(rng, cfg)
        sample = synthesize_sample(sample_name(index), factors, world, rng)
        mlog.debug(f"Generated {sample.sample_id} with {sample.video_frames} video frames")
        return sample

    with ThreadPoolExecutor(max_workers=worker_cap()) as pool:
        samples = list(pool.map(build, range(n_samples)))
    mlog.info(f"Generated {len(samples)} samples (seed {seed})")
    return samples


############################################
#### k-means ####
############################################


def kmeans_assign(km: KMeansModel, vectors):
    """Index of the nearest centroid of every row (the first one on ties)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != km.dim:
        raise ValidationError(f"k-means model has dimension {km.dim}, vectors have shape {vectors.shape}")
    return np.argmin(cdist(vectors, km.centroids, "sqeuclidean"), axis=1)


def kmeans_fit(vectors, K, seed=0, max_iter=KMEANS_MAX_ITER):
    """Fits k-means with k-means++ seeding and Lloyd iterations until the assignment is a fixpoint.

    Args:
        vectors (np.ndarray): N x D data
        K (int): Number of clusters
        seed (int): Seed of the k-means++ initialization
        max_iter (int): Iteration cap

    Returns:
        KMeansModel: The centroids and the objective after every assignment step
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise DimensionError("k-means needs an N x D matrix")
    if len(vectors) < K:
        raise ValidationError(f"k-means needs N >= K, got N={len(vectors)} and K={K}")
    if K < 2:
        raise ValidationError(f"k-means needs K >= 2, got {K}")

    centroids, _ = kmeans_plusplus(vectors, K, random_state=seed)
    centroids = centroids.astype(np.float64)
    assignment = None
    trace = []
    for iteration in range(max_iter):
        distances = cdist(vectors, centroids, "sqeuclidean")
        new_assignment = np.argmin(distances, axis=1)
        nearest = distances[np.arange(len(vectors)), new_assignment]
        trace.append(float(nearest.sum()))
        if assignment is not None and np.array_equal(assignment, new_assignment):
            break
        assignment = new_assignment

        for k in range(K):
            members = assignment == k
            if members.any():
                centroids[k] = vectors[members].mean(axis=0)
        empty = [k for k in range(K) if not np.any(assignment == k)]
        if empty:
            # Farthest point from its centroid takes over the empty cluster
            point_cost = np.sum((vectors - centroids[assignment]) ** 2, axis=1)
            for k in empty:
                farthest = int(np.argmax(point_cost))
                centroids[k] = vectors[farthest]
                point_cost[farthest] = -1.0
        mlog.debug(f"k-means iteration {iteration}: objective {trace[-1]:.6g}")
    return KMeansModel(centroids, trace)


############################################
#### Targets ####
############################################


def make_targets(sample: SyntheticSample, km: KMeansModel):
    """Derives the attribute targets of a sample.

    content units = k-means labels of the content stream, timbre vector = time average of the timbre stream,
    pitch = standardized YIN F0 of the audio, energy = energy of the sample mel-spectrogram.
    """
    content_units = kmeans_assign(km, sample.acoustic_content)
    timbre_vec = sample.acoustic_timbre.mean(axis=0)
    f0, voicing = audio_signal.estimate_pitch(sample.audio, n_frames=sample.mel_frames)
    pitch = audio_signal.standardize_pitch(f0, voicing)
    frame_energy = audio_signal.energy(sample.mel)
    return AttributeTargets(content_units, timbre_vec, pitch, frame_energy, f0_hz=f0, voicing=voicing)


def timbre_embedding(m):
    """Fixed seeded projection of the time averaged, mean removed log-mel (MelSpectrogram or T x 80 array)."""
    frames = m.frames if isinstance(m, MelSpectrogram) else np.asarray(m, dtype=np.float64)
    profile = frames.mean(axis=0)
    profile = profile - profile.mean()
    projection = np.random.default_rng(TIMBRE_EMBEDDING_SEED).standard_normal((N_MELS, TIMBRE_EMBEDDING_DIM))
    return profile @ projection / np.sqrt(N_MELS)


def energy_statistics(samples):
    """Mean and standard deviation of the energy targets over a corpus."""
    values = np.concatenate([sample.targets.energy for sample in samples])
    return float(values.mean()), float(max(values.std(), 1e-8))


############################################
#### Persistence ####
############################################


def save_sample(directory, sample: SyntheticSample):
    ensure_dir(directory)
    audio_signal.write_wav(os.path.join(directory, "audio.wav"), sample.audio)
    entries = {
        "lip_layers": sample.lip_layers,
        "face_id": sample.face_id,
        "expr_feats": sample.expr_feats,
        "mel": sample.mel.frames,
        "acoustic_content": sample.acoustic_content,
        "acoustic_timbre": sample.acoustic_timbre,
    }
    if sample.factors is not None:
        entries["factors/unit_seq"] = sample.factors.unit_seq
        entries["factors/speaker_vec"] = sample.factors.speaker_vec
        entries["factors/pitch_curve"] = sample.factors.pitch_curve
        entries["factors/energy_curve"] = sample.factors.energy_curve
    if sample.targets is not None:
        entries["targets/timbre_vec"] = sample.targets.timbre_vec
        targets = sample.targets
        write_csv(
            os.path.join(directory, "targets.csv"),
            {
                "content_unit": targets.content_units,
                "pitch": targets.pitch,
                "energy": targets.energy,
                "f0_hz": targets.f0_hz,
                "voicing": targets.voicing.astype(int),
            },
            columns=TARGET_COLUMNS,
        )
    write_container(os.path.join(directory, "features.bin"), entries)


def load_sample(directory, sample_id=None):
    """Loads a sample written by save_sample() (audio from audio.wav, every array from features.bin)."""
    if not os.path.isdir(directory):
        raise CorpusError(f"sample directory {directory} does not exist")
    entries = read_container(os.path.join(directory, "features.bin"))
    audio = audio_signal.read_wav(os.path.join(directory, "audio.wav"))

    factors = None
    if "factors/unit_seq" in entries:
        factors = LatentFactors(
            entries["factors/unit_seq"].astype(np.int64),
            entries["factors/speaker_vec"],
            entries["factors/pitch_curve"],
            entries["factors/energy_curve"],
        )
    targets = None
    targets_path = os.path.join(directory, "targets.csv")
    if os.path.isfile(targets_path) and "targets/timbre_vec" in entries:
        frame = read_csv(targets_path)
        targets = AttributeTargets(
            frame["content_unit"].to_numpy(dtype=np.int64),
            entries["targets/timbre_vec"],
            frame["pitch"].to_numpy(dtype=np.float64),
            frame["energy"].to_numpy(dtype=np.float64),
            f0_hz=frame["f0_hz"].to_numpy(dtype=np.float64),
            voicing=frame["voicing"].to_numpy(dtype=np.int64).astype(bool),
        )
    return SyntheticSample(
        sample_id or os.path.basename(os.path.normpath(directory)),
        factors,
        audio,
        entries["lip_layers"],
        entries["face_id"],
        entries["expr_feats"],
        MelSpectrogram(entries["mel"]),
        entries["acoustic_content"],
        entries["acoustic_timbre"],
        targets=targets,
    )


def save_corpus(path, samples, km: KMeansModel, seed, cfg: CorpusConfig):
    """Writes the corpus: one directory per sample, manifest.csv, kmeans.bin and corpus.yml (seed, sizes, energy statistics)."""
    ensure_dir(path)
    manifest = []
    for sample in samples:
        save_sample(os.path.join(path, sample.sample_id), sample)
        manifest.append(
            {
                "sample_id": sample.sample_id,
                "video_frames": sample.video_frames,
                "mel_frames": sample.mel_frames,
                "duration_s": sample.audio.duration,
            }
        )
    write_csv(os.path.join(path, "manifest.csv"), manifest, columns=MANIFEST_COLUMNS)
    write_container(
        os.path.join(path, "kmeans.bin"), {"centroids": km.centroids, "objective_trace": np.array(km.objective_trace)}
    )
    energy_mean, energy_std = energy_statistics(samples)
    meta = {
        "seed": int(seed),
        "n_samples": len(samples),
        "energy_mean": energy_mean,
        "energy_std": energy_std,
        "corpus": cfg.to_dict(),
    }
    with open(os.path.join(path, "corpus.yml"), "w") as f:
        yaml.safe_dump(meta, f, sort_keys=False)
    mlog.info(f"Saved corpus with {len(samples)} samples to {path}")


def load_manifest(path):
    manifest_path = os.path.join(path, "manifest.csv")
    if not os.path.isfile(manifest_path):
        raise CorpusError(f"No corpus found at {path} (manifest.csv missing)")
    return read_csv(manifest_path)


def load_corpus_meta(path):
    meta_path = os.path.join(path, "corpus.yml")
    if not os.path.isfile(meta_path):
        raise CorpusError(f"No corpus found at {path} (corpus.yml missing)")
    with open(meta_path, "r") as f:
        return yaml.safe_load(f)


def load_corpus(path, limit=None):
    """Loads the samples (in manifest order), the k-means model and the corpus metadata.

    Returns:
        tuple: (samples, km, meta)
    """
    manifest = load_manifest(path)
    sample_ids = list(manifest["sample_id"])
    if limit is not None:
        sample_ids = sample_ids[:limit]
    samples = [load_sample(os.path.join(path, sample_id), sample_id) for sample_id in sample_ids]
    entries = read_container(os.path.join(path, "kmeans.bin"))
    km = KMeansModel(entries["centroids"], list(entries["objective_trace"]))
    return samples, km, load_corpus_meta(path)
