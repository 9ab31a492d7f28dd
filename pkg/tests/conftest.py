# hierflow
# Shared fixtures of the hierflow tests: a tiny config file and a tiny in-memory corpus.

import copy
import os

import numpy as np
import pytest
import yaml

import lib.config_helper as config_helper
from components import synthdata
from lib.class_helper import CorpusConfig

TINY_CORPUS = {
    "n_samples": 4,
    "n_units": 4,
    "n_clusters": 4,
    "lip_layers": 2,
    "lip_dim": 4,
    "face_dim": 3,
    "expr_dim": 3,
    "speaker_dim": 3,
    "timbre_dim": 3,
    "content_dim": 4,
    "min_frames": 8,
    "max_frames": 10,
    "noise": 0.1,
    "unit_frames": 2,
    "harmonics": 4,
}


def tiny_settings(root):
    """The default config shrunk to sizes that train in seconds, writing below root."""
    with open(config_helper.FILE_PATH, "r") as f:
        settings = yaml.safe_load(f)
    settings = copy.deepcopy(settings)
    settings["logging"]["log_level_file"] = "none"
    settings["paths"] = {
        "corpus": os.path.join(str(root), "corpus"),
        "checkpoints": os.path.join(str(root), "checkpoints"),
        "out": os.path.join(str(root), "out"),
    }
    settings["corpus"] = dict(TINY_CORPUS)
    settings["encoder"].update(
        {"hidden_dim": 8, "heads": 2, "mapper_layers": 1, "output_layers": 1, "predictor_blocks": 2, "kernel_size": 3}
    )
    settings["decoder"] = {"channels": [8, 16], "time_embedding_dim": 8, "heads": 2, "kernel_size": 3}
    settings["sampler"]["steps"] = 3
    settings["training"].update({"steps": 6, "crop_frames": 6, "checkpoint_interval": 3, "log_flush_interval": 2})
    settings["eval"] = {"samples": 2, "griffin_lim_iters": 4}
    settings["sweep"]["betas"] = [0.0, 0.7, 0.7]
    settings["ablate"]["steps"] = 2
    settings["toy_flow"].update(
        {"steps": 20, "hidden_dim": 16, "batch_size": 32, "samples_per_class": 10, "sample_steps": 4, "reference_steps": 20}
    )
    return settings


@pytest.fixture
def tiny_config(tmp_path):
    """Writes the tiny config to tmp_path and returns its path."""
    path = os.path.join(str(tmp_path), "hierflow_config.yml")
    with open(path, "w") as f:
        yaml.safe_dump(tiny_settings(tmp_path), f)
    return path


@pytest.fixture
def tiny_run_config(tmp_path):
    return config_helper.build_run_config(tiny_settings(tmp_path))


@pytest.fixture(scope="session")
def tiny_corpus():
    """Four samples with targets plus the fitted k-means model (generated once per session)."""
    cfg = CorpusConfig(**TINY_CORPUS)
    samples = synthdata.gen_corpus(7, cfg.n_samples, cfg)
    km = synthdata.kmeans_fit(np.concatenate([s.acoustic_content for s in samples]), cfg.n_clusters, seed=7)
    for sample in samples:
        sample.targets = synthdata.make_targets(sample, km)
    mean, std = synthdata.energy_statistics(samples)
    return samples, km, {"energy_mean": mean, "energy_std": std}
