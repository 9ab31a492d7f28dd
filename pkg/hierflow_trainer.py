# hierflow
# This module is the worker module that handles the main logic of the hierflow commands.
#
# The main logic is as follows:
#
# - Build the model (hierarchical encoder + vector field network) from a RunConfig, seeded
# - Train it: every step draws a corpus sample and a random contiguous crop, encodes it with teacher forcing,
#   computes L_total = L_cfm + L_enc + lambda_c L_c + lambda_t L_t + lambda_p L_p and takes an AdamW step
# - - The loss log is flushed to CSV every few steps, checkpoints are written periodically and at the end
# - Synthesize: encode in infer mode and integrate the flow with the CFG Euler solver
# - Evaluate: compare the generated mel/audio with the corpus targets (F0, energy, timbre, units)
# - The sweep, ablation, training check and toy flow experiments are built from these pieces
# - Gradient verification runs central finite differences over every layer type and encoder stage

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import torch
from torch import nn

import lib.logging_helper as logging_helper
from components import audio_signal, diffcore, flowdec, hierenc, synthdata
from lib.class_helper import (
    DecoderConfig,
    EncoderConfig,
    MelSpectrogram,
    MetricsRow,
    OptimizerConfig,
    RunConfig,
    SamplerConfig,
    SyntheticSample,
    ValidationError,
)
from lib.generic_helper import derive_seed, ensure_dir, read_csv, worker_cap, write_csv

LOSS_COLUMNS = ["step", "L_c", "L_t", "L_p", "L_cfm", "L_enc", "L_total", "lr"]
LAYER_WEIGHT_COLUMNS = ["layer_index", "softmax_weight"]
TOY_COLUMNS = ["class_index", "true_mean_x", "true_mean_y", "sampled_mean_x", "sampled_mean_y", "mean_error"]
ABLATION_LEGS = [
    ("full", {}),
    ("w/o Hier", {"hier": False}),
    ("w/o Timbre", {"timbre_stage": False}),
    ("w/o Prosody", {"prosody_stage": False}),
    ("w/o Face ID", {"face_id": False}),
    ("w/o FE", {"expr": False}),
    ("w/o WS", {"weighted_sum": False}),
    ("w/o MP", {"masked_pred": False}),
]
LOSS_FINAL_WINDOW = 100

mlog = logging_helper.Log("hierflow_trainer")


class VTSModel(nn.Module):
    """The trainable video-to-speech model: hierarchical encoder plus flow matching decoder."""

    def __init__(self, run_cfg: RunConfig, energy_mean=0.0, energy_std=1.0):
        super().__init__()
        torch.manual_seed(run_cfg.seed)
        self.encoder = hierenc.HierarchicalEncoder(run_cfg.encoder, energy_mean, energy_std)
        self.decoder = flowdec.VectorFieldNet(run_cfg.decoder)


def build_model(run_cfg: RunConfig, meta):
    """Builds a freshly initialized model using the energy statistics from the corpus metadata."""
    return VTSModel(run_cfg, meta.get("energy_mean", 0.0), meta.get("energy_std", 1.0))


def checkpoint_path(checkpoint_dir, step=None):
    if step is None:
        return os.path.join(checkpoint_dir, "latest.bin")
    return os.path.join(checkpoint_dir, f"step_{step:06d}.bin")


def load_model(run_cfg: RunConfig, meta, path):
    """Builds a model and restores its parameters from a checkpoint. Returns (model, step)."""
    model = build_model(run_cfg, meta)
    step, _ = diffcore.load_checkpoint(path, model)
    model.eval()
    return model, step


############################################
#### Training ####
############################################


def draw_crop(sample: SyntheticSample, crop_frames, rng):
    """Random contiguous crop start; crops longer than the sample are clamped to its length."""
    frames = min(crop_frames, sample.video_frames)
    start = int(rng.integers(0, sample.video_frames - frames + 1))
    return start, frames


def training_step(model, sample, start, frames, run_cfg: RunConfig, generator):
    """Forward pass of one training step. Returns (L_total, dict of the loss components)."""
    encoding, losses = model.encoder.encode(sample, mode="train", start=start, frames=frames)
    x1 = torch.as_tensor(sample.mel.frames[2 * start : 2 * (start + frames)])
    cfm = flowdec.cfm_loss(model.decoder, x1, encoding.mu, run_cfg.flow, generator)
    enc = flowdec.encoder_nll_loss(encoding.mu, x1)
    total = flowdec.total_loss(cfm, enc, losses.content, losses.timbre, losses.prosody, run_cfg.flow)
    components = {
        "L_c": float(losses.content),
        "L_t": float(losses.timbre),
        "L_p": float(losses.prosody),
        "L_cfm": float(cfm),
        "L_enc": float(enc),
        "L_total": float(total),
    }
    return total, components


def train(run_cfg: RunConfig, samples, meta, steps, out_dir, checkpoint_dir=None, resume=None, label="train"):
    """Trains a model and writes the loss log, checkpoints and the layer weights.

    Args:
        run_cfg (RunConfig): The run settings
        samples (List[SyntheticSample]): Training samples with targets
        meta (dict): The corpus metadata (energy statistics)
        steps (int): Number of optimizer steps (in total, including resumed ones)
        out_dir (str): Directory of loss_log.csv and layer_weights.csv
        checkpoint_dir (str): Directory of the checkpoints (None: no checkpoints)
        resume (str): Checkpoint to continue from
        label (str): Name used in the log lines

    Returns:
        tuple: (model, mean L_total over the last logged steps)
    """
    if not samples:
        raise ValidationError("training needs at least one sample")
    ensure_dir(out_dir)
    if checkpoint_dir:
        ensure_dir(checkpoint_dir)
    log_path = os.path.join(out_dir, "loss_log.csv")

    model = build_model(run_cfg, meta)
    model.train()
    optimizer = diffcore.AdamW(model.named_parameters(), run_cfg.optimizer)
    first_step = 0
    if resume:
        first_step, _ = diffcore.load_checkpoint(resume, model, optimizer)
        mlog.info(f"[{label}] Resuming from {resume} at step {first_step}")
        if os.path.isfile(log_path):
            log = read_csv(log_path)
            write_csv(log_path, log[log["step"] <= first_step].to_dict("records"), columns=LOSS_COLUMNS)
    elif os.path.exists(log_path):
        os.remove(log_path)

    buffer = []
    recent = []
    for step in range(first_step + 1, steps + 1):
        rng = np.random.default_rng(derive_seed(run_cfg.seed, step))
        generator = torch.Generator().manual_seed(derive_seed(run_cfg.seed, step, 1))
        sample = samples[int(rng.integers(len(samples)))]
        start, frames = draw_crop(sample, run_cfg.crop_frames, rng)

        total, components = training_step(model, sample, start, frames, run_cfg, generator)
        total.backward()
        lr = optimizer.lr
        optimizer.step()

        row = {"step": step, **components, "lr": lr}
        buffer.append(row)
        recent.append(components["L_total"])
        recent = recent[-LOSS_FINAL_WINDOW:]
        if len(buffer) >= run_cfg.log_flush_interval or step == steps:
            write_csv(log_path, buffer, columns=LOSS_COLUMNS, append=True)
            mlog.info(
                f"[{label}] step {step}: L_total {components['L_total']:.4f} L_cfm {components['L_cfm']:.4f} "
                f"L_enc {components['L_enc']:.2f} L_c {components['L_c']:.4f} L_t {components['L_t']:.4f} "
                f"L_p {components['L_p']:.4f} lr {lr:.3e}"
            )
            buffer = []
        if checkpoint_dir and (step % run_cfg.checkpoint_interval == 0 or step == steps):
            diffcore.save_checkpoint(checkpoint_path(checkpoint_dir, step), model, optimizer, step)
            diffcore.save_checkpoint(checkpoint_path(checkpoint_dir), model, optimizer, step)

    export_layer_weights(model, out_dir)
    model.eval()
    loss_final = float(np.mean(recent)) if recent else None
    return model, loss_final


def export_layer_weights(model, out_dir):
    """Writes layer_weights.csv if the weighted layer summation is on. Returns the path or None."""
    weights = model.encoder.layer_weight_table()
    if weights is None:
        return None
    path = os.path.join(out_dir, "layer_weights.csv")
    write_csv(path, [{"layer_index": i, "softmax_weight": float(w)} for i, w in enumerate(weights)], columns=LAYER_WEIGHT_COLUMNS)
    return path


############################################
#### Synthesis and evaluation ####
############################################


def synthesize(model, sample: SyntheticSample, sampler_cfg: SamplerConfig, prior="standard"):
    """Encodes a sample in infer mode and samples a mel-spectrogram. Returns (mel, VisualEncoding)."""
    with torch.no_grad():
        encoding, _ = model.encoder.encode(sample, mode="infer")
    mel = flowdec.euler_sample(model.decoder, encoding.mu, sampler_cfg, prior=prior)
    return MelSpectrogram(mel.numpy()), encoding


def sample_metrics(label, generated_mel, generated_audio, sample: SyntheticSample, unit_pred=None):
    """Metrics of one generated sample against the corpus targets.

    F0 is estimated on the generated audio, energy taken from the generated mel, and the timbre cosine compares
    the timbre embedding of the re-extracted generated mel with the one of the target mel.
    """
    targets = sample.targets
    if targets is None:
        raise ValidationError(f"{sample.sample_id} has no targets to evaluate against")
    frames = targets.n_frames
    f0, _ = audio_signal.estimate_pitch(generated_audio, n_frames=frames)
    round_trip = audio_signal.log_mel(generated_audio)
    round_trip = round_trip.trimmed(min(frames, round_trip.n_frames))
    unit_accuracy = None
    if unit_pred is not None:
        unit_accuracy = float(np.mean(np.asarray(unit_pred)[:frames] == targets.content_units))
    return MetricsRow(
        label,
        rmse_f0=audio_signal.rmse_f0(f0, targets.f0_hz),
        mae_energy=audio_signal.mae_energy(audio_signal.energy(generated_mel.trimmed(frames)), targets.energy),
        timbre_cosine=audio_signal.cosine_sim(
            synthdata.timbre_embedding(round_trip), synthdata.timbre_embedding(sample.mel)
        ),
        unit_accuracy=unit_accuracy,
        n_samples=1,
    )


def aggregate(label, rows, loss_final=None):
    """Mean of every metric over the rows (absent values are skipped)."""
    values = {}
    for column in ["rmse_f0", "mae_energy", "timbre_cosine", "unit_accuracy"]:
        present = [getattr(row, column) for row in rows if getattr(row, column) is not None]
        values[column] = float(np.mean(present)) if present else None
    return MetricsRow(label, loss_final=loss_final, n_samples=len(rows), **values)


def evaluate_model(model, samples, sampler_cfg: SamplerConfig, griffin_lim_iters, label, loss_final=None, prior="standard"):
    """Synthesizes every sample, inverts it with Griffin-Lim and returns (per-sample rows, aggregate row)."""
    rows = []
    for sample in samples:
        mel, encoding = synthesize(model, sample, sampler_cfg, prior)
        audio = audio_signal.griffin_lim(mel, griffin_lim_iters)
        rows.append(sample_metrics(f"{label}/{sample.sample_id}", mel, audio, sample, encoding.unit_pred.numpy()))
    return rows, aggregate(label, rows, loss_final)


def write_metrics(path, rows):
    write_csv(path, [row.to_dict() for row in rows], columns=MetricsRow.COLUMNS)


############################################
#### Experiments ####
############################################


def run_ablation_leg(run_cfg: RunConfig, flags, label, samples, meta, eval_samples, out_dir, threads=None):
    """Trains and evaluates one ablation leg. Returns its aggregate MetricsRow."""
    if threads:
        torch.set_num_threads(threads)
    leg_cfg = RunConfig(**{**vars(run_cfg), "encoder": run_cfg.encoder.with_flags(**flags)})
    model, loss_final = train(leg_cfg, samples, meta, run_cfg.ablate_steps, out_dir, label=label)
    _, row = evaluate_model(model, eval_samples, leg_cfg.sampler, leg_cfg.griffin_lim_iters, label, loss_final, leg_cfg.flow.prior)
    return row


def leg_directory(out_dir, label):
    return os.path.join(out_dir, "ablate", label.replace("w/o ", "wo_").replace(" ", "_").lower())


def run_ablation(run_cfg: RunConfig, samples, meta, out_dir):
    """Runs the full model and the seven single-flag ablations under identical seeds.

    Legs run in parallel processes when the worker cap allows it.
    """
    eval_samples = samples[: run_cfg.eval_samples]
    workers = min(worker_cap(), len(ABLATION_LEGS))
    if workers > 1:
        mlog.info(f"Running {len(ABLATION_LEGS)} ablation legs on {workers} processes")
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(
                    run_ablation_leg, run_cfg, flags, label, samples, meta, eval_samples, leg_directory(out_dir, label), 1
                )
                for label, flags in ABLATION_LEGS
            ]
            rows = [future.result() for future in futures]
    else:
        rows = [
            run_ablation_leg(run_cfg, flags, label, samples, meta, eval_samples, leg_directory(out_dir, label))
            for label, flags in ABLATION_LEGS
        ]
    return rows


def loss_ratio(log, steps):
    """Mean L_total of the last `window` steps divided by the mean over steps window+1 .. 2 window.

    window is LOSS_FINAL_WINDOW, shrunk to a quarter of the run for short runs.
    """
    window = max(1, min(LOSS_FINAL_WINDOW, steps // 4))
    early = log[(log["step"] > window) & (log["step"] <= 2 * window)]["L_total"]
    final = log[log["step"] > steps - window]["L_total"]
    if early.empty or final.empty:
        raise ValidationError(f"the loss log of {steps} steps is too short to compare")
    return float(final.mean() / early.mean())


def check_training(run_cfg: RunConfig, samples, meta, out_dir):
    """Trains a model and compares it with its untrained initialization.

    Both models share the seeded initialization and are evaluated on the first eval_samples samples with the
    configured sampler. Writes loss_log.csv and training_check.csv (rows 'untrained' and 'trained') to out_dir.

    Returns:
        dict: 'loss_ratio', the 'untrained' and 'trained' MetricsRows and 'improved' (metric -> bool)
    """
    eval_samples = samples[: run_cfg.eval_samples]
    untrained = build_model(run_cfg, meta)
    untrained.eval()
    _, before = evaluate_model(
        untrained, eval_samples, run_cfg.sampler, run_cfg.griffin_lim_iters, "untrained", prior=run_cfg.flow.prior
    )

    model, loss_final = train(run_cfg, samples, meta, run_cfg.train_steps, out_dir, label="check")
    _, after = evaluate_model(
        model, eval_samples, run_cfg.sampler, run_cfg.griffin_lim_iters, "trained", loss_final, run_cfg.flow.prior
    )
    write_metrics(os.path.join(out_dir, "training_check.csv"), [before, after])

    def better(metric, higher=False):
        a, b = getattr(before, metric), getattr(after, metric)
        if a is None or b is None:
            return False
        return b > a if higher else b < a

    results = {
        "loss_ratio": loss_ratio(read_csv(os.path.join(out_dir, "loss_log.csv")), run_cfg.train_steps),
        "untrained": before,
        "trained": after,
        "improved": {
            "rmse_f0": better("rmse_f0"),
            "mae_energy": better("mae_energy"),
            "timbre_cosine": better("timbre_cosine", higher=True),
        },
    }
    mlog.info(f"[check] loss ratio {results['loss_ratio']:.3f}, improved: {results['improved']}")
    return results


def run_toy_flow(toy_cfg, flow_cfg, out_dir=None):
    """Trains the 2-D toy flow on the four-component Gaussian mixture and measures it.

    Args:
        toy_cfg (dict): The 'toy_flow' config section
        flow_cfg (FlowConfig): sigma_min, drop probability and time schedule
        out_dir (str): Directory of toy_flow.csv (None: nothing is written)

    Returns:
        dict: per-class 'sampled_means' and 'errors', 'trajectory_gap', 'endpoint_norm', 'gap_ratio',
        'cfg_identity_error' and 'cfg_changes_output'
    """
    seed = toy_cfg["seed"]
    torch.manual_seed(seed)
    net = flowdec.ToyVectorField(hidden_dim=toy_cfg["hidden_dim"])
    optimizer = diffcore.AdamW(net.named_parameters(), OptimizerConfig(lr=toy_cfg["lr"], weight_decay=0.0))
    generator = torch.Generator().manual_seed(seed)
    per_class = max(1, toy_cfg["batch_size"] // len(flowdec.TOY_MEANS))

    for step in range(1, toy_cfg["steps"] + 1):
        x1, labels, _ = flowdec.toy_mixture(generator, per_class)
        loss = flowdec.cfm_loss(net, x1, labels, flow_cfg, generator, item_dims=1)
        loss.backward()
        optimizer.step()
        if step % 500 == 0 or step == toy_cfg["steps"]:
            mlog.info(f"[toy-flow] step {step}: L_cfm {loss.item():.4f}")

    n = toy_cfg["samples_per_class"]
    _, labels, classes = flowdec.toy_mixture(torch.Generator().manual_seed(seed + 1), n)
    sampler = SamplerConfig(steps=toy_cfg["sample_steps"], beta=0.0, seed=seed + 2)
    shape = (labels.shape[0], 2)
    points = flowdec.euler_sample(net, labels, sampler, shape=shape)
    true_means = torch.tensor(flowdec.TOY_MEANS)
    sampled_means = torch.stack([points[classes == k].mean(dim=0) for k in range(len(flowdec.TOY_MEANS))])
    errors = torch.linalg.norm(sampled_means - true_means, dim=-1)

    gap, norm = flowdec.trajectory_gap(
        net, labels, [seed + 3], toy_cfg["sample_steps"], toy_cfg["reference_steps"], shape=shape
    )

    # beta = 0 against the plain conditional solver, and beta > 0 against beta = 0
    x0 = torch.randn(shape, generator=torch.Generator().manual_seed(seed + 4))
    guided_zero = flowdec.euler_sample(net, labels, SamplerConfig(steps=toy_cfg["sample_steps"], beta=0.0), x0=x0)
    with torch.no_grad():
        plain = flowdec.euler_integrate(lambda x, t: net(x, labels, t), x0, toy_cfg["sample_steps"])
    guided = flowdec.euler_sample(net, labels, SamplerConfig(steps=toy_cfg["sample_steps"], beta=1.0), x0=x0)

    results = {
        "sampled_means": sampled_means.numpy(),
        "errors": errors.numpy(),
        "trajectory_gap": gap,
        "endpoint_norm": norm,
        "gap_ratio": gap / norm if norm > 0 else float("inf"),
        "cfg_identity_error": float((guided_zero - plain).abs().max()),
        "cfg_changes_output": bool((guided - guided_zero).abs().max() > 0),
    }
    if out_dir:
        ensure_dir(out_dir)
        rows = [
            {
                "class_index": k,
                "true_mean_x": flowdec.TOY_MEANS[k][0],
                "true_mean_y": flowdec.TOY_MEANS[k][1],
                "sampled_mean_x": float(sampled_means[k, 0]),
                "sampled_mean_y": float(sampled_means[k, 1]),
                "mean_error": float(errors[k]),
            }
            for k in range(len(flowdec.TOY_MEANS))
        ]
        write_csv(os.path.join(out_dir, "toy_flow.csv"), rows, columns=TOY_COLUMNS)
    mlog.info(
        f"[toy-flow] max mean error {errors.max().item():.4f}, trajectory gap ratio {results['gap_ratio']:.4f}, "
        f"CFG identity error {results['cfg_identity_error']:.3e}"
    )
    return results


############################################
#### Gradient verification ####
############################################

GRADCHECK_COLUMNS = ["check", "seed", "max_relative_error", "status"]
GRADCHECK_SEEDS = 3


def _gradcheck_encoder():
    cfg = EncoderConfig(
        hidden_dim=4,
        n_units=3,
        lip_layers=2,
        lip_dim=3,
        face_dim=2,
        expr_dim=2,
        timbre_dim=2,
        heads=2,
        mapper_layers=1,
        output_layers=1,
        predictor_blocks=2,
        kernel_size=3,
    )
    return hierenc.HierarchicalEncoder(cfg, energy_mean=1.0, energy_std=2.0)


def _stage_tensors(module, prefixes, **inputs):
    tensors = {f"input/{name}": value for name, value in inputs.items()}
    for name, param in module.named_parameters():
        if name.startswith(prefixes):
            tensors[f"param/{name}"] = param
    return tensors


def gradcheck_cases(seed=0):
    """Builds the registered gradient checks: every layer type, the losses, the three encoder stages, the
    mappers, the layer sum with upsampling, the output head and the vector field network on a 2-frame input.

    Returns:
        list: (name, fn, tensors) tuples for diffcore.relative_errors()
    """
    torch.manual_seed(seed)
    cases = []

    def add(name, fn, tensors):
        cases.append((name, fn, tensors))

    linear = diffcore.Linear(3, 2)
    x = torch.randn(4, 3)
    add("Linear", lambda m=linear, x=x: m(x), diffcore.module_tensors(linear, x=x))

    conv = diffcore.Conv1d(3, 2, 3)
    x = torch.randn(5, 3)
    add("Conv1d", lambda m=conv, x=x: m(x), diffcore.module_tensors(conv, x=x))

    masked = diffcore.Conv1d(3, 2, 3, masked=True)
    x = torch.randn(5, 3)
    add("Conv1d (masked)", lambda m=masked, x=x: m(x), diffcore.module_tensors(masked, x=x))

    transposed = diffcore.TransposedConv1d(3, 2)
    x = torch.randn(4, 3)
    add("TransposedConv1d", lambda m=transposed, x=x: m(x), diffcore.module_tensors(transposed, x=x))

    snake = diffcore.SnakeBeta(3)
    with torch.no_grad():
        snake.log_alpha.uniform_(-0.5, 0.5)
        snake.log_beta.uniform_(-0.5, 0.5)
    x = torch.randn(5, 3)
    add("SnakeBeta", lambda m=snake, x=x: m(x), diffcore.module_tensors(snake, x=x))

    attention = diffcore.MultiHeadSelfAttention(8, 2)
    x = torch.randn(3, 8)
    add("MultiHeadSelfAttention", lambda m=attention, x=x: m(x), diffcore.module_tensors(attention, x=x))

    block = diffcore.AttentionBlock(8, 2, activation="snake")
    x = torch.randn(3, 8)
    add("AttentionBlock", lambda m=block, x=x: m(x), diffcore.module_tensors(block, x=x))

    logits = torch.randn(4, 5)
    target = torch.softmax(torch.randn(4, 5), dim=-1)
    add("cross_entropy", lambda l=logits, t=target: diffcore.cross_entropy(l, t), {"input/logits": logits})

    pred, reference = torch.randn(6), torch.randn(6)
    add("mae_loss", lambda p=pred, r=reference: diffcore.mae_loss(p, r), {"input/pred": pred})

    mu, x1 = torch.randn(2, 80), torch.randn(2, 80)
    add("encoder_nll_loss", lambda m=mu, x=x1: flowdec.encoder_nll_loss(m, x), {"input/mu": mu})

    encoder = _gradcheck_encoder()
    h_l = torch.randn(4, 4)
    units = torch.tensor([0, 2, 1, 2])

    def content_fn(e=encoder, h=h_l, u=units):
        h_c, loss, _ = e.content_stage(h, u, mode="train")
        return torch.cat([h_c.reshape(-1), loss.reshape(1)])

    add(
        "content stage",
        content_fn,
        _stage_tensors(encoder, ("content_predictor", "unit_embedding"), h_l=h_l),
    )

    face, h_c2t, timbre = torch.randn(2), torch.randn(4, 4), torch.randn(2)

    def timbre_fn(e=encoder, f=face, h=h_c2t, t=timbre):
        embedding, loss, _ = e.timbre_stage(f, h, t, mode="train")
        return torch.cat([embedding.reshape(-1), loss.reshape(1)])

    add(
        "timbre stage",
        timbre_fn,
        _stage_tensors(encoder, ("timbre_fusion", "timbre_predictor", "timbre_embedding"), face_id=face, h_c2t=h_c2t),
    )

    expr, h_c2p = torch.randn(4, 2), torch.randn(4, 4)
    pitch, frame_energy = torch.randn(4), 1.0 + torch.rand(4)

    def prosody_fn(e=encoder, x=expr, h=h_c2p, p=pitch, en=frame_energy):
        embedding, loss, _, _ = e.prosody_stage(x, h, p, en, mode="train")
        return torch.cat([embedding.reshape(-1), loss.reshape(1)])

    add(
        "prosody stage",
        prosody_fn,
        _stage_tensors(
            encoder,
            ("prosody_fusion", "pitch_predictor", "energy_predictor", "pitch_embedding", "energy_embedding"),
            expr=expr,
            h_c2p=h_c2p,
        ),
    )

    lip = torch.randn(2, 3, 3)
    with torch.no_grad():
        encoder.layer_weights.uniform_(-0.5, 0.5)
    add(
        "weighted layer sum + upsample",
        lambda e=encoder, x=lip: e.upsample(e.weighted_layer_sum(x)),
        _stage_tensors(encoder, ("layer_weights", "upsample"), lip_layers=lip),
    )

    h = torch.randn(4, 4)
    add("c2t mapper", lambda e=encoder, x=h: e.c2t_map(x), _stage_tensors(encoder, ("c2t.",), h=h))
    h = torch.randn(4, 4)
    add("t2p mapper", lambda e=encoder, x=h: e.t2p_map(x), _stage_tensors(encoder, ("t2p.",), h=h))
    h = torch.randn(3, 4)
    add("finalize_mu", lambda e=encoder, x=h: e.finalize_mu(x), _stage_tensors(encoder, ("output_stack", "projection"), h=h))

    net = flowdec.VectorFieldNet(DecoderConfig(n_feats=4, channels=(4, 8), time_embedding_dim=4, heads=2))
    x_t, condition = torch.randn(2, 4), torch.randn(2, 4)
    add(
        "VectorFieldNet",
        lambda n=net, x=x_t, c=condition: n(x, c, 0.3),
        diffcore.module_tensors(net, x_t=x_t, condition=condition),
    )
    return cases


def gradcheck_seeds(seed):
    """The seed itself followed by GRADCHECK_SEEDS - 1 seeds derived from it."""
    return [int(seed)] + [derive_seed(seed, k) for k in range(1, GRADCHECK_SEEDS)]


def run_gradcheck(fault=None, seed=0, threshold=diffcore.GRADCHECK_THRESHOLD):
    """Runs every registered gradient check.

    Args:
        fault (str): Name of a check whose first analytic gradient is doubled (test hook)
        seed (int): Seed of the random inputs and projections
        threshold (float): Maximum allowed relative error

    Returns:
        list: One dict per check with the columns of GRADCHECK_COLUMNS
    """
    cases = gradcheck_cases(seed)
    names = [name for name, _, _ in cases]
    if fault is not None and fault not in names:
        raise ValidationError(f"Unknown gradient check '{fault}'. Available: {names}")

    report = []
    for name, fn, tensors in cases:
        faulty = next(iter(tensors)) if name == fault else None
        error = diffcore.gradient_check(fn, tensors, seed=seed, fault=faulty)
        status = "PASS" if error <= threshold else "FAIL"
        mlog.info(f"[gradcheck] {name} (seed {seed}): max relative error {error:.3e} {status}")
        report.append({"check": name, "seed": seed, "max_relative_error": error, "status": status})
    return report
