# hierflow
# This module is the user interactive start point for the hierflow project.
# It will load the provided arguments and the config file and dispatch to one of the commands:
# gen-data, train, sample, eval, sweep-guidance, ablate, gradcheck and toy-flow.
#
# Exit codes: 0 on success, 1 if a gradient check or a metric fails, 2 on usage, configuration and IO errors.

import argparse
import os
import sys

import numpy as np
import torch

import hierflow_trainer
import lib.config_helper as config_helper
import lib.logging_helper as logging_helper
from components import audio_signal, diffcore, flowdec, synthdata
from lib.class_helper import (
    ConfigurationError,
    CorpusError,
    GradientCheckError,
    MetricsRow,
    SamplerConfig,
    ValidationError,
)
from lib.generic_helper import dedup, ensure_dir, read_csv, write_csv

VERSION = "0.1.0"
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

UNIT_COLUMNS = ["frame", "unit"]
COMPARE_COLUMNS = ["sample_id", "steps_a", "steps_b", "trajectory_gap", "endpoint_norm"]

mlog = logging_helper.Log("hierflow")


def add_arguments():
    """Builds the argument parser with one subcommand per hierflow command.

    Returns:
        parser (argparse.ArgumentParser): The parser
    """
    parser = argparse.ArgumentParser(prog="hierflow", description="hierflow - Hierarchical video-to-speech with flow matching")
    parser.add_argument("--version", action="version", version=f"hierflow {VERSION}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Path of the YAML config file (default: configs/hierflow_config.yml)")
    common.add_argument("--seed", type=int, default=None, help="Override the seed of the config")
    common.add_argument("--steps", type=int, default=None, help="Override the number of training (or sampling) steps")
    common.add_argument("--beta", type=float, default=None, help="Override the guidance scale")
    common.add_argument("--out", default=None, help="Override the output directory")
    common.add_argument("--debug", action="store_true", help="Enable debug mode")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("gen-data", parents=[common], help="Generate the synthetic corpus (--out sets the corpus directory)")

    train = commands.add_parser("train", parents=[common], help="Train the model on the corpus")
    train.add_argument("--resume", default=None, help="Checkpoint to continue training from")

    sample = commands.add_parser("sample", parents=[common], help="Generate mel-spectrograms and audio for corpus samples")
    sample.add_argument("sample_ids", nargs="*", help="Sample ids (default: the first eval.samples samples)")
    sample.add_argument("--checkpoint", default=None, help="Checkpoint to sample from (default: latest.bin)")
    sample.add_argument("--compare-steps", type=int, default=None, help="Also report the trajectory gap to this many steps")
    sample.add_argument("--no-audio", action="store_true", help="Skip the Griffin-Lim audio")

    evaluate = commands.add_parser("eval", parents=[common], help="Evaluate the outputs of sample runs")
    evaluate.add_argument("run_dirs", nargs="+", help="Output directories of 'sample' runs")

    sweep = commands.add_parser("sweep-guidance", parents=[common], help="Evaluate a grid of guidance scales")
    sweep.add_argument("--betas", type=float, nargs="+", default=None, help="Guidance scales (default: sweep.betas)")
    sweep.add_argument("--checkpoint", default=None, help="Checkpoint to sample from (default: latest.bin)")

    commands.add_parser("ablate", parents=[common], help="Train and evaluate the full model and every single-flag ablation")

    gradcheck = commands.add_parser("gradcheck", parents=[common], help="Verify the gradients of every layer and stage")
    gradcheck.add_argument("--inject-fault", default=None, help="Double the analytic gradient of one check (test hook)")

    commands.add_parser("toy-flow", parents=[common], help="Train and measure the 2-D toy conditional flow")
    return parser


def load_settings(args):
    """Loads the config file and builds the RunConfig with the command line overrides.

    Returns:
        tuple: (settings dict, RunConfig)
    """
    settings = config_helper.Config(args.config).cfg
    # Sampling commands read --steps as the number of Euler steps
    steps = args.steps if args.command in ["train", "gen-data", "ablate"] else None
    run_cfg = config_helper.build_run_config(settings, seed=args.seed, steps=steps, beta=args.beta, out=args.out)
    if args.command == "ablate" and args.steps is not None:
        run_cfg.ablate_steps = args.steps
    if args.command in ["sample", "sweep-guidance"] and args.steps is not None:
        run_cfg.sampler = SamplerConfig(steps=args.steps, beta=run_cfg.sampler.beta, seed=run_cfg.sampler.seed)
    return settings, run_cfg


def resolve_checkpoint(run_cfg, path=None):
    path = path or hierflow_trainer.checkpoint_path(run_cfg.checkpoint_dir)
    if not os.path.isfile(path):
        raise CorpusError(f"Checkpoint {path} does not exist. Run 'hierflow train' first.")
    return path


############################################
#### Commands ####
############################################


def cmd_gen_data(settings, run_cfg, args):
    """Generates the corpus, fits k-means on the content stream, derives the targets and writes everything."""
    path = args.out or run_cfg.corpus_path
    ensure_dir(path)
    cfg = run_cfg.corpus
    samples = synthdata.gen_corpus(run_cfg.seed, cfg.n_samples, cfg)
    km = synthdata.kmeans_fit(np.concatenate([s.acoustic_content for s in samples]), cfg.n_clusters, seed=run_cfg.seed)
    mlog.info(f"k-means converged after {len(km.objective_trace)} assignment steps (objective {km.objective_trace[-1]:.6g})")
    for sample in samples:
        sample.targets = synthdata.make_targets(sample, km)
    synthdata.save_corpus(path, samples, km, run_cfg.seed, cfg)
    print(f"Wrote {len(samples)} samples to {path}")
    return EXIT_OK


def cmd_train(settings, run_cfg, args):
    samples, _, meta = synthdata.load_corpus(run_cfg.corpus_path)
    ensure_dir(run_cfg.out_dir)
    _, loss_final = hierflow_trainer.train(
        run_cfg,
        samples,
        meta,
        run_cfg.train_steps,
        run_cfg.out_dir,
        checkpoint_dir=run_cfg.checkpoint_dir,
        resume=args.resume,
    )
    print(f"Trained {run_cfg.train_steps} steps, final mean L_total {loss_final}")
    return EXIT_OK


def _select_samples(run_cfg, sample_ids):
    manifest = synthdata.load_manifest(run_cfg.corpus_path)
    known = list(manifest["sample_id"])
    sample_ids = sample_ids or known[: run_cfg.eval_samples]
    unknown = [sample_id for sample_id in sample_ids if sample_id not in known]
    if unknown:
        raise CorpusError(f"Unknown sample id(s) {unknown} in corpus {run_cfg.corpus_path}")
    return [synthdata.load_sample(os.path.join(run_cfg.corpus_path, sample_id), sample_id) for sample_id in sample_ids]


def cmd_sample(settings, run_cfg, args):
    """Encodes samples in infer mode, samples mel-spectrograms and writes mel.csv, units.csv and audio.wav."""
    meta = synthdata.load_corpus_meta(run_cfg.corpus_path)
    samples = _select_samples(run_cfg, args.sample_ids)
    model, step = hierflow_trainer.load_model(run_cfg, meta, resolve_checkpoint(run_cfg, args.checkpoint))
    mlog.info(f"Sampling {len(samples)} samples with the checkpoint of step {step} ({run_cfg.sampler.steps} steps, beta {run_cfg.sampler.beta})")

    comparison = []
    for sample in samples:
        directory = ensure_dir(os.path.join(run_cfg.out_dir, "samples", sample.sample_id))
        mel, encoding = hierflow_trainer.synthesize(model, sample, run_cfg.sampler, run_cfg.flow.prior)
        audio_signal.write_mel_csv(os.path.join(directory, "mel.csv"), mel)
        units = encoding.unit_pred.numpy()
        write_csv(
            os.path.join(directory, "units.csv"),
            {"frame": np.arange(len(units)), "unit": units},
            columns=UNIT_COLUMNS,
        )
        if not args.no_audio:
            audio = audio_signal.griffin_lim(mel, run_cfg.griffin_lim_iters)
            audio_signal.write_wav(os.path.join(directory, "audio.wav"), audio)
        if args.compare_steps:
            gap, norm = flowdec.trajectory_gap(
                model.decoder,
                encoding.mu,
                [run_cfg.sampler.seed],
                run_cfg.sampler.steps,
                args.compare_steps,
                run_cfg.sampler.beta,
                run_cfg.flow.prior,
            )
            comparison.append(
                {
                    "sample_id": sample.sample_id,
                    "steps_a": run_cfg.sampler.steps,
                    "steps_b": args.compare_steps,
                    "trajectory_gap": gap,
                    "endpoint_norm": norm,
                }
            )
            mlog.info(f"{sample.sample_id}: {run_cfg.sampler.steps} vs {args.compare_steps} steps gap {gap:.4f} (norm {norm:.4f})")
        mlog.debug(f"Wrote {directory}")

    if comparison:
        write_csv(os.path.join(run_cfg.out_dir, "compare_steps.csv"), comparison, columns=COMPARE_COLUMNS)
    print(f"Wrote {len(samples)} samples to {os.path.join(run_cfg.out_dir, 'samples')}")
    return EXIT_OK


def evaluate_run_dir(run_cfg, run_dir):
    """Evaluates the outputs of one 'sample' run against the corpus targets.

    The prosody contours of every generated sample are written to <out>/contours/<run>/<sample_id>.csv.

    Returns:
        tuple: (per-sample rows, aggregate row) or (None, absent row) if the directory is missing
    """
    label = os.path.basename(os.path.normpath(run_dir))
    samples_dir = os.path.join(run_dir, "samples")
    if not os.path.isdir(samples_dir):
        mlog.warning(f"Run directory {run_dir} has no samples. Listing it as absent.")
        return None, MetricsRow(label)

    rows = []
    contours_dir = ensure_dir(os.path.join(run_cfg.out_dir, "contours", label))
    for sample_id in sorted(os.listdir(samples_dir)):
        directory = os.path.join(samples_dir, sample_id)
        sample = synthdata.load_sample(os.path.join(run_cfg.corpus_path, sample_id), sample_id)
        mel = audio_signal.read_mel_csv(os.path.join(directory, "mel.csv"))
        wav_path = os.path.join(directory, "audio.wav")
        audio = audio_signal.read_wav(wav_path) if os.path.isfile(wav_path) else audio_signal.griffin_lim(mel, run_cfg.griffin_lim_iters)
        units_path = os.path.join(directory, "units.csv")
        units = read_csv(units_path)["unit"].to_numpy() if os.path.isfile(units_path) else None
        contours = audio_signal.prosody_contours(audio, mel)
        audio_signal.write_contours_csv(os.path.join(contours_dir, f"{sample_id}.csv"), contours)
        rows.append(hierflow_trainer.sample_metrics(f"{label}/{sample_id}", mel, audio, sample, units))
    return rows, hierflow_trainer.aggregate(label, rows)


def cmd_eval(settings, run_cfg, args):
    rows = []
    failed = False
    for run_dir in args.run_dirs:
        sample_rows, aggregate = evaluate_run_dir(run_cfg, run_dir)
        if sample_rows is not None:
            rows.extend(sample_rows)
            if not aggregate.is_finite():
                mlog.error(f"Run {aggregate.label} has non-finite metrics: {aggregate}")
                failed = True
        rows.append(aggregate)
        mlog.info(f"{aggregate.label}: {aggregate.to_dict()}")
    ensure_dir(run_cfg.out_dir)
    path = os.path.join(run_cfg.out_dir, "metrics.csv")
    hierflow_trainer.write_metrics(path, rows)
    print(f"Wrote {path}")
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_sweep_guidance(settings, run_cfg, args):
    """Evaluates one aggregate MetricsRow per (deduplicated) guidance scale."""
    betas = dedup(args.betas if args.betas is not None else run_cfg.sweep_betas)
    if any(beta < 0 for beta in betas):
        raise ConfigurationError(f"guidance scales have to be >= 0, got {betas}")
    samples, _, meta = synthdata.load_corpus(run_cfg.corpus_path, limit=run_cfg.eval_samples)
    model, _ = hierflow_trainer.load_model(run_cfg, meta, resolve_checkpoint(run_cfg, args.checkpoint))

    rows = []
    for beta in betas:
        sampler = SamplerConfig(steps=run_cfg.sampler.steps, beta=beta, seed=run_cfg.sampler.seed)
        _, row = hierflow_trainer.evaluate_model(
            model, samples, sampler, run_cfg.griffin_lim_iters, f"beta={beta:g}", prior=run_cfg.flow.prior
        )
        mlog.info(f"beta {beta:g}: {row.to_dict()}")
        rows.append(row)
    ensure_dir(run_cfg.out_dir)
    path = os.path.join(run_cfg.out_dir, "sweep.csv")
    hierflow_trainer.write_metrics(path, rows)
    print(f"Wrote {path}")
    return EXIT_OK if all(row.is_finite() for row in rows) else EXIT_FAILURE


def cmd_ablate(settings, run_cfg, args):
    samples, _, meta = synthdata.load_corpus(run_cfg.corpus_path)
    ensure_dir(run_cfg.out_dir)
    rows = hierflow_trainer.run_ablation(run_cfg, samples, meta, run_cfg.out_dir)
    path = os.path.join(run_cfg.out_dir, "ablation.csv")
    hierflow_trainer.write_metrics(path, rows)
    print(f"Wrote {path}")
    return EXIT_OK if all(row.is_finite() for row in rows) else EXIT_FAILURE


def cmd_gradcheck(settings, run_cfg, args):
    report = []
    for seed in hierflow_trainer.gradcheck_seeds(run_cfg.seed):
        report.extend(hierflow_trainer.run_gradcheck(fault=args.inject_fault, seed=seed))
    width = max(len(entry["check"]) for entry in report)
    for entry in report:
        print(f"{entry['check']:<{width}}  seed {entry['seed']:<10}  {entry['max_relative_error']:.3e}  {entry['status']}")
    ensure_dir(run_cfg.out_dir)
    write_csv(os.path.join(run_cfg.out_dir, "gradcheck.csv"), report, columns=hierflow_trainer.GRADCHECK_COLUMNS)
    failed = [entry["check"] for entry in report if entry["status"] != "PASS"]
    if failed:
        mlog.error(f"Gradient check failed for: {dedup(failed)}")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_toy_flow(settings, run_cfg, args):
    toy_cfg = dict(settings["toy_flow"])
    if args.steps is not None:
        toy_cfg["steps"] = args.steps
    if args.seed is not None:
        toy_cfg["seed"] = args.seed
    results = hierflow_trainer.run_toy_flow(toy_cfg, run_cfg.flow, run_cfg.out_dir)
    for k, error in enumerate(results["errors"]):
        print(f"class {k}: sampled mean {np.round(results['sampled_means'][k], 4).tolist()} error {error:.4f}")
    print(f"trajectory gap ratio {results['gap_ratio']:.4f}, CFG identity error {results['cfg_identity_error']:.3e}")
    return EXIT_OK if np.all(np.isfinite(results["errors"])) else EXIT_FAILURE


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "sweep-guidance": cmd_sweep_guidance,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "toy-flow": cmd_toy_flow,
}


def main(argv=None):
    """Parses the arguments and runs the selected command.

    Returns:
        int: The exit code (0 or 1). Usage, configuration and IO errors raise SystemExit(2).
    """
    args = add_arguments().parse_args(argv)
    try:
        settings, run_cfg = load_settings(args)
        if args.debug:
            logging_helper.set_global_level("DEBUG")
            mlog.debug(f"Run config: {run_cfg}")
        diffcore.configure_threads()
        torch.manual_seed(run_cfg.seed)
        return COMMANDS[args.command](settings, run_cfg, args)
    except GradientCheckError as e:
        mlog.critical(f"{args.command} failed: {e}")
        return EXIT_FAILURE
    except (ConfigurationError, CorpusError, ValidationError) as e:
        mlog.critical(f"{args.command} failed: {e}")
        print(f"hierflow {args.command}: {e}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
