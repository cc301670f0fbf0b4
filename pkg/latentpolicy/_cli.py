"""Command-line entry point of latentpolicy.

Every command resolves the run config, echoes it to `<run-dir>/config.env`,
logs to `<run-dir>/run.log` and records its steps and checks in a run log.
The exit code is 0 on success, 1 when the command raised or any check
failed, and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np

from latentpolicy import _config as cfg
from latentpolicy import _harness as harness
from latentpolicy import _internal as utils
from latentpolicy._attach import attach
from latentpolicy._check import check
from latentpolicy._datapipe import compute_action_stats, preview
from latentpolicy._envsuite import get_embodiment, replay_episode, reset, task_spec
from latentpolicy._episodes import load_episodes, read_episode, read_manifest, validate_manifest_files
from latentpolicy._errors import LatentPolicyError
from latentpolicy._evaluation import evaluate
from latentpolicy._policy import generate_actions, load_latent_policy
from latentpolicy._report import build_report, format_text_table, load_eval_report, write_report
from latentpolicy._step import run_log, step
from latentpolicy._training import train_trajectory_baseline

cli_logger = logging.getLogger("Harness")

Handler = Callable[[argparse.Namespace, cfg.RunConfig, Path], None]


def _data_dir(args: argparse.Namespace, run_dir: Path) -> Path:
    return Path(args.data_dir) if args.data_dir else run_dir / "data"


def _write_json(data: cfg.AnyType, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    cli_logger.info(f"Wrote {path}")
    return path


def cmd_generate_data(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:
    suite = harness.prepare_suite(config, _data_dir(args, run_dir))
    for manifest in [*suite.pretrain, *suite.downstream]:
        check(
            len(manifest.episodes) > 0,
            f"{manifest.dataset_id} holds demonstrations",
            details=f"{len(manifest.episodes)} episodes",
        )


def cmd_replay(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:  # noqa: ARG001
    manifest = read_manifest(args.manifest)
    entries = manifest.episodes[: args.limit] if args.limit else manifest.episodes
    for entry in entries:
        result = replay_episode(read_episode(manifest.episode_path(entry)), config.step_limit)
        check(
            result.exact,
            f"{entry.path} replays exactly",
            details=f"mismatched frames: {result.mismatched_frames[:10]}" if result.mismatched_frames else None,
        )


def cmd_stats(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:
    stats = {}
    for path in args.manifest:
        manifest = read_manifest(path)
        stats[manifest.dataset_id] = compute_action_stats(
            load_episodes(manifest),
            config.clip_quantile,
            manifest.dataset_id,
        ).to_dict()
    attach(stats, "Action statistics")
    _write_json(stats, run_dir / "stats.json")


def cmd_validate(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:  # noqa: ARG001
    for path in args.manifest:
        manifest = read_manifest(path)
        problems = validate_manifest_files(manifest)
        check(not problems, f"{manifest.dataset_id} is consistent with its episode files", details=problems or None)


def cmd_preview(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:  # noqa: ARG001
    summaries = [preview(read_manifest(path)) for path in args.manifest]
    for summary in summaries:
        cli_logger.info(json.dumps(summary))
    attach(summaries, "Dataset preview")
    _write_json(summaries, run_dir / "preview.json")


def cmd_pretrain(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:
    suite = harness.prepare_suite(config, _data_dir(args, run_dir))
    harness.pretrain(config, suite.pretrain, run_dir)


def cmd_finetune(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:
    suite = harness.prepare_suite(config, _data_dir(args, run_dir))
    harness.finetune(config, suite.downstream, run_dir, ata_init=args.init_ata, generator_init=args.init_generator)


def cmd_train_baseline(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:
    suite = harness.prepare_suite(config, _data_dir(args, run_dir))
    result = train_trajectory_baseline(config, suite.downstream, run_dir)
    attach(result.history, "Loss curve of the trajectory baseline")


def cmd_run(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:
    result = harness.run_pipeline(config, run_dir, data_dir=args.data_dir, baseline_margin=args.random_margin)
    report = build_report("evaluation", f"Pipeline {config.variant}", result.report.to_dict(), config)
    write_report(report, run_dir, "eval")


def cmd_reconstruct(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:  # noqa: ARG001
    manifests = [read_manifest(path) for path in args.manifest]
    error = harness.reconstruction_error(args.ata, manifests, device=config.device)
    cli_logger.info(f"Reconstruction error of {args.ata}: {error:.6f}")
    check(np.isfinite(error), "Reconstruction error is finite", details=f"mse={error:.6f}")


def cmd_sample(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:
    policy = load_latent_policy(args.ata, args.generator, sampler=args.sampler, steps=args.steps, device=config.device)
    _, frame = reset(
        task_spec(args.task, config.step_limit),
        get_embodiment(config.embodiment),
        config.seed,
        image_size=config.image_size,
    )
    rng = utils.seeded_torch_rng(config.seed, "sample")
    chunks = np.stack([generate_actions(policy, frame, rng).values for _ in range(args.n)])
    check(bool(np.isfinite(chunks).all()), "Sampled actions are finite", details=f"shape {chunks.shape}")
    np.save(run_dir / "samples.npy", chunks)
    cli_logger.info(f"Saved {args.n} chunks of shape {chunks.shape[1:]} to {run_dir / 'samples.npy'}")


def cmd_evaluate(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:
    policy = load_latent_policy(args.ata, args.generator, sampler=args.sampler, steps=args.steps, device=config.device)
    with step(f"Evaluate {policy.name}"):
        report = evaluate(policy, config, n_trials=args.n_trials)
        harness.record_evaluation(report)
        if args.random_margin is not None:
            random_report = harness.evaluate_random(config, args.ata, n_trials=args.n_trials)
            harness.record_evaluation(random_report)
            check(
                report.mean_success >= random_report.mean_success + args.random_margin,
                f"Policy beats the random baseline by {args.random_margin:.2f}",
                details={"policy": report.mean_success, "random": random_report.mean_success},
            )
    title = f"Evaluation of {policy.name}"
    write_report(build_report("evaluation", title, report.to_dict(), config), run_dir, "eval")


def cmd_ablate(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:
    reports = harness.run_ablation_matrix(config, run_dir, args.variant or cfg.VARIANTS, data_dir=args.data_dir)
    payload = {"reports": {variant: report.to_dict() for variant, report in reports.items()}}
    write_report(build_report("ablation", "Ablation variants", payload, config), run_dir, "ablation")


def cmd_sweep_horizon(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:
    results = harness.horizon_sweep(
        config,
        run_dir,
        args.h or harness.DEFAULT_HORIZONS,
        data_dir=args.data_dir,
        n_permutations=args.permutations,
    )
    payload = {"horizons": [result.to_dict() for result in results]}
    write_report(build_report("horizon_sweep", "Horizon sweep", payload, config), run_dir, "horizon_sweep")


def cmd_bench(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:
    table = harness.benchmark_inference(
        config,
        args.ata,
        args.generator,
        args.baseline,
        iterations=args.iterations,
        n_trials=args.n_trials,
    )
    write_report(build_report("benchmark", "Inference benchmark", table.to_dict(), config), run_dir, "bench")
    text = format_text_table(table.table())
    (run_dir / "bench.txt").write_text(text + "\n", encoding="utf-8")
    cli_logger.info(f"\n{text}")


def cmd_export_latents(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:
    manifests = [read_manifest(path) for path in args.manifest]
    harness.export_latents(args.ata, manifests, args.out or run_dir / "latents.csv", device=config.device)


def cmd_pretrain_gain(args: argparse.Namespace, config: cfg.RunConfig, run_dir: Path) -> None:
    gain = harness.measure_pretrain_gain(load_eval_report(args.with_pretrain), load_eval_report(args.without_pretrain))
    attach(gain.to_dict(), "Pre-training gain")
    write_report(build_report("pretrain_gain", "Pre-training gain", gain.to_dict(), config), run_dir, "pretrain_gain")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    group = common.add_argument_group("run options")
    group.add_argument("--config", metavar="PATH", default=None, help="Flat key=value run config file.")
    group.add_argument("--seed", type=int, default=None, help="Overrides the config seed.")
    group.add_argument("--run-dir", metavar="PATH", default="runs/latest", help="Directory receiving all outputs.")
    group.add_argument("--env-file", metavar="PATH", default=None, help="Path to a .env file with LATENTPOLICY_* keys.")
    group.add_argument(
        "--env-override",
        action="store_true",
        default=False,
        help="If set, values from the .env file override already-set environment variables.",
    )
    group.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        default="INFO",
        help="Root logger level.",
    )
    group.add_argument(
        "--max-attachment-bytes",
        type=int,
        default=None,
        help="Max bytes to embed for any single run-log attachment. Larger data will be truncated.",
    )
    return common


def _add_sampler_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--sampler", choices=cfg.SAMPLERS, default=None, help="Reverse-diffusion sampler.")
    parser.add_argument("--steps", type=int, default=None, help="Denoising steps for DDIM.")


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="latentpolicy", description="Latent diffusion policies for manipulation.")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name: str, handler: Handler, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, parents=[common], help=help_text, description=help_text)
        sub.set_defaults(handler=handler)
        return sub

    def data_dir_option(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--data-dir", metavar="PATH", default=None, help="Synthetic suite location (run-dir/data).")

    sub = command("generate-data", cmd_generate_data, "Generate the synthetic demonstration suite.")
    data_dir_option(sub)
    sub = command("replay", cmd_replay, "Replay stored episodes and compare every observation.")
    sub.add_argument("--manifest", required=True, metavar="PATH")
    sub.add_argument("--limit", type=int, default=0, help="Replay only the first N episodes.")
    for name, handler, help_text in (
        ("stats", cmd_stats, "Compute action statistics of datasets."),
        ("validate", cmd_validate, "Check that manifests match their episode files."),
        ("preview", cmd_preview, "Summarise datasets."),
    ):
        sub = command(name, handler, help_text)
        sub.add_argument("--manifest", required=True, action="append", metavar="PATH")

    for name, handler, help_text in (
        ("pretrain", cmd_pretrain, "Pre-train the ATA and the latent generator on the cross-embodiment mixture."),
        ("train-baseline", cmd_train_baseline, "Train the trajectory-space diffusion baseline."),
    ):
        data_dir_option(command(name, handler, help_text))
    sub = command("finetune", cmd_finetune, "Fine-tune the ATA and the latent generator downstream.")
    data_dir_option(sub)
    sub.add_argument("--init-ata", metavar="PATH", default=None, help="Pre-trained ATA checkpoint.")
    sub.add_argument("--init-generator", metavar="PATH", default=None, help="Pre-trained generator checkpoint.")
    sub = command("run", cmd_run, "Pre-train, fine-tune and evaluate in one go.")
    data_dir_option(sub)
    sub.add_argument("--random-margin", type=float, default=None, help="Required lead over the random policy.")

    sub = command("reconstruct", cmd_reconstruct, "Measure the ATA reconstruction error on datasets.")
    sub.add_argument("--ata", required=True, metavar="PATH")
    sub.add_argument("--manifest", required=True, action="append", metavar="PATH")
    sub = command("sample", cmd_sample, "Sample action chunks for a freshly reset task.")
    sub.add_argument("--ata", required=True, metavar="PATH")
    sub.add_argument("--generator", metavar="PATH", default=None, help="Without it the prior mean is decoded.")
    sub.add_argument("--task", choices=cfg.TASK_IDS, default=cfg.DEFAULT_TASKS[0])
    sub.add_argument("--n", type=int, default=8, help="Number of chunks.")
    _add_sampler_options(sub)
    sub = command("evaluate", cmd_evaluate, "Evaluate a latent policy closed-loop.")
    sub.add_argument("--ata", required=True, metavar="PATH")
    sub.add_argument("--generator", metavar="PATH", default=None, help="Without it the prior mean is decoded.")
    sub.add_argument("--n-trials", type=int, default=None)
    sub.add_argument("--random-margin", type=float, default=None, help="Required lead over the random policy.")
    _add_sampler_options(sub)

    sub = command("ablate", cmd_ablate, "Train and evaluate ablation variants.")
    data_dir_option(sub)
    sub.add_argument("--variant", action="append", choices=cfg.VARIANTS, help="Variant to run; repeatable (all).")
    sub = command("sweep-horizon", cmd_sweep_horizon, "Train and evaluate across chunk horizons.")
    data_dir_option(sub)
    sub.add_argument("--h", action="append", type=int, help="Horizon to run; repeatable (4, 8, 16, 24, 32).")
    sub.add_argument("--permutations", type=int, default=100, help="Label permutations for the silhouette test.")
    sub = command("bench", cmd_bench, "Time inference against the trajectory-space baseline.")
    sub.add_argument("--ata", required=True, metavar="PATH")
    sub.add_argument("--generator", required=True, metavar="PATH")
    sub.add_argument("--baseline", required=True, metavar="PATH")
    sub.add_argument("--iterations", type=int, default=100)
    sub.add_argument("--n-trials", type=int, default=None, help="Trials per task for success rates (0 skips).")
    sub = command("export-latents", cmd_export_latents, "Export ATA latent means with skill labels.")
    sub.add_argument("--ata", required=True, metavar="PATH")
    sub.add_argument("--manifest", required=True, action="append", metavar="PATH")
    sub.add_argument("--out", metavar="PATH", default=None, help="Output CSV (run-dir/latents.csv).")
    sub = command("pretrain-gain", cmd_pretrain_gain, "Per-task success gained by pre-training.")
    sub.add_argument("--with", dest="with_pretrain", required=True, metavar="REPORT")
    sub.add_argument("--without", dest="without_pretrain", required=True, metavar="REPORT")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    utils.configure_logging(args.log_level, run_dir / "run.log")
    if args.env_file:
        utils.load_env_file(Path(args.env_file), override=args.env_override)
    if args.max_attachment_bytes is not None:
        cfg.ATTACH_LIMIT_BYTES = args.max_attachment_bytes

    started = time.perf_counter()
    with run_log() as log:
        try:
            overrides = {"seed": str(args.seed)} if args.seed is not None else None
            config = cfg.load_config(args.config, overrides=overrides, echo_dir=run_dir)
            with step(args.command):
                args.handler(args, config, run_dir)
        except (LatentPolicyError, ValueError, FileNotFoundError) as e:
            cli_logger.error(f"{args.command} failed: {e}")
            return 1

    if failures := utils.generate_terminal_summary(log):
        cli_logger.error("Failed checks:\n" + "\n".join(failures))
        return 1
    elapsed = utils.fmt_seconds(time.perf_counter() - started)
    cli_logger.info(f"{args.command} finished in {elapsed}s; outputs in {run_dir.resolve()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
