"""Module orchestrating pre-training, fine-tuning, evaluation and the experiment drivers built on them.

Latent exports are comma-separated text files with a single header line
`z_0,...,z_{d_z-1},task_id,embodiment_id,skill` followed by one row per chunk:
the ATA posterior mean, the chunk's task, its embodiment and the majority
scripted-skill label of its steps.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import time
from collections.abc import Iterator, Sequence
from pathlib import Path

import numpy as np
import torch
from sklearn.metrics import silhouette_score

from latentpolicy import _config as cfg
from latentpolicy import _internal as utils
from latentpolicy._ata import AtaModel, masked_reconstruction_error
from latentpolicy._attach import attach
from latentpolicy._check import check
from latentpolicy._checkpoint import load_checkpoint
from latentpolicy._datapipe import Batch, build_training_stream, filter_manifests
from latentpolicy._envsuite import PRETRAIN_EMBODIMENTS, generate_suite, get_embodiment, reset, task_spec
from latentpolicy._episodes import EpisodeManifest, read_manifest
from latentpolicy._evaluation import EvalReport, Policy, evaluate
from latentpolicy._policy import (
    RandomPolicy,
    dataset_stats_from_extra,
    load_latent_policy,
    load_trajectory_policy,
    restore_ata,
    stats_from_extra,
)
from latentpolicy._report import Table
from latentpolicy._step import step
from latentpolicy._training import TensorBatch, TrainingResult, batch_tensors, train_ata, train_lpg
from latentpolicy._types import ObservationFrame

harness_logger = logging.getLogger("Harness")

DEFAULT_HORIZONS = (4, 8, 16, 24, 32)
DEFAULT_BENCH_SETTINGS = (("ddpm", 1000), ("ddim", 250), ("ddim", 100), ("ddim", 50))
SUITE_STAMP = "suite.json"
SUCCESS_TOLERANCE = 0.05
SKILL_LABEL_COLUMNS = ("task_id", "embodiment_id", "skill")

_SUITE_KEYS = (
    "tasks", "embodiment", "pretrain_embodiments", "episodes_per_task", "pretrain_episodes_per_task",
    "demo_noise", "demo_quality", "image_size", "step_limit", "seed",
)


@dataclasses.dataclass(frozen=True)
class Suite:
    pretrain: list[EpisodeManifest]
    downstream: list[EpisodeManifest]


def _suite_stamp(config: cfg.RunConfig) -> dict[str, str]:
    items = cfg.config_items(config)
    return {key: items[key] for key in _SUITE_KEYS}


def prepare_suite(config: cfg.RunConfig, data_dir: str | Path) -> Suite:
    """Loads the synthetic suite from `data_dir`, generating it when absent or made with other settings."""
    data_dir = Path(data_dir)
    stamp_path = data_dir / SUITE_STAMP
    pretrain_paths = [
        data_dir / "pretrain" / f"pretrain_{embodiment_id}" / "manifest.json"
        for embodiment_id in PRETRAIN_EMBODIMENTS[: config.pretrain_embodiments]
    ]
    downstream_path = data_dir / "downstream" / f"downstream_{config.embodiment}" / "manifest.json"
    stamp = _suite_stamp(config)
    reusable = (
        stamp_path.is_file()
        and json.loads(stamp_path.read_text(encoding="utf-8")) == stamp
        and all(path.is_file() for path in [*pretrain_paths, downstream_path])
    )
    if reusable:
        harness_logger.info(f"Reusing synthetic suite in {data_dir}")
        return Suite([read_manifest(path) for path in pretrain_paths], [read_manifest(downstream_path)])

    harness_logger.info(f"Generating synthetic suite in {data_dir}")
    generated = generate_suite(config, data_dir)
    stamp_path.write_text(json.dumps(stamp, indent=2) + "\n", encoding="utf-8")
    return Suite(generated["pretrain"], generated["downstream"])


def _record_training(result: TrainingResult) -> None:
    attach(result.history, f"Loss curve of {result.checkpoint.name}")
    check(
        np.isfinite(result.best_val_loss),
        f"{result.checkpoint.name} reached a finite validation loss",
        details=f"best val {result.best_val_loss:.5f} at epoch {result.best_epoch}",
    )


def pretrain(
    config: cfg.RunConfig,
    manifests: Sequence[EpisodeManifest],
    run_dir: str | Path,
) -> tuple[Path, Path | None]:
    """Pre-trains the ATA and the latent generator on the filtered cross-embodiment mixture.

    Returns:
        The pre-trained ATA checkpoint and the generator checkpoint (`None`
        for the `prior_latent` variant, which has no generator).

    Raises:
        ValueError: If filtering leaves no dataset to pre-train on.
    """
    kept, excluded = filter_manifests(manifests)
    if excluded:
        attach(excluded, "Excluded datasets")
    if not kept:
        raise ValueError("Every pre-training dataset was excluded by the filter")
    with step("Pre-train ATA"):
        ata = train_ata(config, kept, run_dir, mode="pretrain")
        _record_training(ata)
    if config.variant == "prior_latent":
        return ata.checkpoint, None
    with step("Pre-train latent generator"):
        generator = train_lpg(config, kept, ata.checkpoint, run_dir, mode="pretrain")
        _record_training(generator)
    return ata.checkpoint, generator.checkpoint


def finetune(
    config: cfg.RunConfig,
    manifests: Sequence[EpisodeManifest],
    run_dir: str | Path,
    *,
    ata_init: str | Path | None = None,
    generator_init: str | Path | None = None,
) -> tuple[Path, Path | None]:
    """Fine-tunes the ATA, then trains the latent generator on the fine-tuned ATA's latents."""
    with step("Fine-tune ATA"):
        ata = train_ata(config, manifests, run_dir, init=ata_init)
        _record_training(ata)
    if config.variant == "prior_latent":
        return ata.checkpoint, None
    with step("Fine-tune latent generator"):
        generator = train_lpg(config, manifests, ata.checkpoint, run_dir, init=generator_init)
        _record_training(generator)
    return ata.checkpoint, generator.checkpoint


def evaluate_random(config: cfg.RunConfig, ata_checkpoint: str | Path, **kwargs: cfg.AnyType) -> EvalReport:
    """Evaluates uniformly random chunks in the action ranges recorded with an ATA checkpoint."""
    stats = stats_from_extra(load_checkpoint(ata_checkpoint).extra)
    return evaluate(RandomPolicy(config.h, stats), config, **kwargs)


def record_evaluation(report: EvalReport) -> None:
    rates = report.success_rates
    check(
        all(0.0 <= rate <= 1.0 for rate in rates.values()),
        f"{report.policy} success rates lie in [0, 1]",
        details=[f"{task_id}: {rate:.3f}" for task_id, rate in rates.items()],
    )
    attach(report.to_dict(), f"Evaluation of {report.policy}")


@dataclasses.dataclass(frozen=True)
class PipelineResult:
    run_dir: Path
    ata: Path
    generator: Path | None
    report: EvalReport
    random_report: EvalReport | None = None


def run_pipeline(
    config: cfg.RunConfig,
    run_dir: str | Path,
    *,
    data_dir: str | Path | None = None,
    baseline_margin: float | None = None,
) -> PipelineResult:
    """Runs `pretrain -> finetune -> evaluate` for `config.variant`.

    Args:
        config: Resolved run config.
        run_dir: Directory receiving checkpoints.
        data_dir: Synthetic suite location, shared between runs; defaults to `run_dir / "data"`.
        baseline_margin: When given, the random policy is evaluated as well and
            the run checks that the policy's mean success beats it by this margin.

    ---
    ### Example usage:

    ```python
    with run_log() as log:
        result = run_pipeline(config, "runs/full", baseline_margin=0.4)
    print(result.report.success_rates, has_failures_in_log(log))
    ```
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with step("Prepare data"):
        suite = prepare_suite(config, data_dir or run_dir / "data")

    ata_init = generator_init = None
    if config.variant == "no_pretrain":
        harness_logger.info("Skipping pre-training")
    else:
        with step("Pre-train"):
            ata_init, generator_init = pretrain(config, suite.pretrain, run_dir)
    with step("Fine-tune"):
        ata, generator = finetune(config, suite.downstream, run_dir, ata_init=ata_init, generator_init=generator_init)

    random_report = None
    with step("Evaluate"):
        policy = load_latent_policy(ata, generator, device=config.device)
        report = evaluate(policy, config)
        record_evaluation(report)
        if baseline_margin is not None:
            random_report = evaluate_random(config, ata)
            record_evaluation(random_report)
            check(
                report.mean_success >= random_report.mean_success + baseline_margin,
                f"Policy beats the random baseline by {baseline_margin:.2f}",
                details={"policy": report.mean_success, "random": random_report.mean_success},
            )
    harness_logger.info(f"{config.variant}: mean success {report.mean_success:.3f}")
    return PipelineResult(run_dir, ata, generator, report, random_report)


def run_ablation(
    variant: str,
    config: cfg.RunConfig,
    run_dir: str | Path,
    *,
    data_dir: str | Path | None = None,
) -> EvalReport:
    """Trains and evaluates one ablation variant in `run_dir / variant`.

    The variant's config differs from the full model's only in `variant`, so
    data, seeds and schedules are shared.

    Raises:
        ValueError: For an unknown variant.
    """
    if variant not in cfg.VARIANTS:
        raise ValueError(f"Unknown ablation variant {variant!r}; expected one of {', '.join(cfg.VARIANTS)}")
    variant_config = dataclasses.replace(config, variant=variant)
    delta = cfg.diff_configs(dataclasses.replace(config, variant="full"), variant_config)
    check(
        set(delta) <= {"variant"},
        f"{variant} differs from the full model only in its variant",
        details=[f"{key}: {left!r} -> {right!r}" for key, (left, right) in delta.items()],
    )
    with step(f"Ablation {variant}"):
        result = run_pipeline(variant_config, Path(run_dir) / variant, data_dir=data_dir or Path(run_dir) / "data")
    return result.report


def run_ablation_matrix(
    config: cfg.RunConfig,
    run_dir: str | Path,
    variants: Sequence[str] = cfg.VARIANTS,
    *,
    data_dir: str | Path | None = None,
) -> dict[str, EvalReport]:
    """Runs every variant on the same suite and checks that the full model is not beaten by the regressor."""
    data_dir = data_dir or Path(run_dir) / "data"
    reports = {variant: run_ablation(variant, config, run_dir, data_dir=data_dir) for variant in variants}
    for weaker in ("non_diffusion_lpg", "obs_agnostic_ata"):
        if "full" in reports and weaker in reports:
            full, other = reports["full"].mean_success, reports[weaker].mean_success
            check(full >= other, f"full >= {weaker} in mean success", details={"full": full, weaker: other})
    return reports


@dataclasses.dataclass(frozen=True)
class LatentTable:
    latents: np.ndarray
    task_ids: list[str]
    embodiment_ids: list[str]
    skills: list[str]


@dataclasses.dataclass(frozen=True, eq=False)
class _EncodedBatch:
    batch: Batch
    tensors: TensorBatch
    mu: torch.Tensor
    f_obs: torch.Tensor | None
    f_text: torch.Tensor | None


def _encode_chunks(
    ata_checkpoint: str | Path,
    manifests: Sequence[EpisodeManifest],
    device: torch.device,
) -> tuple[AtaModel, Iterator[_EncodedBatch]]:
    """Restores an ATA and encodes every chunk of `manifests` in a fixed order.

    Actions are normalized with the statistics stored in the checkpoint: a
    dataset the ATA was trained on uses its own, any other dataset those of its
    embodiment. Every episode contributes all of its chunks.
    """
    state = load_checkpoint(ata_checkpoint)
    encoders, ata = restore_ata(state, device)
    by_dataset, by_embodiment = dataset_stats_from_extra(state.extra), stats_from_extra(state.extra)
    stats = {
        manifest.dataset_id: by_dataset[manifest.dataset_id]
        if manifest.dataset_id in by_dataset
        else by_embodiment[manifest.embodiment_id]
        for manifest in manifests
        if manifest.dataset_id in by_dataset or manifest.embodiment_id in by_embodiment
    }
    config = dataclasses.replace(state.config, val_fraction=0.0)
    stream = build_training_stream(
        manifests,
        config,
        utils.seeded_rng(config.seed, "export"),
        mode=state.extra.get("mode", "finetune"),
        action_width=ata.action_dim,
        stats=stats,
    )

    def batches() -> Iterator[_EncodedBatch]:
        with torch.no_grad():
            for batch in stream.training_batches_in_order():
                tensors = batch_tensors(batch, encoders, device)
                f_obs = ata.obs_encoder(tensors.features, tensors.proprio, tensors.present) if ata.obs_aware else None
                f_text = tensors.f_text if ata.task_aware else None
                mu, _ = ata.encode(tensors.actions, f_obs, tensors.pad_mask, f_text)
                yield _EncodedBatch(batch, tensors, mu, f_obs, f_text)

    return ata, batches()


def export_latents(
    ata_checkpoint: str | Path,
    manifests: Sequence[EpisodeManifest],
    out_path: str | Path,
    *,
    device: str = "cpu",
) -> Path:
    """Writes the ATA posterior mean of every chunk of `manifests`, in a fixed order.

    Raises:
        ValueError: If any latent coordinate is not finite.
        OSError: If `out_path` cannot be written.
    """
    ata, encoded = _encode_chunks(ata_checkpoint, manifests, utils.resolve_device(device))
    rows: list[list[str]] = []
    for item in encoded:
        mu = item.mu.cpu().double().numpy()
        if not np.isfinite(mu).all():
            raise ValueError(f"Non-finite latent coordinates exported from {ata_checkpoint}")
        batch = item.batch
        for i in range(len(batch)):
            coordinates = [format(float(v), ".9g") for v in mu[i]]
            skill = cfg.SKILL_LABELS[int(batch.skills[i])]
            rows.append([*coordinates, batch.task_ids[i], batch.embodiment_ids[i], skill])

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([*(f"z_{i}" for i in range(ata.d_z)), *SKILL_LABEL_COLUMNS])
        writer.writerows(rows)
    harness_logger.info(f"Exported {len(rows)} latents of width {ata.d_z} to {out_path}")
    return out_path


def reconstruction_error(
    ata_checkpoint: str | Path,
    manifests: Sequence[EpisodeManifest],
    *,
    device: str = "cpu",
) -> float:
    """Mean squared error, in normalized action space, of decoding each chunk's posterior mean."""
    ata, encoded = _encode_chunks(ata_checkpoint, manifests, utils.resolve_device(device))
    total, count = 0.0, 0
    for item in encoded:
        reconstruction = ata.decode(item.mu, item.f_obs, item.f_text)
        error = masked_reconstruction_error(
            item.tensors.actions,
            reconstruction,
            item.tensors.pad_mask,
            item.tensors.dim_mask,
        )
        total += float(error) * len(item.batch)
        count += len(item.batch)
    if not count:
        raise ValueError("No chunks to reconstruct")
    return total / count


def read_latent_export(path: str | Path) -> LatentTable:
    with Path(path).open(encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        width = len(header) - len(SKILL_LABEL_COLUMNS)
        if width < 1 or tuple(header[width:]) != SKILL_LABEL_COLUMNS:
            raise ValueError(f"{path} is not a latent export (header {header})")
        rows = list(reader)
    return LatentTable(
        latents=np.array([[float(v) for v in row[:width]] for row in rows], dtype=np.float64).reshape(-1, width),
        task_ids=[row[width] for row in rows],
        embodiment_ids=[row[width + 1] for row in rows],
        skills=[row[width + 2] for row in rows],
    )


def silhouette_permutation_test(
    latents: np.ndarray,
    labels: Sequence[str] | np.ndarray,
    n_permutations: int = 100,
    rng: np.random.Generator | None = None,
    *,
    sample_size: int | None = 2000,
) -> tuple[float, float]:
    """Silhouette of `latents` grouped by `labels`, and its permutation p-value.

    Every permutation is scored on the same subsample as the real labels. The
    p-value is `(1 + #permuted scores >= observed) / (1 + n_permutations)`.

    Raises:
        ValueError: Unless there are between 2 and `n - 1` distinct labels.
    """
    labels = np.asarray(labels)
    n_labels = len(np.unique(labels))
    if not 2 <= n_labels < len(labels):
        raise ValueError(f"Silhouette needs 2 to {len(labels) - 1} distinct labels, got {n_labels}")
    rng = rng or np.random.default_rng(0)
    subsample_seed = int(rng.integers(2**31))
    size = sample_size if sample_size is not None and len(labels) > sample_size else None

    def score(assignment: np.ndarray) -> float:
        return float(silhouette_score(latents, assignment, sample_size=size, random_state=subsample_seed))

    observed = score(labels)
    permuted = np.array([score(rng.permutation(labels)) for _ in range(n_permutations)])
    p_value = (1 + int((permuted >= observed).sum())) / (1 + n_permutations)
    return observed, float(p_value)


@dataclasses.dataclass(frozen=True)
class HorizonResult:
    h: int
    report: EvalReport
    silhouette: float
    p_value: float
    latents: Path

    def to_dict(self) -> dict[str, cfg.AnyType]:
        return {
            "h": self.h,
            "report": self.report.to_dict(),
            "silhouette": self.silhouette,
            "p_value": self.p_value,
            "latents": str(self.latents),
        }


def horizon_sweep(
    config: cfg.RunConfig,
    run_dir: str | Path,
    h_values: Sequence[int] = DEFAULT_HORIZONS,
    *,
    data_dir: str | Path | None = None,
    n_permutations: int = 100,
) -> list[HorizonResult]:
    """Trains, evaluates and exports latents for every horizon in `h_values`.

    Each horizon runs in `run_dir / h<h>` on the same suite. The silhouette of
    each horizon's latents grouped by skill label is logged; only the
    significance at `h = 16` is checked.

    Raises:
        ValueError: If a horizon is not positive or exceeds the longest demonstration.
    """
    run_dir = Path(run_dir)
    data_dir = data_dir or run_dir / "data"
    with step("Prepare data"):
        suite = prepare_suite(config, data_dir)
    longest = max(entry.length for manifest in suite.downstream for entry in manifest.episodes)
    for h in h_values:
        if not 1 <= h <= longest:
            raise ValueError(f"Horizon {h} lies outside [1, {longest}], the demonstration length range")

    results = []
    for h in h_values:
        with step(f"Horizon h={h}"):
            h_config = cfg.validate_config(
                dataclasses.replace(config, h=h, execute_steps=min(config.execute_steps, h)),
            )
            pipeline = run_pipeline(h_config, run_dir / f"h{h}", data_dir=data_dir)
            latents_path = export_latents(
                pipeline.ata,
                suite.downstream,
                run_dir / f"h{h}" / "latents.csv",
                device=config.device,
            )
            table = read_latent_export(latents_path)
            silhouette, p_value = silhouette_permutation_test(
                table.latents,
                table.skills,
                n_permutations,
                utils.seeded_rng(config.seed, f"silhouette/h{h}"),
            )
            harness_logger.info(f"h={h}: mean success {pipeline.report.mean_success:.3f}, silhouette {silhouette:.4f}")
            if h == 16:
                check(p_value < 0.05, "h=16 latents cluster by skill beyond chance", details={"p": p_value})
            results.append(HorizonResult(h, pipeline.report, silhouette, p_value, latents_path))

    by_h = {result.h: result.silhouette for result in results}
    attach(by_h, "Silhouette per horizon")
    if 16 in by_h and 32 in by_h:
        harness_logger.info(f"Silhouette h=16 {by_h[16]:.4f} vs h=32 {by_h[32]:.4f}")
    return results


@dataclasses.dataclass(frozen=True)
class BenchmarkRow:
    model: str
    sampler: str
    steps: int
    seconds_per_call: float
    success_rate: float | None = None
    speedup: float | None = None


@dataclasses.dataclass(frozen=True)
class BenchmarkTable:
    rows: list[BenchmarkRow]
    iterations: int

    def to_dict(self) -> dict[str, cfg.AnyType]:
        return {"iterations": self.iterations, "rows": [dataclasses.asdict(row) for row in self.rows]}

    def table(self) -> Table:
        return Table(
            f"Inference time over {self.iterations} calls",
            ("model", "sampler", "steps", "s/call", "success", "speedup"),
            [dataclasses.astuple(row) for row in self.rows],
        )

    def seconds(self, model: str, sampler: str, steps: int) -> float:
        for row in self.rows:
            if (row.model, row.sampler, row.steps) == (model, sampler, steps):
                return row.seconds_per_call
        raise KeyError(f"No {model} row for {sampler} with {steps} steps")


def time_inference(policy: Policy, frame: ObservationFrame, iterations: int, rng: torch.Generator) -> float:
    """Mean wall-clock seconds of one full inference call, after one warm-up call."""
    policy.plan([frame], rng)
    started = time.perf_counter()
    for _ in range(iterations):
        policy.plan([frame], rng)
    return (time.perf_counter() - started) / iterations


def _with_sampler(policy: Policy, sampler: str, steps: int) -> Policy:
    configured = copy.copy(policy)
    configured.sampler, configured.steps = sampler, steps
    return configured


def benchmark_inference(
    config: cfg.RunConfig,
    ata_checkpoint: str | Path,
    generator_checkpoint: str | Path,
    baseline_checkpoint: str | Path | None,
    *,
    settings: Sequence[tuple[str, int]] = DEFAULT_BENCH_SETTINGS,
    iterations: int = 100,
    n_trials: int | None = None,
) -> BenchmarkTable:
    """Times the latent policy and the trajectory-space baseline for every `(sampler, steps)` setting.

    The latent policy's success rate is evaluated per setting over `n_trials`
    trials per task (`config.n_trials` by default, `0` skips evaluation).

    Raises:
        FileNotFoundError: If the baseline checkpoint is missing.
    """
    if baseline_checkpoint is None or not Path(baseline_checkpoint).is_file():
        raise FileNotFoundError(f"Baseline checkpoint not found: {baseline_checkpoint}")
    n_trials = config.n_trials if n_trials is None else n_trials
    latent = load_latent_policy(ata_checkpoint, generator_checkpoint, device=config.device)
    trajectory = load_trajectory_policy(baseline_checkpoint, device=config.device)
    seed = int(utils.seeded_rng(config.seed, "bench/frame").integers(2**31))
    _, frame = reset(
        task_spec(config.tasks[0], config.step_limit),
        get_embodiment(config.embodiment),
        seed,
        image_size=config.image_size,
    )

    rows = []
    for sampler, steps in settings:
        with step(f"Benchmark {sampler} with {steps} steps"):
            rng = utils.seeded_torch_rng(config.seed, f"bench/{sampler}{steps}")
            latent_seconds = time_inference(_with_sampler(latent, sampler, steps), frame, iterations, rng)
            baseline_seconds = time_inference(_with_sampler(trajectory, sampler, steps), frame, iterations, rng)
            success = None
            if n_trials:
                report = evaluate(_with_sampler(latent, sampler, steps), config, n_trials=n_trials)
                success = report.mean_success
            speedup = baseline_seconds / latent_seconds
            rows.append(BenchmarkRow("latent", sampler, steps, latent_seconds, success, speedup))
            rows.append(BenchmarkRow("trajectory", sampler, steps, baseline_seconds))
            harness_logger.info(
                f"{sampler}{steps}: latent {latent_seconds:.4f}s, trajectory {baseline_seconds:.4f}s per call",
            )

    table = BenchmarkTable(rows, iterations)
    _record_benchmark(table)
    return table


def _record_benchmark(table: BenchmarkTable) -> None:
    attach(table.to_dict(), "Timing table")
    latent_rows = [row for row in table.rows if row.model == "latent"]
    ddim = sorted((row.steps, row.seconds_per_call) for row in latent_rows if row.sampler == "ddim")
    check(
        all(earlier[1] < later[1] for earlier, later in zip(ddim, ddim[1:], strict=False)),
        "Latent inference time grows with the number of DDIM steps",
        details={f"ddim{steps}_s": seconds for steps, seconds in ddim},
    )
    fastest_ddim = min((row for row in latent_rows if row.sampler == "ddim"), key=lambda row: row.steps, default=None)
    for row in latent_rows:
        if row.sampler != "ddpm":
            continue
        if ddim:
            check(
                all(seconds < row.seconds_per_call for _, seconds in ddim),
                f"Latent DDPM{row.steps} is slower than every DDIM setting",
                details={f"ddpm{row.steps}_s": row.seconds_per_call, "slowest_ddim_s": max(s for _, s in ddim)},
            )
        if fastest_ddim is not None and fastest_ddim.success_rate is not None and row.success_rate is not None:
            gap = abs(fastest_ddim.success_rate - row.success_rate)
            check(
                gap <= SUCCESS_TOLERANCE + 1e-9,
                f"Latent DDIM{fastest_ddim.steps} success is within 5 points of DDPM{row.steps}",
                details={f"ddim{fastest_ddim.steps}": fastest_ddim.success_rate, f"ddpm{row.steps}": row.success_rate},
            )
        if row.speedup is not None:
            check(
                row.speedup >= 1.5,
                f"Latent DDPM{row.steps} is at least 1.5x faster than the trajectory baseline",
                details={"speedup": row.speedup},
            )


@dataclasses.dataclass(frozen=True)
class PretrainGain:
    per_task: dict[str, float]
    mean: float

    def to_dict(self) -> dict[str, cfg.AnyType]:
        return {"per_task": self.per_task, "mean": self.mean}


def measure_pretrain_gain(with_pretrain: EvalReport, without_pretrain: EvalReport) -> PretrainGain:
    """Per-task success gained by pre-training, and its average over tasks.

    Raises:
        ValueError: If the reports do not cover the same tasks.
    """
    with_rates, without_rates = with_pretrain.success_rates, without_pretrain.success_rates
    if set(with_rates) != set(without_rates):
        raise ValueError(f"Reports cover different tasks: {sorted(with_rates)} vs {sorted(without_rates)}")
    per_task = {task_id: with_rates[task_id] - without_rates[task_id] for task_id in with_rates}
    mean = float(np.mean(list(per_task.values()))) if per_task else 0.0
    harness_logger.info(f"Pre-training gain: mean {mean:+.3f} over {len(per_task)} tasks")
    return PretrainGain(per_task, mean)
