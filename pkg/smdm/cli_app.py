import csv
import dataclasses
import json
import logging
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import click

from smdm import denoiser, diffusion, evaluation, keyframes, motion, plotting, storage
from smdm import rng as rng_util
from smdm.cli_app_util import (
    ConfigError,
    ProgramTerminatedError,
    StorageError,
    ensure_dir,
    ensure_file,
    get_progress_output,
)
from smdm.config import RunConfig, get_thread_count
from smdm.log_util import get_time_txt

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
MODEL_FILE = "model.smdm"
LOSS_FILE = "loss.csv"
METRICS_FILE = "metrics.csv"
SAMPLES_DIR = "samples"
CHECKPOINTS_DIR = "checkpoints"
LOSS_HEADER = ("step", "loss", "recon", "lipschitz", "mean_k")

# 체크포인트와 실행 설정이 반드시 일치해야 하는 구조 필드
ARCHITECTURE_FIELDS = (
    "d_model",
    "n_layers",
    "n_heads",
    "fsq_levels",
    "n_classes",
    "ffn_mult",
    "bound_source",
    "mlp_kind",
)


# =============================================================================
# 공통
# =============================================================================


def load_dataset(path: Path) -> motion.Dataset:
    ensure_file(path, "Dataset")
    return storage.load_dataset(path)


def load_checkpoint(config: RunConfig, path: Optional[Path]) -> storage.Checkpoint:
    path = Path(path) if path is not None else Path(config.out) / MODEL_FILE
    ensure_file(path, "Checkpoint")
    ckpt = storage.load_checkpoint(path)

    model = ckpt.params.config
    mismatched = [
        f"model.{name} (checkpoint {getattr(model, name)!r}, config {getattr(config.model, name)!r})"
        for name in ARCHITECTURE_FIELDS
        if getattr(model, name) != getattr(config.model, name)
    ]
    if ckpt.params.dim != config.layout.dim:
        mismatched.append(f"joints×arity (checkpoint dim {ckpt.params.dim}, config dim {config.layout.dim})")
    if mismatched:
        raise ConfigError(f"Checkpoint {path} does not match config: {', '.join(mismatched)}")
    return ckpt


def resolve_classes(names: Optional[Sequence[str]]) -> list:
    if not names:
        return list(range(len(motion.CLASSES)))
    try:
        return [motion.class_id(name) for name in names]
    except motion.UnknownClassError as e:
        raise ConfigError(str(e)) from e


def _fmt(value: float) -> str:
    return repr(float(value))


# =============================================================================
# gen-data
# =============================================================================


def gen_data(config: RunConfig) -> Path:
    out_path = config.dataset_path
    ensure_dir(out_path.parent)

    logger.info("Generating %d sequences per class, %d frames each...", config.n_per_class, config.n_frames)
    dataset = motion.make_dataset(
        n_per_class=config.n_per_class,
        n_frames=config.n_frames,
        layout=config.layout,
        seed=config.seed,
        noise_sigma=config.noise_sigma,
        fps=config.fps,
    )
    try:
        storage.save_dataset(out_path, dataset)
    except OSError as e:
        raise StorageError(f"Cannot write dataset {out_path}: {e.strerror or e}") from e

    logger.info(
        "Dataset %s: %d sequences (%d train / %d val), D=%d",
        out_path,
        len(dataset.sequences),
        len(dataset.train_idx),
        len(dataset.val_idx),
        dataset.layout.dim,
    )
    logger.info("Normalization mean range [%.3f, %.3f], std range [%.3f, %.3f]",
                dataset.mean.min(), dataset.mean.max(), dataset.std.min(), dataset.std.max())
    return out_path


# =============================================================================
# train
# =============================================================================


def write_loss_csv(path: Path, history: Sequence[dict]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOSS_HEADER)
        for row in history:
            writer.writerow([row["step"], *(_fmt(row[k]) for k in LOSS_HEADER[1:])])
    return path


def read_loss_csv(path: Path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def _log_keyframe_counts(counts: Counter) -> None:
    if not counts:
        return
    total = sum(counts.values())
    ks = sorted(counts)
    mean_k = sum(k * n for k, n in counts.items()) / total
    common = ", ".join(f"K={k}: {100.0 * n / total:.1f}%" for k, n in counts.most_common(5))
    logger.info("Keyframe counts used: min %d, mean %.2f, max %d (%s)", ks[0], mean_k, ks[-1], common)


def train(config: RunConfig) -> Path:
    dataset = load_dataset(config.dataset_path)
    if dataset.layout.dim != config.layout.dim:
        raise ConfigError(
            f"Dataset dim {dataset.layout.dim} does not match config joints×arity = {config.layout.dim}"
        )

    out = ensure_dir(Path(config.out))
    ckpt_dir = ensure_dir(out / CHECKPOINTS_DIR)
    config.save(out / CONFIG_FILE)

    sequences = [(dataset.normalize(s.frames), s.label) for s in dataset.train]
    params = denoiser.init_params(config.model, dataset.layout.dim, rng_util.stream(config.seed, "init"))
    sched = diffusion.make_schedule(config.diffusion_steps, config.schedule)
    options = config.training_options()

    logger.info(
        "Training %d parameters on %d sequences: %d steps, T=%d (%s), rate %.2f%s",
        params.count(),
        len(sequences),
        config.train_steps,
        config.diffusion_steps,
        config.schedule,
        config.model.reduction_rate,
        " (dense baseline)" if options.dense else "",
    )

    run_config = config.to_dict()

    def on_step(step, result, current, ema):
        if step % config.checkpoint_every == 0 or step == config.train_steps:
            storage.save_checkpoint(
                ckpt_dir / f"step_{step:06d}.smdm", current, run_config, step, dataset.mean, dataset.std, ema
            )

    started = time.monotonic()
    result = diffusion.train(
        sequences,
        params,
        sched,
        options,
        seed=config.seed,
        steps=config.train_steps,
        batch_size=config.batch_size,
        lr=config.learning_rate,
        ema_decay=config.ema_decay,
        log_every=config.log_every,
        on_step=on_step,
    )

    model_path = storage.save_checkpoint(
        out / MODEL_FILE, result.params, run_config, config.train_steps, dataset.mean, dataset.std, result.ema
    )
    write_loss_csv(out / LOSS_FILE, result.history)
    _log_keyframe_counts(result.keyframe_counts)

    if result.history:
        logger.info(
            "Training finished in %s: loss %.5f → %.5f",
            get_time_txt(time.monotonic() - started),
            result.history[0]["loss"],
            result.history[-1]["loss"],
        )
    return model_path


# =============================================================================
# sample
# =============================================================================


@dataclasses.dataclass
class SampleJob:
    label: int
    index: int

    @property
    def name(self) -> str:
        return f"{motion.CLASSES[self.label]}_{self.index:03d}"


def _sample_params(ckpt: storage.Checkpoint, use_ema: bool) -> denoiser.DenoiserParams:
    if use_ema and ckpt.ema:
        return denoiser.DenoiserParams(ckpt.params.config, ckpt.params.dim, dict(ckpt.ema))
    return ckpt.params


def sample(
    config: RunConfig,
    checkpoint: Optional[Path] = None,
    classes: Optional[Sequence[str]] = None,
    count: Optional[int] = None,
    dump_masks: bool = False,
    use_ema: bool = False,
) -> list:
    labels = resolve_classes(classes)
    count = config.samples_per_class if count is None else count
    if count < 1:
        raise ConfigError(f"count must be ≥ 1, got {count}")

    ckpt = load_checkpoint(config, checkpoint)
    params = _sample_params(ckpt, use_ema)
    sched = diffusion.make_schedule(config.diffusion_steps, config.schedule)
    out = ensure_dir(Path(config.out) / SAMPLES_DIR)
    layout = config.layout
    rate = config.model.reduction_rate
    switch_t = keyframes.refine_threshold(sched.T, config.gamma)

    jobs = [SampleJob(label, i) for label in labels for i in range(count)]
    logger.info(
        "Sampling %d sequences: T=%d, γ=%.2f (VW masks from t=%d), rate %.2f, guidance %.2f",
        len(jobs),
        sched.T,
        config.gamma,
        switch_t,
        rate,
        config.model.guidance_scale,
    )

    def run(job: SampleJob) -> Path:
        masks = {}

        def on_mask(t, mask):
            if dump_masks:
                masks[str(t)] = mask.indices.tolist()
            if t == switch_t:
                logger.debug("%s: switching to dynamic VW mask at t=%d", job.name, t)

        x0 = diffusion.p_sample_loop(
            params,
            sched,
            job.label,
            config.n_frames,
            config.gamma,
            rate,
            config.model.guidance_scale,
            rng_util.stream(config.seed, "sample", job.label, job.index),
            clip=config.clip_samples,
            index_scale=config.index_scale,
            on_mask=on_mask,
        )
        frames = x0 * ckpt.std + ckpt.mean
        seq = motion.MotionSequence(frames, fps=config.fps, label=job.label, name=job.name)
        path = storage.save_motion(
            out / f"{job.name}{storage.FILE_SUFFIX}",
            seq,
            layout,
            {"seed": config.seed, "T": sched.T, "gamma": config.gamma, "reduction_rate": rate},
        )
        if dump_masks:
            dump = {"T": sched.T, "gamma": config.gamma, "reduction_rate": rate, "masks": masks}
            (out / f"{job.name}.masks.json").write_text(json.dumps(dump, indent=2) + "\n", encoding="utf-8")
        return path

    threads = get_thread_count()
    paths = []
    started = time.monotonic()
    with click.progressbar(length=len(jobs), label="Sampling", file=get_progress_output()) as bar:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as executor:
                for path in executor.map(run, jobs):
                    paths.append(path)
                    bar.update(1)
        else:
            for job in jobs:
                paths.append(run(job))
                bar.update(1)

    logger.info("Wrote %d samples to %s in %s", len(paths), out, get_time_txt(time.monotonic() - started))
    return paths


# =============================================================================
# eval
# =============================================================================


def load_samples(sample_dir: Path) -> list:
    sample_dir = Path(sample_dir)
    if not sample_dir.is_dir():
        raise StorageError(f"Sample directory not found: {sample_dir}")
    files = storage.list_motion_files(sample_dir)
    if not files:
        raise ProgramTerminatedError(f"No motion files in {sample_dir}")
    return [storage.load_motion(path)[0] for path in files]


def evaluate(
    config: RunConfig,
    sample_dir: Optional[Path] = None,
    run_id: Optional[str] = None,
    checkpoint: Optional[Path] = None,
    metrics_file: Optional[Path] = None,
) -> dict:
    sample_dir = Path(sample_dir) if sample_dir is not None else Path(config.out) / SAMPLES_DIR
    if checkpoint is not None:
        load_checkpoint(config, checkpoint)
    samples = load_samples(sample_dir)
    reference = load_dataset(config.dataset_path)

    missing = [s.name for s in samples if s.label is None]
    if missing:
        raise ProgramTerminatedError(f"Samples without class label: {', '.join(missing[:5])}")

    metrics = evaluation.evaluate_samples(
        samples,
        reference.sequences,
        reference.layout,
        seed=config.seed,
        pairs=config.eval_pairs,
        threads=get_thread_count(),
    )

    run_id = run_id or Path(config.out).name
    rows = [
        evaluation.MetricRow(run_id, name, value, config.seed, config.config_hash)
        for name, value in metrics.items()
    ]
    metrics_path = Path(metrics_file) if metrics_file is not None else Path(config.out) / METRICS_FILE
    ensure_dir(metrics_path.parent)
    evaluation.write_metrics(metrics_path, rows)

    for name, value in metrics.items():
        logger.info("%s: %s = %.6f", run_id, name, value)
    return metrics


# =============================================================================
# keyframes
# =============================================================================


def inspect_keyframes(config: RunConfig, motion_file: Path, rate: float) -> tuple:
    ensure_file(motion_file, "Motion file")
    seq, layout, _ = storage.load_motion(motion_file)

    features = keyframes.build_frame_features(seq, config.index_scale)
    priority = keyframes.vw_priority(features)
    mask = keyframes.select_from_priority(priority, rate)

    out = ensure_dir(Path(config.out))
    stem = Path(motion_file).name.removesuffix(storage.FILE_SUFFIX)
    report = {
        "motion": str(motion_file),
        "n_frames": seq.n_frames,
        "reduction_rate": rate,
        "index_scale": config.index_scale,
        "removal_order": [int(i) for i in priority.order],
        "areas": [float(a) for a in priority.areas],
        "keyframes": mask.indices.tolist(),
    }
    json_path = out / f"{stem}.keyframes.json"
    json_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    svg_path = plotting.save_svg(plotting.build_keyframe_overlay(seq, layout, mask), out / f"{stem}.keyframes.svg")

    logger.info("%s: kept %d of %d frames at rate %.2f", stem, mask.count, seq.n_frames, rate)
    return json_path, svg_path


# =============================================================================
# plot
# =============================================================================


def plot(csv_files: Sequence[Path], out_dir: Path) -> list:
    out_dir = ensure_dir(Path(out_dir))
    metric_rows = []
    paths = []
    for csv_file in csv_files:
        ensure_file(csv_file, "CSV file")
        with open(csv_file, newline="", encoding="utf-8") as f:
            header = tuple(next(csv.reader(f), ()))
        if header == evaluation.METRICS_HEADER:
            metric_rows.extend(evaluation.read_metrics(csv_file))
        elif header == LOSS_HEADER:
            history = read_loss_csv(csv_file)
            if not history:
                raise ProgramTerminatedError(f"CSV file has no rows: {csv_file}")
            stem = Path(csv_file).stem
            paths.append(plotting.plot_loss_history(history, out_dir / f"{stem}.svg", title=stem))
        else:
            raise ProgramTerminatedError(f"Unrecognized CSV header in {csv_file}: {','.join(header)}")

    if metric_rows:
        paths.extend(plotting.plot_metrics(metric_rows, out_dir))
    elif not paths:
        raise ProgramTerminatedError("No rows to plot")

    for path in paths:
        logger.info("Wrote %s", path)
    return paths


# =============================================================================
# sweep
# =============================================================================


def series_name(rate: float) -> str:
    return "dense" if rate == 0.0 else f"sparse{rate:g}"


def sweep(config: RunConfig, steps: Sequence[int], rates: Sequence[float]) -> Path:
    """T × 축약률 조합마다 학습/샘플/평가. 가장 큰 T에서는 균등 마스크 샘플러도 평가합니다."""
    if not steps or not rates:
        raise ConfigError("sweep needs at least one step count and one reduction rate")

    root = ensure_dir(Path(config.out))
    metrics_path = root / METRICS_FILE
    if not config.dataset_path.exists():
        gen_data(config)

    largest = max(steps)
    for rate in rates:
        for T in sorted(steps):
            name = series_name(rate)
            run = dataclasses.replace(
                config,
                out=str(root / f"{name}_T{T}"),
                dataset=str(config.dataset_path),
                diffusion_steps=T,
                model=dataclasses.replace(config.model, reduction_rate=rate),
            ).validate()
            logger.info("Sweep run %s@%d", name, T)
            train(run)
            sample(run)
            evaluate(run, run_id=f"{name}@{T}", metrics_file=metrics_path)

            if T == largest and rate > 0 and config.gamma > 0:
                uniform = dataclasses.replace(run, out=str(root / f"{name}-uniform_T{T}"), gamma=0.0)
                sample(uniform, checkpoint=Path(run.out) / MODEL_FILE)
                evaluate(uniform, run_id=f"{name}-uniform@{T}", metrics_file=metrics_path)

    logger.info("Sweep metrics written to %s", metrics_path)
    return metrics_path
