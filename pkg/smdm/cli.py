import logging
import sys
from pathlib import Path
from typing import Optional

import click

from smdm import __version__, cli_app
from smdm import tensor as tt
from smdm.cli_app_click_util import KeyValueType, NaturalOrderGroup, UnitFloat
from smdm.cli_app_util import ConfigError, NumericError, ProgramTerminatedError, StorageError
from smdm.config import resolve_config
from smdm.denoiser import DenoiserError
from smdm.diffusion import ScheduleError
from smdm.evaluation import EvaluationError
from smdm.keyframes import KeyframeError
from smdm.log_util import init_logging
from smdm.motion import UnknownClassError
from smdm.storage import MalformedFileError

logger = logging.getLogger("smdm")


def _as_program_error(e: Exception) -> Optional[ProgramTerminatedError]:
    """도메인 예외를 종료 코드가 붙은 사용자 오류로 바꿉니다."""
    if isinstance(e, ProgramTerminatedError):
        return e
    if isinstance(e, tt.NonFiniteError):
        return NumericError(f"Numeric failure: {e}")
    if isinstance(e, MalformedFileError):
        return StorageError(str(e))
    if isinstance(e, OSError):
        target = f" {e.filename}" if e.filename else ""
        return StorageError(f"I/O error{target}: {e.strerror or e}")
    if isinstance(e, UnknownClassError):
        return ConfigError(str(e))
    if isinstance(e, (DenoiserError, KeyframeError, ScheduleError, tt.ShapeError)):
        return ConfigError(str(e))
    if isinstance(e, EvaluationError):
        return ProgramTerminatedError(str(e))
    return None


class SmdmGroup(NaturalOrderGroup):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.ClickException, click.Abort):
            raise
        except Exception as e:
            error = _as_program_error(e)
            if error is None:
                logger.critical("Unknown exception", exc_info=True)
                sys.exit(1)
            logger.critical(error)
            sys.exit(error.exit_code)


def run_options(func):
    """실행 설정을 만드는 공통 옵션."""
    options = [
        click.option(
            "--config",
            "config_file",
            type=click.Path(dir_okay=False, path_type=Path),
            help="JSON run config file.",
        ),
        click.option("--seed", type=click.IntRange(0, 2**64 - 1), help="Root seed (overrides config)."),
        click.option(
            "--out",
            type=click.Path(file_okay=False, path_type=Path),
            help="Output directory (overrides config).",
        ),
        click.option(
            "--set",
            "overrides",
            type=KeyValueType(),
            multiple=True,
            help="Config override, e.g. --set model.d_model=32 (repeatable).",
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _config(config_file, seed, out, overrides):
    return resolve_config(config_file, overrides, seed=seed, out=out)


@click.group(cls=SmdmGroup)
@click.option("--quiet", "-q", is_flag=True, help="Only show errors.")
@click.option("--verbose", "-v", is_flag=True, help="Show debug output.")
@click.option(
    "--log",
    "log_file",
    type=click.Path(dir_okay=False, path_type=Path),
    help="Also write log to this file.",
)
@click.version_option(__version__)
def cli(quiet: bool, verbose: bool, log_file: Path) -> None:
    """Sparse keyframe motion diffusion: data, training, sampling and evaluation."""
    init_logging(quiet, verbose, log_file)


@cli.command()
@run_options
def gen_data(config_file, seed, out, overrides):
    """Generate the synthetic class-labeled motion dataset."""
    cli_app.gen_data(_config(config_file, seed, out, overrides))


@cli.command()
@run_options
def train(config_file, seed, out, overrides):
    """Train the denoiser; writes checkpoints and a loss curve CSV."""
    cli_app.train(_config(config_file, seed, out, overrides))


@cli.command()
@run_options
@click.option(
    "--checkpoint",
    type=click.Path(dir_okay=False, path_type=Path),
    help="Checkpoint file (default: <out>/model.smdm).",
)
@click.option("--class", "classes", multiple=True, help="Motion class to sample (repeatable, default: all).")
@click.option("--count", type=click.IntRange(min=1), help="Samples per class.")
@click.option("--dump-masks", is_flag=True, help="Write the keyframe mask used at every step.")
@click.option("--ema", "use_ema", is_flag=True, help="Sample with EMA weights if the checkpoint has them.")
def sample(config_file, seed, out, overrides, checkpoint, classes, count, dump_masks, use_ema):
    """Sample motions with the uniform-then-dynamic mask schedule."""
    cli_app.sample(
        _config(config_file, seed, out, overrides),
        checkpoint=checkpoint,
        classes=classes,
        count=count,
        dump_masks=dump_masks,
        use_ema=use_ema,
    )


@cli.command(name="eval")
@run_options
@click.option(
    "--samples",
    "sample_dir",
    type=click.Path(file_okay=False, path_type=Path),
    help="Sample directory (default: <out>/samples).",
)
@click.option("--checkpoint", type=click.Path(dir_okay=False, path_type=Path), help="Checkpoint to verify.")
@click.option("--run-id", help="Run id written to the metrics CSV (default: output directory name).")
def eval_(config_file, seed, out, overrides, sample_dir, checkpoint, run_id):
    """Compute Fréchet distance, fidelity, diversity and EES; append to metrics CSV."""
    cli_app.evaluate(
        _config(config_file, seed, out, overrides),
        sample_dir=sample_dir,
        run_id=run_id,
        checkpoint=checkpoint,
    )


@cli.command()
@run_options
@click.argument("motion_file", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--rate", type=UnitFloat(), default=0.8, show_default=True, help="Reduction rate.")
def keyframes(config_file, seed, out, overrides, motion_file, rate):
    """Select keyframes of a motion file; writes JSON and an SVG overlay."""
    cli_app.inspect_keyframes(_config(config_file, seed, out, overrides), motion_file, rate)


@cli.command()
@click.argument("csv_files", nargs=-1, required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    default=Path("plots"),
    show_default=True,
    help="Directory for SVG figures.",
)
def plot(csv_files, out):
    """Plot metrics CSVs (metric vs steps) and loss CSVs (loss vs step)."""
    cli_app.plot(csv_files, out)


def _int_list(ctx, param, value):
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"{value!r} is not a comma-separated list of integers") from None


def _rate_list(ctx, param, value):
    try:
        rates = [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"{value!r} is not a comma-separated list of rates") from None
    if any(not 0.0 <= r < 1.0 for r in rates):
        raise click.BadParameter("every rate must be in [0, 1)")
    return rates


@cli.command()
@run_options
@click.option("--steps", default="10,50,100", show_default=True, callback=_int_list, help="Diffusion step counts T.")
@click.option("--rates", default="0,0.8", show_default=True, callback=_rate_list, help="Reduction rates (0 = dense).")
def sweep(config_file, seed, out, overrides, steps, rates):
    """Train and evaluate every T × rate combination into one metrics CSV."""
    cli_app.sweep(_config(config_file, seed, out, overrides), steps, rates)


def main():
    cli(prog_name="smdm")
