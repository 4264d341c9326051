import logging
from pathlib import Path
from typing import Optional

import click

from smdm import cli_app_util

TTY_FORMAT = "%(message)s"
PLAIN_FORMAT = "%(asctime)s | %(levelname)s | %(message)s"

logger = logging.getLogger("smdm")


class ClickHandler(logging.Handler):
    """click.echo로 stderr에 기록합니다. 터미널이면 경고 이상에 레벨 접두어."""

    def __init__(self, is_tty: bool):
        super().__init__()
        self.is_tty = is_tty

    def emit(self, record: logging.LogRecord) -> None:
        try:
            message = self.format(record)
            if self.is_tty and record.levelno >= logging.WARNING:
                color = "red" if record.levelno >= logging.ERROR else "yellow"
                message = click.style(f"{record.levelname}: ", fg=color) + message
            click.echo(message, err=True)
        except Exception:
            self.handleError(record)


def init_logging(quiet: bool = False, verbose: bool = False, log_file: Optional[Path] = None) -> None:
    if quiet:
        level = logging.CRITICAL
    elif verbose:
        level = logging.DEBUG
    else:
        level = logging.INFO

    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    is_tty = cli_app_util.is_output_to_terminal()
    console = ClickHandler(is_tty)
    console.setFormatter(logging.Formatter(TTY_FORMAT if is_tty else PLAIN_FORMAT))
    logger.addHandler(console)

    if log_file is not None:
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(PLAIN_FORMAT))
        logger.addHandler(file_handler)

    logger.setLevel(level)
    logger.propagate = False


def is_quiet() -> bool:
    return logger.getEffectiveLevel() >= logging.CRITICAL


def get_time_txt(seconds: float) -> str:
    """경과 시간 표시: 0:10, 01:05, 01:00:05."""
    seconds = int(seconds)
    if seconds < 60:
        return f"0:{seconds:02d}"
    h, rem = divmod(seconds, 3600)
    m, s = divmod(rem, 60)
    if h:
        return f"{h:02d}:{m:02d}:{s:02d}"
    return f"{m:02d}:{s:02d}"
