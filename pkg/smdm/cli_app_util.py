import io
import sys
from pathlib import Path
from typing import Optional, TextIO


class ProgramTerminatedError(Exception):
    """사용자에게 그대로 보여줄 실패. exit_code로 종료합니다."""

    exit_code = 1


class ConfigError(ProgramTerminatedError):
    exit_code = 2


class StorageError(ProgramTerminatedError):
    exit_code = 3


class NumericError(ProgramTerminatedError):
    exit_code = 4


def is_output_to_terminal() -> bool:
    return sys.stdout.isatty()


def get_progress_output() -> Optional[TextIO]:
    """진행 표시줄 출력 대상. quiet이거나 터미널이 아니면 버림."""
    from smdm.log_util import is_quiet

    if is_quiet() or not sys.stdout.isatty():
        return io.StringIO()
    return None


def ensure_dir(path: Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"Cannot create directory {path}: {e.strerror or e}") from e
    return path


def ensure_file(path: Path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"{what} not found: {path}")
    return path
