"""
파일 형식

데이터셋, 모션, 체크포인트는 모두 같은 컨테이너를 씁니다.

    offset 0   : 매직 b"SMDM\\x01\\n" (6 바이트)
    offset 6   : manifest 길이 (uint64 little-endian)
    offset 14  : manifest JSON (UTF-8, 키 정렬)
    그 뒤      : little-endian float64 blob

manifest의 "arrays" 항목은 {"name", "shape", "offset"} 목록이며
offset은 blob 시작 기준 float64 개수 단위입니다.
"""

import json
import logging
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from smdm import motion
from smdm.denoiser import DenoiserConfig, DenoiserParams
from smdm.motion import Dataset, MotionSequence, SkeletonLayout

logger = logging.getLogger(__name__)

MAGIC = b"SMDM\x01\n"
HEADER_SIZE = len(MAGIC) + 8
FORMAT_VERSION = 1
KINDS = ("dataset", "motion", "checkpoint")
FILE_SUFFIX = ".smdm"

_LE_F64 = np.dtype("<f8")


class MalformedFileError(ValueError):
    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: malformed file at byte {offset}: {reason}")
        self.path = path
        self.offset = offset
        self.reason = reason


@dataclass
class Container:
    kind: str
    meta: dict
    arrays: dict = field(default_factory=dict)


# =============================================================================
# 컨테이너 입출력
# =============================================================================


def encode_container(kind: str, meta: dict, arrays: Mapping[str, np.ndarray]) -> bytes:
    if kind not in KINDS:
        raise ValueError(f"container kind must be one of {KINDS}, got {kind!r}")

    entries, chunks, cursor = [], [], 0
    for name, value in arrays.items():
        # 0차원 스칼라도 shape [] 로 그대로 기록
        data = np.asarray(value, dtype=_LE_F64)
        entries.append({"name": name, "shape": list(data.shape), "offset": cursor})
        chunks.append(data.tobytes(order="C"))
        cursor += data.size

    manifest = {"format": FORMAT_VERSION, "kind": kind, "meta": meta, "arrays": entries}
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(text)) + text + b"".join(chunks)


def _is_count(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _array_entries(manifest: dict, path) -> list:
    entries = manifest.get("arrays", [])
    if not isinstance(entries, list):
        raise MalformedFileError(path, HEADER_SIZE, "manifest 'arrays' is not a list")
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or not isinstance(entry.get("name"), str):
            raise MalformedFileError(path, HEADER_SIZE, f"array entry {i} has no name")
        shape = entry.get("shape")
        if not isinstance(shape, list) or not all(_is_count(n) for n in shape):
            raise MalformedFileError(path, HEADER_SIZE, f"array {entry['name']!r} has no valid shape")
        if not _is_count(entry.get("offset")):
            raise MalformedFileError(path, HEADER_SIZE, f"array {entry['name']!r} has no valid offset")
    return entries


def decode_container(raw: bytes, path="<bytes>", expect_kind: Optional[str] = None) -> Container:
    if raw[: len(MAGIC)] != MAGIC:
        raise MalformedFileError(path, 0, "missing SMDM header")
    if len(raw) < HEADER_SIZE:
        raise MalformedFileError(path, len(raw), "truncated manifest length")
    (length,) = struct.unpack_from("<Q", raw, len(MAGIC))
    blob_start = HEADER_SIZE + length
    if len(raw) < blob_start:
        raise MalformedFileError(path, len(raw), f"manifest declares {length} bytes, file ends early")

    try:
        manifest = json.loads(raw[HEADER_SIZE:blob_start].decode("utf-8"))
    except UnicodeDecodeError as e:
        raise MalformedFileError(path, HEADER_SIZE + e.start, "manifest is not UTF-8") from None
    except json.JSONDecodeError as e:
        text = raw[HEADER_SIZE:blob_start].decode("utf-8")
        offset = HEADER_SIZE + len(text[: e.pos].encode("utf-8"))
        raise MalformedFileError(path, offset, f"invalid manifest JSON ({e.msg})") from None

    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_VERSION:
        raise MalformedFileError(path, HEADER_SIZE, "unsupported manifest format")
    kind = manifest.get("kind")
    if kind not in KINDS or (expect_kind is not None and kind != expect_kind):
        raise MalformedFileError(path, HEADER_SIZE, f"expected a {expect_kind or 'known'} file, found {kind!r}")

    blob = raw[blob_start:]
    if len(blob) % 8:
        raise MalformedFileError(path, blob_start + len(blob) - len(blob) % 8, "blob is not a whole number of float64 values")
    values = np.frombuffer(blob, dtype=_LE_F64)

    meta = manifest.get("meta", {})
    if not isinstance(meta, dict):
        raise MalformedFileError(path, HEADER_SIZE, "manifest 'meta' is not an object")

    arrays = {}
    for entry in _array_entries(manifest, path):
        shape = tuple(entry["shape"])
        start = entry["offset"]
        size = int(np.prod(shape, dtype=np.int64))
        if start + size > values.size:
            raise MalformedFileError(
                path, blob_start + 8 * values.size, f"array {entry['name']!r} runs past end of blob"
            )
        arrays[entry["name"]] = values[start : start + size].astype(np.float64).reshape(shape)

    return Container(kind, meta, arrays)


def write_container(path: Path, kind: str, meta: dict, arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.write_bytes(encode_container(kind, meta, arrays))
    logger.debug("Wrote %s file %s", kind, path)
    return path


def read_container(path: Path, expect_kind: Optional[str] = None) -> Container:
    path = Path(path)
    return decode_container(path.read_bytes(), path, expect_kind)


# =============================================================================
# 데이터셋 / 모션
# =============================================================================


@contextmanager
def _manifest_fields(path, kind: str):
    """manifest 필드 누락/형식 오류를 MalformedFileError 로 바꿉니다."""
    try:
        yield
    except MalformedFileError:
        raise
    except KeyError as e:
        raise MalformedFileError(path, HEADER_SIZE, f"{kind} manifest has no field {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        raise MalformedFileError(path, HEADER_SIZE, f"invalid {kind} manifest: {e}") from None


def save_dataset(path: Path, dataset: Dataset) -> Path:
    meta = {
        "layout": dataset.layout.to_dict(),
        "fps": dataset.fps,
        "classes": list(dataset.classes),
        "train_idx": dataset.train_idx,
        "val_idx": dataset.val_idx,
        "sequences": [
            {"name": s.name, "label": s.label, "n_frames": s.n_frames} for s in dataset.sequences
        ],
        "info": dataset.meta,
    }
    arrays = {"stats.mean": dataset.mean, "stats.std": dataset.std}
    for i, seq in enumerate(dataset.sequences):
        arrays[f"sequence.{i}"] = seq.frames
    return write_container(path, "dataset", meta, arrays)


def load_dataset(path: Path) -> Dataset:
    box = read_container(path, "dataset")
    meta = box.meta
    with _manifest_fields(path, "dataset"):
        layout = SkeletonLayout.from_dict(meta["layout"])
        sequences = []
        for i, entry in enumerate(meta["sequences"]):
            key = f"sequence.{i}"
            if key not in box.arrays:
                raise MalformedFileError(path, HEADER_SIZE, f"manifest lists sequence {i} but blob has no {key!r}")
            sequences.append(
                MotionSequence(box.arrays[key], fps=meta["fps"], label=entry["label"], name=entry["name"])
            )
        return Dataset(
            layout=layout,
            fps=meta["fps"],
            sequences=sequences,
            train_idx=list(meta["train_idx"]),
            val_idx=list(meta["val_idx"]),
            mean=box.arrays["stats.mean"],
            std=box.arrays["stats.std"],
            classes=tuple(meta["classes"]),
            meta=meta.get("info", {}),
        )


def save_motion(path: Path, seq: MotionSequence, layout: SkeletonLayout, extra: Optional[dict] = None) -> Path:
    meta = {
        "layout": layout.to_dict(),
        "fps": seq.fps,
        "label": seq.label,
        "class": motion.class_name(seq.label) if seq.label is not None else None,
        "name": seq.name,
        "info": extra or {},
    }
    return write_container(path, "motion", meta, {"frames": seq.frames})


def load_motion(path: Path) -> tuple:
    """(MotionSequence, SkeletonLayout, info)."""
    box = read_container(path, "motion")
    if "frames" not in box.arrays:
        raise MalformedFileError(path, HEADER_SIZE, "motion file has no frames array")
    meta = box.meta
    with _manifest_fields(path, "motion"):
        seq = MotionSequence(box.arrays["frames"], fps=meta["fps"], label=meta.get("label"), name=meta.get("name"))
        return seq, SkeletonLayout.from_dict(meta["layout"]), meta.get("info", {})


def list_motion_files(directory: Path) -> list:
    return sorted(p for p in Path(directory).glob(f"*{FILE_SUFFIX}") if p.is_file())


# =============================================================================
# 체크포인트
# =============================================================================


@dataclass
class Checkpoint:
    params: DenoiserParams
    run_config: dict
    step: int
    mean: np.ndarray
    std: np.ndarray
    ema: Optional[dict] = None


def save_checkpoint(
    path: Path,
    params: DenoiserParams,
    run_config: dict,
    step: int,
    mean: np.ndarray,
    std: np.ndarray,
    ema: Optional[dict] = None,
) -> Path:
    meta = {
        "model": params.config.to_dict(),
        "dim": params.dim,
        "step": step,
        "run_config": run_config,
        "has_ema": ema is not None,
    }
    arrays = {f"param.{k}": v for k, v in params.arrays.items()}
    arrays["stats.mean"] = mean
    arrays["stats.std"] = std
    if ema is not None:
        arrays.update({f"ema.{k}": v for k, v in ema.items()})
    return write_container(path, "checkpoint", meta, arrays)


def load_checkpoint(path: Path) -> Checkpoint:
    box = read_container(path, "checkpoint")
    meta = box.meta
    params = {k[len("param."):]: v for k, v in box.arrays.items() if k.startswith("param.")}
    ema = None
    if meta.get("has_ema"):
        ema = {k[len("ema."):]: v for k, v in box.arrays.items() if k.startswith("ema.")}
    with _manifest_fields(path, "checkpoint"):
        config = DenoiserConfig(**meta["model"])
        return Checkpoint(
            params=DenoiserParams(config, int(meta["dim"]), params),
            run_config=meta.get("run_config", {}),
            step=int(meta["step"]),
            mean=box.arrays["stats.mean"],
            std=box.arrays["stats.std"],
            ema=ema,
        )
