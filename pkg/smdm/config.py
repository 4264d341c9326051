"""
실행 설정

기본값 → --config 파일 → --set key=value → 명시적 플래그 순으로 덮어씁니다.
설정 파일은 사람이 읽을 수 있는 JSON 하나이며, 설정 + 시드로 실행을 그대로 재현할 수 있습니다.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from smdm import diffusion, keyframes, motion
from smdm.cli_app_util import ConfigError
from smdm.denoiser import DenoiserConfig, DenoiserError

THREADS_ENV = "SMDM_THREADS"
DATASET_FILE = "dataset.smdm"
HASH_LENGTH = 12


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    dataset: str = ""

    # 데이터
    n_per_class: int = 10
    n_frames: int = 64
    joints: int = 5
    arity: int = 2
    noise_sigma: float = 0.5
    fps: int = motion.DEFAULT_FPS

    # 모델 (λ, 축약률, guidance scale 포함)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)

    # 확산 / 학습
    schedule: str = "cosine"
    diffusion_steps: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 8
    train_steps: int = 2000
    checkpoint_every: int = 500
    log_every: int = 50
    mask_noise: float = 0.05
    mask_strategy: str = "vw"
    loss_frames: str = "dense"
    index_scale: float = 1.0
    ema_decay: float = 0.0

    # 샘플링 / 평가
    gamma: float = 0.1
    clip_samples: Optional[float] = 3.0
    samples_per_class: int = 10
    eval_pairs: int = 50

    @property
    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else Path(self.out) / DATASET_FILE

    @property
    def layout(self) -> motion.SkeletonLayout:
        return motion.SkeletonLayout(joints=self.joints, arity=self.arity, end_effectors=(self.joints - 2, self.joints - 1))

    def training_options(self) -> diffusion.TrainingOptions:
        return diffusion.TrainingOptions(
            mask_noise=self.mask_noise,
            mask_strategy=self.mask_strategy,
            loss_frames=self.loss_frames,
            index_scale=self.index_scale,
            dense=self.model.reduction_rate == 0.0,
        )

    def validate(self) -> "RunConfig":
        try:
            return self._validate()
        except TypeError as e:
            raise ConfigError(f"Invalid config: wrong value type ({e})") from e

    def _validate(self) -> "RunConfig":
        def require(ok: bool, message: str) -> None:
            if not ok:
                raise ConfigError(f"Invalid config: {message}")

        require(isinstance(self.seed, int) and 0 <= self.seed < 2**64, "seed must be an unsigned 64-bit integer")
        require(self.n_per_class >= 1, f"n_per_class must be ≥ 1, got {self.n_per_class}")
        require(self.n_frames >= 2, f"n_frames must be ≥ 2, got {self.n_frames}")
        require(self.joints >= 3, f"joints must be ≥ 3 (root + two end-effectors), got {self.joints}")
        require(self.arity in (2, 3), f"arity must be 2 or 3, got {self.arity}")
        require(self.noise_sigma >= 0, "noise_sigma must be ≥ 0")
        require(self.fps >= 1, "fps must be ≥ 1")
        require(self.schedule in diffusion.SCHEDULE_KINDS, f"schedule must be one of {diffusion.SCHEDULE_KINDS}")
        require(self.diffusion_steps >= 1, f"diffusion_steps must be ≥ 1, got {self.diffusion_steps}")
        require(self.learning_rate > 0, "learning_rate must be positive")
        require(self.batch_size >= 1, "batch_size must be ≥ 1")
        require(self.train_steps >= 0, "train_steps must be ≥ 0")
        require(self.checkpoint_every >= 1, "checkpoint_every must be ≥ 1")
        require(self.log_every >= 0, "log_every must be ≥ 0")
        require(
            0.0 <= self.mask_noise <= keyframes.MAX_MASK_NOISE,
            f"mask_noise must be in [0, {keyframes.MAX_MASK_NOISE}], got {self.mask_noise}",
        )
        require(self.mask_strategy in diffusion.MASK_STRATEGIES, f"mask_strategy must be one of {diffusion.MASK_STRATEGIES}")
        require(self.loss_frames in diffusion.LOSS_FRAMES, f"loss_frames must be one of {diffusion.LOSS_FRAMES}")
        require(self.index_scale >= 0, "index_scale must be ≥ 0")
        require(0.0 <= self.ema_decay < 1.0, "ema_decay must be in [0, 1)")
        require(0.0 <= self.gamma <= 1.0, f"gamma must be in [0, 1], got {self.gamma}")
        require(self.clip_samples is None or self.clip_samples > 0, "clip_samples must be positive or null")
        require(self.samples_per_class >= 1, "samples_per_class must be ≥ 1")
        require(self.eval_pairs >= 1, "eval_pairs must be ≥ 1")
        require(self.model.n_classes == len(motion.CLASSES), f"model.n_classes must be {len(motion.CLASSES)}")
        try:
            self.model.validate()
        except DenoiserError as e:
            raise ConfigError(f"Invalid config: model: {e}") from e
        return self

    # =========================================================================
    # 직렬화
    # =========================================================================

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("Invalid config: top level must be a JSON object")
        data = dict(data)
        model_data = data.pop("model", {}) or {}
        _check_keys(cls, data, "")
        _check_keys(DenoiserConfig, model_data, "model.")
        return cls(**data, model=DenoiserConfig(**model_data))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:HASH_LENGTH]


def _check_keys(cls, data: dict, prefix: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Invalid config: unknown keys {', '.join(prefix + k for k in unknown)}")


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e.strerror or e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e.msg} (line {e.lineno})") from e
    return RunConfig.from_dict(data)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(config: RunConfig, overrides: Iterable[tuple]) -> RunConfig:
    """("model.d_model", "32") 같은 쌍을 적용한 새 설정을 반환합니다.

    점 없는 키가 모델 필드 이름이면 model 섹션으로 보냅니다.
    """
    data = config.to_dict()
    model_fields = {f.name for f in dataclasses.fields(DenoiserConfig)}
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}

    for key, raw in overrides:
        value = _parse_value(raw)
        parts = key.split(".")
        if len(parts) == 2 and parts[0] == "model" and parts[1] in model_fields:
            data["model"][parts[1]] = value
        elif len(parts) == 1 and parts[0] in top_fields and parts[0] != "model":
            data[parts[0]] = value
        elif len(parts) == 1 and parts[0] in model_fields:
            data["model"][parts[0]] = value
        else:
            raise ConfigError(f"Unknown config key {key!r}")

    try:
        return RunConfig.from_dict(data)
    except TypeError as e:
        raise ConfigError(f"Invalid config: {e}") from e


def resolve_config(
    config_file: Optional[Path] = None,
    overrides: Iterable[tuple] = (),
    seed: Optional[int] = None,
    out: Optional[Path] = None,
) -> RunConfig:
    config = load_config(config_file) if config_file is not None else RunConfig()
    config = apply_overrides(config, overrides)
    if seed is not None:
        config.seed = seed
    if out is not None:
        config.out = str(out)
    return config.validate()


def get_thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threads
