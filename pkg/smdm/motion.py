"""
합성 모션 데이터

HumanML3D 대신 쓰는 클래스 라벨이 붙은 절차적 모션 생성기와 데이터셋 구성.
좌표 단위는 cm, 관절 좌표는 루트 좌표계 기준 (루트 관절만 전역 궤적).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from smdm import rng as rng_util

logger = logging.getLogger(__name__)

CLASSES = ("walk", "run", "jump", "wave", "circle", "zigzag")

DEFAULT_FPS = 20
VAL_FRACTION = 0.1

# 잡음은 ±3σ로 자른 뒤 가우시안 커널로 평활화
NOISE_CLIP = 3.0
NOISE_KERNEL_WIDTH = 2.0


class UnknownClassError(KeyError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"Unknown motion class {self.name!r}, valid classes: {', '.join(CLASSES)}"


@dataclass(frozen=True)
class SkeletonLayout:
    joints: int = 5
    arity: int = 2
    end_effectors: tuple = (3, 4)

    def __post_init__(self):
        if self.arity not in (2, 3):
            raise ValueError(f"joint arity must be 2 or 3, got {self.arity}")
        if self.joints < 2:
            raise ValueError("layout needs a root and at least one limb joint")
        if any(not 0 <= j < self.joints for j in self.end_effectors):
            raise ValueError(f"end-effector indices {self.end_effectors} out of range")

    @property
    def dim(self) -> int:
        return self.joints * self.arity

    def joint_slice(self, joint: int) -> slice:
        return slice(joint * self.arity, (joint + 1) * self.arity)

    def to_dict(self) -> dict:
        return {
            "joints": self.joints,
            "arity": self.arity,
            "end_effectors": list(self.end_effectors),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SkeletonLayout":
        return cls(data["joints"], data["arity"], tuple(data["end_effectors"]))


@dataclass
class MotionSequence:
    frames: np.ndarray
    fps: int = DEFAULT_FPS
    label: Optional[int] = None
    name: Optional[str] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 2:
            raise ValueError(f"motion needs an N×D frame matrix with N ≥ 2, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("motion frames contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def joint(self, layout: SkeletonLayout, joint: int) -> np.ndarray:
        return self.frames[:, layout.joint_slice(joint)]


def class_id(name: str) -> int:
    try:
        return CLASSES.index(name)
    except ValueError:
        raise UnknownClassError(name) from None


def class_name(label: int) -> str:
    if not 0 <= label < len(CLASSES):
        raise UnknownClassError(label)
    return CLASSES[label]


# =============================================================================
# 클래스별 동작 파라미터
# =============================================================================


@dataclass(frozen=True)
class ClassProfile:
    period: int  # 사지 주기 (프레임)
    amplitude: float  # 사지 진폭 (cm)
    root_speed: float  # 전진 속도 (cm/frame)
    active_limbs: tuple = ("all",)


PROFILES = {
    "walk": ClassProfile(period=20, amplitude=20.0, root_speed=3.0),
    "run": ClassProfile(period=10, amplitude=35.0, root_speed=8.0),
    "jump": ClassProfile(period=32, amplitude=15.0, root_speed=1.0),
    "wave": ClassProfile(period=16, amplitude=30.0, root_speed=0.0, active_limbs=("last",)),
    "circle": ClassProfile(period=20, amplitude=8.0, root_speed=0.0),
    "zigzag": ClassProfile(period=25, amplitude=12.0, root_speed=4.0),
}

JUMP_HEIGHT = 40.0
CIRCLE_RADIUS = 50.0
CIRCLE_PERIOD = 40
ZIGZAG_WIDTH = 30.0
ZIGZAG_PERIOD = 24
JITTER = 0.1


def _root_path(name: str, n: int, profile: ClassProfile, speed: float, arity: int) -> np.ndarray:
    """루트 관절의 전역 궤적 (n × arity)."""
    idx = np.arange(n, dtype=np.float64)
    root = np.zeros((n, arity))
    root[:, 0] = speed * idx

    if name == "jump":
        root[:, 1] = JUMP_HEIGHT * np.sin(math.pi * idx / (n - 1))
    elif name == "circle":
        angle = 2.0 * math.pi * idx / CIRCLE_PERIOD
        root[:, 0] = CIRCLE_RADIUS * np.cos(angle)
        root[:, 1] = CIRCLE_RADIUS * np.sin(angle)
    elif name == "zigzag":
        phase = (idx % ZIGZAG_PERIOD) / ZIGZAG_PERIOD
        root[:, 1] = ZIGZAG_WIDTH * (1.0 - 4.0 * np.abs(phase - 0.5))
    return root


def _smooth_noise(shape: tuple, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma <= 0.0:
        return np.zeros(shape)
    white = np.clip(rng.normal(0.0, sigma, size=shape), -NOISE_CLIP * sigma, NOISE_CLIP * sigma)
    radius = int(math.ceil(3 * NOISE_KERNEL_WIDTH))
    taps = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (taps / NOISE_KERNEL_WIDTH) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(white, ((radius, radius), (0, 0)), mode="reflect")
    return np.stack(
        [np.convolve(padded[:, c], kernel, mode="valid") for c in range(shape[1])], axis=1
    )


def noise_step_bound(sigma: float) -> float:
    """평활화 잡음의 프레임 간 변화량 상한."""
    radius = int(math.ceil(3 * NOISE_KERNEL_WIDTH))
    taps = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (taps / NOISE_KERNEL_WIDTH) ** 2)
    kernel /= kernel.sum()
    return NOISE_CLIP * sigma * float(np.sum(np.abs(np.diff(kernel))) + 2 * kernel[0])


def max_frame_speed(name: str, n_frames: int, noise_sigma: float) -> float:
    """클래스별 채널 하나의 프레임당 변화량 상한 (cm/frame)."""
    profile = PROFILES[name]
    limb = profile.amplitude * (1 + JITTER) * 2.0 * math.pi / profile.period
    root = profile.root_speed * (1 + JITTER)
    if name == "jump":
        root = max(root, JUMP_HEIGHT * math.pi / (n_frames - 1))
    elif name == "circle":
        root = CIRCLE_RADIUS * 2.0 * math.pi / CIRCLE_PERIOD
    elif name == "zigzag":
        root = max(root, 4.0 * ZIGZAG_WIDTH / ZIGZAG_PERIOD)
    return max(limb, root) + noise_step_bound(noise_sigma)


def gen_class_motion(
    name: str,
    n_frames: int,
    layout: SkeletonLayout,
    rng: np.random.Generator,
    noise_sigma: float = 0.5,
    fps: int = DEFAULT_FPS,
) -> MotionSequence:
    """클래스별 사인파 사지 위상 + 루트 이동 + 평활 잡음 모션을 생성합니다."""
    label = class_id(name)
    if n_frames < 2:
        raise ValueError(f"n_frames must be ≥ 2, got {n_frames}")

    profile = PROFILES[name]
    amplitude = profile.amplitude * rng.uniform(1 - JITTER, 1 + JITTER)
    speed = profile.root_speed * rng.uniform(1 - JITTER, 1 + JITTER)
    phase0 = rng.uniform(0.0, 2.0 * math.pi)

    frames = np.zeros((n_frames, layout.dim))
    frames[:, layout.joint_slice(0)] = _root_path(name, n_frames, profile, speed, layout.arity)

    idx = np.arange(n_frames, dtype=np.float64)
    omega = 2.0 * math.pi / profile.period
    for j in range(1, layout.joints):
        # 휴지 자세: 루트 위로 관절을 쌓아 올림
        rest = np.zeros(layout.arity)
        rest[1] = 10.0 * j
        rest[0] = (-1) ** j * 5.0
        if "last" in profile.active_limbs and j != layout.joints - 1:
            amp = 0.0
        else:
            amp = amplitude * (1.0 if j in layout.end_effectors else 0.3)
        phase = phase0 + math.pi * (j % 2)
        wave = amp * np.sin(omega * idx + phase)
        sl = layout.joint_slice(j)
        frames[:, sl] = rest
        frames[:, sl.start] += wave
        frames[:, sl.start + 1] += 0.5 * amp * np.cos(omega * idx + phase)

    frames += _smooth_noise(frames.shape, noise_sigma, rng)
    return MotionSequence(frames, fps=fps, label=label, name=name)


# =============================================================================
# 데이터셋
# =============================================================================


@dataclass
class Dataset:
    layout: SkeletonLayout
    fps: int
    sequences: list
    train_idx: list
    val_idx: list
    mean: np.ndarray
    std: np.ndarray
    classes: tuple = CLASSES
    meta: dict = field(default_factory=dict)

    @property
    def train(self) -> list:
        return [self.sequences[i] for i in self.train_idx]

    @property
    def val(self) -> list:
        return [self.sequences[i] for i in self.val_idx]

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        return (frames - self.mean) / self.std

    def denormalize(self, frames: np.ndarray) -> np.ndarray:
        return frames * self.std + self.mean


def normalization_stats(sequences: list) -> tuple:
    stacked = np.concatenate([s.frames for s in sequences], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return mean, std


def make_dataset(
    n_per_class: int,
    n_frames: int,
    layout: SkeletonLayout,
    seed: int,
    noise_sigma: float = 0.5,
    fps: int = DEFAULT_FPS,
) -> Dataset:
    """클래스마다 n_per_class개 시퀀스를 만들고 90/10으로 나눕니다."""
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be ≥ 1, got {n_per_class}")

    sequences = []
    for label, name in enumerate(CLASSES):
        for i in range(n_per_class):
            gen = rng_util.stream(seed, "data", label, i)
            seq = gen_class_motion(name, n_frames, layout, gen, noise_sigma=noise_sigma, fps=fps)
            seq.name = f"{name}_{i:04d}"
            sequences.append(seq)

    order = rng_util.stream(seed, "data", 10_000).permutation(len(sequences))
    n_val = int(round(VAL_FRACTION * len(sequences)))
    val_idx = sorted(int(i) for i in order[:n_val])
    train_idx = sorted(int(i) for i in order[n_val:])

    mean, std = normalization_stats([sequences[i] for i in train_idx])
    logger.debug("Generated %d sequences (%d train / %d val)", len(sequences), len(train_idx), n_val)

    return Dataset(
        layout=layout,
        fps=fps,
        sequences=sequences,
        train_idx=train_idx,
        val_idx=val_idx,
        mean=mean,
        std=std,
        meta={"seed": seed, "n_per_class": n_per_class, "noise_sigma": noise_sigma},
    )
