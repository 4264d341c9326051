"""
키프레임 선택

학습/추론용 키프레임 마스크를 만듭니다.
- Visvalingam-Whyatt(VW) 우선순위 축약 (프레임 특징 공간에서)
- 균등 간격 마스크, 무작위 마스크 (ablation)
- 학습 시 축약률 잡음, 추론 시 동적 마스크 갱신
"""

import heapq
import logging
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from smdm.motion import MotionSequence

logger = logging.getLogger(__name__)

MAX_MASK_NOISE = 0.2
GAMMA_TOLERANCE = 1e-9


class KeyframeError(ValueError):
    """잘못된 키프레임 선택 인자."""


# =============================================================================
# 타입
# =============================================================================


@dataclass
class FrameFeatures:
    points: np.ndarray  # N × (D + 1), 마지막 열이 프레임 인덱스

    @property
    def n_frames(self) -> int:
        return self.points.shape[0]


@dataclass
class PriorityList:
    order: list  # 제거 순서 (내부 인덱스의 순열)
    areas: list  # 제거 시점의 effective area
    n_frames: int


@dataclass
class KeyframeMask:
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        n = self.bits.shape[0]
        if n < 2 or not (self.bits[0] and self.bits[-1]):
            raise KeyframeError("keyframe mask must mark both endpoints")

    @classmethod
    def from_indices(cls, indices, n_frames: int) -> "KeyframeMask":
        bits = np.zeros(n_frames, dtype=bool)
        bits[np.asarray(list(indices), dtype=np.intp)] = True
        return cls(bits)

    @classmethod
    def full(cls, n_frames: int) -> "KeyframeMask":
        return cls(np.ones(n_frames, dtype=bool))

    @property
    def n_frames(self) -> int:
        return int(self.bits.shape[0])

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def to_dict(self) -> dict:
        return {"n_frames": self.n_frames, "keyframes": self.indices.tolist()}

    def __eq__(self, other):
        return isinstance(other, KeyframeMask) and np.array_equal(self.bits, other.bits)


# =============================================================================
# 기하
# =============================================================================


def effective_area(prev, cur, nxt) -> float:
    """세 점이 이루는 삼각형 넓이, 차원 무관.

    a = cur − prev, b = nxt − prev 의 2×2 소행렬식 aᵢbⱼ − aⱼbᵢ 로 ½‖a ∧ b‖ 를 구합니다.
    F=2 에서는 ½|det[a b]| 와 같고, 거의 일직선인 세 점에서도 상쇄 오차가 없습니다.
    """
    prev = np.asarray(prev, dtype=np.float64)
    a = np.asarray(cur, dtype=np.float64) - prev
    b = np.asarray(nxt, dtype=np.float64) - prev
    outer = np.outer(a, b)
    upper = np.triu_indices(a.shape[0], 1)
    minors = outer[upper] - outer.T[upper]
    return 0.5 * math.sqrt(float(minors @ minors))


def build_frame_features(motion: Union[MotionSequence, np.ndarray], index_scale: float = 1.0) -> FrameFeatures:
    frames = motion.frames if isinstance(motion, MotionSequence) else np.asarray(motion, dtype=np.float64)
    n = frames.shape[0]
    index = index_scale * np.arange(n, dtype=np.float64)[:, None]
    return FrameFeatures(np.hstack([frames, index]))


def vw_priority(features: FrameFeatures) -> PriorityList:
    """최소 effective area 내부 점을 반복 제거하여 우선순위 목록을 만듭니다.

    같은 넓이는 낮은 프레임 인덱스가 먼저 제거됩니다.
    """
    pts = features.points
    n = pts.shape[0]
    if n < 2:
        raise KeyframeError(f"need at least 2 frames, got {n}")

    prev = list(range(-1, n - 1))
    nxt = list(range(1, n + 1))
    version = [0] * n
    removed = [False] * n

    heap = []
    for i in range(1, n - 1):
        heap.append((effective_area(pts[i - 1], pts[i], pts[i + 1]), i, 0))
    heapq.heapify(heap)

    order, areas = [], []
    while heap:
        area, i, ver = heapq.heappop(heap)
        if removed[i] or ver != version[i]:
            continue
        removed[i] = True
        order.append(i)
        areas.append(area)

        p, q = prev[i], nxt[i]
        nxt[p] = q
        prev[q] = p
        # 이웃은 제거된 점을 건너 다시 연결된 상태로 넓이를 다시 계산
        for j in (p, q):
            if 0 < j < n - 1:
                version[j] += 1
                heapq.heappush(
                    heap, (effective_area(pts[prev[j]], pts[j], pts[nxt[j]]), j, version[j])
                )

    return PriorityList(order=order, areas=areas, n_frames=n)


# =============================================================================
# 마스크 생성
# =============================================================================


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise KeyframeError(f"reduction rate must be in [0, 1), got {rate}")


def keyframe_count(n_frames: int, reduction_rate: float) -> int:
    """K = max(2, round(N·(1 − rate))), 반올림은 half-up."""
    k = int(math.floor(n_frames * (1.0 - reduction_rate) + 0.5))
    return min(n_frames, max(2, k))


def select_from_priority(priority: PriorityList, reduction_rate: float) -> KeyframeMask:
    _check_rate(reduction_rate)
    n = priority.n_frames
    k = keyframe_count(n, reduction_rate)
    interior = priority.order[len(priority.order) - (k - 2):] if k > 2 else []
    return KeyframeMask.from_indices([0, n - 1, *interior], n)


def select_keyframes(features: FrameFeatures, reduction_rate: float) -> KeyframeMask:
    _check_rate(reduction_rate)
    return select_from_priority(vw_priority(features), reduction_rate)


def uniform_mask(n_frames: int, reduction_rate: float) -> KeyframeMask:
    if n_frames < 2:
        raise KeyframeError(f"need at least 2 frames, got {n_frames}")
    k = keyframe_count(n_frames, reduction_rate)
    raw = np.floor(np.linspace(0.0, n_frames - 1, k) + 0.5).astype(int)
    indices = []
    for idx in raw:
        if indices and idx <= indices[-1]:
            idx = indices[-1] + 1
        indices.append(int(idx))
    return KeyframeMask.from_indices(indices, n_frames)


def random_mask(n_frames: int, reduction_rate: float, rng: np.random.Generator) -> KeyframeMask:
    """양 끝점 + 무작위 내부 프레임 (무작위 키프레임 ablation)."""
    _check_rate(reduction_rate)
    k = keyframe_count(n_frames, reduction_rate)
    interior = rng.choice(np.arange(1, n_frames - 1), size=k - 2, replace=False) if k > 2 else []
    return KeyframeMask.from_indices([0, n_frames - 1, *interior], n_frames)


def _clamp_rate(rate: float) -> float:
    return min(max(rate, 0.0), math.nextafter(1.0, 0.0))


def perturb_mask(
    priority: PriorityList, base_rate: float, delta: float, rng: np.random.Generator
) -> KeyframeMask:
    """축약률에 ε ~ U(−δ, δ)를 더해 K를 흔든 VW 마스크."""
    if not 0.0 <= delta <= MAX_MASK_NOISE:
        raise KeyframeError(f"mask noise δ must be in [0, {MAX_MASK_NOISE}], got {delta}")
    eps = rng.uniform(-delta, delta)
    return select_from_priority(priority, _clamp_rate(base_rate + eps))


def refine_threshold(total_steps: int, gamma: float) -> int:
    """VW 마스크로 바뀌는 가장 큰 스텝 ⌊γT⌋. 0.57 × 100 같은 부동소수 오차는 흡수합니다."""
    return int(math.floor(gamma * total_steps + GAMMA_TOLERANCE))


def use_refined_mask(t: int, total_steps: int, gamma: float) -> bool:
    return t <= refine_threshold(total_steps, gamma)


def dynamic_mask_update(
    x_t, t: int, total_steps: int, gamma: float, reduction_rate: float, index_scale: float = 1.0
) -> KeyframeMask:
    """t ≤ γT 이면 x_t의 VW 마스크, 아니면 균등 마스크."""
    if not 1 <= t <= total_steps:
        raise KeyframeError(f"step t={t} outside [1, {total_steps}]")
    frames = x_t.frames if isinstance(x_t, MotionSequence) else np.asarray(x_t)
    if use_refined_mask(t, total_steps, gamma):
        return select_keyframes(build_frame_features(frames, index_scale), reduction_rate)
    return uniform_mask(frames.shape[0], reduction_rate)
