"""
평가 지표

- motion_features: 손으로 만든 고정 특징 (채널별 평균, 표준편차, 평균 |속도|, 주 주파수 크기)을
  시드 고정 무작위 투영으로 16차원에 모음
- frechet_distance: 특징 가우시안 사이 Fréchet 거리 (FID 대용)
- condition_fidelity: nearest-centroid 분류 정확도 (R-Precision 대용)
- diversity, ees (end-effector 속도)
- profile_denoise: 어텐션 비용 분석식, count_denoise: 실제 연산 계수
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass, fields
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from smdm import denoiser
from smdm import rng as rng_util
from smdm import tensor as tt
from smdm.keyframes import KeyframeMask
from smdm.motion import MotionSequence, SkeletonLayout

logger = logging.getLogger(__name__)

FEATURE_DIM = 16
FEATURE_SEED = 20240611
RAW_FEATURES_PER_CHANNEL = 4
METRICS_HEADER = ("run_id", "metric", "value", "seed", "config_hash")


class EvaluationError(ValueError):
    """지표를 계산할 수 없는 입력 (표본 부족, 차원 불일치, 빈 클래스)."""


def _frames(seq) -> np.ndarray:
    frames = seq.frames if isinstance(seq, MotionSequence) else np.asarray(seq, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 2:
        raise EvaluationError(f"need an N×D motion with N ≥ 2, got shape {frames.shape}")
    return frames


# =============================================================================
# 특징
# =============================================================================


def raw_motion_features(seq) -> np.ndarray:
    """투영 전 4·D 특징 [평균 | 표준편차 | 평균 |속도| | 주 주파수 크기]."""
    frames = _frames(seq)
    n = frames.shape[0]
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    speed = np.abs(np.diff(frames, axis=0)).mean(axis=0)
    spectrum = np.abs(np.fft.rfft(frames - mean, axis=0))[1:]
    dominant = spectrum.max(axis=0) / n if spectrum.shape[0] else np.zeros(frames.shape[1])
    return np.concatenate([mean, std, speed, dominant])


@lru_cache(maxsize=8)
def feature_projection(dim: int) -> np.ndarray:
    """(4·D) × 16 고정 무작위 투영 행렬."""
    gen = rng_util.stream(FEATURE_SEED, "eval", dim)
    width = RAW_FEATURES_PER_CHANNEL * dim
    matrix = gen.normal(0.0, 1.0 / math.sqrt(width), size=(width, FEATURE_DIM))
    matrix.setflags(write=False)
    return matrix


def motion_features(seq) -> np.ndarray:
    raw = raw_motion_features(seq)
    return raw @ feature_projection(raw.shape[0] // RAW_FEATURES_PER_CHANNEL)


def feature_matrix(samples: Sequence, threads: int = 1) -> np.ndarray:
    if threads > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            rows = list(executor.map(motion_features, samples))
    else:
        rows = [motion_features(s) for s in samples]
    return np.stack(rows) if rows else np.zeros((0, FEATURE_DIM))


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def feature_stats(features: np.ndarray) -> FeatureStats:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[0] < 1:
        raise EvaluationError("feature_stats needs at least one feature vector")
    mean = features.mean(axis=0)
    if features.shape[0] < 2:
        cov = np.zeros((features.shape[1], features.shape[1]))
    else:
        cov = np.cov(features, rowvar=False)
        cov = 0.5 * (cov + cov.T)
    return FeatureStats(mean, np.atleast_2d(cov), features.shape[0])


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh(0.5 * (matrix + matrix.T))
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """‖μ_a−μ_b‖² + tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2}).

    tr (Σ_a Σ_b)^{1/2} = tr (Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2} 로 대칭 고윳값 분해만 씁니다.
    """
    if a.dim != b.dim:
        raise EvaluationError(f"feature dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    values = np.linalg.eigvalsh(0.5 * (root_a @ b.cov @ root_a + (root_a @ b.cov @ root_a).T))
    cross = float(np.sum(np.sqrt(np.clip(values, 0.0, None))))
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)


# =============================================================================
# 모션 지표
# =============================================================================


def ees(seq, layout: SkeletonLayout) -> float:
    """end-effector 관절들의 프레임 간 이동 거리 평균 (cm/frame)."""
    frames = _frames(seq)
    speeds = [
        np.linalg.norm(np.diff(frames[:, layout.joint_slice(j)], axis=0), axis=1)
        for j in layout.end_effectors
    ]
    if not speeds:
        raise EvaluationError("layout defines no end-effector joints")
    return float(np.mean(np.concatenate(speeds)))


def diversity(samples: Sequence, pairs: int, rng: np.random.Generator) -> float:
    """서로 겹치지 않는 무작위 쌍들의 특징 거리 평균."""
    if len(samples) < 2:
        raise EvaluationError(f"diversity needs at least 2 samples, got {len(samples)}")
    if pairs < 1:
        raise EvaluationError("diversity needs at least one pair")
    pairs = min(pairs, len(samples) // 2)
    order = rng.permutation(len(samples))[: 2 * pairs]
    feats = feature_matrix([samples[i] for i in order])
    return float(np.mean(np.linalg.norm(feats[0::2] - feats[1::2], axis=1)))


@dataclass
class NearestCentroid:
    labels: np.ndarray
    centroids: np.ndarray

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(features)
        dist = np.linalg.norm(features[:, None, :] - self.centroids[None, :, :], axis=2)
        return self.labels[np.argmin(dist, axis=1)]


def nearest_centroid(features: np.ndarray, labels: Sequence[int]) -> NearestCentroid:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels)
    if features.shape[0] != labels.shape[0] or labels.size == 0:
        raise EvaluationError("nearest_centroid needs one label per feature vector")
    classes = np.unique(labels)
    centroids = np.stack([features[labels == c].mean(axis=0) for c in classes])
    return NearestCentroid(classes, centroids)


def condition_fidelity(
    samples: Sequence, intended: Sequence[int], reference: Sequence[MotionSequence], threads: int = 1
) -> float:
    """의도한 클래스의 기준 중심점이 가장 가까운 표본의 비율."""
    if len(samples) != len(intended):
        raise EvaluationError("one intended class per sample is required")
    if not samples:
        raise EvaluationError("no samples to score")
    classifier = nearest_centroid(feature_matrix(reference, threads), [s.label for s in reference])
    missing = sorted(set(int(c) for c in intended) - set(classifier.labels.tolist()))
    if missing:
        raise EvaluationError(f"reference set has no sequences for classes {missing}")
    predicted = classifier.predict(feature_matrix(samples, threads))
    return float(np.mean(predicted == np.asarray(intended)))


def evaluate_samples(
    samples: Sequence[MotionSequence],
    reference: Sequence[MotionSequence],
    layout: SkeletonLayout,
    seed: int,
    pairs: int = 50,
    threads: int = 1,
) -> dict:
    """fid, fidelity, diversity, ees 네 지표를 한 번에 계산합니다."""
    if not samples:
        raise EvaluationError("no samples to evaluate")
    sample_stats = feature_stats(feature_matrix(samples, threads))
    reference_stats = feature_stats(feature_matrix(reference, threads))
    metrics = {
        "fid": frechet_distance(sample_stats, reference_stats),
        "fidelity": condition_fidelity(samples, [s.label for s in samples], reference, threads),
        "ees": float(np.mean([ees(s, layout) for s in samples])),
    }
    if len(samples) >= 2:
        metrics["diversity"] = diversity(samples, pairs, rng_util.stream(seed, "eval", 1))
    return metrics


@dataclass
class MetricRow:
    run_id: str
    metric: str
    value: float
    seed: int
    config_hash: str


def write_metrics(csv_path: Path, rows: Sequence[MetricRow]) -> None:
    """헤더가 없으면 쓰고 행을 이어 붙입니다."""
    csv_path = Path(csv_path)
    new_file = not csv_path.exists() or csv_path.stat().st_size == 0
    with open(csv_path, "a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        if new_file:
            writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([row.run_id, row.metric, repr(float(row.value)), row.seed, row.config_hash])


def read_metrics(csv_path: Path) -> list:
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        return [
            MetricRow(r["run_id"], r["metric"], float(r["value"]), int(r["seed"]), r["config_hash"])
            for r in reader
        ]


# =============================================================================
# 연산량
# =============================================================================


@dataclass
class OpCount:
    attention_scores: int = 0
    value_mix: int = 0
    ffn: int = 0
    interpolation: int = 0
    projection: int = 0
    io: int = 0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} count must be non-negative")

    @property
    def total(self) -> int:
        return int(sum(astuple(self)))


def profile_denoise(config: denoiser.DenoiserConfig, n_frames: int, k: int, dim: int = 10, dense: bool = False) -> OpCount:
    """denoise 한 번의 분석적 MAC 수. 토큰 수는 K+1 (조건 토큰 포함).

    dense=True는 gather/보간 없는 밀집 경로 (K = N).
    """
    if not 2 <= k <= n_frames:
        raise ValueError(f"keyframe count must be in [2, N={n_frames}], got {k}")
    if dense:
        k = n_frames
    d, heads, layers = config.d_model, config.n_heads, config.n_layers
    dh, f, codes = config.head_dim, config.ffn_dim, len(config.fsq_levels)
    tokens = k + 1
    hidden = 0 if config.mlp_kind == "plain" else d * d
    return OpCount(
        attention_scores=layers * heads * tokens * tokens * dh,
        value_mix=layers * heads * tokens * tokens * dh,
        ffn=layers * 2 * tokens * d * f,
        interpolation=0 if dense else 2 * n_frames * d,
        projection=layers * (4 * tokens * d * d + 2 * tokens * d * codes),
        io=k * (dim * d + hidden) + 2 * d * d + n_frames * (hidden + d * dim),
    )


def count_denoise(params: denoiser.DenoiserParams, mask: Optional[KeyframeMask], n_frames: int) -> OpCount:
    """계수 모드로 denoise를 실제로 한 번 돌려 scope별 연산 수를 모읍니다."""
    x_t = np.zeros((n_frames, params.dim))
    with tt.count_ops() as counter:
        denoiser.denoise(x_t, 1, 0, mask, params)
    return OpCount(
        attention_scores=counter.macs["attention_scores"],
        value_mix=counter.macs["value_mix"],
        ffn=counter.macs["ffn"],
        interpolation=counter.multiplies["interpolation"],
        projection=counter.macs["projection"],
        io=counter.macs["io"],
    )
