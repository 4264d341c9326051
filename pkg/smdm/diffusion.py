"""
확산 과정

노이즈 스케줄, 닫힌 형태 순방향 확산(q_sample), x₀ 예측 학습 스텝
(Lipschitz 정규화 포함), Adam 업데이트, 균등→동적 마스크 스케줄을 쓰는 조상 샘플러.
"""

import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from smdm import denoiser, keyframes, lipschitz
from smdm import rng as rng_util
from smdm import tensor as tt
from smdm.denoiser import DenoiserParams
from smdm.keyframes import KeyframeMask

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("cosine", "linear")
COSINE_OFFSET = 0.008
MAX_BETA = 0.999
LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ScheduleError(ValueError):
    """잘못된 스케줄 인자 또는 범위를 벗어난 스텝."""


# =============================================================================
# 노이즈 스케줄
# =============================================================================


@dataclass
class NoiseSchedule:
    kind: str
    T: int
    betas: np.ndarray
    alphas: np.ndarray  # 1 − β_t
    alpha_bars: np.ndarray  # ᾱ_t
    alpha_bars_prev: np.ndarray  # ᾱ_{t−1}, ᾱ₀ = 1
    posterior_variance: np.ndarray  # β̃_t

    def _check(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"step t={t} outside [1, {self.T}]")
        return t - 1

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._check(t)])

    def beta(self, t: int) -> float:
        return float(self.betas[self._check(t)])


def _cosine_alpha_bar(t: np.ndarray, total: int) -> np.ndarray:
    s = COSINE_OFFSET
    f = np.cos(((t / total + s) / (1 + s)) * math.pi / 2) ** 2
    f0 = math.cos((s / (1 + s)) * math.pi / 2) ** 2
    return f / f0


def make_schedule(T: int, kind: str = "cosine") -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be ≥ 1, got {T}")
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {kind!r}")

    if kind == "cosine":
        steps = np.arange(T + 1, dtype=np.float64)
        abar = _cosine_alpha_bar(steps, T)
        betas = np.minimum(1.0 - abar[1:] / abar[:-1], MAX_BETA)
    else:
        # 1000 스텝 기준 구간을 T에 맞춰 늘리되 β_T ≤ 0.999 유지
        factor = min(1000.0 / T, MAX_BETA / LINEAR_BETA_END)
        if T == 1:
            betas = np.array([LINEAR_BETA_END * factor])
        else:
            betas = np.linspace(LINEAR_BETA_START * factor, LINEAR_BETA_END * factor, T)

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_variance = betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)
    return NoiseSchedule(kind, T, betas, alphas, alpha_bars, alpha_bars_prev, posterior_variance)


def q_coefficients(sched: NoiseSchedule, t: int) -> tuple:
    """(√ᾱ_t, √(1−ᾱ_t))."""
    abar = sched.alpha_bar(t)
    return math.sqrt(abar), math.sqrt(1.0 - abar)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise tt.ShapeError(f"q_sample: x0 shape {x0.shape} != noise shape {eps.shape}")
    a, b = q_coefficients(sched, t)
    return a * x0 + b * eps


def posterior_coefficients(sched: NoiseSchedule, t: int) -> tuple:
    """q(x_{t−1} | x_t, x₀)의 평균 계수 (x̂₀ 계수, x_t 계수)와 표준편차."""
    i = sched._check(t)
    beta = sched.betas[i]
    abar, abar_prev = sched.alpha_bars[i], sched.alpha_bars_prev[i]
    coef_x0 = math.sqrt(abar_prev) * beta / (1.0 - abar)
    coef_xt = math.sqrt(1.0 - beta) * (1.0 - abar_prev) / (1.0 - abar)
    return coef_x0, coef_xt, math.sqrt(sched.posterior_variance[i])


# =============================================================================
# 학습
# =============================================================================


MASK_STRATEGIES = ("vw", "random")
LOSS_FRAMES = ("dense", "keyframes")


@dataclass
class TrainingOptions:
    mask_noise: float = 0.05
    mask_strategy: str = "vw"
    loss_frames: str = "dense"
    index_scale: float = 1.0
    dense: bool = False  # gather/보간 없는 밀집 기준 모델


@dataclass
class StepResult:
    loss: float
    recon: float
    lipschitz: float
    grads: dict
    keyframe_counts: list
    steps_drawn: list


def training_mask(
    x0: np.ndarray,
    rate: float,
    options: TrainingOptions,
    rng: np.random.Generator,
    priority: Optional[keyframes.PriorityList] = None,
) -> Optional[KeyframeMask]:
    if options.dense:
        return None
    n = x0.shape[0]
    if rate == 0.0:
        return KeyframeMask.full(n)
    if options.mask_strategy == "random":
        eps = rng.uniform(-options.mask_noise, options.mask_noise)
        return keyframes.random_mask(n, keyframes._clamp_rate(rate + eps), rng)
    if priority is None:
        priority = keyframes.vw_priority(keyframes.build_frame_features(x0, options.index_scale))
    return keyframes.perturb_mask(priority, rate, options.mask_noise, rng)


def training_step(
    batch: Sequence[tuple],
    params: DenoiserParams,
    sched: NoiseSchedule,
    options: TrainingOptions,
    rng: np.random.Generator,
    priorities: Optional[Sequence] = None,
) -> StepResult:
    """배치 (x₀, 클래스) 쌍에 대한 손실과 기울기.

    샘플마다 용도별 하위 생성기(t/ε, 마스크, 조건 드롭, dropout)를 따로 씁니다.
    """
    if not batch:
        raise ValueError("training batch is empty")
    config = params.config
    child_seeds = rng.integers(0, 2**63 - 1, size=(len(batch), 4))

    with tt.Tape() as tape:
        p = params.bind(tape)
        recon_terms = []
        counts, drawn = [], []
        for b, (x0, label) in enumerate(batch):
            x0 = np.asarray(x0, dtype=np.float64)
            g_noise, g_mask, g_cond, g_drop = (
                np.random.Generator(np.random.Philox(int(s))) for s in child_seeds[b]
            )
            t = int(g_noise.integers(1, sched.T + 1))
            eps = g_noise.normal(size=x0.shape)
            priority = priorities[b] if priorities is not None else None
            mask = training_mask(x0, config.reduction_rate, options, g_mask, priority)
            c = None if g_cond.random() < config.cfg_dropout else label

            x_t = q_sample(x0, t, eps, sched)
            x0_hat = denoiser.denoise(x_t, t, c, mask, params, rng=g_drop, p=p)

            target, pred = tt.constant(x0), x0_hat
            if options.loss_frames == "keyframes" and mask is not None:
                target = tt.gather_rows(target, mask.indices)
                pred = tt.gather_rows(pred, mask.indices)
            recon_terms.append(tt.mean(tt.square(tt.sub(target, pred))))
            counts.append(x0.shape[0] if mask is None else mask.count)
            drawn.append(t)

        recon = recon_terms[0]
        for term in recon_terms[1:]:
            recon = tt.add(recon, term)
        recon = tt.scale(recon, 1.0 / len(batch))

        loss = recon
        lip_value = 0.0
        if config.uses_lipschitz_term:
            lip = tt.add(
                lipschitz.lipschitz_loss(params.mlp("input"), p),
                lipschitz.lipschitz_loss(params.mlp("output"), p),
            )
            lip_value = lip.item()
            loss = tt.add(recon, tt.scale(lip, config.lipschitz_weight))

    tt.check_finite(loss, "training loss")
    by_id = tape.backward(loss)
    grads = {name: by_id[t.node_id] for name, t in p.items()}
    return StepResult(loss.item(), recon.item(), lip_value, grads, counts, drawn)


# =============================================================================
# 옵티마이저
# =============================================================================


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def optimizer_step(params: DenoiserParams, grads: dict, state: AdamState, lr: float) -> DenoiserParams:
    """편향 보정 Adam 업데이트 (β₁=0.9, β₂=0.999, eps=1e-8)."""
    if set(grads) != set(params.arrays):
        missing = sorted(set(params.arrays) ^ set(grads))
        raise KeyError(f"gradients not aligned with parameters: {missing[:5]}")

    state.step += 1
    bc1 = 1.0 - ADAM_BETA1**state.step
    bc2 = 1.0 - ADAM_BETA2**state.step
    for name, value in params.arrays.items():
        g = grads[name]
        m = ADAM_BETA1 * state.m.get(name, 0.0) + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v.get(name, 0.0) + (1.0 - ADAM_BETA2) * g * g
        state.m[name], state.v[name] = m, v
        params.arrays[name] = value - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return params


def ema_update(ema: dict, params: DenoiserParams, decay: float) -> None:
    for name, value in params.arrays.items():
        ema[name] = decay * ema[name] + (1.0 - decay) * value


@dataclass
class TrainResult:
    params: DenoiserParams
    history: list
    keyframe_counts: Counter
    ema: Optional[dict] = None


def train(
    sequences: Sequence[tuple],
    params: DenoiserParams,
    sched: NoiseSchedule,
    options: TrainingOptions,
    seed: int,
    steps: int,
    batch_size: int,
    lr: float,
    ema_decay: float = 0.0,
    log_every: int = 50,
    on_step: Optional[Callable[[int, StepResult, DenoiserParams, Optional[dict]], None]] = None,
) -> TrainResult:
    """정규화된 (x₀, 라벨) 목록으로 steps번 학습합니다."""
    if not sequences:
        raise ValueError("no training sequences")

    priorities = None
    if not options.dense and options.mask_strategy == "vw" and params.config.reduction_rate > 0:
        priorities = [
            keyframes.vw_priority(keyframes.build_frame_features(x0, options.index_scale))
            for x0, _ in sequences
        ]

    state = AdamState()
    ema = {k: v.copy() for k, v in params.arrays.items()} if ema_decay > 0 else None
    history = []
    k_counts: Counter = Counter()
    started = time.monotonic()

    for step in range(1, steps + 1):
        gen = rng_util.stream(seed, "train", step)
        replace = batch_size > len(sequences)
        picks = gen.choice(len(sequences), size=batch_size, replace=replace)
        batch = [sequences[i] for i in picks]
        batch_priorities = [priorities[i] for i in picks] if priorities is not None else None

        result = training_step(batch, params, sched, options, gen, batch_priorities)
        optimizer_step(params, result.grads, state, lr)
        if ema is not None:
            ema_update(ema, params, ema_decay)

        k_counts.update(result.keyframe_counts)
        history.append(
            {
                "step": step,
                "loss": result.loss,
                "recon": result.recon,
                "lipschitz": result.lipschitz,
                "mean_k": float(np.mean(result.keyframe_counts)),
            }
        )
        if log_every and (step % log_every == 0 or step == 1):
            logger.info(
                "step %d/%d loss %.5f (recon %.5f) [%.1fs]",
                step,
                steps,
                result.loss,
                result.recon,
                time.monotonic() - started,
            )
        if on_step is not None:
            on_step(step, result, params, ema)

    return TrainResult(params, history, k_counts, ema)


# =============================================================================
# 샘플링
# =============================================================================


def p_sample_loop(
    params: DenoiserParams,
    sched: NoiseSchedule,
    c: Optional[int],
    n_frames: int,
    gamma: float,
    reduction_rate: float,
    guidance_scale: float,
    rng: np.random.Generator,
    clip: Optional[float] = 3.0,
    index_scale: float = 1.0,
    on_mask: Optional[Callable[[int, KeyframeMask], None]] = None,
) -> np.ndarray:
    """x_T ~ N(0, I)에서 t = T..1 조상 샘플링. 정규화 좌표의 x₀를 반환합니다."""
    dim = params.dim
    p = params.bind()
    x_t = rng.normal(size=(n_frames, dim))
    for t in range(sched.T, 0, -1):
        mask = keyframes.dynamic_mask_update(x_t, t, sched.T, gamma, reduction_rate, index_scale)
        if on_mask is not None:
            on_mask(t, mask)
        x0_hat = denoiser.denoise_cfg(x_t, t, c, mask, params, guidance_scale, p=p)
        if clip is not None:
            x0_hat = np.clip(x0_hat, -clip, clip)
        if t == 1:
            x_t = x0_hat
            break
        coef_x0, coef_xt, sigma = posterior_coefficients(sched, t)
        x_t = coef_x0 * x0_hat + coef_xt * x_t + sigma * rng.normal(size=x_t.shape)
        tt.check_finite(x_t, f"sample at t={t - 1}")
    tt.check_finite(x_t, "sample")
    return x_t
