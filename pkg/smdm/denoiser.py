"""
희소 키프레임 트랜스포머 denoiser

x_t의 키프레임 행만 모아(gather) Lipschitz 입력 MLP로 투영하고,
조건 토큰(타임스텝 + 클래스)과 함께 트랜스포머 스택을 통과시킨 뒤
특징 공간에서 선형 보간해 전체 프레임으로 되돌리고 Lipschitz 출력 MLP로 x̂₀를 냅니다.
비키프레임 행은 스택에 들어가지 않습니다.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np

from smdm import lipschitz
from smdm import tensor as tt
from smdm.keyframes import KeyframeMask
from smdm.tensor import Tensor

logger = logging.getLogger(__name__)

LN_EPS = 1e-5
POSITION_BASE = 10000.0


class DenoiserError(ValueError):
    """잘못된 denoiser 입력 (조건 범위, 설정 값)."""


@dataclass
class DenoiserConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    dropout: float = 0.1
    reduction_rate: float = 0.8
    omega_0: float = 30.0
    lipschitz_weight: float = 1e-6
    fsq_levels: list = field(default_factory=lambda: [8, 5, 5, 5])
    n_classes: int = 6
    cfg_dropout: float = 0.1
    guidance_scale: float = 2.5
    bound_source: str = "param"
    ffn_mult: int = 2
    mlp_kind: str = "lipschitz"

    def validate(self) -> None:
        if self.d_model < 1 or self.n_layers < 0 or self.n_heads < 1:
            raise DenoiserError("d_model, n_heads must be positive and n_layers non-negative")
        if self.d_model % self.n_heads:
            raise DenoiserError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        for name in ("dropout", "reduction_rate", "cfg_dropout"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise DenoiserError(f"{name} must be in [0, 1), got {value}")
        if any(level < 2 for level in self.fsq_levels):
            raise DenoiserError(f"every FSQ level count must be ≥ 2, got {self.fsq_levels}")
        if self.n_classes < 1:
            raise DenoiserError("n_classes must be ≥ 1")
        if self.guidance_scale < 0:
            raise DenoiserError("guidance_scale must be ≥ 0")
        if self.lipschitz_weight < 0:
            raise DenoiserError("lipschitz_weight must be ≥ 0")
        if self.bound_source not in lipschitz.BOUND_SOURCES:
            raise DenoiserError(f"bound_source must be one of {lipschitz.BOUND_SOURCES}")
        if self.mlp_kind not in lipschitz.MLP_KINDS:
            raise DenoiserError(f"mlp_kind must be one of {lipschitz.MLP_KINDS}, got {self.mlp_kind!r}")

    @property
    def uses_lipschitz_term(self) -> bool:
        return self.mlp_kind == "lipschitz" and self.lipschitz_weight > 0

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


# =============================================================================
# 파라미터
# =============================================================================


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _mlp_layout(config: DenoiserConfig, dim: int) -> dict:
    if config.mlp_kind == "plain":
        return {"input": [dim, config.d_model], "output": [config.d_model, dim]}
    return {
        "input": [dim, config.d_model, config.d_model],
        "output": [config.d_model, config.d_model, dim],
    }


class DenoiserParams:
    """denoiser의 학습 가능한 배열 모음 (이름 → ndarray, 삽입 순서 고정)."""

    def __init__(self, config: DenoiserConfig, dim: int, arrays: dict):
        self.config = config
        self.dim = dim
        self.arrays = arrays

    def __len__(self):
        return len(self.arrays)

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, self.dim, {k: v.copy() for k, v in self.arrays.items()})

    def bind(self, tape: Optional[tt.Tape] = None) -> dict:
        """이름 → Tensor. tape가 주어지면 leaf로 등록합니다."""
        if tape is None:
            return {k: Tensor(v) for k, v in self.arrays.items()}
        return {k: tape.leaf(v, name=k) for k, v in self.arrays.items()}

    def mlp(self, prefix: str) -> lipschitz.LipschitzMLP:
        dims = _mlp_layout(self.config, self.dim)[prefix]
        plain = self.config.mlp_kind == "plain"
        layers, names = [], []
        for i in range(len(dims) - 1):
            name = f"{prefix}.{i}"
            last = plain or i == len(dims) - 2
            layers.append(
                lipschitz.LipschitzLayer(
                    weight=self.arrays[f"{name}.weight"],
                    bias=self.arrays[f"{name}.bias"],
                    c=None if plain else self.arrays[f"{name}.c"],
                    omega_0=1.0 if last else self.config.omega_0,
                    activation="identity" if last else "sine",
                )
            )
            names.append(name)
        return lipschitz.LipschitzMLP(
            layers, bound_source=self.config.bound_source, names=names, kind=self.config.mlp_kind
        )


def init_params(config: DenoiserConfig, dim: int, rng: np.random.Generator) -> DenoiserParams:
    config.validate()
    d, f = config.d_model, config.ffn_dim
    arrays: dict = {}

    for prefix, dims in _mlp_layout(config, dim).items():
        mlp = lipschitz.make_mlp(
            dims, rng, omega_0=config.omega_0, bound_source=config.bound_source, kind=config.mlp_kind
        )
        mlp.names = [f"{prefix}.{i}" for i in range(len(mlp.layers))]
        arrays.update(mlp.arrays())

    arrays["time.w1"] = _glorot(rng, d, d)
    arrays["time.b1"] = np.zeros(d)
    arrays["time.w2"] = _glorot(rng, d, d)
    arrays["time.b2"] = np.zeros(d)
    arrays["class_embedding"] = rng.normal(0.0, 1.0, size=(config.n_classes + 1, d))

    n_codes = len(config.fsq_levels)
    for layer in range(config.n_layers):
        p = f"layers.{layer}"
        arrays[f"{p}.ln1.gain"] = np.ones(d)
        arrays[f"{p}.ln1.bias"] = np.zeros(d)
        for proj in ("q", "k", "v", "o"):
            arrays[f"{p}.attn.w{proj}"] = _glorot(rng, d, d)
            arrays[f"{p}.attn.b{proj}"] = np.zeros(d)
        if n_codes:
            arrays[f"{p}.fsq.down"] = _glorot(rng, d, n_codes)
            arrays[f"{p}.fsq.up"] = _glorot(rng, n_codes, d)
        arrays[f"{p}.ln2.gain"] = np.ones(d)
        arrays[f"{p}.ln2.bias"] = np.zeros(d)
        arrays[f"{p}.ffn.w1"] = _glorot(rng, d, f)
        arrays[f"{p}.ffn.b1"] = np.zeros(f)
        arrays[f"{p}.ffn.w2"] = _glorot(rng, f, d)
        arrays[f"{p}.ffn.b2"] = np.zeros(d)

    arrays["final_ln.gain"] = np.ones(d)
    arrays["final_ln.bias"] = np.zeros(d)

    params = DenoiserParams(config, dim, arrays)
    logger.debug("Initialized denoiser with %d parameters", params.count())
    return params


def param_count(config: DenoiserConfig, dim: int) -> int:
    d, f, L = config.d_model, config.ffn_dim, len(config.fsq_levels)
    if config.mlp_kind == "plain":
        mlps = (dim * d + d) + (d * dim + dim)
    else:
        mlps = (dim * d + d + 1) + (d * d + d + 1) + (d * d + d + 1) + (d * dim + dim + 1)
    time = 2 * (d * d + d)
    classes = (config.n_classes + 1) * d
    per_layer = 4 * d + 4 * (d * d + d) + 2 * d * L + (d * f + f) + (f * d + d)
    return mlps + time + classes + config.n_layers * per_layer + 2 * d


# =============================================================================
# 임베딩
# =============================================================================


def sinusoidal_encoding(positions, d_model: int) -> np.ndarray:
    """PE[p, 2i] = sin(p / 10000^(2i/d)), PE[p, 2i+1] = cos(...)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    i = np.arange(0, d_model, 2, dtype=np.float64)
    freq = np.exp(-math.log(POSITION_BASE) * i / d_model)
    table = np.zeros((positions.shape[0], d_model))
    table[:, 0::2] = np.sin(positions * freq)
    table[:, 1::2] = np.cos(positions * freq)[:, : d_model // 2]
    return table


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return tt.add(tt.matmul(x, w), b)


def _norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return tt.add(tt.mul(tt.layer_norm(x, LN_EPS), gain), bias)


def gelu(x: Tensor) -> Tensor:
    """tanh 근사 GELU."""
    inner = tt.scale(tt.add(x, tt.scale(tt.mul(tt.square(x), x), 0.044715)), math.sqrt(2.0 / math.pi))
    return tt.mul(tt.scale(x, 0.5), tt.add(tt.tanh(inner), 1.0))


def condition_token(t: int, c: Optional[int], p: Mapping[str, Tensor], config: DenoiserConfig) -> Tensor:
    if c is not None and not 0 <= c < config.n_classes:
        raise DenoiserError(f"class id {c} out of range [0, {config.n_classes})")
    row = config.n_classes if c is None else c
    with tt.op_scope("io"):
        time = tt.constant(sinusoidal_encoding([t], config.d_model))
        time = _affine(tt.tanh(_affine(time, p["time.w1"], p["time.b1"])), p["time.w2"], p["time.b2"])
    return tt.add(time, tt.gather_rows(p["class_embedding"], [row]))


def _embed(frames: np.ndarray, indices: np.ndarray, t, c, params: DenoiserParams, p) -> Tensor:
    x = tt.constant(frames)
    rows = tt.gather_rows(x, indices) if indices is not None else x
    positions = indices if indices is not None else np.arange(frames.shape[0])
    with tt.op_scope("io"):
        h = lipschitz.lip_forward(params.mlp("input"), rows, p)
    h = tt.add(h, tt.constant(sinusoidal_encoding(positions, params.config.d_model)))
    return tt.concat([condition_token(t, c, p, params.config), h], axis=0)


def embed_tokens(
    x_t: np.ndarray,
    mask: KeyframeMask,
    t: int,
    c: Optional[int],
    params: DenoiserParams,
    p: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    """키프레임 행만 투영 + 원래 인덱스의 위치 인코딩, 앞에 조건 토큰 하나 (K+1 토큰)."""
    frames = np.asarray(x_t, dtype=np.float64)
    if mask.n_frames != frames.shape[0]:
        raise tt.ShapeError(f"mask covers {mask.n_frames} frames but x_t has {frames.shape[0]}")
    p = params.bind() if p is None else p
    return _embed(frames, mask.indices, t, c, params, p)


# =============================================================================
# FSQ / 어텐션
# =============================================================================


def fsq_quantize(keys, levels) -> Tensor:
    """차원별 유한 스칼라 양자화. 역전파는 straight-through.

    홀수 L: round(h·tanh(z))/h, h = ⌊L/2⌋.
    짝수 L: 반 칸 이동한 격자를 써서 값이 정확히 L개가 되도록 함.
    """
    keys = tt.as_tensor(keys)
    levels = np.asarray(levels, dtype=np.float64)
    if keys.shape[-1] != levels.shape[0]:
        raise tt.ShapeError(f"fsq_quantize: key dim {keys.shape[-1]} != {levels.shape[0]} levels")
    if np.any(levels < 2):
        raise DenoiserError(f"every FSQ level count must be ≥ 2, got {levels.tolist()}")

    even = levels % 2 == 0
    half_l = np.where(even, (levels - 1) * (1 + 1e-3) / 2, (levels - 1) / 2)
    offset = np.where(even, 0.5, 0.0)
    shift = np.arctanh(offset / half_l)
    half_width = np.floor(levels / 2)

    bounded = tt.sub(tt.mul(tt.tanh(tt.add(keys, shift)), half_l), offset)
    return tt.mul(tt.round_ste(bounded), 1.0 / half_width)


def sparse_attention_layer(
    tokens: Tensor,
    layer: int,
    p: Mapping[str, Tensor],
    config: DenoiserConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """pre-norm 멀티헤드 셀프 어텐션 + FFN. 점수 행렬은 (K+1)×(K+1)."""
    pre = f"layers.{layer}"
    rate = config.dropout if rng is not None else 0.0
    dh = config.head_dim

    y = _norm(tokens, p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"])
    with tt.op_scope("projection"):
        q = _affine(y, p[f"{pre}.attn.wq"], p[f"{pre}.attn.bq"])
        k = _affine(y, p[f"{pre}.attn.wk"], p[f"{pre}.attn.bk"])
        v = _affine(y, p[f"{pre}.attn.wv"], p[f"{pre}.attn.bv"])
        if config.fsq_levels:
            codes = fsq_quantize(tt.matmul(k, p[f"{pre}.fsq.down"]), config.fsq_levels)
            k = tt.matmul(codes, p[f"{pre}.fsq.up"])

    heads = []
    for h in range(config.n_heads):
        qh = tt.take_slice(q, h * dh, (h + 1) * dh)
        kh = tt.take_slice(k, h * dh, (h + 1) * dh)
        vh = tt.take_slice(v, h * dh, (h + 1) * dh)
        with tt.op_scope("attention_scores"):
            scores = tt.scale(tt.matmul(qh, tt.transpose(kh)), 1.0 / math.sqrt(dh))
        weights = tt.dropout(tt.softmax(scores), rate, rng)
        with tt.op_scope("value_mix"):
            heads.append(tt.matmul(weights, vh))

    with tt.op_scope("projection"):
        attn = _affine(tt.concat(heads, axis=-1), p[f"{pre}.attn.wo"], p[f"{pre}.attn.bo"])
    tokens = tt.add(tokens, tt.dropout(attn, rate, rng))

    y = _norm(tokens, p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"])
    with tt.op_scope("ffn"):
        hidden = gelu(_affine(y, p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"]))
        ffn = _affine(tt.dropout(hidden, rate, rng), p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"])
    return tt.add(tokens, tt.dropout(ffn, rate, rng))


# =============================================================================
# 보간 / 전체 파이프라인
# =============================================================================


def interpolation_plan(mask: KeyframeMask) -> tuple:
    """프레임별 (왼쪽 키프레임 번호, 오른쪽 키프레임 번호, 왼쪽 가중치, 오른쪽 가중치)."""
    keys = mask.indices
    n = mask.n_frames
    frames = np.arange(n)
    right = np.searchsorted(keys, frames, side="left")
    is_key = mask.bits
    left = np.where(is_key, right, right - 1)
    i = keys[left].astype(np.float64)
    j = keys[right].astype(np.float64)
    span = np.where(is_key, 1.0, j - i)
    w_left = np.where(is_key, 1.0, (j - frames) / span)
    w_right = np.where(is_key, 0.0, (frames - i) / span)
    return left, right, w_left[:, None], w_right[:, None]


def interpolate_features(features, mask: KeyframeMask) -> Tensor:
    """K×d 키프레임 특징을 N×d로 선형 보간합니다. 키프레임 행은 그대로 복사."""
    features = tt.as_tensor(features)
    if features.shape[0] != mask.count:
        raise tt.ShapeError(f"interpolate_features: {features.shape[0]} rows for {mask.count} keyframes")
    left, right, w_left, w_right = interpolation_plan(mask)
    with tt.op_scope("interpolation"):
        return tt.add(
            tt.mul(tt.gather_rows(features, left), w_left),
            tt.mul(tt.gather_rows(features, right), w_right),
        )


def denoise(
    x_t: np.ndarray,
    t: int,
    c: Optional[int],
    mask: Optional[KeyframeMask],
    params: DenoiserParams,
    rng: Optional[np.random.Generator] = None,
    p: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    """embed → 희소 어텐션 스택 → 조건 토큰 제거 → 보간 → 출력 MLP.

    mask가 None이면 gather/보간 없이 모든 프레임을 쓰는 밀집 경로.
    rng가 주어지면 학습 모드 (dropout 활성).
    """
    config = params.config
    frames = np.asarray(x_t, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != params.dim:
        raise tt.ShapeError(f"x_t shape {frames.shape} does not match model dim {params.dim}")
    if mask is not None and mask.n_frames != frames.shape[0]:
        raise tt.ShapeError(f"mask covers {mask.n_frames} frames but x_t has {frames.shape[0]}")

    p = params.bind() if p is None else p
    tokens = _embed(frames, None if mask is None else mask.indices, t, c, params, p)
    for layer in range(config.n_layers):
        tokens = sparse_attention_layer(tokens, layer, p, config, rng)
    tokens = _norm(tokens, p["final_ln.gain"], p["final_ln.bias"])

    keyframe_features = tt.take_slice(tokens, 1, tokens.shape[0], axis=0)
    dense = keyframe_features if mask is None else interpolate_features(keyframe_features, mask)
    with tt.op_scope("io"):
        return lipschitz.lip_forward(params.mlp("output"), dense, p)


def denoise_cfg(
    x_t: np.ndarray,
    t: int,
    c: Optional[int],
    mask: Optional[KeyframeMask],
    params: DenoiserParams,
    guidance_scale: float,
    p: Optional[Mapping[str, Tensor]] = None,
) -> np.ndarray:
    """classifier-free guidance: u + s·(cond − u)."""
    if guidance_scale < 0:
        raise DenoiserError(f"guidance scale must be ≥ 0, got {guidance_scale}")
    p = params.bind() if p is None else p
    if c is None or guidance_scale == 0.0:
        return denoise(x_t, t, None, mask, params, p=p).data
    cond = denoise(x_t, t, c, mask, params, p=p).data
    if guidance_scale == 1.0:
        return cond
    uncond = denoise(x_t, t, None, mask, params, p=p).data
    return uncond + guidance_scale * (cond - uncond)
