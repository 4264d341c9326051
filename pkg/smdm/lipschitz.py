"""
Lipschitz MLP

softplus로 매개화한 행 단위 ℓ₁ 정규화로 층별 연산자 노름(∞-노름)을 제한하고,
사인 활성화(SIREN 방식)를 쓰는 입력/출력 투영 MLP.
정규화 손실은 층별 상한의 곱입니다.

kind="plain" 은 비교 실험용 일반 선형 투영입니다. 행 정규화도 c 파라미터도 없습니다.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from smdm import tensor as tt
from smdm.tensor import Tensor

logger = logging.getLogger(__name__)

BOUND_SOURCES = ("param", "weight_norm")
ACTIVATIONS = ("sine", "identity")
MLP_KINDS = ("lipschitz", "plain")


@dataclass
class LipschitzLayer:
    weight: np.ndarray  # out × in
    bias: np.ndarray  # out
    c: Optional[np.ndarray] = None  # 스칼라 상한 파라미터, plain 층은 None
    omega_0: float = 1.0
    activation: str = "sine"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.c is not None:
            self.c = np.asarray(self.c, dtype=np.float64).reshape(())

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def gain(self) -> float:
        """활성화의 Lipschitz 배율 (sin(ω₀z) → ω₀)."""
        return self.omega_0 if self.activation == "sine" else 1.0


@dataclass
class LipschitzMLP:
    layers: list
    bound_source: str = "param"
    names: list = field(default_factory=list)
    kind: str = "lipschitz"

    def __post_init__(self):
        if self.bound_source not in BOUND_SOURCES:
            raise ValueError(f"bound_source must be one of {BOUND_SOURCES}, got {self.bound_source!r}")
        if self.kind not in MLP_KINDS:
            raise ValueError(f"MLP kind must be one of {MLP_KINDS}, got {self.kind!r}")
        if self.is_lipschitz and any(layer.c is None for layer in self.layers):
            raise ValueError("every Lipschitz layer needs a bound parameter c")
        if not self.names:
            self.names = [str(i) for i in range(len(self.layers))]

    @property
    def is_lipschitz(self) -> bool:
        return self.kind == "lipschitz"

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    @property
    def out_features(self) -> int:
        return self.layers[-1].out_features

    def arrays(self) -> dict:
        """이름 → 배열 (체크포인트/옵티마이저용)."""
        out = {}
        for name, layer in zip(self.names, self.layers):
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
            if self.is_lipschitz:
                out[f"{name}.c"] = layer.c
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, layer in zip(self.names, self.layers):
            layer.weight = arrays[f"{name}.weight"]
            layer.bias = arrays[f"{name}.bias"]
            if self.is_lipschitz:
                layer.c = np.asarray(arrays[f"{name}.c"]).reshape(())


def _infinity_norm(weight: np.ndarray) -> float:
    return float(np.max(np.sum(np.abs(weight), axis=1))) if weight.size else 0.0


def make_mlp(
    dims: list,
    rng: np.random.Generator,
    omega_0: float = 30.0,
    hidden_omega_0: float = 1.0,
    bound_source: str = "param",
    kind: str = "lipschitz",
) -> LipschitzMLP:
    """dims = [in, hidden..., out]. 첫 층 사인(ω₀), 중간 층 사인(ω=1), 마지막 층 항등.

    kind="plain" 이면 모든 층이 항등 활성화의 선형 층이고 U(±1/√fan_in) 로 초기화합니다.
    """
    if len(dims) < 2:
        raise ValueError("an MLP needs at least input and output sizes")

    layers = []
    n_layers = len(dims) - 1
    if kind == "plain":
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = 1.0 / math.sqrt(fan_in)
            weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(LipschitzLayer(weight=weight, bias=np.zeros(fan_out), activation="identity"))
        return LipschitzMLP(layers, bound_source=bound_source, kind=kind)

    for i in range(n_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        last = i == n_layers - 1
        omega = 1.0 if last else (omega_0 if i == 0 else hidden_omega_0)
        if i == 0:
            limit = (1.0 / fan_in) / omega
        else:
            limit = math.sqrt(6.0 / fan_in) / omega
        weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(
            LipschitzLayer(
                weight=weight,
                bias=np.zeros(fan_out),
                c=np.asarray(_infinity_norm(weight)),
                omega_0=omega,
                activation="identity" if last else "sine",
            )
        )
    return LipschitzMLP(layers, bound_source=bound_source, kind=kind)


def _layer_tensors(mlp: LipschitzMLP, i: int, tensors: Optional[Mapping[str, Tensor]]):
    layer, name = mlp.layers[i], mlp.names[i]
    if tensors is None:
        c = Tensor(layer.c) if mlp.is_lipschitz else None
        return Tensor(layer.weight), Tensor(layer.bias), c
    c = tensors[f"{name}.c"] if mlp.is_lipschitz else None
    return tensors[f"{name}.weight"], tensors[f"{name}.bias"], c


def _bound(mlp: LipschitzMLP, weight: Tensor, c: Tensor) -> Tensor:
    if mlp.bound_source == "weight_norm":
        return tt.softplus(tt.amax(tt.sum_(tt.abs_(weight), axis=1)))
    return tt.softplus(c)


def normalize_rows(
    layer: LipschitzLayer,
    weight: Optional[Tensor] = None,
    c: Optional[Tensor] = None,
    bound_source: str = "param",
) -> Tensor:
    """Ŵ_k = W_k · min(1, softplus(c)/‖W_k‖₁). 0 행은 그대로."""
    weight = Tensor(layer.weight) if weight is None else weight
    c = Tensor(layer.c) if c is None else c
    mlp = LipschitzMLP([layer], bound_source=bound_source)
    return tt.row_normalize(weight, _bound(mlp, weight, c))


def lip_forward(mlp: LipschitzMLP, x, tensors: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """σ(Ŵᵢx + bᵢ)를 차례로 적용합니다. x는 행 단위 (rows × in)."""
    x = tt.as_tensor(x)
    if x.shape[-1] != mlp.in_features:
        raise tt.ShapeError(
            f"lip_forward: input feature dim {x.shape[-1]} does not match first layer {mlp.in_features}"
        )
    for i, layer in enumerate(mlp.layers):
        weight, bias, c = _layer_tensors(mlp, i, tensors)
        w_hat = tt.row_normalize(weight, _bound(mlp, weight, c)) if mlp.is_lipschitz else weight
        z = tt.add(tt.matmul(x, tt.transpose(w_hat)), bias)
        x = tt.sin(tt.scale(z, layer.omega_0)) if layer.activation == "sine" else z
    return x


def lipschitz_loss(mlp: LipschitzMLP, tensors: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """∏ᵢ softplus(cᵢ)."""
    if not mlp.is_lipschitz:
        raise ValueError("a plain MLP has no Lipschitz bound parameters")
    loss = None
    for i in range(len(mlp.layers)):
        weight, _, c = _layer_tensors(mlp, i, tensors)
        term = _bound(mlp, weight, c)
        loss = term if loss is None else tt.mul(loss, term)
    return loss


def lipschitz_bound(mlp: LipschitzMLP) -> float:
    """ℓ∞ 기준 합성 상한 ∏ᵢ ω₀,ᵢ·softplus(cᵢ). plain MLP는 ∏ᵢ ω₀,ᵢ·‖Wᵢ‖∞."""
    bound = 1.0
    for layer in mlp.layers:
        if not mlp.is_lipschitz:
            s = _infinity_norm(layer.weight)
        elif mlp.bound_source == "weight_norm":
            s = float(np.logaddexp(0.0, _infinity_norm(layer.weight)))
        else:
            s = float(np.logaddexp(0.0, layer.c))
        bound *= layer.gain * s
    return bound


def empirical_lipschitz(mlp: LipschitzMLP, trials: int, rng: np.random.Generator) -> float:
    """무작위 쌍 (y₁, y₂)에 대한 max ‖g(y₁)−g(y₂)‖∞ / ‖y₁−y₂‖∞."""
    if trials < 1:
        raise ValueError("trials must be ≥ 1")
    y1 = rng.normal(size=(trials, mlp.in_features))
    y2 = rng.normal(size=(trials, mlp.in_features))
    g1 = lip_forward(mlp, y1).data
    g2 = lip_forward(mlp, y2).data
    num = np.max(np.abs(g1 - g2), axis=1)
    den = np.max(np.abs(y1 - y2), axis=1)
    return float(np.max(num / den))
