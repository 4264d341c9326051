"""
역전파 자동 미분 텐서 코어

denoiser와 학습 손실을 표현하는 데 필요한 최소한의 64비트 밀집 텐서입니다.

주요 구성:
- Tensor: rank ≤ 3 (batch × frames × features) 값 객체
- Tape: 연산 기록과 역전파 (한 학습 스텝당 테이프 하나)
- 연산 함수: add, matmul, softmax, layer_norm 등: 테이프가 켜져 있으면 pullback을 기록
- grad_check: 중앙 차분과 테이프 기울기 비교
- count_ops: 행렬곱 MAC / 원소곱 수를 범위(scope)별로 집계
"""

import logging
import threading
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAX_RANK = 3


class ShapeError(ValueError):
    """연산의 shape 계약 위반."""


class NonFiniteError(FloatingPointError):
    """NaN/Inf 값이 감지됨."""


def _shape_error(op: str, a_shape, b_shape) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a_shape)} and {tuple(b_shape)}")


# =============================================================================
# 스레드 로컬 상태 (활성 테이프, 연산 카운터, 이상 감지)
# =============================================================================

_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _active_counter() -> Optional["OpCounter"]:
    return getattr(_state, "counter", None)


def _anomaly_enabled() -> bool:
    return getattr(_state, "anomaly", False)


# =============================================================================
# Tensor
# =============================================================================


class Tensor:
    __slots__ = ("data", "node_id", "_tape", "name")

    # numpy 배열과 섞어 쓸 때 반사 연산자가 Tensor 쪽으로 오도록 함
    __array_ufunc__ = None

    def __init__(self, data, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} tensor rejected (max rank {MAX_RANK})")
        self.data = arr
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value) -> Tensor:
    """테이프에 기록되지 않는 상수 텐서를 만듭니다."""
    return Tensor(value)


# =============================================================================
# Tape
# =============================================================================


@dataclass
class _Record:
    output_id: int
    input_ids: tuple
    pullback: Callable[[np.ndarray], tuple]


class Tape:
    """연산 기록기. with 블록 안에서 실행된 연산만 기록합니다."""

    def __init__(self):
        self.records: list[_Record] = []
        self._shapes: dict[int, tuple] = {}
        self._leaves: list[int] = []
        self._next_id = 0

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def _assign(self, tensor: Tensor) -> int:
        node_id = self._next_id
        self._next_id += 1
        tensor.node_id = node_id
        tensor._tape = self
        self._shapes[node_id] = tensor.shape
        return node_id

    def watch(self, tensor: Tensor) -> Tensor:
        """tensor를 기울기를 받을 leaf로 등록합니다."""
        if tensor._tape is not self:
            self._leaves.append(self._assign(tensor))
        return tensor

    def leaf(self, data, name: Optional[str] = None) -> Tensor:
        return self.watch(Tensor(data, name=name))

    def owns(self, tensor: Tensor) -> bool:
        return tensor._tape is self

    def record(self, output: Tensor, inputs: Sequence[Tensor], pullback) -> None:
        self._assign(output)
        input_ids = tuple(t.node_id if t._tape is self else None for t in inputs)
        self.records.append(_Record(output.node_id, input_ids, pullback))

    def backward(self, output: Tensor) -> dict[int, np.ndarray]:
        """스칼라 출력에서 역전파하여 leaf별 기울기를 반환합니다.

        도달하지 못한 leaf는 0 기울기를 받습니다.
        """
        if output.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")

        grads: dict[int, np.ndarray] = {}
        if output._tape is self:
            grads[output.node_id] = np.ones_like(output.data)

        # 기록 순서가 곧 위상 순서. 역순으로 한 번씩만 방문
        for rec in reversed(self.records):
            g = grads.pop(rec.output_id, None)
            if g is None:
                continue
            for node_id, g_in in zip(rec.input_ids, rec.pullback(g)):
                if node_id is None or g_in is None:
                    continue
                if node_id in grads:
                    grads[node_id] = grads[node_id] + g_in
                else:
                    grads[node_id] = g_in

        return {
            leaf_id: grads.get(leaf_id, np.zeros(self._shapes[leaf_id]))
            for leaf_id in self._leaves
        }

    def gradient(self, output: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
        by_id = self.backward(output)
        result = []
        for t in leaves:
            if t._tape is not self:
                result.append(np.zeros(t.shape))
            else:
                result.append(by_id[t.node_id])
        return result


def backward(tape: Tape, output: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(output)


@contextmanager
def detect_anomaly() -> Iterator[None]:
    """블록 안의 모든 연산 결과가 유한한지 검사합니다."""
    previous = _anomaly_enabled()
    _state.anomaly = True
    try:
        yield
    finally:
        _state.anomaly = previous


def check_finite(tensor, what: str = "tensor") -> None:
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values detected in {what}")


def _result(data: np.ndarray, inputs: Sequence[Tensor], pullback, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.node_id = None
    out._tape = None
    out.name = None

    if _anomaly_enabled() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")

    tape = _active_tape()
    if tape is not None and any(t._tape is tape for t in inputs):
        tape.record(out, inputs, pullback)
    return out


# =============================================================================
# 연산 카운터
# =============================================================================


class OpCounter:
    """행렬곱 MAC와 원소곱 수를 scope 이름별로 집계합니다."""

    def __init__(self):
        self.macs: Counter = Counter()
        self.multiplies: Counter = Counter()
        self._scopes: list[str] = []

    @property
    def scope(self) -> str:
        return self._scopes[-1] if self._scopes else "other"


@contextmanager
def count_ops() -> Iterator[OpCounter]:
    counter = OpCounter()
    previous = _active_counter()
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = previous


@contextmanager
def op_scope(name: str) -> Iterator[None]:
    counter = _active_counter()
    if counter is None:
        yield
        return
    counter._scopes.append(name)
    try:
        yield
    finally:
        counter._scopes.pop()


# =============================================================================
# 원소별 연산
# =============================================================================


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    a_shape, b_shape = a.shape, b.shape

    def pullback(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return _result(a.data + b.data, (a, b), pullback, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    a_shape, b_shape = a.shape, b.shape

    def pullback(g):
        return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

    return _result(a.data - b.data, (a, b), pullback, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_shape = _broadcast_shape("mul", a, b)
    a_data, b_data = a.data, b.data

    counter = _active_counter()
    if counter is not None:
        counter.multiplies[counter.scope] += int(np.prod(out_shape))

    def pullback(g):
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    return _result(a_data * b_data, (a, b), pullback, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    a_data, b_data = a.data, b.data
    out = a_data / b_data

    def pullback(g):
        return (
            _unbroadcast(g / b_data, a_data.shape),
            _unbroadcast(-g * out / b_data, b_data.shape),
        )

    return _result(out, (a, b), pullback, "div")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def pullback(g):
        return (g * s,)

    return _result(a.data * s, (a,), pullback, "scale")


def sin(a) -> Tensor:
    a = as_tensor(a)
    x = a.data

    def pullback(g):
        return (g * np.cos(x),)

    return _result(np.sin(x), (a,), pullback, "sin")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def pullback(g):
        return (g * (1.0 - y * y),)

    return _result(y, (a,), pullback, "tanh")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data

    def pullback(g):
        # d/dx log(1 + e^x) = sigmoid(x)
        return (g * np.exp(-np.logaddexp(0.0, -x)),)

    return _result(np.logaddexp(0.0, x), (a,), pullback, "softplus")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data

    def pullback(g):
        return (2.0 * g * x,)

    return _result(x * x, (a,), pullback, "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)

    def pullback(g):
        return (g / (2.0 * y),)

    return _result(y, (a,), pullback, "sqrt")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    x = a.data

    def pullback(g):
        return (g * np.sign(x),)

    return _result(np.abs(x), (a,), pullback, "abs")


def round_ste(a) -> Tensor:
    """반올림. 역전파는 straight-through (상류 기울기를 그대로 전달)."""
    a = as_tensor(a)

    def pullback(g):
        return (g,)

    return _result(np.round(a.data), (a,), pullback, "round_ste")


def dropout(a, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """inverted dropout. rng가 없거나 rate가 0이면 항등."""
    a = as_tensor(a)
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, constant(keep))


# =============================================================================
# 행렬 / 구조 연산
# =============================================================================


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)

    a_data, b_data = a.data, b.data
    out = a_data @ b_data

    counter = _active_counter()
    if counter is not None:
        counter.macs[counter.scope] += int(np.prod(out.shape)) * a.shape[-1]

    def pullback(g):
        ga = g @ _swap_last(b_data)
        gb = _swap_last(a_data) @ g
        return _unbroadcast(ga, a_data.shape), _unbroadcast(gb, b_data.shape)

    return _result(out, (a, b), pullback, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank ≥ 2, got shape {a.shape}")

    def pullback(g):
        return (_swap_last(g),)

    return _result(_swap_last(a.data), (a,), pullback, "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    first = tensors[0]
    for t in tensors[1:]:
        ok = t.ndim == first.ndim and all(
            n == m for i, (n, m) in enumerate(zip(t.shape, first.shape)) if i != axis % t.ndim
        )
        if not ok:
            raise _shape_error("concat", first.shape, t.shape)

    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def pullback(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, pullback, "concat")


def take_slice(a, start: int, stop: int, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    n = a.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of shape {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def pullback(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _result(a.data[index], (a,), pullback, "slice")


def gather_rows(a, indices) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.ndim < 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise ShapeError(f"gather_rows: indices out of range for shape {a.shape}")
    shape = a.shape

    def pullback(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), pullback, "gather_rows")


def scatter_rows(a, indices, n_rows: int) -> Tensor:
    """0 버퍼 (n_rows, ...)의 indices 위치에 a의 행을 배치합니다."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape[0] != a.shape[0]:
        raise _shape_error("scatter_rows", a.shape, idx.shape)
    if len(np.unique(idx)) != len(idx) or (idx.size and (idx.min() < 0 or idx.max() >= n_rows)):
        raise ShapeError(f"scatter_rows: indices must be unique and < {n_rows}")
    out = np.zeros((n_rows,) + a.shape[1:])
    out[idx] = a.data

    def pullback(g):
        return (g[idx],)

    return _result(out, (a,), pullback, "scatter_rows")


# =============================================================================
# 축소 / 정규화
# =============================================================================


def sum_(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def pullback(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), pullback, "sum")


def mean(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def amax(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """최댓값. 기울기는 첫 번째 argmax 원소로만 흐릅니다."""
    a = as_tensor(a)
    x = a.data
    out = np.max(x, axis=axis, keepdims=keepdims)

    def pullback(g):
        full = np.zeros_like(x)
        if axis is None:
            full.flat[np.argmax(x)] = np.asarray(g).reshape(())
            return (full,)
        arg = np.expand_dims(np.argmax(x, axis=axis), axis)
        g_k = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, arg, g_k, axis=axis)
        return (full,)

    return _result(out, (a,), pullback, "amax")


def softmax(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    y = e / np.sum(e, axis=-1, keepdims=True)

    def pullback(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result(y, (a,), pullback, "softmax")


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """마지막 축 정규화 (gain/bias는 호출자가 곱하고 더함)."""
    a = as_tensor(a)
    x = a.data
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    x_hat = xc * inv

    def pullback(g):
        g_mean = np.mean(g, axis=-1, keepdims=True)
        gx_mean = np.mean(g * x_hat, axis=-1, keepdims=True)
        return (inv * (g - g_mean - x_hat * gx_mean),)

    return _result(x_hat, (a,), pullback, "layer_norm")


def row_normalize(weight, bound) -> Tensor:
    """각 행을 ‖row‖₁ ≤ bound 가 되도록 줄입니다: W_k · min(1, bound/‖W_k‖₁).

    0 행은 그대로 통과합니다. bound는 스칼라 텐서.
    """
    weight, bound = as_tensor(weight), as_tensor(bound)
    if weight.ndim != 2 or bound.data.size != 1:
        raise _shape_error("row_normalize", weight.shape, bound.shape)

    w = weight.data
    s = float(bound.data.reshape(()))
    r = np.sum(np.abs(w), axis=1, keepdims=True)
    active = r > s  # 축소가 일어나는 행
    safe_r = np.where(active, r, 1.0)
    factor = np.where(active, s / safe_r, 1.0)
    out = w * factor

    def pullback(g):
        gw_dot = np.sum(g * w, axis=1, keepdims=True)
        gw = np.where(active, factor * g - (s / (safe_r * safe_r)) * np.sign(w) * gw_dot, g)
        gs = float(np.sum(np.where(active, gw_dot / safe_r, 0.0)))
        return gw, np.full(bound.shape, gs)

    return _result(out, (weight, bound), pullback, "row_normalize")


# =============================================================================
# 기울기 검사
# =============================================================================


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[..., Tensor],
    points: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-6,
    coordinates: Optional[Sequence[tuple]] = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """테이프 기울기와 중앙 차분을 비교합니다.

    coordinates가 주어지면 (입력 번호, 평탄화 인덱스) 목록만 검사합니다.
    """
    if h <= 0:
        raise ValueError("h must be positive")

    points = [np.array(p, dtype=np.float64) for p in points]

    with detect_anomaly():
        with Tape() as tape:
            leaves = [tape.leaf(p) for p in points]
            out = f(*leaves)
        analytic = tape.gradient(out, leaves)
    for g in analytic:
        check_finite(g, "tape gradient")

    def evaluate(values) -> float:
        with detect_anomaly():
            return f(*[Tensor(v) for v in values]).item()

    if coordinates is None:
        coordinates = [(i, j) for i, p in enumerate(points) for j in range(p.size)]

    worst_err, worst = 0.0, ()
    for i, j in coordinates:
        plus = [p.copy() for p in points]
        minus = [p.copy() for p in points]
        plus[i].flat[j] += h
        minus[i].flat[j] -= h
        numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
        tape_value = float(analytic[i].flat[j])
        denom = max(abs(numeric), abs(tape_value), floor)
        err = abs(numeric - tape_value) / denom
        if err > worst_err:
            worst_err, worst = err, (i, j)

    logger.debug("grad_check: %d coordinates, max rel error %.3e", len(coordinates), worst_err)
    return GradCheckReport(worst_err, worst, len(coordinates), tol)
