import numpy as np
import pytest

from smdm import tensor as tt
from smdm.tensor import NonFiniteError, ShapeError, Tape, Tensor


@pytest.mark.parametrize(
    "name,func,shapes",
    [
        ("add", lambda a, b: tt.sum_(tt.add(a, b) * tt.add(a, b)), [(3, 4), (4,)]),
        ("sub", lambda a, b: tt.sum_(tt.square(tt.sub(a, b))), [(3, 4), (3, 1)]),
        ("mul", lambda a, b: tt.sum_(tt.mul(a, b)), [(2, 3), (2, 3)]),
        ("div", lambda a, b: tt.sum_(tt.div(a, tt.add(tt.square(b), 1.0))), [(2, 3), (2, 3)]),
        ("matmul", lambda a, b: tt.sum_(tt.sin(tt.matmul(a, b))), [(3, 4), (4, 2)]),
        ("batched matmul", lambda a, b: tt.sum_(tt.tanh(tt.matmul(a, b))), [(2, 3, 4), (2, 4, 2)]),
        ("softmax", lambda a, b: tt.sum_(tt.mul(tt.softmax(a), b)), [(3, 5), (3, 5)]),
        ("layer_norm", lambda a, b: tt.sum_(tt.mul(tt.layer_norm(a), b)), [(3, 6), (3, 6)]),
        ("softplus", lambda a, b: tt.mean(tt.mul(tt.softplus(a), b)), [(4,), (4,)]),
        ("sqrt", lambda a, b: tt.sum_(tt.sqrt(tt.add(tt.square(a), 1.0))), [(5,), (1,)]),
        ("concat", lambda a, b: tt.sum_(tt.square(tt.concat([a, b], axis=0))), [(2, 3), (1, 3)]),
        ("slice", lambda a, b: tt.sum_(tt.sin(tt.take_slice(a, 1, 3))), [(2, 4), (1,)]),
        ("transpose", lambda a, b: tt.sum_(tt.sin(tt.matmul(tt.transpose(a), b))), [(3, 2), (3, 4)]),
    ],
)
def test_op_gradients_match_central_differences(name, func, shapes, rng):
    points = [rng.normal(size=shape) for shape in shapes]

    report = tt.grad_check(func, points, tol=1e-6)

    assert report.passed, f"{name}: max rel error {report.max_rel_error:.3e} at {report.worst}"


def test_gather_scatter_gradients(rng):
    idx = np.array([0, 2, 2, 4])

    def func(a, w):
        rows = tt.gather_rows(a, idx)
        back = tt.scatter_rows(tt.mul(rows, w), [1, 3, 0, 4], 5)
        return tt.sum_(tt.square(tt.add(back, a)))

    report = tt.grad_check(func, [rng.normal(size=(5, 3)), rng.normal(size=(4, 3))])

    assert report.passed


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as excinfo:
        tt.matmul(np.zeros((3, 4)), np.zeros((5, 2)))

    assert "(3, 4)" in str(excinfo.value)
    assert "(5, 2)" in str(excinfo.value)


def test_rank_above_three_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 2, 3, 4)))


def test_backward_requires_scalar():
    with Tape() as tape:
        x = tape.leaf(np.ones(3))
        y = tt.scale(x, 2.0)

    with pytest.raises(ShapeError):
        tape.backward(y)


def test_unreached_leaf_gets_zero_gradient():
    with Tape() as tape:
        x = tape.leaf(np.ones((2, 2)))
        unused = tape.leaf(np.ones(3))
        y = tt.sum_(tt.square(x))

    gx, gu = tape.gradient(y, [x, unused])

    assert np.array_equal(gx, 2.0 * np.ones((2, 2)))
    assert np.array_equal(gu, np.zeros(3))


def test_constants_are_not_recorded():
    with Tape() as tape:
        y = tt.add(tt.constant(np.ones(2)), tt.constant(np.ones(2)))

    assert tape.records == []
    assert y.node_id is None


def test_detect_anomaly_raises_on_non_finite():
    with tt.detect_anomaly():
        with pytest.raises(NonFiniteError):
            tt.div(np.ones(2), np.zeros(2))


def test_round_ste_passes_gradient_through():
    with Tape() as tape:
        x = tape.leaf(np.array([0.2, 1.7, -2.4]))
        y = tt.sum_(tt.round_ste(x))

    (g,) = tape.gradient(y, [x])

    assert y.item() == 0.0
    assert np.array_equal(g, np.ones(3))


def test_row_normalize_bounds_rows_and_passes_zero_rows():
    weight = np.array([[3.0, -1.0], [0.0, 0.0], [0.1, 0.2]])
    bound = 1.5

    with tt.detect_anomaly():
        with Tape() as tape:
            w = tape.leaf(weight)
            b = tape.leaf(np.array(bound))
            out = tt.row_normalize(w, b)
            loss = tt.sum_(tt.square(out))
        gw, gb = tape.gradient(loss, [w, b])

    assert np.sum(np.abs(out.data[0])) == pytest.approx(bound, abs=1e-12)
    assert np.array_equal(out.data[1], [0.0, 0.0])
    assert np.array_equal(out.data[2], weight[2])
    assert np.all(np.isfinite(gw))
    assert np.isfinite(gb)


def test_row_normalize_gradient(rng):
    def func(w, b):
        return tt.sum_(tt.sin(tt.row_normalize(w, tt.softplus(b))))

    report = tt.grad_check(func, [rng.uniform(-1, 1, size=(4, 3)), np.array(-0.5)], tol=1e-6)

    assert report.passed


def test_softmax_rows_sum_to_one(rng):
    out = tt.softmax(rng.normal(size=(4, 7)) * 50.0)

    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


def test_count_ops_by_scope():
    with tt.count_ops() as counter:
        with tt.op_scope("first"):
            tt.matmul(np.ones((3, 4)), np.ones((4, 5)))
            with tt.op_scope("inner"):
                tt.mul(np.ones((2, 2)), np.ones((2, 2)))
        tt.matmul(np.ones((2, 2)), np.ones((2, 1)))

    assert counter.macs["first"] == 60
    assert counter.multiplies["inner"] == 4
    assert counter.macs["other"] == 4


def test_dropout_is_identity_without_rng(rng):
    x = rng.normal(size=(3, 3))

    assert np.array_equal(tt.dropout(x, 0.5, None).data, x)


def test_dropout_scales_kept_values():
    x = np.ones((50, 50))

    out = tt.dropout(x, 0.2, np.random.default_rng(0)).data

    assert set(np.unique(out)) <= {0.0, 1.25}
    assert 0.7 < np.mean(out > 0) < 0.9
