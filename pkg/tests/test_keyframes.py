import numpy as np
import pytest

from smdm import keyframes
from smdm.keyframes import FrameFeatures, KeyframeError, KeyframeMask
from smdm.motion import MotionSequence


def brute_force_priority(points):
    """매 단계 남은 내부 점의 넓이를 모두 다시 계산하는 참조 구현."""
    alive = list(range(len(points)))
    order, areas = [], []
    while len(alive) > 2:
        best = None
        for pos in range(1, len(alive) - 1):
            area = keyframes.effective_area(points[alive[pos - 1]], points[alive[pos]], points[alive[pos + 1]])
            if best is None or area < best[0]:
                best = (area, pos)
        area, pos = best
        order.append(alive.pop(pos))
        areas.append(area)
    return order, areas


def test_vw_priority_matches_brute_force():
    rng = np.random.default_rng(0)

    for trial in range(1000):
        n = int(rng.integers(2, 13))
        f = [2, 3, 11][trial % 3]
        points = rng.normal(size=(n, f))

        result = keyframes.vw_priority(FrameFeatures(points))
        order, areas = brute_force_priority(points)

        assert result.order == order
        assert np.allclose(result.areas, areas, rtol=0, atol=1e-10)


def test_vw_priority_small_example():
    frames = np.array([[0.0], [0.0], [5.0], [0.0], [0.0]])

    result = keyframes.vw_priority(keyframes.build_frame_features(frames))

    assert result.order == [1, 3, 2]
    assert result.areas == pytest.approx([2.5, 2.5, 10.0])


def test_effective_area_matches_determinant():
    rng = np.random.default_rng(1)
    triples = rng.normal(size=(10_000, 3, 2)) * 10

    for a, b, c in triples:
        det = 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        assert keyframes.effective_area(a, b, c) == pytest.approx(det, rel=0, abs=1e-10)


def test_effective_area_collinear_is_zero():
    assert keyframes.effective_area([0, 0, 0], [1, 1, 1], [2, 2, 2]) == 0.0


def test_effective_area_near_collinear_keeps_precision():
    # 높이 1e-7 인 얇은 삼각형: 밑변 2√2, 넓이 = ½·|det| = 1e-7
    area = keyframes.effective_area([0.0, 0.0], [1.0, 1.0 + 1e-7], [2.0, 2.0])

    assert area == pytest.approx(1e-7, rel=1e-6)


def test_effective_area_near_collinear_in_high_dimension():
    direction = np.linspace(1.0, 2.0, 9)
    offset = np.zeros(9)
    offset[4] = 1e-6

    area = keyframes.effective_area(np.zeros(9), direction + offset, 2 * direction)

    norm = np.linalg.norm(direction)
    expected = 1e-6 * norm * np.sqrt(1 - (direction[4] / norm) ** 2)
    assert area == pytest.approx(expected, rel=1e-6)


def test_effective_area_is_rotation_and_translation_invariant():
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    shift = rng.normal(size=5)

    for a, b, c in rng.normal(size=(200, 3, 5)):
        rotated = [q @ p + shift for p in (a, b, c)]
        expected = keyframes.effective_area(a, b, c)
        assert keyframes.effective_area(*rotated) == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_build_frame_features_appends_scaled_index():
    seq = MotionSequence(np.zeros((4, 2)))

    features = keyframes.build_frame_features(seq, index_scale=0.5)

    assert features.points.shape == (4, 3)
    assert features.points[:, -1].tolist() == [0.0, 0.5, 1.0, 1.5]


@pytest.mark.parametrize(
    "n_frames,rate,expected",
    [
        (64, 0.8, 13),
        (100, 0.8, 20),
        (10, 0.95, 2),
        (5, 0.0, 5),
        (9, 0.45, 5),
        (2, 0.9, 2),
    ],
)
def test_keyframe_count(n_frames, rate, expected):
    assert keyframes.keyframe_count(n_frames, rate) == expected


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_select_rejects_bad_rate(rate):
    features = keyframes.build_frame_features(np.zeros((5, 2)))

    with pytest.raises(KeyframeError):
        keyframes.select_keyframes(features, rate)


def test_select_rate_zero_keeps_all_frames(rng):
    features = keyframes.build_frame_features(rng.normal(size=(20, 3)))

    mask = keyframes.select_keyframes(features, 0.0)

    assert mask == KeyframeMask.full(20)


@pytest.mark.parametrize("rate", [0.1, 0.5, 0.8, 0.99])
def test_select_keeps_endpoints_and_count(rate, rng):
    features = keyframes.build_frame_features(rng.normal(size=(40, 4)))

    mask = keyframes.select_keyframes(features, rate)

    assert mask.bits[0] and mask.bits[-1]
    assert mask.count == keyframes.keyframe_count(40, rate)


def test_selection_is_nested_across_rates(rng):
    priority = keyframes.vw_priority(keyframes.build_frame_features(rng.normal(size=(30, 3))))

    coarse = set(keyframes.select_from_priority(priority, 0.9).indices)
    fine = set(keyframes.select_from_priority(priority, 0.5).indices)

    assert coarse <= fine


def test_mask_requires_endpoints():
    with pytest.raises(KeyframeError):
        KeyframeMask(np.array([True, True, False]))


def test_uniform_mask_is_evenly_spaced():
    mask = keyframes.uniform_mask(9, 0.45)

    assert mask.indices.tolist() == [0, 2, 4, 6, 8]


@pytest.mark.parametrize("n_frames,rate", [(64, 0.8), (7, 0.1), (3, 0.0), (100, 0.97)])
def test_uniform_mask_count(n_frames, rate):
    mask = keyframes.uniform_mask(n_frames, rate)

    assert mask.count == keyframes.keyframe_count(n_frames, rate)
    assert mask.bits[0] and mask.bits[-1]


def test_random_mask_is_seeded():
    a = keyframes.random_mask(50, 0.8, np.random.default_rng(3))
    b = keyframes.random_mask(50, 0.8, np.random.default_rng(3))

    assert a == b
    assert a.count == 10


def test_perturb_mask_zero_noise_equals_select(rng):
    priority = keyframes.vw_priority(keyframes.build_frame_features(rng.normal(size=(32, 2))))

    mask = keyframes.perturb_mask(priority, 0.75, 0.0, rng)

    assert mask == keyframes.select_from_priority(priority, 0.75)


def test_perturb_mask_count_stays_within_noise_band(rng):
    priority = keyframes.vw_priority(keyframes.build_frame_features(rng.normal(size=(64, 2))))
    low = keyframes.keyframe_count(64, 0.85)
    high = keyframes.keyframe_count(64, 0.75)

    counts = {keyframes.perturb_mask(priority, 0.8, 0.05, rng).count for _ in range(200)}

    assert min(counts) >= low
    assert max(counts) <= high
    assert len(counts) > 1


@pytest.mark.parametrize("delta", [-0.01, 0.25])
def test_perturb_mask_rejects_bad_noise(delta, rng):
    priority = keyframes.vw_priority(keyframes.build_frame_features(rng.normal(size=(8, 2))))

    with pytest.raises(KeyframeError):
        keyframes.perturb_mask(priority, 0.5, delta, rng)


def test_dynamic_mask_gamma_zero_is_always_uniform(rng):
    x_t = rng.normal(size=(30, 4))

    for t in range(1, 11):
        assert keyframes.dynamic_mask_update(x_t, t, 10, 0.0, 0.8) == keyframes.uniform_mask(30, 0.8)


def test_dynamic_mask_switches_to_vw_at_gamma(rng):
    x_t = rng.normal(size=(30, 4))
    expected = keyframes.select_keyframes(keyframes.build_frame_features(x_t), 0.8)

    assert keyframes.dynamic_mask_update(x_t, 10, 100, 0.1, 0.8) == expected
    assert keyframes.dynamic_mask_update(x_t, 11, 100, 0.1, 0.8) == keyframes.uniform_mask(30, 0.8)


@pytest.mark.parametrize("t", [0, 11])
def test_dynamic_mask_rejects_step_out_of_range(t, rng):
    with pytest.raises(KeyframeError):
        keyframes.dynamic_mask_update(rng.normal(size=(5, 2)), t, 10, 0.1, 0.5)


def test_use_refined_mask_boundary():
    assert keyframes.use_refined_mask(10, 100, 0.1)
    assert not keyframes.use_refined_mask(11, 100, 0.1)
    assert not keyframes.use_refined_mask(1, 100, 0.0)


@pytest.mark.parametrize(
    "total_steps, gamma, expected",
    [(100, 0.57, 57), (100, 0.1, 10), (50, 0.3, 15), (1000, 0.29, 290), (100, 0.0, 0), (100, 1.0, 100)],
)
def test_refine_threshold_is_exact_floor(total_steps, gamma, expected):
    assert keyframes.refine_threshold(total_steps, gamma) == expected


def test_use_refined_mask_boundary_with_inexact_gamma():
    # 0.57 * 100 == 56.99999999999999 in float64
    assert keyframes.use_refined_mask(57, 100, 0.57)
    assert not keyframes.use_refined_mask(58, 100, 0.57)
