import numpy as np
import pytest

from smdm import denoiser
from smdm import tensor as tt
from smdm.denoiser import DenoiserConfig, DenoiserError
from smdm.keyframes import KeyframeMask
from tests.conftest import make_tiny_model


@pytest.mark.parametrize(
    "overrides,dim",
    [
        ({}, 4),
        (dict(fsq_levels=[]), 6),
        (dict(n_layers=0), 4),
        (dict(d_model=16, n_heads=4, n_layers=3, fsq_levels=[8, 5, 5, 5], ffn_mult=4), 10),
        (dict(mlp_kind="plain"), 4),
        (dict(mlp_kind="plain", fsq_levels=[], n_layers=2), 6),
    ],
)
def test_param_count_matches_init(overrides, dim):
    config = make_tiny_model(**overrides)

    params = denoiser.init_params(config, dim, np.random.default_rng(0))

    assert params.count() == denoiser.param_count(config, dim)


@pytest.mark.parametrize(
    "overrides",
    [
        dict(d_model=10, n_heads=3),
        dict(dropout=1.0),
        dict(fsq_levels=[5, 1]),
        dict(guidance_scale=-1.0),
        dict(mlp_kind="spectral"),
    ],
)
def test_bad_config_rejected(overrides):
    with pytest.raises(DenoiserError):
        make_tiny_model(**overrides).validate()


def test_sinusoidal_encoding_at_zero():
    table = denoiser.sinusoidal_encoding([0, 3], 6)

    assert np.array_equal(table[0], [0, 1, 0, 1, 0, 1])
    assert table[1, 0] == pytest.approx(np.sin(3.0))


def test_output_ignores_non_keyframe_rows(tiny_params, rng):
    for _ in range(100):
        interior = rng.choice(np.arange(1, 11), size=int(rng.integers(0, 6)), replace=False)
        mask = KeyframeMask.from_indices([0, 11, *interior], 12)
        t, c = int(rng.integers(1, 50)), int(rng.integers(0, 6))
        x_t = rng.normal(size=(12, 4))
        changed = x_t.copy()
        changed[~mask.bits] = rng.normal(size=(12 - mask.count, 4)) * 100.0

        a = denoiser.denoise(x_t, t, c, mask, tiny_params).data
        b = denoiser.denoise(changed, t, c, mask, tiny_params).data

        assert np.array_equal(a, b)


def test_condition_changes_prediction(tiny_params, rng):
    x_t = rng.normal(size=(12, 4))
    mask = KeyframeMask.from_indices([0, 5, 11], 12)

    outputs = [denoiser.denoise(x_t, 3, c, mask, tiny_params).data for c in (0, 1, None)]

    assert np.max(np.abs(outputs[0] - outputs[1])) > 1e-6
    assert np.max(np.abs(outputs[0] - outputs[2])) > 1e-6


def test_lipschitz_bound_parameter_changes_prediction(tiny_params, rng):
    x_t = rng.normal(size=(10, 4))
    clone = tiny_params.copy()
    clone.arrays["output.1.c"] = np.asarray(-20.0)

    a = denoiser.denoise(x_t, 3, 1, None, tiny_params).data
    b = denoiser.denoise(x_t, 3, 1, None, clone).data

    assert np.max(np.abs(a - b)) > 1e-6


def test_attention_layer_is_permutation_equivariant(tiny_params, rng):
    p = tiny_params.bind()
    tokens = rng.normal(size=(6, 8))
    order = rng.permutation(6)

    out = denoiser.sparse_attention_layer(tt.constant(tokens), 0, p, tiny_params.config).data
    permuted = denoiser.sparse_attention_layer(tt.constant(tokens[order]), 0, p, tiny_params.config).data

    assert np.allclose(permuted, out[order], rtol=1e-12, atol=1e-12)


def test_attention_layer_single_token_attends_to_itself(tiny_params, rng):
    token = tt.constant(rng.normal(size=(1, 8)))
    scrambled = tiny_params.copy()
    for name in ("layers.0.attn.wq", "layers.0.attn.bq", "layers.0.attn.wk", "layers.0.attn.bk"):
        scrambled.arrays[name] = rng.normal(size=scrambled.arrays[name].shape) * 50.0

    a = denoiser.sparse_attention_layer(token, 0, tiny_params.bind(), tiny_params.config).data
    b = denoiser.sparse_attention_layer(token, 0, scrambled.bind(), scrambled.config).data

    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_sinusoidal_encoding_matches_dense_table():
    table = denoiser.sinusoidal_encoding(np.arange(100), 16)

    rows = denoiser.sinusoidal_encoding([0, 50, 99], 16)

    assert np.allclose(rows, table[[0, 50, 99]], rtol=0, atol=1e-12)


def test_plain_projection_denoiser(rng):
    config = make_tiny_model(mlp_kind="plain")
    params = denoiser.init_params(config, 4, np.random.default_rng(0))
    mask = KeyframeMask.from_indices([0, 4, 9], 10)

    out = denoiser.denoise(rng.normal(size=(10, 4)), 2, 1, mask, params).data

    assert out.shape == (10, 4)
    assert np.all(np.isfinite(out))
    assert params.arrays["input.0.weight"].shape == (8, 4)
    assert params.arrays["output.0.weight"].shape == (4, 8)
    assert not any(name.endswith(".c") for name in params.arrays)
    assert params.mlp("input").kind == "plain"


def test_full_mask_equals_dense_path(tiny_params, rng):
    x_t = rng.normal(size=(9, 4))

    full = denoiser.denoise(x_t, 3, 1, KeyframeMask.full(9), tiny_params).data
    dense = denoiser.denoise(x_t, 3, 1, None, tiny_params).data

    assert np.array_equal(full, dense)


def test_interpolation_is_exact_on_keyframes_and_linear_between(rng):
    mask = KeyframeMask.from_indices([0, 2, 7, 9], 10)
    slope = rng.normal(size=3)
    offset = rng.normal(size=3)
    features = np.outer(mask.indices, slope) + offset

    out = denoiser.interpolate_features(features, mask).data

    expected = np.outer(np.arange(10), slope) + offset
    assert np.array_equal(out[mask.indices], features)
    assert np.allclose(out, expected, atol=1e-12)


def test_interpolation_plan_weights_sum_to_one():
    mask = KeyframeMask.from_indices([0, 4, 5, 12], 13)

    left, right, w_left, w_right = denoiser.interpolation_plan(mask)

    assert np.allclose(w_left + w_right, 1.0)
    assert left[6] == 2 and right[6] == 3
    assert w_left[6, 0] == pytest.approx(6 / 7)


def test_interpolation_rejects_wrong_row_count():
    with pytest.raises(tt.ShapeError):
        denoiser.interpolate_features(np.zeros((3, 2)), KeyframeMask.from_indices([0, 5], 6))


def test_embed_tokens_has_condition_token_first(tiny_params, rng):
    mask = KeyframeMask.from_indices([0, 4, 8], 9)

    tokens = denoiser.embed_tokens(rng.normal(size=(9, 4)), mask, 2, 0, tiny_params)

    assert tokens.shape == (4, 8)


def test_end_to_end_gradient_matches_finite_differences():
    config = make_tiny_model(fsq_levels=[])
    params = denoiser.init_params(config, 3, np.random.default_rng(11))
    names = list(params.arrays)
    x_t = np.random.default_rng(12).normal(size=(10, 3))
    target = np.random.default_rng(13).normal(size=(10, 3))
    mask = KeyframeMask.from_indices([0, 3, 4, 9], 10)

    def loss(*values):
        out = denoiser.denoise(x_t, 4, 1, mask, params, p=dict(zip(names, values)))
        return tt.mean(tt.square(tt.sub(out, target)))

    points = list(params.arrays.values())
    all_coordinates = [(i, j) for i, p in enumerate(points) for j in range(p.size)]
    picks = np.random.default_rng(14).choice(len(all_coordinates), size=60, replace=False)

    report = tt.grad_check(
        loss, points, tol=1e-3, coordinates=[all_coordinates[k] for k in picks], floor=1e-6
    )

    assert report.passed, f"max rel error {report.max_rel_error:.3e} at {report.worst}"


@pytest.mark.parametrize("levels", [[5], [4], [8], [3, 8, 2]])
def test_fsq_values_lie_on_level_grid(levels, rng):
    keys = rng.normal(size=(2000, len(levels))) * 3.0

    codes = denoiser.fsq_quantize(keys, levels).data

    for axis, level in enumerate(levels):
        half = level // 2
        grid = np.arange(level) - half if level % 2 == 0 else np.arange(-half, half + 1)
        assert set(np.unique(codes[:, axis] * half)) == set(grid.astype(float))


def test_fsq_gradient_is_straight_through(rng):
    keys = rng.normal(size=(3, 2))
    levels = [5, 8]

    with tt.Tape() as tape:
        k = tape.leaf(keys)
        out = tt.sum_(denoiser.fsq_quantize(k, levels))
    (grad,) = tape.gradient(out, [k])

    half_l = np.array([2.0, 3.5 * (1 + 1e-3)])
    shift = np.array([0.0, np.arctanh(0.5 / half_l[1])])
    expected = half_l * (1.0 - np.tanh(keys + shift) ** 2) / np.array([2.0, 4.0])
    assert np.allclose(grad, expected)


def test_fsq_rejects_dim_mismatch():
    with pytest.raises(tt.ShapeError):
        denoiser.fsq_quantize(np.zeros((2, 3)), [5, 5])


def test_cfg_scale_one_is_conditional(tiny_params, rng):
    x_t = rng.normal(size=(8, 4))
    mask = KeyframeMask.from_indices([0, 3, 7], 8)

    out = denoiser.denoise_cfg(x_t, 2, 4, mask, tiny_params, guidance_scale=1.0)

    assert np.array_equal(out, denoiser.denoise(x_t, 2, 4, mask, tiny_params).data)


def test_cfg_scale_zero_is_unconditional(tiny_params, rng):
    x_t = rng.normal(size=(8, 4))
    mask = KeyframeMask.from_indices([0, 3, 7], 8)

    out = denoiser.denoise_cfg(x_t, 2, 4, mask, tiny_params, guidance_scale=0.0)

    assert np.array_equal(out, denoiser.denoise(x_t, 2, None, mask, tiny_params).data)


def test_cfg_combines_conditional_and_unconditional(tiny_params, rng):
    x_t = rng.normal(size=(8, 4))
    cond = denoiser.denoise(x_t, 2, 4, None, tiny_params).data
    uncond = denoiser.denoise(x_t, 2, None, None, tiny_params).data

    out = denoiser.denoise_cfg(x_t, 2, 4, None, tiny_params, guidance_scale=2.5)

    assert np.allclose(out, uncond + 2.5 * (cond - uncond))


def test_class_out_of_range(tiny_params):
    with pytest.raises(DenoiserError):
        denoiser.denoise(np.zeros((4, 4)), 1, 6, None, tiny_params)


@pytest.mark.parametrize("shape", [(4, 3), (4,)])
def test_input_shape_mismatch(shape, tiny_params):
    with pytest.raises(tt.ShapeError):
        denoiser.denoise(np.zeros(shape), 1, 0, None, tiny_params)


def test_mask_length_mismatch(tiny_params):
    with pytest.raises(tt.ShapeError):
        denoiser.denoise(np.zeros((6, 4)), 1, 0, KeyframeMask.full(5), tiny_params)


def test_dropout_only_in_training_mode(rng):
    config = make_tiny_model(dropout=0.5)
    params = denoiser.init_params(config, 4, np.random.default_rng(0))
    x_t = rng.normal(size=(6, 4))

    eval_a = denoiser.denoise(x_t, 1, 0, None, params).data
    eval_b = denoiser.denoise(x_t, 1, 0, None, params).data
    train = denoiser.denoise(x_t, 1, 0, None, params, rng=np.random.default_rng(1)).data

    assert np.array_equal(eval_a, eval_b)
    assert not np.array_equal(eval_a, train)


def test_params_copy_is_independent(tiny_params):
    clone = tiny_params.copy()
    clone.arrays["final_ln.bias"][0] = 9.0

    assert tiny_params.arrays["final_ln.bias"][0] == 0.0
    assert isinstance(tiny_params.config, DenoiserConfig)
