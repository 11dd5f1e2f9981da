import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attreval.nn import (BadMagicError, BatchNorm2d, CellSplit, Conv2d, Flatten, Linear,
                         MaxPool2d, Model, ReLU, ShapeError, TrainingDivergedError, TruncatedFileError,
                         VersionMismatchError, build_preset, compose, merge_batchnorm,
                         model_from_bytes, model_hash, model_to_bytes, split, train_sgd)
from attreval.nn.gradcheck import check_layer, check_model
from attreval.nn.layers import col2im, im2col
from conftest import layer_cases


@pytest.mark.parametrize("name,layer,x", layer_cases(), ids=[c[0] for c in layer_cases()])
def test_layer_backward_matches_finite_differences(name, layer, x):
    for res in check_layer(layer, x):
        assert res.ok(1e-3), res


def test_batchnorm_training_path_matches_finite_differences(rng):
    bn = BatchNorm2d(rng.uniform(0.5, 2, 3), rng.standard_normal(3), np.zeros(3), np.ones(3))
    for res in check_layer(bn, rng.standard_normal((4, 3, 3, 3)), train=True):
        assert res.ok(1e-3), res


def test_whole_model_gradient(random_model, rng):
    x = rng.uniform(0, 1, (1, 3, 32, 32))
    assert check_model(random_model, x, target=3).ok(1e-3)


def test_im2col_col2im_adjoint(rng):
    # <im2col(x), c> == <x, col2im(c)>
    x = rng.standard_normal((2, 3, 5, 5))
    cols, ho, wo = im2col(x, 3, 3, 2, 1)
    c = rng.standard_normal(cols.shape)
    back = col2im(c, x.shape, 3, 3, 2, 1, ho, wo)
    assert np.isclose(np.sum(cols * c), np.sum(x * back))


def test_conv_matches_direct_loop(rng):
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    x = rng.standard_normal((1, 3, 5, 5))
    conv = Conv2d(w, b, 1, 1).astype(np.float64)
    y, _ = conv.forward(x)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 2, 5, 5))
    for o in range(2):
        for i in range(5):
            for j in range(5):
                ref[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    assert np.allclose(y, ref)


def _three_layer(rng):
    return Model([Conv2d(rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2), 1, 1), ReLU(),
                  MaxPool2d(2), Flatten(), Linear(rng.standard_normal((4, 8)),
                                                  rng.standard_normal(4))])


def test_three_layer_model_matches_index_loops(rng):
    model = _three_layer(rng).astype(np.float64)
    conv, lin = model.layers[0], model.layers[4]
    x = rng.standard_normal((3, 4, 4))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    act = [[[0.0] * 4 for _ in range(4)] for _ in range(2)]
    for o in range(2):
        for i in range(4):
            for j in range(4):
                s = conv.bias[o]
                for c in range(3):
                    for di in range(3):
                        for dj in range(3):
                            s += xp[c, i + di, j + dj] * conv.weight[o, c, di, dj]
                act[o][i][j] = max(s, 0.0)
    pooled = [max(act[o][2 * i + a][2 * j + b] for a in range(2) for b in range(2))
              for o in range(2) for i in range(2) for j in range(2)]
    ref = [lin.bias[k] + sum(lin.weight[k, f] * pooled[f] for f in range(8)) for k in range(4)]
    assert np.allclose(model(x[None])[0], ref, rtol=1e-12)


def test_three_layer_gradient_coarse_step(rng):
    model = _three_layer(rng)
    x = rng.uniform(0, 1, (1, 3, 4, 4))
    assert check_model(model, x, target=2, h=1e-3).ok(1e-3)


def test_maxpool_ties_route_to_first_index():
    x = np.ones((1, 1, 2, 2), np.float32)
    pool = MaxPool2d(2)
    y, ctx = pool.forward(x)
    g = pool.backward(ctx, np.ones_like(y))
    assert g[0, 0].tolist() == [[1, 0], [0, 0]]


def test_shape_errors():
    conv = Conv2d(np.zeros((2, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv.output_shape((4, 8, 8))
    with pytest.raises(ShapeError):
        conv.output_shape((3, 2, 2))
    with pytest.raises(ShapeError):
        CellSplit(2).output_shape((3, 5, 4))
    with pytest.raises(ShapeError):
        Model([conv]).forward(np.zeros((1, 4, 8, 8), np.float32))


def test_tap_resolution(random_model):
    assert random_model.tap_index("input") == 0
    assert random_model.tap_index("final") == random_model.head_start
    assert random_model.tap_index("mid") == random_model.taps["mid"]
    assert random_model.tap_index(3) == 3
    assert random_model.tap_index("3") == 3
    with pytest.raises(KeyError):
        random_model.tap_index("nope")
    with pytest.raises(KeyError):
        random_model.tap_index(random_model.head_start + 1)


def test_tinyvgg_layout(random_model):
    kinds = [type(layer).__name__ for layer in random_model.layers]
    assert kinds.count("Conv2d") == 8
    assert kinds[-2:] == ["GlobalAvgPool", "Linear"]
    shapes = random_model.check_shapes((3, 64, 64))
    assert shapes[random_model.head_start] == (64, 8, 8)
    assert random_model.num_classes == 10


@pytest.mark.parametrize("tap", ["input", "mid", "final", 5])
def test_split_compose_is_identity(random_model, rng, tap):
    x = rng.uniform(0, 1, (2, 3, 32, 32)).astype(np.float32)
    pre, expl = split(random_model, tap)
    assert np.array_equal(expl(pre(x)), random_model(x))
    assert np.array_equal(compose(pre, expl)(x), random_model(x))


def test_merge_batchnorm_preserves_logits(rng):
    model = build_preset("tinyvgg-bn", seed=1)
    for layer in model.layers:
        if isinstance(layer, BatchNorm2d):
            c = layer.gamma.shape[0]
            layer.gamma[:] = rng.uniform(0.5, 1.5, c)
            layer.beta[:] = rng.normal(0, 0.1, c)
            layer.running_mean[:] = rng.normal(0, 0.1, c)
            layer.running_var[:] = rng.uniform(0.5, 2, c)
    merged = merge_batchnorm(model)
    assert not any(isinstance(layer, BatchNorm2d) for layer in merged.layers)
    x = rng.uniform(0, 1, (3, 3, 32, 32)).astype(np.float32)
    assert np.allclose(merged(x), model(x), atol=1e-4, rtol=1e-4)
    # taps follow the merge: the mid activation is the same tensor
    t_old, t_new = model.taps["mid"], merged.taps["mid"]
    a_old = model.forward(x).activations[t_old]
    a_new = merged.forward(x).activations[t_new]
    assert np.allclose(a_old, a_new, atol=1e-4)


def test_batch_independence(random_model, rng):
    x = rng.uniform(0, 1, (5, 3, 32, 32)).astype(np.float32)
    full = random_model(x)
    for i in range(5):
        assert np.array_equal(random_model(x[i:i + 1])[0], full[i])


# ---------------------------------------------------------------- serialization


def test_serialization_roundtrip(random_model, rng):
    buf = model_to_bytes(random_model)
    back = model_from_bytes(buf)
    x = rng.uniform(0, 1, (2, 3, 32, 32)).astype(np.float32)
    assert np.array_equal(back(x), random_model(x))
    assert back.taps == random_model.taps
    assert model_hash(back) == model_hash(random_model)
    assert model_to_bytes(back) == buf


def test_serialization_errors(random_model):
    buf = model_to_bytes(random_model)
    with pytest.raises(BadMagicError):
        model_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(VersionMismatchError):
        model_from_bytes(buf[:4] + (99).to_bytes(4, "little") + buf[8:])
    with pytest.raises(TruncatedFileError):
        model_from_bytes(buf[:-10])
    with pytest.raises(TruncatedFileError):
        model_from_bytes(buf[:6])


# ---------------------------------------------------------------- training


def test_training_learns_and_is_seeded(small_pool):
    from attreval.data import stack

    x, y = stack(small_pool)
    init = build_preset("tinyvgg-bn", seed=0)
    losses = []
    m1, acc1 = train_sgd(init, x, y, epochs=6, lr=0.05, batch_size=8, seed=4,
                         callback=lambda e, loss: losses.append(loss))
    m2, acc2 = train_sgd(init, x, y, epochs=6, lr=0.05, batch_size=8, seed=4)
    assert losses[-1] < losses[0]
    assert acc1 == acc2
    assert np.array_equal(m1(x[:4]), m2(x[:4]))
    # the initial model is untouched
    assert np.array_equal(init.layers[0].weight, build_preset("tinyvgg-bn", seed=0).layers[0].weight)


def test_zero_learning_rate_leaves_weights(small_pool):
    from attreval.data import stack

    x, y = stack(small_pool[:8])
    init = build_preset("tinyvgg-plain", seed=1)
    model, _ = train_sgd(init, x, y, epochs=1, lr=0.0, batch_size=4)
    assert model_hash(model) == model_hash(init)


def test_single_step_matches_hand_calculation():
    # logits (2a, 2b) for x = 2, label 0; first step has no momentum history
    a, b, lr = 0.3, -0.1, 0.5
    model = Model([Flatten(), Linear(np.array([[a], [b]]))])
    x = np.full((1, 1, 1, 1), 2.0, np.float32)
    trained, _ = train_sgd(model, x, np.array([0]), epochs=1, lr=lr, batch_size=1, flip=False)
    p0 = np.exp(2 * a) / (np.exp(2 * a) + np.exp(2 * b))
    expected = [a - lr * 2 * (p0 - 1), b - lr * 2 * (1 - p0)]
    assert np.allclose(trained.layers[1].weight[:, 0], expected, rtol=1e-6)


def test_mlp_separates_two_classes():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((200, 2, 1, 1)).astype(np.float32)
    y = (x[:, 0, 0, 0] + 0.5 * x[:, 1, 0, 0] > 0).astype(np.int64)
    x[:, 0] += np.where(y == 1, 0.3, -0.3)[:, None, None]
    r = np.random.default_rng(1)
    mlp = Model([Flatten(), Linear(r.standard_normal((8, 2)) * 0.5, np.zeros(8)), ReLU(),
                 Linear(r.standard_normal((2, 8)) * 0.5, np.zeros(2))])
    _, acc = train_sgd(mlp, x, y, epochs=20, lr=0.05, batch_size=16, seed=0, flip=False)
    assert acc >= 0.99


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_divergence_is_reported(small_pool):
    from attreval.data import stack

    x, y = stack(small_pool)
    with pytest.raises(TrainingDivergedError):
        train_sgd(build_preset("tinyvgg-plain"), x, y, epochs=3, lr=1e6, batch_size=8)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(2, 4), st.integers(0, 2 ** 31))
def test_cellsplit_inverts(n, c, h, seed):
    x = np.random.default_rng(seed).standard_normal((2, c, n * h, n * h))
    split_layer = CellSplit(n)
    y, ctx = split_layer.forward(x)
    assert y.shape == (2 * n * n, c, h, h)
    # cell (r, q) of sample b is row-major
    assert np.array_equal(y[n * n + n - 1], x[1, :, :h, (n - 1) * h:])
    assert np.array_equal(split_layer.backward(ctx, y), x)


def test_model_bytes_are_stable_through_file(tmp_path, random_model):
    from attreval.nn import load_model, save_model

    path = tmp_path / "m.atev"
    save_model(random_model, path)
    assert model_to_bytes(load_model(path)) == model_to_bytes(random_model)


# ---------------------------------------------------------------- trained models


def test_trained_plain_model_is_accurate(trained):
    _, metrics = trained.get("tinyvgg-plain")
    assert metrics["test_accuracy"] >= 0.95


def test_trained_model_roundtrip_and_split(plain_model, plain_pool):
    x = np.stack([im.pixels for im in plain_pool[:4]])
    back = model_from_bytes(model_to_bytes(plain_model))
    assert np.array_equal(back(x), plain_model(x))
    pre, expl = split(plain_model, "mid")
    assert np.array_equal(expl(pre(x)), plain_model(x))
