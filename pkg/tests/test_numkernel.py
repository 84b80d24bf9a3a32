import importlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MAX_REL_ERR, gradcheck, projected
from gtaseg.errors import ContractError, DimensionError, UsageError
from gtaseg.numkernel import (
    IGNORE,
    GradTape,
    SgdState,
    Tensor,
    _fallback,
    add,
    channels_first,
    conv2d,
    poly_lr,
    relu,
    scale,
    sgd_step,
    softmax_channel,
    tensor_sum,
    weighted_pixel_ce,
)
from gtaseg.segmodel import Param, ParamStore, Role

N_INSTANCES = 20


def _away_from_zero(rng, shape, margin=0.05):
    return (rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)).astype(np.float32)


# ---------------------------------------------------------------- finite differences


@pytest.mark.parametrize("layout", ["BCHW", "BHWC"])
def test_conv2d_gradcheck(layout, rng):
    for _ in range(N_INSTANCES):
        B, cin, cout, H, W = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), rng.integers(3, 6), rng.integers(3, 6)
        k = int(rng.choice([1, 3]))
        xshape = (B, cin, H, W) if layout == "BCHW" else (B, H, W, cin)
        inputs = {"x": rng.normal(size=xshape), "w": rng.normal(size=(cout, cin, k, k)) * 0.5,
                  "b": rng.normal(size=cout)}
        oshape = (B, cout, H, W) if layout == "BCHW" else (B, H, W, cout)
        coef = rng.normal(size=oshape)
        err = gradcheck(projected(lambda t: conv2d(t["x"], t["w"], t["b"], layout=layout), coef), inputs, rng)
        assert err < MAX_REL_ERR


def test_relu_gradcheck(rng):
    for _ in range(N_INSTANCES):
        shape = tuple(rng.integers(1, 5, size=3))
        coef = rng.normal(size=shape)
        err = gradcheck(projected(lambda t: relu(t["x"]), coef), {"x": _away_from_zero(rng, shape)}, rng)
        assert err < MAX_REL_ERR


def test_softmax_channel_gradcheck(rng):
    for _ in range(N_INSTANCES):
        shape = (rng.integers(1, 3), rng.integers(2, 5), rng.integers(1, 4), rng.integers(1, 4))
        coef = rng.normal(size=shape)
        err = gradcheck(projected(lambda t: softmax_channel(t["z"]), coef), {"z": rng.normal(size=shape)}, rng)
        assert err < MAX_REL_ERR


def test_channels_first_add_scale_sum_gradcheck(rng):
    for _ in range(N_INSTANCES):
        shape = (rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4))
        c = float(rng.normal())
        coef = rng.normal(size=(shape[0], shape[3], shape[1], shape[2]))
        inputs = {"a": rng.normal(size=shape), "b": rng.normal(size=shape)}
        fn = projected(lambda t: channels_first(add(t["a"], scale(t["b"], c))), coef)
        assert gradcheck(fn, inputs, rng) < MAX_REL_ERR
        assert gradcheck(lambda t: tensor_sum(t["a"]), {"a": inputs["a"]}, rng) < MAX_REL_ERR


def _pl_case(rng):
    B, K, H, W = rng.integers(1, 3), rng.integers(2, 5), rng.integers(2, 5), rng.integers(2, 5)
    logits = rng.normal(size=(B, K, H, W)) * 2
    labels = rng.integers(0, K, size=(B, H, W))
    return logits, labels


def test_supervised_loss_gradcheck(rng):
    from gtaseg.pseudolabel import supervised_loss

    for _ in range(N_INSTANCES):
        logits, labels = _pl_case(rng)
        assert gradcheck(lambda t: supervised_loss(t["z"], labels), {"z": logits}, rng) < MAX_REL_ERR


def test_unsupervised_loss_gradcheck(rng):
    from gtaseg.pseudolabel import ReweightConfig, make_pseudo_labels, unsupervised_loss

    for _ in range(N_INSTANCES):
        logits, _ = _pl_case(rng)
        teacher = logits + rng.normal(size=logits.shape)
        plmap = make_pseudo_labels(teacher, ReweightConfig(tau=float(rng.uniform(0, 2))))
        assert gradcheck(lambda t: unsupervised_loss(t["z"], plmap), {"z": logits}, rng) < MAX_REL_ERR


def test_composite_network_gradcheck(rng):
    """conv -> relu -> conv -> loss through the whole tape."""
    from gtaseg.pseudolabel import supervised_loss

    x = rng.random((2, 3, 5, 5))
    labels = rng.integers(0, 3, size=(2, 5, 5))
    inputs = {"w1": rng.normal(size=(4, 3, 3, 3)) * 0.5, "b1": rng.normal(size=4) * 0.1,
              "w2": rng.normal(size=(3, 4, 1, 1)) * 0.5, "b2": np.zeros(3)}

    def fn(t):
        h = relu(conv2d(x, t["w1"], t["b1"]))
        return supervised_loss(conv2d(h, t["w2"], t["b2"]), labels)

    assert gradcheck(fn, inputs, rng) < MAX_REL_ERR


# ---------------------------------------------------------------- forward values


def test_conv2d_matches_direct_sum(rng):
    x = rng.normal(size=(2, 3, 6, 5)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    out = conv2d(x, w, b).data
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 5))
    for i in range(6):
        for j in range(5):
            ref[:, :, i, j] = np.einsum("bchw,ochw->bo", xp[:, :, i:i + 3, j:j + 3], w) + b
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_conv2d_layouts_agree(rng):
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    w = rng.normal(size=(5, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=5).astype(np.float32)
    a = conv2d(x, w, b).data
    h = conv2d(x.transpose(0, 2, 3, 1), w, b, layout="BHWC").data
    np.testing.assert_array_equal(a, h.transpose(0, 3, 1, 2))


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(np.zeros((1, 2, 4, 4)), np.zeros((3, 3, 3, 3)), np.zeros(3))
    with pytest.raises(DimensionError):
        conv2d(np.zeros((1, 3, 4, 4)), np.zeros((3, 3, 2, 2)), np.zeros(3))


def test_softmax_uniform_and_stability():
    p = softmax_channel(np.zeros((1, 4, 2, 2))).data
    np.testing.assert_allclose(p, 0.25)
    big = np.array([1000.0, 0.0, -1000.0], dtype=np.float32).reshape(1, 3, 1, 1)
    p = softmax_channel(big).data
    assert np.all(np.isfinite(p)) and p[0, 0, 0, 0] == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_softmax_sums_to_one(K, seed):
    z = np.random.default_rng(seed).normal(size=(2, K, 3, 3)) * 10
    p = softmax_channel(z).data.astype(np.float64)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(p >= 0)


def test_ce_known_value():
    # uniform logits over K classes: CE = log K per pixel
    logits = np.zeros((1, 4, 2, 2), dtype=np.float32)
    labels = np.array([[[0, 1], [2, 3]]])
    v = weighted_pixel_ce(logits, labels, np.ones((1, 2, 2))).item()
    assert v == pytest.approx(math.log(4), rel=1e-6)


def test_ce_ignore_and_normaliser():
    logits = np.zeros((1, 2, 1, 4), dtype=np.float32)
    labels = np.array([[[0, IGNORE, IGNORE, 1]]])
    w = np.array([[[2.0, 0.0, 0.0, 0.0]]])
    # sum of w*CE = 2 log 2 over n_kept = 2
    assert weighted_pixel_ce(logits, labels, w).item() == pytest.approx(math.log(2), rel=1e-6)
    none = weighted_pixel_ce(logits, np.full((1, 1, 4), IGNORE), np.zeros((1, 1, 4)))
    assert none.item() == 0.0


def test_ce_clamps_extreme_logits():
    logits = np.array([0.0, 200.0], dtype=np.float32).reshape(1, 2, 1, 1)
    tape = GradTape()
    z = tape.watch("z", logits)
    loss = weighted_pixel_ce(z, np.zeros((1, 1, 1), dtype=np.int64), np.ones((1, 1, 1)))
    assert loss.item() == pytest.approx(-math.log(1e-12), rel=1e-6)
    assert np.all(tape.backward(loss)["z"] == 0)


def test_ce_contracts():
    z = np.zeros((1, 3, 2, 2), dtype=np.float32)
    with pytest.raises(ContractError):
        weighted_pixel_ce(z, np.full((1, 2, 2), IGNORE), np.ones((1, 2, 2)))
    with pytest.raises(ContractError):
        weighted_pixel_ce(z, np.full((1, 2, 2), 3), np.ones((1, 2, 2)))
    with pytest.raises(DimensionError):
        weighted_pixel_ce(z, np.zeros((1, 2, 3), dtype=np.int64), np.ones((1, 2, 3)))


# ---------------------------------------------------------------- tape semantics


def test_backward_consumes_tape():
    tape = GradTape()
    x = tape.watch("x", np.ones(3))
    loss = tensor_sum(x)
    tape.backward(loss)
    with pytest.raises(UsageError):
        tape.backward(loss)
    with pytest.raises(UsageError):
        tensor_sum(x)


def test_backward_requires_scalar_and_own_tape():
    tape = GradTape()
    x = tape.watch("x", np.ones(3))
    with pytest.raises(UsageError):
        tape.backward(scale(x, 2.0))
    other = GradTape()
    y = other.watch("y", np.ones(3))
    with pytest.raises(UsageError):
        tape.backward(tensor_sum(y))
    with pytest.raises(UsageError):
        add(x, y)


def test_unused_parameter_gets_zero_grad():
    tape = GradTape()
    x = tape.watch("x", np.ones(3))
    tape.watch("unused", np.ones((2, 2)))
    grads = tape.backward(tensor_sum(x))
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))
    np.testing.assert_array_equal(grads["x"], np.ones(3))


def test_shared_input_accumulates():
    tape = GradTape()
    x = tape.watch("x", np.array([1.0, 2.0]))
    g = tape.backward(tensor_sum(add(x, x)))["x"]
    np.testing.assert_array_equal(g, [2.0, 2.0])


def test_duplicate_watch_rejected():
    tape = GradTape()
    tape.watch("x", np.ones(1))
    with pytest.raises(UsageError):
        tape.watch("x", np.ones(1))


def test_untaped_ops_return_plain_values():
    t = relu(Tensor(np.array([-1.0, 2.0])))
    assert not t.requires_grad
    np.testing.assert_array_equal(t.data, [0.0, 2.0])
    assert t.data.dtype == np.float32 and t.data.flags.c_contiguous


# ---------------------------------------------------------------- optimiser


def test_poly_lr_endpoints_and_midpoint():
    s = SgdState(0.01, 1e-4, 100, 0.9)
    assert poly_lr(0, s) == 0.01
    assert poly_lr(100, s) == 0.0
    assert poly_lr(50, s) == pytest.approx(0.01 * 0.5 ** 0.9)
    with pytest.raises(ValueError):
        poly_lr(101, s)


def test_poly_lr_monotone():
    s = SgdState(0.5, 0.0, 37)
    lrs = [poly_lr(t, s) for t in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_sgd_step_example():
    store = ParamStore([Param("w", Role.EXTRACTOR, 0, np.array([1.0, -2.0], dtype=np.float32))])
    s = SgdState(0.1, 0.01, 10, 0.9)
    sgd_step(store, {"w": np.array([0.5, 0.5], dtype=np.float32)}, s, 0)
    # w - 0.1 * (g + 0.01 w)
    np.testing.assert_allclose(store["w"].data, [1.0 - 0.1 * 0.51, -2.0 - 0.1 * (0.5 - 0.02)], rtol=1e-6)


def test_sgd_step_zero_lr_at_end_and_contracts():
    store = ParamStore([Param("w", Role.EXTRACTOR, 0, np.ones(2, dtype=np.float32))])
    s = SgdState(0.1, 0.0, 2)
    with pytest.raises(ValueError):
        sgd_step(store, {"w": np.ones(2, dtype=np.float32)}, s, 2)
    with pytest.raises(ContractError):
        sgd_step(store, {}, s, 0)
    with pytest.raises(ContractError):
        sgd_step(store, {"w": np.ones(3, dtype=np.float32)}, s, 0)


# ---------------------------------------------------------------- backend parity


@pytest.fixture(scope="module")
def compiled():
    try:
        return importlib.import_module("gtaseg.numkernel._ckernels")
    except ImportError:
        pytest.skip("compiled extension not built")


def test_backend_parity_im2col_col2im(compiled, rng):
    for _ in range(10):
        B, H, W, C = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 6)
        k = int(rng.choice([1, 3, 5]))
        x = rng.normal(size=(B, H, W, C)).astype(np.float32)
        np.testing.assert_array_equal(compiled.im2col(x, k), _fallback.im2col(x, k))
        cols = rng.normal(size=(B * H * W, k * k * C)).astype(np.float32)
        np.testing.assert_allclose(compiled.col2im(cols, B, H, W, C, k), _fallback.col2im(cols, B, H, W, C, k),
                                   rtol=1e-5, atol=1e-5)


def test_backend_parity_softmax_ce(compiled, rng):
    for _ in range(10):
        B, K, H, W = rng.integers(1, 3), rng.integers(2, 6), rng.integers(1, 6), rng.integers(1, 6)
        logits = (rng.normal(size=(B, K, H, W)) * 5).astype(np.float32)
        labels = rng.integers(-1, K, size=(B, H, W)).astype(np.int64)
        weights = np.where(labels >= 0, rng.random(labels.shape), 0.0)
        t1, g1 = compiled.softmax_ce(logits, labels, weights)
        t2, g2 = _fallback.softmax_ce(logits, labels, weights)
        assert t1 == pytest.approx(t2, rel=1e-9)
        np.testing.assert_allclose(g1, g2, rtol=1e-5, atol=1e-6)


def test_backend_env_override(monkeypatch):
    import gtaseg.numkernel._backend as backend

    monkeypatch.setenv("GTASEG_PURE", "1")
    try:
        assert importlib.reload(backend).BACKEND == "numpy"
    finally:
        monkeypatch.delenv("GTASEG_PURE")
        importlib.reload(backend)
