"""Autodiff engine: every primitive and layer against central differences.

All numeric checks run in float64 with eps = 1e-4, where the truncation
error of a central difference (~eps^2) sits far below the 1e-3 gate.
Non-smooth ops (relu, abs, max) get inputs nudged away from their kinks.
"""

import numpy as np
import pytest

from roomshift.errors import DataError, NumericError
from roomshift.tensor_nn import (
    Adam,
    Conv2d,
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    Tensor,
    TransformerLayer,
    add,
    apply_params,
    backward,
    clip_global_norm,
    concat,
    constant,
    conv2d,
    cross_entropy,
    dropout,
    gelu,
    global_avg_pool,
    load_checkpoint,
    log_softmax,
    matmul,
    max_over_axis,
    model_manifest_path,
    mul,
    no_grad,
    parameter,
    pow_scalar,
    relu,
    reshape,
    save_checkpoint,
    scale,
    sinusoidal_positions,
    slice_axis,
    softmax,
    tabs,
    transpose,
    tsum,
    zero_grads,
)

EPS = 1e-4
REL_TOL = 1e-3


def assert_grads_match(build, tensors, tol=REL_TOL):
    """Compare backward() grads on `tensors` against central differences.

    build() must rebuild the scalar loss graph from the live Tensor objects,
    so in-place nudges of .data are seen by every call.
    """
    zero_grads(tensors.values())
    backward(build(), params=tensors.values())
    for name, t in tensors.items():
        num = np.zeros_like(t.data)
        flat, nf = t.data.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + EPS
            hi = float(build().data)
            flat[i] = keep - EPS
            lo = float(build().data)
            flat[i] = keep
            nf[i] = (hi - lo) / (2.0 * EPS)
        err = np.max(np.abs(t.grad - num)) / (np.max(np.abs(num)) + 1e-8)
        assert err < tol, f"{name}: rel grad error {err:.2e}"


def away_from_zero(x, margin=0.1):
    return x + margin * np.sign(x) + (x == 0) * margin


def weighted_sum(out, rng):
    return tsum(mul(out, constant(rng.standard_normal(out.shape))))


def p64(rng, *shape):
    return parameter(rng.standard_normal(shape))


# --- primitive gradients --------------------------------------------------------

OP_CASES = {
    "add_broadcast": lambda rng: (
        {"a": p64(rng, 3, 4), "b": p64(rng, 4)},
        lambda t: add(t["a"], t["b"]),
    ),
    "mul_broadcast": lambda rng: (
        {"a": p64(rng, 3, 4), "b": p64(rng, 3, 1)},
        lambda t: mul(t["a"], t["b"]),
    ),
    "scale": lambda rng: ({"a": p64(rng, 5)}, lambda t: scale(t["a"], -2.5)),
    "matmul_batched": lambda rng: (
        {"a": p64(rng, 2, 3, 4), "b": p64(rng, 2, 4, 5)},
        lambda t: matmul(t["a"], t["b"]),
    ),
    "matmul_broadcast_rhs": lambda rng: (
        {"a": p64(rng, 2, 3, 4), "b": p64(rng, 4, 5)},
        lambda t: matmul(t["a"], t["b"]),
    ),
    "relu": lambda rng: (
        {"a": parameter(away_from_zero(rng.standard_normal((4, 5))))},
        lambda t: relu(t["a"]),
    ),
    "gelu": lambda rng: ({"a": p64(rng, 4, 5)}, lambda t: gelu(t["a"])),
    "softmax": lambda rng: ({"a": p64(rng, 3, 6)}, lambda t: softmax(t["a"])),
    "log_softmax": lambda rng: ({"a": p64(rng, 3, 6)}, lambda t: log_softmax(t["a"])),
    "tsum_axis": lambda rng: ({"a": p64(rng, 3, 4, 2)}, lambda t: tsum(t["a"], axis=1)),
    "tsum_keepdims": lambda rng: ({"a": p64(rng, 3, 4)}, lambda t: tsum(t["a"], axis=0, keepdims=True)),
    "tmean_tuple_axis": lambda rng: ({"a": p64(rng, 2, 3, 4)}, lambda t: tsum(t["a"], axis=(1, 2))),
    "tabs": lambda rng: (
        {"a": parameter(away_from_zero(rng.standard_normal((4, 5))))},
        lambda t: tabs(t["a"]),
    ),
    "pow_scalar": lambda rng: (
        {"a": parameter(rng.uniform(0.5, 2.0, size=(4, 5)))},
        lambda t: pow_scalar(t["a"], 1.7),
    ),
    "max_over_axis": lambda rng: (
        # spread the entries so the argmax is eps-stable
        {"a": parameter(rng.permuted(np.arange(20.0)).reshape(4, 5) + 0.01 * rng.standard_normal((4, 5)))},
        lambda t: max_over_axis(t["a"], axis=0),
    ),
    "concat": lambda rng: (
        {"a": p64(rng, 2, 3), "b": p64(rng, 2, 1), "c": p64(rng, 2, 4)},
        lambda t: concat([t["a"], t["b"], t["c"]], axis=1),
    ),
    "slice_axis": lambda rng: ({"a": p64(rng, 3, 8)}, lambda t: slice_axis(t["a"], 1, 2, 6)),
    "reshape": lambda rng: ({"a": p64(rng, 3, 8)}, lambda t: reshape(t["a"], (6, 4))),
    "transpose": lambda rng: ({"a": p64(rng, 2, 3, 4)}, lambda t: transpose(t["a"], (2, 0, 1))),
    "conv2d": lambda rng: (
        {"x": p64(rng, 2, 3, 5, 6), "w": p64(rng, 4, 3, 3, 3), "b": p64(rng, 4)},
        lambda t: conv2d(t["x"], t["w"], t["b"], stride=2, padding=1),
    ),
    "global_avg_pool": lambda rng: ({"x": p64(rng, 2, 3, 4, 5)}, lambda t: global_avg_pool(t["x"])),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    tensors, op = OP_CASES[name](rng)
    assert_grads_match(lambda: weighted_sum(op(tensors), np.random.default_rng(99)), tensors)


# --- layer gradients --------------------------------------------------------------


def layer_case(layer, x, extra=lambda out: out):
    tensors = {"x": x, **layer.params("p")}
    return tensors, lambda: weighted_sum(extra(layer(tensors["x"])), np.random.default_rng(7))


def test_linear_gradients():
    rng = np.random.default_rng(0)
    tensors, build = layer_case(Linear(4, 3, rng, dtype=np.float64), p64(rng, 2, 5, 4))
    assert_grads_match(build, tensors)


def test_layernorm_gradients():
    rng = np.random.default_rng(1)
    tensors, build = layer_case(LayerNorm(6, dtype=np.float64), p64(rng, 2, 3, 6))
    tensors["p.gain"].data = rng.uniform(0.5, 1.5, size=6)  # move off the init point
    tensors["p.bias"].data = rng.standard_normal(6) * 0.1
    assert_grads_match(build, tensors)


def test_conv_layer_gradients():
    rng = np.random.default_rng(2)
    tensors, build = layer_case(Conv2d(2, 3, 3, 1, 1, rng, dtype=np.float64), p64(rng, 1, 2, 4, 5))
    assert_grads_match(build, tensors)


def test_attention_gradients():
    rng = np.random.default_rng(3)
    tensors, build = layer_case(MultiHeadAttention(6, 2, 2, rng, dtype=np.float64), p64(rng, 1, 3, 6))
    assert_grads_match(build, tensors)


def test_feedforward_gradients():
    rng = np.random.default_rng(4)
    tensors, build = layer_case(FeedForward(5, 8, rng, dtype=np.float64), p64(rng, 2, 3, 5))
    assert_grads_match(build, tensors)


def test_transformer_layer_gradients():
    rng = np.random.default_rng(5)
    tensors, build = layer_case(TransformerLayer(6, 2, 2, 8, rng, dtype=np.float64), p64(rng, 1, 3, 6))
    assert_grads_match(build, tensors)


def test_cross_entropy_gradients():
    rng = np.random.default_rng(6)
    logits = p64(rng, 4, 3)
    labels = np.array([0, 2, 1, 2])
    assert_grads_match(lambda: cross_entropy(logits, labels), {"logits": logits})


# --- value oracles ---------------------------------------------------------------


def test_softmax_of_zeros_is_uniform():
    out = softmax(constant(np.zeros((2, 4))))
    assert np.allclose(out.data, 0.25, atol=1e-15)


def test_slice_of_concat_restores_parts():
    a, b = constant(np.arange(6.0).reshape(2, 3)), constant(np.arange(8.0).reshape(2, 4))
    joined = concat([a, b], axis=1)
    assert np.array_equal(slice_axis(joined, 1, 0, 3).data, a.data)
    assert np.array_equal(slice_axis(joined, 1, 3, 7).data, b.data)


def test_conv2d_delta_kernel_is_identity():
    rng = np.random.default_rng(8)
    x = constant(rng.standard_normal((1, 1, 6, 7)))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = conv2d(x, constant(w), padding=1)
    assert np.allclose(out.data, x.data, atol=1e-15)


def test_conv2d_shape_validation():
    x, w = parameter(np.zeros((1, 2, 5, 5))), parameter(np.zeros((3, 4, 3, 3)))
    with pytest.raises(ValueError, match="channel"):
        conv2d(x, w)
    with pytest.raises(ValueError, match="empty"):
        conv2d(parameter(np.zeros((1, 1, 2, 2))), parameter(np.zeros((1, 1, 5, 5))))


def test_sum_backward_is_ones():
    x = p64(np.random.default_rng(9), 3, 4)
    backward(tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_max_grad_is_one_hot_at_argmax():
    x = parameter(np.array([[1.0, 5.0, 2.0], [7.0, 3.0, 4.0]]))
    backward(tsum(max_over_axis(x, axis=1)))
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])


def test_backward_requires_scalar_root():
    x = p64(np.random.default_rng(10), 3)
    with pytest.raises(ValueError, match="scalar"):
        backward(scale(x, 2.0))


def test_backward_zero_fills_unreached_params():
    x, orphan = p64(np.random.default_rng(11), 3), p64(np.random.default_rng(12), 4)
    backward(tsum(x), params=[x, orphan])
    assert np.array_equal(orphan.grad, np.zeros(4))


def test_no_grad_builds_no_graph():
    x = p64(np.random.default_rng(13), 3)
    with no_grad():
        out = scale(x, 2.0)
    assert not out.requires_grad and out._backward is None and out._parents == ()


def test_dropout_inverted_mask():
    x = parameter(np.ones(1000))
    out = dropout(x, 0.25, rng=np.random.default_rng(21), train=True)
    backward(tsum(out))
    mask = (np.random.default_rng(21).random(1000) >= 0.25) / 0.75
    assert np.array_equal(x.grad, mask)
    assert abs(out.data.mean() - 1.0) < 0.1  # inverted scaling keeps the expectation
    assert dropout(x, 0.25, train=False) is x
    with pytest.raises(ValueError):
        dropout(x, 1.0, rng=np.random.default_rng(0), train=True)
    with pytest.raises(ValueError):
        dropout(x, 0.5, train=True)


def test_cross_entropy_hand_values():
    # uniform logits over k classes -> ln k regardless of the label
    assert cross_entropy(constant(np.zeros((1, 2))), [0]).item() == pytest.approx(np.log(2.0))
    assert cross_entropy(constant(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(np.log(4.0))


def test_sinusoidal_positions_formula():
    table = sinusoidal_positions(300, 8, dtype=np.float64)
    direct = np.zeros((300, 8))
    for t in range(300):
        for i in range(4):
            angle = t / 10000.0 ** (2.0 * i / 8.0)
            direct[t, 2 * i] = np.sin(angle)
            direct[t, 2 * i + 1] = np.cos(angle)
    assert np.allclose(table, direct, atol=1e-12)
    assert np.all(table[0, 0::2] == 0.0) and np.all(table[0, 1::2] == 1.0)
    assert np.max(np.abs(table)) <= 1.0
    # all rows distinct within the model's horizon
    assert len({tuple(row) for row in table.round(12)}) == 300


def test_sinusoidal_positions_odd_dim():
    table = sinusoidal_positions(4, 5)
    assert table.shape == (4, 5) and np.isfinite(table).all()


def test_attention_single_token_weights_are_one():
    rng = np.random.default_rng(14)
    att = MultiHeadAttention(6, 2, 2, rng, dtype=np.float64)
    x = constant(rng.standard_normal((1, 1, 6)))
    out, weights = att(x, return_weights=True)
    assert np.allclose(weights.data, 1.0, atol=1e-15)
    # with a single token the context is exactly the value projection
    expected = att.out(reshape(att.v(x), (1, 1, 4)))
    assert np.allclose(out.data, expected.data, atol=1e-12)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(15)
    att = MultiHeadAttention(6, 3, 2, rng, dtype=np.float64)
    _, weights = att(constant(rng.standard_normal((2, 5, 6))), return_weights=True)
    assert np.allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_is_permutation_equivariant():
    rng = np.random.default_rng(16)
    att = MultiHeadAttention(6, 2, 3, rng, dtype=np.float64)
    x = rng.standard_normal((1, 5, 6))
    perm = rng.permutation(5)
    out = att(constant(x)).data
    out_perm = att(constant(x[:, perm])).data
    assert np.allclose(out_perm, out[:, perm], atol=1e-12)


def test_layernorm_normalizes_last_axis():
    rng = np.random.default_rng(17)
    out = LayerNorm(32, dtype=np.float64)(constant(rng.standard_normal((4, 32)) * 3.0 + 1.0))
    assert np.max(np.abs(out.data.mean(axis=-1))) < 1e-12
    assert np.max(np.abs(out.data.var(axis=-1) - 1.0)) < 1e-4  # eps-limited


# --- optimizer ---------------------------------------------------------------------


def test_adam_leaves_params_alone_without_gradients():
    p = parameter(np.array([1.0, 2.0]))
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    assert np.array_equal(p.data, [1.0, 2.0])


def test_adam_first_step_is_signed_lr():
    p = parameter(np.array([1.0, -3.0, 2.0]))
    p.grad = np.array([0.5, -2.0, 1e-3])
    Adam({"p": p}, lr=0.01).step()
    assert np.allclose(p.data, [1.0 - 0.01, -3.0 + 0.01, 2.0 - 0.01], atol=1e-6)


def test_adam_minimizes_a_bowl():
    w = parameter(np.random.default_rng(18).standard_normal(8))
    opt = Adam({"w": w}, lr=0.01)
    for _ in range(1000):
        zero_grads([w])
        backward(tsum(mul(w, w)), params=[w])
        opt.step()
    assert np.linalg.norm(w.data) < 1e-4


def test_adam_rejects_non_finite_gradients():
    p = parameter(np.array([1.0]))
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError, match="p"):
        Adam({"p": p}, lr=0.1).step()


def test_clip_global_norm():
    a, b = parameter(np.zeros(3)), parameter(np.zeros(4))
    a.grad, b.grad = np.full(3, 3.0), np.full(4, 4.0)
    raw = clip_global_norm({"a": a, "b": b}, max_norm=1.0)
    assert raw == pytest.approx(np.sqrt(27.0 + 64.0))
    joint = np.sqrt((a.grad**2).sum() + (b.grad**2).sum())
    assert joint == pytest.approx(1.0)
    # under the cap nothing moves
    a.grad, b.grad = np.full(3, 0.01), np.full(4, 0.01)
    clip_global_norm({"a": a, "b": b}, max_norm=1.0)
    assert np.array_equal(a.grad, np.full(3, 0.01))


# --- checkpoint container -----------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(19)
    params = {"layer.w": rng.standard_normal((3, 4)).astype(np.float32), "layer.b": np.zeros(4, np.float32)}
    state = {"opt.t": np.float32(7), "opt.m.layer.w": rng.standard_normal((3, 4)).astype(np.float32)}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, state)
    back_params, back_state = load_checkpoint(path)
    assert sorted(back_params) == sorted(params)
    for k in params:
        assert np.array_equal(back_params[k], params[k])
    assert int(back_state["opt.t"]) == 7
    assert np.array_equal(back_state["opt.m.layer.w"], state["opt.m.layer.w"])


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, {"w": np.ones(2, np.float32)}, {})
    blob = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"XKPT" + blob[4:])
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "version.ckpt").write_bytes(blob[:4] + b"\x09" + blob[5:])
    with pytest.raises(DataError, match="version"):
        load_checkpoint(tmp_path / "version.ckpt")
    (tmp_path / "trailing.ckpt").write_bytes(blob + b"\x00\x00")
    with pytest.raises(DataError, match="trailing"):
        load_checkpoint(tmp_path / "trailing.ckpt")
    (tmp_path / "short.ckpt").write_bytes(blob[:-4])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")


def test_apply_params_validates_the_set(tmp_path):
    target = {"w": parameter(np.zeros((2, 2), np.float32))}
    with pytest.raises(DataError, match="missing"):
        apply_params(target, {}, "x.ckpt")
    with pytest.raises(DataError, match="extra"):
        apply_params(target, {"w": np.zeros((2, 2)), "z": np.zeros(1)}, "x.ckpt")
    with pytest.raises(DataError, match="shape"):
        apply_params(target, {"w": np.zeros((3, 2))}, "x.ckpt")
    apply_params(target, {"w": np.ones((2, 2))}, "x.ckpt")
    assert target["w"].data.dtype == np.float32 and np.all(target["w"].data == 1.0)


def test_model_manifest_path():
    assert model_manifest_path("runs/best.ckpt") == "runs/best.ckpt.json"
