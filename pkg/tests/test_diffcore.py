"""Numerical-core tests: forward oracles, gradient checks, checkpoint format."""

import concurrent.futures

import numpy as np
import pytest
from scipy.signal import correlate2d

from advaudit import diffcore as dc


# ---------------------------------------------------------------------------
# oracles, written before the module and kept independent of it
# ---------------------------------------------------------------------------

def python_affine(x_rows, w_rows, b):
    """Pure-Python matmul oracle: rows of x against rows of w (out, in)."""
    out = []
    for row in x_rows:
        out.append([sum(wi * xi for wi, xi in zip(wrow, row)) + bi
                    for wrow, bi in zip(w_rows, b)])
    return out


def python_relu(rows):
    return [[v if v > 0 else 0.0 for v in row] for row in rows]


def fd_input_grad(graph, x, labels, output, h=1e-4):
    """Test-local central-difference gradient, independent of gradient_check."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = float(graph.output(graph.forward(x, labels=labels, dtype=np.float64), output))
        flat[i] = keep - h
        fm = float(graph.output(graph.forward(x, labels=labels, dtype=np.float64), output))
        flat[i] = keep
        gflat[i] = (fp - fm) / (2 * h)
    return g


def linear_graph(rng, din=4, dmid=3):
    g = dc.Graph((din,))
    g.add_param("w1", rng.normal(size=(dmid, din)))
    g.add_param("b1", rng.normal(size=(dmid,)))
    h = g.affine(g.input_id, "w1", "b1")
    g.mark_output("loss", g.sum_squares(h))
    g.mark_output("hidden", h)
    return g


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_identity_graph_returns_input():
    g = dc.Graph((2,))
    g.mark_output("out", g.input_id)
    x = np.array([[0.25, 0.5]], dtype=np.float32)
    out = g.output(g.forward(x), "out")
    assert np.array_equal(out, x)


def test_affine_zero_weights_returns_bias():
    g = dc.Graph((3,))
    b = np.array([1.5, -2.0], dtype=np.float32)
    g.add_param("w", np.zeros((2, 3)))
    g.add_param("b", b)
    g.mark_output("out", g.affine(g.input_id, "w", "b"))
    rng = np.random.default_rng(7)
    for _ in range(5):
        x = rng.normal(size=(4, 3)).astype(np.float32)
        out = g.output(g.forward(x), "out")
        assert np.array_equal(out, np.broadcast_to(b, (4, 2)))


def test_three_layer_forward_matches_hand_evaluation():
    # parameters are held in float32, so quantize the oracle's copies the same way
    rng = np.random.default_rng(0)
    f32 = lambda a: a.astype(np.float32).astype(np.float64)
    w1 = f32(rng.normal(size=(3, 4)))
    b1 = f32(rng.normal(size=(3,)))
    w2 = f32(rng.normal(size=(3, 3)))
    b2 = f32(rng.normal(size=(3,)))
    w3 = f32(rng.normal(size=(2, 3)))
    b3 = f32(rng.normal(size=(2,)))
    x = rng.normal(size=(1, 4))

    # independent pure-Python evaluation
    h1 = python_relu(python_affine(x.tolist(), w1.tolist(), b1.tolist()))
    h2 = python_relu(python_affine(h1, w2.tolist(), b2.tolist()))
    expect = np.array(python_affine(h2, w3.tolist(), b3.tolist()))

    g = dc.Graph((4,))
    for name, v in [("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2), ("w3", w3), ("b3", b3)]:
        g.add_param(name, v)
    h = g.relu(g.affine(g.input_id, "w1", "b1"))
    h = g.relu(g.affine(h, "w2", "b2"))
    g.mark_output("logits", g.affine(h, "w3", "b3"))

    got64 = g.output(g.forward(x, dtype=np.float64), "logits")
    np.testing.assert_allclose(got64, expect, rtol=1e-12)
    got32 = g.output(g.forward(x, dtype=np.float32), "logits")
    np.testing.assert_allclose(got32, expect, rtol=1e-5)


def test_conv3x3_center_one_kernel_is_identity():
    g = dc.Graph((2, 5, 5))
    w = np.zeros((2, 2, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    w[1, 1, 1, 1] = 1.0
    g.add_param("w", w)
    g.add_param("b", np.zeros(2))
    g.mark_output("out", g.conv3x3(g.input_id, "w", "b"))
    x = np.random.default_rng(1).random((3, 2, 5, 5)).astype(np.float32)
    assert np.array_equal(g.output(g.forward(x), "out"), x)


def test_conv3x3_matches_scipy_correlate():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32).astype(np.float64)
    b = rng.normal(size=(4,)).astype(np.float32).astype(np.float64)
    g = dc.Graph((3, 6, 6))
    g.add_param("w", w)
    g.add_param("b", b)
    g.mark_output("out", g.conv3x3(g.input_id, "w", "b"))
    got = g.output(g.forward(x, dtype=np.float64), "out")

    expect = np.zeros((2, 4, 6, 6))
    for n in range(2):
        for co in range(4):
            acc = np.zeros((6, 6))
            for ci in range(3):
                acc += correlate2d(x[n, ci], w[co, ci], mode="same", boundary="fill")
            expect[n, co] = acc + b[co]
    np.testing.assert_allclose(got, expect, rtol=1e-10, atol=1e-12)


def test_forward_is_pure_and_reentrant():
    rng = np.random.default_rng(3)
    g = linear_graph(rng)
    xs = [rng.normal(size=(2, 4)).astype(np.float32) for _ in range(8)]
    serial = [g.output(g.forward(x), "hidden").copy() for x in xs]
    again = [g.output(g.forward(x), "hidden") for x in xs]
    with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
        threaded = list(pool.map(lambda x: g.output(g.forward(x), "hidden"), xs))
    for a, b, c in zip(serial, again, threaded):
        assert np.array_equal(a, b)
        assert np.array_equal(a, c)


def test_shape_mismatch_names_offending_operation():
    g = dc.Graph((3,))
    g.add_param("w", np.zeros((2, 3)))
    g.add_param("b", np.zeros(2))
    g.mark_output("out", g.affine(g.input_id, "w", "b"))
    with pytest.raises(ValueError, match="input"):
        g.forward(np.zeros((1, 4), dtype=np.float32))

    g2 = dc.Graph((5,))
    g2.add_param("w", np.zeros((2, 3)))
    g2.add_param("b", np.zeros(2))
    g2.mark_output("out", g2.affine(g2.input_id, "w", "b"))
    with pytest.raises(ValueError, match="affine"):
        g2.forward(np.zeros((1, 5), dtype=np.float32))


def test_nonfinite_output_rejected_with_op_name():
    g = dc.Graph((2,))
    g.add_param("w", np.array([[np.inf, 0.0]], dtype=np.float32).reshape(1, 2))
    g.add_param("b", np.zeros(1))
    g.mark_output("out", g.affine(g.input_id, "w", "b"))
    with pytest.raises(FloatingPointError, match="affine"):
        g.forward(np.ones((1, 2), dtype=np.float32))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_sum_of_squares_gradient():
    g = dc.Graph((2,))
    g.mark_output("loss", g.sum_squares(g.input_id))
    x = np.array([[1.0, 2.0]], dtype=np.float32)
    tape = g.forward(x)
    gx, _ = g.backward(tape, "loss")
    np.testing.assert_array_equal(gx, np.array([[2.0, 4.0]], dtype=np.float32))


def test_cross_entropy_gradient_at_uniform_logits():
    c = 5
    g = dc.Graph((c,))
    g.mark_output("loss", g.sum(g.softmax_ce(g.input_id)))
    x = np.zeros((1, c), dtype=np.float64)
    k = 3
    tape = g.forward(x, labels=[k], dtype=np.float64)
    gx, _ = g.backward(tape, "loss")
    expect = np.full((1, c), 1.0 / c)
    expect[0, k] -= 1.0
    np.testing.assert_allclose(gx, expect, rtol=1e-12)


def test_two_layer_gradient_matches_test_local_differences():
    rng = np.random.default_rng(4)
    g = dc.Graph((4,))
    g.add_param("w1", rng.normal(size=(6, 4)))
    g.add_param("b1", rng.normal(size=(6,)))
    g.add_param("w2", rng.normal(size=(3, 6)))
    g.add_param("b2", rng.normal(size=(3,)))
    h = g.relu(g.affine(g.input_id, "w1", "b1"))
    g.mark_output("loss", g.sum(g.softmax_ce(g.affine(h, "w2", "b2"))))

    worst = 0.0
    for _ in range(10):
        x = rng.normal(size=(2, 4))
        labels = rng.integers(0, 3, size=2)
        tape = g.forward(x, labels=labels, dtype=np.float64)
        analytic, _ = g.backward(tape, "loss")
        numeric = fd_input_grad(g, x, labels, "loss")
        rel = np.abs(analytic - numeric) / np.maximum(
            np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, float(rel.max()))
    assert worst < 1e-3, f"max relative error {worst:.3e}"


def test_gradient_is_linear_through_linear_graph():
    # quadratic loss over affine layers: input gradient is linear in x
    rng = np.random.default_rng(5)
    g = dc.Graph((4,))
    g.add_param("w1", rng.normal(size=(3, 4)))
    g.add_param("b1", np.zeros(3))
    g.add_param("w2", rng.normal(size=(2, 3)))
    g.add_param("b2", np.zeros(2))
    h = g.affine(g.affine(g.input_id, "w1", "b1"), "w2", "b2")
    g.mark_output("loss", g.sum_squares(h))

    def grad(x):
        tape = g.forward(x, dtype=np.float64)
        return g.backward(tape, "loss")[0]

    x1 = rng.normal(size=(2, 4))
    x2 = rng.normal(size=(2, 4))
    a = 2.75
    np.testing.assert_allclose(grad(a * x1), a * grad(x1), rtol=1e-12)
    np.testing.assert_allclose(grad(x1 + x2), grad(x1) + grad(x2), rtol=1e-12)


def test_gradient_of_non_scalar_output_rejected():
    g = dc.Graph((3,))
    g.mark_output("vec", g.relu(g.input_id))
    tape = g.forward(np.ones((1, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="non-scalar"):
        g.backward(tape, "vec")


def test_unknown_output_name_rejected():
    g = dc.Graph((3,))
    g.mark_output("out", g.input_id)
    tape = g.forward(np.ones((1, 3), dtype=np.float32))
    with pytest.raises(KeyError, match="nope"):
        g.output(tape, "nope")
    with pytest.raises(KeyError, match="nope"):
        g.backward(tape, "nope")


def test_median_aggregation_routes_gradient_to_median_head():
    # heads produce [1,0], [3,0], [2,0]; median [2,0]; coordinate 0 routes to
    # head 2, coordinate 1 (three-way tie) to the stably-middle head 1
    g = dc.Graph((1,))
    for i, v in enumerate([[1.0, 0.0], [3.0, 0.0], [2.0, 0.0]]):
        g.add_param(f"w{i}", np.zeros((2, 1)))
        g.add_param(f"b{i}", np.array(v))
    heads = [g.affine(g.input_id, f"w{i}", f"b{i}") for i in range(3)]
    agg = g.aggregate(heads, "median")
    g.mark_output("agg", agg)
    g.mark_output("loss", g.sum(agg))

    x = np.zeros((1, 1), dtype=np.float64)
    tape = g.forward(x, dtype=np.float64)
    np.testing.assert_array_equal(g.output(tape, "agg"), [[2.0, 0.0]])
    _, gp = g.backward(tape, "loss")
    np.testing.assert_array_equal(gp["b0"], [0.0, 0.0])
    np.testing.assert_array_equal(gp["b1"], [0.0, 1.0])
    np.testing.assert_array_equal(gp["b2"], [1.0, 0.0])


def test_even_head_median_splits_gradient():
    g = dc.Graph((1,))
    for i, v in enumerate([1.0, 4.0, 2.0, 3.0]):
        g.add_param(f"w{i}", np.zeros((1, 1)))
        g.add_param(f"b{i}", np.array([v]))
    heads = [g.affine(g.input_id, f"w{i}", f"b{i}") for i in range(4)]
    g.mark_output("loss", g.sum(g.aggregate(heads, "median")))
    tape = g.forward(np.zeros((1, 1)), dtype=np.float64)
    assert float(g.output(tape, "loss")) == 2.5
    _, gp = g.backward(tape, "loss")
    got = [float(gp[f"b{i}"][0]) for i in range(4)]
    assert got == [0.0, 0.0, 0.5, 0.5]


# ---------------------------------------------------------------------------
# per-primitive finite-difference probes (non-kink regions)
# ---------------------------------------------------------------------------

def _probe_case(name, rng):
    """Return (graph, input, labels) with 'loss' marked, for one primitive."""
    if name == "affine":
        g = dc.Graph((4,))
        g.add_param("w", rng.normal(size=(3, 4)))
        g.add_param("b", rng.normal(size=(3,)))
        g.mark_output("loss", g.sum(g.affine(g.input_id, "w", "b")))
        return g, rng.normal(size=(2, 4)), None
    if name == "conv3x3":
        g = dc.Graph((2, 5, 5))
        g.add_param("w", rng.normal(size=(3, 2, 3, 3)))
        g.add_param("b", rng.normal(size=(3,)))
        g.mark_output("loss", g.sum_squares(g.conv3x3(g.input_id, "w", "b")))
        return g, rng.normal(size=(1, 2, 5, 5)), None
    if name == "relu":
        g = dc.Graph((6,))
        g.mark_output("loss", g.sum_squares(g.relu(g.input_id)))
        x = rng.normal(size=(2, 6))
        x = np.where(np.abs(x) < 0.05, 0.5, x)  # stay clear of the kink
        return g, x, None
    if name == "avgpool":
        g = dc.Graph((2, 4, 4))
        g.mark_output("loss", g.sum_squares(g.avgpool(g.input_id, 2)))
        return g, rng.normal(size=(1, 2, 4, 4)), None
    if name == "upsample":
        g = dc.Graph((2, 3, 3))
        g.mark_output("loss", g.sum_squares(g.upsample(g.input_id, 2)))
        return g, rng.normal(size=(1, 2, 3, 3)), None
    if name == "concat":
        g = dc.Graph((1, 4, 4))
        p = g.avgpool(g.input_id, 2)
        up = g.upsample(p, 2)
        g.mark_output("loss", g.sum_squares(g.concat_channels(g.input_id, up)))
        return g, rng.normal(size=(2, 1, 4, 4)), None
    if name == "mean_hw":
        g = dc.Graph((3, 4, 4))
        g.mark_output("loss", g.sum_squares(g.mean_hw(g.input_id)))
        return g, rng.normal(size=(2, 3, 4, 4)), None
    if name == "softmax_ce":
        g = dc.Graph((4,))
        g.mark_output("loss", g.sum(g.softmax_ce(g.input_id)))
        return g, rng.normal(size=(3, 4)), rng.integers(0, 4, size=3)
    if name == "mean":
        g = dc.Graph((5,))
        g.mark_output("loss", g.mean(g.sum_squares(g.input_id)))
        return g, rng.normal(size=(2, 5)), None
    if name == "aggregate_mean" or name == "aggregate_median":
        rule = name.split("_")[1]
        g = dc.Graph((4,))
        heads = []
        for i in range(3):
            g.add_param(f"w{i}", rng.normal(size=(3, 4)))
            g.add_param(f"b{i}", rng.normal(size=(3,)))
            heads.append(g.affine(g.input_id, f"w{i}", f"b{i}"))
        g.mark_output("loss", g.sum_squares(g.aggregate(heads, rule)))
        return g, 3.0 * rng.normal(size=(2, 4)), None
    raise AssertionError(name)


@pytest.mark.parametrize("primitive", [
    "affine", "conv3x3", "relu", "avgpool", "upsample", "concat",
    "mean_hw", "softmax_ce", "mean", "aggregate_mean", "aggregate_median",
])
def test_primitive_gradients_match_finite_differences(primitive):
    rng = np.random.default_rng(hash(primitive) % 2**32)
    worst = 0.0
    for _ in range(10):
        g, x, labels = _probe_case(primitive, rng)
        res = dc.gradient_check(g, x, labels=labels, output="loss", h=1e-4)
        worst = max(worst, res.max_rel_error)
    assert worst < 1e-3, f"{primitive}: max relative error {worst:.3e}"


# ---------------------------------------------------------------------------
# gradient_check contract
# ---------------------------------------------------------------------------

def test_gradient_check_exact_for_linear_model():
    g = linear_graph(np.random.default_rng(6))
    g2 = dc.Graph((4,))
    g2.add_param("w", np.random.default_rng(6).normal(size=(1, 4)))
    g2.add_param("b", np.zeros(1))
    g2.mark_output("loss", g2.sum(g2.affine(g2.input_id, "w", "b")))
    res = dc.gradient_check(g2, np.random.default_rng(8).normal(size=(2, 4)),
                            output="loss", h=1e-4)
    assert res.max_rel_error < 1e-6
    assert res.ok


def test_gradient_check_relu_network_below_tolerance():
    rng = np.random.default_rng(9)
    g = dc.Graph((4,))
    g.add_param("w1", rng.normal(size=(5, 4)))
    g.add_param("b1", rng.normal(size=(5,)))
    g.add_param("w2", rng.normal(size=(2, 5)))
    g.add_param("b2", rng.normal(size=(2,)))
    h = g.relu(g.affine(g.input_id, "w1", "b1"))
    g.mark_output("loss", g.sum(g.softmax_ce(g.affine(h, "w2", "b2"))))
    res = dc.gradient_check(g, rng.normal(size=(3, 4)),
                            labels=rng.integers(0, 2, size=3), output="loss")
    assert res.max_rel_error < 1e-3


def test_gradient_check_rejects_nonpositive_step():
    g = dc.Graph((2,))
    g.mark_output("loss", g.sum_squares(g.input_id))
    x = np.ones((1, 2))
    with pytest.raises(ValueError, match="positive"):
        dc.gradient_check(g, x, output="loss", h=0.0)
    with pytest.raises(ValueError, match="positive"):
        dc.gradient_check(g, x, output="loss", h=-1e-4)


# ---------------------------------------------------------------------------
# array kernels
# ---------------------------------------------------------------------------

def test_avgpool2d_hand_case():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = dc.avgpool2d(x, 2)
    np.testing.assert_array_equal(out[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(ValueError, match="divide"):
        dc.avgpool2d(x, 3)


def test_upsample_nearest_hand_case():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    out = dc.upsample_nearest(x, 2)
    np.testing.assert_array_equal(out[0, 0], [
        [1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_shift2d_semantics_and_zero_fill():
    x = np.arange(9, dtype=np.float64).reshape(1, 3, 3)
    right = dc.shift2d(x, 1, 0)  # dx=+1 moves content right
    np.testing.assert_array_equal(right[0], [[0, 0, 1], [0, 3, 4], [0, 6, 7]])
    down = dc.shift2d(x, 0, 1)
    np.testing.assert_array_equal(down[0], [[0, 0, 0], [0, 1, 2], [3, 4, 5]])
    assert np.all(dc.shift2d(x, 3, 0) == 0)
    assert np.all(dc.shift2d(x, 0, -3) == 0)


def test_shift2d_adjoint_identity():
    # <shift(x), y> == <x, shift^{-1}(y)> for zero-fill shifts
    rng = np.random.default_rng(10)
    for _ in range(20):
        x = rng.normal(size=(2, 5, 7))
        y = rng.normal(size=(2, 5, 7))
        dx, dy = int(rng.integers(-2, 3)), int(rng.integers(-2, 3))
        lhs = float(np.sum(dc.shift2d(x, dx, dy) * y))
        rhs = float(np.sum(x * dc.shift2d(y, -dx, -dy)))
        assert abs(lhs - rhs) < 1e-12


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_preserves_values_and_dtypes(tmp_path):
    tensors = {
        "trunk/w0": np.random.default_rng(11).normal(size=(4, 3, 3, 3)).astype(np.float32),
        "head.bias": np.array([1.0, -2.5], dtype=np.float64),
        "steps": np.array(42, dtype=np.int64),
        "empty": np.zeros((0, 3), dtype=np.float32),
    }
    path = tmp_path / "model.ckpt"
    dc.save_tensors(path, tensors)
    loaded = dc.load_tensors(path)
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].dtype == tensors[k].dtype
        assert loaded[k].shape == tensors[k].shape
        np.testing.assert_array_equal(loaded[k], tensors[k])


def test_checkpoint_bytes_are_reproducible(tmp_path):
    tensors = {"b": np.ones((2, 2), dtype=np.float32), "a": np.arange(3, dtype=np.int64)}
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    dc.save_tensors(p1, tensors)
    dc.save_tensors(p2, dict(reversed(list(tensors.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "model.ckpt"
    dc.save_tensors(path, {"w": np.ones(4, dtype=np.float32)})
    blob = path.read_bytes()

    bad_magic = tmp_path / "bad_magic.ckpt"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError, match="magic"):
        dc.load_tensors(bad_magic)

    truncated = tmp_path / "short.ckpt"
    truncated.write_bytes(blob[:-5])
    with pytest.raises(ValueError, match="truncated"):
        dc.load_tensors(truncated)

    trailing = tmp_path / "long.ckpt"
    trailing.write_bytes(blob + b"\x00")
    with pytest.raises(ValueError, match="trailing"):
        dc.load_tensors(trailing)

    version = bytearray(blob)
    version[4] = 99
    vpath = tmp_path / "ver.ckpt"
    vpath.write_bytes(bytes(version))
    with pytest.raises(ValueError, match="version"):
        dc.load_tensors(vpath)


def test_checkpoint_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(ValueError, match="dtype"):
        dc.save_tensors(tmp_path / "x.ckpt", {"w": np.ones(2, dtype=np.float16)})
