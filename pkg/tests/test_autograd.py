import zlib

import numpy as np
import pytest

from pixeldefend.autograd import (
    ComputationTape,
    Tensor,
    backward,
    check_gradients,
    grad,
    ops,
)
from pixeldefend.autograd import checkpoint
from pixeldefend.errors import ContractError, DimensionError, FormatError, NumericError

RTOL = 1e-4


def conv_oracle(x, k, stride=1, pads=(0, 0, 0, 0)):
    """Direct nested-loop cross-correlation."""
    pt, pb, pl, pr = pads
    x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    acc = 0.0
                    for a in range(kh):
                        for c in range(kw):
                            for ci in range(cin):
                                acc += x[b, i * stride + a, j * stride + c, ci] * k[a, c, ci, o]
                    out[b, i, j, o] = acc
    return out


class TestConv2d:
    def test_center_of_ones(self):
        out = ops.conv2d(Tensor(np.ones((1, 3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))))
        assert out.data[0, 1, 1, 0] == 9.0

    def test_masked_center(self):
        mask = np.ones((3, 3, 1, 1))
        mask[1, 1] = 0
        out = ops.conv2d(Tensor(np.ones((1, 3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))), mask=mask)
        assert out.data[0, 1, 1, 0] == 8.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 5, 5, 2))
        k = rng.standard_normal((3, 3, 2, 3))
        out = ops.conv2d(Tensor(x), Tensor(k), padding="same").data
        np.testing.assert_allclose(out, conv_oracle(x, k, pads=(1, 1, 1, 1)), rtol=0, atol=1e-10)
        out = ops.conv2d(Tensor(x), Tensor(k), padding="valid").data
        np.testing.assert_allclose(out, conv_oracle(x, k), rtol=0, atol=1e-10)

    def test_strided_matches_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 6, 6, 1))
        k = rng.standard_normal((3, 3, 1, 2))
        out = ops.conv2d(Tensor(x), Tensor(k), stride=2, padding="same").data
        # same padding for 6 -> 3 with k=3, s=2 pads 0 before, 1 after
        np.testing.assert_allclose(out, conv_oracle(x, k, 2, (0, 1, 0, 1)), atol=1e-10)

    def test_all_ones_mask_is_exact(self):
        rng = np.random.default_rng(2)
        x, k = Tensor(rng.standard_normal((2, 5, 5, 3))), Tensor(rng.standard_normal((3, 3, 3, 4)))
        a = ops.conv2d(x, k).data
        b = ops.conv2d(x, k, mask=np.ones(k.shape)).data
        assert np.array_equal(a, b)

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 3, 3, 2))), Tensor(np.ones((3, 3, 1, 1))))
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 2, 2, 1))), Tensor(np.ones((3, 3, 1, 1))), padding="valid")
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))),
                       mask=np.full((3, 3, 1, 1), 0.5))


class TestBackward:
    def test_half_sum_of_squares(self):
        x = Tensor([1.0, -2.0, 3.0])
        _, (g,) = grad(lambda t: ops.sum(t * t) * 0.5, [x])
        np.testing.assert_array_equal(g.data, [1.0, -2.0, 3.0])

    def test_cross_entropy_symmetric(self):
        z = Tensor([0.0, 0.0])
        _, (g,) = grad(lambda t: ops.cross_entropy(t, np.array([1.0, 0.0])), [z])
        np.testing.assert_allclose(g.data, [-0.5, 0.5], atol=1e-15)

    def test_loss_must_be_scalar(self):
        x = Tensor(np.ones(3))
        with ComputationTape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            backward(tape, y)

    def test_gradient_map_covers_every_leaf(self):
        a, b = Tensor(np.ones((2, 3))), Tensor(np.full((3, 1), 2.0))
        with ComputationTape() as tape:
            loss = ops.sum(a @ b)
        grads = backward(tape, loss)
        assert set(grads) == {a, b}
        assert grads[a].shape == a.shape and grads[b].shape == b.shape

    def test_topological_tape(self):
        a = Tensor(np.ones(2))
        with ComputationTape() as tape:
            b = a * 3.0
            ops.sum(b + a)
        produced = set()
        for node in tape.nodes:
            for t in node.inputs:
                assert id(t) not in {id(n.output) for n in tape.nodes} or id(t) in produced
            produced.add(id(node.output))

    def test_non_finite_forward(self):
        with pytest.raises(NumericError):
            Tensor([np.nan])
        with pytest.raises(NumericError), np.errstate(over="ignore"):
            ops.multiply(Tensor([1e308]), 1e308)

    def test_deterministic_forward(self):
        rng = np.random.default_rng(3)
        x, k = Tensor(rng.standard_normal((2, 6, 6, 3))), Tensor(rng.standard_normal((3, 3, 3, 5)))
        assert np.array_equal(ops.conv2d(x, k).data, ops.conv2d(x, k).data)


class TestPrimitives:
    def test_relu(self):
        np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_softmax_uniform(self):
        np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            ops.softmax(Tensor(np.ones((2, 3))), axis=2)
        with pytest.raises(DimensionError):
            ops.sum(Tensor(np.ones((2, 3))), axis=-3)

    def test_pad_reflect_matches_numpy(self):
        x = np.arange(2 * 4 * 5 * 3, dtype=float).reshape(2, 4, 5, 3)
        out = ops.pad_reflect(Tensor(x), ((1, 2), (3, 1))).data
        np.testing.assert_array_equal(out, np.pad(x, ((0, 0), (1, 2), (3, 1), (0, 0)), mode="reflect"))

    def test_max_pool(self):
        x = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
        np.testing.assert_array_equal(ops.max_pool2d(Tensor(x)).data[0, :, :, 0], [[5, 7], [13, 15]])

    def test_cross_entropy_integer_labels_match_one_hot(self):
        rng = np.random.default_rng(4)
        z = rng.standard_normal((5, 7))
        y = rng.integers(0, 7, 5)
        a = ops.cross_entropy(Tensor(z), y).item()
        b = ops.cross_entropy(Tensor(z), np.eye(7)[y]).item()
        assert a == pytest.approx(b, abs=1e-12)


def _cases():
    """Primitive name -> (function of tensors, input-shape factory)."""
    soft = np.random.default_rng(99).dirichlet(np.ones(4), size=3)
    mask = (np.random.default_rng(98).random((3, 3, 2, 2)) > 0.3).astype(float)
    return {
        "matmul": (lambda a, b: ops.sum(ops.matmul(a, b) * ops.matmul(a, b)),
                   [(3, 4), (4, 2)]),
        "add": (lambda a, b: ops.sum(ops.add(a, b) * ops.add(a, b)), [(3, 4), (1, 4)]),
        "multiply": (lambda a, b: ops.sum(ops.multiply(a, b)), [(3, 4), (3, 4)]),
        "relu": (lambda a: ops.sum(ops.relu(a) * a), [(4, 5)]),
        "leaky_relu": (lambda a: ops.sum(ops.leaky_relu(a, 0.2) * a), [(4, 5)]),
        "softmax": (lambda a: ops.sum(ops.softmax(a, axis=0) * np.arange(12.0).reshape(3, 4)), [(3, 4)]),
        "log_softmax": (lambda a: ops.sum(ops.log_softmax(a, axis=1) * np.arange(12.0).reshape(3, 4)),
                        [(3, 4)]),
        "cross_entropy": (lambda a: ops.cross_entropy(a, soft), [(3, 4)]),
        "mean": (lambda a: ops.sum(ops.mean(a, axis=1) * ops.mean(a, axis=1)), [(3, 4)]),
        "sum": (lambda a: ops.sum(ops.sum(a, axis=0) * ops.sum(a, axis=0)), [(3, 4)]),
        "max_pool2d": (lambda a: ops.sum(ops.max_pool2d(a) * ops.max_pool2d(a)), [(2, 4, 4, 2)]),
        "pad_reflect": (lambda a: ops.sum(ops.pad_reflect(a, ((1, 2), (2, 1))) *
                                          np.arange(2 * 6 * 6 * 1.0).reshape(2, 6, 6, 1)),
                        [(2, 3, 3, 1)]),
        "conv2d": (lambda a, k: ops.sum(ops.conv2d(a, k, mask=mask) * ops.conv2d(a, k, mask=mask)),
                   [(2, 4, 4, 2), (3, 3, 2, 2)]),
        "conv2d_strided": (lambda a, k: ops.sum(ops.conv2d(a, k, stride=2) * ops.conv2d(a, k, stride=2)),
                           [(1, 5, 5, 2), (3, 3, 2, 2)]),
    }


@pytest.mark.parametrize("name", sorted(_cases()))
def test_primitive_matches_finite_differences(name):
    fn, shapes = _cases()[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(50):
        inputs = [Tensor(rng.standard_normal(s)) for s in shapes]
        worst = max(worst, *check_gradients(fn, inputs))
    assert worst < RTOL


def test_unbroadcast_in_add():
    a, b = Tensor(np.ones((3, 4))), Tensor(np.ones(4))
    _, (ga, gb) = grad(lambda x, y: ops.sum(x + y), [a, b])
    np.testing.assert_array_equal(gb.data, np.full(4, 3.0))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        tensors = {"w": rng.standard_normal((2, 3)), "scalar": np.array(4.0), "ü": np.zeros((0, 2))}
        path = tmp_path / "a.ptk"
        checkpoint.save(path, tensors, meta={"tag": "normal"})
        loaded, meta = checkpoint.load(path)
        assert meta == {"tag": "normal"}
        assert set(loaded) == set(tensors)
        for k in tensors:
            assert loaded[k].shape == tensors[k].shape
            assert np.array_equal(loaded[k], tensors[k])

    def test_byte_layout(self):
        blob = checkpoint.dumps({"ab": np.array([[1.0, 2.0]])})
        expected = (b"PTK1" + (2).to_bytes(4, "little") + b"ab" + (2).to_bytes(4, "little")
                    + (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
                    + np.array([1.0, 2.0], dtype="<f8").tobytes())
        assert blob == expected

    def test_bad_magic_and_truncation(self):
        with pytest.raises(FormatError):
            checkpoint.loads(b"NOPE")
        blob = checkpoint.dumps({"w": np.ones(3)})
        with pytest.raises(FormatError):
            checkpoint.loads(blob[:-3])
