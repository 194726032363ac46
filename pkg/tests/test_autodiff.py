import numpy as np
import pytest

from motok.autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    concat,
    conv1d,
    embedding,
    finite_difference_check,
    log_softmax,
    softmax,
    take_along_last,
)
from motok.nn import (
    Conv1d,
    EmbeddingTable,
    FeedForward,
    Linear,
    MultiHeadAttention,
    RMSNorm,
    TransformerBlock,
    ste_quantize,
)
from motok.rfsq import FsqSpec, RfsqSpec, rfsq_reconstruct

RNG = np.random.default_rng(42)


def check(loss_fn, params, tol=1e-3):
    err = finite_difference_check(loss_fn, params)
    assert err < tol, f"finite-difference mismatch: {err:.2e}"


class TestBasics:
    def test_identity_linear(self):
        rng = np.random.default_rng(0)
        layer = Linear(rng, 3, 3)
        layer.weight.data = np.eye(3)
        x = Tensor(rng.normal(size=(2, 3)))
        np.testing.assert_allclose(layer(x).data, x.data)

    def test_sum_of_squares_gradient(self):
        x = Parameter(np.array([1.0, -2.0, 3.0]))
        y = (x * x).sum()
        y.backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_shape_error_names_op(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((2, 3)))
        with pytest.raises(ShapeError, match="matmul"):
            a @ b

    def test_broadcast_add_gradient(self):
        a = Parameter(RNG.normal(size=(4, 3)))
        b = Parameter(RNG.normal(size=(3,)))
        check(lambda: ((a + b) ** 2).sum(), [a, b])

    def test_reuse_accumulates(self):
        x = Parameter(np.array([2.0]))
        y = x * x + x * 3.0
        y.backward(np.array([1.0]))
        np.testing.assert_allclose(x.grad, [2 * 2.0 + 3.0])


class TestPrimitiveGradients:
    @pytest.mark.parametrize("op", [
        lambda t: t.exp(), lambda t: t.sigmoid(), lambda t: t.tanh(),
        lambda t: t.silu(), lambda t: t.relu(), lambda t: (t * t + 1.0).sqrt(),
        lambda t: (t * t + 0.5).log(),
    ])
    def test_elementwise(self, op):
        p = Parameter(RNG.normal(size=(3, 4)) * 0.7)
        check(lambda: (op(p) * RNG0).sum(), [p])

    def test_matmul(self):
        a = Parameter(RNG.normal(size=(3, 4)))
        b = Parameter(RNG.normal(size=(4, 2)))
        check(lambda: ((a @ b) ** 2).sum(), [a, b])

    def test_batched_matmul(self):
        a = Parameter(RNG.normal(size=(2, 3, 4)))
        b = Parameter(RNG.normal(size=(2, 4, 3)))
        check(lambda: ((a @ b) ** 2).sum(), [a, b])

    def test_reductions_and_shapes(self):
        p = Parameter(RNG.normal(size=(2, 3, 4)))
        check(lambda: (p.mean(axis=1).reshape(8) ** 2).sum(), [p])
        check(lambda: (p.transpose(2, 0, 1).sum(axis=0) ** 2).sum(), [p])
        check(lambda: (p[:, 1:, :2] ** 2).sum(), [p])

    def test_concat(self):
        a = Parameter(RNG.normal(size=(2, 3)))
        b = Parameter(RNG.normal(size=(4, 3)))
        check(lambda: (concat([a, b], axis=0) ** 2).sum(), [a, b])

    def test_softmax_rows_normalized(self):
        x = Tensor(RNG.normal(size=(5, 7)))
        rows = softmax(x).data.sum(axis=-1)
        np.testing.assert_allclose(rows, 1.0, atol=1e-12)

    def test_log_softmax_gradient(self):
        p = Parameter(RNG.normal(size=(3, 5)))
        idx = np.array([0, 2, 4])
        check(lambda: -take_along_last(log_softmax(p), idx).mean(), [p])

    def test_embedding_gradient(self):
        table = Parameter(RNG.normal(size=(6, 3)))
        idx = np.array([0, 5, 5, 2])
        check(lambda: (embedding(table, idx) ** 2).sum(), [table])

    def test_embedding_range_check(self):
        table = Parameter(np.zeros((4, 2)))
        with pytest.raises(ShapeError):
            embedding(table, np.array([4]))

    @pytest.mark.parametrize("stride,kernel", [(1, 3), (2, 4), (4, 4)])
    def test_conv1d_gradient(self, stride, kernel):
        w = Parameter(RNG.normal(size=(kernel, 2, 3)) * 0.5)
        b = Parameter(RNG.normal(size=(3,)))
        x = Parameter(RNG.normal(size=(2, 8, 2)))
        pad = (0, kernel - stride)
        check(lambda: (conv1d(x, w, b, stride=stride, pad=pad) ** 2).sum(),
              [x, w, b])


RNG0 = np.random.default_rng(1).normal(size=(3, 4))


class TestLayers:
    def test_rmsnorm_gradient(self):
        p = Parameter(RNG.normal(size=(2, 4, 6)))
        norm = RMSNorm(6)
        check(lambda: ((norm(p)) * 0.3).sum(), [p, norm.scale])

    def test_feed_forward_gradient(self):
        rng = np.random.default_rng(2)
        ff = FeedForward(rng, 4, 6)
        x = Parameter(rng.normal(size=(1, 3, 4)))
        params = [x] + list(ff.named_parameters().values())
        check(lambda: (ff(x) ** 2).sum(), params)

    def test_attention_gradient(self):
        rng = np.random.default_rng(3)
        att = MultiHeadAttention(rng, 4, 2)
        x = Parameter(rng.normal(size=(1, 5, 4)))
        params = [x] + list(att.named_parameters().values())
        check(lambda: (att(x) ** 2).sum(), params)

    def test_transformer_block_gradient(self):
        rng = np.random.default_rng(4)
        block = TransformerBlock(rng, 4, 2, 8)
        x = Parameter(rng.normal(size=(1, 4, 4)))
        params = [x] + list(block.named_parameters().values())
        check(lambda: (block(x) ** 2).sum(), params)

    def test_bidirectional_attends_everywhere(self):
        rng = np.random.default_rng(5)
        att = MultiHeadAttention(rng, 4, 2)
        x = rng.normal(size=(1, 6, 4))
        base = att(Tensor(x)).data
        x2 = x.copy()
        x2[0, 5] += 1.0  # perturb the last position
        moved = att(Tensor(x2)).data
        assert np.abs(moved[0, 0] - base[0, 0]).max() > 1e-9

    def test_causal_blocks_future(self):
        rng = np.random.default_rng(6)
        att = MultiHeadAttention(rng, 4, 2)
        x = rng.normal(size=(1, 6, 4))
        base = att(Tensor(x), causal=True).data
        x2 = x.copy()
        x2[0, 5] += 1.0
        moved = att(Tensor(x2), causal=True).data
        np.testing.assert_allclose(moved[0, :5], base[0, :5], atol=1e-12)

    def test_causal_prefix_stays_visible(self):
        rng = np.random.default_rng(7)
        att = MultiHeadAttention(rng, 4, 2)
        x = rng.normal(size=(1, 6, 4))
        base = att(Tensor(x), causal=True, causal_from=2).data
        x2 = x.copy()
        x2[0, 1] += 1.0  # prefix position: visible to everyone
        moved = att(Tensor(x2), causal=True, causal_from=2).data
        assert np.abs(moved[0, 0] - base[0, 0]).max() > 1e-9

    def test_conv_layer_length_contract(self):
        rng = np.random.default_rng(8)
        conv = Conv1d(rng, 3, 5, kernel=4, stride=2)
        x = Tensor(rng.normal(size=(2, 16, 3)))
        assert conv(x).shape == (2, 8, 5)

    def test_embedding_table_lookup(self):
        rng = np.random.default_rng(9)
        emb = EmbeddingTable(rng, 10, 4)
        out = emb(np.array([[1, 2], [3, 4]]))
        assert out.shape == (2, 2, 4)


class TestSteQuantize:
    SPEC = RfsqSpec(base=FsqSpec(levels=(5, 5)), depth=2)

    def test_forward_matches_codec(self):
        z = RNG.normal(size=(3, 4, 2))
        out = ste_quantize(Tensor(z), self.SPEC)
        expect = rfsq_reconstruct(z.reshape(-1, 2), self.SPEC).reshape(z.shape)
        np.testing.assert_array_equal(out.data, expect)

    def test_backward_is_identity(self):
        p = Parameter(RNG.normal(size=(4, 2)))
        ste_quantize(p, self.SPEC).sum().backward()
        np.testing.assert_array_equal(p.grad, np.ones((4, 2)))

    def test_training_through_bottleneck_converges(self):
        # one-parameter model, convex target placed on a representable code
        spec = RfsqSpec(base=FsqSpec(levels=(5,)), depth=1)
        p = Parameter(np.array([[-2.0]]))
        target = np.array([[np.log(3.0)]])  # representative of code 3
        losses = []
        for _ in range(100):
            p.zero_grad()
            loss = ((ste_quantize(p, spec) - Tensor(target)) ** 2).sum()
            losses.append(loss.item())
            loss.backward()
            p.data -= 0.05 * p.grad
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-12

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            ste_quantize(Tensor(np.zeros((2, 3))), self.SPEC)
