import zlib
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from behaveformer import numerics as nx
from behaveformer.numerics import Tensor, gradcheck


def param(rng, *shape):
    return nx.Parameter(rng.normal(size=shape))


def weighted_sum(out, rng):
    """Scalar probe: random weights break symmetries that would hide wrong gradients."""
    w = Tensor(rng.normal(size=out.shape))
    return nx.sum_(nx.mul(out, w))


class TestForward:
    def test_affine_identity(self):
        x = Tensor([[1.0, 2.0]])
        y = nx.affine(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(y.data, [[1.0, 2.0]])

    def test_softmax_uniform(self):
        np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_conv2d_center_is_neighbourhood_sum(self):
        x = np.arange(16, dtype=float).reshape(4, 4)
        out = nx.conv2d_same(Tensor(x), Tensor(np.ones((3, 3)))).data
        # by hand: rows 0..2, cols 0..2 around cell (1, 1)
        assert out[1, 1] == 0 + 1 + 2 + 4 + 5 + 6 + 8 + 9 + 10
        assert out[2, 2] == x[1:4, 1:4].sum()
        # corner sees only its 2x2 in-bounds neighbourhood
        assert out[0, 0] == x[0:2, 0:2].sum()

    def test_conv2d_even_kernel_rejected(self):
        with pytest.raises(nx.ShapeError):
            nx.conv2d_same(Tensor(np.zeros((4, 4))), Tensor(np.ones((2, 2))))

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(nx.ShapeError, match=r"\(2, 3\) @ \(2, 3\)"):
            nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_non_finite_raises(self):
        with pytest.raises(nx.NonFiniteError):
            nx.log(Tensor([0.0]))

    def test_graph_only_recorded_for_trainable_inputs(self):
        x = Tensor(np.ones(3))
        y = nx.scale(x, 2.0)
        assert not y.requires_grad and y._parents == ()
        p = nx.Parameter(np.ones(3))
        assert nx.scale(p, 2.0)._parents == (p,)

    def test_no_grad_suppresses_recording(self):
        p = nx.Parameter(np.ones(3))
        with nx.no_grad():
            y = nx.scale(p, 2.0)
        assert not y.requires_grad


class TestBackward:
    def test_linear_sum(self):
        x = nx.Parameter(np.random.default_rng(0).normal(size=(2, 3, 4)))
        nx.backward(nx.sum_(nx.scale(x, 2.0)))
        np.testing.assert_array_equal(x.grad, np.full((2, 3, 4), 2.0))

    def test_only_leaves_receive_grad(self):
        x = nx.Parameter(np.ones(3))
        c = Tensor(np.ones(3))
        mid = nx.mul(x, c)
        nx.backward(nx.sum_(mid))
        assert x.grad is not None
        assert mid.grad is None and c.grad is None

    def test_loss_must_be_scalar(self):
        x = nx.Parameter(np.ones(3))
        with pytest.raises(nx.ShapeError):
            nx.backward(nx.scale(x, 2.0))

    def test_backward_without_graph(self):
        with pytest.raises(RuntimeError, match="no recorded graph"):
            nx.backward(Tensor(1.0))

    def test_shared_subexpression_accumulates(self):
        x = nx.Parameter([3.0])
        y = nx.mul(x, x)
        nx.backward(nx.sum_(nx.add(y, y)))
        np.testing.assert_allclose(x.grad, [12.0])

    def test_softmax_dot_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x = param(rng, 4, 5)
        w = Tensor(rng.normal(size=(4, 5)))
        assert gradcheck(lambda: nx.sum_(nx.mul(nx.softmax(x, axis=1), w)), [x]) <= 1.0

    def test_conv2d_parameter_gradient(self):
        rng = np.random.default_rng(2)
        x = param(rng, 2, 5, 4)
        k = param(rng, 3, 3)
        assert gradcheck(lambda: weighted_sum(nx.conv2d_same(x, k), np.random.default_rng(9)), [x, k]) <= 1.0


PRIMITIVES = {
    "matmul": lambda r: ([param(r, 2, 3, 4), param(r, 4, 5)], lambda a, b: nx.matmul(a, b)),
    "add": lambda r: ([param(r, 3, 4), param(r, 4)], nx.add),
    "sub": lambda r: ([param(r, 3, 4), param(r, 3, 1)], nx.sub),
    "mul": lambda r: ([param(r, 3, 4), param(r, 3, 4)], nx.mul),
    "div": lambda r: ([param(r, 3, 4), nx.Parameter(r.uniform(1, 2, size=(4,)))], nx.div),
    "scale": lambda r: ([param(r, 3, 4)], lambda a: nx.scale(a, -1.7)),
    "exp": lambda r: ([param(r, 3, 4)], nx.exp),
    "log": lambda r: ([nx.Parameter(r.uniform(0.5, 2, size=(3, 4)))], nx.log),
    "square": lambda r: ([param(r, 3, 4)], nx.square),
    "transpose": lambda r: ([param(r, 2, 3, 4)], nx.transpose),
    "permute": lambda r: ([param(r, 2, 3, 4)], lambda a: nx.permute(a, (1, 0, 2))),
    "softmax_axis0": lambda r: ([param(r, 3, 4)], lambda a: nx.softmax(a, axis=0)),
    "relu": lambda r: ([param(r, 3, 4)], nx.relu),
    "layer_norm": lambda r: ([param(r, 3, 5), param(r, 5), param(r, 5)], nx.layer_norm),
    "conv2d_k5": lambda r: ([param(r, 2, 6, 5), param(r, 5, 5)], nx.conv2d_same),
    "mean_axis": lambda r: ([param(r, 3, 4)], lambda a: nx.mean(a, axis=1)),
    "sum_axis": lambda r: ([param(r, 3, 4)], lambda a: nx.sum_(a, axis=0, keepdims=True)),
    "concat": lambda r: ([param(r, 3, 2), param(r, 3, 4)], lambda a, b: nx.concat([a, b], axis=1)),
    "reshape": lambda r: ([param(r, 3, 4)], lambda a: nx.reshape(a, (2, 6))),
    "flatten": lambda r: ([param(r, 2, 3, 4)], nx.flatten),
    "take": lambda r: ([param(r, 4, 3)], lambda a: nx.take(a, [0, 2, 2, 3])),
    "affine": lambda r: ([param(r, 3, 4), param(r, 4, 2), param(r, 2)], nx.affine),
    "euclidean": lambda r: ([param(r, 3, 4), param(r, 3, 4)], nx.euclidean),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradcheck(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    inputs, fn = PRIMITIVES[name](rng)
    probe = np.random.default_rng(5)
    w = None

    def loss():
        nonlocal w
        out = fn(*inputs)
        if w is None:
            w = Tensor(probe.normal(size=out.shape))
        return nx.sum_(nx.mul(out, w))

    assert gradcheck(loss, inputs) <= 1.0


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradcheck(training):
    rng = np.random.default_rng(3)
    x, g, b = param(rng, 4, 3, 5), param(rng, 1), param(rng, 1)
    rm, rv = np.array([0.3]), np.array([1.7])
    w = Tensor(rng.normal(size=x.shape))
    fn = lambda: nx.sum_(nx.mul(nx.batch_norm(x, g, b, rm, rv, training), w))  # noqa: E731
    assert gradcheck(fn, [x, g, b]) <= 1.0


def test_dropout_gradcheck_with_fixed_mask():
    rng = np.random.default_rng(4)
    x = param(rng, 6, 7)
    w = Tensor(rng.normal(size=x.shape))
    fn = lambda: nx.sum_(nx.mul(nx.dropout(x, 0.3, np.random.default_rng(11), True), w))  # noqa: E731
    assert gradcheck(fn, [x]) <= 1.0


class TestInvariants:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)), st.sampled_from([0, 1]))
    def test_softmax_normalised(self, x, axis):
        y = nx.softmax(Tensor(x), axis=axis).data
        assert np.all(y >= 0)
        assert np.all(np.abs(y.sum(axis=axis) - 1) < 1e-6)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5, 8), elements=st.floats(-100, 100)))
    def test_layer_norm_moments(self, x):
        y = nx.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        var = x.var(axis=1)
        assert np.all(np.abs(y.mean(axis=1)) < 1e-6)
        # eps = 1e-5 shrinks the output variance to var / (var + eps)
        np.testing.assert_allclose(y.var(axis=1), var / (var + 1e-5), atol=1e-9)

    def test_dropout_eval_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(10, 10)))
        assert nx.dropout(x, 0.5, np.random.default_rng(0), training=False) is x

    def test_dropout_train_preserves_expectation(self):
        x = Tensor(np.full(20000, 3.0))
        y = nx.dropout(x, 0.1, np.random.default_rng(0), training=True).data
        # mean of 2e4 scaled Bernoulli draws: sd = 3 * sqrt(0.1 / 0.9) / sqrt(2e4) ~ 0.007
        assert abs(y.mean() - 3.0) < 0.03
        kept = y[y != 0]
        np.testing.assert_allclose(kept, 3.0 / 0.9, rtol=1e-12)

    def test_batch_norm_running_stats_only_in_train(self):
        bn = nx.BatchNorm()
        x = Tensor(np.random.default_rng(0).normal(2.0, 3.0, size=(8, 4, 4)))
        bn.eval()
        bn(x)
        np.testing.assert_array_equal(bn.buffer("running_mean"), [0.0])
        bn.train()
        bn(x)
        np.testing.assert_allclose(bn.buffer("running_mean"), [0.1 * x.data.mean()])

    def test_eval_forward_bit_identical(self):
        rng = np.random.default_rng(0)
        lin, drop = nx.Linear(5, 3, rng), nx.Dropout(0.5, rng)
        drop.eval()
        x = Tensor(rng.normal(size=(4, 5)))
        a = drop(lin(x)).data
        b = drop(lin(x)).data
        assert a.tobytes() == b.tobytes()


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = nx.Parameter([1.0, -2.0])
        state = nx.AdamState()
        nx.adam_step([p], [np.zeros(2)], state)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert state.t == 1

    def test_first_step_hand_computed(self):
        # m = 0.1, v = 0.001; bias-corrected both 1; step = lr * 1 / (1 + 1e-8)
        p = nx.Parameter([0.0])
        state = nx.AdamState(lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8)
        nx.adam_step([p], [np.array([1.0])], state)
        np.testing.assert_allclose(p.data, [-0.001 / (1 + 1e-8)], rtol=1e-12)

    def test_default_learning_rate(self):
        assert nx.AdamState().lr == 0.001
        assert nx.Adam([nx.Parameter([0.0])]).state.lr == 0.001

    def test_step_counter_increments(self):
        p = nx.Parameter([0.0])
        state = nx.AdamState()
        for i in range(3):
            nx.adam_step([p], [np.array([0.5])], state)
            assert state.t == i + 1

    def test_shape_mismatch(self):
        with pytest.raises(nx.ShapeError):
            nx.adam_step([nx.Parameter([0.0, 1.0])], [np.zeros(3)], nx.AdamState())

    def test_minimises_quadratic(self):
        p = nx.Parameter([5.0, -3.0])
        opt = nx.Adam([p], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            nx.backward(nx.sum_(nx.square(p)))
            opt.step()
        assert np.all(np.abs(p.data) < 1e-2)


class TestModule:
    def test_state_dict_round_trip(self):
        rng = np.random.default_rng(0)
        a, b = nx.Linear(3, 2, rng), nx.Linear(3, 2, rng)
        b.load_state_dict(a.state_dict())
        np.testing.assert_array_equal(a.weight.data, b.weight.data)

    def test_load_state_dict_rejects_shape(self):
        rng = np.random.default_rng(0)
        a = nx.Linear(3, 2, rng)
        state = a.state_dict()
        state["weight"] = np.zeros((2, 2))
        with pytest.raises(nx.ShapeError):
            a.load_state_dict(state)
