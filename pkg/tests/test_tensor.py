import numpy as np
import pytest

from gazenet import ops
from gazenet.gradcheck import check_gradients
from gazenet.ops import BatchNormState
from gazenet.optim import AdamState, adam_step
from gazenet.tensor import ParameterStore, Tape, Tensor, no_grad

from gradient_cases import all_cases

CASES = all_cases()


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


@pytest.mark.parametrize("case", CASES, ids=[f"{c[0]}-{i}" for i, c in enumerate(CASES)])
def test_finite_difference(case):
    name, tol, fn, inputs = case
    errors = check_gradients(fn, inputs)
    assert max(errors.values()) < tol, (name, errors)


def test_every_op_covered_three_times():
    counts = {}
    for name, *_ in CASES:
        counts[name] = counts.get(name, 0) + 1
    assert min(counts.values()) >= 3
    for op in ("conv2d", "linear", "pool2d[max]", "upsample_nearest", "local_response_norm", "dropout"):
        assert op in counts


# ---------------------------------------------------------------- conv2d

def test_conv_scalar_kernel():
    out = ops.conv2d(t(np.ones((1, 1, 3, 3))), t(np.full((1, 1, 1, 1), 2.0)), t([0.0]))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    out = ops.conv2d(t(x), t(k), t([0.0]), padding=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv_is_cross_correlation():
    # no kernel flip: a kernel with a 1 at top-left reads the up-left neighbour
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 0, 0] = 1
    out = ops.conv2d(t(x), t(k), t([0.0]))
    np.testing.assert_array_equal(out.data[0, 0], x[0, 0, :2, :2])


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 3, 7), (1, 0, 1), (2, 0, 1), (2, 1, 3)])
def test_conv_paths_agree_with_direct_sum(stride, pad, k):
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((2, 3, 9, 11)), rng.standard_normal((4, 3, k, k)), rng.standard_normal(4)
    out = ops.conv2d(t(x), t(w), t(b), stride=stride, padding=pad).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = out.shape[2:]
    ref = np.empty_like(out)
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            ref[:, :, i, j] = np.einsum("ncij,ocij->no", patch, w) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_errors():
    with pytest.raises(ValueError, match="channel"):
        ops.conv2d(t(np.zeros((1, 2, 3, 3))), t(np.zeros((1, 3, 1, 1))), t([0.0]))
    with pytest.raises(ValueError, match="not positive"):
        ops.conv2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 3, 3))), t([0.0]))


# ---------------------------------------------------------------- batch norm

def test_batch_norm_train_normalizes():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 3, 5, 5)) * 4 + 2
    out = ops.batch_norm(t(x), t(np.ones(3)), t(np.zeros(3)), BatchNormState(), train=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_batch_norm_constant_input_gives_beta():
    out = ops.batch_norm(t(np.full((2, 1, 3, 3), 7.0)), t([1.0]), t([5.0]), BatchNormState(), train=True)
    np.testing.assert_allclose(out.data, 5.0)


def test_batch_norm_running_stats_momentum():
    x = np.arange(8.0).reshape(8, 1)
    state = BatchNormState()
    ops.batch_norm(t(x), t([1.0]), t([0.0]), state, train=True)
    # starts from (0, 1) and moves 10% towards the batch statistics
    np.testing.assert_allclose(state.running_mean, [0.35])
    np.testing.assert_allclose(state.running_var, [0.9 + 0.1 * 5.25])


def test_batch_norm_eval_requires_statistics():
    with pytest.raises(RuntimeError, match="running statistics"):
        ops.batch_norm(t(np.zeros((1, 2))), t([1.0, 1.0]), t([0.0, 0.0]), BatchNormState(), train=False)


# ---------------------------------------------------------------- pooling / upsampling

def test_pool_examples():
    x = t(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert ops.pool2d(x, "max", 2, 2).data.item() == 4.0
    assert ops.pool2d(x, "avg", 2, 2).data.item() == 2.5


def test_max_pool_tie_goes_to_first():
    x = t(np.ones((1, 1, 2, 2)), grad=True)
    with Tape() as tape:
        loss = ops.pool2d(x, "max", 2, 2).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_pool_rejects_empty_output():
    with pytest.raises(ValueError):
        ops.pool2d(t(np.zeros((1, 1, 1, 3))), "max", 2, 2)


def test_upsample_examples():
    out = ops.upsample_nearest(t(np.full((1, 1, 1, 1), 7.0)), 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 7.0))
    x = t(np.ones((1, 1, 1, 1)), grad=True)
    with Tape() as tape:
        loss = ops.upsample_nearest(x, 2, 2).sum()
    tape.backward(loss)
    assert x.grad.item() == 4.0


def test_upsample_restores_odd_sizes():
    x = t(np.zeros((1, 1, 22, 37)))
    assert ops.upsample_nearest(x, 45, 75).shape == (1, 1, 45, 75)
    with pytest.raises(ValueError, match="downsample"):
        ops.upsample_nearest(x, 11, 37)


# ---------------------------------------------------------------- linear, activations, LRN, dropout

def test_linear_examples():
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(ops.linear(t(x), t(np.eye(2)), t([0.0, 0.0])).data, x)
    np.testing.assert_array_equal(ops.linear(t(x), t(np.zeros((2, 2))), t([1.0, 2.0])).data,
                                  np.tile([1.0, 2.0], (3, 1)))
    with pytest.raises(ValueError):
        ops.linear(t(x), t(np.zeros((3, 2))), t([0.0, 0.0]))


def test_activation_values():
    np.testing.assert_array_equal(ops.activation(t([-1.0, 3.0]), "relu").data, [0.0, 3.0])
    assert ops.activation(t([0.0]), "sigmoid").data.item() == 0.5
    # the split form stays finite and exact-ish at the extremes
    s = ops.sigmoid(t([-800.0, 800.0])).data
    assert s[0] == 0.0 and s[1] == 1.0


def test_lrn_closed_forms():
    x = np.random.default_rng(1).standard_normal((1, 4, 2, 2))
    np.testing.assert_allclose(ops.local_response_norm(t(x), 3, 0.0, 0.75, 2.0).data, x / 2.0 ** 0.75)
    v = np.full((1, 1, 1, 1), 3.0)
    out = ops.local_response_norm(t(v), 1, 1e-4, 0.75, 2.0).data.item()
    assert out == pytest.approx(3.0 / (2.0 + 1e-4 * 9.0) ** 0.75, rel=1e-14)


def test_dropout_contract():
    x = t(np.ones(100000))
    assert ops.dropout(x, 0.0, True, None) is x
    assert ops.dropout(x, 0.7, False, None) is x
    out = ops.dropout(x, 0.3, True, np.random.default_rng(0)).data
    assert abs((out > 0).mean() - 0.7) < 0.01
    np.testing.assert_allclose(out[out > 0], 1 / 0.7)
    with pytest.raises(ValueError):
        ops.dropout(x, 1.0, True, np.random.default_rng(0))


# ---------------------------------------------------------------- tape

def test_backward_of_sum_is_ones():
    x = t(np.random.default_rng(0).standard_normal((3, 4)), grad=True)
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_requires_scalar():
    x = t(np.ones(3), grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_unused_parameter_gets_zero_gradient():
    store = ParameterStore()
    used = store.add("a/weight", np.ones(2))
    unused = store.add("b/weight", np.ones(3))
    with Tape() as tape:
        loss = (used * 3.0).sum()
    tape.backward(loss, store)
    np.testing.assert_array_equal(used.grad, [3.0, 3.0])
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_shared_input_gradients_accumulate():
    x = t([2.0], grad=True)
    with Tape() as tape:
        loss = (x * x + x).sum()
    tape.backward(loss)
    assert x.grad.item() == 5.0


def test_no_grad_records_nothing():
    x = t(np.ones(3), grad=True)
    with Tape() as tape:
        with no_grad():
            y = x * 2.0
        assert len(tape) == 0
        assert not y.requires_grad


def test_forward_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        ops.add(t([np.inf]), t([1.0]))


def test_store_order_and_duplicates():
    store = ParameterStore()
    store.add("z/weight", np.zeros(1))
    store.add("a/bias", np.zeros(2))
    assert store.names() == ["a/bias", "z/weight"]
    assert store.num_parameters() == 3
    with pytest.raises(KeyError):
        store.add("a/bias", np.zeros(1))


# ---------------------------------------------------------------- adam

def _store(values):
    store = ParameterStore()
    for name, v in values.items():
        store.add(name, np.asarray(v, dtype=np.float64))
    return store


def test_adam_zero_gradient_is_noop():
    store = _store({"l/weight": [1.0, -2.0]})
    store["l/weight"].grad = np.zeros(2)
    adam_step(store, AdamState(), lr=0.1, l2=0.0)
    np.testing.assert_array_equal(store["l/weight"].data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    store = _store({"l/weight": [1.0, 1.0, 1.0]})
    store["l/weight"].grad = np.array([0.5, -3.0, 1e-3])
    state = adam_step(store, AdamState(), lr=0.01)
    np.testing.assert_allclose(store["l/weight"].data, 1.0 - 0.01 * np.sign([0.5, -3.0, 1e-3]), atol=1e-7)
    assert state.t == 1


def test_adam_lr_zero_only_counts():
    store = _store({"l/weight": [1.0]})
    store["l/weight"].grad = np.array([1.0])
    state = adam_step(store, AdamState(), lr=0.0)
    assert store["l/weight"].data.item() == 1.0 and state.t == 1


def test_adam_l2_only_on_weights():
    store = _store({"l/weight": [2.0], "l/bias": [2.0], "n/gamma": [2.0]})
    for _, p in store.items():
        p.grad = np.zeros(1)
    adam_step(store, AdamState(), lr=0.1, l2=0.5)
    assert store["l/weight"].data.item() == pytest.approx(1.9)
    assert store["l/bias"].data.item() == 2.0 and store["n/gamma"].data.item() == 2.0


def test_adam_nan_names_parameter_and_leaves_state():
    store = _store({"good/weight": [1.0], "bad/weight": [1.0]})
    store["good/weight"].grad = np.array([1.0])
    store["bad/weight"].grad = np.array([np.nan])
    state = AdamState()
    with pytest.raises(FloatingPointError, match="bad/weight"):
        adam_step(store, state, lr=0.1)
    assert state.t == 0 and store["good/weight"].data.item() == 1.0


def test_adam_deterministic_over_100_steps():
    def run():
        rng = np.random.default_rng(7)
        store = _store({"l/weight": rng.standard_normal((4, 3)), "l/bias": rng.standard_normal(3)})
        state = AdamState()
        x = rng.standard_normal((5, 4))
        for _ in range(100):
            store.zero_grad()
            with Tape() as tape:
                loss = ops.mean(ops.relu(ops.linear(Tensor(x), store["l/weight"], store["l/bias"])))
            tape.backward(loss, store)
            adam_step(store, state, lr=1e-2, l2=1e-4)
        return store.state()

    a, b = run(), run()
    for name in a:
        assert a[name].tobytes() == b[name].tobytes()
