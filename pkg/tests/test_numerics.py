import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icrl import numerics as nx
from icrl.numerics import Tape, Tensor, backward, checkpoint, ops
from icrl.numerics.optim import OptimizerState, adam_step

from fdcheck import numeric_grad, rel_err


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_matmul_identity_and_projector():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), x).data, [[1, 2], [3, 4]])
    p = Tensor([[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(nx.matmul(p, Tensor([[5.0, 6.0], [7.0, 8.0]])).data, [[5, 6], [0, 0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    got = nx.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    np.testing.assert_allclose(got, naive_matmul(a, b), atol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(nx.DimensionError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_matmul_associative(m, k, l, n, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.normal(size=s)) for s in [(m, k), (k, l), (l, n)])
    np.testing.assert_allclose(((a @ b) @ c).data, (a @ (b @ c)).data, atol=1e-4)


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)
    y = nx.softmax(Tensor([math.log(1), math.log(2), math.log(3)], dtype=np.float64)).data
    np.testing.assert_allclose(y, [1 / 6, 2 / 6, 3 / 6], atol=1e-6)
    x = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(nx.softmax(Tensor(x + 17.0)).data, nx.softmax(Tensor(x)).data, atol=1e-6)


def test_softmax_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        nx.softmax(Tensor([0.0, np.inf]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_rows_normalised(values):
    y = nx.softmax(Tensor(np.array(values), dtype=np.float64)).data
    assert np.all(y >= 0)
    assert abs(y.sum() - 1.0) < 1e-6


def test_layer_norm_examples():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(nx.layer_norm(Tensor(np.full(4, 3.0)), g, b).data, np.zeros(4))
    out = nx.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-3)
    x = np.random.default_rng(3).normal(2.0, 5.0, size=32)
    y = nx.layer_norm(Tensor(x, dtype=np.float64), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
    assert abs(y.mean()) < 1e-6
    assert abs(y.var() - 1.0) < 1e-3


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = nx.total(nx.square(x))
    np.testing.assert_allclose(backward(loss, tape)[x], [2.0, 4.0, 6.0])


def test_backward_disconnected_param_gets_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    p = Tensor([[5.0]], requires_grad=True)
    with Tape() as tape:
        loss = nx.total(nx.square(x))
    grads = backward(loss, tape)
    np.testing.assert_array_equal(grads[p], np.zeros((1, 1)))
    assert p not in grads


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = nx.square(x)
    with pytest.raises(nx.ContractError):
        backward(y, tape)


def test_shared_subexpression_accumulates():
    x = Tensor([1.5, -0.5], requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        y = nx.mul(x, x)
        loss = nx.total(nx.add(y, y))
    np.testing.assert_allclose(backward(loss, tape)[x], 4 * x.data)


def test_no_tape_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with nx.no_tape():
            nx.square(x)
    assert tape.nodes == []


def test_tensor_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 3.0
    src = np.ones(3)
    Tensor(src)
    src[0] = 2.0  # caller's buffer stays writable


# --- finite-difference agreement for every primitive (64-bit) ---

def _check(build, shapes, seed=0, tol=1e-4, positive=False):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    w = rng.normal(size=build([Tensor(a, dtype=np.float64) for a in arrays]).shape)

    def scalar(arrs):
        with nx.default_dtype(np.float64):
            out = build([Tensor(a, dtype=np.float64) for a in arrs])
        return float((out.data * w).sum())

    params = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        loss = nx.total(nx.mul(build(params), Tensor(w, dtype=np.float64)))
    grads = backward(loss, tape)
    for i, p in enumerate(params):
        fd = numeric_grad(scalar, arrays, i)
        assert rel_err(grads[p], fd, floor=1e-6) < tol, f"operand {i}"


CAUSAL = np.triu(np.ones((3, 3), dtype=bool), k=1)

PRIMITIVES = {
    "add": (lambda t: nx.add(t[0], t[1]), [(2, 3), (2, 3)]),
    "add_bias": (lambda t: nx.add(t[0], t[1]), [(2, 3, 4), (4,)]),
    "sub": (lambda t: nx.sub(t[0], t[1]), [(3, 2), (2,)]),
    "mul": (lambda t: nx.mul(t[0], t[1]), [(2, 3), (2, 3)]),
    "scale": (lambda t: nx.scale(t[0], -2.5), [(4,)]),
    "square": (lambda t: nx.square(t[0]), [(3, 2)]),
    "matmul": (lambda t: nx.matmul(t[0], t[1]), [(3, 4), (4, 2)]),
    "matmul_batched_weight": (lambda t: nx.matmul(t[0], t[1]), [(2, 3, 4), (4, 5)]),
    "matmul_batched_both": (lambda t: nx.matmul(t[0], t[1]), [(2, 2, 3, 4), (2, 2, 4, 3)]),
    "reshape": (lambda t: nx.reshape(t[0], (3, 4)), [(2, 6)]),
    "transpose": (lambda t: nx.transpose(t[0], (1, 2, 0)), [(2, 3, 4)]),
    "softmax": (lambda t: nx.softmax(t[0]), [(3, 5)]),
    "layer_norm": (lambda t: nx.layer_norm(t[0], t[1], t[2]), [(2, 3, 6), (6,), (6,)]),
    "gelu": (lambda t: nx.gelu(t[0]), [(4, 3)]),
    "embedding": (lambda t: nx.embedding(t[0], np.array([[0, 2, 2], [1, 0, 3]])), [(4, 3)]),
    "gather_rows": (lambda t: nx.gather_rows(t[0], [0, 1, 1], [2, 0, 2]), [(2, 3, 4)]),
    "pick": (lambda t: nx.pick(t[0], [3, 0, 1]), [(3, 4)]),
    "masked_fill": (lambda t: nx.masked_fill(t[0], CAUSAL, -30.0), [(2, 3, 3)]),
    "masked_softmax": (lambda t: nx.softmax(nx.masked_fill(t[0], CAUSAL, -1e9)), [(2, 3, 3)]),
    "causal_softmax": (lambda t: nx.causal_softmax(t[0]), [(2, 4, 4)]),
    "causal_attention": (lambda t: nx.causal_attention(t[0], t[1], t[2], block=2), [(2, 5, 3)] * 3),
    "mean": (lambda t: nx.mean(t[0]), [(3, 3)]),
    "mse": (lambda t: nx.mse(t[0], np.array([1.0, -2.0, 0.5, 4.0]), [1, 0, 1, 1]), [(4,)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", [0, 1])
def test_primitive_matches_finite_differences(name, seed):
    build, shapes = PRIMITIVES[name]
    _check(build, shapes, seed=seed)


def test_relu_matches_finite_differences():
    # keep inputs away from the kink
    _check(lambda t: nx.relu(nx.sub(t[0], Tensor(np.full(3, 0.1)))), [(2, 3)], positive=True)


def test_causal_softmax_matches_masked_softmax():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 5)), dtype=np.float64)
    mask = np.triu(np.ones((5, 5), dtype=bool), k=1)
    ref = nx.softmax(nx.masked_fill(x, mask, -1e9)).numpy()
    out = nx.causal_softmax(x).numpy()
    np.testing.assert_allclose(out, ref, atol=1e-15)
    assert not out[:, mask].any()
    with pytest.raises(FloatingPointError):
        nx.causal_softmax(Tensor(np.full((3, 3), np.nan)))


@pytest.mark.parametrize("block", [1, 3, 7, 64])
def test_causal_attention_matches_composed_ops(block):
    rng = np.random.default_rng(block)
    q, k, v = (Tensor(rng.normal(size=(2, 3, 7, 4)), dtype=np.float64) for _ in range(3))
    kT = nx.transpose(k, (0, 1, 3, 2))
    ref = nx.matmul(nx.causal_softmax(nx.matmul(q, kT)), v).numpy()
    np.testing.assert_allclose(nx.causal_attention(q, k, v, block=block).numpy(), ref, atol=1e-12)


def test_broadcast_limited_to_leading_dims():
    with pytest.raises(nx.DimensionError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def test_mse_ignores_masked_entries():
    pred = Tensor([1.0, 5.0, 2.0])
    a = nx.mse(pred, [0.0, 0.0, 0.0], [1, 0, 1]).item()
    b = nx.mse(Tensor([1.0, -999.0, 2.0]), [0.0, 0.0, 0.0], [1, 0, 1]).item()
    assert a == b == 2.5


# --- optimizer ---

def test_adam_warmup_start_leaves_params():
    p = {"w": Tensor([1.0, 2.0])}
    state = OptimizerState(base_lr=1e-2, warmup_batches=10)
    assert state.effective_lr() == 0.0
    new, state2 = adam_step(p, {"w": np.array([0.5, -0.5])}, state)
    np.testing.assert_array_equal(new["w"].data, p["w"].data)
    assert state2.step_count == 1


def test_adam_full_lr_after_warmup():
    assert OptimizerState(base_lr=1e-2, warmup_batches=10, step_count=10).effective_lr() == 1e-2
    assert OptimizerState(base_lr=1e-2, warmup_batches=10, step_count=5).effective_lr() == 5e-3
    assert OptimizerState(base_lr=1e-2, warmup_batches=10, step_count=500).effective_lr() == 1e-2


@pytest.mark.parametrize("g", [0.3, -7.0])
def test_adam_first_post_warmup_step_is_lr_sign(g):
    lr = 1e-2
    params = {"p": Tensor([0.0], dtype=np.float64)}
    state = OptimizerState(base_lr=lr, warmup_batches=10)
    for _ in range(10):
        params, state = adam_step(params, {"p": np.array([g])}, state)
    before = params["p"].data[0]
    params, state = adam_step(params, {"p": np.array([g])}, state)
    delta = params["p"].data[0] - before
    assert abs(delta - (-lr * np.sign(g))) <= 0.05 * lr


def test_adam_zero_grad_only_counts():
    params = {"a": Tensor(np.ones((2, 2))), "b": Tensor([3.0])}
    state = OptimizerState(base_lr=1e-2, warmup_batches=0, step_count=4)
    new, s2 = adam_step(params, {"a": np.zeros((2, 2)), "b": np.zeros(1)}, state)
    for k in params:
        np.testing.assert_array_equal(new[k].data, params[k].data)
        assert not s2.first_moment[k].any() and not s2.second_moment[k].any()
    assert s2.step_count == 5


def test_adam_shape_mismatch():
    with pytest.raises(nx.DimensionError):
        adam_step({"a": Tensor(np.ones(2))}, {"a": np.ones(3)}, OptimizerState(base_lr=1.0))


# --- checkpoints ---

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    params = {"emb": Tensor(rng.normal(size=(4, 3)), dtype=np.float32), "b": Tensor(rng.normal(size=(7,)), dtype=np.float32)}
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, params, {"d_model": 3})
    loaded, header = checkpoint.load(path)
    assert header == {"d_model": 3}
    assert list(loaded) == ["emb", "b"]
    for k in params:
        assert loaded[k].data.tobytes() == params[k].data.tobytes()
    assert checkpoint.dumps(loaded, header) == path.read_bytes()
    assert path.read_bytes()[:4] == b"ICRL"


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOPE" + bytes(8))
    blob = checkpoint.dumps({"a": Tensor([1.0])})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:-2])
