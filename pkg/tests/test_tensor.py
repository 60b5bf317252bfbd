from decimal import Decimal, getcontext

import numpy as np
import pytest

from deliberation import checkpoint
from deliberation import tensor as T
from deliberation.gradcheck import check_gradients, numerical_grad, rel_error
from deliberation.optim import Adam, AdamState, adam_step, warmup_lr
from deliberation.tensor import ShapeError, Tensor


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# every differentiable op, as (name, builder(rng) -> (loss_fn, leaves))
def _op_cases():
    def matmul(rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        return lambda: T.tsum(T.tanh(a @ b)), [a, b]

    def batched_matmul(rng):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 2)
        return lambda: T.tsum(T.tanh(a @ b)), [a, b]

    def folded_matmul(rng):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 2)
        return lambda: T.tsum(T.tanh(a @ b)), [a, b]

    def linear(rng):
        x, w, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5), leaf(rng, 5)
        return lambda: T.tsum(T.tanh(T.linear(x, w, b))), [x, w, b]

    def add_mul_broadcast(rng):
        a, b, c = leaf(rng, 3, 4), leaf(rng, 4), leaf(rng, 3, 1)
        return lambda: T.tsum(T.tanh((a + b) * c - a * 0.5)), [a, b, c]

    def nonlinearities(rng):
        x = leaf(rng, 3, 4)
        x.data += 0.05 * np.sign(x.data)  # keep relu away from its kink
        return lambda: T.tsum(T.tanh(x) * T.sigmoid(x) + T.relu(x)), [x]

    def softmax_masked(rng):
        x, w = leaf(rng, 2, 5), Tensor(rng.normal(size=(2, 5)))
        mask = np.array([[1, 1, 0, 1, 1], [1, 0, 0, 1, 1]], bool)
        return lambda: T.tsum(T.softmax(x, mask=mask) * w), [x]

    def log_softmax(rng):
        x, w = leaf(rng, 3, 6), Tensor(rng.normal(size=(3, 6)))
        return lambda: T.tsum(T.log_softmax(x) * w), [x]

    def logsumexp(rng):
        x = leaf(rng, 3, 5)
        return lambda: T.tsum(T.tanh(T.logsumexp(x, axis=0))), [x]

    def layer_norm(rng):
        x, g, b = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
        w = Tensor(rng.normal(size=(3, 6)))
        return lambda: T.tsum(T.layer_norm(x, g, b) * w), [x, g, b]

    def structural(rng):
        x, y = leaf(rng, 2, 3, 4), leaf(rng, 2, 3, 2)
        w = Tensor(rng.normal(size=(3, 2, 6)))

        def f():
            z = T.concat([x, y], axis=-1)
            z = T.swapaxes(z, 0, 1)
            return T.tsum(T.tanh(z) * w) + T.mean(T.reshape(x, (6, 4))[1:4] * 2.0)
        return f, [x, y]

    def stack_transpose_index(rng):
        x, y = leaf(rng, 3, 4), leaf(rng, 3, 4)
        idx = np.array([0, 2, 2])

        def f():
            s = T.stack([x, y], axis=1)
            return T.tsum(T.tanh(T.transpose(s, (2, 1, 0)))) + T.tsum(T.getitem(x, idx) * 3.0)
        return f, [x, y]

    def embedding(rng):
        table = leaf(rng, 7, 3)
        ids = np.array([[1, 4, 1], [6, 0, 4]])
        return lambda: T.tsum(T.tanh(T.embedding(table, ids))), [table]

    def cross_entropy(rng):
        z = leaf(rng, 2, 4, 6)
        tg = rng.integers(0, 6, size=(2, 4))
        mask = np.array([[1, 1, 0, 1], [0, 1, 1, 0]], bool)
        return lambda: T.cross_entropy_masked(z, tg, mask), [z]

    return [matmul, batched_matmul, folded_matmul, linear, add_mul_broadcast, nonlinearities,
            softmax_masked, log_softmax, logsumexp, layer_norm, structural,
            stack_transpose_index, embedding, cross_entropy]


@pytest.mark.parametrize("case", _op_cases(), ids=lambda c: c.__name__)
@pytest.mark.parametrize("seed", range(10))
def test_op_gradients_match_finite_differences(case, seed):
    loss_fn, leaves = case(np.random.default_rng(seed))
    assert check_gradients(loss_fn, leaves) < 1e-6


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((eye @ m).data, m.data)
    np.testing.assert_array_equal((Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_gradient_of_sum_against_numerical():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ta = Tensor(a, requires_grad=True)
    T.tsum(ta @ Tensor(b)).backward()
    num = numerical_grad(lambda: float(np.sum(a @ b)), [a], 0)
    assert rel_error(ta.grad, num) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    y = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    assert y[0] == 1.0 and 0.0 <= y[1] < 1e-300
    getcontext().prec = 50
    ex = [Decimal(v).exp() for v in (1, 2, 3)]
    ref = [float(e / sum(ex)) for e in ex]
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, ref, atol=1e-12, rtol=0)


def test_softmax_rows_sum_to_one_and_reject_nan():
    rng = np.random.default_rng(0)
    y = T.softmax(Tensor(rng.normal(scale=20, size=(50, 17)))).data
    assert np.all(y >= 0)
    assert np.max(np.abs(y.sum(-1) - 1)) < 1e-9
    with pytest.raises(FloatingPointError):
        T.softmax(Tensor([0.0, np.nan]))


def test_softmax_mask_zeroes_entries():
    y = T.softmax(Tensor([[5.0, 1.0, 2.0]]), mask=np.array([[False, True, True]])).data
    assert y[0, 0] == 0.0
    assert abs(y.sum() - 1) < 1e-12


def test_layer_norm_statistics():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(loc=3, scale=5, size=(20, 16)))
    y = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=0.0).data
    assert np.max(np.abs(y.mean(-1))) < 1e-9
    assert np.max(np.abs(y.var(-1) - 1)) < 1e-6


def test_cross_entropy_uniform_is_log_v():
    loss = T.cross_entropy_masked(Tensor(np.zeros((5, 8))), [0, 3, 7, 1, 2], np.ones(5, bool))
    assert abs(loss.item() - np.log(8)) < 1e-12


def test_cross_entropy_ignores_masked_out_positions():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(4, 6))
    tg = [1, 2, 3, 4]
    mask = np.array([1, 0, 1, 0], bool)
    base = T.cross_entropy_masked(Tensor(z), tg, mask).item()
    z2 = z.copy()
    z2[[1, 3]] = rng.normal(size=(2, 6)) * 100
    assert T.cross_entropy_masked(Tensor(z2), tg, mask).item() == base


def test_cross_entropy_matches_per_position_sum():
    z = np.array([[2.0, 0.5, -1.0], [0.0, 0.0, 3.0], [1.0, -2.0, 0.25]])
    tg = [0, 1, 2]
    manual = 0.0
    for t in (0, 2):
        manual += -(z[t, tg[t]] - np.log(sum(np.exp(v) for v in z[t])))
    loss = T.cross_entropy_masked(Tensor(z), tg, np.array([1, 0, 1], bool)).item()
    assert abs(loss - manual / 2) < 1e-12


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        T.cross_entropy_masked(Tensor(np.zeros((2, 3))), [0, 1], np.zeros(2, bool))
    with pytest.raises(IndexError):
        T.cross_entropy_masked(Tensor(np.zeros((2, 3))), [0, 3], np.ones(2, bool))


def test_backward_basics():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    s = Tensor(3.0, requires_grad=True)
    (s * s).backward()
    assert s.grad == 6.0


def test_backward_accumulates_on_leaves_and_rejects_non_scalars():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = T.tsum(x * 2.0)
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [4.0, 4.0, 4.0])
    with pytest.raises(ShapeError):
        T.backward(x * 2.0)


def test_reused_input_gets_summed_gradient():
    x = Tensor([1.5, -2.0], requires_grad=True)
    T.tsum(x * x + x).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_builds_no_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.tanh(x)
    assert not y.requires_grad and y._parents == ()


def test_adam_examples():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    p = {"w": np.array(0.0)}
    adam_step(p, {"w": np.array(1.0)}, AdamState(), lr=0.1, eps=0.0)
    assert p["w"] == pytest.approx(-0.1, abs=1e-15)
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), lr=0.1)


def test_adam_descends_quadratic_bowl_after_warmup():
    rng = np.random.default_rng(0)
    target = rng.normal(size=5)
    w = Tensor(np.zeros(5), requires_grad=True)
    opt = Adam([("w", w)], lr=0.01)
    losses = []
    steps = 100
    for step in range(steps):
        opt.zero_grad()
        d = w - target
        loss = T.tsum(d * d)
        loss.backward()
        losses.append(loss.item())
        opt.step(warmup_lr(step, steps, 0.01))
    warm = int(0.1 * steps)
    assert all(b < a for a, b in zip(losses[warm:], losses[warm + 1:]))


def test_warmup_schedule():
    assert warmup_lr(0, 100, 1.0) == pytest.approx(0.1)
    assert warmup_lr(9, 100, 1.0) == 1.0
    assert warmup_lr(50, 100, 1.0) == 1.0
    assert warmup_lr(0, 5, 1.0) == 1.0


def test_gradient_clipping_caps_update_norm():
    w = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam([("w", w)], lr=1.0, clip_norm=1.0)
    w.grad = np.array([30.0, 40.0, 0.0])
    assert opt.grad_norm() == 50.0
    opt.step()
    # direction preserved; Adam's first step has unit magnitude per coordinate
    np.testing.assert_allclose(w.data, [-1.0, -1.0, 0.0], atol=1e-6)


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a.w": rng.normal(size=(3, 4)), "a.b": rng.normal(size=4), "s": np.array(2.5)}
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, arrays, meta={"kind": "test"})
    loaded, meta = checkpoint.load(path)
    assert meta == {"kind": "test"}
    for k, v in arrays.items():
        assert loaded[k].shape == v.shape
        assert loaded[k].tobytes() == v.tobytes()
    assert checkpoint.dumps(loaded, meta) == path.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    blob = checkpoint.dumps({"w": np.ones(2)})
    with pytest.raises(ValueError):
        checkpoint.loads(b"XXXXXXX\n" + blob[8:])
    with pytest.raises(ValueError):
        checkpoint.loads(blob + b"\0")
    with pytest.raises(FileNotFoundError):
        checkpoint.load(tmp_path / "missing.ckpt")
    with pytest.raises(ValueError):
        checkpoint.loads(blob[:-8])
