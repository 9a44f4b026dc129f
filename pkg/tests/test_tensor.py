"""Autodiff engine: values, gradients, Adam, checkpoints."""

import numpy as np
import pytest

from statewalk import tensor as T
from statewalk.tensor import (NonFiniteError, Parameter, ShapeError, Tape,
                              Tensor, adam_step, load_tensors, save_tensors)


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of scalar f at array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = f()
        x[i] = orig - h
        dn = f()
        x[i] = orig
        g[i] = (up - dn) / (2 * h)
        it.iternext()
    return g


def assert_close_grad(analytic, numeric, rel=1e-5, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    worst = np.max(np.abs(analytic - numeric) / denom)
    assert worst < rel, f"gradient mismatch: worst relative error {worst}"


# ----------------------------------------------------------------------
# primitives against finite differences


UNARY_OPS = [
    (T.neg, lambda rng: rng.normal(size=(3, 4))),
    (T.sigmoid, lambda rng: rng.normal(size=(3, 4))),
    (T.tanh, lambda rng: rng.normal(size=(3, 4))),
    (T.exp, lambda rng: rng.normal(size=(3, 4))),
    (T.log, lambda rng: rng.uniform(0.2, 3.0, size=(3, 4))),
    (T.softmax, lambda rng: rng.normal(size=(3, 4))),
    (T.log_softmax, lambda rng: rng.normal(size=(3, 4))),
    (T.sum_all, lambda rng: rng.normal(size=(3, 4))),
    (T.mean_all, lambda rng: rng.normal(size=(3, 4))),
    (T.transpose, lambda rng: rng.normal(size=(3, 4))),
]


@pytest.mark.parametrize("op,maker", UNARY_OPS, ids=lambda o: getattr(o, "__name__", ""))
def test_unary_gradients_match_finite_differences(op, maker):
    rng = np.random.default_rng(0)
    for trial in range(10):
        x = maker(rng)
        w = rng.normal(size=op(Tensor(x.copy())).data.shape)

        def run(xs=x):
            t = Tensor(xs)
            with Tape() as tape:
                out = op(t)
                loss = T.sum_all(T.mul(out, Tensor(w)))
                tape.backward(loss)
            return t

        t = run()
        analytic = t.grad

        def value():
            return float((op(Tensor(x)).data * w).sum())

        assert_close_grad(analytic, numeric_grad(value, x))


def test_binary_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    cases = [
        (T.add, (3, 4), (3, 4)),
        (T.add, (3, 4), (4,)),      # broadcast
        (T.sub, (3, 4), (3, 4)),
        (T.sub, (3, 4), (1, 4)),
        (T.mul, (3, 4), (3, 4)),
        (T.mul, (3, 4), (4,)),
        (T.matmul, (3, 5), (5, 2)),
    ]
    for op, sa, sb in cases:
        for trial in range(5):
            a = rng.normal(size=sa)
            b = rng.normal(size=sb)
            w = rng.normal(size=op(Tensor(a), Tensor(b)).data.shape)
            ta, tb = Tensor(a.copy()), Tensor(b.copy())
            with Tape() as tape:
                out = op(ta, tb)
                tape.backward(T.sum_all(T.mul(out, Tensor(w))))

            def value():
                return float((op(Tensor(a), Tensor(b)).data * w).sum())

            assert_close_grad(ta.grad, numeric_grad(value, a))
            assert_close_grad(tb.grad, numeric_grad(value, b))


def test_composite_graph_gradient():
    # three-layer composition with fan-out: gradients accumulate at reuse
    rng = np.random.default_rng(2)
    for trial in range(10):
        x = rng.normal(size=(2, 3))
        w1 = rng.normal(size=(3, 3))
        w2 = rng.normal(size=(3, 2))

        def forward():
            h = T.tanh(T.matmul(Tensor(x), Tensor(w1)))
            u = T.sigmoid(T.matmul(h, Tensor(w2)))
            both = T.concat([u, u], axis=-1)   # reuse forces accumulation
            return T.mean_all(T.mul(both, both))

        tx, tw1, tw2 = Tensor(x.copy()), Tensor(w1.copy()), Tensor(w2.copy())
        with Tape() as tape:
            h = T.tanh(T.matmul(tx, tw1))
            u = T.sigmoid(T.matmul(h, tw2))
            both = T.concat([u, u], axis=-1)
            tape.backward(T.mean_all(T.mul(both, both)))

        # numeric_grad perturbs the closed-over array in place, so forward()
        # sees each probe point
        for holder, arr in ((tx, x), (tw1, w1), (tw2, w2)):
            assert_close_grad(
                holder.grad,
                numeric_grad(lambda: forward().item(), arr),
                rel=1e-4,
            )


def test_scale_and_lookup_gradients():
    rng = np.random.default_rng(3)
    table = rng.normal(size=(5, 3))
    idx = np.array([0, 2, 2, 4])
    tt = Tensor(table.copy())
    w = rng.normal(size=(4, 3))
    with Tape() as tape:
        out = T.scale(T.lookup(tt, idx), 2.5)
        tape.backward(T.sum_all(T.mul(out, Tensor(w))))

    def value():
        return float((2.5 * Tensor(table).data[idx] * w).sum())

    assert_close_grad(tt.grad, numeric_grad(value, table))
    # duplicated index 2 accumulates both rows
    assert np.allclose(tt.grad[2], 2.5 * (w[1] + w[2]))


# ----------------------------------------------------------------------
# values and invariants


def test_softmax_rows_are_distributions():
    rng = np.random.default_rng(4)
    x = rng.normal(scale=10, size=(50, 7))
    y = T.softmax(Tensor(x)).data
    assert np.all(y > 0)
    assert np.max(np.abs(y.sum(axis=-1) - 1.0)) < 1e-12


def test_softmax_extreme_logits_stable():
    x = np.array([[1000.0, 0.0, -1000.0], [-1000.0, -1000.0, -1000.0]])
    y = T.softmax(Tensor(x)).data
    assert np.all(np.isfinite(y))
    assert abs(y[0, 0] - 1.0) < 1e-12
    assert np.allclose(y[1], 1 / 3)


def test_log_softmax_matches_log_of_softmax():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 4))
    a = T.log_softmax(Tensor(x)).data
    b = np.log(T.softmax(Tensor(x)).data)
    assert np.max(np.abs(a - b)) < 1e-12


def test_sigmoid_matches_closed_form_both_signs():
    x = np.array([-30.0, -1.0, 0.0, 1.0, 30.0])
    y = T.sigmoid(Tensor(x)).data
    assert np.allclose(y, 1.0 / (1.0 + np.exp(-x)))


def test_ops_outside_tape_do_not_record():
    t = Tensor(np.ones((2, 2)))
    out = T.tanh(t)
    assert out.grad is None
    with Tape() as tape:
        pass
    assert tape.nodes == []


def test_nested_tapes_restore_outer():
    with Tape() as outer:
        with Tape() as inner:
            T.neg(Tensor([1.0]))
        T.neg(Tensor([1.0]))
    assert len(inner.nodes) == 1
    assert len(outer.nodes) == 1


# ----------------------------------------------------------------------
# errors


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError):
        T.transpose(Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 2))).item()


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_non_scalar_backward_rejected():
    with Tape() as tape:
        out = T.neg(Tensor(np.ones(3)))
        with pytest.raises(ShapeError):
            tape.backward(out)


def test_log_of_non_positive_rejected():
    with pytest.raises(NonFiniteError):
        T.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(NonFiniteError):
        T.log(Tensor(np.array([-1.0])))


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_overflow_is_caught():
    with pytest.raises(NonFiniteError):
        T.exp(Tensor(np.array([1000.0])))


def test_lookup_range_checked():
    with pytest.raises(IndexError):
        T.lookup(Tensor(np.ones((3, 2))), np.array([0, 3]))


# ----------------------------------------------------------------------
# Adam


def adam_reference(data, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(data)
    v = np.zeros_like(data)
    x = data.copy()
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(6)
    data = rng.normal(size=(4, 3))
    grads = [rng.normal(size=(4, 3)) for _ in range(5)]
    p = Parameter(data.copy(), "w")
    for g in grads:
        p.grad[...] = g
        adam_step([p], lr=0.01)
    assert np.allclose(p.data, adam_reference(data, grads, 0.01), atol=1e-12)
    assert p.step_count == 5
    assert np.all(p.grad == 0.0)   # cleared after the step


def test_adam_first_step_is_signlike():
    # bias correction makes the first update ~= lr * sign(grad)
    p = Parameter(np.zeros(3), "w")
    p.grad[...] = np.array([5.0, -0.01, 2.0])
    adam_step([p], lr=0.1)
    assert np.allclose(p.data, -0.1 * np.sign([5.0, -0.01, 2.0]), atol=1e-3)


def test_adam_rejects_non_finite_gradient():
    p = Parameter(np.zeros(2), "bad")
    p.grad[...] = np.array([1.0, np.nan])
    with pytest.raises(NonFiniteError) as exc:
        adam_step([p], lr=0.1)
    assert "bad" in str(exc.value)


def test_adam_deterministic():
    def run():
        p = Parameter(np.ones(3), "w")
        for i in range(3):
            p.grad[...] = np.array([1.0, -2.0, 3.0]) * (i + 1)
            adam_step([p], lr=0.05)
        return p.data.copy()

    assert np.array_equal(run(), run())


# ----------------------------------------------------------------------
# checkpoint format


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    blobs = {
        "a": rng.normal(size=(3, 4)),
        "b": rng.normal(size=(7,)),
        "scalarish": np.array(2.5),
    }
    path = str(tmp_path / "weights.bin")
    save_tensors(path, blobs)
    back = load_tensors(path)
    assert set(back) == set(blobs)
    for name in blobs:
        assert np.array_equal(back[name], np.asarray(blobs[name], dtype=np.float64))


def test_checkpoint_layout(tmp_path):
    import json
    import struct

    path = str(tmp_path / "weights.bin")
    save_tensors(path, {"w": np.arange(6, dtype=np.float64).reshape(2, 3)})
    raw = open(path, "rb").read()
    assert raw[:8] == b"STWK0001"
    (mlen,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + mlen])
    assert manifest["tensors"][0]["name"] == "w"
    assert manifest["tensors"][0]["shape"] == [2, 3]
    payload = raw[16 + mlen:]
    assert np.array_equal(np.frombuffer(payload, dtype="<f8"), np.arange(6.0))


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = str(tmp_path / "junk.bin")
    with open(path, "wb") as f:
        f.write(b"NOTRIGHT" + b"\x00" * 32)
    with pytest.raises(ValueError):
        load_tensors(path)
