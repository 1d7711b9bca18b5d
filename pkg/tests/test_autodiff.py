import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellgraph import autodiff as ad
from cellgraph.autodiff import Tape, Tensor, backward, constant, grad_check
from cellgraph.errors import FormatError, NonScalarLoss, ShapeMismatch


def away_from_zero(rng, shape, gap=0.05):
    """Random values with |x| >= gap, so kinks stay outside the difference step."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def primitive_cases(rng):
    """``name -> (f, x)`` where ``f`` is scalar-valued and exercises exactly one primitive."""
    B = constant(rng.normal(size=(4, 3)))
    C = constant(rng.normal(size=(3, 4)))
    P = constant(rng.uniform(0.5, 2.0, size=(3, 4)))
    probe = constant(rng.normal(size=(3, 4)))

    def dot(y, w):
        return ad.sum_all(ad.mul(y, w))

    w34 = constant(rng.normal(size=(3, 4)))
    w33 = constant(rng.normal(size=(3, 3)))
    w43 = constant(rng.normal(size=(4, 3)))
    w31 = constant(rng.normal(size=(3, 1)))
    w37 = constant(rng.normal(size=(3, 7)))
    w32 = constant(rng.normal(size=(3, 2)))
    w312 = constant(rng.normal(size=(3, 12)))
    w22 = constant(rng.normal(size=(2, 2)))
    return {
        "matmul": (lambda x: dot(x @ B, w33), rng.normal(size=(3, 4))),
        "matmul_right": (lambda x: dot(C @ x, w33), rng.normal(size=(4, 3))),
        "add": (lambda x: dot(ad.add(x, probe), w34), rng.normal(size=(3, 4))),
        "sub": (lambda x: dot(ad.sub(probe, x), w34), rng.normal(size=(3, 4))),
        "mul": (lambda x: dot(ad.mul(x, x), w34), rng.normal(size=(3, 4))),
        "divide": (lambda x: dot(ad.divide(probe, x), w34), rng.uniform(0.5, 2.0, size=(3, 4))),
        "divide_num": (lambda x: dot(ad.divide(x, P), w34), rng.normal(size=(3, 4))),
        "scale": (lambda x: dot(ad.scale(x, -2.5), w34), rng.normal(size=(3, 4))),
        "concat": (lambda x: dot(ad.concat([x, ad.mul(x, x), probe]), w312),
                   rng.normal(size=(3, 4))),
        "slice": (lambda x: dot(ad.take(x, (slice(0, 2), slice(1, 3))), w22),
                  rng.normal(size=(3, 4))),
        "transpose": (lambda x: dot(ad.transpose(x), w43), rng.normal(size=(3, 4))),
        "relu": (lambda x: dot(ad.relu(x), w34), away_from_zero(rng, (3, 4))),
        "sigmoid": (lambda x: dot(ad.sigmoid(x), w34), rng.normal(size=(3, 4))),
        "softmax": (lambda x: dot(ad.softmax_rows(x), w37), rng.normal(size=(3, 7))),
        "row_sum": (lambda x: dot(ad.row_sum(x), w31), rng.normal(size=(3, 4))),
        "row_mean": (lambda x: dot(ad.row_mean(x), w31), rng.normal(size=(3, 4))),
        "mean_all": (lambda x: ad.mean_all(ad.mul(x, x)), rng.normal(size=(3, 4))),
        "sum_all": (lambda x: ad.sum_all(ad.mul(x, x)), rng.normal(size=(3, 4))),
        "abs": (lambda x: dot(ad.absolute(x), w34), away_from_zero(rng, (3, 4))),
        "sqrt": (lambda x: dot(ad.sqrt(x), w34), rng.uniform(0.5, 3.0, size=(3, 4))),
        "huber": (lambda x: dot(ad.huber(x, 1.0), w32),
                  np.array([[0.3, -0.6], [1.7, -2.2], [0.9, -1.4]])),
    }


class TestPrimitives:
    @pytest.mark.parametrize("name", list(primitive_cases(np.random.default_rng(0))))
    def test_finite_differences(self, name):
        f, x = primitive_cases(np.random.default_rng(7))[name]
        assert grad_check(f, Tensor(x)) < 1e-4

    def test_quadratic_scalar(self):
        x = Tensor(np.array([[3.0]]), requires_grad=True)
        with Tape() as tape:
            y = ad.sum_all(ad.mul(x, x))
        backward(y, tape)
        assert x.grad[0, 0] == 6.0

    def test_softmax_rows(self, rng):
        x = rng.normal(size=(5, 6)) * 30
        s = ad.softmax_rows(constant(x)).value
        assert np.allclose(s.sum(axis=1), 1.0, atol=1e-12, rtol=0)
        shifted = ad.softmax_rows(constant(x + rng.normal(size=(5, 1)) @ np.ones((1, 6)))).value
        assert np.allclose(s, shifted, atol=1e-12, rtol=0)

    @settings(max_examples=30)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_matmul_triple_loop(self, n, k, m, seed):
        rng = np.random.default_rng(seed)
        a = rng.integers(-9, 10, size=(n, k)).astype(float)
        b = rng.integers(-9, 10, size=(k, m)).astype(float)
        want = np.zeros((n, m))
        for i in range(n):
            for j in range(m):
                for t in range(k):
                    want[i, j] += a[i, t] * b[t, j]
        assert np.array_equal((constant(a) @ constant(b)).value, want)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.add(constant(np.ones((2, 3))), constant(np.ones((3, 2))))
        with pytest.raises(ShapeMismatch):
            constant(np.ones((2, 3))) @ constant(np.ones((2, 3)))
        with pytest.raises(ShapeMismatch):
            ad.concat([constant(np.ones((2, 3))), constant(np.ones((3, 3)))])

    def test_scalar_multiplication_only_broadcast(self):
        x = constant(np.ones((2, 2)))
        assert np.array_equal((x * 3).value, 3 * np.ones((2, 2)))
        assert np.array_equal((2.0 * x).value, 2 * np.ones((2, 2)))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(x)
        backward(loss, tape)
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_dead_relu(self):
        x = Tensor(-np.ones((2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = ad.mean_all(ad.relu(x))
        backward(loss, tape)
        assert np.array_equal(x.grad, np.zeros((2, 3)))

    def test_non_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = ad.relu(x)
        with pytest.raises(NonScalarLoss):
            backward(y, tape)

    def test_unreachable_gets_zero(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        z = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with Tape() as tape:
            ad.relu(z)
            loss = ad.sum_all(x)
        backward(loss, tape, wrt=(z,))
        assert np.array_equal(z.grad, np.zeros((2, 2)))

    def test_fan_out_accumulates(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(ad.add(ad.scale(x, 2.0), ad.mul(x, x)))
        backward(loss, tape)
        assert np.allclose(x.grad, 2.0 + 2 * x.value, atol=1e-15)

    def test_three_layer_composition(self, rng):
        W1 = constant(rng.normal(size=(4, 6)))
        W2 = constant(rng.normal(size=(6, 5)))
        W3 = constant(rng.normal(size=(5, 1)))

        def f(x):
            h = ad.sigmoid(x @ W1)
            h = ad.softmax_rows(h @ W2)
            return ad.mean_all(ad.huber(h @ W3, 0.5))

        assert grad_check(f, Tensor(rng.normal(size=(3, 4)))) < 1e-4

    def test_matmul_chain(self, rng):
        B = constant(rng.normal(size=(7, 3)))
        assert grad_check(lambda x: ad.mean_all(x @ B), Tensor(rng.normal(size=(5, 7)))) < 1e-4

    def test_deterministic(self, rng):
        x0 = rng.normal(size=(4, 4))
        W = constant(rng.normal(size=(4, 4)))
        grads = []
        for _ in range(2):
            x = Tensor(x0.copy(), requires_grad=True)
            with Tape() as tape:
                loss = ad.mean_all(ad.softmax_rows(ad.relu(x @ W)))
            backward(loss, tape)
            grads.append(x.grad.tobytes())
        assert grads[0] == grads[1]

    def test_no_tape_records_nothing(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = ad.relu(x)
        assert y.requires_grad
        with Tape() as tape:
            pass
        assert len(tape) == 0

    def test_tapes_are_thread_confined(self, rng):
        x0 = rng.normal(size=(3, 3))
        out = {}

        def work(tag, c):
            x = Tensor(x0.copy(), requires_grad=True)
            with Tape() as tape:
                loss = ad.sum_all(ad.scale(ad.mul(x, x), c))
            backward(loss, tape)
            out[tag] = (len(tape), x.grad)

        threads = [threading.Thread(target=work, args=(i, float(i + 1))) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for i in range(4):
            assert out[i][0] == 3
            assert np.allclose(out[i][1], 2 * (i + 1) * x0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        tensors = {"a": rng.normal(size=(3, 4)), "b.c": rng.normal(size=(1, 5)), "s": np.array(2.5)}
        ad.save_checkpoint(tmp_path / "m.ckpt", tensors, {"k": 1})
        arrays, meta = ad.load_checkpoint(tmp_path / "m.ckpt")
        assert meta == {"k": 1}
        assert set(arrays) == set(tensors)
        for k in tensors:
            assert np.array_equal(arrays[k], tensors[k])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.ckpt").write_bytes(b"NOPE")
        with pytest.raises(FormatError):
            ad.load_checkpoint(tmp_path / "m.ckpt")

    def test_truncated(self, tmp_path, rng):
        ad.save_checkpoint(tmp_path / "m.ckpt", {"a": rng.normal(size=(3, 3))})
        data = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(data[:-5])
        with pytest.raises(FormatError):
            ad.load_checkpoint(tmp_path / "t.ckpt")
