import numpy as np
import pytest
from hypothesis import given, strategies as st

from quasiroute import tensor as tn
from quasiroute.checks import PRIMITIVE_TOL, primitive_grad_suite
from quasiroute.errors import ContractError, DomainError, ShapeError
from quasiroute.policy import aafm, wdad_delta
from quasiroute.tensor import Tensor, backward, grad_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestExamples:
    def test_sigmoid_slope(self):
        x = leaf([0.0])
        backward(tn.sigmoid(x).sum())
        assert x.grad.tolist() == [0.25]

    def test_single_logit_softmax(self):
        x = leaf([[0.3, -1.2, 2.0]])
        mask = np.array([[False, True, False]])
        p = tn.masked_softmax(x, mask)
        assert p.data.tolist() == [[0.0, 1.0, 0.0]]
        backward((p * Tensor([[1.0, 2.0, 3.0]])).sum())
        assert np.array_equal(x.grad, np.zeros((1, 3)))

    def test_instance_norm_constant(self):
        out = tn.instance_norm(Tensor(np.full((5, 3), 2.5)), axis=-2, eps=1e-5)
        assert np.array_equal(out.data, np.zeros((5, 3)))

    def test_sum_grad_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        backward(x.sum())
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_product_grad(self):
        x, y = leaf([1.0, 2.0]), leaf([3.0, -4.0])
        backward((x * y).sum())
        assert x.grad.tolist() == [3.0, -4.0]

    def test_accumulates(self):
        x = leaf([1.0, 2.0])
        backward((x * 2.0).sum())
        backward((x * 3.0).sum())
        assert x.grad.tolist() == [5.0, 5.0]

    def test_shared_node_counted_once(self):
        x = leaf([3.0])
        y = x * x
        backward((y + y).sum())
        assert x.grad.tolist() == [12.0]


class TestErrors:
    def test_non_scalar_backward(self):
        with pytest.raises(ContractError):
            backward(leaf([1.0, 2.0]) * 2.0)

    def test_shapes(self):
        with pytest.raises(ShapeError):
            leaf(np.ones((2, 3))) @ leaf(np.ones((2, 3)))
        with pytest.raises(ShapeError):
            leaf(np.ones(3)) + leaf(np.ones(4))
        with pytest.raises(ShapeError):
            tn.gather_rows(leaf(np.ones((2, 3))), [0, 1])

    def test_domains(self):
        with pytest.raises(DomainError):
            tn.log(leaf([0.0, 1.0]))
        with pytest.raises(DomainError):
            leaf([1.0]) / leaf([0.0])
        with pytest.raises(DomainError):
            tn.masked_softmax(leaf([[1.0, 2.0]]), np.array([[False, False]]))


class TestGradCheck:
    def test_quadratic(self):
        x = leaf(np.random.default_rng(0).normal(size=7))
        assert grad_check(lambda v: (v * v).sum(), [x]) <= 1e-9

    def test_aafm_block(self):
        rng = np.random.default_rng(1)
        Q, K, V, A = (leaf(rng.normal(size=s)) for s in ((4, 8), (4, 8), (4, 8), (4, 4)))
        w = rng.normal(size=(4, 8))
        assert grad_check(lambda q, k, v, a: (aafm(q, k, v, a) * w).sum(), [Q, K, V, A]) <= 1e-4

    def test_wdad_composition(self):
        rng = np.random.default_rng(2)
        lam = np.array([1, 0, 1, 0, 1, 0, 0, 1, 0, 0], dtype=float)
        up, down, g = leaf(rng.normal(size=(10, 3, 5, 2))), leaf(rng.normal(size=(10, 3, 2, 4))), \
            leaf(rng.normal(size=(10, 3, 5)))
        w = rng.normal(size=(5, 4))
        err = grad_check(lambda u, d, gg: (wdad_delta(lam, u, d, gg) * w).sum(), [up, down, g],
                         oracle_dtype=np.longdouble)
        assert err <= 1e-4

    def test_every_primitive(self):
        res = primitive_grad_suite()
        print(res.line())
        assert res.passed and res.detail["worst"] <= PRIMITIVE_TOL

    def test_restores_inputs(self):
        x = leaf([1.0, 2.0])
        grad_check(lambda v: (v * v).sum(), [x], oracle_dtype=np.longdouble)
        assert x.data.dtype == np.float64 and x.data.tolist() == [1.0, 2.0]


class TestProperties:
    @given(st.integers(1, 5), st.integers(2, 9), st.integers(0, 2**32))
    def test_softmax_simplex(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        mask = rng.random((rows, cols)) < 0.6
        mask[:, 0] = True
        p = tn.masked_softmax(Tensor(rng.normal(scale=5, size=(rows, cols))), mask).data
        assert np.all(p[~mask] == 0.0)
        assert np.all(np.abs(p.sum(axis=-1) - 1.0) <= 1e-12)

    @given(st.integers(2, 30), st.integers(1, 6), st.integers(0, 2**32))
    def test_instance_norm_moments(self, n, d, seed):
        x = np.random.default_rng(seed).normal(size=(n, d))
        y = tn.instance_norm(Tensor(x), axis=-2, eps=1e-5).data
        assert np.all(np.abs(y.mean(axis=0)) < 1e-12)
        var = x.var(axis=0)
        np.testing.assert_allclose(y.var(axis=0), var / (var + 1e-5), rtol=1e-10)


def test_checkpoint_round_trip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3) / 7, "b": np.array([1e-3, -2.0])}
    path = str(tmp_path / "ck.bin")
    tn.save_checkpoint(path, arrays, {"k": 1})
    assert tn.checkpoint_exists(path)
    back, meta = tn.load_checkpoint(path)
    assert meta == {"k": 1}
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v.astype("<f4").astype(np.float64))
    assert (tmp_path / "ck.bin").stat().st_size == 8 * 4
