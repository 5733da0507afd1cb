import numpy as np
import pytest

from meshanim import tensor as T
from meshanim.mesh import icosphere, normalized_laplacian
from meshanim.sparse import SparseMatrix
from meshanim.spectral import ChebConvLayer, cheb_conv, cheb_poly_scalar, chebyshev_basis, scale_laplacian
from oracles import central_gradient, chebyshev_dense, jacobi_eigh


def random_laplacian(rng, n):
    while True:
        a = np.triu((rng.uniform(size=(n, n)) < 0.5).astype(float), 1)
        a = a + a.T
        d = a.sum(axis=1)
        if np.all(d > 0):
            break
    dinv = 1 / np.sqrt(d)
    return np.eye(n) - dinv[:, None] * a * dinv[None]


class TestScaling:
    def test_spectrum_in_unit_interval(self):
        lap = normalized_laplacian(icosphere(1))
        lam = jacobi_eigh(lap.to_dense())[0].max()
        w = np.linalg.eigvalsh(scale_laplacian(lap, lam).to_dense())
        assert w.min() >= -1 - 1e-12 and w.max() <= 1 + 1e-12
        np.testing.assert_allclose(w.max(), 1.0, atol=1e-12)

    def test_lambda_two_formula(self):
        lap = SparseMatrix.from_dense(np.array([[1.0, -1.0], [-1.0, 1.0]]))
        np.testing.assert_array_equal(scale_laplacian(lap, 2.0).to_dense(), [[0.0, -1.0], [-1.0, 0.0]])

    @pytest.mark.parametrize("lam", [0.0, -1.0])
    def test_non_positive_lambda(self, lam):
        with pytest.raises(ValueError):
            scale_laplacian(SparseMatrix.identity(3), lam)


class TestChebyshevPolynomials:
    @pytest.mark.parametrize("k", range(8))
    def test_cosine_identity(self, k):
        for x in np.linspace(-1, 1, 17):
            assert abs(cheb_poly_scalar(k, x) - np.cos(k * np.arccos(x))) < 1e-12

    def test_known_values(self):
        assert cheb_poly_scalar(0, 0.3) == 1.0
        assert cheb_poly_scalar(1, 0.3) == 0.3
        assert cheb_poly_scalar(2, 0.5) == -0.5
        assert cheb_poly_scalar(3, 0.5) == -1.0

    def test_negative_order(self):
        with pytest.raises(ValueError):
            cheb_poly_scalar(-1, 0.0)

    def test_basis_matches_polynomial_of_matrix(self, rng):
        lap = random_laplacian(rng, 6)
        ls = scale_laplacian(SparseMatrix.from_dense(lap), np.linalg.eigvalsh(lap).max())
        x = rng.normal(size=(6, 2))
        terms = chebyshev_basis(ls, T.Tensor(x), 5)
        w, u = np.linalg.eigh(ls.to_dense())
        for k, t in enumerate(terms):
            ref = u @ np.diag([cheb_poly_scalar(k, v) for v in w]) @ u.T @ x
            np.testing.assert_allclose(t.data, ref, atol=1e-12)


class TestChebConv:
    def test_order_one_is_dense_layer(self, rng):
        layer = ChebConvLayer.init(3, 4, 1, rng)
        x = rng.normal(size=(5, 3))
        out = cheb_conv(SparseMatrix.from_dense(random_laplacian(rng, 5)), x, layer)
        np.testing.assert_allclose(out.data, x @ layer.theta.data[0] + layer.bias.data, atol=1e-14)

    def test_order_two_zero_laplacian(self, rng):
        layer = ChebConvLayer.init(2, 3, 2, rng)
        x = rng.normal(size=(4, 2))
        zero = SparseMatrix.from_dense(np.zeros((4, 4)))
        np.testing.assert_allclose(cheb_conv(zero, x, layer).data, x @ layer.theta.data[0], atol=1e-14)

    def test_dense_oracle(self, rng):
        for _ in range(10):
            n = int(rng.integers(3, 11))
            lap = random_laplacian(rng, n)
            lam = jacobi_eigh(lap)[0].max()
            ls = scale_laplacian(SparseMatrix.from_dense(lap), lam)
            layer = ChebConvLayer.init(2, 3, 6, rng)
            layer.bias = T.Tensor(rng.normal(size=3))
            x = rng.normal(size=(n, 2))
            ref = chebyshev_dense(ls.to_dense(), x, layer.theta.data, layer.bias.data)
            np.testing.assert_allclose(cheb_conv(ls, x, layer).data, ref, atol=1e-8)

    def test_linear_in_input(self, rng):
        ls = scale_laplacian(SparseMatrix.from_dense(random_laplacian(rng, 7)), 2.0)
        layer = ChebConvLayer.init(2, 2, 6, rng)
        a, b = rng.normal(size=(2, 7, 2))
        f = lambda x: cheb_conv(ls, x, layer).data - layer.bias.data  # noqa: E731
        np.testing.assert_allclose(f(2 * a - 3 * b), 2 * f(a) - 3 * f(b), atol=1e-12)

    def test_permutation_equivariance(self, rng):
        lap = random_laplacian(rng, 8)
        perm = rng.permutation(8)
        p = np.eye(8)[perm]
        layer = ChebConvLayer.init(3, 2, 6, rng)
        x = rng.normal(size=(8, 3))
        out = cheb_conv(SparseMatrix.from_dense(lap), x, layer).data
        out_p = cheb_conv(SparseMatrix.from_dense(p @ lap @ p.T), p @ x, layer).data
        np.testing.assert_allclose(out_p, p @ out, atol=1e-12)

    def test_batched_matches_loop(self, rng):
        ls = scale_laplacian(SparseMatrix.from_dense(random_laplacian(rng, 5)), 2.0)
        layer = ChebConvLayer.init(2, 3, 4, rng)
        x = rng.normal(size=(3, 5, 2))
        batched = cheb_conv(ls, x, layer).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], cheb_conv(ls, x[i], layer).data, atol=1e-14)

    def test_shape_mismatch(self, rng):
        layer = ChebConvLayer.init(2, 3, 3, rng)
        with pytest.raises(ValueError):
            cheb_conv(SparseMatrix.identity(4), np.ones((4, 3)), layer)
        with pytest.raises(ValueError):
            cheb_conv(SparseMatrix.identity(4), np.ones((5, 2)), layer)

    def test_gradients(self, rng):
        ls = scale_laplacian(SparseMatrix.from_dense(random_laplacian(rng, 5)), 2.0)
        layer = ChebConvLayer.init(2, 2, 6, rng)
        x0 = rng.normal(size=(5, 2))
        th0 = layer.theta.data.copy()
        w = rng.normal(size=(5, 2))

        def value(x, th):
            return float(np.sum(w * cheb_conv(ls, x, ChebConvLayer(T.Tensor(th), layer.bias)).data))

        x = T.Tensor(x0, requires_grad=True)
        th = T.Tensor(th0, requires_grad=True)
        with T.Tape() as tape:
            out = T.tsum(T.mul(cheb_conv(ls, x, ChebConvLayer(th, layer.bias)), w))
        gx, gth = tape.gradient(out, [x, th])
        np.testing.assert_allclose(gx, central_gradient(lambda v: value(v, th0), x0), atol=1e-7)
        np.testing.assert_allclose(gth, central_gradient(lambda v: value(x0, v), th0), atol=1e-7)
