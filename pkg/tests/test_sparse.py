import numpy as np
import pytest

from meshanim.ottk import FormatError, decode, encode, load_sparse, load_tensor, save_sparse, save_tensor
from meshanim.sparse import SparseMatrix


class TestSparseInvariants:
    def test_valid_construction(self):
        s = SparseMatrix(2, 3, [0, 2, 3], [0, 2, 1], [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(s.to_dense(), [[1, 0, 2], [0, 3, 0]])
        assert s.nnz == 3

    @pytest.mark.parametrize("offsets,indices,values", [
        ([0, 2], [0, 1], [1.0, 1.0]),  # wrong offsets length
        ([0, 2, 1], [0, 1], [1.0, 1.0]),  # decreasing offsets
        ([0, 1, 3], [0, 1], [1.0, 1.0]),  # last offset != nnz
        ([0, 2, 2], [1, 0], [1.0, 1.0]),  # unsorted row
        ([0, 2, 2], [1, 1], [1.0, 1.0]),  # duplicate column
        ([0, 1, 1], [3], [1.0]),  # column out of range
    ])
    def test_invalid(self, offsets, indices, values):
        with pytest.raises(ValueError):
            SparseMatrix(2, 3, offsets, indices, values)

    def test_from_coo_sums_duplicates(self):
        s = SparseMatrix.from_coo([0, 0, 1], [1, 1, 0], [1.0, 2.0, 5.0], (2, 2))
        np.testing.assert_array_equal(s.to_dense(), [[0, 3], [5, 0]])

    def test_transpose_and_symmetry(self, rng):
        a = rng.normal(size=(5, 4)) * (rng.uniform(size=(5, 4)) < 0.5)
        s = SparseMatrix.from_dense(a)
        np.testing.assert_array_equal(s.transpose().to_dense(), a.T)
        sym = SparseMatrix.from_dense(a @ a.T)
        assert sym.is_symmetric(atol=1e-14)
        assert not SparseMatrix.from_dense([[0.0, 1.0], [0.0, 0.0]]).is_symmetric()

    def test_linear_combination_and_row_sums(self, rng):
        a = rng.normal(size=(4, 4))
        s = SparseMatrix.from_dense(a).linear_combination(2.0, SparseMatrix.identity(4), -1.0)
        np.testing.assert_allclose(s.to_dense(), 2 * a - np.eye(4), atol=1e-15)
        np.testing.assert_allclose(s.row_sums(), (2 * a - np.eye(4)).sum(axis=1), atol=1e-14)

    def test_dot_and_transposed(self, rng):
        a = rng.normal(size=(6, 3))
        s = SparseMatrix.from_dense(a)
        x = rng.normal(size=(3, 2))
        y = rng.normal(size=(6, 2))
        np.testing.assert_allclose(s.dot(x), a @ x, atol=1e-14)
        np.testing.assert_allclose(s.dot_transposed(y), a.T @ y, atol=1e-14)


class TestOTTK:
    def test_layout_bytes(self):
        buf = encode(np.array([[1.0, 2.0]]))
        assert buf[:4] == b"OTTK"
        assert buf[4:8] == (1).to_bytes(4, "little")
        assert buf[8] == 1 and buf[9] == 2
        assert int.from_bytes(buf[10:18], "little") == 1
        assert int.from_bytes(buf[18:26], "little") == 2
        assert np.frombuffer(buf[26:], "<f8").tolist() == [1.0, 2.0]

    @pytest.mark.parametrize("shape", [(), (0,), (5,), (2, 3), (2, 1, 4)])
    def test_round_trip(self, shape, rng, tmp_path):
        a = rng.normal(size=shape)
        save_tensor(a, tmp_path / "a.ottk")
        b = load_tensor(tmp_path / "a.ottk")
        assert b.shape == a.shape and np.array_equal(a, b)

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XTTK" + b[4:],
        lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
        lambda b: b[:8] + b"\x02" + b[9:],
        lambda b: b[:-1],
        lambda b: b[:6],
    ])
    def test_corrupt(self, mutate):
        with pytest.raises(FormatError):
            decode(mutate(encode(np.ones((2, 2)))))

    def test_sparse_round_trip(self, rng, tmp_path):
        a = rng.normal(size=(7, 5)) * (rng.uniform(size=(7, 5)) < 0.4)
        rec = save_sparse(SparseMatrix.from_dense(a), tmp_path, "m")
        assert rec == {"stem": "m", "n_rows": 7, "n_cols": 5}
        np.testing.assert_array_equal(load_sparse(tmp_path, rec).to_dense(), a)
