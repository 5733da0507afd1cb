import numpy as np
import pytest
from scipy.stats import wasserstein_distance

from meshanim import tensor as T
from meshanim.mesh import MeshError, TriangleMesh, icosphere, random_sphere_mesh
from meshanim.ot import (DiscreteMeasure, Normalization, exact_wasserstein_oracle, face_weights,
                         mesh_to_varifold, min_projected_gap, sample_projections, sliced_terms,
                         sliced_wasserstein, sliced_wasserstein_with_error, swd_loss, wasserstein_1d)
from oracles import central_gradient, permutation_wasserstein, quantile_wasserstein


def random_measure(rng, n, d=6):
    w = rng.uniform(0.1, 1.0, n)
    return DiscreteMeasure(rng.normal(size=(n, d)), w / w.sum())


class TestMeasures:
    def test_weights_validated(self):
        with pytest.raises(ValueError):
            DiscreteMeasure(np.zeros((2, 1)), [0.5, 0.6])
        with pytest.raises(ValueError):
            DiscreteMeasure(np.zeros((2, 1)), [1.5, -0.5])
        with pytest.raises(ValueError):
            DiscreteMeasure(np.zeros((2, 1)), [1.0])
        with pytest.raises(ValueError):
            DiscreteMeasure([[np.nan]], [1.0])

    def test_projections_unit_and_seeded(self):
        a = sample_projections(6, 100, 7)
        b = sample_projections(6, 100, 7)
        np.testing.assert_array_equal(a.directions, b.directions)
        np.testing.assert_allclose(np.linalg.norm(a.directions, axis=1), 1.0, atol=1e-15)
        assert not np.array_equal(a.directions, sample_projections(6, 100, 8).directions)
        with pytest.raises(ValueError):
            sample_projections(0, 3, 0)

    def test_projections_isotropic(self):
        d = sample_projections(3, 20000, 1).directions
        np.testing.assert_allclose(d.mean(axis=0), 0.0, atol=0.02)
        np.testing.assert_allclose(d.T @ d / len(d), np.eye(3) / 3, atol=0.01)


class TestVarifold:
    def test_single_triangle(self):
        tri = TriangleMesh([[0, 0, 0], [2, 0, 0], [0, 2, 0]], [[0, 1, 2]])
        m = mesh_to_varifold(tri, gamma=0.5)
        np.testing.assert_allclose(m.supports, [[2 / 3, 2 / 3, 0, 0, 0, 0.5]], atol=1e-15)
        np.testing.assert_array_equal(m.weights, [1.0])

    def test_area_weights(self, two_triangles):
        m = mesh_to_varifold(two_triangles)
        assert m.supports.shape == (2, 6)
        assert abs(m.weights.sum() - 1) < 1e-15

    def test_degenerate_faces_dropped(self):
        mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], [[0, 1, 2], [0, 1, 3]])
        m = mesh_to_varifold(mesh)
        assert len(m.weights) == 1
        with pytest.raises(MeshError):
            mesh_to_varifold(TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]]))

    def test_normalization_invariance(self):
        mesh = icosphere(1)
        moved = TriangleMesh(mesh.vertices * 3.0 + [1, -2, 5], mesh.faces)
        a = mesh_to_varifold(mesh, normalization=Normalization.from_mesh(mesh))
        b = mesh_to_varifold(moved, normalization=Normalization.from_mesh(moved))
        np.testing.assert_allclose(a.supports, b.supports, atol=1e-12)
        np.testing.assert_allclose(a.weights, b.weights, atol=1e-15)

    def test_face_weights(self, two_triangles):
        w = face_weights(two_triangles.vertices, two_triangles.faces)
        np.testing.assert_allclose(w.sum(), 1.0)
        assert np.all(w > 0)


class TestWasserstein1D:
    def test_permutation_oracle(self, rng):
        for n in range(1, 8):
            x, y = rng.normal(size=(2, n))
            got = wasserstein_1d(DiscreteMeasure.uniform(x), DiscreteMeasure.uniform(y))
            assert abs(got - permutation_wasserstein(x, y)) < 1e-12

    def test_weighted_quantile_oracle(self, rng):
        for _ in range(5):
            a, b = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(4))
            x, y = rng.normal(size=5), rng.normal(size=4)
            got = wasserstein_1d(DiscreteMeasure(x, a), DiscreteMeasure(y, b))
            assert abs(got - quantile_wasserstein(x, a, y, b)) < 1e-4

    def test_p1_matches_scipy(self, rng):
        a, b = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(3))
        x, y = rng.normal(size=6), rng.normal(size=3)
        got = wasserstein_1d(DiscreteMeasure(x, a), DiscreteMeasure(y, b), p=1)
        assert abs(got - wasserstein_distance(x, y, a, b)) < 1e-12

    def test_diracs(self):
        assert wasserstein_1d(DiscreteMeasure([0.0], [1.0]), DiscreteMeasure([3.0], [1.0])) == 9.0

    def test_ties(self):
        x = np.array([1.0, 1.0, 0.0, 1.0])
        y = np.array([0.5, 0.5, 2.0, 2.0])
        got = wasserstein_1d(DiscreteMeasure.uniform(x), DiscreteMeasure.uniform(y))
        assert abs(got - permutation_wasserstein(x, y)) < 1e-15

    def test_bad_p(self):
        m = DiscreteMeasure([0.0], [1.0])
        with pytest.raises(ValueError):
            wasserstein_1d(m, m, p=0.5)


class TestSliced:
    def test_exact_symmetry_and_identity(self, rng):
        proj = sample_projections(6, 50, 3)
        for _ in range(20):
            a, b = random_measure(rng, 5), random_measure(rng, 7)
            assert sliced_wasserstein(a, b, proj) == sliced_wasserstein(b, a, proj)
            assert sliced_wasserstein(a, a, proj) == 0.0

    def test_triangle_inequality(self, rng):
        proj = sample_projections(6, 50, 4)
        for _ in range(50):
            a, b, c = (random_measure(rng, int(rng.integers(2, 9))) for _ in range(3))
            d = lambda u, v: np.sqrt(sliced_wasserstein(u, v, proj))  # noqa: E731
            assert d(a, c) <= d(a, b) + d(b, c) + 1e-9

    def test_bounded_by_exact_wasserstein(self, rng):
        proj = sample_projections(6, 40, 5)
        for n in (2, 4, 6):
            a, b = (DiscreteMeasure.uniform(rng.normal(size=(n, 6))) for _ in range(2))
            assert sliced_wasserstein(a, b, proj) <= exact_wasserstein_oracle(a, b) + 1e-12

    def test_terms_are_projected_1d(self, rng):
        proj = sample_projections(6, 5, 9)
        a, b = random_measure(rng, 4), random_measure(rng, 3)
        terms = sliced_terms(a, b, proj)
        for th, t in zip(proj.directions, terms):
            ref = wasserstein_1d(DiscreteMeasure(a.supports @ th, a.weights), DiscreteMeasure(b.supports @ th, b.weights))
            assert abs(t - ref) < 1e-15

    def test_standard_error(self, rng):
        proj = sample_projections(6, 30, 2)
        a, b = random_measure(rng, 4), random_measure(rng, 4)
        est, se = sliced_wasserstein_with_error(a, b, proj)
        terms = sliced_terms(a, b, proj)
        assert est == sliced_wasserstein(a, b, proj)
        assert abs(se - terms.std(ddof=1) / np.sqrt(30)) < 1e-15

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            sliced_wasserstein(random_measure(rng, 3, 3), random_measure(rng, 3), sample_projections(6, 4, 0))

    def test_min_projected_gap(self):
        proj = sample_projections(2, 1, 0)
        gap = min_projected_gap([[0.0, 0.0], [1.0, 0.0]], proj)
        assert abs(gap - abs(proj.directions[0, 0])) < 1e-15


class TestSwdLoss:
    def test_translation_scales_quadratically(self):
        mesh = random_sphere_mesh(40, seed=2)
        proj = sample_projections(6, 64, 0)
        t = np.array([0.3, -0.1, 0.2])
        ident = Normalization.identity()

        def loss(s):
            return swd_loss(mesh.vertices + s * t, mesh.vertices, mesh.faces, gamma=0.0,
                            projections=proj, normalization=ident).item()

        base = loss(1.0)
        ref = np.mean((proj.directions[:, :3] @ t) ** 2)
        assert abs(base - ref) < 1e-12
        values = [loss(s) for s in (0.0, 0.5, 1.0, 2.0, 4.0)]
        assert values[0] == 0.0
        assert all(u < v for u, v in zip(values, values[1:]))
        np.testing.assert_allclose(values[3], 4 * base, rtol=1e-10)

    def test_sum_over_frames(self, rng):
        mesh = icosphere(1)
        target = mesh.vertices[None] + rng.normal(scale=0.05, size=(3, 42, 3))
        pred = mesh.vertices[None] + rng.normal(scale=0.05, size=(3, 42, 3))
        proj = sample_projections(6, 20, 1)
        total = swd_loss(pred, target, mesh.faces, projections=proj).item()
        parts = [swd_loss(pred[i], target[i], mesh.faces, projections=proj).item() for i in range(3)]
        np.testing.assert_allclose(total, sum(parts), rtol=1e-12)

    def test_gradient_with_pinned_weights(self, rng):
        mesh = random_sphere_mesh(12, seed=5, jitter=0.1)
        target = mesh.vertices + rng.normal(scale=0.1, size=mesh.vertices.shape)
        x0 = mesh.vertices + rng.normal(scale=0.1, size=mesh.vertices.shape)
        proj = sample_projections(6, 16, 2)
        weights = face_weights(x0, mesh.faces)
        norm = Normalization.from_frames(target[None], mesh.faces)

        def value(x):
            return swd_loss(x, target, mesh.faces, projections=proj, normalization=norm,
                            predicted_weights=weights).item()

        x = T.Tensor(x0, requires_grad=True)
        with T.Tape() as tape:
            out = swd_loss(x, target, mesh.faces, projections=proj, normalization=norm, predicted_weights=weights)
        (g,) = tape.gradient(out, [x])
        np.testing.assert_allclose(g, central_gradient(value, x0, eps=1e-7), atol=1e-6)

    def test_topology_mismatch(self):
        mesh = icosphere(0)
        with pytest.raises(MeshError):
            swd_loss(mesh.vertices, mesh.vertices[:-1], mesh.faces)
