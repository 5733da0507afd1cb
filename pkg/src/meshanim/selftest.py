"""Built-in oracle checks run by ``meshanim selftest``.

Each check compares a library routine with an independent reference
(dense linear algebra, brute-force enumeration, finite differences) and
returns ``(name, passed, detail)``.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import seeding
from . import tensor as T


def _random_graph_laplacian(rng, n):
    while True:
        a = np.triu((rng.uniform(size=(n, n)) < 0.5).astype(float), 1)
        a = a + a.T
        d = a.sum(axis=1)
        if np.all(d > 0):
            break
    dinv = 1.0 / np.sqrt(d)
    return np.eye(n) - dinv[:, None] * a * dinv[None, :]


def check_spectral(rng, graphs):
    from .sparse import SparseMatrix
    from .spectral import ChebConvLayer, cheb_conv, scale_laplacian

    worst = 0.0
    for _ in range(graphs):
        n = int(rng.integers(3, 11))
        k = int(rng.integers(1, 7))
        lap = _random_graph_laplacian(rng, n)
        lam = float(np.linalg.eigvalsh(lap).max())
        layer = ChebConvLayer.init(2, 3, k, rng)
        x = rng.standard_normal((n, 2))
        got = cheb_conv(scale_laplacian(SparseMatrix.from_dense(lap), lam), x, layer).data
        w, u = np.linalg.eigh(2.0 * lap / lam - np.eye(n))
        w = np.clip(w, -1.0, 1.0)
        ref = np.zeros((n, 3)) + layer.bias.data
        for j in range(k):
            tk = u @ np.diag(np.cos(j * np.arccos(w))) @ u.T
            ref += tk @ x @ layer.theta.data[j]
        worst = max(worst, float(np.abs(got - ref).max()))
    return "spectral-oracle", bool(worst < 1e-8), f"max abs error {worst:.2e} over {graphs} graphs"


def check_ot(rng, pairs):
    from .ot import DiscreteMeasure, wasserstein_1d

    worst = 0.0
    for _ in range(pairs):
        n = int(rng.integers(1, 8))
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        ref = min(np.mean((x - y[list(perm)]) ** 2) for perm in itertools.permutations(range(n)))
        got = wasserstein_1d(DiscreteMeasure.uniform(x), DiscreteMeasure.uniform(y))
        worst = max(worst, abs(got - ref))
    return "ot-oracle", bool(worst < 1e-10), f"max abs error {worst:.2e} over {pairs} pairs"


def check_metric(rng, triples):
    from .ot import DiscreteMeasure, sample_projections, sliced_wasserstein

    proj = sample_projections(6, 50, int(rng.integers(2**31)))
    ok, worst_tri = True, -np.inf
    for _ in range(triples):
        ms = []
        for _ in range(3):
            n = int(rng.integers(2, 9))
            w = rng.uniform(0.1, 1.0, n)
            ms.append(DiscreteMeasure(rng.standard_normal((n, 6)), w / w.sum()))
        a, b, c = ms
        ab, ba = sliced_wasserstein(a, b, proj), sliced_wasserstein(b, a, proj)
        ok &= ab == ba and sliced_wasserstein(a, a, proj) == 0.0
        d_ab, d_bc, d_ac = (np.sqrt(sliced_wasserstein(u, v, proj)) for u, v in ((a, b), (b, c), (a, c)))
        worst_tri = max(worst_tri, d_ac - d_ab - d_bc)
    ok &= worst_tri <= 1e-9
    return "metric-axioms", bool(ok), f"symmetry/identity exact, worst triangle slack {worst_tri:.2e}"


def check_gradients(rng):
    x0 = rng.standard_normal((4, 3))
    w = T.Tensor(rng.standard_normal((3, 2)))

    def f(x):
        h = T.relu(T.matmul(x, w) + 0.3)
        return T.tsum(T.norm(T.cross(x, T.Tensor(np.ones((4, 3)))), axis=1)) + T.tsum(T.square(h))

    err = T.finite_diff_check(f, x0)
    return "autodiff", bool(err < 1e-6), f"max relative error {err:.2e}"


def check_resampling(rng, meshes):
    from .mesh import random_sphere_mesh
    from .resample import barycentric_upsample, qem_decimate

    worst_sum, max_nnz, ok_down = 0.0, 0, True
    for i in range(meshes):
        mesh = random_sphere_mesh(int(rng.integers(30, 80)), seed=int(rng.integers(2**31)), jitter=0.05)
        coarse, down, _ = qem_decimate(mesh, max(4, mesh.n_vertices // 4))
        up = barycentric_upsample(mesh, coarse)
        sp = up.to_scipy()
        worst_sum = max(worst_sum, float(np.abs(np.asarray(sp.sum(axis=1)).ravel() - 1).max()))
        max_nnz = max(max_nnz, int(np.diff(sp.indptr).max()))
        dd = down.to_dense()
        ok_down &= bool(np.all((dd == 0) | (dd == 1)) and np.all(dd.sum(axis=1) == 1))
    ok = worst_sum < 1e-9 and max_nnz <= 3 and ok_down
    return "resampling", bool(ok), f"row-sum error {worst_sum:.1e}, max entries {max_nnz}, one-hot down {ok_down}"


def check_losses():
    from .model import loss_reconstruction, loss_velocity

    pred = np.zeros((1, 1, 3))
    target = np.array([[[3.0, 4.0, 0.0]]])
    lr = loss_reconstruction(T.Tensor(pred), target).item()
    seq = np.random.default_rng(0).standard_normal((3, 5, 3))
    lv = loss_velocity(T.Tensor(seq + 1.5), seq).item()
    ok = lr == 5.0 and lv < 1e-12
    return "loss-units", bool(ok), f"reconstruction {lr}, velocity of constant offset {lv:.1e}"


def run_all(seed=0, quick=True):
    scale = 1 if quick else 5
    checks = [
        lambda r: check_gradients(r),
        lambda r: check_spectral(r, 4 * scale if quick else 20),
        lambda r: check_ot(r, 20 * scale if quick else 100),
        lambda r: check_metric(r, 40 * scale if quick else 200),
        lambda r: check_resampling(r, 5 * scale if quick else 50),
        lambda r: check_losses(),
    ]
    results = []
    for i, check in enumerate(checks):
        try:
            results.append(check(seeding.rng(seed, "selftest", i)))
        except Exception as exc:  # a crashing check is a failed check
            results.append((f"check-{i}", False, f"{type(exc).__name__}: {exc}"))
    return results
