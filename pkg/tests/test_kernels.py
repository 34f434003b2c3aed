import os
import subprocess
import sys

import numpy as np
import pytest

from shapediff import _pykernels, kernels

try:
    from shapediff import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

BACKENDS = [_pykernels] + ([_ckernels] if _ckernels is not None else [])


@pytest.fixture(params=BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def impl(request):
    return request.param


def brute_knn(X, k):
    out = []
    for i, xi in enumerate(X):
        d = [(float(((xi - xj) ** 2).sum()), j) for j, xj in enumerate(X) if j != i]
        out.append([j for _, j in sorted(d)[:k]])
    return np.array(out)


def test_compiled_backend_is_active():
    assert _ckernels is not None, "extension not built"
    assert kernels.BACKEND == "cython"


def test_env_var_forces_python():
    code = "import shapediff.kernels as k; print(k.BACKEND)"
    env = {**os.environ, "SHAPEDIFF_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_knn_matches_brute_force(impl, rng):
    X = rng.normal(size=(40, 5))
    np.testing.assert_array_equal(impl.knn_indices(X, 7), brute_knn(X, 7))


def test_knn_ties_keep_lower_index(impl):
    X = np.array([[0.0], [1.0], [-1.0], [2.0]])
    assert impl.knn_indices(X, 2)[0].tolist() == [1, 2]


def test_knn_rejects_large_k(impl):
    with pytest.raises(ValueError):
        impl.knn_indices(np.zeros((3, 3)) + np.arange(3)[:, None], 3)


def test_sphere_sdf(impl):
    centers = np.array([[0.0, 0, 0], [3.0, 0, 0]])
    radii = np.array([1.0, 2.0])
    q = np.array([[0.0, 0, 0], [3.0, 0, 0], [1.5, 0, 0], [10.0, 0, 0]])
    np.testing.assert_allclose(impl.sphere_sdf(q, centers, radii), [1.0, 2.0, 0.5, -5.0])


def test_buried_mask(impl):
    centers = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    radii = np.array([1.0, 1.0])
    P = np.array([[0.0, 1.0, 0], [-1.0, 0, 0], [0.0, 0, 0]])
    owner = np.array([0, 0, 1])
    assert impl.buried_mask(P, owner, centers, radii).tolist() == [False, False, True]


def test_gaussian_overlap_pair(impl):
    a = 0.8
    d = 1.3
    val = impl.gaussian_overlap(np.zeros((1, 3)), [a], np.array([[d, 0, 0]]), [a], 2.7)
    expected = (np.pi / (2 * a)) ** 1.5 * 2.7**2 * np.exp(-a * d * d / 2)
    assert val == pytest.approx(expected, rel=1e-14)


def test_nn_mean_matches_brute_force(impl, rng):
    X = rng.normal(size=(10, 3))
    Q = rng.normal(size=(30, 3))
    dist, point = impl.nn_mean(X, Q, 4)
    for i, x in enumerate(X):
        d = np.linalg.norm(Q - x, axis=1)
        near = np.argsort(d, kind="stable")[:4]
        assert dist[i] == pytest.approx(d[near].mean(), abs=1e-12)
        np.testing.assert_allclose(point[i], Q[near].mean(0), atol=1e-12)


def test_nn_mean_rejects_large_n(impl):
    with pytest.raises(ValueError):
        impl.nn_mean(np.zeros((1, 3)), np.zeros((2, 3)), 3)


@pytest.mark.skipif(_ckernels is None, reason="extension not built")
def test_backends_agree(rng):
    X = rng.normal(size=(120, 3)) * 3
    np.testing.assert_array_equal(_ckernels.knn_indices(X, 9), _pykernels.knn_indices(X, 9))
    c = rng.normal(size=(8, 3)) * 2
    r = rng.uniform(1, 2, size=8)
    np.testing.assert_allclose(_ckernels.sphere_sdf(X, c, r), _pykernels.sphere_sdf(X, c, r), atol=1e-13)
    owner = rng.integers(0, 8, size=120)
    np.testing.assert_array_equal(_ckernels.buried_mask(X, owner, c, r), _pykernels.buried_mask(X, owner, c, r))
    a = rng.uniform(0.5, 1, size=120)
    assert _ckernels.gaussian_overlap(X, a, X[:7], a[:7], 2.7) == pytest.approx(
        _pykernels.gaussian_overlap(X, a, X[:7], a[:7], 2.7), rel=1e-12
    )
    d1, p1 = _ckernels.nn_mean(X[:20], X[20:], 5)
    d2, p2 = _pykernels.nn_mean(X[:20], X[20:], 5)
    np.testing.assert_allclose(d1, d2, atol=1e-12)
    np.testing.assert_allclose(p1, p2, atol=1e-12)
