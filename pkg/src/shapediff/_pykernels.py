"""Numpy implementations of the geometric kernels.

These mirror ``_ckernels.pyx`` exactly (same signatures, same tie-breaking)
and are used whenever the compiled module is unavailable.
"""

import numpy as np


def knn_indices(X, k):
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = X.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of points ({n})")
    d2 = np.empty((n, n))
    for start in range(0, n, 64):
        diff = X[start:start + 64, None, :] - X[None, :, :]
        d2[start:start + 64] = (diff * diff).sum(-1)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def sphere_sdf(Q, centers, radii):
    Q = np.asarray(Q, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    dist = np.sqrt(((Q[:, None, :] - centers[None, :, :]) ** 2).sum(-1))
    return -(dist - radii[None, :]).min(axis=1)


def buried_mask(P, owner, centers, radii):
    P = np.asarray(P, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    dist = np.sqrt(((P[:, None, :] - centers[None, :, :]) ** 2).sum(-1))
    inside = dist < radii[None, :]
    inside[np.arange(P.shape[0]), np.asarray(owner)] = False
    return inside.any(axis=1)


def gaussian_overlap(XA, alphaA, XB, alphaB, p):
    XA = np.asarray(XA, dtype=np.float64)
    XB = np.asarray(XB, dtype=np.float64)
    aA = np.asarray(alphaA, dtype=np.float64)[:, None]
    aB = np.asarray(alphaB, dtype=np.float64)[None, :]
    d2 = ((XA[:, None, :] - XB[None, :, :]) ** 2).sum(-1)
    s = aA + aB
    terms = (np.pi / s) ** 1.5 * p * p * np.exp(-aA * aB * d2 / s)
    return float(terms.sum())


def nn_mean(X, Q, n):
    X = np.asarray(X, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if n > Q.shape[0]:
        raise ValueError(f"n={n} exceeds the number of guidance points ({Q.shape[0]})")
    dist = np.sqrt(((X[:, None, :] - Q[None, :, :]) ** 2).sum(-1))
    order = np.argsort(dist, axis=1, kind="stable")[:, :n]
    near = np.take_along_axis(dist, order, axis=1)
    return near.mean(axis=1), Q[order].mean(axis=1)
