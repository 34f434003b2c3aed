import numpy as np
import pytest
import torch

from shapediff.checks import equivariance_errors
from shapediff.geometry import random_rotation
from shapediff.predictor import (
    Predictor,
    PredictorConfig,
    build_graph,
    count_parameters,
    neighbor_index,
    predict,
    rbf_encode,
    time_encode,
)

SMALL = dict(hidden=8, n_layers=2, n_heads=2, n_neighbors=4, latent=4, n_rbf=6, time_dim=4, dtype="float64")


@pytest.fixture
def model():
    torch.manual_seed(0)
    return Predictor(PredictorConfig(**SMALL))


def inputs(n=7, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 3, dtype=torch.float64, generator=g) * 1.5
    v = torch.nn.functional.one_hot(torch.randint(0, 15, (n,), generator=g), 15).double()
    H = torch.randn(4, 3, dtype=torch.float64, generator=g)
    return x, v, H


def test_config_validation():
    with pytest.raises(ValueError):
        PredictorConfig(hidden=10, n_heads=4)


def test_output_shapes(model):
    x, v, H = inputs()
    out = predict(x, v, H, 10, model)
    assert out.x0_hat.shape == (7, 3)
    assert out.v0_hat.shape == (7, 15)
    torch.testing.assert_close(out.v0_hat.sum(-1), torch.ones(7, dtype=torch.float64))


def test_rejects_nan(model):
    x, v, H = inputs()
    x[0, 0] = float("nan")
    with pytest.raises(ValueError):
        model(x, v, H, 10)


def test_tiny_molecules(model):
    x, v, H = inputs(2)
    for n in (1, 2):
        out = model(x[:n], v[:n], H, 500)
        assert torch.isfinite(out.x0_hat).all()


def test_batched_matches_individual(model):
    xa, va, Ha = inputs(5, 1)
    xb, vb, Hb = inputs(3, 2)
    batch = torch.tensor([0] * 5 + [1] * 3)
    out = model(torch.cat([xa, xb]), torch.cat([va, vb]), torch.stack([Ha, Hb]), torch.tensor([10, 700]), batch)
    a = model(xa, va, Ha, 10)
    b = model(xb, vb, Hb, 700)
    torch.testing.assert_close(out.x0_hat, torch.cat([a.x0_hat, b.x0_hat]))
    torch.testing.assert_close(out.v0_hat, torch.cat([a.v0_hat, b.v0_hat]))


def test_permutation_equivariant(model):
    x, v, H = inputs(8, 3)
    perm = torch.from_numpy(np.random.default_rng(0).permutation(8))
    out = model(x, v, H, 42)
    outp = model(x[perm], v[perm], H, 42)
    torch.testing.assert_close(outp.x0_hat, out.x0_hat[perm])


def test_rotation_equivariance(model):
    x, v, H = inputs()
    R = torch.as_tensor(random_rotation(5).matrix)
    out = model(x, v, H, 300)
    outR = model(x @ R.T, v, H @ R.T, 300)
    torch.testing.assert_close(outR.x0_hat, out.x0_hat @ R.T, rtol=1e-9, atol=1e-12)
    torch.testing.assert_close(outR.v0_hat, out.v0_hat, rtol=1e-9, atol=1e-12)


def test_translation_of_x_with_zero_shape_is_not_assumed(model):
    # positions live in the shape-centred frame; the model is not translation invariant
    x, v, H = inputs()
    a = model(x, v, H, 5).x0_hat
    b = model(x + 1.0, v, H, 5).x0_hat
    assert not torch.allclose(a + 1.0, b)


def test_equivariance_suite_small():
    errs = equivariance_errors(n_rotations=5)
    assert max(errs.values()) < 1e-6, errs


def test_neighbor_index_padding():
    x = torch.tensor([[0.0, 0, 0], [1.0, 0, 0], [5.0, 0, 0]], dtype=torch.float64)
    batch = torch.tensor([0, 0, 1])
    idx, mask = neighbor_index(x, batch, 3)
    assert mask.tolist() == [[True, False, False], [True, False, False], [False, False, False]]
    assert idx[0, 0] == 1 and idx[2, 0] == 2
    g = build_graph(x, batch, 3)
    assert torch.all(g.dist > 0)


def test_encodings():
    d = torch.tensor([0.0, 10.0], dtype=torch.float64)
    r = rbf_encode(d, 5, 10.0)
    assert r[0, 0] == 1.0 and r[1, -1] == 1.0
    te = time_encode(torch.tensor([0, 5]), 6, torch.float64)
    assert te.shape == (2, 6)
    torch.testing.assert_close(te[0], torch.tensor([0, 0, 0, 1, 1, 1], dtype=torch.float64))


def test_count_parameters(model):
    assert count_parameters(model) == sum(p.numel() for p in model.parameters())
