import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lsepkit.data import ingest_dataset
from lsepkit.errors import ValidationError
from lsepkit.evalkit import (
    FrechetStats,
    extract_features,
    frechet_distance,
    pca_project,
    probe_grid,
    stats_from_features,
    train_linear_probe,
)
from lsepkit.evalkit.desknet import fid_proxy, load_desk_encoder, save_desk_encoder, train_desk_encoder

from conftest import perturb_adaln


# extract_features

def test_constant_inputs_give_constant_features(tiny_model):
    perturb_adaln(tiny_model)
    imgs = torch.full((5, 3, 8, 8), 0.3)
    f = extract_features(tiny_model, imgs, 2, t=0.0)
    assert f.shape == (5, 16)
    assert np.allclose(f, f[0:1], atol=1e-6)


def test_feature_extraction_deterministic_and_frozen(tiny_model):
    perturb_adaln(tiny_model)
    imgs = torch.randn(6, 3, 8, 8)
    before = [p.clone() for p in tiny_model.parameters()]
    a = extract_features(tiny_model, imgs, [1, 3], t=0.4, seed=7)
    b = extract_features(tiny_model, imgs, [1, 3], t=0.4, seed=7, batch_size=2)
    for k in (1, 3):
        assert np.array_equal(a[k], b[k]) or np.allclose(a[k], b[k], atol=1e-6)
    assert all(torch.equal(p, q) for p, q in zip(before, tiny_model.parameters()))
    assert all(p.grad is None for p in tiny_model.parameters())


def test_pooling_none_shape(tiny_model):
    f = extract_features(tiny_model, torch.randn(4, 3, 8, 8), 1, t=0.1, pooling="none")
    assert f.shape == (4, tiny_model.config.num_tokens, 16)


def test_layer_out_of_range_rejected(tiny_model):
    with pytest.raises(ValidationError):
        extract_features(tiny_model, torch.randn(2, 3, 8, 8), 4, t=0.1)
    with pytest.raises(ValidationError):
        extract_features(tiny_model, torch.randn(2, 3, 8, 8), 0, t=0.1)


# linear probe

def test_probe_separable_blobs():
    rng = np.random.default_rng(0)
    centre = np.array([5.0] * 4 + [-5.0] * 4)  # 10 sigma apart, sign pattern survives LayerNorm
    x = np.concatenate([rng.normal(size=(500, 8)) + centre, rng.normal(size=(500, 8)) - centre])
    y = np.array([0] * 500 + [1] * 500)
    assert train_linear_probe(x, y, split=0.3, epochs=30, seed=0).accuracy >= 0.99


def test_probe_pure_noise_is_chance():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5000, 32))
    y = rng.integers(0, 10, 5000)
    fit = train_linear_probe(x, y, split=(np.arange(4000), np.arange(4000, 5000)), epochs=10, seed=0)
    assert 0.07 <= fit.accuracy <= 0.13


def test_probe_repeatable():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(300, 6)), rng.integers(0, 3, 300)
    a = train_linear_probe(x, y, epochs=5, seed=4)
    b = train_linear_probe(x.copy(), y.copy(), epochs=5, seed=4)
    assert a.accuracy == b.accuracy and a.final_loss == b.final_loss


def test_probe_rejects_single_class_and_overlap():
    x = np.random.default_rng(0).normal(size=(20, 4))
    with pytest.raises(ValidationError):
        train_linear_probe(x, np.zeros(20, dtype=int))
    with pytest.raises(ValidationError):
        train_linear_probe(x, np.arange(20) % 2, split=(np.arange(15), np.arange(10, 20)))


def test_probe_grid_report(tiny_model):
    imgs, labels = torch.randn(40, 3, 8, 8), np.arange(40) % 4
    rep = probe_grid(tiny_model, imgs, labels, layers=[1, 2], times=(0.1, 0.7), epochs=2)
    assert {(r["layer"], r["t"]) for r in rep.records} == {(1, 0.1), (2, 0.1), (1, 0.7), (2, 0.7)}
    assert all(0 <= r["accuracy"] <= 1 for r in rep.records)
    assert rep.train_size + rep.val_size == 40
    rows = [json.loads(line) for line in rep.to_jsonl().splitlines()]
    assert len(rows) == 4 and rows[0]["epochs"] == 2
    assert rep.to_table().splitlines()[0] == "layer,t,accuracy"


# Fréchet distance

def _stats(mu, var):
    return FrechetStats(np.array([mu]), np.array([[var]]), count=100)


def test_frechet_closed_forms():
    rng = np.random.default_rng(0)
    s = stats_from_features(rng.normal(size=(200, 5)))
    assert abs(frechet_distance(s, s)) <= 1e-8
    assert frechet_distance(_stats(0.0, 2.0), _stats(3.0, 2.0)) == pytest.approx(9.0, abs=1e-10)
    assert frechet_distance(_stats(0.0, 1.0), _stats(0.0, 4.0)) == pytest.approx(1.0, abs=1e-10)


def test_frechet_symmetric_random_pairs():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = stats_from_features(rng.normal(size=(100, 6)) * rng.uniform(0.5, 2))
        b = stats_from_features(rng.normal(size=(100, 6)) + rng.normal(size=6))
        assert abs(frechet_distance(a, b) - frechet_distance(b, a)) <= 1e-8


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 5), st.floats(0.1, 5))
def test_frechet_scalar_property(m1, m2, v1, v2):
    expected = (m1 - m2) ** 2 + (np.sqrt(v1) - np.sqrt(v2)) ** 2
    got = frechet_distance(_stats(m1, v1), _stats(m2, v2))
    assert got == pytest.approx(expected, abs=1e-8, rel=1e-8) and got >= 0


def test_frechet_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        frechet_distance(stats_from_features(np.ones((5, 2)) + np.arange(5)[:, None]),
                         stats_from_features(np.random.default_rng(0).normal(size=(5, 3))))
    with pytest.raises(ValidationError):
        FrechetStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), 10)
    with pytest.raises(ValidationError):
        FrechetStats(np.zeros(1), np.eye(1), 1)


# PCA

def test_pca_subspace_total_ratio():
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.normal(size=(20, 3)))[0].T
    x = rng.normal(size=(500, 3)) @ basis
    res = pca_project(x, 3)
    assert abs(res.explained_variance_ratio.sum() - 1.0) <= 1e-6
    assert not res.degenerate
    assert np.all(np.diff(res.explained_variance_ratio) <= 0)


def test_pca_isotropic_ratios():
    x = np.random.default_rng(1).normal(size=(10_000, 50))
    r = pca_project(x, 3).explained_variance_ratio
    assert np.all((r >= 0.015) & (r <= 0.025))


def test_pca_rotation_preserves_projected_distances():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(200, 10)) * np.linspace(3, 0.5, 10)
    q = np.linalg.qr(rng.normal(size=(10, 10)))[0]
    a, b = pca_project(x, 3).projected, pca_project(x @ q, 3).projected
    da = np.linalg.norm(a[:, None] - a[None], axis=-1)
    db = np.linalg.norm(b[:, None] - b[None], axis=-1)
    assert np.max(np.abs(da - db)) <= 1e-5


def test_pca_degenerate_flag():
    x = np.outer(np.random.default_rng(0).normal(size=50), np.ones(6))
    res = pca_project(x, 3)
    assert res.degenerate and np.all(res.components[1:] == 0)
    with pytest.raises(ValidationError):
        pca_project(np.ones((3, 4)), 3)


# FID proxy

def test_fid_proxy_monotone_under_noise(shapes_npz, tmp_path):
    data = ingest_dataset(shapes_npz, image_size=16)
    net = train_desk_encoder(data.images, data.labels, data.num_classes, epochs=1, width=16)
    path = tmp_path / "desk.safetensors"
    save_desk_encoder(net, path)
    net = load_desk_encoder(path)
    real = data.images[:100]
    other = data.images[100:]
    g = torch.Generator().manual_seed(0)
    noise = torch.randn(other.shape, generator=g)
    d = [fid_proxy(net, real, other + s * noise) for s in (0.1, 0.4, 1.0)]
    assert d[0] < d[1] < d[2]
