import math

import numpy as np
import pytest

from uncgate import mapper as mp
from uncgate import scenegen as sg
from uncgate.errors import EmptyInput
from uncgate.uncertainty import cov_matrix, moments_from_matrix


def _scenes(n, seed, **kw):
    cfg = sg.BenchmarkConfig(master_seed=seed, n_train=n, n_val=n // 5, n_test=0, **kw)
    out = {"train": [], "val": []}
    for split, s in sg.benchmark_scenes(cfg):
        out[split].append(s)
    return mp.VertexBatch.from_scenes(out["train"]), mp.VertexBatch.from_scenes(out["val"])


@pytest.fixture(scope="module")
def trained():
    tr, va = _scenes(300, 11)
    res = mp.train_mapper(tr, va, mp.MapperConfig(epochs=40, seed=0))
    return res, va


def test_untrained_mapper_is_identity_with_unit_scales():
    rng = np.random.default_rng(0)
    obs, ctx = rng.normal(size=(9, 2)), rng.normal(size=(9, sg.CONTEXT_WIDTH))
    mu, cp = mp.mapper_forward(mp.init_mapper(3), obs, ctx)
    assert np.array_equal(mu, obs)
    assert np.array_equal(cp, np.zeros((9, 3)))


def test_occluded_vertices_get_larger_sigma(trained):
    res, va = trained
    _, cp = mp.mapper_forward(res.params, va.observed, va.context)
    sig = np.exp(cp[:, :2]).max(axis=1)
    occ = va.context[:, 1]
    assert sig[occ > 0.8].mean() > sig[occ < 0.2].mean()


def test_major_axis_recovers_tangent(trained):
    res, va = trained
    _, cp = mp.mapper_forward(res.params, va.observed, va.context)
    ang = mp.major_axis_angle(cov_matrix(cp))
    tangent = np.arctan2(va.context[:, 6], va.context[:, 5])
    err = mp.axis_angle_error(ang, tangent)
    assert np.mean(err < math.radians(15)) >= 0.8


def test_training_loss_mostly_decreases(trained):
    res, _ = trained
    steps = np.diff(res.train_loss)
    assert np.mean(steps <= 0) >= 0.9
    assert res.val_nll[res.best_epoch] == min(res.val_nll)


def test_single_vertex_reaches_entropy_rate():
    rng = np.random.default_rng(0)
    phi = 0.7
    R = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
    cov = R @ np.diag([0.5 ** 2, 0.05 ** 2]) @ R.T
    ctx = np.array([[10.0, 0.3, 1, 0, 0, math.cos(phi), math.sin(phi)]])

    def batch(n):
        true = np.tile([[4.0, -2.0]], (n, 1))
        obs = true + rng.multivariate_normal([0, 0], cov, n)
        return mp.VertexBatch(obs, np.tile(ctx, (n, 1)), true, np.arange(n + 1))

    tr, va = batch(4000), batch(4000)
    res = mp.train_mapper(tr, va, mp.MapperConfig(lr=3e-3, epochs=6, batch_size=64, lambda_reg=0.0,
                                                  loss_weight=1.0))
    entropy = math.log(2 * math.pi * math.e) + 0.5 * math.log(np.linalg.det(cov))
    assert abs(min(res.val_nll) - entropy) < 0.05 * abs(entropy)


def test_covariance_beats_independent_on_correlated_noise():
    wins = 0
    for seed in range(5):
        tr, va = _scenes(120, 1000 + seed)
        nll = {k: min(mp.train_mapper(tr, va, mp.MapperConfig(loss_kind=k, epochs=20, seed=seed)).val_nll)
               for k in ("gaussian_cov", "gaussian_indep")}
        wins += nll["gaussian_cov"] < nll["gaussian_indep"]
    assert wins == 5


@pytest.mark.parametrize("kind", ["gaussian_cov", "gaussian_indep", "laplace_indep"])
def test_smoke_run_serializes_and_keeps_shapes(tmp_path, kind):
    tr, va = _scenes(10, 3)
    cfg = mp.MapperConfig(loss_kind=kind, epochs=1)
    res = mp.train_mapper(tr, va, cfg)
    mp.save_mapper(tmp_path / "m.npz", res, cfg)
    params, meta = mp.load_mapper(tmp_path / "m.npz")
    assert meta["loss_kind"] == kind
    mu, cp = mp.mapper_forward(params, va.observed, va.context)
    assert mu.shape == va.observed.shape and cp.shape == (len(mu), 3)
    cov = mp.covariance_world(cp, kind)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_laplace_scale_converts_to_standard_deviation():
    cov = mp.covariance_world(np.array([[math.log(0.5), math.log(2.0), 3.0]]), "laplace_indep")
    np.testing.assert_allclose(moments_from_matrix(cov)[0], [0.5 * math.sqrt(2), 2.0 * math.sqrt(2), 0.0])


def test_empty_batch():
    with pytest.raises(EmptyInput):
        mp.VertexBatch.from_scenes([])
