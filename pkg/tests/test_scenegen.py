import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uncgate import scenegen as sg
from uncgate.errors import InvalidSpec, IoFailure
from uncgate.kinematics import Trajectory, bin_delta_theta, compute_delta_theta


def _dtheta(scene):
    return compute_delta_theta(Trajectory(scene.history, scene.dt),
                               Trajectory(scene.future_gt[:5], scene.dt)).delta_theta


def test_zero_noise_straight_scene():
    s = sg.generate_scene(sg.ScenarioSpec("straight", 5.0, noise_along=0.0, noise_cross=0.0, seed=3))
    obs, true, _, _ = s.vertices()
    assert np.array_equal(obs, true)
    assert abs(s.delta_theta_gt) < 1e-12  # exact up to the random world rotation


def test_steady_turn_has_zero_delta_theta():
    s = sg.generate_scene(sg.ScenarioSpec("steady_turn", 5.0, 0.05, 0.05, seed=1))
    assert abs(s.delta_theta_gt) < 1e-6
    summ = compute_delta_theta(Trajectory(s.history, s.dt), Trajectory(s.future_gt[:5], s.dt))
    assert summ.psi_dot_past == pytest.approx(0.25, abs=1e-9)


def test_straight_to_turn_delta_theta():
    s = sg.generate_scene(sg.ScenarioSpec("straight_to_turn", 5.0, 0.0, 0.1, seed=1))
    assert s.delta_theta_gt == pytest.approx(1.0, abs=1e-6)


def test_windows_and_speed():
    s = sg.generate_scene(sg.ScenarioSpec("straight", 6.0, seed=0))
    assert s.history.shape == (sg.N_HISTORY, 2) and s.future_gt.shape == (sg.N_FUTURE, 2)
    steps = np.linalg.norm(np.diff(np.vstack([s.history, s.future_gt]), axis=0), axis=1)
    np.testing.assert_allclose(steps, 3.0, atol=1e-9)


@pytest.mark.parametrize("kw", [dict(kind="drift"), dict(speed=0.0), dict(noise_along=-1.0),
                                dict(curvature_past=0.5), dict(vertices_per_element=1),
                                dict(occlusion_profile=(0.5,) * 3)])
def test_invalid_specs(kw):
    base = dict(kind="straight", speed=5.0)
    base.update(kw)
    with pytest.raises(InvalidSpec):
        sg.generate_scene(sg.ScenarioSpec(**base))


def test_major_axis_follows_tangent():
    s = sg.generate_scene(sg.ScenarioSpec("straight_to_turn", 5.0, 0.0, 0.15, seed=2))
    for e in s.elements:
        seg = np.gradient(e.true_pts, axis=0)
        tangent = seg / np.linalg.norm(seg, axis=1, keepdims=True)
        for (s1, s2, rho), t, ctx_t in zip(e.true_cov, tangent, e.context[:, 5:7]):
            cov = np.array([[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]])
            evals, evecs = np.linalg.eigh(cov)
            major = evecs[:, 1]
            assert abs(abs(major @ ctx_t) - 1.0) < 1e-12  # parallel to the stored tangent
            assert abs(abs(major @ t)) > 0.99  # and to the finite-difference tangent


def test_empirical_noise_covariance_matches_truth():
    occ = tuple(np.linspace(0, 1, 60))
    draws, cov = [], None
    for seed in range(10_000):
        s = sg.generate_scene(sg.ScenarioSpec("steady_turn", 5.0, 0.05, 0.05, occlusion_profile=occ,
                                              seed=seed, random_pose=False))
        obs, true, _, tc = s.vertices()
        draws.append(obs[25] - true[25])
        cov = s.true_cov_matrices()[25]
    emp = np.cov(np.array(draws).T)
    assert np.linalg.norm(emp - cov) / np.linalg.norm(cov) < 0.05


def test_correlated_normals_have_unit_marginals():
    z = sg.correlated_normals(np.random.default_rng(0), 2000, 20, 4.0).reshape(2000, 20, 2)
    assert np.allclose(z.std(axis=(0, 2)), 1.0, atol=0.05)
    lag1 = np.mean(z[:, :-1, 0] * z[:, 1:, 0])
    assert lag1 == pytest.approx(np.exp(-0.5 / 16), abs=0.05)


def test_json_round_trip():
    s = sg.generate_scene(sg.ScenarioSpec("lane_change", 7.0, 0.08, -0.08, seed=4), "x")
    doc = s.to_json()
    back = sg.Scene.from_json(json.loads(json.dumps(doc)))
    assert back.to_json() == doc
    assert doc["schema_version"] == sg.SCHEMA_VERSION


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(sg.KINDS), st.floats(2.0, 12.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0),
       st.integers(0, 10**6))
def test_stored_delta_theta_is_recomputable(kind, v, wp, wf, seed):
    s = sg.generate_scene(sg.ScenarioSpec(kind, v, wp / v, wf / v, seed=seed))
    assert abs(_dtheta(s) - s.delta_theta_gt) < 1e-9
    assert np.all(np.isfinite(s.vertices()[0]))


@settings(max_examples=30, deadline=None)
@given(st.floats(2.0, 12.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_heading_is_continuous_through_the_blend(v, wp, wf):
    t = np.linspace(-2, 3, 2001)
    _, head = sg.ego_path(t, v, wp, wf)
    assert np.max(np.abs(np.diff(head))) <= max(abs(wp), abs(wf)) * (t[1] - t[0]) + 1e-12


@pytest.mark.parametrize("n", [1000, 200, 37, 1])
def test_quota_counts_are_exact(n):
    c = sg.quota_counts(n, (52, 28, 12, 8))
    assert sum(c) == n
    assert all(abs(ci - n * q / 100) < 1 for ci, q in zip(c, (52, 28, 12, 8)))


def _small_cfg(**kw):
    return sg.BenchmarkConfig(master_seed=5, n_train=50, n_val=10, n_test=25, **kw)


def test_benchmark_manifest_and_determinism(tmp_path):
    cfg = sg.BenchmarkConfig(master_seed=1, n_train=1000, n_val=0, n_test=0)
    m = sg.generate_benchmark(cfg, tmp_path / "a")
    assert m["splits"]["train"]["bin_counts"] == [520, 280, 120, 80]
    sg.generate_benchmark(cfg, tmp_path / "b")
    for p in sorted((tmp_path / "a").rglob("*.json")):
        assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_manifest_bins_match_recomputed_kinematics(tmp_path):
    sg.generate_benchmark(_small_cfg(), tmp_path)
    manifest = sg.load_manifest(tmp_path)
    for split in ("train", "val", "test"):
        scenes = sg.load_split(tmp_path, split)
        hist = [0] * 4
        for s in scenes:
            hist[bin_delta_theta(_dtheta(s))] += 1
        assert hist == manifest["splits"][split]["bin_counts"]


def test_scene_seeds_partition_by_global_index():
    scenes = [s for _, s in sg.benchmark_scenes(_small_cfg())]
    assert [s.meta["seed"] for s in scenes] == list(range(5, 5 + 85))


def test_missing_manifest(tmp_path):
    with pytest.raises(IoFailure):
        sg.load_manifest(tmp_path)


def test_bad_quotas():
    with pytest.raises(InvalidSpec):
        list(sg.benchmark_scenes(sg.BenchmarkConfig(bin_quotas=(50, 50, 10, 0))))
