"""
Per-vertex map uncertainty
==========================

Observed map vertices are noisy copies of the true lane lines.  The noise
is larger along the line than across it, and it grows where the line is
occluded.  A small mapper learns to report a 2x2 covariance for every
vertex.  The noise has zero mean, so the predicted means stay close to the
observations; the information is in the covariance.  Here we fit the
mapper briefly and look at what it says about one scene.
"""

from pathlib import Path

import numpy as np

from uncgate.mapper import (MapperConfig, VertexBatch, axis_angle_error, covariance_world, major_axis_angle,
                            mapper_forward, train_mapper)
from uncgate.render import ellipse_geometry, scene_svg
from uncgate.scenegen import BenchmarkConfig, benchmark_scenes

bench = BenchmarkConfig(n_train=200, n_val=40, n_test=40, noise_along=0.5, noise_cross=0.05)
splits = {"train": [], "val": [], "test": []}
for split, scene in benchmark_scenes(bench):
    splits[split].append(scene)

# Fifteen epochs are enough to see the covariance line up with the road.
result = train_mapper(VertexBatch.from_scenes(splits["train"]), VertexBatch.from_scenes(splits["val"]),
                      MapperConfig(epochs=15))
print("validation NLL per epoch:", np.round(result.val_nll, 3))

scene = splits["test"][0]
obs, true, ctx, _ = scene.vertices()
mu, cov_params = mapper_forward(result.params, obs, ctx)
cov = covariance_world(cov_params, "gaussian_cov")

# How far off is the predicted principal axis from the true one?
err = np.degrees(axis_angle_error(major_axis_angle(cov), major_axis_angle(scene.true_cov_matrices())))
print(f"median major-axis error on this scene: {np.median(err):.1f} deg")
print(f"mean error before / after the mapper: {np.linalg.norm(obs - true, axis=1).mean():.3f} m / "
      f"{np.linalg.norm(mu - true, axis=1).mean():.3f} m")

major, minor, angle = ellipse_geometry(cov[0])
print(f"first vertex: 1-sigma ellipse {major:.2f} m x {minor:.2f} m at {angle:.0f} deg")

# The same picture as an SVG file: true lines in grey, predicted means and
# ellipses in purple, history and ground-truth future in black.
out = Path("demo_map_uncertainty.svg")
out.write_text(scene_svg(scene, mu, cov, title="mapper output"))
print("wrote", out)
