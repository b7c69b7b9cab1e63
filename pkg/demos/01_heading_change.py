"""
Heading change as a scenario indicator
======================================

The gate never sees the road ahead.  It reads one number from the ego
vehicle's own motion: how much the average yaw rate changes between the
last two seconds and the next two.  This script builds a few synthetic
scenes and prints that number for each.
"""

import numpy as np

from uncgate.kinematics import BIN_LABELS, Trajectory, bin_delta_theta, compute_delta_theta
from uncgate.scenegen import ScenarioSpec, generate_scene

# A steady turn keeps its yaw rate, so the indicator is zero even though
# the car is turning the whole time.
steady = generate_scene(ScenarioSpec("steady_turn", speed=6.0, curvature_past=0.08, curvature_future=0.08, seed=1))
print(f"steady turn       dtheta = {steady.delta_theta_gt:.6f} rad")

# Entering a bend with curvature 0.1 at 5 m/s adds 0.5 rad/s of yaw rate,
# which over a two second window is exactly one radian.
entering = generate_scene(ScenarioSpec("straight_to_turn", speed=5.0, curvature_future=0.1, seed=1))
print(f"entering a bend   dtheta = {entering.delta_theta_gt:.6f} rad")

# The indicator is computed from positions alone.  Recomputing it from the
# stored trajectories gives the same value the generator recorded.
past = Trajectory(entering.history, entering.dt)
future = Trajectory(entering.future_gt[:5], entering.dt)
print("recomputed        dtheta = %.6f rad" % compute_delta_theta(past, future).delta_theta)

# Scenes are grouped into four bins; the first one is "consistent driving".
for dtheta in (0.0, 0.99, 1.0, 2.5, 3.7):
    print(f"{dtheta:4.2f} rad -> bin {BIN_LABELS[bin_delta_theta(dtheta)]}")

# The indicator is an absolute change, so a left bend and a right bend of
# the same curvature score the same, and it grows linearly with curvature.
for kappa in np.linspace(-0.2, 0.2, 5):
    s = generate_scene(ScenarioSpec("straight_to_turn", speed=5.0, curvature_future=float(kappa), seed=2))
    print(f"kappa {kappa:+.2f}: dtheta {s.delta_theta_gt:.3f}")
