import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import circle_points
from uncgate.errors import DegenerateTrajectory, InvalidValue, WindowMismatch
from uncgate.kinematics import (
    Trajectory,
    average_angular_velocity,
    bin_delta_theta,
    compute_delta_theta,
)


def test_straight_line_has_zero_yaw_rate():
    pts = np.stack([np.arange(5.0), np.zeros(5)], axis=1)
    assert average_angular_velocity(Trajectory(pts, 0.5)) == 0.0


def test_circular_arc_matches_speed_over_radius():
    traj = Trajectory(circle_points(10.0, 5.0, 0.5, 9), 0.5)
    assert average_angular_velocity(traj) == pytest.approx(0.5, abs=1e-6)


def test_heading_unwrap_takes_short_way_round():
    p1 = np.array([math.cos(3.0), math.sin(3.0)])
    p2 = p1 + np.array([math.cos(-3.0), math.sin(-3.0)])
    traj = Trajectory(np.array([[0.0, 0.0], p1, p2]), 1.0)
    assert average_angular_velocity(traj) == pytest.approx(2 * math.pi - 6.0, abs=1e-12)


def test_stationary_segment_inherits_heading():
    pts = np.array([[0, 0], [1, 0], [1, 0], [2, 0]], float)
    assert average_angular_velocity(Trajectory(pts, 0.5)) == 0.0


def test_fully_stationary_trajectory_is_degenerate():
    with pytest.raises(DegenerateTrajectory):
        average_angular_velocity(Trajectory(np.zeros((4, 2)), 0.5))


@pytest.mark.parametrize("pts,dt", [(np.zeros((2, 2)), 0.5), (np.zeros((3, 2)), 0.0),
                                    (np.array([[0, 0], [1, np.nan], [2, 0]]), 0.5)])
def test_trajectory_invariants(pts, dt):
    with pytest.raises(InvalidValue):
        Trajectory(pts, dt)


def _arc(omega, speed, n, dt=0.5, start_heading=0.0, start=(0.0, 0.0)):
    t = np.arange(n) * dt
    h = start_heading + omega * t
    if abs(omega) < 1e-12:
        x = speed * t * math.cos(start_heading)
        y = speed * t * math.sin(start_heading)
    else:
        x = speed / omega * (np.sin(h) - math.sin(start_heading))
        y = -speed / omega * (np.cos(h) - math.cos(start_heading))
    return np.stack([x + start[0], y + start[1]], axis=1)


def test_steady_turn_continued_gives_zero():
    whole = _arc(0.25, 5.0, 9)
    s = compute_delta_theta(Trajectory(whole[:5], 0.5), Trajectory(whole[4:], 0.5))
    assert s.delta_theta == pytest.approx(0.0, abs=1e-12)
    assert s.psi_dot_past == pytest.approx(0.25, abs=1e-9)


def test_straight_then_turn():
    past = Trajectory(_arc(0.0, 5.0, 5), 0.5)
    fut = Trajectory(_arc(0.5, 5.0, 5), 0.5)
    s = compute_delta_theta(past, fut)
    assert s.delta_theta == pytest.approx(1.0, abs=1e-9)
    assert s.theta_future == s.psi_dot_future * 2.0
    assert s.delta_theta == abs(s.theta_past - s.theta_future)


def test_opposite_turns_add():
    s = compute_delta_theta(Trajectory(_arc(0.3, 5.0, 5), 0.5), Trajectory(_arc(-0.3, 5.0, 5), 0.5))
    assert s.delta_theta == pytest.approx(1.2, abs=1e-9)


def test_window_too_short():
    with pytest.raises(WindowMismatch):
        compute_delta_theta(Trajectory(_arc(0.0, 5.0, 4), 0.5), Trajectory(_arc(0.0, 5.0, 5), 0.5))


def test_longer_windows_use_adjacent_two_seconds():
    past = Trajectory(np.concatenate([_arc(0.9, 5.0, 4)[:-1], _arc(0.0, 5.0, 5, start=_arc(0.9, 5.0, 4)[-1],
                                                                   start_heading=0.9 * 1.5)]), 0.5)
    s = compute_delta_theta(past, Trajectory(_arc(0.0, 5.0, 5), 0.5))
    assert s.psi_dot_past == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("value,expected", [(0.0, 0), (0.999, 0), (1.0, 1), (2.5, 2), (3.0, 3), (3.7, 3), (1e9, 3)])
def test_bins(value, expected):
    assert bin_delta_theta(value) == expected


@pytest.mark.parametrize("bad", [-0.1, float("nan"), float("inf")])
def test_bin_rejects_invalid(bad):
    with pytest.raises(InvalidValue):
        bin_delta_theta(bad)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(1.0, 15.0), st.floats(-math.pi, math.pi))
def test_resampling_at_double_rate_preserves_yaw_rate(omega, speed, heading):
    coarse = Trajectory(_arc(omega, speed, 5, 0.5, heading), 0.5)
    fine = Trajectory(_arc(omega, speed, 9, 0.25, heading), 0.25)
    assert abs(average_angular_velocity(coarse) - average_angular_velocity(fine)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(1.0, 15.0))
def test_mirroring_negates_rates_and_keeps_delta(w1, w2, speed):
    past, fut = _arc(w1, speed, 5), _arc(w2, speed, 5)
    flip = np.array([1.0, -1.0])
    a = compute_delta_theta(Trajectory(past, 0.5), Trajectory(fut, 0.5))
    b = compute_delta_theta(Trajectory(past * flip, 0.5), Trajectory(fut * flip, 0.5))
    assert b.psi_dot_past == pytest.approx(-a.psi_dot_past, abs=1e-12)
    assert b.psi_dot_future == pytest.approx(-a.psi_dot_future, abs=1e-12)
    assert b.delta_theta == pytest.approx(a.delta_theta, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1e6, allow_nan=False))
def test_binning_is_total(x):
    b = bin_delta_theta(x)
    assert b in (0, 1, 2, 3)
    lower = (0.0, 1.0, 2.0, 3.0)[b]
    assert x >= lower and (b == 3 or x < lower + 1.0)
