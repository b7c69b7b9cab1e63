"""Average yaw rates and the heading-change indicator of an ego trajectory."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTrajectory, InvalidValue, WindowMismatch

STATIONARY_EPS = 1e-4  # metres; below this a segment has no defined heading
DEFAULT_WINDOW = 2.0  # seconds
BIN_EDGES = (1.0, 2.0, 3.0)  # radians
N_BINS = len(BIN_EDGES) + 1
BIN_LABELS = ("[0,1)", "[1,2)", "[2,3)", "[3,inf)")


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled 2-D waypoints."""

    points: np.ndarray
    dt: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InvalidValue(f"points must be (N, 2), got {pts.shape}")
        if len(pts) < 3:
            raise InvalidValue("a trajectory needs at least 3 points")
        if not self.dt > 0:
            raise InvalidValue(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(pts)):
            raise InvalidValue("non-finite trajectory coordinates")
        object.__setattr__(self, "points", pts)

    @property
    def duration(self) -> float:
        return (len(self.points) - 1) * self.dt


@dataclass(frozen=True)
class KinematicSummary:
    psi_dot_past: float
    psi_dot_future: float
    theta_past: float
    theta_future: float
    delta_theta: float


def segment_headings(points, eps: float = STATIONARY_EPS) -> np.ndarray:
    """Unwrapped headings of consecutive displacements.

    A segment shorter than ``eps`` inherits the previous heading (or the
    next defined one at the start).
    """
    disp = np.diff(np.asarray(points, dtype=np.float64), axis=0)
    length = np.hypot(disp[:, 0], disp[:, 1])
    ok = length >= eps
    if not ok.any():
        raise DegenerateTrajectory("trajectory is stationary; heading undefined")
    raw = np.arctan2(disp[:, 1], disp[:, 0])
    idx = np.where(ok, np.arange(len(raw)), -1)
    idx = np.maximum.accumulate(idx)
    idx[idx < 0] = np.argmax(ok)
    return np.unwrap(raw[idx])


def average_angular_velocity(traj: Trajectory, eps: float = STATIONARY_EPS) -> float:
    """Mean yaw rate in rad/s.

    Heading change from the first to the last segment divided by the time
    between their midpoints, which is exact for constant-curvature motion.
    """
    h = segment_headings(traj.points, eps)
    return float((h[-1] - h[0]) / ((len(h) - 1) * traj.dt))


def compute_delta_theta(past: Trajectory, future: Trajectory, window: float = DEFAULT_WINDOW,
                        eps: float = STATIONARY_EPS) -> KinematicSummary:
    """Yaw rates over the two windows and the absolute rotation difference.

    Each trajectory must span at least ``window`` seconds; the last
    ``window`` seconds of ``past`` and the first ``window`` seconds of
    ``future`` are used.
    """
    for name, t in (("past", past), ("future", future)):
        if t.duration + 1e-9 < window:
            raise WindowMismatch(f"{name} spans {t.duration:.3f}s < window {window}s")
    n_past = int(round(window / past.dt)) + 1
    n_fut = int(round(window / future.dt)) + 1
    p = Trajectory(past.points[-n_past:], past.dt)
    f = Trajectory(future.points[:n_fut], future.dt)
    w1 = average_angular_velocity(p, eps)
    w2 = average_angular_velocity(f, eps)
    th1, th2 = w1 * window, w2 * window
    return KinematicSummary(w1, w2, th1, th2, abs(th1 - th2))


def bin_delta_theta(delta_theta: float) -> int:
    """Interval index of a heading change: [0,1) -> 0, ..., [3,inf) -> 3 (radians)."""
    if not math.isfinite(delta_theta) or delta_theta < 0:
        raise InvalidValue(f"delta_theta must be finite and non-negative, got {delta_theta}")
    for i, edge in enumerate(BIN_EDGES):
        if delta_theta < edge:
            return i
    return N_BINS - 1
