"""Trajectory kinematics and lane-map geometry."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np


class InvalidInputError(ValueError):
    """Raised when a geometric input violates its preconditions."""


class MissingMapError(ValueError):
    """Raised when a map query is made against an empty map."""


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    return w if np.ndim(w) else float(w)


@dataclass
class Trajectory:
    points: np.ndarray
    t0: float = 0.0
    dt: float = 0.1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if len(self.points) < 2:
            raise InvalidInputError("trajectory needs at least 2 points")
        if not self.dt > 0:
            raise InvalidInputError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(self.points)):
            raise InvalidInputError("trajectory has non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.points))


@dataclass
class KinematicProfile:
    speed: np.ndarray
    accel: np.ndarray
    heading: np.ndarray
    yaw_rate: np.ndarray
    dt: float = 0.1

    def __len__(self) -> int:
        return len(self.speed)


@dataclass
class LaneCenterline:
    id: int
    polyline: np.ndarray

    def __post_init__(self):
        self.polyline = np.asarray(self.polyline, dtype=float).reshape(-1, 2)
        if len(self.polyline) < 2:
            raise InvalidInputError(f"lane {self.id}: polyline needs >= 2 vertices")
        if np.any(np.all(np.diff(self.polyline, axis=0) == 0.0, axis=1)):
            raise InvalidInputError(f"lane {self.id}: repeated consecutive vertex")


@dataclass
class MapGraph:
    centerlines: List[LaneCenterline] = field(default_factory=list)

    def __post_init__(self):
        ids = [c.id for c in self.centerlines]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("duplicate lane ids in map")

    def __len__(self) -> int:
        return len(self.centerlines)

    @property
    def empty(self) -> bool:
        return not self.centerlines


@dataclass
class IntersectionEvent:
    point: Tuple[float, float]
    arrival_a: float
    arrival_b: float
    min_separation: float


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average along axis 0; the window shrinks at the ends."""
    if window == 1:
        return np.array(x, dtype=float)
    x = np.asarray(x, dtype=float)
    half = window // 2
    n = len(x)
    csum = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
    lo = np.clip(np.arange(n) - half, 0, n)
    hi = np.clip(np.arange(n) + half + 1, 0, n)
    count = (hi - lo).reshape((-1,) + (1,) * (x.ndim - 1))
    return (csum[hi] - csum[lo]) / count


def compute_kinematics(
    traj: Trajectory, smooth_window: int = 5, heading_min_speed: float = 0.5
) -> KinematicProfile:
    """Estimate speed, acceleration, heading and yaw rate of a trajectory.

    Velocity comes from central differences (one-sided at the ends) and is
    smoothed with a centered moving average; acceleration and yaw rate are
    differentiated the same way from the smoothed speed and unwrapped heading.
    Heading is held constant while the speed is below ``heading_min_speed``
    so that jitter on a stopped agent does not read as turning.
    """
    if len(traj) < 2:
        raise InvalidInputError("trajectory shorter than 2 points")
    if smooth_window < 1 or smooth_window % 2 == 0:
        raise InvalidInputError(f"smooth_window must be odd and >= 1, got {smooth_window}")
    dt = traj.dt
    vel = np.gradient(traj.points, dt, axis=0)
    vel = moving_average(vel, smooth_window)
    speed = np.hypot(vel[:, 0], vel[:, 1])

    raw_heading = np.arctan2(vel[:, 1], vel[:, 0])
    moving = speed >= heading_min_speed
    heading = np.zeros_like(speed)
    if moving.any():
        idx = np.where(moving, np.arange(len(speed)), -1)
        idx = np.maximum.accumulate(idx)
        first = int(np.argmax(moving))
        idx[idx < 0] = first
        heading = raw_heading[idx]
    unwrapped = np.unwrap(heading)
    if len(speed) >= 2:
        yaw_rate = moving_average(np.gradient(unwrapped, dt), smooth_window)
        accel = moving_average(np.gradient(speed, dt), smooth_window)
    else:
        yaw_rate = np.zeros_like(speed)
        accel = np.zeros_like(speed)
    return KinematicProfile(
        speed=speed,
        accel=accel,
        heading=wrap_angle(heading),
        yaw_rate=yaw_rate,
        dt=dt,
    )


def heading_change(prof: KinematicProfile, window: int) -> np.ndarray:
    """Signed heading change accumulated over the trailing ``window`` steps."""
    if window < 1:
        raise InvalidInputError(f"window must be >= 1, got {window}")
    if window > len(prof):
        raise InvalidInputError("window longer than profile")
    steps = np.zeros(len(prof))
    steps[1:] = wrap_angle(np.diff(prof.heading))
    csum = np.cumsum(steps)
    out = csum.copy()
    out[window:] = csum[window:] - csum[:-window]
    return out


def _project_onto_polyline(p: np.ndarray, poly: np.ndarray):
    """Distance, arc position and signed (left-positive) offset of p to poly."""
    a = poly[:-1]
    d = poly[1:] - poly[:-1]
    seg_len2 = np.einsum("ij,ij->i", d, d)
    u = np.clip(np.einsum("ij,ij->i", p - a, d) / seg_len2, 0.0, 1.0)
    foot = a + u[:, None] * d
    diff = p - foot
    dist = np.hypot(diff[:, 0], diff[:, 1])
    k = int(np.argmin(dist))
    seg_len = np.sqrt(seg_len2)
    arc = float(np.sum(seg_len[:k]) + u[k] * seg_len[k])
    cross = d[k, 0] * diff[k, 1] - d[k, 1] * diff[k, 0]
    return float(dist[k]), arc, float(np.sign(cross) * dist[k])


def closest_centerline(p: Sequence[float], map_graph: MapGraph) -> Tuple[int, float, float]:
    """Return ``(lane_id, arc_position, lateral_offset)`` of the nearest lane.

    Lateral offset is positive when the point lies left of the lane direction.
    Equidistant lanes resolve to the lowest id.
    """
    if map_graph is None or map_graph.empty:
        raise MissingMapError("closest_centerline needs a non-empty map")
    p = np.asarray(p, dtype=float)
    best = None
    for lane in sorted(map_graph.centerlines, key=lambda c: c.id):
        dist, arc, off = _project_onto_polyline(p, lane.polyline)
        if best is None or dist < best[0] - 1e-12:
            best = (dist, lane.id, arc, off)
    return best[1], best[2], best[3]


def _segment_closest(p0, p1, q0, q1):
    """Closest points between segments p0p1 and q0q1 (vectorized).

    Returns parameters (s, t) in [0, 1] and the distance.  For parallel
    segments s is pinned to 0 before clamping.
    """
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = np.einsum("...i,...i->...", d1, d1)
    e = np.einsum("...i,...i->...", d2, d2)
    f = np.einsum("...i,...i->...", d2, r)
    c = np.einsum("...i,...i->...", d1, r)
    b = np.einsum("...i,...i->...", d1, d2)
    denom = a * e - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 1e-12 * np.maximum(a * e, 1e-300), (b * f - c * e) / denom, 0.0)
    s = np.clip(np.nan_to_num(s), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(e > 0, (b * s + f) / e, 0.0)
    t = np.nan_to_num(t)
    # re-clamp t and recompute s where t left [0, 1]
    t_c = np.clip(t, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_re = np.where(a > 0, (t_c * b - c) / a, 0.0)
    s = np.where(t != t_c, np.clip(np.nan_to_num(s_re), 0.0, 1.0), s)
    t = t_c
    cp = p0 + s[..., None] * d1
    cq = q0 + t[..., None] * d2
    dist = np.linalg.norm(cp - cq, axis=-1)
    return s, t, dist, cp, cq


def path_intersection(a: Trajectory, b: Trajectory, radius: float = 2.0) -> Optional[IntersectionEvent]:
    """Find the earliest conflict between two paths.

    Proper segment crossings take precedence; if the paths never cross, the
    earliest pair of segments passing within ``radius`` is reported with the
    conflict point at the midpoint of the closest approach.  "Earliest" orders
    candidate pairs by (min arrival, max arrival), which keeps the result
    symmetric in ``a`` and ``b``.
    """
    pa, pb = a.points, b.points
    A0 = pa[:-1, None, :]
    A1 = pa[1:, None, :]
    B0 = pb[None, :-1, :]
    B1 = pb[None, 1:, :]
    s, t, dist, cp, cq = _segment_closest(A0, A1, B0, B1)
    ia = np.arange(len(pa) - 1)[:, None]
    ib = np.arange(len(pb) - 1)[None, :]
    ta = a.t0 + a.dt * (ia + s)
    tb = b.t0 + b.dt * (ib + t)

    d1 = A1 - A0
    d2 = B1 - B0
    cross = d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]
    crossing = (dist <= 1e-9) & (np.abs(cross) > 1e-12)
    candidates = crossing if crossing.any() else dist <= radius
    if not candidates.any():
        return None
    lo = np.minimum(ta, tb)
    hi = np.maximum(ta, tb)
    idx = np.argwhere(candidates)
    keys = [(lo[i, j], hi[i, j]) for i, j in idx]
    i, j = idx[min(range(len(keys)), key=keys.__getitem__)]
    point = 0.5 * (cp[i, j] + cq[i, j])
    return IntersectionEvent(
        point=(float(point[0]), float(point[1])),
        arrival_a=float(ta[i, j]),
        arrival_b=float(tb[i, j]),
        min_separation=float(dist[i, j]),
    )
