"""Synthetic ground-truth world, reference renderer and rig/trajectory builders."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import RigidTransform, Trajectory, compose, rot_z, sensor_pose
from .sensors import CameraFrame, CameraSpec, LidarScan, LidarSpec, Rig, camera_rays, lidar_rays

# camera axes (x right, y down, z forward) expressed in a vehicle frame (x forward, y left, z up)
CAM_IN_VEHICLE = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    period: float
    # (6, 2, 3): two checker colors for faces -x, +x, -y, +y, -z, +z
    face_colors: np.ndarray
    dynamic: bool = False

    def __post_init__(self) -> None:
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        fc = np.asarray(self.face_colors, dtype=np.float64)
        if fc.shape == (2, 3):
            fc = np.broadcast_to(fc, (6, 2, 3)).copy()
        self.face_colors = fc
        if self.period <= 0:
            raise ValueError("checker period must be positive")
        if np.any(self.hi <= self.lo):
            raise ValueError("degenerate box")


@dataclass
class GroundPlane:
    height: float = 0.0
    period: float = 2.0
    colors: np.ndarray = field(default_factory=lambda: np.array([[0.35, 0.35, 0.38], [0.55, 0.5, 0.45]]))

    def __post_init__(self) -> None:
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(2, 3)
        if self.period <= 0:
            raise ValueError("checker period must be positive")


@dataclass
class SceneModel:
    aabb: np.ndarray
    boxes: list[Box]
    ground: GroundPlane = field(default_factory=GroundPlane)
    background: np.ndarray = field(default_factory=lambda: np.array([0.6, 0.75, 0.95]))

    def __post_init__(self) -> None:
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        self.background = np.asarray(self.background, dtype=np.float64)
        for b in self.boxes:
            if np.any(b.lo < self.aabb[0]) or np.any(b.hi > self.aabb[1]):
                raise ValueError("every box must lie inside the scene AABB")
        if not (self.aabb[0, 2] <= self.ground.height <= self.aabb[1, 2]):
            raise ValueError("ground plane must lie inside the scene AABB")

    def to_dict(self) -> dict:
        return {
            "aabb": self.aabb.tolist(),
            "background": self.background.tolist(),
            "ground": {"height": self.ground.height, "period": self.ground.period, "colors": self.ground.colors.tolist()},
            "boxes": [
                {"lo": b.lo.tolist(), "hi": b.hi.tolist(), "period": b.period,
                 "face_colors": b.face_colors.tolist(), "dynamic": b.dynamic}
                for b in self.boxes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneModel":
        g = d["ground"]
        return cls(
            np.array(d["aabb"]),
            [Box(np.array(b["lo"]), np.array(b["hi"]), b["period"], np.array(b["face_colors"]), b.get("dynamic", False))
             for b in d["boxes"]],
            GroundPlane(g["height"], g["period"], np.array(g["colors"])),
            np.array(d["background"]),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TraceResult:
    hit: np.ndarray  # (N,) bool
    range: np.ndarray  # (N,), inf on miss
    albedo: np.ndarray  # (N, 3)
    dynamic: np.ndarray  # (N,) bool, hit a box flagged dynamic


def _checker(a: np.ndarray, b: np.ndarray, period: float) -> np.ndarray:
    return ((np.floor(a / period) + np.floor(b / period)) % 2).astype(np.int64)


def trace_scene(scene: SceneModel, origins: np.ndarray, directions: np.ndarray) -> TraceResult:
    """Nearest intersection of each ray with the boxes and the (AABB-clipped) ground."""
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n = len(o)
    best_t = np.full(n, np.inf)
    albedo = np.broadcast_to(scene.background, (n, 3)).copy()
    dynamic = np.zeros(n, dtype=bool)

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        for box in scene.boxes:
            t_a = (box.lo - o) * inv
            t_b = (box.hi - o) * inv
            t_lo = np.where(np.isnan(t_a), -np.inf, np.minimum(t_a, t_b))
            t_hi = np.where(np.isnan(t_a), np.inf, np.maximum(t_a, t_b))
            axis = np.argmax(t_lo, axis=1)
            t_enter = t_lo[np.arange(n), axis]
            t_exit = np.min(t_hi, axis=1)
            ok = (t_enter <= t_exit) & (t_enter > 1e-9) & (t_enter < best_t)
            if not np.any(ok):
                continue
            idx = np.flatnonzero(ok)
            t = t_enter[idx]
            ax = axis[idx]
            p = o[idx] + t[:, None] * d[idx]
            positive = d[idx, ax] < 0.0  # entering through the +axis face
            face = 2 * ax + positive.astype(np.int64)
            u_ax = (ax + 1) % 3
            v_ax = (ax + 2) % 3
            pu = p[np.arange(len(idx)), u_ax]
            pv = p[np.arange(len(idx)), v_ax]
            sel = _checker(pu, pv, box.period)
            best_t[idx] = t
            albedo[idx] = box.face_colors[face, sel]
            dynamic[idx] = box.dynamic

        g = scene.ground
        t = (g.height - o[:, 2]) / d[:, 2]
        p = o + t[:, None] * d
        lo, hi = scene.aabb
        ok = (
            (d[:, 2] < 0.0) & (t > 1e-9) & (t < best_t)
            & (p[:, 0] >= lo[0]) & (p[:, 0] <= hi[0]) & (p[:, 1] >= lo[1]) & (p[:, 1] <= hi[1])
        )
    idx = np.flatnonzero(ok)
    best_t[idx] = t[idx]
    albedo[idx] = g.colors[_checker(p[idx, 0], p[idx, 1], g.period)]
    dynamic[idx] = False
    hit = np.isfinite(best_t)
    return TraceResult(hit, best_t, albedo, dynamic)


def render_reference_frame(scene: SceneModel, spec: CameraSpec, pose: RigidTransform,
                           timestamp: float = 0.0, supersample: int = 1) -> CameraFrame:
    """Albedo image of the scene seen from ``pose``.

    Each pixel averages a ``supersample × supersample`` grid of rays spread
    over its footprint; a pixel is masked out when any of them hits a
    dynamic object.
    """
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    n = supersample
    offs = (np.arange(n) + 0.5) / n - 0.5
    du, dv = np.meshgrid(offs, offs)
    pix = spec.pixel_grid().reshape(-1, 1, 2) + np.stack([du.ravel(), dv.ravel()], axis=-1)[None]
    rays = camera_rays(spec, pose, pix.reshape(-1, 2))
    tr = trace_scene(scene, rays.origins, rays.directions)
    albedo = np.clip(tr.albedo, 0.0, 1.0).reshape(-1, n * n, 3).mean(axis=1)
    img = albedo.reshape(spec.height, spec.width, 3)
    mask = (~tr.dynamic.reshape(-1, n * n).any(axis=1)).reshape(spec.height, spec.width)
    return CameraFrame(spec.sensor_id, timestamp, img, mask)


def scan_lidar(scene: SceneModel, spec: LidarSpec, pose: RigidTransform, timestamp: float = 0.0) -> LidarScan:
    rays = lidar_rays(spec, pose)
    tr = trace_scene(scene, rays.origins, rays.directions)
    hit = tr.hit & (tr.range <= spec.max_range) & ~tr.dynamic
    ranges = np.where(hit, tr.range, spec.max_range)
    return LidarScan(spec.sensor_id, timestamp, spec.local_directions(), ranges, hit)


# ---------------------------------------------------------------------------
# trajectories, scene and rig builders
# ---------------------------------------------------------------------------


@dataclass
class MotionProfile:
    kind: str = "arc"  # "arc" or "straight-constant"
    duration: float = 6.5
    v_start: float = 2.0
    v_end: float = 6.0
    curvature: float = 0.02
    margin: float = 1.0
    knot_dt: float = 0.05

    def speed(self, t: np.ndarray) -> np.ndarray:
        if self.kind == "straight-constant":
            return np.full_like(t, 0.5 * (self.v_start + self.v_end))
        s = np.clip(t / self.duration, 0.0, 1.0)
        return self.v_start + (self.v_end - self.v_start) * s

    def arc_length(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "straight-constant":
            return self.speed(t) * t
        a = (self.v_end - self.v_start) / self.duration
        tc = np.clip(t, 0.0, self.duration)
        s = self.v_start * tc + 0.5 * a * tc**2
        s = s + np.where(t < 0.0, self.v_start * t, 0.0)
        s = s + np.where(t > self.duration, self.v_end * (t - self.duration), 0.0)
        return s

    @property
    def kappa(self) -> float:
        return 0.0 if self.kind == "straight-constant" else self.curvature

    def vehicle_pose_at_arclength(self, s: float) -> tuple[np.ndarray, float]:
        k = self.kappa
        if abs(k) < 1e-12:
            return np.array([s, 0.0, 0.0]), 0.0
        return np.array([math.sin(k * s) / k, (1.0 - math.cos(k * s)) / k, 0.0]), k * s


def vehicle_to_camera_extrinsic(position: Sequence[float], yaw: float = 0.0, pitch: float = 0.0) -> RigidTransform:
    """Camera mounted on the vehicle at ``position`` with yaw (left positive) and pitch (down positive)."""
    from .geometry import rot_y
    R = rot_z(yaw) @ rot_y(pitch) @ CAM_IN_VEHICLE
    return RigidTransform.from_rt(R, position)


def build_trajectory(profile: MotionProfile, cam_in_vehicle: RigidTransform) -> Trajectory:
    """Reference-camera trajectory sampled densely from the vehicle motion."""
    t0 = -profile.margin
    t1 = profile.duration + profile.margin
    n = int(round((t1 - t0) / profile.knot_dt)) + 1
    times = np.linspace(t0, t1, n)
    poses = []
    for t, s in zip(times, profile.arc_length(times)):
        pos, heading = profile.vehicle_pose_at_arclength(float(s))
        veh = RigidTransform.from_rt(rot_z(heading), pos)
        poses.append(compose(veh, cam_in_vehicle))
    return Trajectory(times, poses)


def default_scene(profile: MotionProfile, seed: int = 7, n_boxes_per_side: int = 11) -> SceneModel:
    """Textured boxes lining both sides of the driving path, closed off ahead."""
    rng = np.random.default_rng(seed)
    s_total = float(profile.arc_length(np.array(profile.duration + profile.margin)))
    palette = np.array([
        [0.85, 0.2, 0.15], [0.15, 0.55, 0.85], [0.95, 0.8, 0.2], [0.2, 0.7, 0.3],
        [0.6, 0.3, 0.7], [0.9, 0.55, 0.2], [0.1, 0.1, 0.12], [0.95, 0.95, 0.92],
        [0.45, 0.25, 0.1], [0.3, 0.8, 0.75],
    ])
    boxes = []
    centers = []
    s_values = np.linspace(-6.0, s_total + 6.0, n_boxes_per_side)
    for side in (+1, -1):
        for s in s_values:
            s_j = s + rng.uniform(-1.5, 1.5)
            pos, heading = profile.vehicle_pose_at_arclength(s_j)
            normal = np.array([-math.sin(heading), math.cos(heading), 0.0])
            lateral = rng.uniform(4.5, 6.5)
            c = pos + side * lateral * normal
            centers.append((c, rng.uniform(1.5, 3.0), rng.uniform(1.5, 3.0), rng.uniform(2.0, 4.5)))
    # a row of boxes closing the view ahead
    end_pos, end_heading = profile.vehicle_pose_at_arclength(s_total + 10.0)
    fwd = np.array([math.cos(end_heading), math.sin(end_heading), 0.0])
    left = np.array([-fwd[1], fwd[0], 0.0])
    for off in (-6.0, -2.0, 2.0, 6.0):
        c = end_pos + off * left + rng.uniform(-1.0, 1.0) * fwd
        centers.append((c, rng.uniform(2.0, 3.0), rng.uniform(2.0, 3.0), rng.uniform(2.5, 4.5)))
    for c, sx, sy, h in centers:
        lo = np.array([c[0] - sx / 2, c[1] - sy / 2, 0.0])
        hi = np.array([c[0] + sx / 2, c[1] + sy / 2, h])
        cols = np.empty((6, 2, 3))
        for f in range(6):
            i, j = rng.choice(len(palette), size=2, replace=False)
            cols[f] = palette[[i, j]]
        boxes.append(Box(lo, hi, float(rng.uniform(1.0, 2.0)), cols))
    pts = np.concatenate([np.stack([b.lo, b.hi]) for b in boxes])
    lo = np.floor(pts.min(axis=0) - 1.0)
    hi = np.ceil(pts.max(axis=0) + 1.0)
    lo[2] = -1.0
    return SceneModel(np.stack([lo, hi]), boxes, GroundPlane(0.0, 2.0))


@dataclass
class RigLayout:
    width: int = 80
    height: int = 60
    focal: float = 60.0
    n_frames: int = 40
    fps: float = 6.0
    diagonal_yaw_deg: float = 55.0
    lidar_azimuth: int = 360
    lidar_elevations_deg: tuple[float, ...] = tuple(np.linspace(-20.0, 8.0, 16).tolist())
    lidar_max_range: float = 60.0
    time_offsets: dict = field(default_factory=lambda: {
        "cam_front_left": 0.03, "cam_front_right": -0.02, "lidar_top": 0.045,
    })


def default_rig(profile: MotionProfile, layout: Optional[RigLayout] = None) -> Rig:
    """Front reference camera, two front-diagonal cameras and a roof LiDAR."""
    layout = layout or RigLayout()
    stamps = tuple(k / layout.fps for k in range(layout.n_frames))
    yaw = math.radians(layout.diagonal_yaw_deg)
    mounts = {
        "cam_front": vehicle_to_camera_extrinsic([1.6, 0.0, 1.6], 0.0, math.radians(2.0)),
        "cam_front_left": vehicle_to_camera_extrinsic([1.45, 0.5, 1.6], yaw, math.radians(1.0)),
        "cam_front_right": vehicle_to_camera_extrinsic([1.45, -0.5, 1.6], -yaw, math.radians(1.0)),
        "lidar_top": RigidTransform.from_rt(rot_z(math.radians(-90.0)), [0.9, 0.0, 1.85]),
    }
    ref = mounts["cam_front"]
    cams = []
    for sid in ("cam_front", "cam_front_left", "cam_front_right"):
        cams.append(CameraSpec(sid, layout.width, layout.height, layout.focal, layout.focal,
                               layout.width / 2.0, layout.height / 2.0, stamps))
    lidar = LidarSpec("lidar_top", layout.lidar_azimuth,
                      tuple(math.radians(e) for e in layout.lidar_elevations_deg),
                      layout.lidar_max_range, stamps)
    extr = {sid: compose(ref.inverse(), m) for sid, m in mounts.items()}
    extr["cam_front"] = RigidTransform.identity()
    offsets = {"cam_front": 0.0}
    for sid in ("cam_front_left", "cam_front_right", "lidar_top"):
        offsets[sid] = float(layout.time_offsets.get(sid, 0.0))
    traj = build_trajectory(profile, ref)
    return Rig("cam_front", cams, [lidar], extr, offsets, traj)


def true_sensor_pose(rig: Rig, sensor_id: str, t_frame: float) -> RigidTransform:
    return sensor_pose(rig.trajectory, t_frame, rig.time_offsets[sensor_id], rig.extrinsics[sensor_id])
