"""Sensor descriptions, ray generation and frame containers.

Camera frames follow the pinhole convention x right, y down, z forward with
pixel centers at ``(u + 0.5, v + 0.5)``. LiDAR frames are z-up with azimuth
measured from +x toward +y.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import RigidTransform, Trajectory


@dataclass(frozen=True)
class CameraSpec:
    sensor_id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    timestamps: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"{self.sensor_id}: focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(f"{self.sensor_id}: principal point outside the image")
        object.__setattr__(self, "timestamps", tuple(float(t) for t in self.timestamps))

    @property
    def kind(self) -> str:
        return "camera"

    def pixel_grid(self) -> np.ndarray:
        """All ``(u, v)`` pixel indices as an ``(H, W, 2)`` array."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u, v], axis=-1).astype(np.float64)

    def local_directions(self, pixels: np.ndarray) -> np.ndarray:
        """Unit ray directions in the camera frame for ``(..., 2)`` pixel indices."""
        pixels = np.asarray(pixels, dtype=np.float64)
        k = np.empty(pixels.shape[:-1] + (3,))
        k[..., 0] = (pixels[..., 0] + 0.5 - self.cx) / self.fx
        k[..., 1] = (pixels[..., 1] + 0.5 - self.cy) / self.fy
        k[..., 2] = 1.0
        return k / np.linalg.norm(k, axis=-1, keepdims=True)


@dataclass(frozen=True)
class LidarSpec:
    sensor_id: str
    n_azimuth: int
    elevations: tuple[float, ...]
    max_range: float
    timestamps: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.n_azimuth < 4:
            raise ValueError(f"{self.sensor_id}: need at least 4 azimuth steps")
        if self.max_range <= 0:
            raise ValueError(f"{self.sensor_id}: max range must be positive")
        if len(self.elevations) == 0:
            raise ValueError(f"{self.sensor_id}: need at least one elevation")
        object.__setattr__(self, "elevations", tuple(float(e) for e in self.elevations))
        object.__setattr__(self, "timestamps", tuple(float(t) for t in self.timestamps))

    @property
    def kind(self) -> str:
        return "lidar"

    @property
    def n_beams(self) -> int:
        return self.n_azimuth * len(self.elevations)

    def local_directions(self) -> np.ndarray:
        """``(n_elev * n_azimuth, 3)`` unit directions, elevation-major."""
        az = 2.0 * np.pi * np.arange(self.n_azimuth) / self.n_azimuth
        el = np.asarray(self.elevations)[:, None]
        d = np.stack(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el) * np.ones_like(az)],
            axis=-1,
        )
        return d.reshape(-1, 3)


@dataclass
class Rig:
    """Sensor set with ground-truth calibration and the reference trajectory."""

    reference_id: str
    cameras: list[CameraSpec]
    lidars: list[LidarSpec]
    extrinsics: dict[str, RigidTransform]
    time_offsets: dict[str, float]
    trajectory: Trajectory

    def __post_init__(self) -> None:
        ids = self.sensor_ids
        if len(set(ids)) != len(ids):
            raise ValueError("sensor ids must be unique")
        if self.reference_id not in {c.sensor_id for c in self.cameras}:
            raise ValueError("reference sensor must be a camera")
        for sid in ids:
            if sid not in self.extrinsics or sid not in self.time_offsets:
                raise ValueError(f"missing calibration for sensor {sid!r}")
        ref = self.extrinsics[self.reference_id]
        if not (np.allclose(ref.rotation, [1, 0, 0, 0], atol=1e-12) and np.allclose(ref.translation, 0, atol=1e-12)):
            raise ValueError("reference camera must have identity extrinsic")
        if self.time_offsets[self.reference_id] != 0.0:
            raise ValueError("reference camera must have zero time offset")

    @property
    def sensor_ids(self) -> list[str]:
        return [c.sensor_id for c in self.cameras] + [l.sensor_id for l in self.lidars]

    @property
    def non_reference_ids(self) -> list[str]:
        return [s for s in self.sensor_ids if s != self.reference_id]

    def sensor(self, sensor_id: str) -> CameraSpec | LidarSpec:
        for s in (*self.cameras, *self.lidars):
            if s.sensor_id == sensor_id:
                return s
        raise KeyError(sensor_id)

    def camera(self, sensor_id: str) -> CameraSpec:
        s = self.sensor(sensor_id)
        if not isinstance(s, CameraSpec):
            raise KeyError(f"{sensor_id} is not a camera")
        return s


@dataclass
class CameraFrame:
    sensor_id: str
    timestamp: float
    pixels: np.ndarray  # (H, W, 3) linear RGB in [0, 1]
    mask: np.ndarray  # (H, W) bool, True = usable

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("pixels must be (H, W, 3)")
        if self.mask.shape != self.pixels.shape[:2]:
            raise ValueError("mask shape must match pixels")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")


@dataclass
class LidarScan:
    sensor_id: str
    timestamp: float
    directions: np.ndarray  # (N, 3) unit vectors in the sensor frame
    ranges: np.ndarray  # (N,) meters; undefined where hit is False
    hit: np.ndarray  # (N,) bool


@dataclass
class Rays:
    """A batch of world-space rays."""

    origins: np.ndarray  # (N, 3)
    directions: np.ndarray  # (N, 3), unit norm
    sensor_id: str = ""
    indices: np.ndarray = field(default_factory=lambda: np.zeros((0,), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.origins)


def camera_rays(spec: CameraSpec, pose: RigidTransform, pixel_indices: Sequence) -> Rays:
    """World rays through the given ``(u, v)`` pixels of a camera at ``pose``.

    Fractional indices address points inside a pixel; ``(u, v)`` is its center.
    """
    pix = np.atleast_2d(np.asarray(pixel_indices, dtype=np.float64))
    u, v = pix[:, 0], pix[:, 1]
    if np.any(u < -0.5) or np.any(u >= spec.width - 0.5) or np.any(v < -0.5) or np.any(v >= spec.height - 0.5):
        raise IndexError("pixel index outside the image")
    d = spec.local_directions(pix) @ pose.R.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(pose.translation, d.shape).copy()
    return Rays(o, d, spec.sensor_id, pix)


def lidar_rays(spec: LidarSpec, pose: RigidTransform) -> Rays:
    """One world ray per (elevation, azimuth) beam of a scan taken at ``pose``."""
    d = spec.local_directions() @ pose.R.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(pose.translation, d.shape).copy()
    return Rays(o, d, spec.sensor_id, np.arange(len(d)))
