"""Dataset generation from the synthetic scene, loading, and miscalibration priors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .geometry import OutOfRangeError, RigidTransform, compose, exp_so3
from .scene import SceneModel, render_reference_frame, scan_lidar, true_sensor_pose
from .sensors import CameraFrame, LidarScan, Rig

MANIFEST = "manifest.toml"
FORMAT_VERSION = 1


@dataclass
class NoiseSpec:
    """Per-axis miscalibration magnitudes; signs are drawn per seed."""

    translation_m: float = 0.5
    rotation_deg: float = 5.0
    time_s: float = 0.1

    def __post_init__(self) -> None:
        if min(self.translation_m, self.rotation_deg, self.time_s) < 0:
            raise ValueError("noise magnitudes must be non-negative")


@dataclass
class CalibrationPrior:
    extrinsics: dict[str, RigidTransform]
    time_offsets: dict[str, float]


@dataclass
class DatasetManifest:
    path: Path
    scene_hash: str
    trajectory_kind: str
    camera_files: dict[str, list[str]]
    lidar_files: dict[str, list[str]]


@dataclass
class Dataset:
    root: Path
    rig: Rig  # carries the ground truth calibration, for evaluation only
    scene: SceneModel
    frames: dict[str, list[CameraFrame]]
    scans: dict[str, list[LidarScan]]
    trajectory_kind: str = "arc"
    meta: dict = field(default_factory=dict)


def _camera_file(sid: str, k: int) -> str:
    return f"cam_{sid}_{k:03d}.pfm"


def _lidar_file(sid: str, k: int) -> str:
    return f"lidar_{sid}_{k:03d}.bin"


def generate_dataset(scene: SceneModel, rig: Rig, out_dir: str | Path, trajectory_kind: str = "arc",
                     extra: Optional[dict] = None, supersample: int = 4) -> DatasetManifest:
    """Render every camera frame and LiDAR scan at its true pose and write the dataset."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj = rig.trajectory
    for sid in rig.sensor_ids:
        spec = rig.sensor(sid)
        for t in spec.timestamps:
            if not traj.start <= t + rig.time_offsets[sid] <= traj.end:
                raise OutOfRangeError(f"{sid} frame at {t} falls outside the trajectory")
    cam_files: dict[str, list[str]] = {}
    for cam in rig.cameras:
        names = []
        for k, t in enumerate(cam.timestamps):
            frame = render_reference_frame(scene, cam, true_sensor_pose(rig, cam.sensor_id, t), t, supersample)
            name = _camera_file(cam.sensor_id, k)
            io.write_pfm(out / name, frame.pixels)
            io.write_mask(out / (name[:-4] + ".mask"), frame.mask)
            names.append(name)
        cam_files[cam.sensor_id] = names
    lidar_files: dict[str, list[str]] = {}
    for lidar in rig.lidars:
        names = []
        for k, t in enumerate(lidar.timestamps):
            scan = scan_lidar(scene, lidar, true_sensor_pose(rig, lidar.sensor_id, t), t)
            name = _lidar_file(lidar.sensor_id, k)
            io.write_scan(out / name, scan)
            names.append(name)
        lidar_files[lidar.sensor_id] = names
    digest = scene.digest()
    manifest = {
        "dataset": {"format_version": FORMAT_VERSION, "scene_hash": digest, "trajectory_kind": trajectory_kind,
                    "supersample": supersample},
        "rig": io.rig_to_dict(rig),
        "truth": io.truth_to_dict(rig),
        "scene": scene.to_dict(),
        "files": {"cameras": cam_files, "lidars": lidar_files},
    }
    if extra:
        manifest["generator"] = extra
    io.dump_toml(out / MANIFEST, manifest)
    return DatasetManifest(out / MANIFEST, digest, trajectory_kind, cam_files, lidar_files)


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    m = io.load_toml(path)
    rig = io.rig_from_dict(m["rig"], m["truth"])
    scene = SceneModel.from_dict(m["scene"])
    frames = {}
    for cam in rig.cameras:
        names = m["files"]["cameras"][cam.sensor_id]
        fl = []
        for name, t in zip(names, cam.timestamps):
            px = io.read_pfm(root / name).astype(np.float64)
            mask = io.read_mask(root / (name[:-4] + ".mask"), cam.height, cam.width)
            fl.append(CameraFrame(cam.sensor_id, t, np.clip(px, 0.0, 1.0), mask))
        frames[cam.sensor_id] = fl
    scans = {}
    for lidar in rig.lidars:
        names = m["files"]["lidars"][lidar.sensor_id]
        scans[lidar.sensor_id] = [io.read_scan(root / n, lidar.sensor_id, t) for n, t in zip(names, lidar.timestamps)]
    return Dataset(root, rig, scene, frames, scans, m["dataset"].get("trajectory_kind", "arc"), m)


def inject_noise(rig: Rig, noise: NoiseSpec, seed: int) -> CalibrationPrior:
    """Perturb every non-reference sensor by ± the per-axis magnitudes with seeded signs."""
    rng = np.random.default_rng(seed)
    extr = {rig.reference_id: rig.extrinsics[rig.reference_id]}
    offs = {rig.reference_id: 0.0}
    for sid in rig.non_reference_ids:
        signs = rng.choice([-1.0, 1.0], size=7)
        true = rig.extrinsics[sid]
        dt = signs[:3] * noise.translation_m
        drot = signs[3:6] * math.radians(noise.rotation_deg)
        perturbed_rot = compose(true, RigidTransform(exp_so3(drot))).rotation
        extr[sid] = RigidTransform(perturbed_rot, true.translation + dt)
        offs[sid] = rig.time_offsets[sid] + signs[6] * noise.time_s
    return CalibrationPrior(extr, offs)


def truth_prior(rig: Rig) -> CalibrationPrior:
    return CalibrationPrior(dict(rig.extrinsics), dict(rig.time_offsets))
