from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from soac.dataset import Dataset
from soac.field import VoxelRadianceField
from soac.scene import MotionProfile, RigLayout, SceneModel, default_rig, default_scene, true_sensor_pose
from soac.sensors import CameraFrame, LidarScan, camera_rays, lidar_rays

BACKGROUND = (0.6, 0.75, 0.95)
FIELD_VOXEL = 0.5


def smooth_scene_field(scene: SceneModel, voxel: float, sharpness: float = 4.0) -> VoxelRadianceField:
    """Voxel field approximating the boxes and ground: density from a signed
    distance, color from the nearest surface."""
    aabb = scene.aabb
    res = tuple(max(2, int(np.ceil(e / voxel)) + 1) for e in aabb[1] - aabb[0])
    fld = VoxelRadianceField(res, aabb, density_scale=10.0)
    axes = [np.linspace(aabb[0, a], aabb[1, a], res[a]) for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    dist = pts[:, 2] - scene.ground.height
    col = np.broadcast_to(scene.ground.colors.mean(axis=0), pts.shape).copy()
    for box in scene.boxes:
        c, h = (box.lo + box.hi) / 2, (box.hi - box.lo) / 2
        q = np.abs(pts - c) - h
        s = np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)
        closer = s < dist
        dist[closer] = s[closer]
        col[closer] = box.face_colors[:, 0].mean(axis=0)
    p = fld.params.reshape(-1, 4)
    p[:, 0] = np.clip(-sharpness * dist, -8.0, 6.0)
    col = np.clip(col, 0.05, 0.95)
    p[:, 1:] = np.log(col / (1 - col))
    return fld


def render_field_world(fld: VoxelRadianceField, rig, n_samples: int = 256) -> tuple[dict, dict]:
    """Camera frames and LiDAR scans of ``fld`` itself, so the field is exact truth."""
    frames, scans = {}, {}
    for cam in rig.cameras:
        out = []
        for t in cam.timestamps:
            r = camera_rays(cam, true_sensor_pose(rig, cam.sensor_id, t), cam.pixel_grid().reshape(-1, 2))
            res = fld.render(r.origins, r.directions, np.full((len(r), n_samples), 0.5), 0.2, 1e3, BACKGROUND)
            px = np.clip(res.color, 0, 1).reshape(cam.height, cam.width, 3)
            out.append(CameraFrame(cam.sensor_id, t, px, np.ones((cam.height, cam.width), bool)))
        frames[cam.sensor_id] = out
    for lid in rig.lidars:
        out = []
        for t in lid.timestamps:
            r = lidar_rays(lid, true_sensor_pose(rig, lid.sensor_id, t))
            res = fld.render(r.origins, r.directions, np.full((len(r), n_samples), 0.5), 0.2, lid.max_range,
                             BACKGROUND)
            hit = res.weight_sum > 0.99
            out.append(LidarScan(lid.sensor_id, t, lid.local_directions(), np.where(hit, res.depth, lid.max_range), hit))
        scans[lid.sensor_id] = out
    return frames, scans


@pytest.fixture(scope="session")
def field_world():
    """A small rig observing a world that a voxel field represents exactly.

    Returns the in-memory dataset and the truth field.
    """
    profile = MotionProfile()
    rig = default_rig(profile, RigLayout(width=32, height=24, focal=24.0, n_frames=8, lidar_azimuth=120))
    scene = default_scene(profile)
    fld = smooth_scene_field(scene, FIELD_VOXEL)
    frames, scans = render_field_world(fld, rig)
    ds = Dataset(Path("."), rig, SceneModel(scene.aabb, [], scene.ground, np.array(BACKGROUND)), frames, scans)
    return ds, fld


TINY_CONFIG = """\
[experiment]
seeds = [0, 1]
out_dir = "{root}/results"
dataset_dir = "{root}/data"

[scene]
trajectory = "{trajectory}"
duration = 1.0
n_boxes_per_side = 2
supersample = 1

[rig]
width = 16
height = 12
focal = 12.0
n_frames = 3
lidar_azimuth = 24

[train]
epochs = 2
steps_per_epoch = 1
patches_per_step = 2
patch_size = 3
lidar_rays_per_step = 16
n_samples = 8
field_voxel = 1.0
delays = {{}}
"""


@pytest.fixture
def tiny_config_file(tmp_path):
    """Write a seconds-scale experiment config under ``tmp_path``; returns a factory."""

    def make(trajectory: str = "arc") -> Path:
        path = tmp_path / f"{trajectory}.toml"
        path.write_text(TINY_CONFIG.format(root=tmp_path.as_posix(), trajectory=trajectory))
        return path

    return make


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, from the ``acceptance`` property."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            for name, value in getattr(rep, "user_properties", ()):
                if name == "acceptance":
                    lines.append((value, "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for value, status in sorted(lines):
            terminalreporter.write_line(f"{status}  {value}")
