"""On-disk formats: PFM images, one-byte masks, binary LiDAR scans and TOML manifests."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .geometry import RigidTransform, Trajectory
from .sensors import CameraFrame, CameraSpec, LidarScan, LidarSpec, Rig

# little-endian record: direction xyz (f32), range (f32), miss flag (u8)
LIDAR_RECORD = np.dtype([("dir", "<f4", (3,)), ("range", "<f4"), ("miss", "u1")])


def write_pfm(path: str | Path, image: np.ndarray) -> None:
    """Color PFM, little-endian, rows stored bottom-to-top."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PFM writer expects an (H, W, 3) image")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    lines = []
    pos = 0
    while len(lines) < 3:
        end = data.index(b"\n", pos)
        lines.append(data[pos:end].decode("ascii").strip())
        pos = end + 1
    if lines[0] not in ("PF", "Pf"):
        raise ValueError(f"{path}: not a PFM file")
    channels = 3 if lines[0] == "PF" else 1
    w, h = (int(v) for v in lines[1].split())
    scale = float(lines[2])
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=pos)
    arr = arr.reshape(h, w, channels)[::-1].astype(np.float32)
    return arr if channels == 3 else arr[..., 0]


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Path(path).write_bytes(np.asarray(mask, dtype=np.uint8).tobytes())


def read_mask(path: str | Path, height: int, width: int) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size != height * width:
        raise ValueError(f"{path}: expected {height * width} bytes, found {raw.size}")
    return raw.reshape(height, width).astype(bool)


def write_scan(path: str | Path, scan: LidarScan) -> None:
    rec = np.zeros(len(scan.ranges), dtype=LIDAR_RECORD)
    rec["dir"] = scan.directions
    rec["range"] = scan.ranges
    rec["miss"] = (~scan.hit).astype(np.uint8)
    Path(path).write_bytes(rec.tobytes())


def read_scan(path: str | Path, sensor_id: str, timestamp: float) -> LidarScan:
    rec = np.frombuffer(Path(path).read_bytes(), dtype=LIDAR_RECORD)
    d = rec["dir"].astype(np.float64)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return LidarScan(sensor_id, timestamp, d, rec["range"].astype(np.float64), rec["miss"] == 0)


# ---------------------------------------------------------------------------
# structured text
# ---------------------------------------------------------------------------


def _plain(obj):
    """Convert numpy scalars/arrays into TOML-serializable builtins."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if not math.isfinite(v):
            raise ValueError("non-finite value cannot be written to TOML")
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dump_toml(path: str | Path, data: dict) -> None:
    Path(path).write_text(tomli_w.dumps(_plain(data)))


def dumps_toml(data: dict) -> str:
    return tomli_w.dumps(_plain(data))


def load_toml(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return tomli.load(fh)


def trajectory_to_dict(traj: Trajectory) -> dict:
    return {
        "times": traj.times.tolist(),
        "rotations": [p.rotation.tolist() for p in traj.poses],
        "translations": [p.translation.tolist() for p in traj.poses],
    }


def trajectory_from_dict(d: dict) -> Trajectory:
    poses = [RigidTransform(np.array(q), np.array(t)) for q, t in zip(d["rotations"], d["translations"])]
    return Trajectory(d["times"], poses)


def rig_to_dict(rig: Rig) -> dict:
    return {
        "reference_id": rig.reference_id,
        "cameras": [
            {"sensor_id": c.sensor_id, "width": c.width, "height": c.height, "fx": c.fx, "fy": c.fy,
             "cx": c.cx, "cy": c.cy, "timestamps": list(c.timestamps)}
            for c in rig.cameras
        ],
        "lidars": [
            {"sensor_id": l.sensor_id, "n_azimuth": l.n_azimuth, "elevations": list(l.elevations),
             "max_range": l.max_range, "timestamps": list(l.timestamps)}
            for l in rig.lidars
        ],
        "trajectory": trajectory_to_dict(rig.trajectory),
    }


def truth_to_dict(rig: Rig) -> dict:
    return {
        sid: {**rig.extrinsics[sid].to_dict(), "time_offset": rig.time_offsets[sid]}
        for sid in rig.sensor_ids
    }


def rig_from_dict(d: dict, truth: dict | None = None) -> Rig:
    cams = [CameraSpec(c["sensor_id"], c["width"], c["height"], c["fx"], c["fy"], c["cx"], c["cy"],
                       tuple(c["timestamps"])) for c in d["cameras"]]
    lidars = [LidarSpec(l["sensor_id"], l["n_azimuth"], tuple(l["elevations"]), l["max_range"],
                        tuple(l["timestamps"])) for l in d.get("lidars", [])]
    ids = [c.sensor_id for c in cams] + [l.sensor_id for l in lidars]
    if truth is None:
        # calibration unknown: placeholders satisfying the reference invariants
        extr = {sid: RigidTransform.identity() for sid in ids}
        offs = {sid: 0.0 for sid in ids}
    else:
        extr = {sid: RigidTransform.from_dict(truth[sid]) for sid in ids}
        offs = {sid: float(truth[sid]["time_offset"]) for sid in ids}
    return Rig(d["reference_id"], cams, lidars, extr, offs, trajectory_from_dict(d["trajectory"]))
