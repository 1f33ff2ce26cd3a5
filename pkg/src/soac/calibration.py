"""Joint spatio-temporal calibration against per-camera radiance fields.

Each camera owns a field trained only on its own images. Every step first
trains the fields on a mini-batch (step 1), then registers each sensor's
correction against the fields of the other sensors with those fields frozen
(step 2). Visibility grids restrict the cross-sensor losses to space the
target field has actually observed.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _kernels as K
from . import losses
from .dataset import CalibrationPrior, Dataset
from .field import AdamState, VoxelRadianceField, apply_gradients
from .geometry import RigidTransform, Trajectory, pose_error, right_jacobian_so3, so3_exp_matrix
from .visibility import VisibilityGrid

log = logging.getLogger(__name__)

MODES = ("soac", "baseline", "soac-no-grid", "soac-no-sigmoid", "soac-no-delay")
SHARED_FIELD = "shared"


class UnknownSensorError(KeyError):
    pass


class EmptyBatchError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Optimization settings. Defaults follow the full-scale recipe; desk-scale
    experiments override the step counts and learning rates."""

    epochs: int = 20
    steps_per_epoch: Optional[int] = None  # None: one pass over the camera pixels
    calib_lr_start: float = 1e-3
    calib_lr_end: float = 1e-4
    field_lr: float = 0.05
    patches_per_step: int = 100
    patch_size: int = 15
    lidar_rays_per_step: int = 1024
    n_samples: int = 64
    near: float = 0.2
    far: float = 1e3
    color_weight: float = 1.0
    cam_weight: float = 1.0
    dssim_weight: float = 0.1
    depth_weight: float = 1.0
    depth_smooth_weight: float = 1e-4
    delays: dict = field(default_factory=lambda: {"cam_front_left": 1, "cam_front_right": 1, "lidar_top": 5})
    grid_reset_every: int = 2
    grid_resolution: int = 20
    grid_n_probe: int = 32
    grid_tau: float = 0.25
    grid_w_min: float = 1e-2
    translation_bound: float = 2.0
    time_bound: float = 0.5
    field_voxel: float = 0.5
    density_scale: float = 10.0
    density_init: float = -2.0
    background: tuple = (0.6, 0.75, 0.95)
    trans_stop: float = 0.0
    lidar_in_scene_step: bool = True
    # coarse-to-fine: (first epoch, pixel stride) stages; targets are blurred to match the stride
    patch_strides: tuple = ((0, 1),)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if min(self.calib_lr_start, self.calib_lr_end, self.field_lr) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ConfigError("patch size must be odd and >= 3")
        if self.patches_per_step < 1:
            raise ConfigError("need at least one patch per step")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")
        if self.n_samples < 2:
            raise ConfigError("need at least 2 samples per ray")
        if min(self.translation_bound, self.time_bound) <= 0:
            raise ConfigError("bounds must be positive")
        if self.grid_reset_every < 1:
            raise ConfigError("grid_reset_every must be >= 1")
        self.background = tuple(float(c) for c in self.background)
        stages = tuple(sorted((int(e), int(st)) for e, st in self.patch_strides))
        if not stages or stages[0][0] != 0 or any(st < 1 for _, st in stages):
            raise ConfigError("patch_strides needs a stage starting at epoch 0 and strides >= 1")
        self.patch_strides = stages
        self.delays = {str(k): int(v) for k, v in dict(self.delays).items()}

    def patch_stride(self, epoch: int) -> int:
        stride = 1
        for start, st in self.patch_strides:
            if epoch >= start:
                stride = st
        return stride

    def calib_lr(self, epoch: int) -> float:
        """Geometric per-epoch decay from the start to the end rate."""
        if self.epochs == 1:
            return self.calib_lr_start
        frac = epoch / (self.epochs - 1)
        return self.calib_lr_start * (self.calib_lr_end / self.calib_lr_start) ** frac

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# correction parametrization
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class CorrectionParams:
    """Raw corrections per non-reference sensor: ``[rot(3), trans(3), time]``.

    Rotation is an axis-angle vector. Translation and time go through an
    offset, scaled sigmoid unless ``bounded`` is off, in which case the raw
    values are used directly.
    """

    raw: dict[str, np.ndarray]
    translation_bound: float = 2.0
    time_bound: float = 0.5
    bounded: bool = True

    @classmethod
    def zeros(cls, sensors, translation_bound=2.0, time_bound=0.5, bounded=True) -> "CorrectionParams":
        return cls({s: np.zeros(7) for s in sensors}, translation_bound, time_bound, bounded)

    @property
    def sensors(self) -> list[str]:
        return list(self.raw)

    def _get(self, sensor: str) -> np.ndarray:
        if sensor not in self.raw:
            raise UnknownSensorError(sensor)
        return self.raw[sensor]

    def translation(self, sensor: str) -> np.ndarray:
        r = self._get(sensor)[3:6]
        if not self.bounded:
            return r.copy()
        return self.translation_bound * (2.0 * _sigmoid(r) - 1.0)

    def time(self, sensor: str) -> float:
        r = self._get(sensor)[6]
        if not self.bounded:
            return float(r)
        return float(self.time_bound * (2.0 * _sigmoid(r) - 1.0))

    def translation_jacobian(self, sensor: str) -> np.ndarray:
        """Elementwise derivative of the decoded translation w.r.t. its raws."""
        if not self.bounded:
            return np.ones(3)
        s = _sigmoid(self._get(sensor)[3:6])
        return 2.0 * self.translation_bound * s * (1.0 - s)

    def time_jacobian(self, sensor: str) -> float:
        if not self.bounded:
            return 1.0
        s = float(_sigmoid(self._get(sensor)[6]))
        return 2.0 * self.time_bound * s * (1.0 - s)

    def copy(self) -> "CorrectionParams":
        return CorrectionParams({k: v.copy() for k, v in self.raw.items()},
                                self.translation_bound, self.time_bound, self.bounded)


def decode_correction(params: CorrectionParams, sensor: str) -> tuple[RigidTransform, float]:
    """Correction transform and time offset encoded by the raw parameters."""
    r = params._get(sensor)
    return RigidTransform.from_rt(so3_exp_matrix(r[:3]), params.translation(sensor)), params.time(sensor)


def estimate(prior: CalibrationPrior, params: CorrectionParams, sensor: str) -> tuple[RigidTransform, float]:
    """Current extrinsic and offset: the prior composed with its correction on the right."""
    if sensor not in params.raw:
        if sensor in prior.extrinsics:
            return prior.extrinsics[sensor], float(prior.time_offsets[sensor])
        raise UnknownSensorError(sensor)
    corr, dt = decode_correction(params, sensor)
    return prior.extrinsics[sensor] @ corr, float(prior.time_offsets[sensor]) + dt


# ---------------------------------------------------------------------------
# differentiable sensor poses
# ---------------------------------------------------------------------------


@dataclass
class PoseChain:
    """World pose of one sensor for a set of frames, with what its gradient needs.

    Per-frame arrays have a leading axis of length F.
    """

    sensor: str
    R_traj: np.ndarray  # (F, 3, 3)
    t_traj: np.ndarray  # (F, 3)
    velocity: np.ndarray  # (F, 3) world
    omega_body: np.ndarray  # (F, 3)
    R_prior: np.ndarray
    R_corr: np.ndarray
    rotvec: np.ndarray
    R_ext: np.ndarray
    t_ext: np.ndarray

    @property
    def R_world(self) -> np.ndarray:
        return self.R_traj @ self.R_ext

    @property
    def origin(self) -> np.ndarray:
        return np.einsum("fij,j->fi", self.R_traj, self.t_ext) + self.t_traj


def pose_chain(traj: Trajectory, stamps: np.ndarray, prior: CalibrationPrior,
               params: CorrectionParams, sensor: str) -> PoseChain:
    ext, offset = estimate(prior, params, sensor)
    P = prior.extrinsics[sensor]
    if sensor in params.raw:
        rotvec = params.raw[sensor][:3].copy()
        R_corr = so3_exp_matrix(rotvec)
    else:
        rotvec = np.zeros(3)
        R_corr = np.eye(3)
    uniq, inv = np.unique(np.asarray(stamps, dtype=np.float64), return_inverse=True)
    F = len(uniq)
    R_T = np.empty((F, 3, 3))
    t_T = np.empty((F, 3))
    vel = np.zeros((F, 3))
    omg = np.zeros((F, 3))
    for f, t in enumerate(uniq):
        q = t + offset
        # queries past the recorded span hold the end pose; time gradient vanishes there
        qc = min(max(q, traj.start), traj.end)
        d = traj.interpolate_with_derivative(qc)
        R_T[f] = d.pose.R
        t_T[f] = d.pose.translation
        if qc == q:
            vel[f] = d.velocity
            omg[f] = d.angular_velocity
    inv = inv.reshape(-1)
    return PoseChain(sensor, R_T[inv], t_T[inv], vel[inv], omg[inv], P.R, R_corr, rotvec, ext.R,
                     ext.translation.copy())


def chain_gradient(chain: PoseChain, params: CorrectionParams, frame_of_ray: np.ndarray,
                   local_dirs: np.ndarray, g_origin: np.ndarray, g_dir: np.ndarray) -> np.ndarray:
    """Gradient of a loss w.r.t. the sensor's 7 raw corrections.

    ``g_origin``/``g_dir`` are per-ray world-space gradients of rays
    ``o = R_traj t_ext + t_traj`` and ``d = R_traj R_ext k``.
    """
    sid = chain.sensor
    R_T = chain.R_traj[frame_of_ray]
    R_W = R_T @ chain.R_ext
    gd_local = np.einsum("nji,nj->ni", R_W, g_dir)
    g_rot = right_jacobian_so3(chain.rotvec).T @ np.cross(local_dirs, gd_local).sum(axis=0)
    go_body = np.einsum("nji,nj->ni", R_T, g_origin)
    g_tcorr = chain.R_prior.T @ go_body.sum(axis=0)
    # time: rotation and translation of the trajectory both move with the query time
    gd_body = np.einsum("nji,nj->ni", R_T, g_dir)
    w = chain.omega_body[frame_of_ray]
    ck = local_dirs @ chain.R_ext.T
    g_time = float(np.einsum("ni,ni->", w, np.cross(ck, gd_body)))
    lever = np.einsum("nij,nj->ni", R_T, np.cross(w, chain.t_ext)) + chain.velocity[frame_of_ray]
    g_time += float(np.einsum("ni,ni->", g_origin, lever))
    out = np.empty(7)
    out[:3] = g_rot
    out[3:6] = g_tcorr * params.translation_jacobian(sid)
    out[6] = g_time * params.time_jacobian(sid)
    return out


# ---------------------------------------------------------------------------
# mini-batches
# ---------------------------------------------------------------------------


@dataclass
class CameraBatch:
    sensor: str
    frames: np.ndarray  # (P,) frame index per patch
    stamps: np.ndarray  # (P,) frame timestamps
    target: np.ndarray  # (P, k, k, 3)
    mask: np.ndarray  # (P, k, k)
    local_dirs: np.ndarray  # (P*k*k, 3)

    @property
    def n_patches(self) -> int:
        return len(self.frames)

    @property
    def patch_size(self) -> int:
        return self.target.shape[1]

    @property
    def ray_patch(self) -> np.ndarray:
        k = self.patch_size
        return np.repeat(np.arange(self.n_patches), k * k)


@dataclass
class LidarBatch:
    sensor: str
    stamps: np.ndarray  # (N,) one per ray
    local_dirs: np.ndarray  # (N, 3)
    ranges: np.ndarray  # (N,)


@dataclass
class Batch:
    cameras: dict[str, CameraBatch]
    lidars: dict[str, LidarBatch]

    def __post_init__(self) -> None:
        if not self.cameras and not self.lidars:
            raise EmptyBatchError("batch holds neither patches nor LiDAR rays")


@dataclass
class StepReport:
    losses: dict[str, float] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)
    gradients: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class SensorError:
    rot_deg: float
    trans_cm: float
    time_ms: float


@dataclass
class CalibrationResult:
    mode: str
    seed: int
    extrinsics: dict[str, RigidTransform]
    time_offsets: dict[str, float]
    errors: dict[str, SensorError]
    history: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0

    def error_table(self) -> list[tuple[str, float, float, float]]:
        return [(s, e.rot_deg, e.trans_cm, e.time_ms) for s, e in self.errors.items()]


def sensor_errors(rig, extrinsics: dict[str, RigidTransform], offsets: dict[str, float]) -> dict[str, SensorError]:
    out = {}
    for sid in rig.non_reference_ids:
        rot, trans = pose_error(extrinsics[sid], rig.extrinsics[sid])
        out[sid] = SensorError(rot, trans, 1000.0 * abs(offsets[sid] - rig.time_offsets[sid]))
    return out


# ---------------------------------------------------------------------------
# losses on rendered batches
# ---------------------------------------------------------------------------


def camera_loss(fld: VoxelRadianceField, cfg: TrainConfig, cb: CameraBatch, o: np.ndarray, d: np.ndarray,
                keep: np.ndarray, jitter: Callable[[int], np.ndarray], smooth: bool, want_params: bool,
                grad_buf: Optional[np.ndarray], keep_samples: bool = False):
    """Photometric loss of the kept rays of a camera batch rendered in ``fld``.

    Returns the loss, per-ray origin/direction gradients (zero for dropped
    rays), the render and the kept indices. Parameter gradients accumulate
    into ``grad_buf`` when ``want_params``.
    """
    k = cb.patch_size
    sel = np.flatnonzero(keep)
    u = jitter(len(sel))
    res = fld.render(o[sel], d[sel], u, cfg.near, cfg.far, cfg.background, keep_samples, cfg.trans_stop)
    tgt = cb.target.reshape(-1, 3)[sel]
    msk = cb.mask.reshape(-1)[sel].astype(np.float64)
    loss, g_col = losses.color_l2(res.color, tgt, msk)
    g_col = g_col * cfg.color_weight
    loss *= cfg.color_weight
    g_depth = np.zeros(len(sel))
    # structural and smoothness terms on patches that survived intact
    full = keep.reshape(cb.n_patches, k * k).all(axis=1) & cb.mask.reshape(cb.n_patches, -1).all(axis=1)
    if full.any() and (cfg.dssim_weight > 0 or (smooth and cfg.depth_smooth_weight > 0)):
        pos = np.full(len(keep), -1)
        pos[sel] = np.arange(len(sel))
        rows = pos.reshape(cb.n_patches, k * k)[full]  # (Q, k*k) indices into sel
        if cfg.dssim_weight > 0:
            pred = res.color[rows].reshape(-1, k, k, 3)
            l_s, g_s = losses.dssim(pred, cb.target[full])
            loss += cfg.dssim_weight * l_s
            np.add.at(g_col, rows.reshape(-1), cfg.dssim_weight * g_s.reshape(-1, 3))
        if smooth and cfg.depth_smooth_weight > 0:
            dep = res.depth[rows].reshape(-1, k, k)
            l_d, g_d = losses.depth_smoothness(dep)
            loss += cfg.depth_smooth_weight * l_d
            np.add.at(g_depth, rows.reshape(-1), cfg.depth_smooth_weight * g_d.reshape(-1))
    grads = fld.backward(o[sel], d[sel], u, cfg.near, cfg.far, cfg.background, g_col, g_depth,
                         None, grad_buf, want_params, cfg.trans_stop)
    g_o = np.zeros((len(keep), 3))
    g_d = np.zeros((len(keep), 3))
    g_o[sel] = grads.origin
    g_d[sel] = grads.direction
    return loss, g_o, g_d, res, sel


def lidar_loss(fld: VoxelRadianceField, cfg: TrainConfig, ranges: np.ndarray, o: np.ndarray, d: np.ndarray,
               keep: np.ndarray, jitter: Callable[[int], np.ndarray], want_params: bool,
               grad_buf: Optional[np.ndarray]):
    """L1 range loss of the kept LiDAR rays rendered in ``fld``."""
    sel = np.flatnonzero(keep)
    u = jitter(len(sel))
    res = fld.render(o[sel], d[sel], u, cfg.near, cfg.far, cfg.background, trans_stop=cfg.trans_stop)
    loss, g_dep = losses.lidar_l1(res.depth, ranges[sel])
    g_dep *= cfg.depth_weight
    grads = fld.backward(o[sel], d[sel], u, cfg.near, cfg.far, cfg.background, None, g_dep,
                         None, grad_buf, want_params, cfg.trans_stop)
    g_o = np.zeros((len(keep), 3))
    g_d = np.zeros((len(keep), 3))
    g_o[sel] = grads.origin
    g_d[sel] = grads.direction
    return cfg.depth_weight * loss, g_o, g_d


# ---------------------------------------------------------------------------
# the calibrator
# ---------------------------------------------------------------------------


class Calibrator:
    """Holds fields, grids, corrections and optimizer state for one run."""

    def __init__(self, dataset: Dataset, prior: CalibrationPrior, config: TrainConfig, mode: str = "soac"):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        rig = dataset.rig
        for sid in rig.non_reference_ids:
            if sid not in prior.extrinsics or sid not in prior.time_offsets:
                raise ConfigError(f"prior lacks sensor {sid!r}")
        for sid in config.delays:
            if sid not in rig.sensor_ids:
                raise ConfigError(f"delay given for unknown sensor {sid!r}")
        self.dataset = dataset
        self.rig = rig
        self.prior = CalibrationPrior(dict(prior.extrinsics), dict(prior.time_offsets))
        self.prior.extrinsics[rig.reference_id] = RigidTransform.identity()
        self.prior.time_offsets[rig.reference_id] = 0.0
        self.config = config
        self.mode = mode
        self.rng = np.random.default_rng(config.seed)
        self.use_grids = mode in ("soac", "soac-no-sigmoid", "soac-no-delay")
        self.params = CorrectionParams.zeros(
            rig.non_reference_ids, config.translation_bound, config.time_bound, bounded=mode != "soac-no-sigmoid"
        )
        self.calib_adam = {s: AdamState.zeros(7) for s in rig.non_reference_ids}
        aabb = dataset.scene.aabb
        ext = aabb[1] - aabb[0]
        res = tuple(max(2, int(math.ceil(e / config.field_voxel)) + 1) for e in ext)
        owners = [SHARED_FIELD] if mode == "baseline" else [c.sensor_id for c in rig.cameras]
        self.fields: dict[str, VoxelRadianceField] = {}
        for owner in owners:
            self.fields[owner] = VoxelRadianceField.initialized(
                res, aabb, self.rng, density_raw=config.density_init,
                density_scale=config.density_scale, field_id=owner,
            )
        self.field_adam = {o: AdamState.zeros(f.n_params) for o, f in self.fields.items()}
        self._grad = {o: np.zeros(f.n_params) for o, f in self.fields.items()}
        self.grids = {
            o: VisibilityGrid(aabb, config.grid_resolution, o, config.grid_w_min,
                              n_probe=config.grid_n_probe, tau=config.grid_tau)
            for o in self.fields
        }
        self.epoch = 0
        self.step_count = 0
        self.history: list[dict] = []
        self._prepare_data()

    # -------------------------------------------------------------- data

    def _prepare_data(self) -> None:
        self._cam_dirs = {}
        self._cam_pixels = {}
        self._cam_masks = {}
        for cam in self.rig.cameras:
            self._cam_dirs[cam.sensor_id] = cam.local_directions(cam.pixel_grid())
            frames = self.dataset.frames[cam.sensor_id]
            pixels = np.stack([f.pixels for f in frames])
            # one target pyramid level per stride in the schedule
            self._cam_pixels[cam.sensor_id] = {
                st: pixels if st == 1 else gaussian_filter(pixels, (0, 0.5 * st, 0.5 * st, 0), mode="nearest")
                for _, st in self.config.patch_strides
            }
            self._cam_masks[cam.sensor_id] = np.stack([f.mask for f in frames])
        self._lidar_hits = {}
        for lidar in self.rig.lidars:
            scans = self.dataset.scans[lidar.sensor_id]
            idx = [(s, b) for s, scan in enumerate(scans) for b in np.flatnonzero(scan.hit)]
            self._lidar_hits[lidar.sensor_id] = np.array(idx, dtype=np.int64).reshape(-1, 2)

    def delay(self, sensor: str) -> int:
        if self.mode in ("baseline", "soac-no-delay"):
            return 0
        return int(self.config.delays.get(sensor, 0))

    def active(self, sensor: str, epoch: Optional[int] = None) -> bool:
        return (self.epoch if epoch is None else epoch) >= self.delay(sensor)

    def active_fields(self) -> list[str]:
        if self.mode == "baseline":
            return [SHARED_FIELD]
        return [c.sensor_id for c in self.rig.cameras if self.active(c.sensor_id)]

    @property
    def steps_per_epoch(self) -> int:
        if self.config.steps_per_epoch is not None:
            return self.config.steps_per_epoch
        cam = self.rig.cameras[0]
        n_pix = cam.width * cam.height * len(cam.timestamps)
        return max(1, n_pix // (self.config.patches_per_step * self.config.patch_size**2))

    def sample_batch(self) -> Batch:
        cfg = self.config
        stride = cfg.patch_stride(self.epoch)
        k = min(cfg.patch_size, *(1 + (min(c.width, c.height) - 1) // stride for c in self.rig.cameras))
        k -= 1 - k % 2
        span = (k - 1) * stride + 1
        cams = {}
        for cam in self.rig.cameras:
            sid = cam.sensor_id
            n = cfg.patches_per_step
            fr = self.rng.integers(0, len(cam.timestamps), size=n)
            rows = self.rng.integers(0, cam.height - span + 1, size=n)
            cols = self.rng.integers(0, cam.width - span + 1, size=n)
            ii = rows[:, None, None] + stride * np.arange(k)[None, :, None]
            jj = cols[:, None, None] + stride * np.arange(k)[None, None, :]
            ff = fr[:, None, None]
            cams[sid] = CameraBatch(
                sid, fr, np.asarray(cam.timestamps)[fr], self._cam_pixels[sid][stride][ff, ii, jj],
                self._cam_masks[sid][ff, ii, jj], self._cam_dirs[sid][ii, jj].reshape(-1, 3),
            )
        lids = {}
        for lidar in self.rig.lidars:
            sid = lidar.sensor_id
            hits = self._lidar_hits[sid]
            if not self.active(sid) or len(hits) == 0 or cfg.lidar_rays_per_step == 0:
                continue
            pick = hits[self.rng.integers(0, len(hits), size=cfg.lidar_rays_per_step)]
            scans = self.dataset.scans[sid]
            stamps = np.array([scans[s].timestamp for s in pick[:, 0]])
            dirs = np.stack([scans[s].directions[b] for s, b in pick])
            rng_ = np.array([scans[s].ranges[b] for s, b in pick])
            lids[sid] = LidarBatch(sid, stamps, dirs, rng_)
        return Batch(cams, lids)

    # -------------------------------------------------------------- rays

    def _camera_rays(self, cb: CameraBatch):
        chain = pose_chain(self.rig.trajectory, cb.stamps, self.prior, self.params, cb.sensor)
        fr = cb.ray_patch
        d = np.einsum("nij,nj->ni", chain.R_world[fr], cb.local_dirs)
        o = chain.origin[fr]
        return chain, fr, o, d

    def _lidar_rays(self, lb: LidarBatch):
        chain = pose_chain(self.rig.trajectory, lb.stamps, self.prior, self.params, lb.sensor)
        fr = np.arange(len(lb.stamps))
        d = np.einsum("nij,nj->ni", chain.R_world, lb.local_dirs)
        return chain, fr, chain.origin, d

    def _jitter(self, n: int) -> np.ndarray:
        return self.rng.random((n, self.config.n_samples))

    def _camera_loss(self, fld, cb, o, d, keep, smooth, want_params, grad_buf, keep_samples=False):
        return camera_loss(fld, self.config, cb, o, d, keep, self._jitter, smooth, want_params, grad_buf,
                           keep_samples)

    def _lidar_loss(self, fld, lb, o, d, keep, want_params, grad_buf):
        return lidar_loss(fld, self.config, lb.ranges, o, d, keep, self._jitter, want_params, grad_buf)

    def _keep(self, owner: str, o, d, far=None) -> np.ndarray:
        if not self.use_grids:
            return np.ones(len(o), dtype=bool)
        cfg = self.config
        return self.grids[owner].filter_rays(o, d, cfg.near, cfg.far if far is None else far)

    def _calib_update(self, sensor: str, grad: np.ndarray) -> None:
        st = self.calib_adam[sensor]
        st.step += 1
        K.adam_update(self.params.raw[sensor], np.ascontiguousarray(grad, dtype=np.float64), st.m, st.v,
                      self.config.calib_lr(self.epoch), st.beta1, st.beta2, st.eps, st.step)

    def _field_update(self, owner: str) -> None:
        apply_gradients(self.fields[owner], self._grad[owner], self.field_adam[owner], self.config.field_lr)

    # -------------------------------------------------------------- steps

    def scene_training_step(self, batch: Batch) -> StepReport:
        """Train each active field on its own camera's patches, plus LiDAR depth."""
        if self.mode == "baseline":
            return self._shared_step(batch)
        rep = StepReport()
        active = self.active_fields()
        for owner in active:
            self._grad[owner].fill(0.0)
        touched = set()
        for sid, cb in batch.cameras.items():
            if sid not in active:
                continue
            _, _, o, d = self._camera_rays(cb)
            keep = np.ones(len(o), dtype=bool)
            loss, _, _, res, _ = self._camera_loss(
                self.fields[sid], cb, o, d, keep, True, True, self._grad[sid], keep_samples=self.use_grids
            )
            if self.use_grids:
                self.grids[sid].fill_from_render(res)
            rep.losses[f"scene/{sid}"] = loss
            touched.add(sid)
        for sid, lb in batch.lidars.items():
            if not self.active(sid):
                continue
            chain, fr, o, d = self._lidar_rays(lb)
            g_calib = np.zeros(7)
            n_used = 0
            for owner in active:
                keep = self._keep(owner, o, d, lb.ranges)
                if not keep.any():
                    continue
                loss, g_o, g_d = self._lidar_loss(self.fields[owner], lb, o, d, keep, True, self._grad[owner])
                touched.add(owner)
                rep.losses[f"scene/{sid}@{owner}"] = loss
                g_calib += chain_gradient(chain, self.params, fr, lb.local_dirs, g_o, g_d)
                n_used += 1
            if n_used and self.config.lidar_in_scene_step and sid in self.params.raw:
                self._calib_update(sid, g_calib / n_used)
        for owner in sorted(touched):
            self._field_update(owner)
        return rep

    def registration_step(self, batch: Batch) -> StepReport:
        """Update corrections against frozen fields of the other sensors."""
        rep = StepReport()
        if self.mode == "baseline":
            return rep
        active = self.active_fields()
        for sid, cb in batch.cameras.items():
            if sid not in self.params.raw:
                continue
            targets = [j for j in active if j != sid]
            chain, fr, o, d = self._camera_rays(cb)
            g = np.zeros(7)
            n_used = 0
            for j in targets:
                keep = self._keep(j, o, d)
                if not keep.any():
                    continue
                loss, g_o, g_d, _, _ = self._camera_loss(self.fields[j], cb, o, d, keep, False, False, None)
                g += self.config.cam_weight * chain_gradient(chain, self.params, fr, cb.local_dirs, g_o, g_d)
                rep.losses[f"reg/{sid}@{j}"] = self.config.cam_weight * loss
                n_used += 1
            if n_used == 0:
                rep.skipped.append(sid)
                continue
            g /= n_used
            rep.gradients[sid] = g
            self._calib_update(sid, g)
        for sid, lb in batch.lidars.items():
            if sid not in self.params.raw or not self.active(sid):
                continue
            chain, fr, o, d = self._lidar_rays(lb)
            g = np.zeros(7)
            n_used = 0
            for j in active:
                keep = self._keep(j, o, d, lb.ranges)
                if not keep.any():
                    continue
                loss, g_o, g_d = self._lidar_loss(self.fields[j], lb, o, d, keep, False, None)
                g += chain_gradient(chain, self.params, fr, lb.local_dirs, g_o, g_d)
                rep.losses[f"reg/{sid}@{j}"] = loss
                n_used += 1
            if n_used == 0:
                rep.skipped.append(sid)
                continue
            g /= n_used
            rep.gradients[sid] = g
            self._calib_update(sid, g)
        if not batch.cameras and not batch.lidars:
            raise EmptyBatchError("nothing to register")
        if rep.skipped:
            log.debug("epoch %d: skipped %s (no active target)", self.epoch, rep.skipped)
        return rep

    def _shared_step(self, batch: Batch) -> StepReport:
        """One joint update of the shared field and every correction."""
        rep = StepReport()
        fld = self.fields[SHARED_FIELD]
        buf = self._grad[SHARED_FIELD]
        buf.fill(0.0)
        grads: dict[str, np.ndarray] = {}
        for sid, cb in batch.cameras.items():
            chain, fr, o, d = self._camera_rays(cb)
            loss, g_o, g_d, _, _ = self._camera_loss(fld, cb, o, d, np.ones(len(o), bool), True, True, buf)
            rep.losses[f"shared/{sid}"] = loss
            if sid in self.params.raw:
                grads[sid] = self.config.cam_weight * chain_gradient(chain, self.params, fr, cb.local_dirs, g_o, g_d)
        for sid, lb in batch.lidars.items():
            chain, fr, o, d = self._lidar_rays(lb)
            loss, g_o, g_d = self._lidar_loss(fld, lb, o, d, np.ones(len(o), bool), True, buf)
            rep.losses[f"shared/{sid}"] = loss
            if sid in self.params.raw:
                grads[sid] = chain_gradient(chain, self.params, fr, lb.local_dirs, g_o, g_d)
        self._field_update(SHARED_FIELD)
        for sid, g in grads.items():
            rep.gradients[sid] = g
            self._calib_update(sid, g)
        return rep

    # -------------------------------------------------------------- loop

    def current_estimates(self) -> tuple[dict[str, RigidTransform], dict[str, float]]:
        extr, offs = {}, {}
        for sid in self.rig.sensor_ids:
            extr[sid], offs[sid] = estimate(self.prior, self.params, sid)
        return extr, offs

    def errors(self) -> dict[str, SensorError]:
        return sensor_errors(self.rig, *self.current_estimates())

    def run_epoch(self) -> dict:
        if self.use_grids and self.epoch > 0 and self.epoch % self.config.grid_reset_every == 0:
            for g in self.grids.values():
                g.reset()
        sums: dict[str, float] = {}
        skipped: dict[str, int] = {}
        n = self.steps_per_epoch
        for _ in range(n):
            batch = self.sample_batch()
            r1 = self.scene_training_step(batch)
            r2 = self.registration_step(batch)
            for key, v in {**r1.losses, **r2.losses}.items():
                sums[key] = sums.get(key, 0.0) + v / n
            for s in r2.skipped:
                skipped[s] = skipped.get(s, 0) + 1
            self.step_count += 1
        entry = {
            "epoch": self.epoch,
            "calib_lr": self.config.calib_lr(self.epoch),
            "losses": sums,
            "skipped": skipped,
            "errors": {s: vars(e).copy() for s, e in self.errors().items()},
            "corrections": {s: {"translation": self.params.translation(s).tolist(), "time": self.params.time(s)}
                            for s in self.params.sensors},
        }
        self.history.append(entry)
        self.epoch += 1
        return entry

    def run(self) -> CalibrationResult:
        t0 = time.perf_counter()
        while self.epoch < self.config.epochs:
            e = self.run_epoch()
            log.info("epoch %d %s", e["epoch"], {s: (round(v["rot_deg"], 3), round(v["trans_cm"], 2),
                                                     round(v["time_ms"], 2)) for s, v in e["errors"].items()})
        extr, offs = self.current_estimates()
        return CalibrationResult(self.mode, self.config.seed, extr, offs, sensor_errors(self.rig, extr, offs),
                                 self.history, time.perf_counter() - t0)

    # -------------------------------------------------------------- checkpoints

    def save_checkpoint(self, directory: str | Path) -> None:
        """Field files plus one archive with corrections, optimizer moments, grids and RNG state."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for owner, fld in self.fields.items():
            fld.save(out / f"field_{owner}.vox")
            st = self.field_adam[owner]
            arrays[f"field/{owner}/params"] = fld.params
            arrays[f"field/{owner}/m"] = st.m
            arrays[f"field/{owner}/v"] = st.v
            arrays[f"field/{owner}/step"] = np.array(st.step)
            arrays[f"grid/{owner}"] = self.grids[owner].flags
        for sid, raw in self.params.raw.items():
            st = self.calib_adam[sid]
            arrays[f"calib/{sid}/raw"] = raw
            arrays[f"calib/{sid}/m"] = st.m
            arrays[f"calib/{sid}/v"] = st.v
            arrays[f"calib/{sid}/step"] = np.array(st.step)
        meta = {"epoch": self.epoch, "step": self.step_count, "mode": self.mode,
                "rng": self.rng.bit_generator.state, "history": self.history}
        arrays["meta"] = np.array(json.dumps(meta))
        np.savez(out / "state.npz", **arrays)

    def load_checkpoint(self, directory: str | Path) -> None:
        data = np.load(Path(directory) / "state.npz")
        meta = json.loads(str(data["meta"]))
        if meta["mode"] != self.mode:
            raise ConfigError(f"checkpoint was written in mode {meta['mode']!r}")
        for owner, fld in self.fields.items():
            fld.params[:] = data[f"field/{owner}/params"]
            st = self.field_adam[owner]
            st.m[:] = data[f"field/{owner}/m"]
            st.v[:] = data[f"field/{owner}/v"]
            st.step = int(data[f"field/{owner}/step"])
            self.grids[owner].flags[:] = data[f"grid/{owner}"]
        for sid in self.params.raw:
            self.params.raw[sid][:] = data[f"calib/{sid}/raw"]
            st = self.calib_adam[sid]
            st.m[:] = data[f"calib/{sid}/m"]
            st.v[:] = data[f"calib/{sid}/v"]
            st.step = int(data[f"calib/{sid}/step"])
        self.epoch = int(meta["epoch"])
        self.step_count = int(meta["step"])
        self.history = meta["history"]
        self.rng.bit_generator.state = meta["rng"]


def run_calibration(dataset: Dataset, prior: CalibrationPrior, config: TrainConfig, mode: str = "soac",
                    resume_from: Optional[str | Path] = None) -> CalibrationResult:
    if mode == "baseline":
        return run_baseline_shared_field(dataset, prior, config)
    cal = Calibrator(dataset, prior, config, mode)
    if resume_from is not None:
        cal.load_checkpoint(resume_from)
    return cal.run()


def run_baseline_shared_field(dataset: Dataset, prior: CalibrationPrior, config: TrainConfig) -> CalibrationResult:
    """A single field trained by every sensor while all corrections optimize jointly against it."""
    return Calibrator(dataset, prior, config, "baseline").run()
