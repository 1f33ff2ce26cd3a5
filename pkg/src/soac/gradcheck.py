"""Finite-difference validation of every analytic gradient in the pipeline.

Each configuration draws a small random voxel field and rays, then compares
analytic gradients against central differences for

* every raw field parameter,
* ray origins and directions,
* the seven raw corrections of a sensor (rotation, translation, time offset),
  pushed through the camera patch loss or the LiDAR range loss.

Configurations whose rays sit within a small margin of a non-differentiable
point (a sample on a voxel face, a tie in the box clip, a trajectory knot)
are redrawn, so the comparison only probes smooth regions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .calibration import (
    CameraBatch,
    CorrectionParams,
    TrainConfig,
    camera_loss,
    chain_gradient,
    lidar_loss,
    pose_chain,
)
from .dataset import CalibrationPrior
from .field import VoxelRadianceField
from .geometry import RigidTransform, Trajectory, exp_so3

GROUPS = (
    "field_params",
    "ray_origin",
    "ray_direction",
    "correction_rotation",
    "correction_translation",
    "time_offset",
)

_SENSOR = "sensor"
_GRID_MARGIN = 1e-3  # grid units from a voxel face
_CLIP_MARGIN = 1e-4  # metres between competing clip planes
_KNOT_MARGIN = 1e-4  # seconds from a trajectory knot


@dataclass
class GradcheckSettings:
    n_configs: int = 100
    seed: int = 0
    rel_tol: float = 1e-3
    abs_floor: float = 1e-8
    perturb: Optional[float] = None  # overrides every step size below
    h_params: float = 1e-3
    h_ray: float = 1e-6
    h_raw: float = 1e-6
    resolution: int = 4
    n_rays: int = 3
    n_samples: int = 12
    patch_size: int = 3

    def __post_init__(self) -> None:
        if self.n_configs < 1:
            raise ValueError("n_configs must be positive")
        if self.resolution < 2 or self.n_samples < 2 or self.patch_size < 1:
            raise ValueError("resolution and n_samples must be >= 2, patch_size >= 1")
        if self.perturb is not None and not self.perturb > 0:
            raise ValueError("perturb must be positive")

    def step(self, kind: str) -> float:
        if self.perturb is not None:
            return self.perturb
        return {"params": self.h_params, "ray": self.h_ray, "raw": self.h_raw}[kind]


@dataclass
class GroupResult:
    n_values: int = 0
    max_rel_err: float = 0.0
    worst_config: int = -1

    def update(self, config: int, analytic: np.ndarray, numeric: np.ndarray, abs_floor: float) -> None:
        a = np.asarray(analytic, dtype=np.float64).reshape(-1)
        f = np.asarray(numeric, dtype=np.float64).reshape(-1)
        err = relative_error(a, f, abs_floor)
        self.n_values += a.size
        if err.size and err.max() > self.max_rel_err:
            self.max_rel_err = float(err.max())
            self.worst_config = config


@dataclass
class GradcheckReport:
    settings: GradcheckSettings
    groups: dict[str, GroupResult] = field(default_factory=lambda: {g: GroupResult() for g in GROUPS})
    redraws: int = 0

    @property
    def passed(self) -> bool:
        return all(g.max_rel_err <= self.settings.rel_tol for g in self.groups.values())

    def format(self) -> str:
        s = self.settings
        steps = (f"h={s.perturb:g}" if s.perturb is not None
                 else f"h_params={s.h_params:g} h_ray={s.h_ray:g} h_raw={s.h_raw:g}")
        lines = [
            f"gradient check: {s.n_configs} configurations, seed {s.seed}, {steps}",
            f"tolerance: relative {s.rel_tol:g}, absolute floor {s.abs_floor:g}",
            f"redrawn near kinks: {self.redraws}",
            f"{'group':<24}{'values':>8}{'max_rel_err':>14}{'worst':>7}  status",
        ]
        for name in GROUPS:
            g = self.groups[name]
            ok = "ok" if g.max_rel_err <= s.rel_tol else "FAIL"
            lines.append(f"{name:<24}{g.n_values:>8d}{g.max_rel_err:>14.3e}{g.worst_config:>7d}  {ok}")
        lines.append(f"result: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float) -> np.ndarray:
    """``|a - f| / max(|a|, |f|, abs_floor)`` elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), abs_floor)


# ---------------------------------------------------------------------------
# kink screening
# ---------------------------------------------------------------------------


def _smooth_rays(fld: VoxelRadianceField, o: np.ndarray, d: np.ndarray, u: np.ndarray,
                 near: np.ndarray, far: np.ndarray) -> bool:
    """True when every ray is clear of clip ties and every sample of voxel faces."""
    lo, hi = fld.lo, fld.hi
    res = np.asarray(fld.resolution)
    S = u.shape[1]
    for r in range(len(o)):
        with np.errstate(divide="ignore"):
            ta = (lo - o[r]) / d[r]
            tb = (hi - o[r]) / d[r]
        enter = np.sort(np.append(np.minimum(ta, tb), near[r]))[::-1]
        leave = np.sort(np.append(np.maximum(ta, tb), far[r]))
        if not np.all(np.isfinite(enter[:2])) or not np.all(np.isfinite(leave[:2])):
            return False
        if enter[0] - enter[1] < _CLIP_MARGIN or leave[1] - leave[0] < _CLIP_MARGIN:
            return False
        t0, t1 = enter[0], leave[0]
        if t1 - t0 < 0.05:
            return False
        t = t0 + (t1 - t0) * (np.arange(S) + u[r]) / S
        g = (o[r] + t[:, None] * d[r] - lo) * (res - 1) / (hi - lo)
        interior = (g > _GRID_MARGIN) & (g < res - 1 - _GRID_MARGIN)
        dist = np.abs(g - np.round(g))
        if np.any(interior & (dist < _GRID_MARGIN)):
            return False
    return True


# ---------------------------------------------------------------------------
# random draws
# ---------------------------------------------------------------------------


def _random_field(rng: np.random.Generator, res: int, aabb: np.ndarray) -> VoxelRadianceField:
    fld = VoxelRadianceField((res, res, res), aabb, density_scale=float(rng.uniform(0.5, 4.0)))
    p = fld.params.reshape(-1, 4)
    p[:, 0] = rng.normal(0.0, 1.5, len(p))
    p[:, 1:] = rng.normal(0.0, 1.0, (len(p), 3))
    return fld


def _unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _render_case(rng: np.random.Generator, s: GradcheckSettings):
    lo = rng.uniform(-1.0, 0.0, 3)
    aabb = np.stack([lo, lo + rng.uniform(1.0, 2.0, 3)])
    fld = _random_field(rng, s.resolution, aabb)
    n = s.n_rays
    target = aabb[0] + rng.uniform(0.2, 0.8, (n, 3)) * (aabb[1] - aabb[0])
    d = _unit(rng, n)
    o = target - d * rng.uniform(0.5, 3.0, (n, 1))
    near = rng.uniform(0.0, 0.5, n)
    far = rng.uniform(2.0, 6.0, n)
    u = rng.uniform(0.05, 0.95, (n, s.n_samples))
    bg = rng.uniform(0.0, 1.0, 3)
    w = (rng.normal(size=(n, 3)), rng.normal(size=n), rng.normal(size=n))
    return fld, o, d, u, near, far, bg, w


def _trajectory(rng: np.random.Generator) -> Trajectory:
    times = np.arange(5, dtype=np.float64)
    poses = [RigidTransform(exp_so3(rng.normal(0.0, 0.3, 3)), rng.normal(0.0, 1.0, 3)) for _ in times]
    return Trajectory(times, poses)


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------


def _objective(fld, o, d, u, near, far, bg, w) -> float:
    res = fld.render(o, d, u, near, far, bg)
    return float((w[0] * res.color).sum() + (w[1] * res.depth).sum() + (w[2] * res.weight_sum).sum())


def _check_render(idx: int, rng: np.random.Generator, s: GradcheckSettings, report: GradcheckReport) -> int:
    redraws = 0
    while True:
        fld, o, d, u, near, far, bg, w = _render_case(rng, s)
        res = fld.render(o, d, u, near, far, bg)
        if _smooth_rays(fld, o, d, u, near, far) and np.all(res.weight_sum > 1e-3):
            break
        redraws += 1
    grads = fld.backward(o, d, u, near, far, bg, w[0], w[1], w[2])
    h = s.step("params")
    num = np.empty(fld.n_params)
    for i in range(fld.n_params):
        keep = fld.params[i]
        fld.params[i] = keep + h
        lp = _objective(fld, o, d, u, near, far, bg, w)
        fld.params[i] = keep - h
        lm = _objective(fld, o, d, u, near, far, bg, w)
        fld.params[i] = keep
        num[i] = (lp - lm) / (2 * h)
    report.groups["field_params"].update(idx, grads.params, num, s.abs_floor)
    h = s.step("ray")
    for name, arr, ana in (("ray_origin", o, grads.origin), ("ray_direction", d, grads.direction)):
        num = np.empty(arr.shape)
        for r in range(arr.shape[0]):
            for a in range(3):
                keep = arr[r, a]
                arr[r, a] = keep + h
                lp = _objective(fld, o, d, u, near, far, bg, w)
                arr[r, a] = keep - h
                lm = _objective(fld, o, d, u, near, far, bg, w)
                arr[r, a] = keep
                num[r, a] = (lp - lm) / (2 * h)
        report.groups[name].update(idx, ana, num, s.abs_floor)
    return redraws


class _CorrectionCase:
    """A sensor on a random trajectory observing a random field."""

    def __init__(self, rng: np.random.Generator, s: GradcheckSettings, camera: bool, bounded: bool):
        self.camera = camera
        self.cfg = TrainConfig(n_samples=s.n_samples, near=0.1, far=4.0, trans_stop=0.0,
                               background=tuple(rng.uniform(0.0, 1.0, 3)),
                               dssim_weight=0.1, depth_smooth_weight=0.5)
        self.traj = _trajectory(rng)
        prior_ext = RigidTransform(exp_so3(rng.normal(0.0, 0.5, 3)), rng.normal(0.0, 0.5, 3))
        self.prior = CalibrationPrior({_SENSOR: prior_ext}, {_SENSOR: float(rng.uniform(-0.2, 0.2))})
        raw = rng.normal(0.0, 0.5, 7)
        if not bounded:
            raw[6] *= 0.2
        self.params = CorrectionParams({_SENSOR: raw}, bounded=bounded)
        if camera:
            k = s.patch_size
            P = 2
            self.stamps = rng.uniform(0.8, 3.2, P)
            dirs = _unit(rng, P)
            # neighbouring directions around each patch centre
            offs = rng.normal(0.0, 0.05, (P, k * k, 3))
            local = (dirs[:, None, :] + offs).reshape(-1, 3)
            self.local = local / np.linalg.norm(local, axis=1, keepdims=True)
            self.batch = CameraBatch(_SENSOR, np.arange(P), self.stamps,
                                     rng.uniform(0.0, 1.0, (P, k, k, 3)),
                                     rng.uniform(size=(P, k, k)) > 0.1, self.local)
            self.frame_of_ray = self.batch.ray_patch
        else:
            n = s.n_rays * 2
            self.stamps = rng.uniform(0.8, 3.2, n)
            self.local = _unit(rng, n)
            self.frame_of_ray = np.arange(n)
            self.ranges = rng.uniform(0.5, 3.0, n)
        o, d = self.rays()
        pts = np.concatenate([o, o + 3.0 * d])
        aabb = np.stack([pts.min(axis=0) - 0.3, pts.max(axis=0) + 0.3])
        self.field = _random_field(rng, s.resolution, aabb)
        self.u = rng.uniform(0.05, 0.95, (len(o), s.n_samples))

    def rays(self):
        chain = pose_chain(self.traj, self.stamps, self.prior, self.params, _SENSOR)
        d = np.einsum("nij,nj->ni", chain.R_world[self.frame_of_ray], self.local)
        return chain.origin[self.frame_of_ray], d

    def smooth(self) -> bool:
        q = self.stamps + self.prior.time_offsets[_SENSOR] + self.params.time(_SENSOR)
        knots = self.traj.times
        if np.any(q <= knots[0] + _KNOT_MARGIN) or np.any(q >= knots[-1] - _KNOT_MARGIN):
            return False
        if np.min(np.abs(q[:, None] - knots[None, :])) < _KNOT_MARGIN:
            return False
        o, d = self.rays()
        n = len(o)
        return _smooth_rays(self.field, o, d, self.u, np.full(n, self.cfg.near), np.full(n, self.cfg.far))

    def loss(self, with_grad: bool = False):
        chain = pose_chain(self.traj, self.stamps, self.prior, self.params, _SENSOR)
        o, d = self.rays()
        keep = np.ones(len(o), dtype=bool)
        jitter = lambda m: self.u[:m]  # noqa: E731
        if self.camera:
            loss, g_o, g_d, _, _ = camera_loss(self.field, self.cfg, self.batch, o, d, keep, jitter,
                                               True, False, None)
        else:
            loss, g_o, g_d = lidar_loss(self.field, self.cfg, self.ranges, o, d, keep, jitter, False, None)
        if not with_grad:
            return loss
        return loss, chain_gradient(chain, self.params, self.frame_of_ray, self.local, g_o, g_d)


def _check_correction(idx: int, rng: np.random.Generator, s: GradcheckSettings, report: GradcheckReport) -> int:
    redraws = 0
    while True:
        case = _CorrectionCase(rng, s, camera=idx % 2 == 0, bounded=idx % 4 < 2)
        if case.smooth():
            break
        redraws += 1
    _, ana = case.loss(with_grad=True)
    raw = case.params.raw[_SENSOR]
    h = s.step("raw")
    num = np.empty(7)
    for i in range(7):
        keep = raw[i]
        raw[i] = keep + h
        lp = case.loss()
        raw[i] = keep - h
        lm = case.loss()
        raw[i] = keep
        num[i] = (lp - lm) / (2 * h)
    report.groups["correction_rotation"].update(idx, ana[:3], num[:3], s.abs_floor)
    report.groups["correction_translation"].update(idx, ana[3:6], num[3:6], s.abs_floor)
    report.groups["time_offset"].update(idx, ana[6:], num[6:], s.abs_floor)
    return redraws


def run_gradcheck(settings: Optional[GradcheckSettings] = None) -> GradcheckReport:
    """Run the whole suite; the report text depends only on the settings."""
    s = settings or GradcheckSettings()
    report = GradcheckReport(s)
    for idx in range(s.n_configs):
        rng = np.random.default_rng([s.seed, idx])
        report.redraws += _check_render(idx, rng, s, report)
        report.redraws += _check_correction(idx, rng, s, report)
    return report
