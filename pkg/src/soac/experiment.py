"""Experiment configuration, multi-seed runs and result aggregation.

A run directory holds one CSV per (mode, seed) under ``runs/``; the
aggregated ``per_seed.csv`` and ``boxstats.csv`` are rebuilt from those
files, so seeds may run as separate processes.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
import tomli
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import io
from .calibration import MODES, CalibrationResult, ConfigError, TrainConfig, run_calibration
from .dataset import MANIFEST, Dataset, NoiseSpec, generate_dataset, inject_noise, load_dataset
from .geometry import pose_error
from .scene import MotionProfile, RigLayout, default_rig, default_scene

PER_SEED_COLUMNS = (
    "seed", "mode", "sensor", "rot_deg", "trans_cm", "time_ms",
    "pose_rot_deg", "pose_trans_cm", "along_motion_cm", "speed_time_cm",
)
BOX_METRICS = ("rot_deg", "trans_cm", "time_ms", "pose_rot_deg", "pose_trans_cm")
BOX_COLUMNS = ("mode", "sensor", "metric", "n", "q1", "median", "q3",
               "whisker_low", "whisker_high", "outliers")
OVERALL = "overall"


class ConfigParseError(ValueError):
    """Invalid experiment configuration; the message names the line or field."""


class MissingDataError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ExperimentSection(_Section):
    mode: Literal["soac", "baseline", "soac-no-grid", "soac-no-sigmoid", "soac-no-delay"] = "soac"
    seeds: list[int] = Field(default_factory=lambda: list(range(10)), min_length=1)
    out_dir: str = "results"
    dataset_dir: str = "data/arc"


class SceneSection(_Section):
    trajectory: Literal["arc", "straight-constant"] = "arc"
    duration: float = Field(6.5, gt=0)
    v_start: float = Field(2.0, gt=0)
    v_end: float = Field(6.0, gt=0)
    curvature: float = 0.02
    seed: int = 7
    n_boxes_per_side: int = Field(11, ge=2)
    supersample: int = Field(4, ge=1)


class RigSection(_Section):
    width: int = Field(80, ge=8)
    height: int = Field(60, ge=8)
    focal: float = Field(60.0, gt=0)
    n_frames: int = Field(40, ge=2)
    fps: float = Field(6.0, gt=0)
    diagonal_yaw_deg: float = 55.0
    lidar_azimuth: int = Field(360, ge=1)
    lidar_elevations_deg: list[float] = Field(default_factory=lambda: list(RigLayout().lidar_elevations_deg))
    lidar_max_range: float = Field(60.0, gt=0)
    time_offsets: dict[str, float] = Field(default_factory=lambda: dict(RigLayout().time_offsets))


class NoiseSection(_Section):
    translation_m: float = Field(0.5, ge=0)
    rotation_deg: float = Field(5.0, ge=0)
    time_s: float = Field(0.1, ge=0)


_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


class ExperimentConfig(_Section):
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    scene: SceneSection = Field(default_factory=SceneSection)
    rig: RigSection = Field(default_factory=RigSection)
    noise: NoiseSection = Field(default_factory=NoiseSection)
    train: dict[str, Any] = Field(default_factory=dict)

    @field_validator("train")
    @classmethod
    def _known_train_keys(cls, v: dict) -> dict:
        unknown = sorted(set(v) - _TRAIN_FIELDS)
        if unknown:
            raise ValueError(f"unknown train setting(s): {', '.join(unknown)}")
        try:
            TrainConfig(**v)
        except (ConfigError, TypeError) as exc:
            raise ValueError(str(exc)) from None
        return v

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed})

    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(self.noise.translation_m, self.noise.rotation_deg, self.noise.time_s)

    def motion_profile(self) -> MotionProfile:
        s = self.scene
        return MotionProfile(s.trajectory, s.duration, s.v_start, s.v_end, s.curvature)

    def rig_layout(self) -> RigLayout:
        r = self.rig
        return RigLayout(r.width, r.height, r.focal, r.n_frames, r.fps, r.diagonal_yaw_deg, r.lidar_azimuth,
                         tuple(r.lidar_elevations_deg), r.lidar_max_range, dict(r.time_offsets))


def _line_of(text: str, loc: tuple) -> Optional[int]:
    """Best-effort line number of the key at ``loc`` (section, key, ...)."""
    keys = [str(k) for k in loc if not isinstance(k, int)]
    if not keys:
        return None
    section = keys[0]
    lines = text.splitlines()
    current = None
    for i, line in enumerate(lines, 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            if len(keys) == 1 and current == section:
                return i
            continue
        if current == section and len(keys) > 1 and re.match(rf"^{re.escape(keys[1])}\s*=", s):
            return i
        if current is None and re.match(rf"^{re.escape(section)}\s*=", s):
            return i
    return None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigParseError(f"{source}: {exc}") from None
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            loc = tuple(err["loc"])
            where = ".".join(str(k) for k in loc)
            line = _line_of(text, loc)
            at = f" (line {line})" if line else ""
            msgs.append(f"{source}: {where}{at}: {err['msg']}")
        raise ConfigParseError("\n".join(msgs)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


# ---------------------------------------------------------------------------
# box statistics
# ---------------------------------------------------------------------------


@dataclass
class BoxStats:
    """Quartiles (linear interpolation), 1.5·IQR whiskers clamped to the data, and outliers."""

    n: int
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: list[float] = field(default_factory=list)

    @classmethod
    def from_values(cls, values) -> "BoxStats":
        v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
        if v.size == 0:
            raise MissingDataError("no values to summarize")
        q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
        iqr = q3 - q1
        lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
        inside = v[(v >= lo_fence) & (v <= hi_fence)]
        outliers = [float(x) for x in v[(v < lo_fence) | (v > hi_fence)]]
        return cls(int(v.size), float(q1), float(med), float(q3),
                   float(inside.min()), float(inside.max()), outliers)


# ---------------------------------------------------------------------------
# per-seed metrics
# ---------------------------------------------------------------------------


@dataclass
class SeedRow:
    seed: int
    mode: str
    sensor: str
    rot_deg: float
    trans_cm: float
    time_ms: float
    pose_rot_deg: float
    pose_trans_cm: float
    along_motion_cm: float
    speed_time_cm: float


def sensor_rows(dataset: Dataset, result: CalibrationResult) -> list[SeedRow]:
    """Extrinsic/temporal errors plus the mean absolute-pose error over the sensor's frames.

    Wall time is kept out of the rows (it lives in the run record) so the
    CSVs are reproducible byte for byte.

    ``along_motion_cm`` is the extrinsic translation error projected on the
    mean direction of motion (reference frame, signed); ``speed_time_cm`` is
    mean speed times the signed time-offset error. A translation error that
    compensates a time error gives ``along ≈ -speed_time``.
    """
    rig = dataset.rig
    traj = rig.trajectory
    rows = []
    for sid in rig.non_reference_ids:
        est_e, est_d = result.extrinsics[sid], result.time_offsets[sid]
        tru_e, tru_d = rig.extrinsics[sid], rig.time_offsets[sid]
        rots, trans, dirs, speeds = [], [], [], []
        for t in rig.sensor(sid).timestamps:
            q_true = min(max(t + tru_d, traj.start), traj.end)
            q_est = min(max(t + est_d, traj.start), traj.end)
            p_true = traj.interpolate(q_true) @ tru_e
            p_est = traj.interpolate(q_est) @ est_e
            r, c = pose_error(p_est, p_true)
            rots.append(r)
            trans.append(c)
            der = traj.interpolate_with_derivative(q_true)
            v_body = der.pose.R.T @ der.velocity
            speed = float(np.linalg.norm(der.velocity))
            speeds.append(speed)
            if speed > 0:
                dirs.append(v_body / speed)
        m = np.mean(dirs, axis=0) if dirs else np.zeros(3)
        if np.linalg.norm(m) > 0:
            m = m / np.linalg.norm(m)
        along = 100.0 * float((est_e.translation - tru_e.translation) @ m)
        speed_time = 100.0 * float(np.mean(speeds)) * (est_d - tru_d)
        err = result.errors[sid]
        rows.append(SeedRow(result.seed, result.mode, sid, err.rot_deg, err.trans_cm, err.time_ms,
                            float(np.mean(rots)), float(np.mean(trans)), along, speed_time))
    return rows


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def write_rows(path: str | Path, rows: list[SeedRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PER_SEED_COLUMNS)
        for r in sorted(rows, key=lambda r: (r.mode, r.seed, r.sensor)):
            w.writerow([r.seed, r.mode, r.sensor] + [_fmt(getattr(r, c)) for c in PER_SEED_COLUMNS[3:]])


def read_rows(path: str | Path) -> list[SeedRow]:
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"{path} not found")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(PER_SEED_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise MissingDataError(f"{path}: missing columns {sorted(missing)}")
        out = []
        for rec in reader:
            out.append(SeedRow(int(rec["seed"]), rec["mode"], rec["sensor"],
                               *(float(rec[c]) for c in PER_SEED_COLUMNS[3:])))
    return out


def boxstats_table(rows: list[SeedRow]) -> list[dict]:
    """Box statistics per (mode, sensor, metric), plus per-mode overall rows.

    The overall value of a metric is the mean over sensors of their medians.
    """
    table = []
    for mode in sorted({r.mode for r in rows}):
        sensors = sorted({r.sensor for r in rows if r.mode == mode})
        medians: dict[str, list[float]] = {m: [] for m in BOX_METRICS}
        for sid in sensors:
            sel = [r for r in rows if r.mode == mode and r.sensor == sid]
            for metric in BOX_METRICS:
                b = BoxStats.from_values([getattr(r, metric) for r in sel])
                medians[metric].append(b.median)
                table.append({"mode": mode, "sensor": sid, "metric": metric, "stats": b})
        for metric in BOX_METRICS:
            table.append({"mode": mode, "sensor": OVERALL, "metric": metric,
                          "value": float(np.mean(medians[metric])), "n": len(sensors)})
    return table


def write_boxstats(path: str | Path, rows: list[SeedRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOX_COLUMNS)
        for e in boxstats_table(rows):
            if e["sensor"] == OVERALL:
                w.writerow([e["mode"], OVERALL, e["metric"], e["n"], "", _fmt(e["value"]), "", "", "", ""])
                continue
            b = e["stats"]
            w.writerow([e["mode"], e["sensor"], e["metric"], b.n, _fmt(b.q1), _fmt(b.median), _fmt(b.q3),
                        _fmt(b.whisker_low), _fmt(b.whisker_high), ";".join(_fmt(x) for x in b.outliers)])


# ---------------------------------------------------------------------------
# degeneracy report
# ---------------------------------------------------------------------------


@dataclass
class DegeneracyReport:
    sensors: list[str]
    pose_trans_cm: list[float]  # mean over seeds
    extrinsic_trans_cm: list[float]
    compensation_ratio: float  # least-squares slope of -along on speed·Δδ
    n_points: int

    @property
    def compensated_sensors(self) -> int:
        return sum(p < 0.25 * e for p, e in zip(self.pose_trans_cm, self.extrinsic_trans_cm))

    def format(self) -> str:
        lines = ["sensor,mean_pose_trans_cm,mean_extrinsic_trans_cm,pose_over_extrinsic"]
        for s, p, e in zip(self.sensors, self.pose_trans_cm, self.extrinsic_trans_cm):
            lines.append(f"{s},{_fmt(p)},{_fmt(e)},{_fmt(p / e if e > 0 else math.inf)}")
        lines.append(f"sensors_with_pose_below_quarter_of_extrinsic,{self.compensated_sensors}")
        lines.append(f"compensation_ratio,{_fmt(self.compensation_ratio)}")
        lines.append(f"points,{self.n_points}")
        return "\n".join(lines) + "\n"


def degeneracy_report(rows: list[SeedRow]) -> DegeneracyReport:
    sensors = sorted({r.sensor for r in rows})
    pose, ext = [], []
    for sid in sensors:
        sel = [r for r in rows if r.sensor == sid]
        pose.append(float(np.mean([r.pose_trans_cm for r in sel])))
        ext.append(float(np.mean([r.trans_cm for r in sel])))
    x = np.array([r.speed_time_cm for r in rows])
    y = -np.array([r.along_motion_cm for r in rows])
    denom = float(x @ x)
    ratio = float(x @ y) / denom if denom > 0 else math.nan
    return DegeneracyReport(sensors, pose, ext, ratio, len(rows))


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def dataset_dir(cfg: ExperimentConfig, override: Optional[str | Path] = None) -> Path:
    return Path(override) if override is not None else Path(cfg.experiment.dataset_dir)


def generate(cfg: ExperimentConfig, out: Optional[str | Path] = None):
    """Build the scene and rig described by ``cfg`` and write the dataset."""
    profile = cfg.motion_profile()
    rig = default_rig(profile, cfg.rig_layout())
    scene = default_scene(profile, cfg.scene.seed, cfg.scene.n_boxes_per_side)
    extra = {"scene": cfg.scene.model_dump(), "rig": cfg.rig.model_dump()}
    return generate_dataset(scene, rig, dataset_dir(cfg, out), cfg.scene.trajectory, extra, cfg.scene.supersample)


def _load(path: Path) -> Dataset:
    if not (path / MANIFEST).exists():
        raise MissingDataError(f"no dataset at {path}; run `soac generate` first")
    return load_dataset(path)


def run_file(out_dir: str | Path, mode: str, seed: int) -> Path:
    return Path(out_dir) / "runs" / f"{mode}_seed{seed:03d}.csv"


def calibrate_seed(cfg: ExperimentConfig, dataset: Dataset, seed: int, mode: str) -> CalibrationResult:
    prior = inject_noise(dataset.rig, cfg.noise_spec(), seed)
    return run_calibration(dataset, prior, cfg.train_config(seed), mode)


def result_record(result: CalibrationResult) -> dict:
    return {
        "mode": result.mode,
        "seed": result.seed,
        "extrinsics": {s: e.to_dict() for s, e in result.extrinsics.items()},
        "time_offsets": result.time_offsets,
        "history": result.history,
        "wall_seconds": result.wall_seconds,
    }


def calibrate(cfg: ExperimentConfig, seeds: Optional[list[int]] = None, mode: Optional[str] = None,
              out: Optional[str | Path] = None, data: Optional[str | Path] = None,
              progress=None) -> Path:
    """Run every seed, write its run file, then rebuild the aggregate CSVs."""
    mode = mode or cfg.experiment.mode
    if mode not in MODES:
        raise ConfigParseError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    out_dir = Path(out) if out is not None else Path(cfg.experiment.out_dir)
    dataset = _load(dataset_dir(cfg, data))
    for seed in seeds if seeds is not None else cfg.experiment.seeds:
        result = calibrate_seed(cfg, dataset, seed, mode)
        path = run_file(out_dir, mode, seed)
        write_rows(path, sensor_rows(dataset, result))
        path.with_suffix(".json").write_text(json.dumps(result_record(result), indent=1, sort_keys=True))
        if progress is not None:
            progress(result)
    aggregate(out_dir)
    return out_dir


def collect_rows(out_dir: str | Path) -> list[SeedRow]:
    files = sorted((Path(out_dir) / "runs").glob("*.csv"))
    if not files:
        raise MissingDataError(f"no run files under {Path(out_dir) / 'runs'}")
    rows = []
    for f in files:
        rows.extend(read_rows(f))
    return rows


def aggregate(out_dir: str | Path) -> list[SeedRow]:
    out_dir = Path(out_dir)
    rows = collect_rows(out_dir)
    write_rows(out_dir / "per_seed.csv", rows)
    write_boxstats(out_dir / "boxstats.csv", rows)
    return rows


def evaluate(cfg: ExperimentConfig, out: Optional[str | Path] = None,
             data: Optional[str | Path] = None) -> tuple[Path, Optional[DegeneracyReport]]:
    """Rebuild summaries from the run files; on straight-constant data also write degeneracy.txt."""
    out_dir = Path(out) if out is not None else Path(cfg.experiment.out_dir)
    rows = aggregate(out_dir)
    kind = cfg.scene.trajectory
    manifest = dataset_dir(cfg, data) / MANIFEST
    if manifest.exists():
        kind = io.load_toml(manifest)["dataset"].get("trajectory_kind", kind)
    report = None
    if kind == "straight-constant":
        report = degeneracy_report(rows)
        (out_dir / "degeneracy.txt").write_text(report.format())
    return out_dir, report


def format_boxstats(rows: list[SeedRow]) -> str:
    buf = _io.StringIO()
    for e in boxstats_table(rows):
        if e["metric"] not in ("rot_deg", "trans_cm", "time_ms"):
            continue
        if e["sensor"] == OVERALL:
            buf.write(f"{e['mode']:<16}{OVERALL:<18}{e['metric']:<10} mean of medians {e['value']:.3f}\n")
            continue
        b = e["stats"]
        buf.write(f"{e['mode']:<16}{e['sensor']:<18}{e['metric']:<10} median {b.median:.3f} "
                  f"[{b.q1:.3f}, {b.q3:.3f}] outliers {len(b.outliers)}\n")
    return buf.getvalue()
