"""Dense trilinear voxel radiance field with volumetric rendering and exact adjoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels as K

DEPTH_EPS = 1e-6
_MAGIC = b"SOACVOX1"


class OutsideBoundsError(ValueError):
    pass


class InvalidRangeError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass
class RenderResult:
    color: np.ndarray  # (N, 3)
    depth: np.ndarray  # (N,)
    weight_sum: np.ndarray  # (N,)
    weights: Optional[np.ndarray] = None  # (N, S)
    t_samples: Optional[np.ndarray] = None  # (N, S)
    # ray inputs, retained alongside the samples
    origins: Optional[np.ndarray] = None
    directions: Optional[np.ndarray] = None
    near: Optional[np.ndarray] = None
    far: Optional[np.ndarray] = None

    def positions(self) -> np.ndarray:
        return self.origins[:, None, :] + self.t_samples[..., None] * self.directions[:, None, :]


@dataclass
class FieldGradients:
    params: np.ndarray  # dense, zero where untouched
    origin: np.ndarray  # (N, 3)
    direction: np.ndarray  # (N, 3)

    @property
    def touched(self) -> np.ndarray:
        return np.flatnonzero(self.params)


@dataclass
class RenderConfig:
    near: float = 0.2
    far: float = 1e3
    n_samples: int = 96
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if not self.near < self.far:
            raise InvalidRangeError("near must be smaller than far")
        if self.n_samples < 2:
            raise InvalidRangeError("need at least 2 samples per ray")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


class VoxelRadianceField:
    """Raw density/color values at the vertices of an ``nx × ny × nz`` lattice
    spanning ``aabb``; density is ``density_scale * softplus(raw)`` and
    color ``sigmoid(raw)``, applied after trilinear interpolation."""

    def __init__(
        self,
        resolution: tuple[int, int, int],
        aabb: np.ndarray,
        params: Optional[np.ndarray] = None,
        density_scale: float = 1.0,
        field_id: str = "",
    ):
        resolution = tuple(int(r) for r in resolution)
        if len(resolution) != 3 or min(resolution) < 2:
            raise ValueError("resolution must be >= 2 along every axis")
        aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        if np.any(aabb[1] <= aabb[0]):
            raise ValueError("degenerate AABB")
        self.resolution = resolution
        self.aabb = aabb
        self.density_scale = float(density_scale)
        self.field_id = field_id
        n = self.n_params
        if params is None:
            params = np.zeros(n)
        params = np.ascontiguousarray(params, dtype=np.float64).reshape(-1)
        if params.shape[0] != n:
            raise ShapeMismatchError(f"expected {n} parameters, got {params.shape[0]}")
        self.params = params

    @classmethod
    def initialized(
        cls,
        resolution,
        aabb,
        rng: np.random.Generator,
        density_raw: float = -2.0,
        noise: float = 0.01,
        density_scale: float = 1.0,
        field_id: str = "",
    ) -> "VoxelRadianceField":
        f = cls(resolution, aabb, density_scale=density_scale, field_id=field_id)
        p = f.params.reshape(-1, 4)
        p[:] = rng.normal(0.0, noise, size=p.shape)
        p[:, 0] += density_raw
        return f

    @property
    def n_params(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz * 4

    @property
    def lo(self) -> np.ndarray:
        return self.aabb[0]

    @property
    def hi(self) -> np.ndarray:
        return self.aabb[1]

    def copy(self) -> "VoxelRadianceField":
        return VoxelRadianceField(
            self.resolution, self.aabb.copy(), self.params.copy(), self.density_scale, self.field_id
        )

    def vertex_index(self, ix: int, iy: int, iz: int, ch: int = 0) -> int:
        _, ny, nz = self.resolution
        return ((ix * ny + iy) * nz + iz) * 4 + ch

    # ------------------------------------------------------------------ query

    def sample(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Density ``(N,)`` and color ``(N, 3)`` at world points inside the AABB."""
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        tol = 1e-9 * (self.hi - self.lo)
        if np.any(pts < self.lo - tol) or np.any(pts > self.hi + tol):
            raise OutsideBoundsError("query point outside the field AABB")
        sigma = np.empty(len(pts))
        color = np.empty((len(pts), 3))
        nx, ny, nz = self.resolution
        K.sample_points(self.params, nx, ny, nz, self.lo, self.hi, self.density_scale, pts, sigma, color)
        return sigma, color

    def _ray_args(self, origins, directions, jitter, near, far):
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        n = len(origins)
        jitter = np.ascontiguousarray(jitter, dtype=np.float64).reshape(n, -1)
        near = np.ascontiguousarray(np.broadcast_to(near, (n,)), dtype=np.float64)
        far = np.ascontiguousarray(np.broadcast_to(far, (n,)), dtype=np.float64)
        if np.any(near >= far):
            raise InvalidRangeError("near must be smaller than far")
        if jitter.shape[1] < 2:
            raise InvalidRangeError("need at least 2 samples per ray")
        return origins, directions, jitter, near, far

    def render(
        self,
        origins: np.ndarray,
        directions: np.ndarray,
        jitter: np.ndarray,
        near,
        far,
        background=(0.0, 0.0, 0.0),
        keep_samples: bool = False,
        trans_stop: float = 0.0,
    ) -> RenderResult:
        """Render rays with explicit per-sample jitter ``(N, S)`` in ``[0, 1)``.

        ``trans_stop > 0`` terminates rays whose transmittance falls below it.
        """
        o, d, u, near, far = self._ray_args(origins, directions, jitter, near, far)
        n, S = u.shape
        color = np.empty((n, 3))
        depth = np.empty(n)
        wsum = np.empty(n)
        shape = (n, S) if keep_samples else (1, 1)
        w_out = np.zeros(shape)
        t_out = np.zeros(shape)
        nx, ny, nz = self.resolution
        bg = np.asarray(background, dtype=np.float64)
        K.render_forward(
            self.params, nx, ny, nz, self.lo, self.hi, self.density_scale,
            o, d, u, near, far, bg, DEPTH_EPS,
            color, depth, wsum, w_out, t_out, keep_samples, trans_stop,
        )
        if keep_samples:
            return RenderResult(color, depth, wsum, w_out, t_out, o, d, near, far)
        return RenderResult(color, depth, wsum)

    def backward(
        self,
        origins: np.ndarray,
        directions: np.ndarray,
        jitter: np.ndarray,
        near,
        far,
        background=(0.0, 0.0, 0.0),
        d_color: Optional[np.ndarray] = None,
        d_depth: Optional[np.ndarray] = None,
        d_weight_sum: Optional[np.ndarray] = None,
        grad_params: Optional[np.ndarray] = None,
        want_params: bool = True,
        trans_stop: float = 0.0,
    ) -> FieldGradients:
        """Reverse-mode gradients of ``sum(d_color·color + d_depth·depth + d_weight_sum·weight_sum)``.

        Parameter gradients are accumulated into ``grad_params`` when given.
        """
        o, d, u, near, far = self._ray_args(origins, directions, jitter, near, far)
        n = len(o)
        gc = np.zeros((n, 3)) if d_color is None else np.ascontiguousarray(d_color, dtype=np.float64).reshape(n, 3)
        gd = np.zeros(n) if d_depth is None else np.ascontiguousarray(d_depth, dtype=np.float64).reshape(n)
        gw = np.zeros(n) if d_weight_sum is None else np.ascontiguousarray(d_weight_sum, dtype=np.float64).reshape(n)
        if grad_params is None:
            grad_params = np.zeros(self.n_params if want_params else 1)
        elif want_params and grad_params.shape != self.params.shape:
            raise ShapeMismatchError("gradient buffer does not match the field")
        g_o = np.empty((n, 3))
        g_d = np.empty((n, 3))
        nx, ny, nz = self.resolution
        bg = np.asarray(background, dtype=np.float64)
        K.render_backward(
            self.params, nx, ny, nz, self.lo, self.hi, self.density_scale,
            o, d, u, near, far, bg, DEPTH_EPS,
            gc, gd, gw, grad_params, want_params, g_o, g_d, trans_stop,
        )
        return FieldGradients(grad_params, g_o, g_d)

    # ------------------------------------------------------------ persistence

    def save(self, path: str | Path) -> None:
        """Header (magic, resolution, AABB, density scale) then little-endian f32 parameters."""
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<3I", *self.resolution))
            fh.write(struct.pack("<7d", *self.aabb.reshape(-1), self.density_scale))
            fh.write(self.params.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path, field_id: str = "") -> "VoxelRadianceField":
        data = Path(path).read_bytes()
        if data[:8] != _MAGIC:
            raise ValueError(f"{path}: not a voxel field checkpoint")
        res = struct.unpack_from("<3I", data, 8)
        vals = struct.unpack_from("<7d", data, 20)
        params = np.frombuffer(data, dtype="<f4", offset=76).astype(np.float64)
        return cls(res, np.array(vals[:6]).reshape(2, 3), params, vals[6], field_id)


def sample_field(field: VoxelRadianceField, point) -> tuple[float, np.ndarray]:
    sigma, color = field.sample(np.asarray(point, dtype=np.float64).reshape(1, 3))
    return float(sigma[0]), color[0]


def stratified_jitter(rng: np.random.Generator, n_rays: int, n_samples: int) -> np.ndarray:
    return rng.random((n_rays, n_samples))


def render_ray(field: VoxelRadianceField, ray, near: float, far: float, n_samples: int,
               rng: Optional[np.random.Generator] = None, background=(0.0, 0.0, 0.0)) -> RenderResult:
    """Render a single ray ``(origin, direction)``; midpoint samples without ``rng``."""
    if not near < far:
        raise InvalidRangeError("near must be smaller than far")
    if n_samples < 2:
        raise InvalidRangeError("need at least 2 samples per ray")
    origin, direction = ray
    jitter = np.full((1, n_samples), 0.5) if rng is None else rng.random((1, n_samples))
    return field.render(origin, direction, jitter, near, far, background, keep_samples=True)


def apply_gradients(field: VoxelRadianceField, grads: np.ndarray, state: AdamState, lr: float) -> None:
    """One lazy Adam step on the parameters with non-zero gradient."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != field.params.shape or state.m.shape != field.params.shape:
        raise ShapeMismatchError("gradient/optimizer state does not match the field")
    state.step += 1
    K.adam_update(field.params, grads, state.m, state.v, lr, state.beta1, state.beta2, state.eps, state.step)
