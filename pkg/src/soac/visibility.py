"""Boolean observation grids: which parts of the scene a camera's rays have seen."""

from __future__ import annotations

import numpy as np

from . import _kernels as K
from .field import RenderResult


class VisibilityGrid:
    """``n``³ boolean cells over an AABB, owned by one camera's field.

    Filling marks cells holding a sample with weight above ``w_min`` plus
    every cell a ray crosses before its rendered depth, for rays whose weight
    sum reaches ``w_term``. Filtering keeps a ray when at least ``tau`` of its
    ``n_probe`` probes land in marked cells.
    """

    def __init__(
        self,
        aabb: np.ndarray,
        resolution: int = 20,
        owner: str = "",
        w_min: float = 1e-2,
        w_term: float = 0.5,
        n_probe: int = 32,
        tau: float = 0.25,
    ):
        if resolution < 2:
            raise ValueError("grid resolution must be >= 2")
        self.aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        self.resolution = int(resolution)
        self.owner = owner
        self.w_min = w_min
        self.w_term = w_term
        self.n_probe = n_probe
        self.tau = tau
        self.flags = np.zeros(self.resolution**3, dtype=np.bool_)

    @property
    def marked_fraction(self) -> float:
        return float(self.flags.mean())

    def reset(self) -> None:
        self.flags[:] = False

    def fill_from_render(self, result: RenderResult) -> None:
        if result.weights is None or result.origins is None:
            raise ValueError("render result does not retain its samples")
        K.fill_grid(
            self.flags, self.resolution, self.aabb[0], self.aabb[1],
            result.origins, result.directions, result.near, result.far,
            result.weights, result.t_samples, result.depth, result.weight_sum,
            self.w_min, self.w_term,
        )

    def probe_fractions(self, origins, directions, near=0.0, far=np.inf, n_probe=None) -> np.ndarray:
        o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        n = len(o)
        near = np.ascontiguousarray(np.broadcast_to(near, (n,)), dtype=np.float64)
        far = np.ascontiguousarray(np.broadcast_to(far, (n,)), dtype=np.float64)
        out = np.empty(n)
        K.probe_fraction(
            self.flags, self.resolution, self.aabb[0], self.aabb[1], o, d, near, far,
            self.n_probe if n_probe is None else int(n_probe), out,
        )
        return out

    def filter_rays(self, origins, directions, near=0.0, far=np.inf, n_probe=None, tau=None) -> np.ndarray:
        """Boolean keep-mask for a batch of rays."""
        n_probe = self.n_probe if n_probe is None else int(n_probe)
        if n_probe < 1:
            raise ValueError("n_probe must be >= 1")
        tau = self.tau if tau is None else tau
        frac = self.probe_fractions(origins, directions, near, far, n_probe)
        return (frac >= 0.0) & (frac >= tau)

    def filter_ray(self, origin, direction, n_probe=None, near=0.0, far=np.inf, tau=None) -> bool:
        return bool(self.filter_rays(np.reshape(origin, (1, 3)), np.reshape(direction, (1, 3)), near, far, n_probe, tau)[0])

    def voxel_centers(self) -> np.ndarray:
        n = self.resolution
        lo, hi = self.aabb
        c = (np.arange(n) + 0.5) / n
        g = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)
        return lo + g * (hi - lo)

    def as_volume(self) -> np.ndarray:
        n = self.resolution
        return self.flags.reshape(n, n, n).copy()
