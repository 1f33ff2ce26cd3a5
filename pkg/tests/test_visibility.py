from __future__ import annotations

import numpy as np
import pytest

from soac.field import RenderResult, VoxelRadianceField
from soac.visibility import VisibilityGrid

AABB = np.array([[0.0, 0.0, 0.0], [4.0, 4.0, 4.0]])


def crossed_cells(o, d, t0, t1, n=4, lo=0.0, hi=4.0):
    """Cells crossed by the segment, found by splitting at every grid plane."""
    h = (hi - lo) / n
    ts = [t0, t1]
    for a in range(3):
        if d[a] != 0:
            for j in range(n + 1):
                t = (lo + j * h - o[a]) / d[a]
                if t0 < t < t1:
                    ts.append(t)
    ts = sorted(ts)
    cells = set()
    for a, b in zip(ts[:-1], ts[1:]):
        if b - a < 1e-12:
            continue
        p = o + 0.5 * (a + b) * d
        cells.add(tuple(np.minimum(((p - lo) / h).astype(int), n - 1)))
    return cells


def single_hit(o, d, depth, n_samples=8, weight=1.0):
    o, d = np.array([o], float), np.array([d], float)
    d /= np.linalg.norm(d)
    t = np.linspace(0.0, depth, n_samples)
    w = np.zeros((1, n_samples))
    w[0, -1] = weight
    return RenderResult(np.zeros((1, 3)), np.array([depth]), np.array([weight]), w, t[None],
                        o, d, np.array([0.0]), np.array([100.0]))


def marked(grid):
    return {tuple(c) for c in np.argwhere(grid.as_volume())}


class TestFill:
    def test_transparent_marks_nothing(self):
        g = VisibilityGrid(AABB, 4)
        r = single_hit([0.5, 0.5, -1], [0, 0, 1], 3.0, weight=0.0)
        g.fill_from_render(r)
        assert g.marked_fraction == 0.0

    def test_opaque_hit_marks_cell(self):
        g = VisibilityGrid(AABB, 4, w_term=2.0)  # traversal disabled
        g.fill_from_render(single_hit([0.5, 0.5, -1], [0, 0, 1], 3.5))
        assert marked(g) == {(0, 0, 2)}

    def test_traversal_matches_plane_splitting(self):
        g = VisibilityGrid(AABB, 4)
        o = np.array([-0.3, 0.2, 0.35])
        d = np.array([1.0, 0.55, 0.3])
        d /= np.linalg.norm(d)
        depth = 4.6
        g.fill_from_render(single_hit(o, d, depth))
        t_enter = 0.3 / d[0]
        expected = crossed_cells(o, d, t_enter, depth)
        assert len(expected) >= 5
        assert marked(g) == expected

    def test_needs_samples(self):
        f = VoxelRadianceField((2, 2, 2), AABB)
        r = f.render([1, 1, -1.0], [0, 0, 1.0], np.full((1, 4), 0.5), 0.1, 10.0)
        with pytest.raises(ValueError):
            VisibilityGrid(AABB, 4).fill_from_render(r)

    def test_refill_after_reset_is_identical(self):
        g = VisibilityGrid(AABB, 4)
        r = single_hit([-0.3, 0.2, 0.35], [1.0, 0.55, 0.3], 4.6)
        g.fill_from_render(r)
        first = g.flags.copy()
        g.reset()
        assert g.marked_fraction == 0.0 and g.resolution == 4
        g.fill_from_render(r)
        np.testing.assert_array_equal(g.flags, first)


class TestFilter:
    def test_full_and_empty(self):
        g = VisibilityGrid(AABB, 4)
        rng = np.random.default_rng(0)
        o = rng.uniform(0.1, 3.9, (30, 3))
        d = rng.normal(size=(30, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        assert not g.filter_rays(o, d).any()
        g.flags[:] = True
        assert g.filter_rays(o, d).all()

    def test_outside_always_rejected(self):
        g = VisibilityGrid(AABB, 4)
        g.flags[:] = True
        assert not g.filter_ray([10.0, 10, 10], [1.0, 0, 0])

    def test_half_space(self):
        g = VisibilityGrid(AABB, 4)
        g.flags.reshape(4, 4, 4)[:2] = True  # x < 2
        o, d = [0.0, 1.3, 1.7], [1.0, 0, 0]
        assert g.probe_fractions([o], [d])[0] == pytest.approx(0.5)
        assert g.filter_ray(o, d, tau=0.25)
        assert not g.filter_ray(o, d, tau=0.75)

    def test_probe_count_validated(self):
        with pytest.raises(ValueError):
            VisibilityGrid(AABB, 4).filter_ray([0, 0, 0], [1.0, 0, 0], n_probe=0)

    def test_monotone_in_marks(self):
        rng = np.random.default_rng(1)
        g = VisibilityGrid(AABB, 4)
        g.flags[:] = rng.random(64) < 0.3
        o = rng.uniform(0.1, 3.9, (200, 3))
        d = rng.normal(size=(200, 3))
        kept = g.filter_rays(o, d / np.linalg.norm(d, axis=1, keepdims=True))
        g.flags |= rng.random(64) < 0.3
        kept_more = g.filter_rays(o, d / np.linalg.norm(d, axis=1, keepdims=True))
        assert np.all(kept_more[kept])

    def test_resolution_validated(self):
        with pytest.raises(ValueError):
            VisibilityGrid(AABB, 1)
