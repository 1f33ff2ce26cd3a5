from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.ndimage import map_coordinates

from soac.field import (
    AdamState,
    InvalidRangeError,
    OutsideBoundsError,
    ShapeMismatchError,
    VoxelRadianceField,
    apply_gradients,
    render_ray,
    sample_field,
)

AABB = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    return math.log(math.expm1(y))


def random_field(seed=0, res=(4, 4, 4), scale=3.0):
    rng = np.random.default_rng(seed)
    f = VoxelRadianceField(res, AABB, density_scale=scale)
    f.params[:] = rng.normal(0.0, 1.0, f.n_params)
    return f


def oracle_sample(f, pts):
    """Trilinear lookup through scipy, independent of the kernels."""
    grid = f.params.reshape(*f.resolution, 4)
    idx = (np.asarray(pts) - f.lo) / (f.hi - f.lo) * (np.array(f.resolution) - 1)
    raw = np.stack([map_coordinates(grid[..., c], idx.T, order=1, mode="nearest") for c in range(4)], axis=-1)
    return f.density_scale * softplus(raw[:, 0]), 1.0 / (1.0 + np.exp(-raw[:, 1:]))


def oracle_render(f, o, d, u, t0, t1, bg):
    S = len(u)
    L = t1 - t0
    t = t0 + L * (np.arange(S) + u) / S
    delta = np.diff(np.append(t, t1))
    sigma, col = oracle_sample(f, o + t[:, None] * d)
    alpha = 1.0 - np.exp(-sigma * delta)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - alpha)[:-1]])
    w = trans * alpha
    W = w.sum()
    return w @ col + (1 - W) * np.asarray(bg), (w @ t) / max(W, 1e-6), W, w, trans, alpha


class TestSampleField:
    def test_vertex_identity(self):
        f = random_field(1)
        i = f.vertex_index(1, 2, 3)
        p = f.lo + np.array([1, 2, 3]) * (f.hi - f.lo) / 3
        sigma, col = sample_field(f, p)
        assert sigma == pytest.approx(3.0 * softplus(f.params[i]), rel=1e-12)
        np.testing.assert_allclose(col, 1 / (1 + np.exp(-f.params[i + 1 : i + 4])), rtol=1e-12)

    def test_constant_field(self):
        f = VoxelRadianceField((3, 3, 3), AABB)
        f.params.reshape(-1, 4)[:] = [0.7, 0.0, 1.0, -1.0]
        sigma, col = sample_field(f, [0.5, 0.5, 0.5])
        assert sigma == pytest.approx(softplus(0.7))
        np.testing.assert_allclose(col, [0.5, 1 / (1 + math.e**-1), 1 / (1 + math.e)])

    def test_x_ramp(self):
        f = VoxelRadianceField((2, 2, 2), [[0, 0, 0], [1, 1, 1]])
        for iy in range(2):
            for iz in range(2):
                f.params[f.vertex_index(1, iy, iz)] = 1.0
        sigma, _ = sample_field(f, [0.25, 0.3, 0.9])
        assert sigma == pytest.approx(0.8259394, abs=1e-7)

    def test_matches_scipy_trilinear(self):
        f = random_field(2, res=(5, 4, 3))
        pts = np.random.default_rng(3).uniform(-1, 1, (200, 3))
        sigma, col = f.sample(pts)
        s_ref, c_ref = oracle_sample(f, pts)
        np.testing.assert_allclose(sigma, s_ref, rtol=1e-12)
        np.testing.assert_allclose(col, c_ref, rtol=1e-12)

    def test_outside(self):
        with pytest.raises(OutsideBoundsError):
            sample_field(random_field(), [1.5, 0, 0])

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            VoxelRadianceField((1, 4, 4), AABB)
        with pytest.raises(ShapeMismatchError):
            VoxelRadianceField((2, 2, 2), AABB, np.zeros(31))


class TestRender:
    def test_transparent_field(self):
        f = VoxelRadianceField((2, 2, 2), AABB)
        f.params[0::4] = -200.0
        r = render_ray(f, ([0, 0, -5.0], [0, 0, 1.0]), 0.1, 20.0, 16, background=(0.2, 0.4, 0.6))
        np.testing.assert_allclose(r.color[0], [0.2, 0.4, 0.6], atol=1e-12)
        assert r.weight_sum[0] < 1e-12

    def test_opaque_limit(self):
        f = VoxelRadianceField((2, 2, 2), AABB)
        f.params.reshape(-1, 4)[:] = [200.0, 2.0, 0.0, -2.0]
        r = f.render([0, 0, -5.0], [0, 0, 1.0], np.zeros((1, 8)), 0.1, 20.0, keep_samples=True)
        assert r.weight_sum[0] == pytest.approx(1.0)
        assert r.depth[0] == pytest.approx(4.0)
        np.testing.assert_allclose(r.color[0], 1 / (1 + np.exp(-np.array([2.0, 0.0, -2.0]))))

    def test_two_sample_quadrature(self):
        # the ray crosses the box over [4, 6]; jitter 0 puts samples at 4 and 5 with delta 1 each
        f = VoxelRadianceField((2, 2, 2), AABB)
        f.params[0::4] = inv_softplus(math.log(2.0))
        r = f.render([0, 0, -5.0], [0, 0, 1.0], np.zeros((1, 2)), 0.1, 20.0, keep_samples=True)
        np.testing.assert_allclose(r.weights[0], [0.5, 0.25], atol=1e-12)
        assert r.weight_sum[0] == pytest.approx(0.75)

    def test_empty_overlap(self):
        r = random_field().render([5.0, 5.0, 5.0], [1.0, 0, 0], np.full((1, 4), 0.5), 0.1, 10.0, background=(1, 1, 1))
        assert r.weight_sum[0] == 0.0
        np.testing.assert_array_equal(r.color[0], [1, 1, 1])

    def test_invalid_range(self):
        with pytest.raises(InvalidRangeError):
            render_ray(random_field(), ([0, 0, 0], [1.0, 0, 0]), 1.0, 0.5, 8)
        with pytest.raises(InvalidRangeError):
            render_ray(random_field(), ([0, 0, 0], [1.0, 0, 0]), 0.1, 5.0, 1)

    def test_matches_oracle(self):
        f = random_field(4)
        rng = np.random.default_rng(5)
        bg = np.array([0.1, 0.2, 0.3])
        for _ in range(20):
            o = rng.uniform(-3, 3, 3)
            d = -o + rng.normal(0, 0.3, 3)
            d /= np.linalg.norm(d)
            u = rng.random(24)
            r = f.render(o, d, u[None], 0.05, 50.0, bg, keep_samples=True)
            if r.weight_sum[0] == 0.0:
                continue
            t = (np.stack([f.lo, f.hi]) - o) / d
            t0, t1 = max(np.min(t, 0).max(), 0.05), min(np.max(t, 0).min(), 50.0)
            col, depth, W, w, trans, alpha = oracle_render(f, o, d, u, t0, t1, bg)
            np.testing.assert_allclose(r.color[0], col, atol=1e-10)
            assert r.depth[0] == pytest.approx(depth, abs=1e-9)
            np.testing.assert_allclose(r.weights[0], w, atol=1e-12)
            # telescoping weights and monotone transmittance
            assert r.weight_sum[0] == pytest.approx(1.0 - np.prod(1.0 - alpha), abs=1e-6)
            assert np.all(np.diff(trans) <= 0)
            assert 0.0 <= r.weight_sum[0] <= 1.0
            assert r.depth[0] >= 0.05

    def test_resplitting_empty_interval(self):
        # density only for x >= 2 (vertices x = 3, 4); the ray runs along +x over [1, 5]
        f = VoxelRadianceField((5, 2, 2), [[0, -1, -1], [4, 1, 1]])
        p = f.params.reshape(5, 2, 2, 4)
        p[..., 0] = -200.0
        p[3:, ..., 0] = 2.0
        p[..., 1:] = 0.3
        o, d = [-1.0, 0, 0], [1.0, 0, 0]
        # both place a sample at t = 4.8; the 3-sample version adds one at t = 2.5 in empty space
        a = f.render(o, d, np.array([[0.0, 0.9]]), 0.0, 100.0)
        b = f.render(o, d, np.array([[0.0, 0.125, 0.85]]), 0.0, 100.0)
        np.testing.assert_allclose(b.color, a.color, atol=1e-12)
        np.testing.assert_allclose(b.depth, a.depth, atol=1e-12)
        np.testing.assert_allclose(b.weight_sum, a.weight_sum, atol=1e-12)


def objective(f, o, d, u, gc, gd, gw, bg):
    r = f.render(o, d, u, 0.05, 50.0, bg)
    return float(np.sum(gc * r.color) + np.sum(gd * r.depth) + np.sum(gw * r.weight_sum))


class TestBackward:
    @pytest.fixture
    def case(self):
        f = random_field(6)
        f.params[0::4] -= 0.5
        rng = np.random.default_rng(7)
        o = np.array([[-2.3, 0.17, 0.31]])
        d = np.array([[1.0, 0.13, -0.07]])
        d /= np.linalg.norm(d)
        u = rng.random((1, 16))
        gc, gd, gw = rng.normal(size=(1, 3)), rng.normal(size=1), rng.normal(size=1)
        return f, o, d, u, gc, gd, gw, np.array([0.2, 0.5, 0.7])

    def test_zero_upstream(self, case):
        f, o, d, u, *_ , bg = case
        g = f.backward(o, d, u, 0.05, 50.0, bg)
        assert not np.any(g.params) and not np.any(g.origin) and not np.any(g.direction)

    def test_params_match_finite_differences(self, case):
        f, o, d, u, gc, gd, gw, bg = case
        g = f.backward(o, d, u, 0.05, 50.0, bg, gc, gd, gw)
        assert len(g.touched) > 0
        h = 1e-3
        for i in range(f.n_params):
            keep = f.params[i]
            f.params[i] = keep + h
            fp = objective(f, o, d, u, gc, gd, gw, bg)
            f.params[i] = keep - h
            fm = objective(f, o, d, u, gc, gd, gw, bg)
            f.params[i] = keep
            fd = (fp - fm) / (2 * h)
            assert abs(g.params[i] - fd) <= 1e-4 * max(abs(fd), abs(g.params[i]), 1e-6), i

    def test_origin_matches_finite_differences(self, case):
        f, o, d, u, gc, gd, gw, bg = case
        g = f.backward(o, d, u, 0.05, 50.0, bg, gc, gd, gw)
        h = 1e-4
        for a in range(3):
            e = np.zeros((1, 3))
            e[0, a] = h
            fd = (objective(f, o + e, d, u, gc, gd, gw, bg) - objective(f, o - e, d, u, gc, gd, gw, bg)) / (2 * h)
            assert g.origin[0, a] == pytest.approx(fd, rel=1e-3, abs=1e-8)

    def test_direction_matches_finite_differences(self, case):
        f, o, d, u, gc, gd, gw, bg = case
        g = f.backward(o, d, u, 0.05, 50.0, bg, gc, gd, gw)
        h = 1e-6
        for a in range(3):
            e = np.zeros((1, 3))
            e[0, a] = h
            fd = (objective(f, o, d + e, u, gc, gd, gw, bg) - objective(f, o, d - e, u, gc, gd, gw, bg)) / (2 * h)
            assert g.direction[0, a] == pytest.approx(fd, rel=1e-3, abs=1e-8)

    def test_accumulates_into_buffer(self, case):
        f, o, d, u, gc, gd, gw, bg = case
        buf = np.zeros(f.n_params)
        f.backward(o, d, u, 0.05, 50.0, bg, gc, gd, gw, grad_params=buf)
        f.backward(o, d, u, 0.05, 50.0, bg, gc, gd, gw, grad_params=buf)
        single = f.backward(o, d, u, 0.05, 50.0, bg, gc, gd, gw).params
        np.testing.assert_allclose(buf, 2 * single, rtol=1e-12)


class TestAdam:
    def test_first_step(self):
        f = VoxelRadianceField((2, 2, 2), AABB)
        g = np.zeros(f.n_params)
        g[5] = 1.0
        apply_gradients(f, g, AdamState.zeros(f.n_params), 0.01)
        assert f.params[5] == pytest.approx(-0.01, rel=1e-6)
        assert np.count_nonzero(f.params) == 1

    def test_zero_gradient(self):
        f = random_field()
        before = f.params.copy()
        apply_gradients(f, np.zeros(f.n_params), AdamState.zeros(f.n_params), 0.1)
        np.testing.assert_array_equal(f.params, before)

    def test_deterministic(self):
        a, b = random_field(), random_field()
        g = np.random.default_rng(8).normal(size=a.n_params)
        sa, sb = AdamState.zeros(a.n_params), AdamState.zeros(b.n_params)
        for _ in range(3):
            apply_gradients(a, g, sa, 0.05)
            apply_gradients(b, g, sb, 0.05)
        np.testing.assert_array_equal(a.params, b.params)

    def test_shape_mismatch(self):
        f = random_field()
        with pytest.raises(ShapeMismatchError):
            apply_gradients(f, np.zeros(3), AdamState.zeros(f.n_params), 0.1)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        f = random_field(9, res=(3, 4, 5))
        f.save(tmp_path / "f.vox")
        g = VoxelRadianceField.load(tmp_path / "f.vox")
        assert g.resolution == (3, 4, 5) and g.density_scale == 3.0
        np.testing.assert_array_equal(g.aabb, f.aabb)
        np.testing.assert_allclose(g.params, f.params, rtol=1e-7)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nonsense" * 10)
        with pytest.raises(ValueError):
            VoxelRadianceField.load(tmp_path / "x")
