"""Photometric, structural, smoothness and range losses with their gradients.

Every function returns ``(loss, grad)`` where ``grad`` has the shape of the
rendered quantity it differentiates.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_MAX_WINDOW = 15
# range residuals below this count as zero, so rounding noise at the optimum
# does not produce a full-size L1 gradient
L1_DEAD_ZONE = 1e-9


def color_l2(pred: np.ndarray, target: np.ndarray, weight: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean over rays of the squared color distance; ``weight`` masks rays out."""
    diff = pred - target
    w = np.ones(len(pred)) if weight is None else np.asarray(weight, dtype=np.float64)
    denom = max(w.sum(), 1.0)
    loss = float((w * (diff**2).sum(axis=1)).sum() / denom)
    return loss, 2.0 * diff * (w / denom)[:, None]


def lidar_l1(depth: np.ndarray, ranges: np.ndarray) -> tuple[float, np.ndarray]:
    n = max(len(depth), 1)
    r = depth - ranges
    g = np.where(np.abs(r) > L1_DEAD_ZONE, np.sign(r), 0.0)
    return float(np.abs(r).sum() / n), g / n


def depth_smoothness(depth: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared difference of horizontally and vertically adjacent depths.

    ``depth`` has shape ``(P, h, w)``.
    """
    dx = depth[:, :, 1:] - depth[:, :, :-1]
    dy = depth[:, 1:, :] - depth[:, :-1, :]
    n = dx.size + dy.size
    if n == 0:
        return 0.0, np.zeros_like(depth)
    loss = float(((dx**2).sum() + (dy**2).sum()) / n)
    g = np.zeros_like(depth)
    g[:, :, 1:] += 2.0 * dx / n
    g[:, :, :-1] -= 2.0 * dx / n
    g[:, 1:, :] += 2.0 * dy / n
    g[:, :-1, :] -= 2.0 * dy / n
    return loss, g


def ssim_window(patch: int) -> int:
    return min(SSIM_MAX_WINDOW, patch)


def dssim(pred: np.ndarray, target: np.ndarray, data_range: float = 1.0) -> tuple[float, np.ndarray]:
    """Structural dissimilarity ``(1 - SSIM) / 2`` over square patches.

    ``pred`` and ``target`` have shape ``(P, k, k, 3)``. Statistics use a
    uniform window of side ``min(15, k)`` at every valid position; the loss is
    the mean over patches, channels and window positions.
    """
    if pred.ndim != 4 or pred.shape != target.shape or pred.shape[1] != pred.shape[2]:
        raise ValueError("dssim expects matching (P, k, k, C) patches")
    P, k, _, C = pred.shape
    if P == 0:
        return 0.0, np.zeros_like(pred)
    win = ssim_window(k)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    n = win * win
    x = np.moveaxis(pred, 3, 1)  # (P, C, k, k)
    y = np.moveaxis(target, 3, 1)
    xw = sliding_window_view(x, (win, win), axis=(2, 3))  # (P, C, m, m, win, win)
    yw = sliding_window_view(y, (win, win), axis=(2, 3))
    mx = xw.mean(axis=(-1, -2))
    my = yw.mean(axis=(-1, -2))
    vx = (xw**2).mean(axis=(-1, -2)) - mx**2
    vy = (yw**2).mean(axis=(-1, -2)) - my**2
    cxy = (xw * yw).mean(axis=(-1, -2)) - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * cxy + c2
    b1 = mx**2 + my**2 + c1
    b2 = vx + vy + c2
    s = a1 * a2 / (b1 * b2)
    count = s.size
    loss = float((1.0 - s).sum() / (2.0 * count))
    # dS/dx_p = alpha + beta * x_p + gamma * y_p within each window
    inv = 1.0 / (b1 * b2)
    alpha = (2 * my * a2 - a1 * 2 * my) * inv / n - s * (2 * mx / b1 - 2 * mx / b2) / n
    beta = -s * 2.0 / (b2 * n)
    gamma = a1 * 2.0 * inv / n
    scale = -1.0 / (2.0 * count)
    alpha, beta, gamma = alpha * scale, beta * scale, gamma * scale
    g = np.zeros_like(x)
    m = k - win + 1
    for a in range(win):
        for b in range(win):
            xs = x[:, :, a:a + m, b:b + m]
            ys = y[:, :, a:a + m, b:b + m]
            g[:, :, a:a + m, b:b + m] += alpha + beta * xs + gamma * ys
    return loss, np.moveaxis(g, 1, 3)
