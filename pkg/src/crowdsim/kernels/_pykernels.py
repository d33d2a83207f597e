"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same floating-point operation order, so the two backends agree to
the last ulp except where libm ``exp`` and numpy's ``exp`` differ.
"""
import numpy as np

ON_EDGE_EPS = 1e-9


def points_in_polygon(px, py, vx, vy):
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    vx = np.asarray(vx, dtype=np.float64)
    vy = np.asarray(vy, dtype=np.float64)
    m = vx.shape[0]
    inside = np.zeros(px.shape[0], dtype=bool)
    on_edge = np.zeros(px.shape[0], dtype=bool)
    for i in range(m):
        j = (i + 1) % m
        x1, y1, x2, y2 = vx[i], vy[i], vx[j], vy[j]
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        seg = np.hypot(x2 - x1, y2 - y1)
        on_edge |= (
            (np.abs(cross) <= ON_EDGE_EPS * max(seg, 1.0))
            & (px >= min(x1, x2) - ON_EDGE_EPS)
            & (px <= max(x1, x2) + ON_EDGE_EPS)
            & (py >= min(y1, y2) - ON_EDGE_EPS)
            & (py <= max(y1, y2) + ON_EDGE_EPS)
        )
        if y1 == y2:
            continue
        straddle = (y1 > py) != (y2 > py)
        x_cross = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= straddle & (px < x_cross)
    return (inside | on_edge).astype(np.uint8)


def splat_gaussians(xs, ys, sigmas, height, width, radius_factor=4.0):
    out = np.zeros((height, width), dtype=np.float64)
    for x, y, s in zip(np.asarray(xs, float), np.asarray(ys, float), np.asarray(sigmas, float)):
        r = radius_factor * s
        i0 = max(int(np.ceil(y - 0.5 - r)), 0)
        i1 = min(int(np.floor(y - 0.5 + r)), height - 1)
        j0 = max(int(np.ceil(x - 0.5 - r)), 0)
        j1 = min(int(np.floor(x - 0.5 + r)), width - 1)
        if i1 < i0 or j1 < j0:
            continue
        dy = np.arange(i0, i1 + 1, dtype=np.float64) + 0.5 - y
        dx = np.arange(j0, j1 + 1, dtype=np.float64) + 0.5 - x
        d2 = dy[:, None] * dy[:, None] + dx[None, :] * dx[None, :]
        w = np.where(d2 <= r * r, np.exp(-d2 / (2.0 * s * s)), 0.0)
        total = w.sum()
        if total > 0.0:
            out[i0:i1 + 1, j0:j1 + 1] += w / total
    return out


def glyph_bbox(g, height, width):
    hx, hy, hr, bx, by, ax, ay = g
    top = min(hy - hr, by - ay) - 1.0
    bot = max(hy + hr, by + ay) + 1.0
    left = min(hx - hr, bx - ax) - 1.0
    right = max(hx + hr, bx + ax) + 1.0
    i0 = max(int(np.floor(top)), 0)
    i1 = min(int(np.ceil(bot)), height - 1)
    j0 = max(int(np.floor(left)), 0)
    j1 = min(int(np.ceil(right)), width - 1)
    return i0, i1, j0, j1


def glyph_distances(g, i0, i1, j0, j1):
    """Signed distances (head, body) on the pixel-center grid of a box."""
    hx, hy, hr, bx, by, ax, ay = g
    cy = np.arange(i0, i1 + 1, dtype=np.float64)[:, None] + 0.5
    cx = np.arange(j0, j1 + 1, dtype=np.float64)[None, :] + 0.5
    sd_head = np.sqrt((cx - hx) * (cx - hx) + (cy - hy) * (cy - hy)) - hr
    ex = (cx - bx) / ax
    ey = (cy - by) / ay
    sd_body = (np.sqrt(ex * ex + ey * ey) - 1.0) * min(ax, ay)
    return sd_head, sd_body


def render_glyphs(glyphs, colors, height, width):
    layer = np.zeros((height, width, 4), dtype=np.float64)
    glyphs = np.asarray(glyphs, dtype=np.float64).reshape(-1, 7)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 2, 3)
    for g, c in zip(glyphs, colors):
        i0, i1, j0, j1 = glyph_bbox(g, height, width)
        if i1 < i0 or j1 < j0:
            continue
        sd_head, sd_body = glyph_distances(g, i0, i1, j0, j1)
        cov_h = np.clip(0.5 - sd_head, 0.0, 1.0)
        cov_b = np.clip(0.5 - sd_body, 0.0, 1.0)
        body_a = cov_b * (1.0 - cov_h)
        alpha = cov_h + body_a
        patch = layer[i0:i1 + 1, j0:j1 + 1]
        keep = 1.0 - alpha
        for ch in range(3):
            patch[..., ch] = c[1, ch] * cov_h + c[0, ch] * body_a + patch[..., ch] * keep
        patch[..., 3] = alpha + patch[..., 3] * keep
    return layer
