"""Tile-based software rasterizer for Gaussian splats with an analytic backward pass.

Forward model per pixel, splats sorted by camera depth (ties by index)::

    alpha_i = min(0.99, opacity_i * exp(-0.5 * d^T cov2d_i^-1 d))   # skipped if < 1/255
    C       = sum_i rgb_i * alpha_i * prod_{j<i} (1 - alpha_j)

Each splat is listed only in tiles its visible footprint can reach, where the
footprint radius is chosen so that every pixel outside it would be skipped by
the 1/255 threshold anyway.  The tiled result is therefore bit-identical to a
brute-force evaluation over all splats.
"""
from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .scene import Camera, GaussianScene, Splat, sigmoid

BLUR = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
NEAR = 0.01
TILE = 16


@dataclass
class RenderedImage:
    pixels: np.ndarray  # (H, W, 3) linear RGB
    alpha: np.ndarray  # (H, W)

    @property
    def transmittance(self) -> np.ndarray:
        return 1.0 - self.alpha


@dataclass
class SplatGradients:
    """Per-splat partials laid out like :class:`GaussianScene` parameters."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SplatGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)))

    @classmethod
    def zeros_like(cls, scene: GaussianScene) -> "SplatGradients":
        return cls.zeros(len(scene))

    @classmethod
    def from_flat(cls, vector: np.ndarray, n: int) -> "SplatGradients":
        widths = (3, 4, 3, 1, 3)
        parts, start = [], 0
        for w in widths:
            chunk = np.asarray(vector[start:start + n * w], dtype=np.float64)
            parts.append(chunk.reshape(n, w) if w > 1 else chunk.copy())
            start += n * w
        return cls(*parts)

    def _arrays(self):
        return [getattr(self, f.name) for f in fields(self)]

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays()])

    def __add__(self, other: "SplatGradients") -> "SplatGradients":
        return SplatGradients(*(a + b for a, b in zip(self._arrays(), other._arrays())))

    def __mul__(self, k: float) -> "SplatGradients":
        return SplatGradients(*(a * k for a in self._arrays()))

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.linalg.norm(self.flatten()))

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self._arrays())


@dataclass
class Projection:
    """Per-splat screen-space quantities plus intermediates kept for the backward pass."""

    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2)
    conic: np.ndarray  # (N, 2, 2)
    depth: np.ndarray  # (N,)
    visible: np.ndarray  # (N,) bool
    radius: np.ndarray  # (N,) screen-space footprint radius
    opacity: np.ndarray
    rgb: np.ndarray
    # intermediates
    t_cam: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    quat_unit: np.ndarray
    quat_norm: np.ndarray
    cov3d: np.ndarray
    jac: np.ndarray
    view: np.ndarray
    focal: float


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def project(scene: GaussianScene, camera: Camera) -> Projection:
    n = len(scene)
    view = camera.rotation
    f = camera.focal
    cx, cy = camera.principal_point
    t = camera.to_camera(scene.positions)
    tz = t[:, 2]
    in_front = tz > NEAR
    safe_z = np.where(in_front, tz, 1.0)

    qn = np.linalg.norm(scene.rotations, axis=1)
    qn_safe = np.where(qn > 0, qn, 1.0)
    qu = scene.rotations / qn_safe[:, None]
    rot = quat_to_rotmat(qu)
    scale = np.exp(scene.log_scales)
    m3 = rot * scale[:, None, :]
    cov3d = m3 @ np.swapaxes(m3, 1, 2)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = f / safe_z
    jac[:, 1, 1] = f / safe_z
    jac[:, 0, 2] = -f * t[:, 0] / safe_z ** 2
    jac[:, 1, 2] = -f * t[:, 1] / safe_z ** 2
    m = jac @ view
    cov2d = m @ cov3d @ np.swapaxes(m, 1, 2)
    cov2d[:, 0, 0] += BLUR
    cov2d[:, 1, 1] += BLUR
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    det_safe = np.where(det > 0, det, 1.0)
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c / det_safe
    conic[:, 1, 1] = a / det_safe
    conic[:, 0, 1] = conic[:, 1, 0] = -b / det_safe

    mean2d = np.stack([f * t[:, 0] / safe_z + cx, f * t[:, 1] / safe_z + cy], axis=1)
    opacity = sigmoid(scene.opacity_logits)
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    reach = 2.0 * np.log(np.maximum(255.0 * opacity, 1.0))
    radius = np.sqrt(reach * np.maximum(lam_max, 0.0)) * (1.0 + 1e-6) + 1e-6
    visible = in_front & (det > 0) & (reach > 0) & np.isfinite(mean2d).all(axis=1)
    return Projection(mean2d, cov2d, conic, tz, visible, radius, opacity, sigmoid(scene.colors),
                      t, rot, scale, qu, qn_safe, cov3d, jac, view, f)


def project_splat(splat: Splat, camera: Camera) -> dict:
    """Screen-space mean, covariance and depth of a single splat."""
    scene = GaussianScene.from_splats([splat], [0])
    p = project(scene, camera)
    return {"mean2d": p.mean2d[0], "cov2d": p.cov2d[0], "depth": float(p.depth[0]),
            "culled": not bool(p.depth[0] > NEAR)}


def _draw_order(proj: Projection) -> np.ndarray:
    idx = np.flatnonzero(proj.visible)
    order = np.lexsort((idx, proj.depth[idx]))
    return idx[order]


def _tiles(camera: Camera):
    for y0 in range(0, camera.height, TILE):
        for x0 in range(0, camera.width, TILE):
            yield x0, y0, min(x0 + TILE, camera.width), min(y0 + TILE, camera.height)


def _tile_members(proj: Projection, order: np.ndarray, tile) -> np.ndarray:
    x0, y0, x1, y1 = tile
    mx, my = proj.mean2d[order, 0], proj.mean2d[order, 1]
    r = proj.radius[order]
    hit = (mx + r >= x0 + 0.5) & (mx - r <= x1 - 0.5) & (my + r >= y0 + 0.5) & (my - r <= y1 - 0.5)
    return order[hit]


def _tile_forward(proj: Projection, members: np.ndarray, tile):
    x0, y0, x1, y1 = tile
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px = xs.ravel() + 0.5
    py = ys.ravel() + 0.5
    dx = px[None, :] - proj.mean2d[members, 0][:, None]
    dy = py[None, :] - proj.mean2d[members, 1][:, None]
    con = proj.conic[members]
    q = con[:, 0, 0, None] * dx * dx + 2.0 * con[:, 0, 1, None] * dx * dy + con[:, 1, 1, None] * dy * dy
    g = np.exp(-0.5 * q)
    raw = proj.opacity[members][:, None] * g
    alpha = np.minimum(ALPHA_MAX, raw)
    alpha[alpha < ALPHA_MIN] = 0.0
    keep = 1.0 - alpha
    trans = np.ones_like(alpha)
    if len(members) > 1:
        trans[1:] = np.cumprod(keep[:-1], axis=0)
    final_t = trans[-1] * keep[-1] if len(members) else np.ones(px.shape)
    weight = alpha * trans
    color = (weight[:, :, None] * proj.rgb[members][:, None, :]).sum(axis=0) if len(members) \
        else np.zeros((px.size, 3))
    return dict(dx=dx, dy=dy, g=g, raw=raw, alpha=alpha, trans=trans, weight=weight,
                color=color, final_t=final_t, shape=(y1 - y0, x1 - x0))


def _map_tiles(fn, tiles, threads: int):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, tiles))
    return [fn(t) for t in tiles]


def render(scene: GaussianScene, camera: Camera, threads: int = 1) -> RenderedImage:
    proj = project(scene, camera)
    order = _draw_order(proj)
    tiles = list(_tiles(camera))
    pixels = np.zeros((camera.height, camera.width, 3))
    alpha = np.zeros((camera.height, camera.width))

    def work(tile):
        members = _tile_members(proj, order, tile)
        if len(members) == 0:
            return None
        return _tile_forward(proj, members, tile)

    for tile, out in zip(tiles, _map_tiles(work, tiles, threads)):
        if out is None:
            continue
        x0, y0, x1, y1 = tile
        h, w = out["shape"]
        pixels[y0:y1, x0:x1] = out["color"].reshape(h, w, 3)
        alpha[y0:y1, x0:x1] = 1.0 - out["final_t"].reshape(h, w)
    return RenderedImage(pixels, alpha)


def render_bruteforce(scene: GaussianScene, camera: Camera) -> RenderedImage:
    """Reference evaluation over every visible splat at every pixel, no tiling."""
    proj = project(scene, camera)
    order = _draw_order(proj)
    tile = (0, 0, camera.width, camera.height)
    if len(order) == 0:
        return RenderedImage(np.zeros((camera.height, camera.width, 3)), np.zeros((camera.height, camera.width)))
    out = _tile_forward(proj, order, tile)
    return RenderedImage(out["color"].reshape(camera.height, camera.width, 3),
                         1.0 - out["final_t"].reshape(camera.height, camera.width))


def _tile_backward(proj: Projection, members: np.ndarray, tile, d_pixels: np.ndarray):
    fw = _tile_forward(proj, members, tile)
    x0, y0, x1, y1 = tile
    grad = d_pixels[y0:y1, x0:x1].reshape(-1, 3)
    rgb = proj.rgb[members]
    alpha, trans = fw["alpha"], fw["trans"]
    d_rgb = (fw["weight"][:, :, None] * grad[None, :, :]).sum(axis=1)
    cg = (rgb[:, None, :] * grad[None, :, :]).sum(axis=2)
    contrib = cg * fw["weight"]
    behind = np.zeros_like(contrib)
    if len(members) > 1:
        behind[:-1] = np.cumsum(contrib[::-1], axis=0)[::-1][1:]
    d_alpha = trans * cg - behind / (1.0 - alpha)
    live = (alpha > 0.0) & (fw["raw"] < ALPHA_MAX)
    d_raw = np.where(live, d_alpha, 0.0)
    g = fw["g"]
    d_opacity = (d_raw * g).sum(axis=1)
    d_q = -0.5 * g * d_raw * proj.opacity[members][:, None]
    dx, dy = fw["dx"], fw["dy"]
    con = proj.conic[members]
    a_dx = con[:, 0, 0, None] * dx + con[:, 0, 1, None] * dy
    a_dy = con[:, 0, 1, None] * dx + con[:, 1, 1, None] * dy
    d_mean = np.stack([(-2.0 * d_q * a_dx).sum(axis=1), (-2.0 * d_q * a_dy).sum(axis=1)], axis=1)
    d_conic = np.empty((len(members), 2, 2))
    d_conic[:, 0, 0] = (d_q * dx * dx).sum(axis=1)
    d_conic[:, 0, 1] = d_conic[:, 1, 0] = (d_q * dx * dy).sum(axis=1)
    d_conic[:, 1, 1] = (d_q * dy * dy).sum(axis=1)
    return members, d_rgb, d_opacity, d_mean, d_conic


def render_backward(scene: GaussianScene, camera: Camera, d_pixels: np.ndarray,
                    threads: int = 1) -> SplatGradients:
    """Chain ``d_loss/d_pixels`` (H, W, 3) back to every splat parameter."""
    d_pixels = np.asarray(d_pixels, dtype=np.float64)
    if d_pixels.shape != (camera.height, camera.width, 3):
        raise ValueError(f"cotangent shape {d_pixels.shape} does not match {camera.height}x{camera.width}x3")
    n = len(scene)
    out = SplatGradients.zeros(n)
    if n == 0:
        return out
    proj = project(scene, camera)
    order = _draw_order(proj)
    tiles = list(_tiles(camera))

    def work(tile):
        members = _tile_members(proj, order, tile)
        if len(members) == 0:
            return None
        x0, y0, x1, y1 = tile
        if not d_pixels[y0:y1, x0:x1].any():
            return None
        return _tile_backward(proj, members, tile, d_pixels)

    d_rgb = np.zeros((n, 3))
    d_opacity = np.zeros(n)
    d_mean = np.zeros((n, 2))
    d_conic = np.zeros((n, 2, 2))
    for res in _map_tiles(work, tiles, threads):
        if res is None:
            continue
        members, g_rgb, g_op, g_mean, g_con = res
        d_rgb[members] += g_rgb
        d_opacity[members] += g_op
        d_mean[members] += g_mean
        d_conic[members] += g_con

    vis = proj.visible
    out.colors = np.where(vis[:, None], d_rgb * proj.rgb * (1.0 - proj.rgb), 0.0)
    out.opacity_logits = np.where(vis, d_opacity * proj.opacity * (1.0 - proj.opacity), 0.0)

    # conic = cov2d^-1
    conic = proj.conic
    d_cov2d = -conic @ d_conic @ conic
    m = proj.jac @ proj.view
    d_cov3d = np.swapaxes(m, 1, 2) @ d_cov2d @ m
    d_m = 2.0 * d_cov2d @ m @ proj.cov3d
    d_jac = d_m @ proj.view.T

    f = proj.focal
    t = proj.t_cam
    tz = np.where(vis, t[:, 2], 1.0)
    d_t = np.zeros((n, 3))
    d_t[:, 0] = -f / tz ** 2 * d_jac[:, 0, 2] + f / tz * d_mean[:, 0]
    d_t[:, 1] = -f / tz ** 2 * d_jac[:, 1, 2] + f / tz * d_mean[:, 1]
    d_t[:, 2] = (-(d_jac[:, 0, 0] + d_jac[:, 1, 1]) * f / tz ** 2
                 + 2.0 * f * (d_jac[:, 0, 2] * t[:, 0] + d_jac[:, 1, 2] * t[:, 1]) / tz ** 3
                 - f * (d_mean[:, 0] * t[:, 0] + d_mean[:, 1] * t[:, 1]) / tz ** 2)
    out.positions = np.where(vis[:, None], d_t @ proj.view, 0.0)

    # cov3d = (R S)(R S)^T
    m3 = proj.rot * proj.scale[:, None, :]
    d_cov3d = 0.5 * (d_cov3d + np.swapaxes(d_cov3d, 1, 2))
    d_m3 = 2.0 * d_cov3d @ m3
    d_scale = (d_m3 * proj.rot).sum(axis=1)
    out.log_scales = np.where(vis[:, None], d_scale * proj.scale, 0.0)
    d_rot = d_m3 * proj.scale[:, None, :]
    d_qu = _rotmat_backward(proj.quat_unit, d_rot)
    qu = proj.quat_unit
    d_q = (d_qu - qu * (qu * d_qu).sum(axis=1, keepdims=True)) / proj.quat_norm[:, None]
    out.rotations = np.where(vis[:, None], d_q, 0.0)
    return out


def _rotmat_backward(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g00, g01, g02 = g[:, 0, 0], g[:, 0, 1], g[:, 0, 2]
    g10, g11, g12 = g[:, 1, 0], g[:, 1, 1], g[:, 1, 2]
    g20, g21, g22 = g[:, 2, 0], g[:, 2, 1], g[:, 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([dw, dx, dy, dz], axis=1)


def to_srgb8(pixels: np.ndarray) -> np.ndarray:
    """Linear [0, 1] floats to 8-bit with a fixed 2.2 gamma encode."""
    return np.round(255.0 * np.clip(pixels, 0.0, 1.0) ** (1.0 / 2.2)).astype(np.uint8)


def png_bytes(pixels: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(to_srgb8(pixels), mode="RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def read_png(path) -> np.ndarray:
    """Load a PNG as linear float RGB in [0, 1] (inverse of :func:`png_bytes`)."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr ** 2.2

