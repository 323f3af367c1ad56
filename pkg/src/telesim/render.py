"""Flat-shaded software rasterizer for replay exports.

Primitive shapes project through a pinhole camera onto a uint8 RGB buffer,
painter-ordered by camera depth. Output is deliberately simple (no lighting,
no textures): these images exist to prove the replay-to-vision pipeline and
the storage ratio, not visual fidelity. PPM (P6) keeps goldens bit-exact
without any codec dependency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose
from .world import Box, Capsule, Sphere, Torus, WorldState, needle_arc_points

BACKGROUND = (24, 26, 32)

KIND_COLORS = {
    "table": (70, 74, 82),
    "target": (60, 200, 90),
    "obstacle": (220, 60, 50),
    "peg": (235, 160, 40),
    "needle": (200, 205, 215),
    "ring": (240, 210, 70),
    "board": (70, 120, 220),
    "post": (140, 95, 55),
}
ARM_COLOR = (160, 165, 175)
JAW_COLOR = (230, 235, 245)

TORUS_SEGMENTS = 24


@dataclass(frozen=True)
class CameraSpec:
    pose: Pose                      # camera-to-world; +z optical axis, +y image down
    focal_px: float
    resolution: tuple               # (width, height)
    near: float = 0.01

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ValueError("focal_px must be positive")
        w, h = self.resolution
        if w <= 0 or h <= 0:
            raise ValueError("resolution must be positive")


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose with +z pointing at the target, +y image-down."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("camera eye and target coincide")
    fwd = fwd / n
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        upv = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, upv)
        rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(fwd, right)
    R = np.column_stack([right, down, fwd])
    # rotation matrix -> quaternion (w,x,y,z)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        quat = ((0.25 * s), (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                (R[1, 0] - R[0, 1]) / s)
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        quat = ((R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s,
                (R[0, 2] + R[2, 0]) / s)
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        quat = ((R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s,
                (R[1, 2] + R[2, 1]) / s)
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        quat = ((R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                (R[1, 2] + R[2, 1]) / s, 0.25 * s)
    return Pose(eye, quat)


def to_camera(camera: CameraSpec, points) -> np.ndarray:
    """World points (n,3) into the camera frame."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    inv = camera.pose.inverse()
    R = inv.rotation_matrix()
    return pts @ R.T + inv.position


def project(camera: CameraSpec, point):
    """Pinhole projection to pixel (u, v); None when at or behind the near plane."""
    p = to_camera(camera, point)[0]
    if p[2] <= camera.near:
        return None
    w, h = camera.resolution
    u = camera.focal_px * p[0] / p[2] + w / 2.0
    v = camera.focal_px * p[1] / p[2] + h / 2.0
    return (u, v)


def unproject(camera: CameraSpec, u: float, v: float, depth: float) -> np.ndarray:
    """Inverse of project at a known camera depth; the test oracle."""
    w, h = camera.resolution
    x = (u - w / 2.0) * depth / camera.focal_px
    y = (v - h / 2.0) * depth / camera.focal_px
    cam_pt = np.array([x, y, depth])
    return camera.pose.transform_point(cam_pt)


# ------------------------------------------------------------- raster ops

def _fill_disk(img, u, v, r_px, color):
    h, w, _ = img.shape
    x0 = max(0, int(math.floor(u - r_px)))
    x1 = min(w, int(math.ceil(u + r_px)) + 1)
    y0 = max(0, int(math.floor(v - r_px)))
    y1 = min(h, int(math.ceil(v + r_px)) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    mask = (xs + 0.5 - u) ** 2 + (ys + 0.5 - v) ** 2 <= r_px * r_px
    img[y0:y1, x0:x1][mask] = color


def _fill_stadium(img, a, ra, b, rb, color):
    """Thick 2D segment with per-end radii (projected capsule)."""
    h, w, _ = img.shape
    rmax = max(ra, rb)
    x0 = max(0, int(math.floor(min(a[0], b[0]) - rmax)))
    x1 = min(w, int(math.ceil(max(a[0], b[0]) + rmax)) + 1)
    y0 = max(0, int(math.floor(min(a[1], b[1]) - rmax)))
    y1 = min(h, int(math.ceil(max(a[1], b[1]) + rmax)) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px = xs + 0.5 - a[0]
    py = ys + 0.5 - a[1]
    dx, dy = b[0] - a[0], b[1] - a[1]
    seg2 = dx * dx + dy * dy
    if seg2 < 1e-12:
        _fill_disk(img, a[0], a[1], rmax, color)
        return
    t = np.clip((px * dx + py * dy) / seg2, 0.0, 1.0)
    ddx = px - t * dx
    ddy = py - t * dy
    r = ra + (rb - ra) * t
    mask = ddx * ddx + ddy * ddy <= r * r
    img[y0:y1, x0:x1][mask] = color


def _fill_convex(img, pts, color):
    """Convex polygon fill via half-plane tests; pts is (n,2) pixel coords."""
    h, w, _ = img.shape
    pts = np.asarray(pts, dtype=np.float64)
    area = 0.0
    n = len(pts)
    for i in range(n):
        j = (i + 1) % n
        area += pts[i, 0] * pts[j, 1] - pts[j, 0] * pts[i, 1]
    if abs(area) < 1e-9:
        return
    if area < 0:
        pts = pts[::-1]
    x0 = max(0, int(math.floor(pts[:, 0].min())))
    x1 = min(w, int(math.ceil(pts[:, 0].max())) + 1)
    y0 = max(0, int(math.floor(pts[:, 1].min())))
    y1 = min(h, int(math.ceil(pts[:, 1].max())) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    cx = xs + 0.5
    cy = ys + 0.5
    mask = np.ones(cx.shape, dtype=bool)
    for i in range(len(pts)):
        j = (i + 1) % len(pts)
        ex, ey = pts[j, 0] - pts[i, 0], pts[j, 1] - pts[i, 1]
        mask &= (cx - pts[i, 0]) * ey - (cy - pts[i, 1]) * ex >= 0
        if not mask.any():
            return
    img[y0:y1, x0:x1][mask] = color


# ------------------------------------------------------------- scene build

def _shade(color, k):
    return tuple(int(c * k) for c in color)


def _entity_primitives(entity, camera: CameraSpec):
    """(depth, draw_fn_args) records for one entity."""
    prims = []
    color = KIND_COLORS.get(entity.kind, (128, 128, 128))
    pose = entity.pose
    shape = entity.shape
    if entity.kind == "needle":
        pts = entity.needle_points_world()
        cams = to_camera(camera, pts)
        for i in range(len(pts) - 1):
            a, b = cams[i], cams[i + 1]
            if a[2] <= camera.near or b[2] <= camera.near:
                continue
            prims.append((float((a[2] + b[2]) / 2), "stadium",
                          (_pix(camera, a), shape.r * camera.focal_px / a[2],
                           _pix(camera, b), shape.r * camera.focal_px / b[2], color)))
        return prims
    if isinstance(shape, Sphere):
        c = to_camera(camera, pose.position)[0]
        if c[2] > camera.near:
            prims.append((float(c[2]), "disk",
                          (_pix(camera, c), shape.r * camera.focal_px / c[2], color)))
    elif isinstance(shape, Capsule):
        ends = [pose.transform_point((0, 0, -shape.half_len)),
                pose.transform_point((0, 0, shape.half_len))]
        cams = to_camera(camera, ends)
        a, b = cams[0], cams[1]
        if a[2] > camera.near and b[2] > camera.near:
            prims.append((float((a[2] + b[2]) / 2), "stadium",
                          (_pix(camera, a), shape.r * camera.focal_px / a[2],
                           _pix(camera, b), shape.r * camera.focal_px / b[2], color)))
    elif isinstance(shape, Box):
        hx, hy, hz = shape.hx, shape.hy, shape.hz
        corners = [(sx * hx, sy * hy, sz * hz)
                   for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
        world = [pose.transform_point(c) for c in corners]
        cams = to_camera(camera, world)
        if (cams[:, 2] <= camera.near).any():
            return prims
        faces = [
            (0, 1, 3, 2), (4, 5, 7, 6), (0, 1, 5, 4),
            (2, 3, 7, 6), (0, 2, 6, 4), (1, 3, 7, 5),
        ]
        shades = (0.85, 1.0, 0.9, 0.95, 0.8, 1.0)
        for face, k in zip(faces, shades):
            pts = [_pix(camera, cams[i]) for i in face]
            depth = float(np.mean([cams[i][2] for i in face]))
            prims.append((depth, "quad", (pts, _shade(color, k))))
    elif isinstance(shape, Torus):
        ring_pts = []
        for i in range(TORUS_SEGMENTS):
            th = 2 * math.pi * i / TORUS_SEGMENTS
            ring_pts.append(pose.transform_point(
                (shape.major_r * math.cos(th), shape.major_r * math.sin(th), 0.0)))
        cams = to_camera(camera, ring_pts)
        for i in range(TORUS_SEGMENTS):
            a = cams[i]
            b = cams[(i + 1) % TORUS_SEGMENTS]
            if a[2] <= camera.near or b[2] <= camera.near:
                continue
            prims.append((float((a[2] + b[2]) / 2), "stadium",
                          (_pix(camera, a), shape.minor_r * camera.focal_px / a[2],
                           _pix(camera, b), shape.minor_r * camera.focal_px / b[2],
                           color)))
    return prims


def _pix(camera: CameraSpec, cam_pt):
    w, h = camera.resolution
    return (camera.focal_px * cam_pt[0] / cam_pt[2] + w / 2.0,
            camera.focal_px * cam_pt[1] / cam_pt[2] + h / 2.0)


def _arm_primitives(arm, camera: CameraSpec):
    prims = []
    ends = [arm.base_pose.position, arm.ee_pose.position]
    cams = to_camera(camera, ends)
    a, b = cams[0], cams[1]
    if a[2] > camera.near and b[2] > camera.near:
        prims.append((float((a[2] + b[2]) / 2) - 1e-6, "stadium",
                      (_pix(camera, a), 0.004 * camera.focal_px / a[2],
                       _pix(camera, b), 0.004 * camera.focal_px / b[2], ARM_COLOR)))
    # jaw: two pads separated by the opening fraction
    half_gap = 0.002 + 0.006 * arm.jaw
    for side in (-1.0, 1.0):
        tip = arm.ee_pose.transform_point((side * half_gap, 0.0, 0.0))
        c = to_camera(camera, tip)[0]
        if c[2] > camera.near:
            prims.append((float(c[2]) - 2e-6, "disk",
                          (_pix(camera, c), 0.0022 * camera.focal_px / c[2], JAW_COLOR)))
    return prims


def render_frame(state: WorldState, camera: CameraSpec) -> np.ndarray:
    """Deterministic flat-shaded view of one world state."""
    w, h = camera.resolution
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:, :] = BACKGROUND
    prims = []
    for entity in state.entities:
        prims.extend(_entity_primitives(entity, camera))
    for arm in state.arms:
        prims.extend(_arm_primitives(arm, camera))
    prims.sort(key=lambda p: -p[0])
    for _, kind, args in prims:
        if kind == "disk":
            (u, v), r, color = args
            _fill_disk(img, u, v, r, color)
        elif kind == "stadium":
            a, ra, b, rb, color = args
            _fill_stadium(img, a, ra, b, rb, color)
        elif kind == "quad":
            pts, color = args
            _fill_convex(img, pts, color)
    return img


def write_ppm(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()
