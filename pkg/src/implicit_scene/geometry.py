"""Box and camera parameterizations, world-frame conversions, and exact
oriented 3D IoU.

World frame convention: origin at the camera center, +y up, +x along the
camera forward direction at zero pitch/roll (so the zero-pose camera
rotation is the identity). Pixel coordinates have u growing right and v
growing down; a camera-frame ray through pixel (u, v) is
``(1, -(v-cy)/fy, -(u-cx)/fx)`` before normalization.

Yaw is a rotation about the world +y axis with matrix
``[[c,0,s],[0,1,0],[-s,0,c]]`` (it maps +x to (c,0,-s)). The camera
rotation composes roll about the forward axis first, then pitch:
``R(beta,gamma) = Rz(beta) @ Rx(gamma)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

HALF_PI = 0.5 * math.pi


class GeometryError(ValueError):
    pass


def _vec(x, n, what):
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (n,):
        raise GeometryError(f"{what} must have shape ({n},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{what} contains non-finite values")
    return arr


def wrap_to_pi(x):
    """Wrap angle(s) into [-pi, pi)."""
    return x - 2.0 * math.pi * np.floor((x + math.pi) / (2.0 * math.pi))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    image_w: float
    image_h: float

    def __post_init__(self):
        if min(self.fx, self.fy, self.image_w, self.image_h) <= 0:
            raise GeometryError("focal lengths and image size must be positive")

    @property
    def diagonal(self) -> float:
        return math.hypot(self.image_w, self.image_h)


@dataclass(frozen=True)
class CameraPose:
    beta: float   # pitch, radians
    gamma: float  # roll, radians

    def __post_init__(self):
        if not (-HALF_PI < self.beta < HALF_PI and -HALF_PI < self.gamma < HALF_PI):
            raise GeometryError("pitch/roll must lie in (-pi/2, pi/2)")


@dataclass
class LayoutBox:
    center: np.ndarray
    size: np.ndarray
    yaw: float

    def __post_init__(self):
        self.center = _vec(self.center, 3, "layout center")
        self.size = _vec(self.size, 3, "layout size")
        if np.any(self.size <= 0):
            raise GeometryError("layout sizes must be positive")
        self.yaw = float(wrap_to_pi(self.yaw))

    def world_box(self) -> "WorldBox":
        return WorldBox(self.center.copy(), self.size.copy(), self.yaw)


@dataclass
class ObjectBoxParam:
    """Image-anchored box parameters: 2D offset, ray distance, size, yaw."""

    delta: np.ndarray      # pixels, offset from the 2D box center
    distance: float        # meters from the camera center to the 3D center
    size: np.ndarray       # meters per axis
    yaw: float             # radians
    bbox2d: np.ndarray     # pixels, (x1, y1, x2, y2)
    category: int = 0

    def __post_init__(self):
        self.delta = _vec(self.delta, 2, "delta")
        self.size = _vec(self.size, 3, "object size")
        self.bbox2d = _vec(self.bbox2d, 4, "bbox2d")
        if self.distance <= 0:
            raise GeometryError("distance must be positive")
        if np.any(self.size <= 0):
            raise GeometryError("object sizes must be positive")
        if self.bbox2d[2] <= self.bbox2d[0] or self.bbox2d[3] <= self.bbox2d[1]:
            raise GeometryError("bbox2d must have positive width and height")
        self.yaw = float(wrap_to_pi(self.yaw))

    @property
    def bbox_center(self) -> np.ndarray:
        return np.array([0.5 * (self.bbox2d[0] + self.bbox2d[2]),
                         0.5 * (self.bbox2d[1] + self.bbox2d[3])])


@dataclass
class WorldBox:
    center: np.ndarray
    size: np.ndarray
    yaw: float

    def __post_init__(self):
        self.center = _vec(self.center, 3, "box center")
        self.size = _vec(self.size, 3, "box size")
        if np.any(self.size <= 0):
            raise GeometryError("box extents must be positive")
        self.yaw = float(self.yaw)

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    @property
    def bottom(self) -> float:
        return float(self.center[1] - 0.5 * self.size[1])


# -- rotations ------------------------------------------------------------

def yaw_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def yaw_matrix_deriv(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def camera_rotation(pose: CameraPose) -> np.ndarray:
    """Camera-to-world rotation: roll about forward, then pitch."""
    return _rz(pose.beta) @ _rx(pose.gamma)


def camera_rotation_jacobian(pose: CameraPose):
    """(dR/dbeta, dR/dgamma) for the camera rotation."""
    b, g = pose.beta, pose.gamma
    cb, sb = math.cos(b), math.sin(b)
    drz = np.array([[-sb, -cb, 0.0], [cb, -sb, 0.0], [0.0, 0.0, 0.0]])
    cg, sg = math.cos(g), math.sin(g)
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sg, -cg], [0.0, cg, -sg]])
    return drz @ _rx(g), _rz(b) @ drx


# -- projection and box recovery ------------------------------------------

def pixel_ray(K: CameraIntrinsics, pixel) -> np.ndarray:
    """Unnormalized camera-frame ray through a pixel (x-forward convention)."""
    u, v = float(pixel[0]), float(pixel[1])
    return np.array([1.0, -(v - K.cy) / K.fy, -(u - K.cx) / K.fx])


def project_point(K: CameraIntrinsics, cam: CameraPose, p_world) -> np.ndarray:
    """World point -> pixel (u, v). Raises if the point is not in front."""
    p = camera_rotation(cam).T @ _vec(p_world, 3, "point")
    if p[0] <= 1e-12:
        raise GeometryError("point is behind the camera plane")
    return np.array([K.cx - K.fx * p[2] / p[0], K.cy - K.fy * p[1] / p[0]])


def recover_world_box(p: ObjectBoxParam, cam: CameraPose,
                      K: CameraIntrinsics) -> WorldBox:
    """Back-project the parameterized box into the world frame.

    The center sits at distance ``p.distance`` from the origin along the
    world-frame ray through (2D box center + delta); size and yaw carry
    over unchanged.
    """
    ray = pixel_ray(K, p.bbox_center + p.delta)
    direction = camera_rotation(cam) @ (ray / np.linalg.norm(ray))
    return WorldBox(p.distance * direction, p.size.copy(), p.yaw)


def recover_world_center_jacobian(p: ObjectBoxParam, cam: CameraPose,
                                  K: CameraIntrinsics):
    """Center plus its partials w.r.t. (delta, distance, beta, gamma).

    Returns (center (3,), J_delta (3,2), J_d (3,), J_beta (3,), J_gamma (3,)).
    """
    u = pixel_ray(K, p.bbox_center + p.delta)
    norm = np.linalg.norm(u)
    n = u / norm
    R = camera_rotation(cam)
    dRb, dRg = camera_rotation_jacobian(cam)
    d = p.distance

    center = d * (R @ n)
    # du/ddelta columns, then normalize: dn/du = (I - n n^T)/|u|
    dn_du = (np.eye(3) - np.outer(n, n)) / norm
    du = np.array([[0.0, 0.0], [0.0, -1.0 / K.fy], [-1.0 / K.fx, 0.0]])
    j_delta = d * R @ (dn_du @ du)
    j_d = R @ n
    j_beta = d * (dRb @ n)
    j_gamma = d * (dRg @ n)
    return center, j_delta, j_d, j_beta, j_gamma


def object_params_from_world(box: WorldBox, bbox2d, cam: CameraPose,
                             K: CameraIntrinsics, category: int = 0) -> ObjectBoxParam:
    """Inverse of recover_world_box given the detected 2D box."""
    uv = project_point(K, cam, box.center)
    bbox2d = _vec(bbox2d, 4, "bbox2d")
    center2d = np.array([0.5 * (bbox2d[0] + bbox2d[2]),
                         0.5 * (bbox2d[1] + bbox2d[3])])
    return ObjectBoxParam(delta=uv - center2d,
                          distance=float(np.linalg.norm(box.center)),
                          size=box.size.copy(), yaw=box.yaw,
                          bbox2d=bbox2d.copy(), category=category)


# -- corners and IoU -------------------------------------------------------

# canonical corner signs: top face (+y) counterclockwise in the x-z plane,
# then the bottom face in the same x-z order
_CORNER_SIGNS = np.array([
    [1, 1, 1], [-1, 1, 1], [-1, 1, -1], [1, 1, -1],
    [1, -1, 1], [-1, -1, 1], [-1, -1, -1], [1, -1, -1],
], dtype=np.float64)


def box_corners(b: WorldBox) -> np.ndarray:
    """The 8 corners in the fixed canonical order, shape (8, 3)."""
    return b.center + (_CORNER_SIGNS * (0.5 * b.size)) @ yaw_matrix(b.yaw).T


def _ground_rect(b: WorldBox) -> np.ndarray:
    """Counterclockwise footprint rectangle in the x-z plane, shape (4, 2)."""
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    hx, hz = 0.5 * b.size[0], 0.5 * b.size[2]
    pts = np.array([[hx, hz], [-hx, hz], [-hx, -hz], [hx, -hz]])
    rot = np.array([[c, s], [-s, c]])  # x-z action of the yaw matrix
    return pts @ rot.T + np.array([b.center[0], b.center[2]])


def _polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    x = np.array([p[0] for p in poly])
    z = np.array([p[1] for p in poly])
    return 0.5 * float(np.dot(x, np.roll(z, -1)) - np.dot(z, np.roll(x, -1)))


def _clip_convex(subject, clip_rect) -> list:
    """Sutherland-Hodgman clip of a convex polygon by a CCW rectangle.

    Interior of a CCW clip polygon is the left side of each directed edge
    (cross product >= 0).
    """
    poly = [np.asarray(p, dtype=np.float64) for p in subject]
    for i in range(4):
        if not poly:
            return []
        a, b = clip_rect[i], clip_rect[(i + 1) % 4]
        edge = b - a
        out = []
        prev = poly[-1]
        prev_side = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0])
        for cur in poly:
            cur_side = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0])
            if (cur_side >= 0.0) != (prev_side >= 0.0):
                t = prev_side / (prev_side - cur_side)
                out.append(prev + t * (cur - prev))
            if cur_side >= 0.0:
                out.append(cur)
            prev, prev_side = cur, cur_side
        poly = out
    return poly


def iou3d(a: WorldBox, b: WorldBox) -> float:
    """Exact IoU of two yaw-oriented boxes.

    Footprint intersection by convex polygon clipping times the vertical
    interval overlap, over the union volume.
    """
    rect_a, rect_b = _ground_rect(a), _ground_rect(b)
    clipped = _clip_convex(list(rect_a), rect_b)
    area = abs(_polygon_area(clipped))
    y_lo = max(a.center[1] - 0.5 * a.size[1], b.center[1] - 0.5 * b.size[1])
    y_hi = min(a.center[1] + 0.5 * a.size[1], b.center[1] + 0.5 * b.size[1])
    inter = area * max(0.0, y_hi - y_lo)
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return float(inter / union)


# -- angle binning ----------------------------------------------------------

@dataclass(frozen=True)
class BinSpec:
    lo: float
    hi: float
    n_bins: int
    wrap: bool = False

    def __post_init__(self):
        if self.n_bins < 1 or self.hi <= self.lo:
            raise GeometryError("bin spec needs n_bins >= 1 and hi > lo")

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.n_bins

    @property
    def half_width(self) -> float:
        return 0.5 * self.width

    def center(self, idx: int) -> float:
        return self.lo + (idx + 0.5) * self.width


YAW_BINS = BinSpec(-math.pi, math.pi, 8, wrap=True)
DISTANCE_BINS = BinSpec(0.0, 12.0, 6)
PITCH_BINS = BinSpec(-math.pi / 3.0, math.pi / 3.0, 2)
ROLL_BINS = BinSpec(-math.pi / 3.0, math.pi / 3.0, 2)


def encode_angle_bins(x: float, spec: BinSpec) -> tuple[int, float]:
    """Encode a value as (bin index, residual from the bin center).

    The residual is normalized by the half bin width. Wrapping specs map x
    into the covered range first; non-wrapping specs reject values outside
    [lo, hi].
    """
    x = float(x)
    if spec.wrap:
        span = spec.hi - spec.lo
        x = x - span * math.floor((x - spec.lo) / span)
    elif not (spec.lo <= x <= spec.hi):
        raise GeometryError(
            f"value {x} outside bin range [{spec.lo}, {spec.hi}]")
    idx = min(int((x - spec.lo) / spec.width), spec.n_bins - 1)
    residual = (x - spec.center(idx)) / spec.half_width
    return idx, residual


def decode_angle_bins(idx: int, residual: float, spec: BinSpec) -> float:
    if not (0 <= idx < spec.n_bins):
        raise GeometryError(f"bin index {idx} out of range")
    return spec.center(idx) + residual * spec.half_width
