"""Structured local implicit shapes: 32 anisotropic Gaussian elements (the
first 16 mirrored across the object-frame x=0 plane), per-element latent
codes feeding a small shared residual decoder, and pose-differentiable
evaluation.

The field value at an object-frame point x is

    sum_i  c_i * G_i(x) * (1 + D(z_i, x_i'))  -  iso_level

with G_i(x) = exp(-0.5 * sum_d (x'_d / r_{i,d})^2) and x' = R(e_i)^T (x - p_i).
Element rotations use intrinsic Z-Y-X Euler angles. Mirrored elements add a
second term with x replaced by (-x0, x1, x2); the full local coordinate is
mirrored before decoding. Values are negative inside, zero at the surface,
and approach -iso_level far away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import yaw_matrix, yaw_matrix_deriv

N_ELEMENTS = 32
N_SYMMETRIC = 16
LATENT_DIM = 32
ANALYTIC_DIM = 10
CODE_LENGTH = N_ELEMENTS * (ANALYTIC_DIM + LATENT_DIM)  # 1344
DEFAULT_ISO_LEVEL = -0.07
DEFAULT_ALPHA = 100.0

_MIRROR = np.diag([-1.0, 1.0, 1.0])


class ShapeError(ValueError):
    pass


def euler_zyx_matrix(e) -> np.ndarray:
    """Intrinsic Z-Y-X rotation: Rz(e0) @ Ry(e1) @ Rx(e2)."""
    ca, sa = math.cos(e[0]), math.sin(e[0])
    cb, sb = math.cos(e[1]), math.sin(e[1])
    cg, sg = math.cos(e[2]), math.sin(e[2])
    rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cg, -sg], [0.0, sg, cg]])
    return rz @ ry @ rx


def euler_zyx_derivs(e):
    """Partial derivatives of euler_zyx_matrix w.r.t. each angle."""
    ca, sa = math.cos(e[0]), math.sin(e[0])
    cb, sb = math.cos(e[1]), math.sin(e[1])
    cg, sg = math.cos(e[2]), math.sin(e[2])
    rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cg, -sg], [0.0, sg, cg]])
    drz = np.array([[-sa, -ca, 0.0], [ca, -sa, 0.0], [0.0, 0.0, 0.0]])
    dry = np.array([[-sb, 0.0, cb], [0.0, 0.0, 0.0], [-cb, 0.0, -sb]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sg, -cg], [0.0, cg, -sg]])
    return drz @ ry @ rx, rz @ dry @ rx, rz @ ry @ drx


@dataclass
class GaussianElement:
    """One scaled anisotropic Gaussian: scale constant, center, radii, Euler angles."""

    constant: float
    center: np.ndarray
    radii: np.ndarray
    euler: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(3)
        self.euler = np.asarray(self.euler, dtype=np.float64).reshape(3)
        if self.constant > 0.0:
            raise ShapeError("scale constant must be <= 0 (interior-negative)")
        if np.any(self.radii <= 0.0):
            raise ShapeError("radii must be positive")

    def params(self) -> np.ndarray:
        return np.concatenate(([self.constant], self.center, self.radii, self.euler))


class ElementDecoder:
    """Two-layer ReLU MLP mapping (latent 32 + local point 3) -> residual scalar.

    Shared across elements; the residual modulates each Gaussian
    multiplicatively as (1 + D).
    """

    HIDDEN = 32
    IN_DIM = LATENT_DIM + 3

    def __init__(self, w1, b1, w2, b2):
        self.w1 = np.asarray(w1, dtype=np.float64).reshape(self.HIDDEN, self.IN_DIM)
        self.b1 = np.asarray(b1, dtype=np.float64).reshape(self.HIDDEN)
        self.w2 = np.asarray(w2, dtype=np.float64).reshape(1, self.HIDDEN)
        self.b2 = np.asarray(b2, dtype=np.float64).reshape(1)
        for arr in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(arr)):
                raise ShapeError("decoder weights must be finite")
        self.is_zero = not (np.any(self.w2) or np.any(self.b2))

    @classmethod
    def zeros(cls) -> "ElementDecoder":
        return cls(np.zeros((cls.HIDDEN, cls.IN_DIM)), np.zeros(cls.HIDDEN),
                   np.zeros((1, cls.HIDDEN)), np.zeros(1))

    @classmethod
    def seeded(cls, seed: int, scale: float = 0.1) -> "ElementDecoder":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, (cls.HIDDEN, cls.IN_DIM)),
                   rng.normal(0.0, scale, cls.HIDDEN),
                   rng.normal(0.0, scale, (1, cls.HIDDEN)),
                   np.zeros(1))

    def residual(self, latent: np.ndarray, local_pts: np.ndarray) -> np.ndarray:
        """D(z, x') for local points (M, 3) under one latent code."""
        if self.is_zero:
            return np.zeros(len(local_pts))
        u = np.concatenate(
            [np.broadcast_to(latent, (len(local_pts), LATENT_DIM)), local_pts], axis=1)
        h = np.maximum(u @ self.w1.T + self.b1, 0.0)
        return (h @ self.w2.T + self.b2)[:, 0]

    def residual_and_point_grad(self, latent, local_pts):
        """(D values (M,), dD/dx' (M, 3))."""
        if self.is_zero:
            return np.zeros(len(local_pts)), np.zeros((len(local_pts), 3))
        u = np.concatenate(
            [np.broadcast_to(latent, (len(local_pts), LATENT_DIM)), local_pts], axis=1)
        pre = u @ self.w1.T + self.b1
        h = np.maximum(pre, 0.0)
        d = (h @ self.w2.T + self.b2)[:, 0]
        # dD/du = w2 @ diag(pre>0) @ w1, restricted to the point block
        mask = (pre > 0.0).astype(np.float64)
        grad = (mask * self.w2[0]) @ self.w1[:, LATENT_DIM:]
        return d, grad


@dataclass
class LdifShape:
    """32 Gaussian elements plus 32-dim latent codes; the object's implicit field."""

    elements: list
    latents: np.ndarray = field(
        default_factory=lambda: np.zeros((N_ELEMENTS, LATENT_DIM)))
    symmetric_count: int = N_SYMMETRIC
    iso_level: float = DEFAULT_ISO_LEVEL

    def __post_init__(self):
        if len(self.elements) != N_ELEMENTS:
            raise ShapeError(f"expected {N_ELEMENTS} elements, got {len(self.elements)}")
        self.latents = np.asarray(self.latents, dtype=np.float64)
        if self.latents.shape != (N_ELEMENTS, LATENT_DIM):
            raise ShapeError(
                f"latents must be {N_ELEMENTS}x{LATENT_DIM}, got {self.latents.shape}")
        if self.symmetric_count != N_SYMMETRIC:
            raise ShapeError(f"symmetric_count is fixed at {N_SYMMETRIC}")

    @classmethod
    def inert(cls, iso_level: float = DEFAULT_ISO_LEVEL) -> "LdifShape":
        els = [GaussianElement(0.0, np.zeros(3), np.full(3, 0.1), np.zeros(3))
               for _ in range(N_ELEMENTS)]
        return cls(els, iso_level=iso_level)

    def element_centers(self) -> np.ndarray:
        return np.array([el.center for el in self.elements])


@dataclass
class ObjectPose:
    """Object-to-world map: scale, then yaw about world +y, then translation."""

    translation: np.ndarray
    scale: np.ndarray
    yaw: float

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        if np.any(self.scale <= 0.0):
            raise ShapeError("pose scale must be positive")
        self.yaw = float(self.yaw)

    @classmethod
    def from_world_box(cls, box) -> "ObjectPose":
        """Pose mapping the canonical [-1,1]^3 shape frame onto a world box."""
        return cls(box.center.copy(), 0.5 * box.size, box.yaw)

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return (self.scale * np.atleast_2d(pts)) @ yaw_matrix(self.yaw).T + self.translation

    def to_object(self, pts: np.ndarray) -> np.ndarray:
        return ((np.atleast_2d(pts) - self.translation) @ yaw_matrix(self.yaw)) / self.scale


# -- evaluation -------------------------------------------------------------

def _element_terms(shape: LdifShape, decoder: ElementDecoder, pts: np.ndarray,
                   want_grad: bool = False):
    """Per evaluation: field value (M,) before iso offset, optional spatial grad."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    m = len(pts)
    total = np.zeros(m)
    grad = np.zeros((m, 3)) if want_grad else None
    for i, el in enumerate(shape.elements):
        if el.constant == 0.0:
            continue
        rot = euler_zyx_matrix(el.euler)
        inv_r2 = 1.0 / (el.radii * el.radii)
        views = [(pts, None)]
        if i < shape.symmetric_count:
            views.append((pts @ _MIRROR, _MIRROR))
        for view_pts, mirror in views:
            local = (view_pts - el.center) @ rot
            g = np.exp(-0.5 * np.sum(local * local * inv_r2, axis=1))
            if want_grad:
                d_res, d_grad = decoder.residual_and_point_grad(shape.latents[i], local)
                term = el.constant * g * (1.0 + d_res)
                # d/dx' of g*(1+D) = g*(-x'/r^2)*(1+D) + g*dD/dx'
                glocal = (g * el.constant)[:, None] * (
                    -(local * inv_r2) * (1.0 + d_res)[:, None] + d_grad)
                gx = glocal @ rot.T
                if mirror is not None:
                    gx = gx @ mirror
                grad += gx
            else:
                term = el.constant * g * (1.0 + decoder.residual(shape.latents[i], local))
            total += term
    return (total, grad) if want_grad else total


def eval_points(shape: LdifShape, decoder: ElementDecoder, pts) -> np.ndarray:
    """Field values at object-frame points, shape (M,)."""
    return _element_terms(shape, decoder, pts) - shape.iso_level


def ldif_value(shape: LdifShape, decoder: ElementDecoder, x) -> float:
    """Field value at a single object-frame point."""
    return float(eval_points(shape, decoder, np.atleast_2d(x))[0])


def point_gradient(shape: LdifShape, decoder: ElementDecoder, pts) -> np.ndarray:
    """Spatial gradient of the field at object-frame points, shape (M, 3)."""
    _, g = _element_terms(shape, decoder, pts, want_grad=True)
    return g


def classify_points(shape: LdifShape, decoder: ElementDecoder, pts,
                    alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Inside/outside labels in (0,1): sigmoid(alpha * value); 0.5 on the surface."""
    return 1.0 / (1.0 + np.exp(-alpha * eval_points(shape, decoder, pts)))


def classify_point(shape, decoder, x, alpha: float = DEFAULT_ALPHA) -> float:
    return float(classify_points(shape, decoder, np.atleast_2d(x), alpha)[0])


def world_values(shape: LdifShape, decoder: ElementDecoder, pose: ObjectPose,
                 pts) -> np.ndarray:
    """Field values at world-frame points (inverse-pose mapped)."""
    return eval_points(shape, decoder, pose.to_object(pts))


def world_point_gradient(shape, decoder, pose: ObjectPose, pts) -> np.ndarray:
    """d(value)/d(world point): object-frame gradient through the inverse pose."""
    local = pose.to_object(pts)
    g = point_gradient(shape, decoder, local)
    # x_obj = S^-1 R^T (x - t)  =>  d/dx = R S^-1 applied from the right
    return (g / pose.scale) @ yaw_matrix(pose.yaw).T


def world_element_centers(shape: LdifShape, pose: ObjectPose) -> np.ndarray:
    """Element centers mapped to the world frame (primary centers only)."""
    return pose.to_world(shape.element_centers())


def pose_gradients(shape: LdifShape, decoder: ElementDecoder, pose: ObjectPose,
                   pts) -> dict:
    """Partials of world-frame values w.r.t. the 7 pose scalars.

    Returns arrays keyed 'translation' (M,3), 'scale' (M,3), 'yaw' (M,)
    for world points pts (M,3).
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    rot = yaw_matrix(pose.yaw)
    local = ((pts - pose.translation) @ rot) / pose.scale
    g = point_gradient(shape, decoder, local)  # object-frame gradient
    # x_obj = S^-1 R^T (x_w - t)
    d_trans = -(g / pose.scale) @ rot.T
    d_scale = -g * local / pose.scale
    d_rot = yaw_matrix_deriv(pose.yaw)
    d_yaw = np.sum(g / pose.scale * ((pts - pose.translation) @ d_rot), axis=1)
    return {"translation": d_trans, "scale": d_scale, "yaw": d_yaw}


# -- code packing -----------------------------------------------------------

def unpack_code(vector) -> LdifShape:
    """Reshape a flat 1344-vector into 32 rows of 10 analytic + 32 latent values."""
    v = np.asarray(vector, dtype=np.float64).reshape(-1)
    if v.shape[0] != CODE_LENGTH:
        raise ShapeError(f"code vector must have length {CODE_LENGTH}, got {v.shape[0]}")
    rows = v.reshape(N_ELEMENTS, ANALYTIC_DIM + LATENT_DIM)
    elements = [GaussianElement(row[0], row[1:4], row[4:7], row[7:10])
                for row in rows]
    return LdifShape(elements, latents=rows[:, ANALYTIC_DIM:].copy())


def pack_code(shape: LdifShape) -> np.ndarray:
    """Inverse of unpack_code; exact round trip."""
    rows = np.concatenate(
        [np.array([el.params() for el in shape.elements]), shape.latents], axis=1)
    return rows.reshape(-1)


# -- analytic-code gradients (for shape fitting) ------------------------------

def code_gradients(shape: LdifShape, decoder: ElementDecoder, pts) -> dict:
    """Partials of the field value at pts w.r.t. every analytic parameter.

    Returns arrays keyed 'constant' (M,32), 'center' (M,32,3),
    'radii' (M,32,3), 'euler' (M,32,3).
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    m = len(pts)
    d_c = np.zeros((m, N_ELEMENTS))
    d_p = np.zeros((m, N_ELEMENTS, 3))
    d_r = np.zeros((m, N_ELEMENTS, 3))
    d_e = np.zeros((m, N_ELEMENTS, 3))
    for i, el in enumerate(shape.elements):
        rot = euler_zyx_matrix(el.euler)
        drots = euler_zyx_derivs(el.euler)
        inv_r2 = 1.0 / (el.radii * el.radii)
        views = [(pts, False)]
        if i < shape.symmetric_count:
            views.append((pts @ _MIRROR, True))
        for view_pts, _ in views:
            diff = view_pts - el.center
            local = diff @ rot
            g = np.exp(-0.5 * np.sum(local * local * inv_r2, axis=1))
            d_res, d_grad = decoder.residual_and_point_grad(shape.latents[i], local)
            one_plus = 1.0 + d_res
            d_c[:, i] += g * one_plus
            # d/dx' of g*(1+D), shared by center and euler chains
            glocal = g[:, None] * (-(local * inv_r2) * one_plus[:, None] + d_grad)
            d_p[:, i] += -el.constant * (glocal @ rot.T)
            d_r[:, i] += el.constant * one_plus[:, None] * g[:, None] * \
                (local * local) / (el.radii ** 3)
            for k in range(3):
                # dx'/de_k = (dR/de_k)^T diff
                d_e[:, i, k] += el.constant * np.sum(glocal * (diff @ drots[k]), axis=1)
    return {"constant": d_c, "center": d_p, "radii": d_r, "euler": d_e}
