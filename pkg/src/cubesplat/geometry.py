"""Gaussian primitive math and pinhole projection.

A scene element is an anisotropic 3D Gaussian with covariance factored as
``R S S^T R^T`` (unit quaternion + positive per-axis scales). Projection to
the screen uses the local affine approximation: camera-space mean through the
pinhole model, covariance through the perspective Jacobian

    J = [[fx/z, 0, -fx*x/z^2],
         [0, fy/z, -fy*y/z^2]]

evaluated at the camera-space mean, with a low-pass floor added to the 2D
covariance diagonal so the conic stays well conditioned. Pixel sample points
sit at integer coordinates; the image rectangle for culling purposes is
``[0, width-1] x [0, height-1]``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

# low-pass floor added to both cov2d diagonal entries, px^2
LOWPASS = 0.3
DEFAULT_NEAR = 0.01


def _as_f64(x, shape, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != shape:
        raise InvalidInputError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


@dataclass
class GaussianPrimitive:
    """One splat: mean, unit quaternion (w, x, y, z), scales, color, opacity, feature."""

    mean: np.ndarray
    quat: np.ndarray
    scale: np.ndarray
    color: np.ndarray
    opacity: float
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.mean = _as_f64(self.mean, (3,), "mean")
        self.quat = np.asarray(self.quat, dtype=np.float64)
        if self.quat.shape != (4,):
            raise InvalidInputError("quat must have shape (4,)")
        norm = float(np.linalg.norm(self.quat))
        if norm == 0.0:
            raise InvalidInputError("quaternion has zero norm")
        self.quat = self.quat / norm
        self.scale = _as_f64(self.scale, (3,), "scale")
        if np.any(self.scale <= 0):
            raise InvalidInputError("scale components must be positive")
        self.color = _as_f64(self.color, (3,), "color")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise InvalidInputError("color components must lie in [0, 1]")
        self.opacity = float(self.opacity)
        if not 0.0 < self.opacity < 1.0:
            raise InvalidInputError("opacity must lie in (0, 1)")
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(-1)


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera rigid pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    width: int
    height: int
    near: float = DEFAULT_NEAR

    def __post_init__(self):
        self.rotation = _as_f64(self.rotation, (3, 3), "rotation")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise InvalidInputError("rotation must be orthonormal with det +1")
        self.translation = _as_f64(self.translation, (3,), "translation")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("image size must be at least 1x1")
        if self.near <= 0:
            raise InvalidInputError("near plane must be positive")

    def world_to_cam(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass
class ProjectedGaussian:
    """Screen-space footprint of one Gaussian."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    z_cam: float
    conic: np.ndarray
    extent: float

    @classmethod
    def from_cov(cls, mean2d, cov2d, z_cam):
        cov2d = _as_f64(cov2d, (2, 2), "cov2d")
        det = cov2d[0, 0] * cov2d[1, 1] - cov2d[0, 1] * cov2d[1, 0]
        if det <= 0:
            raise InvalidInputError("cov2d must be positive definite")
        conic = np.array([[cov2d[1, 1], -cov2d[0, 1]], [-cov2d[1, 0], cov2d[0, 0]]]) / det
        half = 0.5 * (cov2d[0, 0] + cov2d[1, 1])
        lam_max = half + math.sqrt(max((0.5 * (cov2d[0, 0] - cov2d[1, 1])) ** 2
                                       + cov2d[0, 1] * cov2d[1, 0], 0.0))
        return cls(_as_f64(mean2d, (2,), "mean2d"), cov2d, float(z_cam), conic,
                   3.0 * math.sqrt(lam_max))


@dataclass
class SimilarityTransform:
    """p -> s*p + t with uniform scale s > 0."""

    s: float
    t: np.ndarray

    def __post_init__(self):
        if self.s <= 0:
            raise InvalidInputError("similarity scale must be positive")
        self.t = _as_f64(self.t, (3,), "t")

    def inverse(self):
        return SimilarityTransform(1.0 / self.s, -self.t / self.s)


def quat_to_rotation(quat):
    """Unit-quaternion (w, x, y, z) to rotation matrix; renormalizes first."""
    q = np.asarray(quat, dtype=np.float64)
    if q.shape != (4,):
        raise InvalidInputError("quat must have shape (4,)")
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        raise InvalidInputError("quaternion has zero norm")
    w, x, y, z = q / norm
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def build_covariance(quat, scale):
    """Sigma = R S S^T R^T; symmetric positive definite for positive scales."""
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != (3,) or np.any(scale <= 0):
        raise InvalidInputError("scale must be three positive lengths")
    r = quat_to_rotation(quat)
    m = r * scale  # columns scaled: R @ diag(scale)
    return m @ m.T


def perspective_jacobian(cam, p_cam):
    x, y, z = p_cam
    return np.array([
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ])


def project_gaussian(g, cam):
    """Project one Gaussian; returns None when culled (behind near plane or
    its 3-sigma screen extent misses the image)."""
    p_cam = cam.world_to_cam(g.mean)
    z = float(p_cam[2])
    if z <= cam.near:
        return None
    mean2d = np.array([cam.fx * p_cam[0] / z + cam.cx, cam.fy * p_cam[1] / z + cam.cy])
    cov_cam = cam.rotation @ build_covariance(g.quat, g.scale) @ cam.rotation.T
    j = perspective_jacobian(cam, p_cam)
    cov2d = j @ cov_cam @ j.T + LOWPASS * np.eye(2)
    pg = ProjectedGaussian.from_cov(mean2d, cov2d, z)
    # circle/rectangle test against the pixel sample grid
    dx = max(0.0, -mean2d[0], mean2d[0] - (cam.width - 1))
    dy = max(0.0, -mean2d[1], mean2d[1] - (cam.height - 1))
    if dx * dx + dy * dy > pg.extent * pg.extent:
        return None
    return pg


def eval_gaussian_2d(pg, pixel):
    """exp(-0.5 d^T conic d) with d = pixel - mean2d; equals 1 at the mean."""
    d = np.asarray(pixel, dtype=np.float64) - pg.mean2d
    power = -0.5 * float(d @ pg.conic @ d)
    return math.exp(min(power, 0.0))


def similarity_apply(t, points):
    """Apply p -> s*p + t to an (n, 3) array (or a single 3-vector)."""
    return np.asarray(points, dtype=np.float64) * t.s + t.t


def similarity_apply_camera(t, cam):
    """Camera such that rendering the transformed scene reproduces the
    original views, with camera-space depths scaled by t.s."""
    return Camera(
        fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
        rotation=cam.rotation,
        translation=t.s * cam.translation - cam.rotation @ t.t,
        width=cam.width, height=cam.height,
        near=t.s * cam.near,
    )
