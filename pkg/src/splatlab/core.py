"""Domain types and shared camera/covariance math.

Conventions (fixed once, everything downstream depends on them):
  * camera transform: x_cam = R @ x_world + t, +z looking forward
  * image origin top-left, pixel centers at integer coordinates,
    u runs along width, v along height
  * all math double precision
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

NEAR_PLANE = 0.01
ORTHO_TOL = 1e-9


class SplatError(Exception):
    """Base class for errors raised by this package."""


class InvalidParameterError(SplatError, ValueError):
    """A domain invariant was violated (non-positive scale, bad opacity, ...)."""


class InvalidDepthError(SplatError, ValueError):
    """A depth value was zero/negative where a positive one is required."""


class FormatError(SplatError, ValueError):
    """A file could not be parsed; message carries file/line context."""


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion.

    Uses the unit-quaternion formula without normalizing, so the map is a
    plain polynomial in q and its analytic Jacobian matches finite
    differences even for slightly off-unit inputs.
    """
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_to_rot_many(q: np.ndarray) -> np.ndarray:
    """Vectorized quat_to_rot for an (N, 4) array; returns (N, 3, 3)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rot_jacobian(q: np.ndarray) -> np.ndarray:
    """d(quat_to_rot)/dq as a (4, 3, 3) array, same raw formula as above."""
    return quat_rot_jacobian_many(np.asarray(q, dtype=float)[None])[0]


def quat_rot_jacobian_many(q: np.ndarray) -> np.ndarray:
    """Vectorized d(quat_to_rot)/dq for (N, 4) input; returns (N, 4, 3, 3)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    jac = np.empty((q.shape[0], 4, 3, 3))
    jac[:, 0] = np.stack(
        [zero, -2 * z, 2 * y, 2 * z, zero, -2 * x, -2 * y, 2 * x, zero], axis=1
    ).reshape(-1, 3, 3)
    jac[:, 1] = np.stack(
        [zero, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x], axis=1
    ).reshape(-1, 3, 3)
    jac[:, 2] = np.stack(
        [-4 * y, 2 * x, 2 * w, 2 * x, zero, 2 * z, -2 * w, 2 * z, -4 * y], axis=1
    ).reshape(-1, 3, 3)
    jac[:, 3] = np.stack(
        [-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, zero], axis=1
    ).reshape(-1, 3, 3)
    return jac


def covariance_from(scale: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """3x3 SPD covariance R(q) diag(scale^2) R(q)^T.

    Raises InvalidParameterError for non-positive scale components.
    """
    scale = np.asarray(scale, dtype=float)
    if scale.shape != (3,) or np.any(scale <= 0):
        raise InvalidParameterError(f"scale must be 3 positive components, got {scale}")
    R = quat_to_rot(rot)
    return R @ np.diag(scale**2) @ R.T


@dataclass(frozen=True)
class Gaussian:
    """One anisotropic Gaussian primitive with two opacity parameters.

    alpha drives the base geometry; alpha_aux additionally modulates the
    final rendered transparency (effective opacity alpha_aux * alpha on the
    appearance path).
    """

    mu: np.ndarray
    alpha: float
    alpha_aux: float
    color: np.ndarray
    scale: np.ndarray
    rot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float).reshape(3))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=float).reshape(3))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=float).reshape(3))
        object.__setattr__(self, "rot", np.asarray(self.rot, dtype=float).reshape(4))
        if not (0.0 <= self.alpha <= 1.0):
            raise InvalidParameterError(f"alpha {self.alpha} outside [0, 1]")
        if not (0.0 <= self.alpha_aux <= 1.0):
            raise InvalidParameterError(f"alpha_aux {self.alpha_aux} outside [0, 1]")
        if np.any(self.scale <= 0):
            raise InvalidParameterError(f"scale {self.scale} must be positive")
        if abs(np.linalg.norm(self.rot) - 1.0) > 1e-9:
            raise InvalidParameterError(f"rot {self.rot} is not unit length")


class GaussianCloud:
    """Struct-of-arrays container for K Gaussians.

    The renderer treats a cloud as read-only; the trainer owns raw parameter
    arrays and materializes clouds from them.
    """

    def __init__(self, mu, alpha, alpha_aux, color, scale, rot):
        self.mu = np.atleast_2d(np.asarray(mu, dtype=float))
        self.alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        self.alpha_aux = np.atleast_1d(np.asarray(alpha_aux, dtype=float))
        self.color = np.atleast_2d(np.asarray(color, dtype=float))
        self.scale = np.atleast_2d(np.asarray(scale, dtype=float))
        self.rot = np.atleast_2d(np.asarray(rot, dtype=float))

    def __len__(self) -> int:
        return self.mu.shape[0]

    def validate(self):
        k = len(self)
        shapes = {
            "mu": (k, 3),
            "alpha": (k,),
            "alpha_aux": (k,),
            "color": (k, 3),
            "scale": (k, 3),
            "rot": (k, 4),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise InvalidParameterError(f"{name} has shape {arr.shape}, expected {shape}")
        if np.any(self.alpha < 0) or np.any(self.alpha > 1):
            raise InvalidParameterError("alpha outside [0, 1]")
        if np.any(self.alpha_aux < 0) or np.any(self.alpha_aux > 1):
            raise InvalidParameterError("alpha_aux outside [0, 1]")
        if np.any(self.scale <= 0):
            raise InvalidParameterError("scale must be positive")
        if np.any(np.abs(np.linalg.norm(self.rot, axis=1) - 1.0) > 1e-9):
            raise InvalidParameterError("rotation quaternions must be unit length")
        return self

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.mu.copy(), self.alpha.copy(), self.alpha_aux.copy(),
            self.color.copy(), self.scale.copy(), self.rot.copy(),
        )

    def gaussian(self, k: int) -> Gaussian:
        return Gaussian(self.mu[k], float(self.alpha[k]), float(self.alpha_aux[k]),
                        self.color[k], self.scale[k], self.rot[k])

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianCloud":
        return cls(
            np.stack([g.mu for g in gaussians]),
            np.array([g.alpha for g in gaussians]),
            np.array([g.alpha_aux for g in gaussians]),
            np.stack([g.color for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.stack([g.rot for g in gaussians]),
        )

    @classmethod
    def empty(cls) -> "GaussianCloud":
        z = np.zeros((0,))
        return cls(np.zeros((0, 3)), z, z, np.zeros((0, 3)), np.ones((0, 3)), np.tile([1.0, 0, 0, 0], (0, 1)))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image dimensions must be >= 1")
        if np.max(np.abs(R @ R.T - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InvalidParameterError("R must be a proper rotation (orthonormal, det +1)")

    def project(self, x_world: np.ndarray):
        """Project one world point; returns (pixel or None, z).

        pixel is None when |z| < 1e-12 (no division is attempted); z may be
        negative for points behind the camera, callers must check.
        """
        x_cam = self.R @ np.asarray(x_world, dtype=float) + self.t
        z = float(x_cam[2])
        if abs(z) < 1e-12:
            return None, z
        pix = np.array([self.fx * x_cam[0] / z + self.cx, self.fy * x_cam[1] / z + self.cy])
        return pix, z

    def project_many(self, x_world: np.ndarray):
        """Vectorized projection: (N,3) -> pixels (N,2), z (N,), ok (N,) bool."""
        x_cam = np.asarray(x_world, dtype=float) @ self.R.T + self.t
        z = x_cam[:, 2]
        ok = np.abs(z) >= 1e-12
        zsafe = np.where(ok, z, 1.0)
        pix = np.stack(
            [self.fx * x_cam[:, 0] / zsafe + self.cx, self.fy * x_cam[:, 1] / zsafe + self.cy],
            axis=1,
        )
        pix[~ok] = np.nan
        return pix, z, ok

    def unproject(self, pixel: np.ndarray, z: float) -> np.ndarray:
        """Inverse of project for z > 0; raises InvalidDepthError otherwise."""
        if z <= 0:
            raise InvalidDepthError(f"depth must be positive, got {z}")
        pixel = np.asarray(pixel, dtype=float)
        x_cam = np.array([(pixel[0] - self.cx) / self.fx * z, (pixel[1] - self.cy) / self.fy * z, z])
        return self.R.T @ (x_cam - self.t)

    def unproject_many(self, pixels: np.ndarray, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if np.any(z <= 0):
            raise InvalidDepthError("all depths must be positive")
        pixels = np.asarray(pixels, dtype=float)
        x_cam = np.stack(
            [(pixels[:, 0] - self.cx) / self.fx * z, (pixels[:, 1] - self.cy) / self.fy * z, z],
            axis=1,
        )
        return (x_cam - self.t) @ self.R

    def camera_center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def cam_to_world(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def world_to_cam(self) -> "RigidTransform":
        return RigidTransform(self.R.copy(), self.t.copy())


@dataclass(frozen=True)
class RigidTransform:
    """Rotation-plus-translation map x -> R x + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.R.T + self.t

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


def validate_image(img: np.ndarray, cam: Camera | None = None) -> np.ndarray:
    """Check an HxWx3 color buffer; values are expected inside [0, 1]."""
    img = np.asarray(img, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidParameterError(f"color buffer must be HxWx3, got {img.shape}")
    if cam is not None and img.shape[:2] != (cam.height, cam.width):
        raise InvalidParameterError("color buffer does not match camera dimensions")
    return img


def validate_depth(depth: np.ndarray, cam: Camera | None = None) -> np.ndarray:
    """Check an HxW depth buffer; 0 is the empty sentinel, negatives invalid."""
    depth = np.asarray(depth, dtype=float)
    if depth.ndim != 2:
        raise InvalidParameterError(f"depth buffer must be HxW, got {depth.shape}")
    if cam is not None and depth.shape != (cam.height, cam.width):
        raise InvalidParameterError("depth buffer does not match camera dimensions")
    if np.any(depth < 0):
        raise InvalidParameterError("depth must be non-negative")
    return depth


# ---------------------------------------------------------------------------
# Scene file: one JSON object with "gaussians" and "cameras" arrays.
# Field-by-field layout documented in README.md.
# ---------------------------------------------------------------------------

def scene_to_json(cloud: GaussianCloud, cameras: list[Camera]) -> str:
    obj = {
        "gaussians": [
            {
                "mu": cloud.mu[k].tolist(),
                "alpha": float(cloud.alpha[k]),
                "alpha_aux": float(cloud.alpha_aux[k]),
                "color": cloud.color[k].tolist(),
                "scale": cloud.scale[k].tolist(),
                "rot": cloud.rot[k].tolist(),
            }
            for k in range(len(cloud))
        ],
        "cameras": [
            {
                "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                "R": c.R.tolist(), "t": c.t.tolist(),
                "width": c.width, "height": c.height,
            }
            for c in cameras
        ],
    }
    return json.dumps(obj, indent=1)


def scene_from_json(text: str) -> tuple[GaussianCloud, list[Camera]]:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"scene file is not valid JSON: {e}") from e
    if not isinstance(obj, dict) or "gaussians" not in obj or "cameras" not in obj:
        raise FormatError("scene file must be a JSON object with 'gaussians' and 'cameras'")
    try:
        gs = obj["gaussians"]
        if gs:
            cloud = GaussianCloud(
                np.array([g["mu"] for g in gs], dtype=float),
                np.array([g["alpha"] for g in gs], dtype=float),
                np.array([g["alpha_aux"] for g in gs], dtype=float),
                np.array([g["color"] for g in gs], dtype=float),
                np.array([g["scale"] for g in gs], dtype=float),
                np.array([g["rot"] for g in gs], dtype=float),
            )
        else:
            cloud = GaussianCloud.empty()
        cams = [
            Camera(c["fx"], c["fy"], c["cx"], c["cy"],
                   np.array(c["R"], dtype=float), np.array(c["t"], dtype=float),
                   int(c["width"]), int(c["height"]))
            for c in obj["cameras"]
        ]
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, InvalidParameterError):
            raise
        raise FormatError(f"malformed scene file: {e}") from e
    cloud.validate()
    return cloud, cams


def save_scene(path, cloud: GaussianCloud, cameras: list[Camera]):
    with open(path, "w") as f:
        f.write(scene_to_json(cloud, cameras))


def load_scene(path) -> tuple[GaussianCloud, list[Camera]]:
    with open(path) as f:
        return scene_from_json(f.read())
