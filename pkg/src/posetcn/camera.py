"""Camera geometry: rigid world/camera transforms and distorted perspective projection.

Conventions: the camera looks down +z, image x grows to the right and image
y grows downward.  Quaternions are ``(w, x, y, z)`` Hamilton quaternions.
The stored rotation maps world axes into camera axes and ``translation`` is
the camera center in world coordinates (mm), so ``p_cam = R (p_world - t)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, ConfigError


def qrot(q, v):
    """Rotate vectors ``v[..., 3]`` by unit quaternion ``q = (w, x, y, z)``."""
    q = np.asarray(q, np.float64)
    v = np.asarray(v, np.float64)
    w, u = q[..., :1], q[..., 1:]
    uv = np.cross(u, v)
    return v + 2 * (w * uv + np.cross(u, uv))


def qconj(q):
    q = np.asarray(q, np.float64)
    return np.concatenate([q[..., :1], -q[..., 1:]], axis=-1)


def qmul(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


@dataclass(frozen=True)
class CameraModel:
    focal: tuple[float, float]
    principal: tuple[float, float]
    image_size: tuple[int, int]
    radial: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tangential: tuple[float, float] = (0.0, 0.0)
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    name: str = field(default="cam", compare=False)

    def __post_init__(self):
        if min(self.focal) <= 0:
            raise ConfigError(f"camera {self.name}: focal lengths must be positive, got {self.focal}")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ConfigError(f"camera {self.name}: rotation quaternion is not unit length")
        if len(self.radial) != 3 or len(self.tangential) != 2:
            raise ConfigError(f"camera {self.name}: expected 3 radial and 2 tangential coefficients")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "focal": list(self.focal),
            "principal": list(self.principal),
            "image_size": list(self.image_size),
            "radial": list(self.radial),
            "tangential": list(self.tangential),
            "rotation": list(self.rotation),
            "translation": list(self.translation),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        expected = {"name", "focal", "principal", "image_size", "radial", "tangential",
                    "rotation", "translation"}
        if set(d) != expected:
            raise ConfigError(f"camera record keys {sorted(d)} differ from {sorted(expected)}")
        return cls(
            name=d["name"],
            focal=tuple(float(v) for v in d["focal"]),
            principal=tuple(float(v) for v in d["principal"]),
            image_size=tuple(int(v) for v in d["image_size"]),
            radial=tuple(float(v) for v in d["radial"]),
            tangential=tuple(float(v) for v in d["tangential"]),
            rotation=tuple(float(v) for v in d["rotation"]),
            translation=tuple(float(v) for v in d["translation"]),
        )


def world_to_camera(points, cam: CameraModel):
    return qrot(np.broadcast_to(cam.rotation, np.shape(points)[:-1] + (4,)),
                np.asarray(points, np.float64) - np.asarray(cam.translation))


def camera_to_world(points, cam: CameraModel):
    q = np.broadcast_to(qconj(cam.rotation), np.shape(points)[:-1] + (4,))
    return qrot(q, points) + np.asarray(cam.translation)


def _check_depth(z):
    bad = np.argwhere(z <= 0)
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise BehindCameraError(f"point behind camera at index {idx} (z={z[idx]:.6g})", idx)


def _distortion_terms(xn, yn, cam, distortion):
    k1, k2, k3 = cam.radial if distortion else (0.0, 0.0, 0.0)
    p1, p2 = cam.tangential if distortion else (0.0, 0.0)
    r2 = xn * xn + yn * yn
    radial = 1 + r2 * (k1 + r2 * (k2 + r2 * k3))
    d_radial = k1 + r2 * (2 * k2 + 3 * k3 * r2)
    return r2, radial, d_radial, p1, p2


def project(points, cam: CameraModel, distortion: bool = True):
    """Project camera-space points ``[..., 3]`` (mm) to pixels ``[..., 2]``.

    Applies three radial and two tangential distortion coefficients
    (Brown-Conrady model) before the focal/principal-point mapping.
    """
    p = np.asarray(points, np.float64)
    z = p[..., 2]
    _check_depth(z)
    xn, yn = p[..., 0] / z, p[..., 1] / z
    r2, radial, _, p1, p2 = _distortion_terms(xn, yn, cam, distortion)
    xd = xn * radial + 2 * p1 * xn * yn + p2 * (r2 + 2 * xn * xn)
    yd = yn * radial + p1 * (r2 + 2 * yn * yn) + 2 * p2 * xn * yn
    return np.stack([cam.focal[0] * xd + cam.principal[0], cam.focal[1] * yd + cam.principal[1]], axis=-1)


def project_backward(grad_2d, points, cam: CameraModel, distortion: bool = True):
    """Gradient of ``sum(grad_2d * project(points))`` with respect to ``points``."""
    p = np.asarray(points, np.float64)
    z = p[..., 2]
    _check_depth(z)
    xn, yn = p[..., 0] / z, p[..., 1] / z
    _, radial, d_radial, p1, p2 = _distortion_terms(xn, yn, cam, distortion)
    dxx = radial + 2 * xn * xn * d_radial + 2 * p1 * yn + 6 * p2 * xn
    dyy = radial + 2 * yn * yn * d_radial + 6 * p1 * yn + 2 * p2 * xn
    dxy = 2 * xn * yn * d_radial + 2 * p1 * xn + 2 * p2 * yn  # symmetric cross term
    gu = grad_2d[..., 0] * cam.focal[0]
    gv = grad_2d[..., 1] * cam.focal[1]
    gxn = gu * dxx + gv * dxy
    gyn = gu * dxy + gv * dyy
    return np.stack([gxn / z, gyn / z, -(gxn * xn + gyn * yn) / z], axis=-1)


def lift_pinhole(pixels, depth, cam: CameraModel):
    """Back-project pixels at known depth, ignoring distortion."""
    px = np.asarray(pixels, np.float64)
    depth = np.asarray(depth, np.float64)
    x = (px[..., 0] - cam.principal[0]) / cam.focal[0] * depth
    y = (px[..., 1] - cam.principal[1]) / cam.focal[1] * depth
    return np.stack([x, y, depth], axis=-1)


def normalize_screen_coordinates(pixels, width, height):
    """Map pixels to ``[-1, 1]`` along x, preserving aspect ratio."""
    pixels = np.asarray(pixels)
    return (pixels / width * 2 - np.array([1.0, height / width])).astype(pixels.dtype)


def image_coordinates(normalized, width, height):
    normalized = np.asarray(normalized)
    return ((normalized + np.array([1.0, height / width])) * width / 2).astype(normalized.dtype)
