"""Pinhole camera poses and ray bundles (world frame is z-up)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidCameraError


@dataclass(frozen=True)
class CameraPose:
    pose_id: int
    position: tuple
    target: tuple
    up: tuple = (0.0, 0.0, 1.0)
    focal: float = 64.0
    width: int = 64
    height: int = 64
    group: str = "arc"

    def __post_init__(self):
        pos = np.asarray(self.position, float)
        tgt = np.asarray(self.target, float)
        up = np.asarray(self.up, float)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(tgt))):
            raise InvalidCameraError("non-finite camera position/target")
        fwd = tgt - pos
        if np.linalg.norm(fwd) < 1e-9:
            raise InvalidCameraError("camera position equals target")
        if np.linalg.norm(np.cross(fwd, up)) < 1e-9 * np.linalg.norm(fwd) * max(np.linalg.norm(up), 1e-12):
            raise InvalidCameraError("up vector parallel to viewing direction")
        if not self.focal > 0:
            raise InvalidCameraError("focal length must be positive")
        if self.width < 16 or self.height < 16:
            raise InvalidCameraError("image must be at least 16x16")

    def basis(self):
        """Return (right, down, forward) unit vectors."""
        pos = np.asarray(self.position, float)
        fwd = np.asarray(self.target, float) - pos
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, float))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return right, down, fwd

    def to_dict(self):
        d = asdict(self)
        for k in ("position", "target", "up"):
            d[k] = [float(v) for v in d[k]]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("position", "target", "up"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        return cls(**d)

    def with_resolution(self, width, height):
        scale = width / self.width
        return CameraPose(self.pose_id, self.position, self.target, self.up,
                          self.focal * scale, width, height, self.group)


def camera_rays(cam: CameraPose):
    """Rays through pixel centers, row-major. Returns (origins, dirs) of shape (H*W, 3)."""
    right, down, fwd = cam.basis()
    j, i = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    u = (i + 0.5 - cam.width / 2.0) / cam.focal
    v = (j + 0.5 - cam.height / 2.0) / cam.focal
    dirs = fwd[None, :] + u.reshape(-1, 1) * right[None, :] + v.reshape(-1, 1) * down[None, :]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(np.asarray(cam.position, float), dirs.shape).copy()
    return origins, dirs


def project(cam: CameraPose, points):
    """Pinhole projection of world points to (col, row) pixel coordinates."""
    right, down, fwd = cam.basis()
    rel = np.atleast_2d(np.asarray(points, float)) - np.asarray(cam.position, float)
    zc = rel @ fwd
    col = cam.focal * (rel @ right) / zc + cam.width / 2.0
    row = cam.focal * (rel @ down) / zc + cam.height / 2.0
    return np.stack([col, row], axis=1)


def look_at_pose(pose_id, position, target, focal, width, height, group="arc", up=(0.0, 0.0, 1.0)):
    return CameraPose(pose_id, tuple(float(v) for v in position), tuple(float(v) for v in target),
                      tuple(float(v) for v in up), float(focal), int(width), int(height), group)
