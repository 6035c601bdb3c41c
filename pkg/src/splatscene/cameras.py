"""Pinhole cameras and training-view sampling.

Continuous image coordinates run from 0 to W (resp. H); the pixel at
integer index (ix, iy) covers [ix, ix+1) x [iy, iy+1) with its center at
(ix + 0.5, iy + 0.5). Camera space is right-handed with x right, y down
(image rows), z forward, so depth is positive in front of the camera.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from splatscene.errors import SceneValidationError

# Near/far planes scale with the viewing distance so the renderer is unit-free.
NEAR_RATIO = 0.01
FAR_RATIO = 100.0


@dataclass(frozen=True)
class Camera:
    eye: tuple[float, float, float]
    target: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov_deg: float = 50.0
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if np.allclose(self.eye, self.target):
            raise SceneValidationError("camera eye and target coincide")
        if not (10.0 < self.fov_deg < 120.0):
            raise SceneValidationError(
                f"vertical fov must be in (10, 120) degrees, got {self.fov_deg}"
            )

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.target, self.eye)))

    @property
    def near(self) -> float:
        return NEAR_RATIO * self.distance

    @property
    def far(self) -> float:
        return FAR_RATIO * self.distance

    @property
    def focal_px(self) -> float:
        return 0.5 * self.height / math.tan(math.radians(self.fov_deg) / 2.0)

    def basis(self) -> np.ndarray:
        """3x3 world-to-camera rotation; rows are (right, down, forward)."""
        eye = np.asarray(self.eye, dtype=np.float64)
        target = np.asarray(self.target, dtype=np.float64)
        up = np.asarray(self.up, dtype=np.float64)
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        nr = np.linalg.norm(right)
        if nr < 1e-12:
            # Looking straight along up; pick any perpendicular right vector.
            alt = np.array([1.0, 0.0, 0.0])
            if abs(fwd[0]) > 0.9:
                alt = np.array([0.0, 0.0, 1.0])
            right = np.cross(fwd, alt)
            nr = np.linalg.norm(right)
        right /= nr
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd])

    def to_camera_space(self, points: np.ndarray) -> np.ndarray:
        """World points (N,3) -> camera-space (N,3); z is depth."""
        pts = np.asarray(points, dtype=np.float64)
        eye = np.asarray(self.eye, dtype=np.float64)
        return (pts - eye) @ self.basis().T

    def project(self, points: np.ndarray):
        """World points (N,3) -> continuous pixel coords (N,2) and depths (N,).

        No culling here; callers decide what to do with small/negative depth.
        """
        cam = self.to_camera_space(points)
        z = cam[:, 2]
        f = self.focal_px
        u = f * cam[:, 0] / z + 0.5 * self.width
        v = f * cam[:, 1] / z + 0.5 * self.height
        return np.stack([u, v], axis=1), z

    def to_json_dict(self) -> dict:
        return {
            "eye": [float(c) for c in self.eye],
            "target": [float(c) for c in self.target],
            "up": [float(c) for c in self.up],
            "fov_deg": float(self.fov_deg),
            "height": int(self.height),
            "width": int(self.width),
        }

    @classmethod
    def from_json_dict(cls, raw: dict) -> "Camera":
        return cls(
            eye=tuple(float(c) for c in raw["eye"]),
            target=tuple(float(c) for c in raw["target"]),
            up=tuple(float(c) for c in raw.get("up", (0.0, 1.0, 0.0))),
            fov_deg=float(raw["fov_deg"]),
            height=int(raw["height"]),
            width=int(raw["width"]),
        )


@dataclass(frozen=True)
class CameraConfig:
    """Orbit-sampling parameters used for training and evaluation views."""

    fov_deg: float = 50.0
    distance_factor: float = 1.8
    elevation_deg: tuple[float, float] = (-10.0, 45.0)
    resolution: int = 64


def sample_camera(rng: np.random.Generator, target_box, config: CameraConfig) -> Camera:
    """Random orbit view of a layout box.

    Azimuth is uniform on [0, 360), elevation uniform on the configured
    band, eye distance is ``distance_factor`` times the box diagonal and the
    camera looks at the box center.
    """
    azimuth = math.radians(rng.uniform(0.0, 360.0))
    lo, hi = config.elevation_deg
    elevation = math.radians(rng.uniform(lo, hi))
    dist = config.distance_factor * target_box.diagonal()
    center = target_box.center()
    eye = (
        center[0] + dist * math.cos(elevation) * math.sin(azimuth),
        center[1] + dist * math.sin(elevation),
        center[2] + dist * math.cos(elevation) * math.cos(azimuth),
    )
    return Camera(
        eye=eye,
        target=tuple(float(c) for c in center),
        fov_deg=config.fov_deg,
        height=config.resolution,
        width=config.resolution,
    )
