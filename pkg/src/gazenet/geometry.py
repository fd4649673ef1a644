"""Gaze-direction math and gazemap rasterization.

Angles are ``(pitch, yaw)`` in radians.  Unit vectors follow the
camera-looking-down-minus-z convention::

    v = (-cos(pitch) sin(yaw), -sin(pitch), -cos(pitch) cos(yaw))

Gazemap pixel coordinates are ``(u, v)`` with u horizontal (columns), v
vertical (rows), origin at the top-left corner, and pixel ``(col, row)``
sampled at its centre ``(col + 0.5, row + 0.5)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Tuple, Union

import numpy as np

IRIS, EYEBALL = 0, 1


class GazeAngles(NamedTuple):
    pitch: float
    yaw: float


@dataclass(frozen=True)
class GazemapSpec:
    """Map size ``width x height`` and the derived eyeball/iris radii in pixels."""

    width: int = 75
    height: int = 45

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"gazemap size must be positive, got {self.width}x{self.height}")

    @property
    def eyeball_radius(self) -> float:
        # projected eyeball diameter is 1.2 x map height
        return 0.6 * self.height

    @property
    def iris_offset_radius(self) -> float:
        # iris centre orbits at r * cos(asin(1/2))
        return self.eyeball_radius * math.cos(math.asin(0.5))

    @property
    def center(self) -> Tuple[float, float]:
        return self.width / 2.0, self.height / 2.0


@dataclass(frozen=True)
class IrisEllipse:
    center: Tuple[float, float]
    major_diameter: float
    minor_diameter: float
    orientation: float  # direction of the minor axis, radians from +u towards +v


def angles_to_vector(pitch, yaw) -> np.ndarray:
    """Unit gaze vector(s); accepts scalars or arrays and stacks x, y, z on the last axis."""
    pitch = np.asarray(pitch, dtype=np.float64)
    yaw = np.asarray(yaw, dtype=np.float64)
    cp = np.cos(pitch)
    return np.stack([-cp * np.sin(yaw), -np.sin(pitch), -cp * np.cos(yaw)], axis=-1)


def vector_to_angles(v) -> np.ndarray:
    """Inverse of :func:`angles_to_vector`; returns ``[..., (pitch, yaw)]``."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError(f"gaze vector must have unit norm, got norm {norms}")
    pitch = np.arcsin(np.clip(-v[..., 1], -1.0, 1.0))
    yaw = np.arctan2(-v[..., 0], -v[..., 2])
    return np.stack([pitch, yaw], axis=-1)


def angular_error_deg(a, b) -> np.ndarray:
    """Angle in degrees between gaze directions given as ``[..., (pitch, yaw)]``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    va = angles_to_vector(a[..., 0], a[..., 1])
    vb = angles_to_vector(b[..., 0], b[..., 1])
    cos = np.clip(np.sum(va * vb, axis=-1), -1.0, 1.0)
    err = np.degrees(np.arccos(cos))
    # identical inputs can land a hair under 1.0 after rounding; report exact zero
    return np.where(np.all(a == b, axis=-1), 0.0, err)


def iris_center(spec: GazemapSpec, pitch: float, yaw: float) -> Tuple[float, float]:
    rp = spec.iris_offset_radius
    u = spec.width / 2.0 - rp * math.sin(yaw) * math.cos(pitch)
    v = spec.height / 2.0 - rp * math.sin(pitch)
    return u, v


def iris_ellipse(spec: GazemapSpec, pitch: float, yaw: float) -> IrisEllipse:
    r = spec.eyeball_radius
    u, v = iris_center(spec, pitch, yaw)
    cu, cv = spec.center
    du, dv = u - cu, v - cv
    orientation = math.atan2(dv, du) if (du or dv) else 0.0
    return IrisEllipse(center=(u, v), major_diameter=r,
                       minor_diameter=r * abs(math.cos(pitch) * math.cos(yaw)),
                       orientation=orientation)


def pixel_centers(width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    u = np.arange(width) + 0.5
    v = np.arange(height) + 0.5
    return np.meshgrid(u, v)


def ellipse_mask(ellipse: IrisEllipse, width: int, height: int) -> np.ndarray:
    uu, vv = pixel_centers(width, height)
    du = uu - ellipse.center[0]
    dv = vv - ellipse.center[1]
    c, s = math.cos(ellipse.orientation), math.sin(ellipse.orientation)
    along_minor = du * c + dv * s
    along_major = -du * s + dv * c
    a = ellipse.major_diameter / 2.0
    b = ellipse.minor_diameter / 2.0
    if b <= 0.0:
        return np.zeros((height, width), dtype=bool)
    return (along_major / a) ** 2 + (along_minor / b) ** 2 <= 1.0


def eyeball_mask(spec: GazemapSpec) -> np.ndarray:
    uu, vv = pixel_centers(spec.width, spec.height)
    cu, cv = spec.center
    return (uu - cu) ** 2 + (vv - cv) ** 2 <= spec.eyeball_radius ** 2


def render_gazemap(spec: GazemapSpec, pitch: float, yaw: float) -> np.ndarray:
    """Boolean gazemap of shape ``2 x height x width`` (channel 0 iris, 1 eyeball)."""
    out = np.empty((2, spec.height, spec.width), dtype=bool)
    out[IRIS] = ellipse_mask(iris_ellipse(spec, pitch, yaw), spec.width, spec.height)
    out[EYEBALL] = eyeball_mask(spec)
    return out


def render_gazemaps(spec: GazemapSpec, angles: np.ndarray) -> np.ndarray:
    """Batch version of :func:`render_gazemap` for ``angles`` of shape N x 2."""
    angles = np.asarray(angles, dtype=np.float64).reshape(-1, 2)
    out = np.empty((len(angles), 2, spec.height, spec.width), dtype=bool)
    ball = eyeball_mask(spec)
    for i, (p, y) in enumerate(angles):
        out[i, IRIS] = ellipse_mask(iris_ellipse(spec, p, y), spec.width, spec.height)
        out[i, EYEBALL] = ball
    return out


def mask_centroid(mask: np.ndarray) -> Tuple[float, float]:
    """Mean pixel-centre coordinates ``(u, v)`` of the true pixels."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("centroid of an empty mask")
    return float(cols.mean() + 0.5), float(rows.mean() + 0.5)


def write_pgm(path: Union[str, Path], image: np.ndarray) -> None:
    """Write an 8-bit binary PGM (P5, maxval 255)."""
    image = np.asarray(image)
    if image.dtype == bool:
        image = image.astype(np.uint8) * 255
    elif image.dtype != np.uint8:
        image = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(image).tobytes())


def save_gazemap_pgms(out_dir: Union[str, Path], gazemap: np.ndarray, stem: str = "gazemap") -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    iris_path = out_dir / f"{stem}_iris.pgm"
    ball_path = out_dir / f"{stem}_eyeball.pgm"
    write_pgm(iris_path, gazemap[IRIS])
    write_pgm(ball_path, gazemap[EYEBALL])
    return iris_path, ball_path
