"""Camera rays, vector refraction and ray/surface intersection.

Everything here is a pure function of its inputs.  Scalar-ray helpers
(`pixel_to_ray`, `refract`, `intersect_plane`, `intersect_heightfield`)
follow the documented contracts exactly; the ``*_batch`` variants do the
same arithmetic over arrays of rays for the simulator and renderer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .simulator import WaveSurface


class GeometryError(ValueError):
    pass


class TotalInternalReflection(GeometryError):
    pass


class ParallelRay(GeometryError):
    pass


class NoIntersection(GeometryError):
    pass


PARALLEL_EPS = 1e-12


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise GeometryError(f"ray direction must be unit length, got |d|={np.linalg.norm(d)}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, lam: float) -> np.ndarray:
        return self.origin + lam * self.direction


@dataclass(frozen=True)
class RefractionConstants:
    n1: float = 1.0
    n2: float = 1.33

    def __post_init__(self):
        if not (self.n1 > 0 and self.n2 > 0):
            raise GeometryError("refractive indices must be positive")

    @property
    def ratio(self) -> float:
        return self.n1 / self.n2


@dataclass(frozen=True)
class ReferencePlane:
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    offset: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise GeometryError("plane normal must be unit length")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole camera with world-from-camera pose.

    Camera frame: +x right, +y down (image rows), +z forward.  ``rotation``
    maps camera-frame vectors into the world frame and ``translation`` is
    the camera centre in world coordinates.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    name: str = ""

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise GeometryError("camera rotation must be orthonormal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @classmethod
    def look_at(cls, eye, target, up, fov_deg: float, width: int, height: int, name: str = "") -> "PinholeCamera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = normalize(np.asarray(target, dtype=np.float64) - eye)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise GeometryError("up vector is parallel to the viewing direction")
        right = normalize(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=1)
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, R, eye, width, height, name)

    def pixel_grid(self) -> np.ndarray:
        """Pixel-centre coordinates, shape (H, W, 2) as (u, v)."""
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        return np.stack([u, v], axis=-1)


def pixel_to_ray(camera: PinholeCamera, pixel) -> Ray:
    o, d = pixels_to_rays(camera, np.asarray(pixel, dtype=np.float64).reshape(1, 2))
    return Ray(o[0], d[0])


def pixels_to_rays(camera: PinholeCamera, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pixels = np.asarray(pixels, dtype=np.float64)
    shape = pixels.shape[:-1]
    p = pixels.reshape(-1, 2)
    local = np.stack(
        [(p[:, 0] - camera.cx) / camera.fx, (p[:, 1] - camera.cy) / camera.fy, np.ones(len(p))], axis=-1
    )
    d = normalize(local @ camera.rotation.T)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return o.reshape(shape + (3,)), d.reshape(shape + (3,))


def project(camera: PinholeCamera, points: np.ndarray) -> np.ndarray:
    """World points (..., 3) to pixel coordinates (..., 2)."""
    pts = np.asarray(points, dtype=np.float64)
    local = (pts - camera.center) @ camera.rotation
    return np.stack(
        [
            camera.fx * local[..., 0] / local[..., 2] + camera.cx,
            camera.fy * local[..., 1] / local[..., 2] + camera.cy,
        ],
        axis=-1,
    )


def refract(incident, surface_normal, constants: RefractionConstants) -> np.ndarray:
    """Snell refraction of a unit direction through a unit normal.

    The normal must face the incident medium (``N . d < 0``).  Raises
    `TotalInternalReflection` when no transmitted ray exists.
    """
    d = np.asarray(incident, dtype=np.float64).reshape(3)
    N = np.asarray(surface_normal, dtype=np.float64).reshape(3)
    out, ok = refract_batch(d[None], N[None], constants.ratio)
    if not ok[0]:
        raise TotalInternalReflection("no transmitted ray (total internal reflection)")
    return out[0]


def refract_batch(d: np.ndarray, N: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised refraction with index ratio ``s = n1/n2``.

    Returns directions and a validity mask; invalid rows are NaN.  ``s``
    may be a scalar or one ratio per ray.
    """
    s = np.asarray(s, dtype=np.float64)
    cos_i = np.einsum("...k,...k->...", N, d)
    a = -cos_i
    radicand = 1.0 - s * s * (1.0 - cos_i * cos_i)
    ok = radicand >= 0.0
    b = np.sqrt(np.where(ok, radicand, 0.0))
    t = s[..., None] * d + (s * a - b)[..., None] * N
    t = t / np.linalg.norm(t, axis=-1, keepdims=True)
    return np.where(ok[..., None], t, np.nan), ok


def intersect_plane(ray: Ray, plane: ReferencePlane) -> tuple[float, np.ndarray]:
    denom = float(ray.direction @ plane.normal)
    if abs(denom) <= PARALLEL_EPS:
        raise ParallelRay("ray is parallel to the reference plane")
    lam = (plane.offset - ray.origin @ plane.normal) / denom
    return lam, ray.origin + lam * ray.direction


def intersect_plane_batch(origins, directions, plane: ReferencePlane) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    denom = directions @ plane.normal
    ok = np.abs(denom) > PARALLEL_EPS
    lam = (plane.offset - origins @ plane.normal) / np.where(ok, denom, 1.0)
    lam = np.where(ok, lam, np.nan)
    return lam, origins + lam[..., None] * directions, ok


MARCH_STEPS = 64
BISECTIONS = 60


def intersect_heightfield(ray: Ray, surface: "WaveSurface", lam_range) -> tuple[float, np.ndarray, np.ndarray]:
    lam, pts, nrm, ok = intersect_heightfield_batch(ray.origin[None], ray.direction[None], surface, lam_range)
    if not ok[0]:
        raise NoIntersection("ray does not cross the surface within the given range")
    return float(lam[0]), pts[0], nrm[0]


def intersect_heightfield_batch(origins, directions, surface: "WaveSurface", lam_range):
    """First downward crossing of ``z = height(x, y)`` for each ray.

    Marches in 1/64 steps of the range to bracket the sign change of
    ``z - height``, then bisects.  ``lam_range`` is a pair of scalars or of
    per-ray arrays.
    """
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    n = len(origins)
    lo = np.broadcast_to(np.asarray(lam_range[0], dtype=np.float64), (n,))
    hi = np.broadcast_to(np.asarray(lam_range[1], dtype=np.float64), (n,))

    def gap(lam):
        p = origins + lam[:, None] * directions
        return p[:, 2] - surface.height(p[:, 0], p[:, 1])

    steps = lo[:, None] + (hi - lo)[:, None] * np.linspace(0.0, 1.0, MARCH_STEPS + 1)[None, :]
    g = np.stack([gap(steps[:, k]) for k in range(MARCH_STEPS + 1)], axis=1)
    above = g > 0
    crossing = above[:, :-1] & ~above[:, 1:]
    ok = crossing.any(axis=1)
    k = np.argmax(crossing, axis=1)
    a = steps[np.arange(n), k]
    b = steps[np.arange(n), k + 1]
    for _ in range(BISECTIONS):
        m = 0.5 * (a + b)
        up = gap(m) > 0
        a = np.where(up, m, a)
        b = np.where(up, b, m)
    lam = np.where(ok, 0.5 * (a + b), np.nan)
    pts = origins + lam[:, None] * directions
    _, nrm = surface.evaluate(pts[:, 0], pts[:, 1])
    return lam, pts, nrm, ok
