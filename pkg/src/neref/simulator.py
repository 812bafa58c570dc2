"""Synthetic ground truth: analytic water surfaces seen by a pinhole rig.

Each camera ray is traced to the air/water interface, refracted once and
intersected with the pattern plane at z = 0.  Renders are pure pattern
lookups, so two renders of the same scene are bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    PinholeCamera,
    ReferencePlane,
    RefractionConstants,
    intersect_heightfield_batch,
    intersect_plane_batch,
    pixels_to_rays,
    project,
    refract_batch,
)

GRAVITY = 9.81
BORDER_COLOR = (0.5, 0.5, 0.5)


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class WaveComponent:
    """One analytic height term.

    kind ``gaussian``: ``A exp(-|x - c|^2 / (2 s^2))`` with ``scale`` = s.
    kind ``sinusoidal``: ``A sin(k u + phase - w t)`` with u the coordinate
    along ``direction``, k = 2 pi / ``scale`` and deep-water w = sqrt(g k).
    kind ``gerstner``: second-order expansion of a trochoidal wave,
    ``A [cos th + (Q k A / 2) cos 2th]`` with th = k u + phase - w t, which
    stays single-valued for steepness Q in [0, 1].
    """

    kind: str
    amplitude: float
    scale: float
    center: tuple = (0.0, 0.0)
    direction: tuple = (1.0, 0.0)
    phase: float = 0.0
    steepness: float = 0.5

    def __post_init__(self):
        if self.kind not in ("gaussian", "sinusoidal", "gerstner"):
            raise SceneError(f"unknown wave kind {self.kind!r}")
        if self.scale <= 0:
            raise SceneError("wave scale must be positive")
        if not 0.0 <= self.steepness <= 1.0:
            raise SceneError("gerstner steepness must lie in [0, 1]")

    @property
    def peak(self) -> float:
        """Upper bound on |height contribution|."""
        if self.kind == "gerstner":
            k = 2 * math.pi / self.scale
            return abs(self.amplitude) * (1 + 0.5 * self.steepness * k * abs(self.amplitude))
        return abs(self.amplitude)

    def evaluate(self, x, y, t: float):
        """Height and its x/y partial derivatives."""
        A = self.amplitude
        if self.kind == "gaussian":
            dx, dy = x - self.center[0], y - self.center[1]
            g = A * np.exp(-(dx * dx + dy * dy) / (2 * self.scale**2))
            return g, -g * dx / self.scale**2, -g * dy / self.scale**2
        ux, uy = np.asarray(self.direction, dtype=np.float64) / np.hypot(*self.direction)
        k = 2 * math.pi / self.scale
        th = k * (ux * x + uy * y) + self.phase - math.sqrt(GRAVITY * k) * t
        if self.kind == "sinusoidal":
            h, dh = A * np.sin(th), A * k * np.cos(th)
        else:
            c2 = 0.5 * self.steepness * k * A
            h = A * (np.cos(th) + c2 * np.cos(2 * th))
            dh = -A * k * (np.sin(th) + 2 * c2 * np.sin(2 * th))
        return h, dh * ux, dh * uy


@dataclass(frozen=True)
class WaveSurface:
    base_height: float = 0.2
    components: tuple = ()
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if self.base_height <= 0:
            raise SceneError("base height must be positive")
        if self.max_excursion >= self.base_height:
            raise SceneError("wave amplitudes would reach the pattern plane")

    @property
    def max_excursion(self) -> float:
        return sum(c.peak for c in self.components)

    @property
    def z_range(self) -> tuple[float, float]:
        return self.base_height - self.max_excursion, self.base_height + self.max_excursion

    def height(self, x, y):
        return self.evaluate(x, y)[0]

    def evaluate(self, x, y):
        """Height and unit upward normal at (x, y)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        h = np.full(np.broadcast(x, y).shape, self.base_height)
        hx = np.zeros_like(h)
        hy = np.zeros_like(h)
        for c in self.components:
            a, b, d = c.evaluate(x, y, self.time)
            h, hx, hy = h + a, hx + b, hy + d
        n = np.stack([-hx, -hy, np.ones_like(h)], axis=-1)
        return h, n / np.linalg.norm(n, axis=-1, keepdims=True)


def surface_eval(surface: WaveSurface, x: float, y: float) -> tuple[float, np.ndarray]:
    h, n = surface.evaluate(x, y)
    return float(h), n


@dataclass(frozen=True)
class Pattern:
    """RGB texture laid on z = 0 spanning ``[x0, x1] x [y0, y1]``; row 0 sits at y0."""

    image: np.ndarray
    extent: tuple = (-0.5, 0.5, -0.5, 0.5)
    border: tuple = BORDER_COLOR

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=-1)
        if img.ndim != 3 or img.shape[-1] != 3:
            raise SceneError("pattern image must be H x W x 3")
        x0, x1, y0, y1 = self.extent
        if not (x1 > x0 and y1 > y0):
            raise SceneError("pattern extent must be positive")
        object.__setattr__(self, "image", img)

    def sample(self, points) -> np.ndarray:
        """Bilinear lookup at world points (..., 2 or 3); the border colour outside."""
        p = np.asarray(points, dtype=np.float64)
        H, W = self.image.shape[:2]
        x0, x1, y0, y1 = self.extent
        u = (p[..., 0] - x0) / (x1 - x0) * W - 0.5
        v = (p[..., 1] - y0) / (y1 - y0) * H - 0.5
        inside = (u >= -0.5) & (u <= W - 0.5) & (v >= -0.5) & (v <= H - 0.5)
        inside &= np.isfinite(u) & np.isfinite(v)
        u = np.clip(np.nan_to_num(u), 0, W - 1)
        v = np.clip(np.nan_to_num(v), 0, H - 1)
        i0 = np.minimum(np.floor(v).astype(int), H - 2) if H > 1 else np.zeros(v.shape, int)
        j0 = np.minimum(np.floor(u).astype(int), W - 2) if W > 1 else np.zeros(u.shape, int)
        fv = (v - i0)[..., None]
        fu = (u - j0)[..., None]
        i1 = np.minimum(i0 + 1, H - 1)
        j1 = np.minimum(j0 + 1, W - 1)
        img = self.image
        c = (img[i0, j0] * (1 - fu) * (1 - fv) + img[i0, j1] * fu * (1 - fv)
             + img[i1, j0] * (1 - fu) * fv + img[i1, j1] * fu * fv)
        return np.where(inside[..., None], c, np.asarray(self.border))


def checkerboard(cells: int = 16, resolution: int = 256, jitter: float = 0.25, blur: float = 0.0,
                 seed: int = 0) -> np.ndarray:
    """Binary checkerboard whose grid lines are randomly displaced by up to ``jitter`` cells."""
    rng = np.random.default_rng(seed)

    def edges():
        e = np.arange(cells + 1, dtype=np.float64)
        e[1:-1] += rng.uniform(-jitter, jitter, cells - 1) if cells > 1 else 0.0
        return e / cells

    ex, ey = edges(), edges()
    t = (np.arange(resolution) + 0.5) / resolution
    ix = np.searchsorted(ex, t, side="right") - 1
    iy = np.searchsorted(ey, t, side="right") - 1
    img = ((iy[:, None] + ix[None, :]) % 2).astype(np.float64)
    if blur > 0:
        from scipy.ndimage import gaussian_filter

        img = gaussian_filter(img, blur, mode="nearest")
    return np.repeat(img[..., None], 3, axis=-1)


@dataclass
class View:
    image: np.ndarray      # H x W x 3
    depth: np.ndarray      # H x W, ray parameter to the first surface hit
    normal: np.ndarray     # H x W x 3
    warp: np.ndarray       # H x W x 2, distorted pixel -> reference pixel offset
    mask: np.ndarray       # H x W bool
    hit: np.ndarray        # H x W x 3, pattern-plane point seen by each pixel


@dataclass(frozen=True)
class WarpField:
    displacement: np.ndarray
    mask: np.ndarray


@dataclass
class Scene:
    cameras: list
    surface: WaveSurface
    pattern: Pattern
    plane: ReferencePlane = field(default_factory=ReferencePlane)
    constants: RefractionConstants = field(default_factory=RefractionConstants)
    train: list = None       # per-camera training flag

    def __post_init__(self):
        if self.train is None:
            self.train = [True] * len(self.cameras)
        if len(self.train) != len(self.cameras):
            raise SceneError("one training flag per camera required")
        top = self.surface.z_range[1]
        for k, cam in enumerate(self.cameras):
            if cam.center[2] <= top:
                raise SceneError(f"camera {cam.name or k} sits at z={cam.center[2]:.4f}, "
                                 f"not above the water surface (max z={top:.4f})")

    @property
    def train_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.train) if t]

    @property
    def heldout_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.train) if not t]

    def slab(self, margin: float = 0.2) -> tuple[float, float]:
        """z-interval holding the water volume, widened by ``margin`` of its height."""
        top = self.surface.z_range[1]
        return -margin * top, top * (1 + margin)


def slab_bounds(origins, directions, z_lo: float, z_hi: float) -> tuple[np.ndarray, np.ndarray]:
    """Ray parameters where downward rays cross z_hi and z_lo."""
    dz = np.where(np.abs(directions[..., 2]) > 1e-12, directions[..., 2], -1e-12)
    a = (z_hi - origins[..., 2]) / dz
    b = (z_lo - origins[..., 2]) / dz
    return np.maximum(np.minimum(a, b), 0.0), np.maximum(a, b)


def render_view(scene: Scene, camera_index: int, with_water: bool = True) -> View:
    cam = scene.cameras[camera_index]
    pix = cam.pixel_grid().reshape(-1, 2)
    o, d = pixels_to_rays(cam, pix)
    H, W = cam.height, cam.width
    lam_p, q, ok_p = intersect_plane_batch(o, d, scene.plane)
    ok_p &= lam_p > 0
    if not with_water:
        normal = np.broadcast_to(scene.plane.normal, q.shape)
        return View(
            scene.pattern.sample(q).reshape(H, W, 3),
            lam_p.reshape(H, W),
            normal.reshape(H, W, 3).copy(),
            np.zeros((H, W, 2)),
            ok_p.reshape(H, W),
            q.reshape(H, W, 3),
        )
    z_lo, z_hi = scene.surface.z_range
    pad = 1e-3
    near, far = slab_bounds(o, d, z_lo - pad, z_hi + pad)
    lam_s, ps, ns, ok_s = intersect_heightfield_batch(o, d, scene.surface, (near, far))
    d2, ok_r = refract_batch(d, ns, scene.constants.ratio)
    _, q2, ok_q = intersect_plane_batch(np.nan_to_num(ps), np.nan_to_num(d2), scene.plane)
    mask = ok_p & ok_s & ok_r & ok_q
    ref_pix = project(cam, q2)
    warp = np.where(mask[:, None], ref_pix - pix, 0.0)
    image = scene.pattern.sample(np.where(mask[:, None], q2, np.nan))
    return View(
        image.reshape(H, W, 3),
        np.where(mask, lam_s, 0.0).reshape(H, W),
        np.where(mask[:, None], ns, 0.0).reshape(H, W, 3),
        warp.reshape(H, W, 2),
        mask.reshape(H, W),
        np.where(mask[:, None], q2, 0.0).reshape(H, W, 3),
    )


def inject_flow_noise(warp: WarpField, amplitude: float, rng: np.random.Generator) -> WarpField:
    """Add i.i.d. N(0, amplitude^2) pixel noise to each component of every valid displacement."""
    if amplitude < 0:
        raise ValueError("noise amplitude must be non-negative")
    disp = np.array(warp.displacement, dtype=np.float64)
    if amplitude == 0:
        return WarpField(disp, warp.mask.copy())
    noise = rng.normal(0.0, amplitude, size=disp.shape)
    disp[warp.mask] += noise[warp.mask]
    return WarpField(disp, warp.mask.copy())


# --------------------------------------------------------------------------- #
# rigs                                                                         #
# --------------------------------------------------------------------------- #


def grid_rig(grid: int = 3, spacing: float = 0.15, height: float = 0.6, fov: float = 40.0,
             width: int = 64, height_px: int = 64, target=(0.0, 0.0, 0.0),
             heldout=(0.075, 0.075)) -> tuple[list[PinholeCamera], list[bool]]:
    """``grid x grid`` cameras looking at ``target`` plus an optional held-out camera.

    Cameras are returned centre-first: sorted by distance from the rig
    centre, opposite positions adjacent, so any prefix is a balanced subset.
    """
    half = (grid - 1) / 2
    slots = [(i - half, j - half) for j in range(grid) for i in range(grid)]

    def key(s):
        r = round(math.hypot(*s), 9)
        ang = math.atan2(s[1], s[0]) % (2 * math.pi)
        return (r, round(ang % math.pi, 9), ang)

    cams, train = [], []
    up = (0.0, 1.0, 0.0)
    for n, (i, j) in enumerate(sorted(slots, key=key)):
        eye = (target[0] + i * spacing, target[1] + j * spacing, height)
        look = (target[0] + i * spacing * 0.5, target[1] + j * spacing * 0.5, target[2])
        cams.append(PinholeCamera.look_at(eye, look, up, fov, width, height_px, name=f"cam{n:02d}"))
        train.append(True)
    if heldout is not None:
        eye = (target[0] + heldout[0], target[1] + heldout[1], height)
        look = (target[0] + heldout[0] * 0.5, target[1] + heldout[1] * 0.5, target[2])
        cams.append(PinholeCamera.look_at(eye, look, up, fov, width, height_px, name="heldout"))
        train.append(False)
    return cams, train


def flat_refraction_offset(camera_center, hit_unrefracted, water_height: float, constants: RefractionConstants):
    """Closed-form pattern hit for flat water via scalar Snell.

    Returns the refracted hit point on z = 0 for the ray from
    ``camera_center`` through the dry hit ``hit_unrefracted``.
    """
    C = np.asarray(camera_center, dtype=np.float64)
    q = np.asarray(hit_unrefracted, dtype=np.float64)
    horiz = q[..., :2] - C[:2]
    r = np.linalg.norm(horiz, axis=-1)
    tan1 = r / C[2]
    sin1 = np.sin(np.arctan(tan1))
    sin2 = constants.n1 / constants.n2 * sin1
    tan2 = sin2 / np.sqrt(1 - sin2 * sin2)
    travel = (C[2] - water_height) * tan1 + water_height * tan2
    unit = np.divide(horiz, r[..., None], out=np.zeros_like(horiz), where=r[..., None] > 0)
    xy = C[:2] + unit * travel[..., None]
    return np.concatenate([xy, np.zeros(xy.shape[:-1] + (1,))], axis=-1)
