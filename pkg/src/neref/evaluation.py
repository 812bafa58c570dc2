"""Error metrics, view synthesis from a trained field, and ablation sweeps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .field import NeRefNetwork, SamplingSchedule, integrate_rays
from .geometry import (
    PinholeCamera,
    ReferencePlane,
    RefractionConstants,
    intersect_plane_batch,
    pixels_to_rays,
    refract_batch,
)
from .simulator import Pattern, Scene, slab_bounds


class ShapeMismatch(ValueError):
    pass


class InsufficientCameras(ValueError):
    pass


@dataclass
class MetricsReport:
    depth_rmse: float
    depth_relative_error: float
    normal_angle_mean: float
    normal_l2_mean: float
    psnr: float = float("nan")
    ssim: float = float("nan")
    depth_error_map: np.ndarray | None = None
    normal_error_map: np.ndarray | None = None

    def row(self) -> dict:
        return {k: getattr(self, k) for k in
                ("depth_rmse", "depth_relative_error", "normal_angle_mean", "normal_l2_mean", "psnr", "ssim")}


def depth_normal_errors(depth, normal, depth_gt, normal_gt, mask=None) -> MetricsReport:
    """Masked depth and normal error statistics.  Normals are unit-normalised before comparison."""
    depth, depth_gt = np.asarray(depth, dtype=np.float64), np.asarray(depth_gt, dtype=np.float64)
    normal, normal_gt = np.asarray(normal, dtype=np.float64), np.asarray(normal_gt, dtype=np.float64)
    if depth.shape != depth_gt.shape or normal.shape != normal_gt.shape or normal.shape[:-1] != depth.shape:
        raise ShapeMismatch("recovered and ground-truth maps differ in shape")
    mask = np.ones(depth.shape, bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != depth.shape:
        raise ShapeMismatch("mask shape differs from the depth map")
    n = _unit(normal)
    ng = _unit(normal_gt)
    rel = np.abs(depth - depth_gt) / np.where(depth_gt != 0, np.abs(depth_gt), np.inf)
    l2 = np.linalg.norm(n - ng, axis=-1)
    ang = np.degrees(np.arccos(np.clip(np.sum(n * ng, axis=-1), -1.0, 1.0)))
    if not mask.any():
        nan = float("nan")
        return MetricsReport(nan, nan, nan, nan)
    return MetricsReport(
        float(np.sqrt(np.mean((depth - depth_gt)[mask] ** 2))),
        float(rel[mask].mean()),
        float(ang[mask].mean()),
        float(l2[mask].mean()),
        depth_error_map=np.where(mask, rel, 0.0),
        normal_error_map=np.where(mask, ang, 0.0),
    )


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


# --------------------------------------------------------------------------- #
# image metrics                                                                #
# --------------------------------------------------------------------------- #


def luma(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 2:
        return a
    return a[..., :3] @ np.array([0.299, 0.587, 0.114])


def psnr(rendered, reference) -> float:
    a, b = np.asarray(rendered, dtype=np.float64), np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch("images differ in shape")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def ssim(rendered, reference, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM on luma with an 11x11 Gaussian window (truncated at 3.5 sigma), valid region only."""
    a, b = np.asarray(rendered, dtype=np.float64), np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch("images differ in shape")
    x, y = luma(a), luma(b)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2

    def blur(z):
        return gaussian_filter(z, sigma, truncate=3.5, mode="reflect")

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    r = 5
    if s.shape[0] > 2 * r and s.shape[1] > 2 * r:
        s = s[r:-r, r:-r]
    return float(s.mean())


def image_metrics(rendered, reference) -> tuple[float, float]:
    return psnr(rendered, reference), ssim(rendered, reference)


# --------------------------------------------------------------------------- #
# rendering from a field                                                       #
# --------------------------------------------------------------------------- #


@dataclass
class FieldRender:
    image: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    mask: np.ndarray


def field_maps(network: NeRefNetwork, camera: PinholeCamera, schedule: SamplingSchedule, slab,
               chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Accumulated depth (H, W) and unnormalised normal (H, W, 3) for every pixel.

    Sampling is deterministic (bin midpoints, quantile resampling)."""
    o, d = pixels_to_rays(camera, camera.pixel_grid().reshape(-1, 2))
    near, far = slab_bounds(o, d, *slab)
    depth = np.empty(len(o))
    normal = np.empty((len(o), 3))
    for a in range(0, len(o), chunk):
        sl = slice(a, a + chunk)
        sched = replace(schedule, near=near[sl], far=far[sl], stratified=False)
        res = integrate_rays(network, o[sl], d[sl], sched)
        depth[sl], normal[sl] = res.depth, res.normal
    H, W = camera.height, camera.width
    return depth.reshape(H, W), normal.reshape(H, W, 3)


def render_surface(camera: PinholeCamera, depth, normal, pattern: Pattern, plane: ReferencePlane,
                   constants: RefractionConstants) -> FieldRender:
    """Refract each pixel ray at ``o + depth d`` through ``normal`` and look up the pattern."""
    o, d = pixels_to_rays(camera, camera.pixel_grid().reshape(-1, 2))
    D = np.asarray(depth, dtype=np.float64).reshape(-1)
    N = np.asarray(normal, dtype=np.float64).reshape(-1, 3)
    norm = np.linalg.norm(N, axis=-1)
    ok = norm > 1e-12
    n_hat = np.where(ok[:, None], N / np.where(ok, norm, 1.0)[:, None], 0.0)
    p_s = o + D[:, None] * d
    d2, ok_r = refract_batch(d, n_hat, constants.ratio)
    lam, q, ok_p = intersect_plane_batch(p_s, np.nan_to_num(d2), plane)
    ok &= ok_r & ok_p & (lam > 0)
    img = pattern.sample(np.where(ok[:, None], q, np.nan))
    H, W = camera.height, camera.width
    return FieldRender(img.reshape(H, W, 3), D.reshape(H, W), N.reshape(H, W, 3), ok.reshape(H, W))


def render_from_field(network: NeRefNetwork, camera: PinholeCamera, pattern: Pattern, plane: ReferencePlane,
                      constants: RefractionConstants, schedule: SamplingSchedule, slab) -> FieldRender:
    """View synthesis: integrate, refract at the accumulated surface, sample the pattern.

    Pixels whose refraction or plane hit fails show the pattern's border colour.
    """
    depth, normal = field_maps(network, camera, schedule, slab)
    return render_surface(camera, depth, normal, pattern, plane, constants)


# --------------------------------------------------------------------------- #
# evaluation against simulator ground truth                                    #
# --------------------------------------------------------------------------- #


def evaluate_view(network: NeRefNetwork, scene: Scene, view, camera_index: int, schedule: SamplingSchedule,
                  margin: float = 0.2) -> tuple[MetricsReport, FieldRender]:
    cam = scene.cameras[camera_index]
    fr = render_from_field(network, cam, scene.pattern, scene.plane, scene.constants, schedule,
                           scene.slab(margin))
    rep = depth_normal_errors(fr.depth, fr.normal, view.depth, view.normal, view.mask)
    rep.psnr, rep.ssim = image_metrics(fr.image, view.image)
    return rep, fr


def eval_schedule(cfg) -> SamplingSchedule:
    return SamplingSchedule(cfg.coarse_samples, cfg.fine_samples, 0.0, 1.0, stratified=False)


def heldout_metrics(network, scene: Scene, views: dict, cfg) -> MetricsReport:
    """Mean of the metrics over the scene's held-out cameras."""
    reps = [evaluate_view(network, scene, views[k], k, eval_schedule(cfg), cfg.bounds_margin)[0]
            for k in scene.heldout_indices]
    if not reps:
        raise InsufficientCameras("scene has no held-out camera")
    keys = reps[0].row().keys()
    vals = {k: float(np.mean([r.row()[k] for r in reps])) for k in keys}
    return MetricsReport(**vals)


# --------------------------------------------------------------------------- #
# sweeps                                                                       #
# --------------------------------------------------------------------------- #

SWEEP_COLUMNS = ("param", "value", "seed", "depth_rmse", "depth_relative_error", "normal_angle_mean",
                 "normal_l2_mean", "psnr", "ssim")


def camera_count_sweep(scene: Scene, views: dict, cfg, counts=(9, 7, 5, 3), seeds=None, out_dir=None,
                       progress=None) -> list[dict]:
    """Retrain from scratch on nested centre-first camera subsets; one row per (count, seed)."""
    from .training import train

    available = len(scene.train_indices)
    if max(counts) > available:
        raise InsufficientCameras(f"sweep needs {max(counts)} training cameras, scene has {available}")
    rows = []
    for seed in seeds if seeds is not None else [cfg.seed]:
        for n in counts:
            c = replace(cfg, cameras=int(n), seed=int(seed))
            sub = None if out_dir is None else Path(out_dir) / f"cameras={n}" / f"seed={seed}"
            net, _ = train(scene, views, c, sub)
            rep = heldout_metrics(net, scene, views, c)
            rows.append({"param": "cameras", "value": n, "seed": seed, **rep.row()})
            if progress:
                progress(rows[-1])
    return rows


def flow_noise_sweep(scene: Scene, views: dict, cfg, amplitudes=(0.0, 0.5, 1.0, 1.5, 2.0), seeds=None,
                     out_dir=None, progress=None) -> list[dict]:
    """Retrain with Gaussian noise of each amplitude (pixels) added to the training warps."""
    from .training import train

    amps = [float(a) for a in amplitudes]
    if any(a < 0 for a in amps) or amps != sorted(amps):
        raise ValueError("noise amplitudes must be non-negative and ascending")
    rows = []
    for seed in seeds if seeds is not None else [cfg.seed]:
        for a in amps:
            c = replace(cfg, flow_noise=a, seed=int(seed))
            sub = None if out_dir is None else Path(out_dir) / f"noise={a:g}" / f"seed={seed}"
            net, _ = train(scene, views, c, sub)
            rep = heldout_metrics(net, scene, views, c)
            rows.append({"param": "noise", "value": a, "seed": seed, **rep.row()})
            if progress:
                progress(rows[-1])
    return rows


def write_rows(rows: list[dict], path, columns=SWEEP_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return v


def mean_by_value(rows: list[dict], key: str) -> dict:
    out = {}
    for v in sorted({r["value"] for r in rows}):
        out[v] = float(np.mean([r[key] for r in rows if r["value"] == v]))
    return out


def linear_fit_r2(x, y) -> float:
    """Coefficient of determination of a least-squares line through (x, y)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss = np.sum((y - y.mean()) ** 2)
    return 1.0 - float(np.sum(resid**2) / ss) if ss > 0 else 1.0
