"""Fitting the refractive field to pattern correspondences.

Each training ray is cast through the field, its accumulated depth and
normal give a surface point and a refracted direction, and the refracted
ray's hit on the pattern plane is pulled towards the ground-truth hit
recovered from the warp field.  A smoothness term on image-space depth
derivatives is evaluated on 2x2 pixel patches.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .field import (
    NeRefNetwork,
    NetworkSpec,
    SamplingSchedule,
    accumulate,
    forward,
    hierarchical_resample,
    param_leaves,
    save_checkpoint,
    stratified_lambdas,
)
from .geometry import PinholeCamera, ReferencePlane, intersect_plane_batch, pixels_to_rays
from .optim import AdamState, adam_step
from .simulator import Scene, WarpField, slab_bounds

log = logging.getLogger(__name__)


class DivergedLoss(RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    batch_rays: int = 2048
    coarse_samples: int = 96
    fine_samples: int = 192
    lambda_ds: float = 0.15
    epochs: int = 10
    lr: float = 4e-4
    lr_decay: float = 5e-5
    decay_every: int = 1000
    lr_floor: float = 1e-5
    huber_delta: float = 0.01
    pixel_pitch: float = 1.0
    bounds_margin: float = 0.2
    supervise_coarse: bool = True
    seed: int = 0
    workers: int = 1
    flow_noise: float = 0.0
    cameras: int = 0              # 0 = every training camera, else the first n (centre-first order)
    depth: int = 8
    width: int = 256
    head_layers: int = 3
    head_width: int = 128
    skip: int = 4
    frequencies: int = 10
    sigma_bias: float = 0.0
    head_scale: float = 1.0

    def __post_init__(self):
        for f in ("batch_rays", "coarse_samples", "lr", "huber_delta", "pixel_pitch", "workers"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        if self.batch_rays % 4:
            raise ValueError("batch_rays must be a multiple of 4 (2x2 patches)")
        if self.lambda_ds < 0 or self.epochs < 0 or self.fine_samples < 0 or self.flow_noise < 0:
            raise ValueError("lambda_ds, epochs, fine_samples and flow_noise must be non-negative")

    def network_spec(self, scene: Scene) -> NetworkSpec:
        x0, x1, y0, y1 = scene.pattern.extent
        z0, z1 = scene.slab(self.bounds_margin)
        return NetworkSpec(self.depth, self.width, self.head_layers, self.head_width, self.skip,
                           self.frequencies, (x0, y0, z0), (x1, y1, z1))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**data)


# --------------------------------------------------------------------------- #
# targets and batches                                                          #
# --------------------------------------------------------------------------- #


def build_targets(camera: PinholeCamera, warp: WarpField, plane: ReferencePlane | None = None):
    """Ground-truth pattern hits for every pixel of ``camera``.

    The reference-frame pixel ``p + d_q`` is back-projected through the dry
    camera and intersected with the plane.  Returns (H, W, 3) points and
    the (H, W) validity mask.
    """
    plane = plane or ReferencePlane()
    pix = camera.pixel_grid()
    ref = pix + warp.displacement
    o, d = pixels_to_rays(camera, ref.reshape(-1, 2))
    lam, q, ok = intersect_plane_batch(o, d, plane)
    ok = ok & (lam > 0) & warp.mask.reshape(-1)
    H, W = camera.height, camera.width
    return np.where(ok[:, None], q, 0.0).reshape(H, W, 3), ok.reshape(H, W)


@dataclass
class CameraData:
    camera: PinholeCamera
    targets: np.ndarray      # H x W x 3
    mask: np.ndarray         # H x W


@dataclass
class RayBatch:
    """Rays grouped in 2x2 patches: ray 4k + 2r + c is row r, column c of patch k."""

    origins: np.ndarray
    directions: np.ndarray
    targets: np.ndarray
    near: np.ndarray
    far: np.ndarray
    camera: np.ndarray
    pixels: np.ndarray

    def __len__(self):
        return len(self.origins)

    def take_patches(self, idx) -> "RayBatch":
        rows = (4 * np.asarray(idx)[:, None] + np.arange(4)).ravel()
        return RayBatch(*(getattr(self, f.name)[rows] for f in fields(self)))


def patch_anchors(mask: np.ndarray, offset=(0, 0)) -> np.ndarray:
    """Top-left pixels (row, col) of the complete 2x2 tiles starting at ``offset``."""
    H, W = mask.shape
    r = np.arange(offset[0], H - 1, 2)
    c = np.arange(offset[1], W - 1, 2)
    rr, cc = np.meshgrid(r, c, indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    full = mask[rr, cc] & mask[rr, cc + 1] & mask[rr + 1, cc] & mask[rr + 1, cc + 1]
    return np.stack([rr[full], cc[full]], axis=1)


def make_batch(data: list[CameraData], cam_ids, anchors, slab) -> RayBatch:
    """Assemble patches given per-patch camera index and anchor pixel."""
    cam_ids = np.asarray(cam_ids)
    anchors = np.asarray(anchors).reshape(-1, 2)
    dr = np.array([0, 0, 1, 1])
    dc = np.array([0, 1, 0, 1])
    rows = (anchors[:, :1] + dr).ravel()
    cols = (anchors[:, 1:] + dc).ravel()
    cams = np.repeat(cam_ids, 4)
    o = np.empty((len(rows), 3))
    d = np.empty((len(rows), 3))
    q = np.empty((len(rows), 3))
    for k in np.unique(cams):
        sel = cams == k
        cd = data[k]
        pix = np.stack([cols[sel] + 0.5, rows[sel] + 0.5], axis=1)
        o[sel], d[sel] = pixels_to_rays(cd.camera, pix)
        q[sel] = cd.targets[rows[sel], cols[sel]]
    near, far = slab_bounds(o, d, *slab)
    return RayBatch(o, d, q, near, far, cams, np.stack([rows, cols], axis=1))


# --------------------------------------------------------------------------- #
# losses                                                                       #
# --------------------------------------------------------------------------- #


def smooth_l1(x, delta: float):
    """Plain-number version of the Huber-style penalty used by both losses."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    return np.where(ax < delta, 0.5 * ax * ax / delta, ax - 0.5 * delta)


def correspondence_loss(q_f, q_gt, delta: float = 0.01) -> float:
    return float(smooth_l1(np.linalg.norm(np.asarray(q_f) - np.asarray(q_gt), axis=-1), delta))


def depth_smoothness_loss(patch_depths, pixel_pitch: float = 1.0, delta: float = 0.01) -> float:
    """Mean per-ray penalty over (P, 2, 2) patch depths."""
    D = np.asarray(patch_depths, dtype=np.float64)
    dx = (D[:, :, 1] - D[:, :, 0])[:, :, None] / pixel_pitch
    dy = (D[:, 1, :] - D[:, 0, :])[:, None, :] / pixel_pitch
    g = np.abs(np.broadcast_to(dx, D.shape)) + np.abs(np.broadcast_to(dy, D.shape))
    return float(smooth_l1(g, delta).mean())


@dataclass
class PassTerms:
    corr_sum: ad.Var
    ds_sum: ad.Var
    count: int
    weights: np.ndarray
    depth: np.ndarray
    valid: np.ndarray        # indices of rays that reached the pattern plane


def _pass(spec: NetworkSpec, params: dict, batch: RayBatch, lambdas: np.ndarray, s: float,
          plane: ReferencePlane, cfg: TrainConfig) -> PassTerms:
    """One volume pass recorded on the tape; loss sums over valid rays."""
    R, S = lambdas.shape
    pts = (batch.origins[:, None, :] + lambdas[..., None] * batch.directions[:, None, :]).reshape(-1, 3)
    sigma, nrm = forward(spec, params, pts)
    depth, normal, w = accumulate(sigma.reshape(R, S), nrm.reshape(R, S, 3), lambdas, batch.far)

    # depth smoothness, per ray, over 2x2 patches
    Dp = depth.reshape(R // 4, 2, 2)
    dx = (Dp[:, :, 1] - Dp[:, :, 0]) / cfg.pixel_pitch           # (P, row)
    dy = (Dp[:, 1, :] - Dp[:, 0, :]) / cfg.pixel_pitch           # (P, col)
    gx = ad.stack([ad.vabs(dx), ad.vabs(dx)], axis=-1)           # same for both columns of a row
    gy = ad.stack([ad.vabs(dy), ad.vabs(dy)], axis=1)            # same for both rows of a column
    ds_ray = ad.smooth_l1(gx + gy, cfg.huber_delta).reshape(R)

    # refraction through the accumulated normal
    d = batch.directions
    nv = normal.value
    ok = np.linalg.norm(nv, axis=-1) > 1e-12
    cos_v = np.einsum("ij,ij->i", nv / np.where(ok, np.linalg.norm(nv, axis=-1), 1.0)[:, None], d)
    ok &= 1.0 - s * s * (1.0 - cos_v * cos_v) > 0
    idx = np.nonzero(ok)[0]
    n_hat = ad.normalize(normal[idx])
    dv = d[idx]
    cos_i = ad.dot(n_hat, dv)
    b = ad.sqrt(1.0 - s * s * (1.0 - cos_i * cos_i))
    coef = s * (-cos_i) - b
    t = s * dv + ad.reshape(coef, (len(idx), 1)) * n_hat
    d2 = ad.normalize(t)
    denom = ad.dot(d2, plane.normal)
    keep = np.abs(denom.value) > 1e-12
    idx2 = np.nonzero(keep)[0]
    p_s = batch.origins[idx][idx2] + ad.reshape(depth[idx][idx2], (len(idx2), 1)) * dv[idx2]
    d2 = d2[idx2]
    lam_q = (plane.offset - ad.dot(p_s, plane.normal)) / denom[idx2]
    q_f = p_s + ad.reshape(lam_q, (len(idx2), 1)) * d2
    r = q_f - batch.targets[idx][idx2]
    dist = ad.sqrt(ad.dot(r, r))
    corr_sum = ad.smooth_l1(dist, cfg.huber_delta).sum()
    valid = idx[idx2]
    ds_sum = ds_ray[valid].sum()
    return PassTerms(corr_sum, ds_sum, len(valid), w.value, depth.value, valid)


@dataclass
class StepResult:
    objective: float
    l_corr: float
    l_ds: float
    grad: np.ndarray | None
    count: int


def batch_objective(spec: NetworkSpec, params: np.ndarray, batch: RayBatch, lam_coarse: np.ndarray,
                    fine_uniforms: np.ndarray | None, scene: Scene, cfg: TrainConfig,
                    lam_fine: np.ndarray | None = None, with_grad: bool = True) -> StepResult:
    """Loss and gradient for one batch given its random draws.

    Coarse and fine passes share the network; the fine pass uses the union
    of coarse samples and samples resampled from the coarse weights (or
    ``lam_fine`` verbatim when given).  Returns sums normalised by the
    number of surviving rays.  ``with_grad=False`` skips the reverse sweep
    and leaves ``grad`` as None.
    """
    tape = ad.Tape()
    pv = param_leaves(spec, tape, params)
    s = scene.constants.ratio
    coarse = _pass(spec, pv, batch, lam_coarse, s, scene.plane, cfg)
    if lam_fine is None and cfg.fine_samples > 0:
        sched = SamplingSchedule(cfg.coarse_samples, cfg.fine_samples, batch.near, batch.far)
        lam_fine = hierarchical_resample(coarse.weights, sched, uniforms=fine_uniforms)
    terms = []
    if lam_fine is not None:
        fine = _pass(spec, pv, batch, np.sort(np.concatenate([lam_coarse, lam_fine], axis=1), axis=1),
                     s, scene.plane, cfg)
        terms.append(fine)
        if cfg.supervise_coarse:
            terms.append(coarse)
    else:
        terms.append(coarse)
    main = terms[0]
    total = None
    for t in terms:
        part = t.corr_sum / max(t.count, 1) + cfg.lambda_ds * t.ds_sum / max(t.count, 1)
        total = part if total is None else total + part
    grad = ad.backward(tape, total) if with_grad else None
    n = max(main.count, 1)
    return StepResult(float(total.value), float(main.corr_sum.value) / n, float(main.ds_sum.value) / n,
                      grad, main.count)


# --------------------------------------------------------------------------- #
# training loop                                                                #
# --------------------------------------------------------------------------- #


def load_training_data(scene: Scene, views: dict, cfg: TrainConfig, camera_ids=None) -> list[CameraData]:
    """Targets for the training cameras from precomputed views (camera index -> View)."""
    ids = list(camera_ids) if camera_ids is not None else scene.train_indices
    if cfg.cameras:
        ids = ids[:cfg.cameras]
    rng = np.random.default_rng([cfg.seed, 7919])
    data = []
    for k in ids:
        v = views[k]
        warp = WarpField(v.warp, v.mask)
        if cfg.flow_noise > 0:
            from .simulator import inject_flow_noise

            warp = inject_flow_noise(warp, cfg.flow_noise, rng)
        q, ok = build_targets(scene.cameras[k], warp, scene.plane)
        data.append(CameraData(scene.cameras[k], q, ok))
    return data


@dataclass
class TrainState:
    params: np.ndarray
    adam: AdamState
    epoch: int = 0
    history: list = field(default_factory=list)

    def save(self, path):
        a = self.adam
        np.savez(path, params=self.params, m=a.m, v=a.v, step=a.step, epoch=self.epoch,
                 history=np.asarray(self.history, dtype=np.float64).reshape(-1, 6))

    @classmethod
    def load(cls, path, cfg: TrainConfig) -> "TrainState":
        z = np.load(path)
        adam = _adam(cfg, len(z["params"]))
        adam.m, adam.v, adam.step = z["m"], z["v"], int(z["step"])
        return cls(z["params"], adam, int(z["epoch"]), [tuple(r) for r in z["history"]])


def _adam(cfg: TrainConfig, size: int) -> AdamState:
    return AdamState(size, lr=cfg.lr, decay=cfg.lr_decay, decay_every=cfg.decay_every, lr_floor=cfg.lr_floor)


HISTORY_COLUMNS = ("iteration", "l_corr", "l_ds", "l_tol", "objective", "lr")


def epoch_batches(data: list[CameraData], cfg: TrainConfig, epoch: int):
    """Patch schedule of one epoch: non-overlapping 2x2 tiles at an epoch-dependent offset, shuffled."""
    rng = np.random.default_rng([cfg.seed, epoch, 1])
    offset = tuple(rng.integers(0, 2, size=2))
    cams, anchors = [], []
    for k, cd in enumerate(data):
        a = patch_anchors(cd.mask, offset)
        cams.append(np.full(len(a), k))
        anchors.append(a)
    cams = np.concatenate(cams)
    anchors = np.concatenate(anchors)
    order = rng.permutation(len(cams))
    per = cfg.batch_rays // 4
    n_batches = max(len(order) // per, 1)
    for b in range(n_batches):
        sel = order[b * per:(b + 1) * per]
        yield cams[sel], anchors[sel], np.random.default_rng([cfg.seed, epoch, 2, b])


def _chunk_objective(args):
    return batch_objective(*args)


def train_step(spec, params, batch: RayBatch, rng: np.random.Generator, scene: Scene, cfg: TrainConfig,
               pool: ThreadPoolExecutor | None = None) -> StepResult:
    R = len(batch)
    near, far = batch.near, batch.far
    lam_c = stratified_lambdas(near, far, cfg.coarse_samples, R, rng)
    u = rng.random((R, cfg.fine_samples)) if cfg.fine_samples else None
    if pool is None or cfg.workers == 1:
        return batch_objective(spec, params, batch, lam_c, u, scene, cfg)
    # each worker owns a private tape over a contiguous run of patches
    P = R // 4
    bounds = np.linspace(0, P, cfg.workers + 1).astype(int)
    jobs = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b > a:
            rows = slice(4 * a, 4 * b)
            jobs.append((spec, params, batch.take_patches(np.arange(a, b)), lam_c[rows],
                         None if u is None else u[rows], scene, cfg))
    parts = list(pool.map(_chunk_objective, jobs))
    # chunk results are per-chunk means; re-weight to the batch mean
    total = sum(p.count for p in parts) or 1
    grad = sum(p.grad * p.count for p in parts) / total
    return StepResult(sum(p.objective * p.count for p in parts) / total,
                      sum(p.l_corr * p.count for p in parts) / total,
                      sum(p.l_ds * p.count for p in parts) / total, grad, total)


def train(scene: Scene, views: dict, cfg: TrainConfig, out_dir=None, resume: bool = False,
          camera_ids=None, progress=None) -> tuple[NeRefNetwork, list]:
    """Optimise a fresh field on the scene's training cameras.

    Writes ``checkpoints/epoch_NNN.nref``, ``model.nref``, ``state.npz``
    and ``loss.csv`` under ``out_dir`` when given.  Returns the final
    network and the loss history rows.
    """
    spec = cfg.network_spec(scene)
    data = load_training_data(scene, views, cfg, camera_ids)
    if not data:
        raise ValueError("scene has no training cameras")
    slab = scene.slab(cfg.bounds_margin)
    out = Path(out_dir) if out_dir is not None else None
    state_path = out / "state.npz" if out else None
    if resume and state_path is not None and state_path.exists():
        state = TrainState.load(state_path, cfg)
        log.info("resuming from epoch %d", state.epoch)
    else:
        net0 = NeRefNetwork.initialize(spec, cfg.seed, cfg.sigma_bias, head_scale=cfg.head_scale)
        state = TrainState(net0.params, _adam(cfg, spec.param_count))
    if out:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        if state.epoch == 0:
            save_checkpoint(NeRefNetwork(spec, state.params), out / "checkpoints" / "epoch_000.nref")
    last_ckpt = out / "checkpoints" / f"epoch_{state.epoch:03d}.nref" if out else None
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(state.epoch, cfg.epochs):
            for cams, anchors, rng in epoch_batches(data, cfg, epoch):
                batch = make_batch(data, cams, anchors, slab)
                lr = state.adam.effective_lr()
                res = train_step(spec, state.params, batch, rng, scene, cfg, pool)
                if not (math.isfinite(res.objective) and np.all(np.isfinite(res.grad))):
                    raise DivergedLoss(f"non-finite loss at iteration {state.adam.step}", last_ckpt)
                state.params = adam_step(state.adam, state.params, res.grad)
                row = (state.adam.step, res.l_corr, res.l_ds, res.l_corr + cfg.lambda_ds * res.l_ds,
                       res.objective, lr)
                state.history.append(row)
                if progress:
                    progress(row)
            state.epoch = epoch + 1
            if out:
                last_ckpt = out / "checkpoints" / f"epoch_{state.epoch:03d}.nref"
                save_checkpoint(NeRefNetwork(spec, state.params), last_ckpt)
                state.save(state_path)
                write_history(state.history, out / "loss.csv")
            log.info("epoch %d done, objective %.6g", state.epoch,
                     state.history[-1][4] if state.history else float("nan"))
    finally:
        if pool:
            pool.shutdown()
    net = NeRefNetwork(spec, state.params)
    if out:
        save_checkpoint(net, out / "model.nref")
        state.save(state_path)
        write_history(state.history, out / "loss.csv")
    return net, state.history


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])
