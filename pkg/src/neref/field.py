"""The refractive field network and volume accumulation along rays.

The network maps a 3D point to a non-negative density and an
unnormalised normal.  Position is affinely mapped from the scene box to
[-1, 1]^3, frequency-encoded, pushed through a ReLU trunk (with a NeRF
style skip connection) whose last feature vector feeds both a density
output and a small normal head.

All parameters live in one flat float64 vector; `NetworkSpec.layout`
fixes the slicing.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad


class DegenerateWeights(UserWarning):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSample:
    sigma: np.ndarray
    normal: np.ndarray


@dataclass(frozen=True)
class NetworkSpec:
    depth: int = 8
    width: int = 256
    head_layers: int = 3
    head_width: int = 128
    skip: int = 4                # trunk layer whose input is re-concatenated with the encoding; -1 disables
    frequencies: int = 10
    box_lo: tuple = (-0.5, -0.5, -0.1)
    box_hi: tuple = (0.5, 0.5, 0.3)

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.head_layers < 1 or self.frequencies < 0:
            raise ValueError("network dimensions must be positive")

    @property
    def encoded_dim(self) -> int:
        return 3 + 6 * self.frequencies

    def _has_skip(self, i: int) -> bool:
        return 0 < self.skip == i and self.skip < self.depth

    def layout(self) -> list[tuple[str, tuple]]:
        e, w = self.encoded_dim, self.width
        out = []
        for i in range(self.depth):
            fan_in = e if i == 0 else w + (e if self._has_skip(i) else 0)
            out += [(f"trunk{i}.W", (fan_in, w)), (f"trunk{i}.b", (w,))]
        out += [("sigma.W", (w, 1)), ("sigma.b", (1,))]
        dims = [w] + [self.head_width] * (self.head_layers - 1) + [3]
        for i in range(self.head_layers):
            out += [(f"head{i}.W", (dims[i], dims[i + 1])), (f"head{i}.b", (dims[i + 1],))]
        return out

    @property
    def param_count(self) -> int:
        return sum(math.prod(s) for _, s in self.layout())

    def normalize_points(self, points: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.box_lo), np.asarray(self.box_hi)
        return 2.0 * (points - lo) / (hi - lo) - 1.0


@dataclass
class NeRefNetwork:
    spec: NetworkSpec
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.param_count,):
            raise ValueError(f"expected {self.spec.param_count} parameters, got {self.params.shape}")

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int = 0, sigma_bias: float = 0.0,
                   normal_bias=(0.0, 0.0, 1.0), head_scale: float = 1.0) -> "NeRefNetwork":
        """He-uniform fan-in initialisation with zero biases.

        ``sigma_bias`` and ``normal_bias`` seed the output biases;
        ``head_scale`` multiplies the final normal-layer weights (0 gives a
        constant normal equal to ``normal_bias``).
        """
        rng = np.random.default_rng(seed)
        chunks = []
        last_head = f"head{spec.head_layers - 1}"
        for name, shape in spec.layout():
            if name.endswith(".W"):
                bound = np.sqrt(6.0 / shape[0])
                w = rng.uniform(-bound, bound, size=shape)
                if name.startswith(last_head):
                    w = w * head_scale
                chunks.append(w.ravel())
            elif name == "sigma.b":
                chunks.append(np.full(shape, float(sigma_bias)))
            elif name == f"{last_head}.b":
                chunks.append(np.asarray(normal_bias, dtype=np.float64))
            else:
                chunks.append(np.zeros(shape))
        return cls(spec, np.concatenate(chunks))

    def unflatten(self, flat=None) -> dict[str, np.ndarray]:
        flat = self.params if flat is None else flat
        out, k = {}, 0
        for name, shape in self.spec.layout():
            n = int(np.prod(shape))
            out[name] = flat[k:k + n].reshape(shape)
            k += n
        return out


def positional_encode(points, L: int) -> np.ndarray:
    """``[p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)]``.

    Works on (..., 3) arrays; bands are ordered frequency-major, each band
    holding the three coordinates.
    """
    p = np.asarray(points, dtype=np.float64)
    parts = [p]
    for k in range(L):
        arg = (2.0**k) * np.pi * p
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=-1)


def slice_params(spec: NetworkSpec, params: ad.Var) -> dict[str, ad.Var]:
    """Split the flat parameter leaf into named, shaped tensors on its tape."""
    out, k = {}, 0
    for name, shape in spec.layout():
        n = math.prod(shape)
        out[name] = params[k:k + n].reshape(shape)
        k += n
    return out


def param_leaves(spec: NetworkSpec, tape: ad.Tape, flat: np.ndarray) -> dict[str, ad.Var]:
    """Register each named tensor of ``flat`` as its own parameter leaf.

    Leaves are registered in layout order, so ``ad.backward`` returns the
    gradient in the same flat order as ``flat``.  Cheaper than slicing one
    big leaf, which costs two tape nodes per tensor.
    """
    flat = np.asarray(flat, dtype=np.float64)
    out, k = {}, 0
    for name, shape in spec.layout():
        n = math.prod(shape)
        out[name] = tape.param(flat[k:k + n].reshape(shape))
        k += n
    return out


def forward(spec: NetworkSpec, params: ad.Var | dict[str, ad.Var],
            points: np.ndarray) -> tuple[ad.Var, ad.Var]:
    """Record the network for points (n, 3); returns sigma (n,), normal (n, 3).

    ``params`` is either the flat parameter leaf or the named tensors from
    :func:`param_leaves` / :func:`slice_params`.
    """
    P = params if isinstance(params, dict) else slice_params(spec, params)
    tape = next(iter(P.values())).tape
    enc = tape.const(positional_encode(spec.normalize_points(points), spec.frequencies))
    h = enc
    for i in range(spec.depth):
        if spec._has_skip(i):
            h = ad.concat([h, enc], axis=1)
        h = ad.relu(ad.affine(h, P[f"trunk{i}.W"], P[f"trunk{i}.b"]))
    sigma = ad.softplus(ad.affine(h, P["sigma.W"], P["sigma.b"])).reshape(-1)
    g = h
    for i in range(spec.head_layers):
        g = ad.affine(g, P[f"head{i}.W"], P[f"head{i}.b"])
        if i < spec.head_layers - 1:
            g = ad.relu(g)
    return sigma, g


def query(network: NeRefNetwork, points) -> FieldSample:
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    tape = ad.Tape()
    sigma, normal = forward(network.spec, tape.const(network.params), pts.reshape(-1, 3))
    if single:
        return FieldSample(float(sigma.value[0]), normal.value[0])
    return FieldSample(sigma.value.reshape(pts.shape[:-1]), normal.value.reshape(pts.shape))


# --------------------------------------------------------------------------- #
# volume accumulation                                                          #
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SamplingSchedule:
    coarse_count: int = 96
    fine_count: int = 192
    near: float | np.ndarray = 0.0
    far: float | np.ndarray = 1.0
    stratified: bool = True

    def __post_init__(self):
        if self.coarse_count < 2 or self.fine_count < 0:
            raise ValueError("need at least two coarse samples")
        if np.any(np.asarray(self.near) >= np.asarray(self.far)):
            raise ValueError("near must be smaller than far")

    def with_bounds(self, near, far) -> "SamplingSchedule":
        return SamplingSchedule(self.coarse_count, self.fine_count, near, far, self.stratified)


@dataclass(frozen=True)
class RayIntegral:
    depth: np.ndarray
    normal: np.ndarray
    weights: np.ndarray
    surface_point: np.ndarray
    lambdas: np.ndarray


def accumulate(sigma, normals, lambdas, far):
    """Volume accumulation of depth and normal on the tape.

    ``sigma`` (R, S), ``normals`` (R, S, 3) are tape variables; ``lambdas``
    (R, S) sorted sample parameters and ``far`` (R,) plain arrays.  The
    last interval runs to ``far``.  Returns (depth, normal, weights).
    """
    lam = np.asarray(lambdas, dtype=np.float64)
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), lam.shape[:1])
    delta = np.concatenate([np.diff(lam, axis=1), (far - lam[:, -1])[:, None]], axis=1)
    optical = sigma * delta
    trans = ad.exp(-ad.cumsum_exclusive(optical, axis=1))
    alpha = 1.0 - ad.exp(-optical)
    w = trans * alpha
    depth = (w * lam).sum(axis=1)
    normal = (ad.reshape(w, lam.shape + (1,)) * normals).sum(axis=1)
    return depth, normal, w


def stratified_lambdas(near, far, count: int, n_rays: int, rng: np.random.Generator | None) -> np.ndarray:
    """One sample per equal-width bin of [near, far]; bin midpoints when ``rng`` is None."""
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))
    jitter = 0.5 if rng is None else rng.random((n_rays, count))
    t = (np.arange(count) + jitter) / count
    return near[:, None] + (far - near)[:, None] * t


def integrate_points(network: NeRefNetwork, origins, directions, lambdas, far) -> RayIntegral:
    """Integrate the field along rays at the given sorted sample parameters."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    lam = np.asarray(lambdas, dtype=np.float64).reshape(len(o), -1)
    pts = (o[:, None, :] + lam[..., None] * d[:, None, :]).reshape(-1, 3)
    tape = ad.Tape()
    sigma, nrm = forward(network.spec, tape.const(network.params), pts)
    R, S = lam.shape
    depth, normal, w = accumulate(sigma.reshape(R, S), nrm.reshape(R, S, 3), lam, far)
    return RayIntegral(depth.value, normal.value, w.value, o + depth.value[:, None] * d, lam)


def integrate_ray(network: NeRefNetwork, ray, schedule: SamplingSchedule,
                  rng: np.random.Generator | None = None) -> RayIntegral:
    """Coarse pass, hierarchical resampling, then the fine pass over the union of samples.

    With ``schedule.stratified`` False (or no ``rng``) the coarse samples
    sit at bin midpoints and the fine samples at deterministic quantiles.
    """
    o, d = np.atleast_2d(ray.origin), np.atleast_2d(ray.direction)
    res = integrate_rays(network, o, d, schedule, rng)
    return RayIntegral(res.depth[0], res.normal[0], res.weights[0], res.surface_point[0], res.lambdas[0])


def integrate_rays(network: NeRefNetwork, origins, directions, schedule: SamplingSchedule,
                   rng: np.random.Generator | None = None) -> RayIntegral:
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n = len(o)
    near = np.broadcast_to(np.asarray(schedule.near, dtype=np.float64), (n,))
    far = np.broadcast_to(np.asarray(schedule.far, dtype=np.float64), (n,))
    rng = rng if schedule.stratified else None
    lam_c = stratified_lambdas(near, far, schedule.coarse_count, n, rng)
    coarse = integrate_points(network, o, d, lam_c, far)
    if schedule.fine_count == 0:
        return coarse
    lam_f = hierarchical_resample(coarse.weights, schedule, rng)
    lam = np.sort(np.concatenate([lam_c, lam_f], axis=1), axis=1)
    return integrate_points(network, o, d, lam, far)


def hierarchical_resample(coarse_weights, schedule: SamplingSchedule,
                          rng: np.random.Generator | None = None, eps: float = 1e-5,
                          uniforms: np.ndarray | None = None) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant density over the coarse bins.

    Bin ``i`` covers the i-th of ``coarse_count`` equal slices of
    [near, far] and carries mass proportional to ``w_i + eps``.  Rays whose
    weights are all below ``eps`` get uniform samples.  Output is sorted
    per ray, shape (R, fine_count).  ``uniforms`` (R, fine_count) overrides
    the random draws.
    """
    w = np.atleast_2d(np.asarray(coarse_weights, dtype=np.float64))
    if np.any(w < 0):
        raise ValueError("coarse weights must be non-negative")
    R, S = w.shape
    near = np.broadcast_to(np.asarray(schedule.near, dtype=np.float64), (R,))
    far = np.broadcast_to(np.asarray(schedule.far, dtype=np.float64), (R,))
    mass = w + eps
    degenerate = np.all(w < eps, axis=1)
    mass[degenerate] = 1.0
    cdf = np.cumsum(mass, axis=1)
    cdf = np.concatenate([np.zeros((R, 1)), cdf / cdf[:, -1:]], axis=1)
    F = schedule.fine_count
    if uniforms is not None:
        u = np.sort(np.asarray(uniforms, dtype=np.float64).reshape(R, F), axis=1)
    elif rng is None:
        u = np.broadcast_to((np.arange(F) + 0.5) / F, (R, F))
    else:
        u = np.sort(rng.random((R, F)), axis=1)
    # rows shifted apart by 2 so one flat searchsorted serves every ray
    offset = 2.0 * np.arange(R)[:, None]
    flat = (cdf + offset).ravel()
    k = np.searchsorted(flat, (u + offset).ravel(), side="right").reshape(R, F) - 1
    k = np.clip(k - (S + 1) * np.arange(R)[:, None], 0, S - 1)
    lo = np.take_along_axis(cdf, k, axis=1)
    hi = np.take_along_axis(cdf, k + 1, axis=1)
    frac = np.clip((u - lo) / np.maximum(hi - lo, 1e-300), 0.0, 1.0)
    out = (k + frac) / S
    return near[:, None] + (far - near)[:, None] * out


# --------------------------------------------------------------------------- #
# checkpoint file                                                              #
# --------------------------------------------------------------------------- #

MAGIC = b"NREF"
VERSION = 1
_HEADER = struct.Struct("<4sI6i6dQ")


def save_checkpoint(network: NeRefNetwork, path) -> None:
    """Header + little-endian float32 parameter block."""
    s = network.spec
    header = _HEADER.pack(MAGIC, VERSION, s.depth, s.width, s.head_layers, s.head_width, s.skip,
                          s.frequencies, *s.box_lo, *s.box_hi, s.param_count)
    Path(path).write_bytes(header + network.params.astype("<f4").tobytes())


def load_checkpoint(path) -> NeRefNetwork:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, *rest = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a field checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    dims, lo, hi, count = rest[:6], rest[6:9], rest[9:12], rest[12]
    spec = NetworkSpec(*dims, box_lo=tuple(lo), box_hi=tuple(hi))
    if spec.param_count != count or len(raw) != _HEADER.size + 4 * count:
        raise CheckpointError(f"{path}: parameter block does not match the architecture")
    params = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    return NeRefNetwork(spec, params)
