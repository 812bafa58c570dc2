"""File formats: PFM/PNG images, YAML configs, run manifests."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .geometry import PinholeCamera, ReferencePlane, RefractionConstants
from .simulator import Pattern, Scene, SceneError, WaveComponent, WaveSurface, checkerboard, grid_rig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted key path, ``line`` 1-based when known."""

    def __init__(self, message, field: str | None = None, line: int | None = None, path=None):
        self.field, self.line, self.path = field, line, path
        where = ""
        if path is not None:
            where += f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        if field:
            where += f"{field}: "
        super().__init__(where + message)


# --------------------------------------------------------------------------- #
# images                                                                       #
# --------------------------------------------------------------------------- #


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM; (H, W) -> 'Pf', (H, W, 3) -> 'PF'.  Row 0 is the image top."""
    a = np.asarray(data, dtype="<f4")
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM needs H x W or H x W x 3 data, got {a.shape}")
    H, W = a.shape[:2]
    header = tag + b"\n" + f"{W} {H}\n".encode() + b"-1.0\n"
    Path(path).write_bytes(header + np.ascontiguousarray(np.flipud(a)).tobytes())


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"PF", b"Pf"):
        raise ValueError(f"{path}: not a PFM file")
    channels = 3 if parts[0] == b"PF" else 1
    W, H = (int(x) for x in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(parts[3], dtype=dtype, count=W * H * channels)
    a = a.reshape((H, W, 3) if channels == 3 else (H, W))
    return np.flipud(a).astype(np.float32)


def write_png(path, image: np.ndarray) -> None:
    a = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(a * 255).astype(np.uint8)).save(path)


def read_png(path) -> np.ndarray:
    a = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return a


def write_warp_pfm(path, displacement: np.ndarray, mask: np.ndarray) -> None:
    """Warp field as 3-channel PFM: (dx, dy, validity)."""
    write_pfm(path, np.concatenate([displacement, mask[..., None].astype(np.float64)], axis=-1))


def read_warp_pfm(path) -> tuple[np.ndarray, np.ndarray]:
    a = read_pfm(path).astype(np.float64)
    return a[..., :2], a[..., 2] > 0.5


# --------------------------------------------------------------------------- #
# YAML with line numbers                                                       #
# --------------------------------------------------------------------------- #


def _line_map(node, prefix="", out=None) -> dict[str, int]:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[key] = k.start_mark.line + 1
            _line_map(v, key, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            key = f"{prefix}[{i}]"
            out[key] = v.start_mark.line + 1
            _line_map(v, key, out)
    return out


@dataclass
class ConfigDoc:
    data: dict
    lines: dict
    path: object = None

    def error(self, message, field=None) -> ConfigError:
        line = None
        if field is not None:
            probe = field
            while probe and probe not in self.lines:
                probe = probe.rpartition(".")[0]
            line = self.lines.get(probe)
        return ConfigError(message, field, line, self.path)


def load_yaml(path) -> ConfigDoc:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text) or {}
        lines = _line_map(yaml.compose(text))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(str(exc).splitlines()[0], line=mark.line + 1 if mark else None, path=path) from exc
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", path=path)
    return ConfigDoc(data, lines, path)


def dump_yaml(data: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


def _check_keys(doc: ConfigDoc, mapping, allowed, prefix):
    if not isinstance(mapping, dict):
        raise doc.error("expected a mapping", prefix)
    for k in mapping:
        if k not in allowed:
            raise doc.error(f"unknown key (allowed: {', '.join(sorted(allowed))})", f"{prefix}.{k}" if prefix else k)


def _check_version(doc: ConfigDoc):
    v = doc.data.get("version")
    if v is None:
        raise doc.error("missing config version", "version")
    if v != CONFIG_VERSION:
        raise doc.error(f"unsupported version {v} (expected {CONFIG_VERSION})", "version")


# --------------------------------------------------------------------------- #
# scene config                                                                 #
# --------------------------------------------------------------------------- #

SCENE_KEYS = {"version", "seed", "indices", "surface", "pattern", "rig", "cameras"}
WAVE_KEYS = {"kind", "amplitude", "scale", "center", "direction", "phase", "steepness"}
RIG_KEYS = {"grid", "spacing", "height", "fov", "width", "height_px", "target", "heldout"}
CAMERA_KEYS = {"name", "eye", "target", "up", "fov", "width", "height", "train"}
PATTERN_KEYS = {"kind", "cells", "resolution", "jitter", "blur", "extent", "image", "seed"}


def default_scene_config() -> dict:
    return {
        "version": CONFIG_VERSION,
        "seed": 0,
        "indices": {"n1": 1.0, "n2": 1.33},
        "surface": {"base_height": 0.2, "time": 0.0, "components": []},
        "pattern": {"kind": "checker", "cells": 16, "resolution": 256, "jitter": 0.25, "blur": 0.0,
                    "extent": [-0.5, 0.5, -0.5, 0.5]},
        "rig": {"grid": 3, "spacing": 0.15, "height": 0.6, "fov": 40.0, "width": 64, "height_px": 64,
                "target": [0.0, 0.0, 0.0], "heldout": [0.075, 0.075]},
    }


def _num(doc, value, field, positive=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise doc.error(f"expected a number, got {value!r}", field)
    if positive and not value > 0:
        raise doc.error("must be positive", field)
    return float(value)


def _vec(doc, value, n, field):
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise doc.error(f"expected a list of {n} numbers", field)
    return tuple(_num(doc, v, f"{field}[{i}]") for i, v in enumerate(value))


def scene_from_config(doc: ConfigDoc, base_dir=None) -> Scene:
    """Validate a scene config document and build the scene."""
    d = doc.data
    _check_keys(doc, d, SCENE_KEYS, "")
    _check_version(doc)
    seed = int(d.get("seed", 0))

    ind = d.get("indices", {})
    _check_keys(doc, ind, {"n1", "n2"}, "indices")
    constants = RefractionConstants(_num(doc, ind.get("n1", 1.0), "indices.n1", True),
                                    _num(doc, ind.get("n2", 1.33), "indices.n2", True))

    s = d.get("surface", {})
    _check_keys(doc, s, {"base_height", "time", "components"}, "surface")
    comps = []
    for i, c in enumerate(s.get("components", []) or []):
        f = f"surface.components[{i}]"
        _check_keys(doc, c, WAVE_KEYS, f)
        for req in ("kind", "amplitude", "scale"):
            if req not in c:
                raise doc.error(f"missing '{req}'", f)
        kw = {"kind": c["kind"], "amplitude": _num(doc, c["amplitude"], f + ".amplitude"),
              "scale": _num(doc, c["scale"], f + ".scale", True)}
        if "center" in c:
            kw["center"] = _vec(doc, c["center"], 2, f + ".center")
        if "direction" in c:
            kw["direction"] = _vec(doc, c["direction"], 2, f + ".direction")
        for k in ("phase", "steepness"):
            if k in c:
                kw[k] = _num(doc, c[k], f"{f}.{k}")
        try:
            comps.append(WaveComponent(**kw))
        except SceneError as exc:
            raise doc.error(str(exc), f) from exc
    try:
        surface = WaveSurface(_num(doc, s.get("base_height", 0.2), "surface.base_height", True), comps,
                              _num(doc, s.get("time", 0.0), "surface.time"))
    except SceneError as exc:
        raise doc.error(str(exc), "surface") from exc

    p = d.get("pattern", {})
    _check_keys(doc, p, PATTERN_KEYS, "pattern")
    extent = _vec(doc, p.get("extent", [-0.5, 0.5, -0.5, 0.5]), 4, "pattern.extent")
    kind = p.get("kind", "checker")
    if kind == "checker":
        img = checkerboard(int(p.get("cells", 16)), int(p.get("resolution", 256)),
                           _num(doc, p.get("jitter", 0.25), "pattern.jitter"),
                           _num(doc, p.get("blur", 0.0), "pattern.blur"), int(p.get("seed", seed)))
    elif kind == "image":
        if "image" not in p:
            raise doc.error("image patterns need an 'image' path", "pattern")
        ip = Path(p["image"])
        if not ip.is_absolute() and base_dir is not None:
            ip = Path(base_dir) / ip
        if not ip.exists():
            raise doc.error(f"pattern image {ip} not found", "pattern.image")
        img = read_png(ip)
    else:
        raise doc.error(f"unknown pattern kind {kind!r}", "pattern.kind")
    try:
        pattern = Pattern(img, extent)
    except SceneError as exc:
        raise doc.error(str(exc), "pattern") from exc

    cams, train = [], []
    if "cameras" in d:
        for i, c in enumerate(d["cameras"]):
            f = f"cameras[{i}]"
            _check_keys(doc, c, CAMERA_KEYS, f)
            for req in ("eye", "target"):
                if req not in c:
                    raise doc.error(f"missing '{req}'", f)
            try:
                cams.append(PinholeCamera.look_at(
                    _vec(doc, c["eye"], 3, f + ".eye"), _vec(doc, c["target"], 3, f + ".target"),
                    _vec(doc, c.get("up", [0, 1, 0]), 3, f + ".up"), _num(doc, c.get("fov", 40.0), f + ".fov", True),
                    int(c.get("width", 64)), int(c.get("height", 64)), name=str(c.get("name", f"cam{i:02d}"))))
            except ValueError as exc:
                raise doc.error(str(exc), f) from exc
            train.append(bool(c.get("train", True)))
    else:
        r = d.get("rig", {})
        _check_keys(doc, r, RIG_KEYS, "rig")
        held = r.get("heldout", [0.075, 0.075])
        cams, train = grid_rig(
            int(r.get("grid", 3)), _num(doc, r.get("spacing", 0.15), "rig.spacing", True),
            _num(doc, r.get("height", 0.6), "rig.height"), _num(doc, r.get("fov", 40.0), "rig.fov", True),
            int(r.get("width", 64)), int(r.get("height_px", 64)),
            _vec(doc, r.get("target", [0, 0, 0]), 3, "rig.target"),
            None if held is None else _vec(doc, held, 2, "rig.heldout"))
    top = surface.z_range[1]
    for i, cam in enumerate(cams):
        if cam.center[2] <= top:
            field = f"cameras[{i}]" if "cameras" in d else "rig.height"
            raise doc.error(f"camera '{cam.name}' at z={cam.center[2]:g} is not above the water "
                            f"(max surface z={top:g})", field)
    return Scene(cams, surface, pattern, ReferencePlane(), constants, train)


# --------------------------------------------------------------------------- #
# training config                                                              #
# --------------------------------------------------------------------------- #


def train_config_from_doc(doc: ConfigDoc, overrides: dict | None = None):
    from .training import TrainConfig

    d = dict(doc.data)
    _check_version(doc)
    d.pop("version")
    allowed = {f for f in TrainConfig.__dataclass_fields__}
    _check_keys(doc, d, allowed | {"version"}, "")
    d.update(overrides or {})
    typed = {}
    for k, v in d.items():
        ftype = type(getattr(TrainConfig(), k))
        if ftype is bool:
            if not isinstance(v, bool):
                raise doc.error("expected true/false", k)
            typed[k] = v
        elif ftype is int:
            if isinstance(v, bool) or not isinstance(v, int):
                raise doc.error(f"expected an integer, got {v!r}", k)
            typed[k] = v
        else:
            typed[k] = _num(doc, v, k)
    try:
        return TrainConfig(**typed)
    except ValueError as exc:
        raise doc.error(str(exc)) from exc


def train_config_to_yaml(cfg, path) -> None:
    dump_yaml({"version": CONFIG_VERSION, **cfg.to_dict()}, path)


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))
