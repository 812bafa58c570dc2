"""Command-line interface: ``neref gen-scene | train | eval | render | sweep``.

Each stage reads the previous stage's directory.  Exit status is 0 on
success, 1 for invalid input (bad config, missing or mismatched
artifacts, refusing to overwrite) and 2 for failures while running.
Relative output paths are resolved under ``$NEREF_OUTPUT_ROOT`` when set.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (
    SWEEP_COLUMNS,
    InsufficientCameras,
    depth_normal_errors,
    eval_schedule,
    image_metrics,
    mean_by_value,
    render_from_field,
    write_rows,
)
from .field import CheckpointError, load_checkpoint
from .io import (
    ConfigDoc,
    ConfigError,
    default_scene_config,
    dump_yaml,
    load_yaml,
    read_pfm,
    read_png,
    read_warp_pfm,
    scene_from_config,
    train_config_from_doc,
    train_config_to_yaml,
    write_json,
    write_pfm,
    write_png,
    write_warp_pfm,
)
from .simulator import Pattern, SceneError, View, render_view
from .training import DivergedLoss, TrainConfig, train

log = logging.getLogger("neref")

OUTPUT_ROOT_ENV = "NEREF_OUTPUT_ROOT"
MANIFEST = "manifest.json"
SCENE_FORMAT = 1


class MissingArtifacts(Exception):
    pass


class VersionMismatch(Exception):
    pass


class OutputExists(Exception):
    pass


VALIDATION_ERRORS = (ConfigError, SceneError, MissingArtifacts, VersionMismatch, OutputExists,
                     CheckpointError, InsufficientCameras)


# --------------------------------------------------------------------------- #
# helpers                                                                      #
# --------------------------------------------------------------------------- #


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def output_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def prepare_output(path: Path, overwrite: bool, keep: bool = False) -> Path:
    """Create ``path``; an existing non-empty directory needs ``overwrite`` (or ``keep`` to reuse it)."""
    if path.exists() and not path.is_dir():
        raise OutputExists(f"{path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not keep:
        if not overwrite:
            raise OutputExists(f"{path} is not empty; pass --overwrite to replace it")
        if not (path / MANIFEST).exists():
            raise OutputExists(f"{path} was not written by this tool; refusing to delete it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out: Path, command: str, argv, seed, config: dict, started: str, inputs=None) -> None:
    artifacts = sorted(str(p.relative_to(out)) for p in out.rglob("*")
                       if p.is_file() and p.name != MANIFEST and _owner(p, out) == out)
    write_json(out / MANIFEST, {
        "tool": "neref",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config": config,
        "inputs": inputs or {},
        "started": started,
        "finished": _now(),
        "artifacts": artifacts,
    })


def _owner(path: Path, top: Path) -> Path:
    """Nearest directory at or below ``top`` holding a manifest (other than ``top`` itself) or ``top``."""
    for parent in path.parents:
        if parent == top:
            return top
        if (parent / MANIFEST).exists():
            return parent
    return top


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifacts(f"missing {what}: {path}")
    return path


# --------------------------------------------------------------------------- #
# scene directories                                                            #
# --------------------------------------------------------------------------- #


def _camera_record(cam, train_flag) -> dict:
    return {"name": cam.name, "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "rotation": cam.rotation, "translation": cam.translation, "width": cam.width,
            "height": cam.height, "train": train_flag}


def load_scene_dir(scene_dir) -> tuple:
    """Rebuild the scene from its config copy and read the stored ground truth."""
    d = Path(scene_dir)
    _require(d / MANIFEST, "scene manifest")
    man = json.loads((d / MANIFEST).read_text())
    if man.get("command") != "gen-scene":
        raise MissingArtifacts(f"{d} is not a scene directory")
    if man.get("config", {}).get("format") != SCENE_FORMAT:
        raise VersionMismatch(f"{d}: scene format {man.get('config', {}).get('format')} "
                              f"is not supported (expected {SCENE_FORMAT})")
    scene = scene_from_config(load_yaml(_require(d / "scene.yaml", "scene config")), base_dir=d)
    views = {}
    for k, cam in enumerate(scene.cameras):
        cd = d / cam.name
        disp, mask = read_warp_pfm(_require(cd / "warp.pfm", f"warp field of {cam.name}"))
        views[k] = View(
            read_png(_require(cd / "image.png", f"image of {cam.name}")),
            read_pfm(_require(cd / "depth.pfm", f"depth of {cam.name}")).astype(np.float64),
            read_pfm(_require(cd / "normal.pfm", f"normals of {cam.name}")).astype(np.float64),
            disp, mask, None)
    return scene, views


def _train_config(args, run_dir: Path | None = None) -> TrainConfig:
    overrides = {}
    for key in ("epochs", "workers", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    path = getattr(args, "config", None)
    if path is None and run_dir is not None and (run_dir / "train.yaml").exists():
        path = run_dir / "train.yaml"
    if path is None:
        doc = ConfigDoc({"version": 1}, {})
    else:
        doc = load_yaml(_require(Path(path), "training config"))
    return train_config_from_doc(doc, overrides)


def _checkpoint_config(args, checkpoint: Path) -> TrainConfig:
    if getattr(args, "config", None) is None:
        for cand in (checkpoint.parent / "train.yaml", checkpoint.parent.parent / "train.yaml"):
            if cand.exists():
                return train_config_from_doc(load_yaml(cand))
    return _train_config(args)


def _check_architecture(net, cfg: TrainConfig, scene) -> None:
    want = cfg.network_spec(scene)
    if net.spec != want:
        raise VersionMismatch(f"checkpoint architecture {net.spec} differs from the configured {want}")


# --------------------------------------------------------------------------- #
# commands                                                                     #
# --------------------------------------------------------------------------- #


def cmd_gen_scene(args) -> int:
    started = _now()
    if args.config is None:
        doc = ConfigDoc(default_scene_config(), {})
        base = None
    else:
        doc = load_yaml(_require(Path(args.config), "scene config"))
        base = Path(args.config).parent
    scene = scene_from_config(doc, base_dir=base)
    out = prepare_output(output_dir(args.out), args.overwrite)

    data = dict(doc.data)
    pat = dict(data.get("pattern", {}) or {})
    if pat.get("kind") == "image":
        src = Path(pat["image"])
        if not src.is_absolute() and base is not None:
            src = base / src
        shutil.copyfile(src, out / src.name)
        pat["image"] = src.name
        data["pattern"] = pat
    dump_yaml(data, out / "scene.yaml")
    write_png(out / "pattern.png", scene.pattern.image)
    write_json(out / "cameras.json", [_camera_record(c, t) for c, t in zip(scene.cameras, scene.train)])
    for k, cam in enumerate(scene.cameras):
        cd = out / cam.name
        cd.mkdir()
        wet = render_view(scene, k)
        dry = render_view(scene, k, with_water=False)
        write_png(cd / "image.png", wet.image)
        write_png(cd / "dry.png", dry.image)
        write_pfm(cd / "depth.pfm", wet.depth)
        write_pfm(cd / "normal.pfm", wet.normal)
        write_warp_pfm(cd / "warp.pfm", wet.warp, wet.mask)
        log.info("rendered %s (%d valid pixels)", cam.name, int(wet.mask.sum()))
    write_manifest(out, "gen-scene", args.argv, data.get("seed", 0), {"format": SCENE_FORMAT, "scene": data}, started)
    print(out)
    return 0


def cmd_train(args) -> int:
    started = _now()
    scene, views = load_scene_dir(args.scene)
    out = output_dir(args.out)
    resuming = args.resume and (out / "state.npz").exists()
    cfg = _train_config(args, out if args.resume else None)
    out = prepare_output(out, args.overwrite, keep=resuming)
    train_config_to_yaml(cfg, out / "train.yaml")

    def progress(row):
        if row[0] % 50 == 0:
            log.info("iter %d  L_corr %.4g  L_ds %.4g  lr %.3g", row[0], row[1], row[2], row[5])

    from .plotting import plot_loss

    try:
        _, history = train(scene, views, cfg, out, resume=resuming, progress=progress)
        plot_loss(history, out / "loss.png")
    finally:
        write_manifest(out, "train", args.argv, cfg.seed, cfg.to_dict(), started,
                       {"scene": str(Path(args.scene).resolve())})
    print(out)
    return 0


def _select_cameras(spec: str, scene) -> list[int]:
    if spec == "heldout":
        ids = scene.heldout_indices
    elif spec == "all":
        ids = list(range(len(scene.cameras)))
    else:
        names = {c.name: k for k, c in enumerate(scene.cameras)}
        ids = []
        for tok in spec.split(","):
            tok = tok.strip()
            if tok in names:
                ids.append(names[tok])
            elif tok.isdigit() and int(tok) < len(scene.cameras):
                ids.append(int(tok))
            else:
                raise ConfigError(f"unknown camera {tok!r}", "--cameras")
    if not ids:
        raise InsufficientCameras("no cameras selected for evaluation")
    return ids


EVAL_COLUMNS = ("camera", "name", "depth_rmse", "depth_relative_error", "normal_angle_mean",
                "normal_l2_mean", "psnr", "ssim")


def cmd_eval(args) -> int:
    from .plotting import plot_error_maps, plot_render_comparison

    started = _now()
    ckpt = _require(Path(args.checkpoint), "checkpoint")
    net = load_checkpoint(ckpt)
    scene, views = load_scene_dir(args.scene)
    cfg = _checkpoint_config(args, ckpt)
    _check_architecture(net, cfg, scene)
    ids = _select_cameras(args.cameras, scene)
    out = prepare_output(output_dir(args.out), args.overwrite)
    rows = []
    for k in ids:
        cam, view = scene.cameras[k], views[k]
        fr = render_from_field(net, cam, scene.pattern, scene.plane, scene.constants, eval_schedule(cfg),
                               scene.slab(cfg.bounds_margin))
        rep = depth_normal_errors(fr.depth, fr.normal, view.depth, view.normal, view.mask)
        rep.psnr, rep.ssim = image_metrics(fr.image, view.image)
        cd = out / cam.name
        cd.mkdir()
        write_png(cd / "render.png", fr.image)
        write_pfm(cd / "depth.pfm", fr.depth)
        write_pfm(cd / "normal.pfm", fr.normal)
        write_pfm(cd / "depth_error.pfm", rep.depth_error_map)
        write_pfm(cd / "normal_error.pfm", rep.normal_error_map)
        plot_error_maps(rep.depth_error_map, rep.normal_error_map, view.mask, cd / "error_maps.png")
        plot_render_comparison(fr.image, view.image, cd / "comparison.png")
        rows.append({"camera": k, "name": cam.name, **rep.row()})
        log.info("%s: depth %.4g, angle %.3g deg, PSNR %.2f, SSIM %.4f", cam.name,
                 rep.depth_relative_error, rep.normal_angle_mean, rep.psnr, rep.ssim)
    write_rows(rows, out / "metrics.csv", EVAL_COLUMNS)
    write_manifest(out, "eval", args.argv, cfg.seed, cfg.to_dict(), started,
                   {"checkpoint": str(ckpt.resolve()), "scene": str(Path(args.scene).resolve())})
    print(out)
    return 0


def cmd_render(args) -> int:
    started = _now()
    ckpt = _require(Path(args.checkpoint), "checkpoint")
    net = load_checkpoint(ckpt)
    scene, _ = load_scene_dir(args.scene)
    cfg = _checkpoint_config(args, ckpt)
    _check_architecture(net, cfg, scene)
    ids = _select_cameras(args.camera, scene)
    if len(ids) != 1:
        raise ConfigError("render takes exactly one camera", "--camera")
    pattern = scene.pattern
    if args.pattern is not None:
        extent = tuple(args.extent) if args.extent else pattern.extent
        pattern = Pattern(read_png(_require(Path(args.pattern), "pattern image")), extent)
    out = prepare_output(output_dir(args.out), args.overwrite)
    cam = scene.cameras[ids[0]]
    fr = render_from_field(net, cam, pattern, scene.plane, scene.constants, eval_schedule(cfg),
                           scene.slab(cfg.bounds_margin))
    write_png(out / "render.png", fr.image)
    write_pfm(out / "depth.pfm", fr.depth)
    write_pfm(out / "normal.pfm", fr.normal)
    write_manifest(out, "render", args.argv, cfg.seed, cfg.to_dict(), started,
                   {"checkpoint": str(ckpt.resolve()), "scene": str(Path(args.scene).resolve()),
                    "camera": cam.name, "pattern": None if args.pattern is None else str(Path(args.pattern).resolve())})
    print(out / "render.png")
    return 0


SWEEP_DEFAULTS = {"cameras": [9, 7, 5, 3], "noise": [0.0, 0.5, 1.0, 1.5, 2.0]}


def cmd_sweep(args) -> int:
    from .evaluation import camera_count_sweep, flow_noise_sweep
    from .plotting import plot_sweep

    started = _now()
    scene, views = load_scene_dir(args.scene)
    cfg = _train_config(args)
    values = args.values or SWEEP_DEFAULTS[args.kind]
    seeds = args.seeds or [cfg.seed]
    out = prepare_output(output_dir(args.out) / args.kind, args.overwrite)

    def progress(row):
        log.info("%s=%s seed=%s: depth %.4g, angle %.3g deg", row["param"], row["value"], row["seed"],
                 row["depth_relative_error"], row["normal_angle_mean"])
        sub = out / f"{row['param']}={row['value']:g}" / f"seed={row['seed']}"
        c = replace(cfg, seed=int(row["seed"]),
                    **({"cameras": int(row["value"])} if args.kind == "cameras" else {"flow_noise": row["value"]}))
        train_config_to_yaml(c, sub / "train.yaml")
        write_manifest(sub, "train", args.argv, c.seed, c.to_dict(), started,
                       {"scene": str(Path(args.scene).resolve()), "sweep": args.kind})

    if args.kind == "cameras":
        rows = camera_count_sweep(scene, views, cfg, [int(v) for v in values], seeds, out, progress)
    else:
        rows = flow_noise_sweep(scene, views, cfg, values, seeds, out, progress)
    write_rows(rows, out / "sweep.csv", SWEEP_COLUMNS)
    summary = [{"param": rows[0]["param"], "value": v, "seed": "mean", **{
        k: mean_by_value(rows, k)[v] for k in SWEEP_COLUMNS[3:]}} for v in sorted({r["value"] for r in rows})]
    write_rows(summary, out / "summary.csv", SWEEP_COLUMNS)
    plot_sweep(rows, out / "sweep.png", "training cameras" if args.kind == "cameras" else "flow noise (px)")
    write_manifest(out, "sweep", args.argv, cfg.seed, cfg.to_dict(), started,
                   {"scene": str(Path(args.scene).resolve()), "values": list(values), "seeds": list(seeds)})
    print(out)
    return 0


# --------------------------------------------------------------------------- #
# argument parsing                                                             #
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neref", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"neref {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_help="training config (YAML)"):
        sp.add_argument("--overwrite", action="store_true", help="replace an existing output directory")
        sp.add_argument("--config", type=Path, help=config_help)

    g = sub.add_parser("gen-scene", help="render synthetic ground truth for a scene config")
    g.add_argument("out", help="output scene directory")
    common(g, "scene config (YAML); built-in flat-water defaults when omitted")
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="fit a field to a scene directory")
    t.add_argument("scene", type=Path)
    t.add_argument("out")
    common(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true", help="continue from the run's last epoch")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics, error maps and renders against ground truth")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("scene", type=Path)
    e.add_argument("out")
    common(e)
    e.add_argument("--cameras", default="heldout", help="'heldout', 'all' or comma-separated names/indices")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="synthesize a view, optionally over a different pattern")
    r.add_argument("checkpoint", type=Path)
    r.add_argument("scene", type=Path)
    r.add_argument("out")
    common(r)
    r.add_argument("--camera", default="heldout", help="camera name or index")
    r.add_argument("--pattern", type=Path, help="PNG to place on the pattern plane")
    r.add_argument("--extent", type=float, nargs=4, metavar=("X0", "X1", "Y0", "Y1"),
                   help="pattern extent in metres (default: the scene pattern's)")
    r.set_defaults(func=cmd_render)

    s = sub.add_parser("sweep", help="camera-count or flow-noise ablation")
    s.add_argument("kind", choices=sorted(SWEEP_DEFAULTS))
    s.add_argument("scene", type=Path)
    s.add_argument("out", help="run directory; results go to <out>/<kind>/")
    common(s)
    s.add_argument("--values", type=float, nargs="+", help="camera counts or noise amplitudes (px)")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--epochs", type=int)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"neref: error: {exc}", file=sys.stderr)
        return 1
    except DivergedLoss as exc:
        print(f"neref: training diverged: {exc} (last good checkpoint: {exc.last_checkpoint})", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the exit code contract needs a catch-all
        log.debug("unhandled error", exc_info=True)
        print(f"neref: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
