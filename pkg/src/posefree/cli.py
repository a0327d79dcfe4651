"""Command line entry point: ``posefree {synth,estimate,render,eval,check}``.

Every command is also importable as a plain function (``cmd_*``) that
returns its results, so tests and notebooks can skip the argument parser.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import multiprocessing
import sys
from pathlib import Path

import numpy as np

from .checks import run_checks
from .config import CONFIG_ENV, Config, load_config
from .errors import PosefreeError
from .evaluation import (OverlapSplit, classify, frame_skip_select, summarize, summary_to_json,
                         write_records_csv, write_report_json, write_summary_csv)
from .geometry import epipolar_line, fundamental_from_pose, relative_pose
from .imaging import mse, psnr, ssim, write_depth_png, write_mask_png, write_png
from .matching import upsample_flow, upsample_mask, write_flo
from .pipeline import PipelineState, pair_losses, render_target
from .scenedir import Frame, SceneDir, read_scene_dir, write_scene_dir
from .synth import make_scene, overlap_oracle, render_gt, v_trajectory

log = logging.getLogger("posefree")

EPIPOLAR_GRID = 4  # points per side drawn in the overlay


def _json_dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _pair(scene: SceneDir, pair=None):
    """Indices ``(i1, it, i2)``: the frame-skip rule unless ``pair`` names the contexts."""
    a, t, b = frame_skip_select(len(scene))
    if pair is not None:
        a, b = pair
        t = (a + b) // 2
    for i in (a, t, b):
        if not 0 <= i < len(scene):
            raise PosefreeError(f"frame index {i} outside 0..{len(scene) - 1}")
    return a, t, b


# -- synth ---------------------------------------------------------------------------------


def cmd_synth(seed: int, out_dir, n_frames: int = 9, size: int = 256, kind: str = "textured_plane",
              texture: str = "smooth", baseline: float = 0.55, pullback: float = 1.2,
              converge: float = 0.0) -> SceneDir:
    """Write a synthetic scene directory.

    Frames follow :func:`~posefree.synth.v_trajectory` with its apex at the
    frame-skip target, so the two context frames sit behind it on either
    side. Besides the images and ``cameras.txt`` this writes the scene
    geometry, ``meta.json`` with depth bounds and ``oracle.json`` with the
    exact overlap of the context pair.
    """
    out = Path(out_dir)
    a, t, b = frame_skip_select(n_frames)
    scene = make_scene(seed, kind, 2000, texture)
    rig = v_trajectory(n_frames, size, size, baseline=baseline, pullback=pullback,
                       converge=converge, center=t)
    images, depths = [], []
    for cam in rig.cameras:
        img, depth = render_gt(scene, cam)
        images.append(img)
        depths.append(depth.depth[depth.valid])
    d = np.concatenate(depths)
    meta = {"near": round(float(0.8 * d.min()), 3), "far": round(float(1.2 * d.max()), 3),
            "seed": int(seed), "kind": kind, "texture": texture, "baseline": baseline,
            "pullback": pullback, "converge": converge}
    frames = [Frame(i, cam.k, cam.pose) for i, cam in enumerate(rig.cameras)]
    sd = write_scene_dir(out, frames, images, meta)
    scene.save(out)
    o12, o21, ov = overlap_oracle(scene, rig[a], rig[b])
    _json_dump(out / "oracle.json", {"i1": a, "i2": b, "o12": o12, "o21": o21, "overlap": ov,
                                     "split": classify(ov).value})
    log.info("wrote %d frames to %s (oracle overlap %.3f)", n_frames, out, ov)
    return sd


# -- estimate ------------------------------------------------------------------------------


def cmd_estimate(scene_dir, out_dir, cfg: Config, pair=None) -> dict:
    """Relative pose, flow, mask and an epipolar overlay for one frame pair.

    With ``cfg.teacher_forcing`` (``--use-gt-pose``) the epipolar lines use
    the ground-truth pose from ``cameras.txt``; otherwise the estimate.
    """
    scene = read_scene_dir(scene_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    a, _, b = _pair(scene, pair)
    size = cfg.image_size
    i1, k1 = scene.load_image(a, size)
    i2, k2 = scene.load_image(b, size)
    state = PipelineState.from_config(cfg)
    est = state.estimate(i1, i2)
    gt = relative_pose(scene.frames[a].pose, scene.frames[b].pose)
    used = gt if cfg.teacher_forcing else est.pose
    source = "gt" if cfg.teacher_forcing else "estimated"

    h, w = i1.shape[:2]
    flow = upsample_flow(est.flow, h, w)
    write_flo(out / "flow.flo", flow)
    write_mask_png(out / "mask.png", upsample_mask(est.mask, h, w).data)

    F = fundamental_from_pose(used, k1, k2)
    g = (np.arange(EPIPOLAR_GRID) + 0.5) / EPIPOLAR_GRID
    pts = np.stack(np.meshgrid(g * (w - 1), g * (h - 1)), axis=-1).reshape(-1, 2)
    lines = epipolar_line(F, pts)
    _json_dump(out / "epipolar.json", {"pose_source": source, "F": F.tolist(),
                                       "points": pts.tolist(), "lines": lines.tolist()})
    from .plotting import epipolar_overlay

    epipolar_overlay(out / "epipolar.png", i1, i2, pts, lines,
                     title=f"frames {scene.frames[a].frame_id} / {scene.frames[b].frame_id}, "
                           f"{source} pose")

    result = {"i1": scene.frames[a].frame_id, "i2": scene.frames[b].frame_id,
              "pose_source": source, "estimated": est.pose.to_json(),
              "ground_truth": gt.to_json(),
              "mask_fraction": est.mask.mean()}
    _json_dump(out / "pose.json", result)
    return result


# -- render --------------------------------------------------------------------------------


def cmd_render(scene_dir, out_dir, cfg: Config, pair=None, target: int | None = None) -> dict:
    """Synthesize the target view from the two context frames.

    Only the target's camera line is used for rendering. Its image, when
    present, is read afterwards to compute metrics and the loss report.
    """
    scene = read_scene_dir(scene_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    a, t, b = _pair(scene, pair)
    if target is not None:
        t = target
    size = cfg.image_size
    i1, k1 = scene.load_image(a, size)
    i2, k2 = scene.load_image(b, size)
    k_t = scene.intrinsics(t, size, reference=a)
    f1, ft, f2 = scene.frames[a], scene.frames[t], scene.frames[b]
    p_21_gt = relative_pose(f1.pose, f2.pose)
    p_1t = relative_pose(ft.pose, f1.pose)
    state = PipelineState.from_config(cfg)
    est = state.estimate(i1, i2)
    near = scene.meta.get("near", cfg.near)
    far = scene.meta.get("far", cfg.far)
    img, depth = render_target(state, i1, i2, k1, k2, k_t, (size, size), p_1t, est, p_21_gt,
                               near=near, far=far)
    write_png(out / "render.png", img)
    write_depth_png(out / "depth.png", depth)
    result = {"i1": f1.frame_id, "it": ft.frame_id, "i2": f2.frame_id,
              "pose_source": "gt" if cfg.teacher_forcing else "estimated",
              "scoring": state.renderer.mode, "valid_fraction": float(depth.valid.mean())}
    if scene.has_image(t):
        it, _ = scene.load_image(t, size)
        result.update(psnr=psnr(img, it), ssim=ssim(img, it), mse=mse(img, it))
        report = pair_losses(state, i1, i2, it, k1, k2, k_t, p_1t, p_21_gt, est, img, depth,
                             cfg.teacher_forcing)
        (out / "losses.json").write_text(report.to_json() + "\n")
    else:
        log.info("target frame %d has no image; skipping metrics and losses", ft.frame_id)
    _json_dump(out / "render.json", result)
    return result


# -- eval ----------------------------------------------------------------------------------

_WORKER_STATE = None


def _init_worker(cfg: Config):
    global _WORKER_STATE
    _WORKER_STATE = PipelineState.from_config(cfg)


def _eval_one(path: str):
    """``(name, record or None, error message or None)`` for one scene directory."""
    from .pipeline import evaluate_scene

    name = Path(path).name
    try:
        scene = read_scene_dir(path)
        oracle = None
        oracle_file = Path(path) / "oracle.json"
        if oracle_file.exists():
            oracle = json.loads(oracle_file.read_text()).get("overlap")
        return name, evaluate_scene(_WORKER_STATE, scene, name, oracle), None
    except (PosefreeError, OSError, ValueError, KeyError) as exc:
        return name, None, f"{type(exc).__name__}: {exc}"


def cmd_eval(root, out_dir, cfg: Config) -> dict:
    """Frame-skip evaluation over every scene directory below ``root``.

    Malformed scenes are logged and skipped. Raises :class:`PosefreeError`
    when no scene could be evaluated.
    """
    root, out = Path(root), Path(out_dir)
    scenes = sorted(p for p in root.iterdir() if p.is_dir())
    if not scenes:
        raise PosefreeError(f"no scene directories under {root}")
    out.mkdir(parents=True, exist_ok=True)
    paths = [str(p) for p in scenes]
    if cfg.jobs > 1:
        with multiprocessing.get_context("spawn").Pool(cfg.jobs, _init_worker, (cfg,)) as pool:
            results = pool.map(_eval_one, paths)
    else:
        _init_worker(cfg)
        results = [_eval_one(p) for p in paths]
    records, skipped = [], []
    for name, rec, err in results:
        if rec is None:
            log.warning("skipping %s: %s", name, err)
            skipped.append({"scene": name, "error": err})
        else:
            records.append(rec)
    if not records:
        raise PosefreeError("every scene failed; see the log for reasons")
    summary = summarize(records)
    for split in OverlapSplit:
        if split.value not in summary:
            log.info("split %s is empty and omitted from the summary", split.value)
    write_records_csv(out / "records.csv", records)
    write_summary_csv(out / "summary.csv", summary)
    write_report_json(out / "report.json", records, summary,
                      {"skipped": skipped, "config": json.loads(cfg.to_json())})
    from .plotting import metric_panels, split_histogram

    split_histogram(out / "overlap_splits.png", records)
    metric_panels(out / "metrics.png", summary)
    return {"records": records, "summary": summary_to_json(summary), "skipped": skipped}


# -- check ---------------------------------------------------------------------------------


def cmd_check(cfg: Config, out_dir=None) -> dict:
    results = run_checks(cfg)
    doc = {"passed": all(r.ok for r in results), "checks": [r.to_json() for r in results],
           "failed": [r.name for r in results if not r.ok]}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _json_dump(Path(out_dir) / "check.json", doc)
    return doc


# -- argument parsing ----------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH",
                   help=f"JSON config file (default: ${CONFIG_ENV}, else built-in defaults)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--use-gt-pose", action="store_true",
                   help="teacher forcing: use the ground-truth relative pose downstream")
    p.add_argument("--oracle-scoring", action="store_true",
                   help="score epipolar candidates by color agreement instead of learned weights")
    p.add_argument("--out", metavar="DIR", default="out", help="output directory")
    p.add_argument("--jobs", type=int, help="worker processes for eval")
    p.add_argument("--image-size", type=int, help="override the working image size")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="posefree", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic scene directory")
    p.add_argument("--frames", type=int, default=9)
    p.add_argument("--kind", choices=("textured_plane", "layered"), default="textured_plane")
    p.add_argument("--texture", choices=("smooth", "rich"), default="smooth")
    p.add_argument("--baseline", type=float, default=0.55)
    p.add_argument("--pullback", type=float, default=1.2)
    p.add_argument("--converge", type=float, default=0.0)

    for name, helptext in (("estimate", "relative pose, flow and epipolar overlay for a pair"),
                           ("render", "synthesize the target view from two contexts")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("scene_dir")
        p.add_argument("--pair", type=int, nargs=2, metavar=("I1", "I2"),
                       help="context frame indices (default: frame-skip rule)")
        if name == "render":
            p.add_argument("--target", type=int, help="target frame index")

    p = sub.add_parser("eval", parents=[common], help="evaluate every scene under a root")
    p.add_argument("root")

    p = sub.add_parser("check", parents=[common], help="run the invariant checks")
    p.add_argument("--tau", type=float, help="override the cycle threshold")
    p.add_argument("--weights-dir", help="weight blobs to validate")
    return parser


def config_from_args(args) -> Config:
    cfg = load_config(args.config)
    over = {"seed": args.seed, "jobs": args.jobs, "image_size": args.image_size}
    if args.use_gt_pose:
        over["teacher_forcing"] = True
    if args.oracle_scoring:
        over["oracle_scoring"] = True
    for key in ("tau", "weights_dir"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    return cfg.with_overrides(**over)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "synth":
            cmd_synth(cfg.seed, args.out, args.frames, cfg.image_size, args.kind, args.texture,
                      args.baseline, args.pullback, args.converge)
        elif args.command == "estimate":
            res = cmd_estimate(args.scene_dir, args.out, cfg, args.pair)
            print(json.dumps(res, sort_keys=True))
        elif args.command == "render":
            res = cmd_render(args.scene_dir, args.out, cfg, args.pair, args.target)
            print(json.dumps({k: v for k, v in res.items()
                              if not (isinstance(v, float) and math.isnan(v))}, sort_keys=True))
        elif args.command == "eval":
            res = cmd_eval(args.root, args.out, cfg)
            print(json.dumps(res["summary"], sort_keys=True))
        else:
            doc = cmd_check(cfg, args.out)
            print(json.dumps(doc, indent=1, sort_keys=True))
            return 0 if doc["passed"] else 1
    except (PosefreeError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
