"""Command-line entry point: ``demoedit {edit,oracle,inspect,validate}``."""

from __future__ import annotations

import argparse
import functools
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from .control import export_condition_stack
from .dataset import ConfigError, DatasetError, PipelineConfig, load_demo, save_demo
from .editor import EditError, EditedDemo, GenerationShortfall, SegmentError, run_edit_pipeline
from .kinematics import ModelError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_SHORTFALL = 4

log = logging.getLogger("demoedit")


def _write_output(out: Path, cfg: PipelineConfig, edited: EditedDemo) -> str:
    save_demo(edited, out / "demos" / edited.demo_id, force=True)
    if cfg.export_conditions:
        export_condition_stack(edited, out / "conditions", cfg.chunk_frames, cfg.canny_low, cfg.canny_high)
    return edited.demo_id


def cmd_edit(args) -> int:
    try:
        cfg = PipelineConfig.load(args.config).with_overrides(count=args.count, seed=args.seed)
        if args.no_conditions:
            cfg = cfg.with_overrides(export_conditions=False)
        cfg.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        demo = load_demo(args.demo)
    except (DatasetError, ModelError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    out = Path(args.out)
    if (out / "demos").exists() and any((out / "demos").iterdir()) and not args.force:
        print(f"input error: {out} already holds demos (use --force)", file=sys.stderr)
        return EXIT_INPUT
    sink = functools.partial(_write_output, out, cfg)
    try:
        result = run_edit_pipeline(demo, config=cfg, workers=args.workers, sink=sink)
        code = EXIT_OK
    except GenerationShortfall as exc:
        result = exc.result
        code = EXIT_SHORTFALL
    except (SegmentError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for a in result.attempts:
        print(f"{a.attempt}\t{a.demo_id}\t{'ok' if a.ok else 'failed'}\t{a.reason}".rstrip("\t"))
    summary = {
        "source_demo": demo.demo_id,
        "requested": result.requested,
        "succeeded": [a.demo_id for a in result.successes],
        "failed": [{"attempt": a.attempt, "reason": a.reason} for a in result.failures],
        "config": cfg.to_dict(),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{len(result.successes)}/{result.requested} edits succeeded")
    return code


def cmd_oracle(args) -> int:
    from .geometry import planar_transform
    from .oracle import PickPlaceScript, pickplace_scene, resimulate_with_edit, simulate_demo

    if args.frames < 12:
        print("config error: pick-and-place needs at least 12 frames", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    scene = pickplace_scene(args.width, args.height)
    script = PickPlaceScript(frames=args.frames)
    try:
        demo, _ = simulate_demo(scene, script, demo_id="source")
        save_demo(demo, out / "source", force=args.force)
    except FileExistsError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    cfg = {"segments": script.segments(), "seed": args.seed}
    edited = any(v != 0.0 for v in (args.edit_tx, args.edit_ty, args.edit_yaw))
    if edited:
        obj = scene.object(script.object_id)
        center = [float(x) for x in obj.pose.translation[:2]]
        cfg["transforms"] = {
            script.object_id: {"dx": args.edit_tx, "dy": args.edit_ty, "yaw_deg": args.edit_yaw, "center": center}
        }
        cfg["objects"] = [script.object_id]
        t = planar_transform(center, args.edit_tx, args.edit_ty, math.radians(args.edit_yaw))
        truth, _ = resimulate_with_edit(scene, script, {script.object_id: t}, demo_id="ground_truth", source=demo)
        save_demo(truth, out / "ground_truth", force=args.force)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    print(f"wrote {out / 'source'} ({demo.frame_count} frames, {len(demo.views)} views)")
    if edited:
        print(f"wrote {out / 'ground_truth'}")
    return EXIT_OK


def demo_stats(demo) -> List[tuple]:
    rows = [
        ("demo_id", demo.demo_id),
        ("frames", demo.frame_count),
        ("fps", demo.fps),
        ("dof", demo.model.dof),
        ("arms", ",".join(sorted(demo.actions))),
        ("labels", ",".join(f"{k}:{v}" for k, v in sorted(demo.label_table.items()))),
    ]
    for v in demo.views:
        if demo.frame_count:
            stack = np.stack([d.values for d in v.depths])
            ok = np.isfinite(stack)
            lo = float(stack[ok].min()) if ok.any() else float("nan")
            hi = float(stack[ok].max()) if ok.any() else float("nan")
            frac = float(ok.mean())
        else:
            lo = hi = frac = float("nan")
        rows.append((f"view.{v.view_id}", f"{v.mount}\t{v.intrinsics.width}x{v.intrinsics.height}"))
        rows.append((f"view.{v.view_id}.valid_fraction", f"{frac:.4f}"))
        rows.append((f"view.{v.view_id}.depth_range_m", f"{lo:.4f}\t{hi:.4f}"))
    for arm, seq in sorted(demo.actions.items()):
        if seq:
            p = np.array([a.pose.translation for a in seq])
            path = float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())
            rows.append((f"arm.{arm}.path_length_m", f"{path:.4f}"))
    for s in demo.segments:
        rows.append(("segment", f"{s.get('kind')}\t{s.get('start', '')}\t{s.get('end', '')}"))
    return rows


def cmd_inspect(args) -> int:
    try:
        demo = load_demo(args.demo)
    except (DatasetError, ModelError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    for key, value in demo_stats(demo):
        print(f"{key}\t{value}")
    if args.figures:
        from .plotting import write_figures

        for p in write_figures(demo, args.figures):
            print(f"figure\t{p}")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        demo = load_demo(args.demo)
        demo.validate()
    except (DatasetError, ModelError, OSError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INPUT
    problems = []
    if demo.frame_count:
        lo, hi = demo.model.lower, demo.model.upper
        bad = np.flatnonzero(((demo.joints < lo - 1e-9) | (demo.joints > hi + 1e-9)).any(axis=1))
        if bad.size:
            problems.append(f"joints outside limits at frames {bad[:10].tolist()}")
    for arm, seq in demo.actions.items():
        g = [a.gripper for a in seq]
        if any(not 0.0 <= x <= 1.0 for x in g):
            problems.append(f"gripper of {arm} outside [0, 1]")
    for p in problems:
        print(f"invalid: {p}", file=sys.stderr)
    if problems:
        return EXIT_INPUT
    print(f"ok\t{demo.demo_id}\t{demo.frame_count} frames")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="demoedit", description="Spatially augment multi-view robot demonstrations.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("edit", help="generate edited demos and conditioning stacks")
    e.add_argument("--demo", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--count", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--no-conditions", action="store_true", help="skip the conditioning stacks")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_edit)

    o = sub.add_parser("oracle", help="write a synthetic demo (and optionally its edited ground truth)")
    o.add_argument("--scene", choices=["pickplace"], default="pickplace")
    o.add_argument("--frames", type=int, default=60)
    o.add_argument("--out", required=True)
    o.add_argument("--width", type=int, default=320)
    o.add_argument("--height", type=int, default=240)
    o.add_argument("--edit-tx", type=float, default=0.0)
    o.add_argument("--edit-ty", type=float, default=0.0)
    o.add_argument("--edit-yaw", type=float, default=0.0, help="degrees")
    o.add_argument("--seed", type=int, default=0, help="seed written into the generated config")
    o.add_argument("--force", action="store_true")
    o.set_defaults(func=cmd_oracle)

    i = sub.add_parser("inspect", help="print tab-separated demo statistics")
    i.add_argument("demo")
    i.add_argument("--figures", metavar="DIR", help="also write PNG figures to DIR")
    i.set_defaults(func=cmd_inspect)

    v = sub.add_parser("validate", help="check format and invariants of a demo directory")
    v.add_argument("demo")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except EditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHORTFALL


if __name__ == "__main__":
    sys.exit(main())
