"""Command-line entry point: ``nocspose {synth,estimate,refine,eval,render}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 no frame succeeded.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import files
from .geometry import GeometryError, load_pose
from .metrics import write_report
from .pipeline import (
    MODES,
    SAMPLING,
    ConfigError,
    DataError,
    PipelineConfig,
    SceneManifest,
    cmd_estimate,
    cmd_eval,
    cmd_refine,
    cmd_render,
    cmd_synth,
    load_records,
    report_estimates,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NO_FRAME = 4

log = logging.getLogger("nocspose")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nocspose", description="NOCS-map pose estimation and multi-view refinement")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True):
        sp.add_argument("--config", type=Path, help="pipeline config (JSON)")
        if manifest:
            sp.add_argument("--manifest", type=Path, required=True, help="scene manifest (JSON)")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        return sp

    sp = common(sub.add_parser("synth", help="render a synthetic scene"), manifest=False)
    sp.add_argument("--frames", type=int, help="number of frames to render")

    for name, helptext in (("estimate", "single-view pose estimation"), ("refine", "multi-view refinement")):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("--mode", choices=MODES)
        sp.add_argument("--bbox", choices=("gt", "jitter"))
        if name == "refine":
            sp.add_argument("--views", type=int)
            sp.add_argument("--sampling", choices=SAMPLING)

    sp = common(sub.add_parser("eval", help="summarize a records file"))
    sp.add_argument("--records", type=Path, required=True)

    sp = common(sub.add_parser("render", help="write debug maps for one frame"))
    sp.add_argument("--frame", required=True, help="frame id")
    sp.add_argument("--pose", type=Path, help="pose JSON (defaults to the GT pose)")
    return p


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {}
    for key in ("seed", "mode", "bbox", "views", "sampling"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    frames = getattr(args, "frames", None)
    try:
        if frames is not None:
            overrides["synth"] = replace(cfg.synth, n_frames=frames)
        return replace(cfg, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _any_ok(records) -> bool:
    return any(r.ok for r in records)


def run(args) -> int:
    cfg = load_config(args)
    out = args.out
    if args.command == "synth":
        m = cmd_synth(cfg, out)
        log.info("wrote %d frames to %s", len(m.frames), out)
        return EXIT_OK
    manifest = SceneManifest.load(args.manifest)
    if args.command == "estimate":
        est = cmd_estimate(manifest, cfg)
        report_estimates(est, manifest, out, cfg)
        return EXIT_OK if _any_ok([e.record for e in est]) else EXIT_NO_FRAME
    if args.command == "refine":
        res = cmd_refine(manifest, cfg)
        diam = {manifest.object_id: manifest.load_mesh().diameter}
        write_report(res.after, diam, out, cfg.threshold_frac)
        write_report(res.before, diam, out / "before", cfg.threshold_frac)
        files.dump_json(res.reports, out / "refine_reports.json")
        return EXIT_OK if _any_ok(res.after) else EXIT_NO_FRAME
    if args.command == "eval":
        cmd_eval(load_records(args.records), manifest, out, cfg)
        return EXIT_OK
    if args.command == "render":
        pose = None
        if args.pose:
            try:
                pose = load_pose(args.pose)
            except (OSError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"cannot load pose: {exc}") from exc
        for path in cmd_render(manifest, args.frame, out, pose):
            log.info("wrote %s", path)
        return EXIT_OK
    raise ConfigError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, GeometryError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
