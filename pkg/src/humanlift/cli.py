"""Command-line entry points for the lifting pipeline.

Exit codes: 0 on success, 1 when a stage fails at runtime, 2 for usage
and configuration errors (argparse uses 2 for unknown flags already).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .eval import (
    RemoteMetricBackend,
    StubMetricBackend,
    evaluate_subject,
    save_report,
)
from .field import load_field
from .mesh import load_obj
from .pipeline import (
    ConfigError,
    ConfigMismatchError,
    DivergenceError,
    EmptySurfaceError,
    RunConfig,
    export_turntable,
    run_backview,
    run_coarse,
    run_fine_geometry,
    run_full,
    run_preprocess,
    run_texture,
)

log = logging.getLogger("humanlift.cli")

_STAGE_FLAGS = {
    "workdir": "workdir",
    "input": "input_image",
    "prompt": "prompt",
    "seed": "seed",
    "backend": "backend",
    "endpoint": "endpoint",
    "coarse_steps": "coarse_steps",
    "geometry_steps": "geometry_steps",
    "texture_steps": "texture_steps",
    "refine_steps": "refine_steps",
    "ddim_steps": "ddim_steps",
    "samples": "n_samples_per_ray",
    "tet_res": "tet_resolution",
    "normal_estimator": "normal_estimator_cmd",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--desk", action="store_true",
                        help="start from the small CPU-friendly preset")
    parser.add_argument("--workdir", help="run directory for stage outputs")
    parser.add_argument("--input", help="input RGBA photo")
    parser.add_argument("--prompt", help="subject description")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--backend", choices=["mock", "remote"])
    parser.add_argument("--endpoint", help="remote denoiser URL")
    parser.add_argument("--res", type=int,
                        help="square working resolution for every stage")
    parser.add_argument("--coarse-steps", type=int, dest="coarse_steps")
    parser.add_argument("--geometry-steps", type=int, dest="geometry_steps")
    parser.add_argument("--texture-steps", type=int, dest="texture_steps")
    parser.add_argument("--refine-steps", type=int, dest="refine_steps")
    parser.add_argument("--ddim-steps", type=int, dest="ddim_steps")
    parser.add_argument("--samples", type=int,
                        help="volume samples per ray")
    parser.add_argument("--tet-res", type=int, dest="tet_res",
                        help="tetrahedral grid resolution")
    parser.add_argument("--normal-estimator", dest="normal_estimator",
                        help="external normal estimator command with "
                             "{input}/{output} placeholders")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    base = (RunConfig.desk_profile() if args.desk else RunConfig()).to_dict()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        raw = yaml.safe_load(path.read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must hold a mapping")
        base.update(raw)
    for flag, key in _STAGE_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    if getattr(args, "res", None) is not None:
        base["coarse_resolution"] = args.res
        base["fine_resolution"] = args.res
    return RunConfig.from_dict(base)


def _metric_backend(args: argparse.Namespace):
    kind = args.metric_backend
    if kind == "none":
        return None
    if kind == "stub":
        return StubMetricBackend()
    if not args.metric_endpoint:
        raise ConfigError("--metric-backend remote needs --metric-endpoint")
    return RemoteMetricBackend(args.metric_endpoint)


def _cmd_evaluate(args: argparse.Namespace) -> int:
    backend = _metric_backend(args)
    report = evaluate_subject(args.run_dir, gt_dir=args.gt,
                              protocol=args.protocol, backend=backend,
                              n_novel=args.n_novel, subject=args.subject)
    out = Path(args.out) if args.out \
        else Path(args.run_dir) / "eval" / "report.json"
    save_report(out, report)
    print(json.dumps({"subject": report.subject, "summary": report.summary,
                      "views": report.view_count,
                      "partial": report.partial}, indent=2, sort_keys=True))
    print(f"report written to {out}")
    return 0


def _cmd_render(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    mesh_path = cfg.stage_dir("fine_geo") / "mesh.obj"
    field_path = cfg.stage_dir("texture") / "texture.ctxf"
    for p in (mesh_path, field_path):
        if not p.exists():
            raise FileNotFoundError(f"{p} is missing; run the earlier stages")
    out = Path(args.out) if args.out else cfg.stage_dir("texture") / "turntable"
    export_turntable(cfg, load_obj(mesh_path), load_field(field_path), out)
    print(f"turntable written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="humanlift",
        description="Lift a single segmented human photo to a textured mesh.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true",
                        help="only warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("preprocess", "normalize the input photo"),
        ("coarse", "optimize the coarse radiance field"),
        ("backview", "synthesize the back view"),
        ("fine-geo", "sculpt the fine mesh"),
        ("texture", "optimize the texture field"),
        ("full-run", "run every stage in order"),
        ("render", "re-export the turntable from saved outputs"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        if name == "coarse":
            p.add_argument("--resume", action="store_true",
                           help="continue from the last checkpoint")
        if name == "render":
            p.add_argument("--out", help="output directory for the frames")

    p = sub.add_parser("evaluate", help="compute image metrics for a run")
    p.add_argument("--run-dir", required=True, dest="run_dir",
                   help="directory holding view_00.png .. view_NN.png")
    p.add_argument("--gt", help="ground-truth directory (thuman) or "
                               "reference image (sshq)")
    p.add_argument("--protocol", choices=["thuman", "sshq"], default="thuman")
    p.add_argument("--out", help="report path (default <run-dir>/eval/report.json)")
    p.add_argument("--n-novel", type=int, default=10, dest="n_novel")
    p.add_argument("--subject", help="subject id recorded in the report")
    p.add_argument("--metric-backend", choices=["none", "stub", "remote"],
                   default="none", dest="metric_backend")
    p.add_argument("--metric-endpoint", dest="metric_endpoint",
                   help="remote metric service URL")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")

    try:
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        if args.command == "render":
            return _cmd_render(args)
        cfg = config_from_args(args)
        if args.command == "preprocess":
            run_preprocess(cfg)
        elif args.command == "coarse":
            run_coarse(cfg, resume=args.resume)
        elif args.command == "backview":
            run_backview(cfg)
        elif args.command == "fine-geo":
            run_fine_geometry(cfg)
        elif args.command == "texture":
            run_texture(cfg)
        elif args.command == "full-run":
            outputs = run_full(cfg)
            for stage, path in outputs.items():
                print(f"{stage}: {path}")
        return 0
    except (ConfigError, ConfigMismatchError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (DivergenceError, EmptySurfaceError, FileNotFoundError,
            OSError, RuntimeError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
