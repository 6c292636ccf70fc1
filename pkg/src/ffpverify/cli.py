"""Command-line entry point.

Exit codes: 0 success, 1 invalid input, 2 missing input, 3 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io, pipeline
from .errors import MissingInput, ValidationError
from .voting import MODES

EXIT_OK, EXIT_VALIDATION, EXIT_MISSING, EXIT_INTERNAL = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ffpverify", description="Verify LOD-1 buildings against oblique aerial images.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def stage(name, help):
        s = sub.add_parser(name, help=help)
        s.add_argument("--config", required=True, type=Path, help="pipeline config (JSON)")
        s.add_argument("--jobs", type=int, default=1, help="worker threads")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--force", action="store_true", help="rerun even if outputs are up to date")
        return s

    stage("render", "render one depth map per view")
    stage("extrude", "ground-filter the DSM and extrude LOD-1 buildings")
    stage("extract", "rectify face patches and run the occlusion test")
    stage("train", "train the patch classifier")
    s = stage("classify", "classify every extracted patch")
    s.add_argument("--classifier", choices=("ffp", "oracle"), default=None)
    s = stage("verify", "vote per building and write verdict reports")
    s.add_argument("--mode", choices=("nadir", "oblique", "3d"), default=None, help="only this mode (default: all)")
    stage("report", "print the verification summary")
    s = stage("run", "run every stage in order")
    s.add_argument("--classifier", choices=("ffp", "oracle"), default=None)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("output", type=Path, help="dataset directory to create")
    s.add_argument("--spec", type=Path, default=None, help="scene spec (JSON)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--jobs", type=int, default=1)
    return p


def _config(args) -> pipeline.PipelineConfig:
    overrides = {"seed": args.seed}
    if getattr(args, "classifier", None):
        overrides["classifier"] = args.classifier
    return pipeline.PipelineConfig.load(args.config, **overrides)


def dispatch(args) -> None:
    if args.command == "synth":
        from .synth import SyntheticSceneSpec, write_dataset

        data = io.read_json(args.spec) if args.spec else {}
        if args.seed is not None:
            data["seed"] = args.seed
        spec = SyntheticSceneSpec.from_dict(data)
        write_dataset(args.output, spec, jobs=args.jobs)
        print(f"wrote synthetic dataset to {args.output}")
        return
    if args.jobs < 1:
        raise ValidationError("--jobs must be >= 1")
    cfg = _config(args)
    kw = dict(jobs=args.jobs, force=args.force)
    if args.command == "render":
        pipeline.cmd_render(cfg, **kw)
    elif args.command == "extrude":
        pipeline.cmd_extrude(cfg, **kw)
    elif args.command == "extract":
        pipeline.cmd_extract(cfg, **kw)
    elif args.command == "train":
        pipeline.cmd_train(cfg, **kw)
    elif args.command == "classify":
        pipeline.cmd_classify(cfg, **kw)
    elif args.command == "verify":
        modes = (args.mode,) if args.mode else MODES
        pipeline.cmd_verify(cfg, modes=modes, **kw)
    elif args.command == "report":
        print(pipeline.cmd_report(cfg, **kw), end="")
    elif args.command == "run":
        print(pipeline.run_all(cfg, **kw), end="")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        logging.getLogger(__name__).debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
