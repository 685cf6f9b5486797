"""Command line entry point.

Exit codes: 0 success, 1 configuration or parse error, 2 run finished with
per-frame or per-person failures recorded in the manifest.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .errors import AnonError, ConfigInvalid, ParseError, SpecInvalid

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(EXIT_CONFIG)


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose):
    """Multi-view face anonymization for depth camera rigs."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--output", type=click.Path(file_okay=False), help="Override the output directory.")
@click.option("--backend", help="mesh_poisson, blacken, pixelate_8 or blur_61.")
@click.option("--workers", type=int, help="Frame-level worker processes.")
@click.option("--faithful", is_flag=True, default=None, help="Disable the robustness additions.")
@click.option("--frames", nargs=2, type=int, help="Half-open frame range.")
def anonymize(config, output, backend, workers, faithful, frames):
    """Replace every face in a recording with a rendered template face."""
    from .pipeline import PipelineConfig, run_anonymize

    over = {k: v for k, v in dict(output=output, backend=backend, workers=workers, faithful=faithful,
                                  frames=list(frames) if frames else None).items() if v is not None}
    if output:
        over["output"] = str(Path(output).resolve())
    try:
        cfg = PipelineConfig.from_yaml(config, over)
        manifest = run_anonymize(cfg)
    except (ConfigInvalid, ParseError) as exc:
        _fail(exc)
    click.echo(f"{len(manifest.frames)} frames, {manifest.n_faces} faces, {manifest.n_errors} errors "
               f"-> {cfg.output}")
    sys.exit(EXIT_PARTIAL if manifest.n_errors else EXIT_OK)


@main.command()
@click.argument("detections", type=click.Path(dir_okay=False))
@click.argument("annotations", type=click.Path(dir_okay=False))
@click.option("--iou", "iou_threshold", type=float, default=0.4, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), help="Write report.json and report.txt here.")
@click.option("--faithful", is_flag=True, help="Count detections on fully-occluded faces as false positives.")
@click.option("--original", type=click.Path(file_okay=False), help="Original color root for SSIM.")
@click.option("--anonymized", type=click.Path(file_okay=False), help="Anonymized color root for SSIM.")
def evaluate(detections, annotations, iou_threshold, out, faithful, original, anonymized):
    """Score detections against ground-truth face boxes."""
    from .pipeline import run_evaluate

    if not 0 < iou_threshold <= 1:
        _fail(ConfigInvalid("iou threshold must lie in (0, 1]"))
    try:
        report = run_evaluate(detections, annotations, iou_threshold, out, faithful, original, anonymized)
    except ParseError as exc:
        _fail(exc)
    click.echo(report.to_text(), nl=False)


@main.command()
@click.argument("root", type=click.Path(file_okay=False))
@click.option("--frames", "n_frames", type=int, default=50, show_default=True)
@click.option("--persons", "n_persons", type=int, default=3, show_default=True)
@click.option("--cameras", "n_cameras", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--keypoint-noise", type=float, default=0.0, show_default=True, help="Pixels.")
@click.option("--no-occluder", is_flag=True)
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False), help="YAML scene description.")
def synth(root, n_frames, n_persons, n_cameras, seed, keypoint_noise, no_occluder, spec_path):
    """Generate a synthetic recording with ground truth."""
    import yaml

    from .synth import SceneSpec, gen_synth

    try:
        if spec_path:
            spec = SceneSpec.from_dict(yaml.safe_load(Path(spec_path).read_text()) or {})
        else:
            d = dict(seed=seed, n_frames=n_frames, n_persons=n_persons, n_cameras=n_cameras,
                     keypoint_noise=keypoint_noise)
            if no_occluder:
                d["occluder"] = {"enabled": False}
            spec = SceneSpec.from_dict(d)
        res = gen_synth(root, spec)
    except (SpecInvalid, yaml.YAMLError, OSError) as exc:
        _fail(exc)
    n_occ = sum(a.fully_occluded for a in res.annotations)
    click.echo(f"wrote {spec.n_frames} frames, {len(res.annotations)} annotations "
               f"({n_occ} fully occluded) to {root}")


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.argument("frame", type=int)
@click.option("--out", type=click.Path(file_okay=False), default="inspect", show_default=True)
def inspect(config, frame, out):
    """Write overlays and per-face diagnostics for one frame."""
    from .pipeline import PipelineConfig, inspect_frame

    try:
        cfg = PipelineConfig.from_yaml(config)
        info = inspect_frame(cfg, frame, Path(out))
    except (ConfigInvalid, ParseError) as exc:
        _fail(exc)
    except AnonError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_PARTIAL)
    click.echo(json.dumps(info, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
