"""Command-line entry points: protocol parsing, phantom builds, headless
session scripts, the HTTP service, and the evaluation studies."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .controller import SessionConfig, SessionState, load_script, run_session_script
from .errors import ParseError
from .phantom import (
    build_synthetic_phantom,
    default_vocabulary,
    load_phantom_spec,
    save_volume,
)
from .protocol import LLMClientAdapter, RuleBasedAdapter, parse_action, serialize_action
from .segmentation import CorruptionConfig, OracleSegmenter
from .server import load_phantom
from .twin import TwinConfig


def corruption_options(fn):
    fn = click.option("--blur", type=float, default=0.0, show_default=True,
                      help="Gaussian blur sigma in px applied to oracle masks.")(fn)
    fn = click.option("--dilate-erode", type=int, default=0, show_default=True,
                      help="Morphological dilation (+) or erosion (-) in px.")(fn)
    fn = click.option("--dropout", type=float, default=0.0, show_default=True,
                      help="Probability of substituting a wrong structure's mask.")(fn)
    fn = click.option("--seed", type=int, default=0, show_default=True)(fn)
    return fn


def session_options(fn):
    fn = click.option("--phantom", default="default", show_default=True,
                      help="'default', a phantom volume file, or a spec YAML.")(fn)
    fn = click.option("--pitch", type=float, default=None,
                      help="Detector pixel pitch in mm (default 0.3).")(fn)
    fn = click.option("--adapter", default="fallback", show_default=True,
                      help="'fallback' or the URL of an LLM protocol service.")(fn)
    fn = click.option("--grid-spacing", type=float, default=3.0, show_default=True)(fn)
    fn = click.option("--grid-radius", type=float, default=256.0, show_default=True)(fn)
    return fn


def _corruption(blur, dilate_erode, dropout, seed) -> CorruptionConfig:
    return CorruptionConfig(blur_sigma_px=blur, dilate_erode_px=dilate_erode,
                            dropout_prob=dropout, seed=seed)


def _session(phantom, pitch, blur, dilate_erode, dropout, seed,
             grid_spacing, grid_radius, radiation_gating=True) -> SessionState:
    volume = load_phantom(phantom)
    vocabulary = default_vocabulary(volume)
    config = SessionConfig(
        radiation_gating=radiation_gating,
        twin=TwinConfig(grid_spacing_mm=grid_spacing, grid_radius_mm=grid_radius),
        **({"pixel_pitch_mm": pitch} if pitch else {}),
    )
    segmenter = OracleSegmenter(volume, vocabulary,
                                _corruption(blur, dilate_erode, dropout, seed))
    return SessionState(volume=volume, vocabulary=vocabulary,
                        segmenter=segmenter, config=config)


@click.group()
def main():
    """Digital-twin simulator for a language-promptable robotic C-arm."""


@main.command("parse")
def parse_cmd():
    """Read action strings on stdin, emit canonical forms or errors."""
    failed = False
    for line in sys.stdin:
        line = line.rstrip("\n")
        if not line.strip():
            continue
        try:
            click.echo(serialize_action(parse_action(line)))
        except ParseError as e:
            failed = True
            click.echo(f"error: {e}", err=True)
    sys.exit(1 if failed else 0)


@main.group()
def phantom():
    """Phantom volume utilities."""


@phantom.command("build")
@click.option("--spec", required=True, type=click.Path(exists=True),
              help="Phantom spec YAML.")
@click.option("--out", required=True, type=click.Path(),
              help="Output phantom volume file.")
def phantom_build(spec, out):
    """Voxelize a spec and write the binary phantom format."""
    volume = build_synthetic_phantom(load_phantom_spec(spec))
    save_volume(volume, out)
    click.echo(f"wrote {out}: dims {tuple(volume.dims)}, "
               f"{len(volume.label_names) - 1} structures")


@main.command("script")
@click.argument("script_file", type=click.Path(exists=True))
@session_options
@corruption_options
@click.option("--no-auto-confirm", is_flag=True,
              help="Leave staged motions pending instead of confirming.")
@click.option("--out", type=click.Path(), default=None,
              help="Write the transcript to this file as structured text.")
def script_cmd(script_file, phantom, pitch, adapter, grid_spacing, grid_radius,
               blur, dilate_erode, dropout, seed, no_auto_confirm, out):
    """Run a session script headlessly and emit the transcript."""
    state = _session(phantom, pitch, blur, dilate_erode, dropout, seed,
                     grid_spacing, grid_radius)
    adapter_obj = RuleBasedAdapter() if adapter == "fallback" else LLMClientAdapter(adapter)
    transcript = run_session_script(
        load_script(script_file), state,
        auto_confirm=not no_auto_confirm, adapter=adapter_obj,
    )
    text = transcript.as_text()
    if out:
        Path(out).write_text(text, encoding="utf-8")
    click.echo(text, nl=False)
    sys.exit(0 if transcript.n_success == len(transcript.entries) else 1)


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8421, show_default=True)
@click.option("--ui-dir", type=click.Path(exists=True), default=None,
              help="Serve a built frontend from this directory at /ui.")
@click.option("--phantom", default="default", show_default=True,
              help="Default phantom for new sessions.")
@click.option("--pitch", type=float, default=None,
              help="Default detector pixel pitch in mm for new sessions.")
@click.option("--adapter", default="fallback", show_default=True,
              help="Default language adapter: 'fallback' or an LLM URL.")
@corruption_options
def serve_cmd(host, port, ui_dir, phantom, pitch, adapter,
              blur, dilate_erode, dropout, seed):
    """Run the controller HTTP API; flags set defaults for new sessions."""
    import uvicorn

    from .server import create_app

    defaults = {
        "phantom": phantom,
        "adapter": adapter,
        "corruption": {"blur_sigma_px": blur, "dilate_erode_px": dilate_erode,
                       "dropout_prob": dropout, "seed": seed},
    }
    if pitch:
        defaults["pixel_pitch_mm"] = pitch
    app = create_app(defaults=defaults)
    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")
    uvicorn.run(app, host=host, port=port)


@main.command("render")
@click.option("--phantom", default="default", show_default=True)
@click.option("--pitch", type=float, default=1.0, show_default=True)
@click.option("--views", "views_file", type=click.Path(exists=True), required=True,
              help="Views file (alpha beta [roll [x y z]] per line).")
@click.option("--out-dir", type=click.Path(), required=True)
def render_cmd(phantom, pitch, views_file, out_dir):
    """Render views to PGM+sidecar interchange pairs."""
    from .evalharness import load_views_file, render_study_views
    from .geometry import make_intrinsics
    from .xray import save_image_pair

    volume = load_phantom(phantom)
    views = load_views_file(views_file)
    intr = make_intrinsics(430, pitch, 1200)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for img in render_study_views(volume, views, intr):
        save_image_pair(img, out / f"{img.id}.pgm")
    click.echo(f"rendered {len(views)} views into {out}")


@main.group()
def eval():
    """Evaluation studies over rendered views."""


def eval_options(fn):
    fn = click.option("--phantom", default="default", show_default=True)(fn)
    fn = click.option("--pitch", type=float, default=1.0, show_default=True,
                      help="Detector pixel pitch in mm for study renders.")(fn)
    fn = click.option("--views", "views_file", type=click.Path(exists=True), default=None,
                      help="Views file (alpha beta [roll [x y z]] per line).")(fn)
    fn = click.option("--random-views", type=int, default=None,
                      help="Generate this many random views instead.")(fn)
    fn = click.option("--images-dir", type=click.Path(exists=True), default=None,
                      help="Load pre-rendered PGM+sidecar pairs instead of rendering.")(fn)
    fn = click.option("--prompts", "prompts_file", type=click.Path(exists=True), default=None,
                      help="Prompt list file (one per line); default: whole vocabulary.")(fn)
    fn = click.option("--out-dir", type=click.Path(), required=True)(fn)
    return fn


def _study_inputs(phantom, pitch, views_file, random_views, prompts_file, seed,
                  images_dir=None):
    from .evalharness import generate_random_views, load_views_file, render_study_views
    from .geometry import CArmState, make_intrinsics

    volume = load_phantom(phantom)
    vocabulary = default_vocabulary(volume)
    if images_dir:
        from .xray import load_image_pair

        pgms = sorted(Path(images_dir).glob("*.pgm"))
        if not pgms:
            raise click.ClickException(f"no .pgm files in {images_dir}")
        images = [load_image_pair(p) for p in pgms]
    else:
        if views_file:
            views = load_views_file(views_file)
        elif random_views:
            views = generate_random_views(random_views, seed=seed)
        else:
            views = [CArmState(alpha=0), CArmState(alpha=90),
                     CArmState(alpha=45, beta=30), CArmState(alpha=-60, beta=-20)]
        intr = make_intrinsics(430, pitch, 1200)
        images = render_study_views(volume, views, intr)
    if prompts_file:
        prompts = [ln.strip() for ln in Path(prompts_file).read_text().splitlines()
                   if ln.strip() and not ln.startswith("#")]
    else:
        prompts = sorted(vocabulary.entries)
    return volume, vocabulary, images, prompts


def _write_outputs(out_dir, rows, samples, extra=None):
    from .evalharness import samples_csv, summary_csv, summary_table

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "samples.csv").write_text(samples_csv(samples), encoding="utf-8")
    (out / "summary.csv").write_text(summary_csv(rows), encoding="utf-8")
    table = summary_table(rows)
    (out / "summary.txt").write_text(table, encoding="utf-8")
    click.echo(table, nl=False)
    if extra:
        click.echo(extra)


@eval.command("single-image")
@eval_options
@corruption_options
def eval_single(phantom, pitch, views_file, random_views, images_dir, prompts_file,
                out_dir, blur, dilate_erode, dropout, seed):
    """Single-view segmentation metrics (DICE, 2D centroid error)."""
    from .evalharness import run_single_image_study

    volume, vocabulary, images, prompts = _study_inputs(
        phantom, pitch, views_file, random_views, prompts_file, seed, images_dir)
    rows, samples = run_single_image_study(
        volume, vocabulary, images, prompts,
        _corruption(blur, dilate_erode, dropout, seed))
    _write_outputs(out_dir, rows, samples)


@eval.command("subsets")
@eval_options
@corruption_options
@click.option("--n-min", type=int, default=2, show_default=True)
@click.option("--n-max", type=int, default=5, show_default=True)
@click.option("--dice-floor", type=float, default=0.3, show_default=True)
@click.option("--draws-per-primary", type=int, default=8, show_default=True)
@click.option("--grid-spacing", type=float, default=3.0, show_default=True)
@click.option("--grid-radius", type=float, default=256.0, show_default=True)
def eval_subsets(phantom, pitch, views_file, random_views, images_dir, prompts_file,
                 out_dir, blur, dilate_erode, dropout, seed, n_min, n_max, dice_floor,
                 draws_per_primary, grid_spacing, grid_radius):
    """Random-subset 3D reconstruction study (centroid error, bbox P/R)."""
    from .evalharness import run_subset_study

    volume, vocabulary, images, prompts = _study_inputs(
        phantom, pitch, views_file, random_views, prompts_file, seed, images_dir)
    rows, samples, n_subsets = run_subset_study(
        volume, vocabulary, images, prompts,
        _corruption(blur, dilate_erode, dropout, seed),
        n_range=(n_min, n_max), dice_floor=dice_floor, seed=seed,
        draws_per_primary=draws_per_primary,
        grid_spacing_mm=grid_spacing, grid_radius_mm=grid_radius)
    _write_outputs(out_dir, rows, samples,
                   extra=f"unique qualifying subsets: {n_subsets}")


if __name__ == "__main__":
    main()
