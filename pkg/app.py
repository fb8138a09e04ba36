"""
Command-line entry point for Silhouette Lab.

    python app.py gen-scenes --out scenes --num 20 --views 10 --seed 0
    python app.py fit --scene scenes --views 5 --iters 800 --out fits
    python app.py eval --pred fits --scenes scenes --out report.json
    python app.py render --mesh obj.obj --camera cam.json --hard --out img.png
    python app.py gradcheck --suite all
    python app.py train --learned --scenes scenes --out model
"""

import json
import logging
import os
import sys
from logging.handlers import RotatingFileHandler

import click
import numpy as np
from click.core import ParameterSource
from joblib import Parallel, delayed

import settings
from errors import InvalidArgumentError, NumericalFailure
from fitter import FitConfig, fit_scene, write_fit_outputs
from geom import Camera, LayoutBounds, Mesh, load_obj, world_to_view
from gradcheck_suite import check_suite, format_table
from metrics import (baseline_scene, evaluate, load_prediction, save_prediction, write_report_json,
                     write_report_pdf)
from render import RenderConfig, hard_rasterize, save_png, soft_rasterize
from scene_validator import validate_camera_descriptor, validate_fit_options
from scenegen import SceneGenConfig, generate_bundle, list_scene_dirs, load_bundle, write_bundle

logger = logging.getLogger("silhouette_lab")


# ── Logging ──

def configure_logging(verbose=False):
    """Rotating app/error logs under LOG_DIR plus a console handler; idempotent."""
    root = logging.getLogger()
    if getattr(root, "_silhouette_configured", False):
        return
    os.makedirs(settings.LOG_DIR, exist_ok=True)

    file_handler = RotatingFileHandler(
        os.path.join(settings.LOG_DIR, "app.log"), maxBytes=5_000_000, backupCount=5
    )
    file_handler.setLevel(logging.INFO)
    file_handler.setFormatter(logging.Formatter(
        "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
    ))

    error_handler = RotatingFileHandler(
        os.path.join(settings.LOG_DIR, "error.log"), maxBytes=5_000_000, backupCount=3
    )
    error_handler.setLevel(logging.ERROR)
    error_handler.setFormatter(logging.Formatter(
        "%(asctime)s [%(levelname)s] %(name)s: %(message)s\n%(pathname)s:%(lineno)d"
    ))

    console = logging.StreamHandler()
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s"))

    for handler in (file_handler, error_handler, console):
        root.addHandler(handler)
    root.setLevel(logging.INFO)
    root._silhouette_configured = True
    logger.info("Silhouette Lab starting up...")


# ── Exit codes ──

class SilhouetteGroup(click.Group):
    """Turns library exceptions into a one-line message and their exit code."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.exceptions.Abort, click.ClickException):
            raise
        except Exception as exc:
            code = getattr(exc, "exit_code", None)
            if code is None and isinstance(exc, (OSError, ValueError)):
                code = 2
            if code is None:
                raise
            logger.error("%s: %s", type(exc).__name__, exc)
            click.echo(f"Error: {exc}", err=True)
            ctx.exit(code)


def _workers(requested, jobs):
    return max(1, min(requested or settings.THREADS, settings.THREADS, max(jobs, 1)))


def _apply_config_file(ctx, params):
    """Fill options not given on the command line from --config key=value lines."""
    path = params.get("config")
    if not path:
        return params
    values = settings.read_kv_config(path)
    options = {}
    for p in ctx.command.params:
        options[p.name] = p
        for opt in getattr(p, "opts", []):
            options.setdefault(opt.lstrip("-").replace("-", "_"), p)
    unknown = sorted(set(values) - set(options))
    if unknown:
        raise InvalidArgumentError(f"{path}: unknown option(s) {', '.join(unknown)}")
    for key, raw in values.items():
        param = options[key]
        if ctx.get_parameter_source(param.name) in (ParameterSource.DEFAULT, None):
            try:
                params[param.name] = param.type_cast_value(ctx, raw)
            except click.BadParameter as exc:
                raise InvalidArgumentError(f"{path}: {key}: {exc.message}") from exc
    return params


@click.group(cls=SilhouetteGroup)
@click.option("--verbose", "-v", is_flag=True, help="Log progress to the console.")
def cli(verbose):
    """Differentiable multi-view silhouette toolkit."""
    configure_logging(verbose)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# 1. SCENE GENERATION
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━

def _generate_one(config, seed, index, views, bounds, out):
    bundle = generate_bundle(config, seed, index, views, bounds)
    write_bundle(bundle, os.path.join(out, bundle.scene_id))
    return bundle.scene_id, bundle.stats


@cli.command("gen-scenes")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output root directory.")
@click.option("--num", default=20, show_default=True, type=click.IntRange(min=1))
@click.option("--views", default=10, show_default=True, type=click.IntRange(min=2))
@click.option("--res", default=128, show_default=True, type=click.IntRange(min=8))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--objects", default=None, type=click.IntRange(min=1), help="Objects per scene.")
@click.option("--workers", default=None, type=click.IntRange(min=1))
def gen_scenes(out, num, views, res, seed, objects, workers):
    """Generate and bake synthetic multi-object scenes."""
    config = SceneGenConfig.from_defaults(resolution=res, objects=objects)
    if views > config.num_cameras:
        raise InvalidArgumentError(f"--views {views} exceeds the {config.num_cameras} generated cameras")
    bounds = LayoutBounds.from_dict(settings.load_defaults()["layout_bounds"])
    os.makedirs(out, exist_ok=True)
    results = Parallel(n_jobs=_workers(workers, num))(
        delayed(_generate_one)(config, seed, i, views, bounds, out) for i in range(num))
    rejected = sum(stats.get("rejected", 0) for _, stats in results)
    click.echo(f"Wrote {len(results)} scenes to {out} ({rejected} placements rejected)")


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# 2. FITTING
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━

def _fit_one(scene_dir, out_dir, options):
    bundle = load_bundle(scene_dir)
    ok, message = validate_fit_options(options["views"], options["iterations"], options["lr_layout"],
                                       options["points"], bundle.num_views, options["allow_single_view"])
    if not ok:
        raise InvalidArgumentError(f"{bundle.scene_id}: {message}")
    bounds = LayoutBounds.from_dict(settings.load_defaults()["layout_bounds"])

    if options["baseline"]:
        rng = np.random.default_rng(np.random.SeedSequence([options["seed"], bundle.spec.index]))
        pred = baseline_scene(bundle, options["baseline"], bounds, rng, views_used=options["views"])
        save_prediction(pred, out_dir)
        return bundle.scene_id, None

    if options["model"]:
        from learned import LearnConfig, load_model, predict_scene
        config = LearnConfig.from_defaults(views=options["views"])
        save_prediction(predict_scene(load_model(options["model"]), bundle, config), out_dir)
        return bundle.scene_id, None

    fit_options = {k: v for k, v in options.items() if k not in ("baseline", "model", "reg")}
    config = FitConfig.from_defaults(reg=options["reg"], **fit_options)
    try:
        result = fit_scene(bundle, config)
    except NumericalFailure as exc:
        if exc.state is not None:
            write_fit_outputs(exc.state, out_dir)
        raise
    write_fit_outputs(result, out_dir)
    return bundle.scene_id, result.trace[-1]["l3d"] if result.trace else None


@cli.command("fit")
@click.option("--scene", "scene", required=True, type=click.Path(exists=True),
              help="A scene directory or a root holding several.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--config", type=click.Path(exists=True, dir_okay=False), help="key=value defaults file.")
@click.option("--views", default=None, type=click.IntRange(min=1))
@click.option("--iters", "iterations", default=None, type=click.IntRange(min=0))
@click.option("--lr", "lr_layout", default=None, type=float, help="Learning rate of the layout logits.")
@click.option("--lr-offsets", default=None, type=float, help="Learning rate of the vertex offsets.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--points", default=None, type=click.IntRange(min=1))
@click.option("--res", "render_resolution", default=None, type=click.IntRange(min=4))
@click.option("--reg", default="l2", show_default=True, type=click.Choice(["edge", "l2", "l2lap"]))
@click.option("--init", default=None, type=click.Choice(["sphere_center", "perturbed_gt"]))
@click.option("--perturb", default=None, type=click.FloatRange(min=0.0))
@click.option("--init-z-logit", default=None, type=float)
@click.option("--no-dist-loss", is_flag=True, help="Drop the distance term; cross-entropy always applies.")
@click.option("--dynamic-render", is_flag=True, help="Render only around the ground truth and prediction.")
@click.option("--fixed-samples", is_flag=True, help="Reuse one set of surface samples for every iteration.")
@click.option("--patience", default=None, type=click.IntRange(min=0),
              help="Stop once the smoothed loss is flat for this many iterations (0 never stops early).")
@click.option("--oracle-depth", is_flag=True, help="Freeze the layout at ground truth.")
@click.option("--refine", is_flag=True, help="Offsets from a per-scene refinement stage.")
@click.option("--roialign", is_flag=True, help="RoIAlign/VertAlign features (implies --refine).")
@click.option("--baseline", default=None, type=click.Choice(["random", "fixed"]),
              help="Write a sphere baseline instead of fitting.")
@click.option("--model", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Predict with a trained USLW checkpoint instead of fitting.")
@click.option("--allow-single-view", is_flag=True)
@click.option("--workers", default=None, type=click.IntRange(min=1))
@click.pass_context
def fit(ctx, **params):
    """Fit shape and layout of every object from posed silhouettes."""
    params = _apply_config_file(ctx, params)
    scene_dirs = list_scene_dirs(params["scene"])
    if not scene_dirs:
        raise InvalidArgumentError(f"no scene directories under {params['scene']}")
    if params["views"] == 1:
        logger.warning("Fitting from a single view; layout depth is unconstrained")

    defaults = settings.load_defaults()["fit"]
    options = {
        "views": params["views"] or defaults["views"],
        "iterations": defaults["iterations"] if params["iterations"] is None else params["iterations"],
        "lr_layout": params["lr_layout"] or defaults["lr_layout"],
        "lr_offsets": params["lr_offsets"],
        "points": params["points"] or defaults["points"],
        "render_resolution": params["render_resolution"],
        "seed": params["seed"],
        "init": params["init"],
        "perturb": params["perturb"],
        "init_z_logit": params["init_z_logit"],
        "use_dist": not params["no_dist_loss"],
        "dynamic_render": params["dynamic_render"],
        "resample_points": False if params["fixed_samples"] else None,
        "patience": params["patience"],
        "oracle_depth": params["oracle_depth"],
        "refine": params["refine"] or params["roialign"],
        "sampler": "roialign" if params["roialign"] else "roimap",
        "allow_single_view": params["allow_single_view"],
        "reg": params["reg"],
        "baseline": params["baseline"],
        "model": params["model"],
    }
    single = len(scene_dirs) == 1 and os.path.samefile(scene_dirs[0], params["scene"])
    outs = [params["out"] if single else os.path.join(params["out"], os.path.basename(d)) for d in scene_dirs]
    results = Parallel(n_jobs=_workers(params["workers"], len(scene_dirs)))(
        delayed(_fit_one)(d, o, options) for d, o in zip(scene_dirs, outs))
    for scene_id, final in results:
        click.echo(f"{scene_id}: " + ("written" if final is None else f"final L3D {final:.6f}"))


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# 3. EVALUATION
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━

def _prediction_dirs(root):
    if os.path.isfile(os.path.join(root, "layout.json")):
        return [root]
    return [os.path.join(root, d) for d in sorted(os.listdir(root))
            if os.path.isfile(os.path.join(root, d, "layout.json"))]


@cli.command("eval")
@click.option("--pred", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--scenes", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--pdf", default=None, type=click.Path(dir_okay=False), help="Also write a PDF report.")
@click.option("--samples", default=10000, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--workers", default=None, type=click.IntRange(min=1))
def eval_command(pred, scenes, out, pdf, samples, seed, workers):
    """Score predictions against the baked ground truth."""
    predictions = [load_prediction(d) for d in _prediction_dirs(pred)]
    if not predictions:
        raise InvalidArgumentError(f"no predictions (layout.json) under {pred}")
    wanted = {p.scene_id for p in predictions}
    bundles = [b for b in (load_bundle(d) for d in list_scene_dirs(scenes)) if b.scene_id in wanted]
    far = settings.load_defaults()["fit"]["depth_penalty_far"]
    report = evaluate(predictions, bundles, samples, seed, far, _workers(workers, len(bundles)))
    if os.path.dirname(out):
        os.makedirs(os.path.dirname(out), exist_ok=True)
    write_report_json(report, out)
    if pdf:
        write_report_pdf(report, pdf)
    for key, value in report.aggregate.items():
        click.echo(f"{key:<22} {'n/a' if value is None else format(value, '.6g')}")


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# 4. RENDERING
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━

def _read_camera(path, view):
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: malformed JSON ({exc})") from exc
    if isinstance(data, dict) and "cameras" in data:
        cameras = data["cameras"]
        if not 0 <= view < len(cameras):
            raise InvalidArgumentError(f"{path}: view {view} out of range (0..{len(cameras) - 1})")
        data = cameras[view]
    ok, message = validate_camera_descriptor(data)
    if not ok:
        raise InvalidArgumentError(f"{path}: {message}")
    return Camera.from_dict(data)


@cli.command("render")
@click.option("--mesh", required=True, type=click.Path(exists=True, dir_okay=False), help="World-space OBJ.")
@click.option("--camera", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Camera JSON, or a scene.json together with --view.")
@click.option("--view", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--soft/--hard", default=False, help="Soft silhouette or hard z-buffered mask.")
@click.option("--res", default=None, type=click.IntRange(min=1), help="Square output size.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def render_command(mesh, camera, view, soft, res, out):
    """Render one mesh from one camera to a PNG."""
    cam = _read_camera(camera, view)
    world = load_obj(mesh)
    view_mesh = Mesh(world_to_view(cam, world.vertex_values), world.faces, "view").validate()
    if soft:
        defaults = dict(settings.load_defaults()["render"])
        defaults["resolution"] = [res, res] if res else [cam.height, cam.width]
        image = soft_rasterize(view_mesh, cam, RenderConfig.from_dict(defaults)).array
    else:
        image = hard_rasterize([view_mesh], cam, (res, res) if res else None).mask(1)
    save_png(image, out)
    click.echo(f"Wrote {'soft' if soft else 'hard'} render to {out}")


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# 5. GRADIENT CHECKS & LEARNED MODE
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━

@cli.command("gradcheck")
@click.option("--suite", default="all", show_default=True, type=click.Choice(["all", "render", "loss", "net"]))
@click.option("--tol", default=1e-3, show_default=True, type=click.FloatRange(min=0.0, min_open=True))
@click.option("--seed", default=0, show_default=True, type=int)
def gradcheck_command(suite, tol, seed):
    """Central-difference checks of every differentiable path."""
    click.echo(format_table(check_suite(suite, tol, seed)))


@cli.command("train")
@click.option("--learned", is_flag=True, help="Acknowledge the toy learned mode.")
@click.option("--scenes", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--steps", default=None, type=click.IntRange(min=1))
@click.option("--lr", default=None, type=float)
@click.option("--views", default=None, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
def train_command(learned, scenes, out, steps, lr, views, seed):
    """Train the tiny backbone + refinement stage + layout head across scenes."""
    if not learned:
        raise click.UsageError("the learned mode is a toy; pass --learned to run it")
    from learned import LearnConfig, train, write_training_outputs
    config = LearnConfig.from_defaults(steps=steps, lr=lr, views=views, seed=seed)
    bundles = [load_bundle(d) for d in list_scene_dirs(scenes)]
    result = train(bundles, config)
    write_training_outputs(result, out)
    click.echo(f"Trained on {len(bundles)} scenes for {config.steps} steps; "
               f"loss dropped {100.0 * result.loss_drop():.1f}%")


def main(argv=None):
    return cli.main(args=argv, prog_name="silhouette-lab")


if __name__ == "__main__":
    sys.exit(main())
