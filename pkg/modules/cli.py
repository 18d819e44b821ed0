"""
Command-line pipeline.

    python -m modules.cli <command> --config configs/reference.yaml [options]

Every invocation creates a new run directory under --out-dir holding the
artifacts, `manifest.json` (resolved config, seeds, input/output hashes) and
`history.csv`. Failures write `error.json` and exit with the error's code.
"""
import argparse
import datetime
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import pandas as pd
import torch

from modules.ablation import ablate_embedding_size
from modules.attention import export_attention_maps
from modules.codec import Codec
from modules.config import RunConfig, load_config, parse_resolution
from modules.data_audit import audit_run
from modules.data_loader import read_table, run_artifact
from modules.denoiser import Denoiser, sample, train_denoiser
from modules.distill import generate_views, reconstruct
from modules.errors import ConfigError, Invert3DError, MissingArtifactError, UsageError
from modules.fixtures import build_codec, build_corpus, build_vocab, codec_dataset, reference_scene
from modules.history import HistoryLogger, loss_frame
from modules.insights import generate_insights
from modules.inversion import evaluate_embedding, invert2d, invert3d
from modules.metrics import MetricsReport, latent_mse, psnr, validate_metrics_report
from modules.personalize import edit_views, personalize_scene
from modules.renderer import image_grid, render, save_png
from modules.run_store import RunDirectory, derive_seed, error_directory
from modules.scene import camera_embedding, load_scene, random_splat_cloud, save_scene
from modules.text_embed import Vocabulary, assemble_prompt, init_pseudo_token, load_embedding, save_embedding
from modules.visualization import ablation_bar_figure, ablation_curves_figure, loss_trace_figure, psnr_figure

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "train-codec", "train-denoiser", "invert", "reconstruct", "edit", "ablate", "eval")
EMBEDDING_FILE = "embedding.iv3d"

LR_KEYS = {
    "train-codec": "codec.learning_rate",
    "train-denoiser": "training.learning_rate",
    "invert": "inversion.learning_rate",
    "ablate": "inversion.learning_rate",
    "reconstruct": "sds.scene_learning_rate",
    "edit": "sds.scene_learning_rate",
}
INPUT_FLAGS = {
    "data": "data_run",
    "codec": "codec_run",
    "denoiser": "denoiser_run",
    "embedding": "embedding_run",
    "scene": "scene_path",
    "target": "target_run",
}


# --- artifact helpers ------------------------------------------------------

def _record_tree(run: RunDirectory, directory: Path):
    for path in sorted(Path(directory).rglob("*")):
        if path.is_file():
            run.record_output(path)


def _save_grid(run: RunDirectory, images, name: str, columns: int = 4) -> Path:
    path = save_png(image_grid(images, columns), run.file(name))
    run.record_output(path)
    return path


def _save_table(run: RunDirectory, frame: pd.DataFrame, name: str) -> Path:
    path = run.file(name)
    frame.to_csv(path, index=False)
    run.record_output(path)
    return path


def _save_figure(run: RunDirectory, fig, name: str) -> Path:
    path = run.file(name)
    path.write_text(fig.to_json())
    run.record_output(path)
    return path


# --- input loading ---------------------------------------------------------

def _load_corpus(config: RunConfig, run: RunDirectory):
    data_run = config.inputs.data_run
    if not data_run:
        return build_corpus(config)
    captions = json.loads(run_artifact(data_run, "captions.json").read_text())
    paths = sorted(run_artifact(data_run, "corpus").glob("scene_*.json"))
    if len(paths) != len(captions):
        raise MissingArtifactError("corpus scenes and captions disagree", scenes=len(paths), captions=len(captions))
    run.record_input("corpus", Path(data_run) / "corpus")
    return [load_scene(p) for p in paths], captions


def _load_scene(config: RunConfig, run: RunDirectory = None):
    if config.inputs.scene_path:
        path = Path(config.inputs.scene_path)
    elif config.inputs.data_run:
        path = run_artifact(config.inputs.data_run, "scene.json")
    else:
        return reference_scene(config)
    if not path.exists():
        raise MissingArtifactError("scene file not found", path=str(path))
    if run is not None:
        run.record_input("scene", path)
    return load_scene(path)


def _load_codec(config: RunConfig, run: RunDirectory = None) -> Codec:
    if config.inputs.codec_run:
        directory = run_artifact(config.inputs.codec_run, "codec")
        if run is not None:
            run.record_input("codec", directory)
        codec = Codec.load(directory)
    elif config.codec.mode == "orthonormal":
        codec = Codec(config.codec_config())
    else:
        raise MissingArtifactError("a learned codec needs inputs.codec_run (see train-codec)")
    if codec.config.latent_channels != config.codec_config().latent_channels:
        raise ConfigError("loaded codec does not match the configured latent channels")
    return codec


def _load_denoiser(config: RunConfig, run: RunDirectory = None):
    directory = run_artifact(config.inputs.denoiser_run, "denoiser")
    vocab_path = run_artifact(config.inputs.denoiser_run, "vocab.json")
    if run is not None:
        run.record_input("denoiser", directory)
        run.record_input("vocab", vocab_path)
    return Denoiser.load(directory).freeze(), Vocabulary.from_dict(json.loads(vocab_path.read_text()))


def _load_embedding(run_dir, run: RunDirectory = None, name: str = "embedding"):
    path = run_artifact(run_dir, EMBEDDING_FILE)
    if run is not None:
        run.record_input(name, path)
    return load_embedding(path)


# --- commands --------------------------------------------------------------

def _gen_data(config: RunConfig, run: RunDirectory, history: HistoryLogger, progress: bool):
    scenes, captions = build_corpus(config)
    run.record_output(save_scene(scenes[0], run.file("scene.json")))
    for i, scene in enumerate(scenes):
        run.record_output(save_scene(scene, run.file(f"corpus/scene_{i:02d}.json")))
    run.write_json("captions.json", captions)
    settings = config.render_settings()
    _save_grid(run, [render(scenes[0], cam, settings) for cam in config.eval_cameras()], "preview.png")
    history.add_entry("gen-data", f"{len(scenes)} scenes, {len(scenes[0])} splats in the reference", len(scenes))


def _train_codec(config: RunConfig, run: RunDirectory, history: HistoryLogger, progress: bool):
    scenes, _ = _load_corpus(config, run)
    codec, losses = build_codec(config, scenes, progress)
    codec.save(run.path / "codec")
    _record_tree(run, run.path / "codec")
    if losses:
        _save_table(run, loss_frame(losses), "codec_trace.csv")
    else:
        history.add_entry("train-codec", "orthonormal codec needs no training")
    views = codec_dataset(scenes, config, config.seeds()["eval"])
    with torch.no_grad():
        scores = [psnr(codec.decode(codec.encode(v)), v) for v in views]
    run.write_json("codec_eval.json", {"mode": codec.config.mode, "roundtrip_psnr": scores,
                                       "mean_roundtrip_psnr": sum(scores) / len(scores)})
    history.add_entry("train-codec", f"{codec.config.mode} codec", round(sum(scores) / len(scores), 3))


def _train_denoiser(config: RunConfig, run: RunDirectory, history: HistoryLogger, progress: bool):
    scenes, captions = _load_corpus(config, run)
    codec = _load_codec(config, run)
    vocab = build_vocab(config)
    denoiser = train_denoiser(scenes, captions, config.denoiser_config(), config.schedule_obj(),
                              config.training.steps, config.seeds()["denoiser"], vocab, codec,
                              training=config.training_config(), history=history, progress=progress)
    denoiser.save(run.path / "denoiser")
    _record_tree(run, run.path / "denoiser")
    run.write_json("vocab.json", vocab.to_dict())
    _save_table(run, loss_frame(denoiser.losses), "trace.csv")

    cameras = config.eval_cameras()
    prompt = assemble_prompt(captions[0], None, vocab)
    result = sample(denoiser, prompt, [camera_embedding(c) for c in cameras], denoiser.schedule,
                    config.schedule.sampling_steps, config.seeds()["sampling"],
                    latent_shape=codec.latent_shape(config.resolution))
    with torch.no_grad():
        _save_grid(run, list(codec.decode(torch.stack(result.latents)).unbind(0)), "samples.png")


def _invert(config: RunConfig, run: RunDirectory, history: HistoryLogger, progress: bool):
    scene = _load_scene(config, run)
    codec = _load_codec(config, run)
    denoiser, vocab = _load_denoiser(config, run)
    inv = config.inversion_config()
    settings = config.render_settings()
    cameras = config.eval_cameras()
    mode = config.inversion.mode
    if mode == "3d":
        z_star, trace = invert3d(scene, denoiser, codec, vocab, inv, render_settings=settings,
                                 history=history, progress=progress)
    elif mode == "2d":
        image = render(scene, cameras[0], settings)
        _save_grid(run, [image], "target.png", columns=1)
        z_star, trace = invert2d(image, denoiser, codec, vocab, inv, history=history, progress=progress)
    else:
        raise ConfigError("inversion.mode must be 3d or 2d", mode=mode)

    run.record_output(save_embedding(z_star, run.file(EMBEDDING_FILE), {"mode": mode}))
    _save_table(run, trace.to_frame(), "trace.csv")
    heldout = evaluate_embedding(z_star, scene, cameras, denoiser, codec, vocab, inv.template,
                                 seed=config.seeds()["eval"], camera_conditioning=inv.camera_conditioning,
                                 render_settings=settings)
    run.write_json("heldout.json", {"mode": mode, "heldout_loss": heldout,
                                    "adam": {"betas": list(inv.adam_betas), "eps": inv.adam_eps}})
    views = generate_views(z_star, cameras, denoiser, codec, vocab, config.schedule.sampling_steps,
                           config.seeds()["sampling"], template=inv.template)
    _save_grid(run, views, "views.png")
    history.add_entry("invert", f"{mode} inversion, held-out loss", round(heldout, 6))


def _snapshot_writer(run: RunDirectory, config: RunConfig):
    cameras = config.eval_cameras()
    settings = config.render_settings()

    def write(iteration, scene):
        _save_grid(run, [render(scene, cam, settings) for cam in cameras], f"snapshots/iter_{iteration:05d}.png")

    return write


def _initial_cloud(config: RunConfig):
    return random_splat_cloud(config.sds.initial_splats, derive_seed(config.seeds()["sds"], "init"),
                              extent=config.scene.extent, background=tuple(config.scene.background))


def _reconstruct(config: RunConfig, run: RunDirectory, history: HistoryLogger, progress: bool):
    z_star = _load_embedding(config.inputs.embedding_run, run)
    codec = _load_codec(config, run)
    denoiser, vocab = _load_denoiser(config, run)
    scene, trace = reconstruct(z_star, _initial_cloud(config), config.sds_config(), denoiser, codec, vocab,
                               template=config.inversion.template, on_snapshot=_snapshot_writer(run, config),
                               history=history, settings=config.render_settings(), progress=progress)
    _finish_scene(config, run, scene, trace)
    history.add_entry("reconstruct", f"{len(scene)} splats", round(float(trace["loss"].iloc[-1]), 6)
                      if len(trace) else None)


def _finish_scene(config: RunConfig, run: RunDirectory, scene, trace):
    run.record_output(save_scene(scene, run.file("scene.json")))
    _save_table(run, trace, "trace.csv")
    settings = config.render_settings()
    _save_grid(run, [render(scene, cam, settings) for cam in config.eval_cameras()], "renders.png")


def _edit(config: RunConfig, run: RunDirectory, history: HistoryLogger, progress: bool):
    z_star = _load_embedding(config.inputs.embedding_run, run)
    codec = _load_codec(config, run)
    denoiser, vocab = _load_denoiser(config, run)
    request = config.edit_request()
    outcome = edit_views(z_star, request, config.eval_cameras(), denoiser, codec, vocab,
                         steps=config.schedule.sampling_steps, record_maps=True)
    _save_grid(run, outcome.images, "views.png")
    for i, image in enumerate(outcome.images):
        run.record_output(save_png(image, run.file(f"views/view_{i:02d}.png")))
    run.record_output(save_embedding(outcome.z_edit, run.file("embedding_edit.iv3d")))
    for path in export_attention_maps(outcome.maps, run.path / "attention"):
        run.record_output(path)
    run.write_json("request.json", {
        **asdict(request),
        "template": list(outcome.template),
        "controlled_positions": sorted(outcome.control.token_indices) if outcome.control else [],
        "untrained": outcome.untrained,
    })
    history.add_entry("edit", f"lam={request.lam} style={list(request.style_words)} c={request.attention_factor}",
                      len(outcome.images))
    if config.edit.reconstruct:
        scene, trace = personalize_scene(z_star, request, config.sds_config(), _initial_cloud(config), denoiser,
                                         codec, vocab, on_snapshot=_snapshot_writer(run, config), history=history,
                                         progress=progress)
        _finish_scene(config, run, scene, trace)


def _ablate(config: RunConfig, run: RunDirectory, history: HistoryLogger, progress: bool):
    scene = _load_scene(config, run)
    codec = _load_codec(config, run)
    denoiser, vocab = _load_denoiser(config, run)
    overrides = {"steps": config.ablation.steps} if config.ablation.steps else {}
    seeds = [derive_seed(config.seed, f"ablation-{s}") for s in config.ablation.seeds]
    result = ablate_embedding_size(config.ablation.sizes, config.inversion_config(**overrides), scene, denoiser,
                                   codec, vocab, config.eval_cameras(), seeds=seeds,
                                   sampling_steps=config.schedule.sampling_steps, workers=config.ablation.workers,
                                   settings=config.render_settings(), history=history)
    _save_table(run, result.table, "ablation.csv")
    _save_table(run, result.curves, "ablation_curves.csv")


def _ablation_rows(table: pd.DataFrame) -> list:
    return [{"num_vectors": int(r.num_vectors), "seed": int(r.seed), "final_loss": float(r.final_loss),
             "heldout_loss": float(r.heldout_loss), "heldout_psnr": float(r.heldout_psnr)}
            for r in table.itertuples(index=False)]


def _eval(config: RunConfig, run: RunDirectory, history: HistoryLogger, progress: bool):
    if not config.inputs.target_run:
        raise MissingArtifactError("eval needs inputs.target_run (--target)")
    target_dir = Path(config.inputs.target_run)
    target = RunDirectory.open(target_dir)
    run.record_input("target", target_dir)
    source = RunConfig.from_dict(target.manifest.config)
    # keyed by the evaluated run so a replay of this eval hashes identically
    report = MetricsReport(run_id=target.manifest.run_id, source_run=target.manifest.command)
    settings = source.render_settings()
    cameras = source.eval_cameras()

    for trace_path in sorted(target_dir.glob("*trace.csv")):
        trace = read_table(trace_path)
        if "loss" in trace.columns:
            report.loss_traces[trace_path.stem] = [float(v) for v in trace["loss"]]
            _save_figure(run, loss_trace_figure(trace, title=trace_path.stem), f"figures/{trace_path.stem}.json")

    has_embedding = (target_dir / EMBEDDING_FILE).exists()
    has_scene = target.manifest.command in ("reconstruct", "edit") and (target_dir / "scene.json").exists()
    if (has_embedding and source.inputs.denoiser_run) or has_scene:
        scene = _load_scene(source)
        codec = _load_codec(source)
        targets = [render(scene, cam, settings) for cam in cameras]
        if has_embedding:
            denoiser, vocab = _load_denoiser(source)
            z_star = _load_embedding(target_dir)
            steps, seed = source.schedule.sampling_steps, config.seeds()["eval"]
            template = source.inversion.template
            views = generate_views(z_star, cameras, denoiser, codec, vocab, steps, seed, template=template)
            fresh = init_pseudo_token(z_star.init_word or source.inversion.init_word, z_star.num_vectors, vocab,
                                      name=z_star.name)
            baseline = generate_views(fresh, cameras, denoiser, codec, vocab, steps, seed, template=template)
            report.notes["baseline_psnr"] = sum(psnr(v, t) for v, t in zip(baseline, targets)) / len(targets)
            report.untrained = not denoiser.trained
            embeddings = [(z_star, source)]
            if config.inputs.embedding_run:
                other = RunConfig.from_dict(RunDirectory.open(config.inputs.embedding_run).manifest.config)
                embeddings.append((_load_embedding(config.inputs.embedding_run, run, "comparison"), other))
            for z, cfg in embeddings:
                loss = evaluate_embedding(z, scene, cameras, denoiser, codec, vocab, cfg.inversion.template,
                                          seed=seed, render_settings=settings)
                report.notes[f"heldout_loss_{cfg.inversion.mode}"] = loss
        else:
            reconstructed = load_scene(target_dir / "scene.json")
            views = [render(reconstructed, cam, settings) for cam in cameras]
        report.per_view_psnr = [psnr(v, t) for v, t in zip(views, targets)]
        with torch.no_grad():
            report.latent_mse = sum(latent_mse(codec.encode(v.double()), codec.encode(t))
                                    for v, t in zip(views, targets)) / len(targets)
        _save_grid(run, views + targets, "comparison.png", columns=len(cameras))
        _save_figure(run, psnr_figure(report.per_view_psnr, report.notes.get("baseline_psnr")), "figures/psnr.json")

    ablation = read_table(target_dir / "ablation.csv")
    if not ablation.empty:
        report.ablation = _ablation_rows(ablation)
        _save_figure(run, ablation_bar_figure(ablation), "figures/ablation.json")
        _save_figure(run, ablation_curves_figure(read_table(target_dir / "ablation_curves.csv")),
                     "figures/ablation_curves.json")

    audit = audit_run(target_dir)
    report.notes["target_health"] = audit["score"]
    _save_table(run, audit["details_table"], "audit.csv")

    doc = validate_metrics_report(report.to_dict())
    run.write_json("metrics.json", doc)
    insights = run.file("insights.md")
    insights.write_text("\n\n".join(generate_insights(doc)) + "\n")
    run.record_output(insights)
    history.add_entry("eval", f"report for {target.manifest.run_id}", doc["mean_psnr"])


HANDLERS = {
    "gen-data": _gen_data,
    "train-codec": _train_codec,
    "train-denoiser": _train_denoiser,
    "invert": _invert,
    "reconstruct": _reconstruct,
    "edit": _edit,
    "ablate": _ablate,
    "eval": _eval,
}


# --- entry -----------------------------------------------------------------

def flag_overrides(command: str, flags: dict) -> list:
    """Translates dedicated CLI flags into dotted overrides."""
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    overrides = []
    if "seed" in flags:
        overrides.append(f"seed={int(flags['seed'])}")
    if "resolution" in flags:
        overrides.append(f"cameras.resolution={parse_resolution(flags['resolution'])}")
    if "lam" in flags:
        overrides.append(f"edit.lam={float(flags['lam'])!r}")
    if "attention_factor" in flags:
        overrides.append(f"edit.attention_factor={float(flags['attention_factor'])!r}")
    if "loss_mode" in flags:
        overrides.append(f"inversion.loss_mode={flags['loss_mode']}")
    if "lr" in flags:
        if command not in LR_KEYS:
            raise UsageError(f"--lr has no meaning for {command}", command=command)
        overrides.append(f"{LR_KEYS[command]}={float(flags['lr'])!r}")
    for flag, key in INPUT_FLAGS.items():
        if flag in flags:
            overrides.append(f"inputs.{key}={json.dumps(str(flags[flag]))}")
    return overrides


def cli_run(command: str, config_path=None, overrides=(), out_dir="runs", run_id: str = None, flags: dict = None,
            progress: bool = False) -> int:
    """
    Runs one pipeline command in a fresh run directory.

    Returns:
        int: 0 on success, the error's exit code otherwise.
    """
    now = datetime.datetime.now()
    run_id = run_id or f"{command}-{now:%Y%m%d-%H%M%S-%f}"
    run, history = None, HistoryLogger()
    try:
        if command not in HANDLERS:
            raise UsageError(f"unknown command '{command}'", command=command, known=list(COMMANDS))
        config = load_config(config_path, list(overrides) + flag_overrides(command, flags))
        run = RunDirectory.create(out_dir, command, config.to_dict(), config.seeds(), run_id=run_id,
                                  timestamp=now.isoformat(timespec="seconds"))
        history.add_entry("load", f"config {config_path or '(defaults)'} with {len(overrides)} overrides", run_id)
        logger.info("%s: run directory %s", command, run.path)
        HANDLERS[command](config, run, history, progress)
        history.add_entry(command, "finished", len(run.manifest.outputs))
        history.save(run.path / "history.csv")
        run.finish("ok")
        return 0
    except Invert3DError as e:
        logger.error("%s failed: %s %s", command, type(e).__name__, e.details)
        record = e.to_record()
    except Exception as e:
        logger.exception("%s failed unexpectedly", command)
        record = {"error": type(e).__name__, "exit_code": 1, "message": str(e), "details": {}}

    target = run.path if run is not None else error_directory(out_dir, run_id)
    target.mkdir(parents=True, exist_ok=True)
    (target / "error.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    if run is not None:
        history.add_entry(command, "failed", record["error"])
        history.save(run.path / "history.csv")
        run.finish("failed")
    return record["exit_code"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invert3d", description="Camera-conditioned 3D-to-text inversion pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", help="YAML config, or a manifest.json to replay a run")
        p.add_argument("--seed", type=int, help="Root seed")
        p.add_argument("--out-dir", default="runs", help="Parent folder of run directories")
        p.add_argument("--run-id", help="Run directory name (default: command and timestamp)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="Dotted config override, repeatable (e.g. inversion.steps=50)")
        p.add_argument("--resolution", help="Render resolution, 64 or HxW")
        p.add_argument("--lambda", dest="lam", type=float, help="Edit strength")
        p.add_argument("--attention-factor", type=float, help="Style-word attention factor c")
        p.add_argument("--loss-mode", choices=["epsilon_prediction", "latent_reconstruction"])
        p.add_argument("--lr", type=float, help="Learning rate of the command's optimizer")
        for flag, key in INPUT_FLAGS.items():
            p.add_argument(f"--{flag}", help=f"Sets inputs.{key}")
        p.add_argument("--progress", action="store_true", help="Show progress bars")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    flags = {name: getattr(args, name) for name in ("seed", "resolution", "lam", "attention_factor", "loss_mode",
                                                    "lr", *INPUT_FLAGS)}
    return cli_run(args.command, args.config, args.override, args.out_dir, args.run_id, flags, args.progress)


if __name__ == "__main__":
    sys.exit(main())
