
"""
The reference toy setup: one fixed scene, a small captioned corpus built
around it, a seeded vocabulary, and the codec / denoiser trained on them.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from modules.codec import Codec, train_codec
from modules.config import RunConfig, load_config
from modules.denoiser import Denoiser, train_denoiser
from modules.renderer import render
from modules.run_store import derive_seed
from modules.scene import DEFAULT_PALETTE, Scene, SceneSpec, make_synthetic_scene, sample_cameras
from modules.text_embed import DEFAULT_WORDS, Vocabulary

logger = logging.getLogger(__name__)

REFERENCE_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "reference.yaml"

COLOR_WORDS = {
    "red": DEFAULT_PALETTE[0],
    "green": DEFAULT_PALETTE[1],
    "blue": DEFAULT_PALETTE[2],
    "yellow": DEFAULT_PALETTE[3],
}


def reference_config(overrides=()) -> RunConfig:
    return load_config(REFERENCE_CONFIG, overrides)


def toy_config(overrides=()) -> RunConfig:
    """A few-second variant of the reference setup for tests and smoke runs."""
    base = [
        "cameras.resolution=[16, 16]",
        "cameras.eval_views=4",
        "scene.num_splats=6",
        "codec.patch_size=4",
        "codec.epochs=5",
        "codec.dataset_views=8",
        "denoiser.base_channels=16",
        "denoiser.text_dim=16",
        "schedule.sampling_steps=8",
        "training.steps=30",
        "training.views_per_scene=4",
        "training.corpus_scenes=2",
        "inversion.steps=12",
        "inversion.num_vectors=4",
        "inversion.views_per_iteration=2",
        "sds.iterations=6",
        "sds.initial_splats=8",
        "sds.snapshot_every=3",
        "ablation.sizes=[1, 2]",
        "ablation.seeds=[0]",
        "ablation.steps=6",
    ]
    return load_config(None, base + list(overrides))


def color_word(scene: Scene) -> str:
    """Palette word closest to the opacity-weighted mean splat color."""
    if len(scene) == 0:
        return "black"
    colors = np.array([s.color for s in scene.splats])
    weights = np.array([s.opacity for s in scene.splats]) + 1e-12
    mean = (colors * weights[:, None]).sum(axis=0) / weights.sum()
    return min(COLOR_WORDS, key=lambda w: float(np.sum((np.asarray(COLOR_WORDS[w]) - mean) ** 2)))


def build_vocab(config: RunConfig) -> Vocabulary:
    return Vocabulary.build(DEFAULT_WORDS, dim=config.denoiser.text_dim, seed=config.seeds()["vocab"])


def reference_scene(config: RunConfig) -> Scene:
    return make_synthetic_scene(config.scene_spec())


def build_corpus(config: RunConfig):
    """
    Returns (scenes, captions). Scene 0 is the reference scene; the rest are
    single-color clusters captioned with their color word.
    """
    scene = reference_scene(config)
    scenes, captions = [scene], [["a", "photo", "of", color_word(scene), "object"]]
    spec = config.scene_spec()
    words = list(COLOR_WORDS)
    root = config.seeds()["corpus"]
    for i in range(1, config.training.corpus_scenes):
        word = words[(i - 1) % len(words)]
        variant = SceneSpec(num_splats=spec.num_splats, seed=derive_seed(root, f"scene{i}"),
                            palette=(COLOR_WORDS[word],), extent=spec.extent, scale_range=spec.scale_range,
                            opacity_range=spec.opacity_range, color_jitter=spec.color_jitter,
                            rotation_jitter=spec.rotation_jitter, background=spec.background)
        scenes.append(make_synthetic_scene(variant))
        captions.append(["a", "photo", "of", word, "cluster"])
    return scenes, captions


def codec_dataset(scenes, config: RunConfig, seed: int) -> list:
    """Renders `codec.dataset_views` random views spread over the corpus."""
    rng = np.random.default_rng(seed)
    settings = config.render_settings()
    kwargs = config.camera_kwargs()
    views = []
    for i in range(config.codec.dataset_views):
        (camera,) = sample_cameras(rng, 1, **kwargs)
        views.append(render(scenes[i % len(scenes)], camera, settings))
    return views


def build_codec(config: RunConfig, scenes=None, progress: bool = False):
    """Returns (codec, losses); losses is empty for the orthonormal codec."""
    codec_config = config.codec_config()
    if codec_config.mode == "orthonormal":
        return Codec(codec_config), []
    scenes = scenes if scenes is not None else build_corpus(config)[0]
    seed = config.seeds()["codec"]
    result = train_codec(codec_dataset(scenes, config, seed), codec_config, config.codec.epochs, seed,
                         batch_size=config.codec.batch_size, progress=progress)
    return result.codec, result.losses


@dataclass
class ReferenceSetup:
    config: RunConfig
    vocab: Vocabulary
    codec: Codec
    denoiser: Denoiser
    scene: Scene
    scenes: list = field(default_factory=list)
    captions: list = field(default_factory=list)

    @property
    def eval_cameras(self) -> list:
        return self.config.eval_cameras()


def build_reference_setup(config: RunConfig = None, history=None, progress: bool = False) -> ReferenceSetup:
    """Builds and trains everything the inversion experiments need, deterministically."""
    config = config or reference_config()
    scenes, captions = build_corpus(config)
    vocab = build_vocab(config)
    codec, _ = build_codec(config, scenes, progress)
    denoiser = train_denoiser(scenes, captions, config.denoiser_config(), config.schedule_obj(),
                              config.training.steps, config.seeds()["denoiser"], vocab, codec,
                              training=config.training_config(), history=history, progress=progress)
    logger.info("reference setup ready: %d scenes, denoiser %s", len(scenes), denoiser.state_hash()[:12])
    return ReferenceSetup(config, vocab, codec, denoiser, scenes[0], scenes, captions)
