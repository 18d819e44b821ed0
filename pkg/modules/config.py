
"""
Run configuration: a YAML document mapped onto section dataclasses.

Every section is optional in the file; unknown keys are rejected. Dotted
overrides (`inversion.steps=50`) are applied to the raw document before
validation, with values parsed as YAML scalars.
"""
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from modules.codec import CodecConfig
from modules.denoiser import DenoiserConfig, TrainingConfig, make_schedule
from modules.distill import SDSConfig
from modules.errors import ConfigError, MissingArtifactError
from modules.inversion import InversionConfig
from modules.personalize import EditRequest
from modules.renderer import RenderSettings
from modules.run_store import derive_seed
from modules.scene import DEFAULT_PALETTE, SceneSpec, orbit_cameras

logger = logging.getLogger(__name__)

SEED_NAMES = ("vocab", "corpus", "codec", "denoiser", "inversion", "sds", "sampling", "edit", "eval")


@dataclass
class SceneSection:
    num_splats: int = 16
    seed: int = 0
    extent: float = 0.6
    palette: list = field(default_factory=lambda: [list(c) for c in DEFAULT_PALETTE])
    scale_range: list = field(default_factory=lambda: [0.08, 0.25])
    opacity_range: list = field(default_factory=lambda: [0.6, 0.95])
    color_jitter: float = 0.05
    rotation_jitter: float = 0.15
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class CamerasSection:
    resolution: list = field(default_factory=lambda: [64, 64])
    radius: float = 2.0
    fov_y: float = 49.1
    azimuth_range: list = field(default_factory=lambda: [0.0, 360.0])
    elevation_range: list = field(default_factory=lambda: [-30.0, 30.0])
    eval_views: int = 8
    eval_elevation: float = 15.0
    eval_start: float = 22.5


@dataclass
class RenderSection:
    alpha_max: float = 0.999
    cov_eps: float = 1e-6
    near: float = 0.01


@dataclass
class CodecSection:
    mode: str = "orthonormal"
    patch_size: int = 8
    latent_channels: int = 0
    hidden_channels: int = 32
    learning_rate: float = 2e-3
    epochs: int = 200
    dataset_views: int = 64
    batch_size: int = 16


@dataclass
class DenoiserSection:
    base_channels: int = 32
    attention_heads: int = 2
    text_dim: int = 64
    levels: int = 2
    views_per_step: int = 4
    camera_injection: str = "timestep"
    joint_views: bool = True
    attention_mode: str = "post_softmax"


@dataclass
class ScheduleSection:
    beta_start: float = 0.00085
    beta_end: float = 0.012
    T: int = 1000
    kind: str = "linear"
    sampling_steps: int = 50


@dataclass
class TrainingSection:
    steps: int = 2000
    learning_rate: float = 2e-3
    views_per_scene: int = 16
    corpus_scenes: int = 4


@dataclass
class InversionSection:
    mode: str = "3d"
    steps: int = 600
    learning_rate: float = 5e-3
    views_per_iteration: int = 4
    loss_mode: str = "epsilon_prediction"
    num_vectors: int = 32
    init_word: str = "object"
    token_name: str = "S*"
    template: list = field(default_factory=list)
    camera_conditioning: bool = True
    adam_betas: list = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8


@dataclass
class SDSSection:
    iterations: int = 500
    scene_learning_rate: float = 1e-2
    timestep_range: list = field(default_factory=list)
    weight_fn: str = "one_minus_alpha_bar"
    guidance_space: str = "latent"
    initial_splats: int = 64
    snapshot_every: int = 100


@dataclass
class EditSection:
    source_words: list = field(default_factory=list)
    target_words: list = field(default_factory=list)
    lam: float = 1.0
    style_words: list = field(default_factory=list)
    attention_factor: float = 2.0
    attention_mode: str = "post_softmax"
    reconstruct: bool = False


@dataclass
class AblationSection:
    sizes: list = field(default_factory=lambda: [1, 4, 8, 32])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    steps: int = 0  # 0 keeps inversion.steps
    workers: int = 1


@dataclass
class InputsSection:
    """Paths of earlier runs / artifacts a command reads. Empty means not given."""
    data_run: str = ""
    codec_run: str = ""
    denoiser_run: str = ""
    embedding_run: str = ""
    scene_path: str = ""
    target_run: str = ""


SECTIONS = {
    "scene": SceneSection,
    "cameras": CamerasSection,
    "render": RenderSection,
    "codec": CodecSection,
    "denoiser": DenoiserSection,
    "schedule": ScheduleSection,
    "training": TrainingSection,
    "inversion": InversionSection,
    "sds": SDSSection,
    "edit": EditSection,
    "ablation": AblationSection,
    "inputs": InputsSection,
}


def _section(cls, doc, name: str):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"config section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown keys in config section '{name}'", keys=unknown)
    return cls(**doc)


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneSection = field(default_factory=SceneSection)
    cameras: CamerasSection = field(default_factory=CamerasSection)
    render: RenderSection = field(default_factory=RenderSection)
    codec: CodecSection = field(default_factory=CodecSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    inversion: InversionSection = field(default_factory=InversionSection)
    sds: SDSSection = field(default_factory=SDSSection)
    edit: EditSection = field(default_factory=EditSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    inputs: InputsSection = field(default_factory=InputsSection)

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a mapping")
        unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
        if unknown:
            raise ConfigError("unknown top-level config keys", keys=unknown)
        seed = doc.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError("seed must be an integer", seed=seed)
        try:
            return cls(seed=seed, **{name: _section(s, doc.get(name), name) for name, s in SECTIONS.items()})
        except TypeError as e:
            raise ConfigError(f"invalid config value: {e}") from e

    def to_dict(self) -> dict:
        return asdict(self)

    def seeds(self) -> dict:
        return {name: derive_seed(self.seed, name) for name in SEED_NAMES}

    # --- builders for module configs ---

    @property
    def resolution(self) -> tuple:
        return tuple(int(v) for v in self.cameras.resolution)

    def scene_spec(self) -> SceneSpec:
        s = self.scene
        return SceneSpec(num_splats=s.num_splats, seed=s.seed, palette=tuple(tuple(c) for c in s.palette),
                         extent=s.extent, scale_range=tuple(s.scale_range), opacity_range=tuple(s.opacity_range),
                         color_jitter=s.color_jitter, rotation_jitter=s.rotation_jitter,
                         background=tuple(s.background))

    def render_settings(self) -> RenderSettings:
        return RenderSettings(alpha_max=self.render.alpha_max, cov_eps=self.render.cov_eps, near=self.render.near)

    def codec_config(self) -> CodecConfig:
        c = self.codec
        return CodecConfig(mode=c.mode, patch_size=c.patch_size, latent_channels=c.latent_channels,
                           hidden_channels=c.hidden_channels, learning_rate=c.learning_rate)

    def denoiser_config(self) -> DenoiserConfig:
        d = self.denoiser
        return DenoiserConfig(base_channels=d.base_channels, attention_heads=d.attention_heads, text_dim=d.text_dim,
                              latent_channels=self.codec_config().latent_channels,
                              views_per_step=d.views_per_step, levels=d.levels,
                              camera_injection=d.camera_injection, joint_views=d.joint_views,
                              attention_mode=d.attention_mode)

    def schedule_obj(self):
        s = self.schedule
        return make_schedule(s.beta_start, s.beta_end, s.T, s.kind)

    def camera_kwargs(self) -> dict:
        c = self.cameras
        return dict(azimuth_range=tuple(c.azimuth_range), elevation_range=tuple(c.elevation_range),
                    radius=c.radius, fov_y=c.fov_y, resolution=self.resolution)

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(learning_rate=self.training.learning_rate,
                              views_per_scene=self.training.views_per_scene, **self.camera_kwargs())

    def inversion_config(self, **overrides) -> InversionConfig:
        i = self.inversion
        kwargs = dict(steps=i.steps, learning_rate=i.learning_rate, views_per_iteration=i.views_per_iteration,
                      loss_mode=i.loss_mode, seed=self.seeds()["inversion"], num_vectors=i.num_vectors,
                      init_word=i.init_word, token_name=i.token_name, template=tuple(i.template),
                      adam_betas=tuple(i.adam_betas), adam_eps=i.adam_eps,
                      camera_conditioning=i.camera_conditioning, **self.camera_kwargs())
        kwargs.update(overrides)
        return InversionConfig(**kwargs)

    def sds_config(self, **overrides) -> SDSConfig:
        s = self.sds
        kwargs = dict(iterations=s.iterations, scene_learning_rate=s.scene_learning_rate,
                      timestep_range=tuple(s.timestep_range), weight_fn=s.weight_fn, seed=self.seeds()["sds"],
                      guidance_space=s.guidance_space, snapshot_every=s.snapshot_every,
                      initial_splats=s.initial_splats, camera_conditioning=self.inversion.camera_conditioning,
                      **self.camera_kwargs())
        kwargs.update(overrides)
        return SDSConfig(**kwargs)

    def edit_request(self) -> EditRequest:
        e = self.edit
        return EditRequest(source_words=tuple(e.source_words), target_words=tuple(e.target_words), lam=e.lam,
                           style_words=tuple(e.style_words), attention_factor=e.attention_factor,
                           seed=self.seeds()["edit"], attention_mode=e.attention_mode)

    def eval_cameras(self) -> list:
        c = self.cameras
        return orbit_cameras(c.eval_views, elevation=c.eval_elevation, radius=c.radius, start=c.eval_start,
                             fov_y=c.fov_y, resolution=self.resolution)


# --- loading ---------------------------------------------------------------

def _set_path(doc: dict, dotted: str, value):
    keys = dotted.split(".")
    if not all(keys):
        raise ConfigError("malformed override key", key=dotted)
    node = doc
    for key in keys[:-1]:
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        if not isinstance(child, dict):
            raise ConfigError("override path goes through a scalar", key=dotted)
        node = child
    node[keys[-1]] = value


def apply_overrides(doc: dict, overrides) -> dict:
    """Applies `key.path=value` strings in order; values are parsed as YAML."""
    doc = json.loads(json.dumps(doc or {}))
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError("override must look like key.path=value", override=item)
        try:
            value = yaml.safe_load(raw) if raw.strip() else ""
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse override value: {e}", override=item) from e
        _set_path(doc, key.strip(), value)
    return doc


def read_config_document(path) -> dict:
    """
    Reads a YAML config. A run manifest (JSON, itself valid YAML) is accepted
    too, in which case its resolved config is used.
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError("config file not found", path=str(path))
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}", path=str(path)) from e
    if isinstance(doc, dict) and {"run_id", "command", "config"} <= set(doc):
        logger.info("using the resolved config of run %s", doc["run_id"])
        return doc["config"]
    return doc


def load_config(path=None, overrides=()) -> RunConfig:
    doc = read_config_document(path) if path else {}
    config = RunConfig.from_dict(apply_overrides(doc, overrides))
    # builders validate value ranges
    config.codec_config()
    config.denoiser_config()
    return config


def parse_resolution(text: str) -> list:
    """'64' -> [64, 64]; '32x48' -> [32, 48] (height x width)."""
    parts = str(text).lower().split("x")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise ConfigError("resolution must look like 64 or 64x48", resolution=text) from None
    if len(values) == 1:
        values = values * 2
    if len(values) != 2 or min(values) < 1:
        raise ConfigError("resolution must look like 64 or 64x48", resolution=text)
    return values
