
"""
Diffusion machinery: beta schedule, forward noising, a small camera- and
text-conditioned noise-prediction U-Net with inspectable cross-attention,
deterministic multi-view sampling, and toy training.

Timesteps are 1-based: t in [1, T].
"""
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from modules.attention import AttentionControl, AttentionRecorder, apply_control, apply_control_to_logits
from modules.errors import ConfigError, MissingArtifactError, NonFiniteError
from modules.renderer import RenderSettings, render
from modules.run_store import module_hash
from modules.scene import CAMERA_DIM, CameraEmbedding, camera_embedding, sample_cameras, scene_to_dict, stack_embeddings
from modules.text_embed import PromptEmbedding, Vocabulary, assemble_prompt

logger = logging.getLogger(__name__)


# --- schedule --------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    beta_start: float
    beta_end: float
    kind: str = "linear"

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def alpha_bar_at(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.alpha_bar[t - 1])

    def check_timestep(self, t):
        t = as_timesteps(t)
        t_min, t_max = int(t.min()), int(t.max())
        if t_min < 1 or t_max > self.T:
            raise ConfigError("timestep out of range", t_min=t_min, t_max=t_max, T=self.T)

    def to_dict(self) -> dict:
        return {"beta_start": self.beta_start, "beta_end": self.beta_end, "T": self.T, "kind": self.kind}


def make_schedule(beta_start: float = 0.00085, beta_end: float = 0.012, T: int = 1000,
                  kind: str = "linear") -> DiffusionSchedule:
    """
    Beta schedule from beta_start to beta_end over T steps.

    `linear` interpolates beta; `scaled_linear` interpolates sqrt(beta).
    Both hit the endpoints exactly.
    """
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError("betas must satisfy 0 < beta_start <= beta_end < 1",
                          beta_start=beta_start, beta_end=beta_end)
    if T < 1:
        raise ConfigError("T must be >= 1", T=T)
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "scaled_linear":
        beta = np.linspace(beta_start ** 0.5, beta_end ** 0.5, T, dtype=np.float64) ** 2
        beta[0], beta[-1] = beta_start, beta_end
    else:
        raise ConfigError("schedule kind must be linear or scaled_linear", kind=kind)
    if T == 1:
        beta[0] = beta_start
    return DiffusionSchedule(beta=beta, beta_start=float(beta_start), beta_end=float(beta_end), kind=kind)


def as_timesteps(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.asarray(t, dtype=np.int64)


def _coefficient(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    coef = torch.as_tensor(values[as_timesteps(t) - 1], dtype=like.dtype, device=like.device)
    while coef.dim() < like.dim():
        coef = coef.unsqueeze(-1)
    return coef


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t, schedule: DiffusionSchedule) -> torch.Tensor:
    """q-sample: sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps. `t` is an int or per-sample ints."""
    if x0.shape != eps.shape:
        raise ConfigError("x0 and eps shapes must match", x0=tuple(x0.shape), eps=tuple(eps.shape))
    schedule.check_timestep(t)
    alpha_bar = schedule.alpha_bar
    return _coefficient(np.sqrt(alpha_bar), t, x0) * x0 + _coefficient(np.sqrt(1.0 - alpha_bar), t, x0) * eps


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t, schedule: DiffusionSchedule) -> torch.Tensor:
    """One-step denoised estimate of x0."""
    alpha_bar = schedule.alpha_bar
    return (x_t - _coefficient(np.sqrt(1.0 - alpha_bar), t, x_t) * eps_hat) / _coefficient(np.sqrt(alpha_bar), t, x_t)


# --- network ---------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 32
    attention_heads: int = 2
    text_dim: int = 64
    camera_dim: int = CAMERA_DIM
    latent_channels: int = 192
    views_per_step: int = 4
    levels: int = 2
    camera_injection: str = "timestep"
    joint_views: bool = True
    attention_mode: str = "post_softmax"

    def __post_init__(self):
        if self.camera_dim != CAMERA_DIM:
            raise ConfigError(f"camera_dim must be {CAMERA_DIM}", camera_dim=self.camera_dim)
        if self.views_per_step < 1:
            raise ConfigError("views_per_step must be >= 1", views_per_step=self.views_per_step)
        if self.levels < 1:
            raise ConfigError("levels must be >= 1", levels=self.levels)
        if self.base_channels % self.attention_heads:
            raise ConfigError("base_channels must be divisible by attention_heads")
        if self.camera_injection not in ("timestep", "concat"):
            raise ConfigError("camera_injection must be timestep or concat", camera_injection=self.camera_injection)
        if self.attention_mode not in ("post_softmax", "pre_softmax"):
            raise ConfigError("attention_mode must be post_softmax or pre_softmax")

    @classmethod
    def full_scale(cls, **overrides) -> "DenoiserConfig":
        """320 base channels, 8 heads: the production-size network (too slow for CPU tests)."""
        return cls(**{"base_channels": 320, "attention_heads": 8, **overrides})


def _groups(channels: int) -> int:
    return math.gcd(channels, 8)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Latent queries attend to prompt vectors. Keys/values are shared by every view."""

    def __init__(self, channels: int, text_dim: int, heads: int, layer: int, mode: str):
        super().__init__()
        self.heads = heads
        self.layer = layer
        self.mode = mode
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(text_dim, channels, bias=False)
        self.to_v = nn.Linear(text_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, context, control: AttentionControl = None, recorder: AttentionRecorder = None):
        b, c, h, w = x.shape
        dh = c // self.heads
        tokens = self.norm(x).flatten(2).transpose(1, 2)                     # (B, HW, C)
        q = self.to_q(tokens).reshape(b, h * w, self.heads, dh).transpose(1, 2)
        k = self.to_k(context).reshape(-1, self.heads, dh).transpose(0, 1)  # (heads, L, dh)
        v = self.to_v(context).reshape(-1, self.heads, dh).transpose(0, 1)
        logits = torch.einsum("bhqd,hkd->bhqk", q, k) / math.sqrt(dh)
        base = logits.softmax(dim=-1)
        if self.mode == "pre_softmax" and control is not None and not control.is_noop:
            controlled = apply_control_to_logits(logits, control).softmax(dim=-1)
        else:
            controlled = apply_control(base, control)
        if recorder is not None:
            recorder.record(self.layer, base, None if controlled is base else controlled)
        out = torch.einsum("bhqk,hkd->bhqd", controlled, v)
        out = out.transpose(1, 2).reshape(b, h * w, c)
        return x + self.to_out(out).transpose(1, 2).reshape(b, c, h, w)


class ViewAttention(nn.Module):
    """Self-attention over the tokens of every view in the batch."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2).reshape(1, b * h * w, c)
        out, _ = self.attn(tokens, tokens, tokens, need_weights=False)
        return x + out.reshape(b, h * w, c).transpose(1, 2).reshape(b, c, h, w)


class NoiseUNet(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        base = config.base_channels
        emb_dim = 4 * base
        self.time_mlp = nn.Sequential(nn.Linear(base, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.camera_mlp = nn.Sequential(nn.Linear(config.camera_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        in_ch = config.latent_channels + (config.camera_dim if config.camera_injection == "concat" else 0)
        self.conv_in = nn.Conv2d(in_ch, base, 3, padding=1)

        heads, text_dim, mode = config.attention_heads, config.text_dim, config.attention_mode
        chans = [base * 2 ** i for i in range(config.levels)]
        layer = 0
        self.down_res, self.down_attn, self.down_sample = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        prev = base
        for i, ch in enumerate(chans):
            self.down_res.append(ResBlock(prev, ch, emb_dim))
            self.down_attn.append(CrossAttention(ch, text_dim, heads, layer, mode))
            layer += 1
            self.down_sample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1) if i < len(chans) - 1 else nn.Identity())
            prev = ch

        self.mid_res = ResBlock(prev, prev, emb_dim)
        self.mid_view = ViewAttention(prev, heads) if config.joint_views else None
        self.mid_attn = CrossAttention(prev, text_dim, heads, layer, mode)
        layer += 1

        self.up_res, self.up_attn = nn.ModuleList(), nn.ModuleList()
        for ch in reversed(chans):
            self.up_res.append(ResBlock(prev + ch, ch, emb_dim))
            self.up_attn.append(CrossAttention(ch, text_dim, heads, layer, mode))
            layer += 1
            prev = ch
        self.num_attention_layers = layer

        self.norm_out = nn.GroupNorm(_groups(base), base)
        self.conv_out = nn.Conv2d(base, config.latent_channels, 3, padding=1)

    def forward(self, x, t, context, cam, control=None, recorder=None):
        """
        Args:
            x: (V, C, h, w) noisy latents, one per view.
            t: (V,) integer timesteps.
            context: (L, d_text) prompt vectors shared by all views.
            cam: (V, 16) camera embeddings.
        """
        emb = self.time_mlp(timestep_embedding(t, self.config.base_channels).to(x.dtype))
        if self.config.camera_injection == "timestep":
            emb = emb + self.camera_mlp(cam)
        else:
            x = torch.cat([x, cam[:, :, None, None].expand(-1, -1, *x.shape[2:])], dim=1)

        h = self.conv_in(x)
        skips = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.down_sample):
            h = attn(res(h, emb), context, control, recorder)
            skips.append(h)
            h = down(h)
        h = self.mid_res(h, emb)
        if self.mid_view is not None:
            h = self.mid_view(h)
        h = self.mid_attn(h, context, control, recorder)
        for res, attn in zip(self.up_res, self.up_attn):
            skip = skips.pop()
            # odd sides halve with rounding up, so match the skip exactly
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = attn(res(torch.cat([h, skip], dim=1), emb), context, control, recorder)
        return self.conv_out(F.silu(self.norm_out(h)))


# --- denoiser container ----------------------------------------------------

@dataclass
class Denoiser:
    config: DenoiserConfig
    schedule: DiffusionSchedule
    network: NoiseUNet
    trained: bool = False
    seed: int = None
    corpus_hash: str = ""
    losses: list = field(default_factory=list)

    @classmethod
    def initialize(cls, config: DenoiserConfig, schedule: DiffusionSchedule, seed: int = 0) -> "Denoiser":
        torch.manual_seed(seed)
        return cls(config, schedule, NoiseUNet(config).float(), trained=False, seed=seed)

    def freeze(self) -> "Denoiser":
        self.network.requires_grad_(False).eval()
        return self

    def predict(self, x_t, t, prompt: PromptEmbedding, cams, control=None, recorder=None):
        return predict_noise(self, x_t, t, prompt, cams, control, recorder)

    def state_hash(self) -> str:
        return module_hash(self.network)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.network.state_dict(), directory / "denoiser.pt")
        manifest = {
            "config": asdict(self.config),
            "schedule": self.schedule.to_dict(),
            "seed": self.seed,
            "corpus_hash": self.corpus_hash,
            "trained": self.trained,
        }
        (directory / "denoiser.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "Denoiser":
        directory = Path(directory)
        manifest_path, weights = directory / "denoiser.json", directory / "denoiser.pt"
        for path in (manifest_path, weights):
            if not path.exists():
                raise MissingArtifactError("denoiser checkpoint incomplete", path=str(path))
        manifest = json.loads(manifest_path.read_text())
        config = DenoiserConfig(**manifest["config"])
        sched = manifest["schedule"]
        schedule = make_schedule(sched["beta_start"], sched["beta_end"], sched["T"], sched.get("kind", "linear"))
        network = NoiseUNet(config).float()
        network.load_state_dict(torch.load(weights, map_location="cpu"))
        return cls(config, schedule, network, trained=manifest.get("trained", True),
                   seed=manifest.get("seed"), corpus_hash=manifest.get("corpus_hash", ""))


def _camera_tensor(cams, views: int, dtype) -> torch.Tensor:
    if isinstance(cams, CameraEmbedding):
        cams = [cams]
    if isinstance(cams, torch.Tensor):
        cam = cams.to(dtype)
        cam = cam[None] if cam.dim() == 1 else cam
    else:
        cam = stack_embeddings(list(cams), dtype=dtype)
    if cam.shape[0] == 1 and views > 1:
        cam = cam.expand(views, -1)
    if cam.shape != (views, CAMERA_DIM):
        raise ConfigError("need one 16-dim camera embedding per view", got=tuple(cam.shape), views=views)
    return cam


def predict_noise(denoiser: Denoiser, x_t: torch.Tensor, t, prompt: PromptEmbedding, cams,
                  control: AttentionControl = None, recorder: AttentionRecorder = None):
    """
    eps prediction for one latent (C, h, w) or stacked views (V, C, h, w).

    Returns:
        (eps_hat, maps): eps_hat has the shape and dtype of `x_t`; maps is the
        list of AttentionMap captured during this call.
    """
    cfg = denoiser.config
    batched = x_t.dim() == 4
    x = x_t if batched else x_t[None]
    if x.shape[1] != cfg.latent_channels:
        raise ConfigError("latent channels do not match the denoiser", got=x.shape[1], expected=cfg.latent_channels)
    if prompt.vectors.shape[-1] != cfg.text_dim:
        raise ConfigError("prompt dimension does not match the denoiser", got=prompt.vectors.shape[-1],
                          expected=cfg.text_dim)
    views = x.shape[0]
    denoiser.schedule.check_timestep(t)
    t_vec = torch.as_tensor(np.broadcast_to(as_timesteps(t), (views,)).copy())
    if control is not None:
        control.validate(len(prompt))
    net_dtype = next(denoiser.network.parameters()).dtype
    cam = _camera_tensor(cams, views, net_dtype)
    if recorder is None:
        recorder = AttentionRecorder(enabled=False)
    recorder.timestep = int(as_timesteps(t).max())
    eps = denoiser.network(x.to(net_dtype), t_vec, prompt.vectors.to(net_dtype), cam, control, recorder)
    eps = eps.to(x_t.dtype)
    return (eps if batched else eps[0]), recorder.maps


# --- sampling --------------------------------------------------------------

@dataclass
class SampleResult:
    latents: list
    untrained: bool = False
    maps: list = field(default_factory=list)
    timesteps: list = field(default_factory=list)

    def __len__(self):
        return len(self.latents)

    def __iter__(self):
        return iter(self.latents)

    def __getitem__(self, i):
        return self.latents[i]


def sampling_timesteps(T: int, steps: int) -> list:
    """Descending, strided, unique timesteps starting at T; ends at 1 whenever steps > 1."""
    if not 1 <= steps <= T:
        raise ConfigError("sampling steps must lie in [1, T]", steps=steps, T=T)
    grid = np.unique(np.round(np.linspace(T, 1, steps)).astype(np.int64))
    return [int(t) for t in grid[::-1]]


def sample(denoiser: Denoiser, prompt: PromptEmbedding, cameras, schedule: DiffusionSchedule, steps: int,
           seed: int, control: AttentionControl = None, latent_shape=None, record_maps: bool = False) -> SampleResult:
    """
    Deterministic strided (eta = 0) sampling from pure noise, all views denoised
    jointly in one batch. Returns one latent per camera.
    """
    cameras = list(cameras)
    if not cameras:
        raise ConfigError("sampling needs at least one camera")
    if latent_shape is None:
        raise ConfigError("latent_shape is required for sampling")
    untrained = not denoiser.trained
    if untrained:
        warnings.warn("sampling from an untrained denoiser", RuntimeWarning, stacklevel=2)
        logger.warning("sampling from an untrained denoiser; output is tagged untrained")

    timesteps = sampling_timesteps(schedule.T, steps)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(len(cameras), *latent_shape, generator=gen, dtype=torch.float32)
    alpha_bar = schedule.alpha_bar
    maps = []
    with torch.no_grad():
        for i, t in enumerate(timesteps):
            recorder = AttentionRecorder(enabled=record_maps)
            eps, step_maps = predict_noise(denoiser, x, t, prompt, cameras, control, recorder)
            maps.extend(step_maps)
            ab_t = alpha_bar[t - 1]
            ab_prev = alpha_bar[timesteps[i + 1] - 1] if i + 1 < len(timesteps) else 1.0
            x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
            x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
    if not torch.isfinite(x).all():
        raise NonFiniteError("sampling produced non-finite latents", seed=seed, steps=steps)
    return SampleResult(latents=list(x.unbind(0)), untrained=untrained, maps=maps, timesteps=timesteps)


# --- training --------------------------------------------------------------

def corpus_hash(scenes, captions) -> str:
    doc = json.dumps({"scenes": [scene_to_dict(s) for s in scenes], "captions": [list(c) for c in captions]},
                     sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 2e-3
    views_per_scene: int = 16
    azimuth_range: tuple = (0.0, 360.0)
    elevation_range: tuple = (-30.0, 30.0)
    radius: float = 2.0
    fov_y: float = 49.1
    resolution: tuple = (64, 64)


def render_view_bank(scenes, training: TrainingConfig, codec, seed: int, settings: RenderSettings = None):
    """Renders and encodes a fixed bank of views per scene: latents (S, K, C, h, w) and cameras (S, K, 16)."""
    rng = np.random.default_rng(seed)
    settings = settings or RenderSettings()
    latents, cams = [], []
    for scene in scenes:
        cameras = sample_cameras(rng, training.views_per_scene, training.azimuth_range, training.elevation_range,
                                 training.radius, fov_y=training.fov_y, resolution=training.resolution)
        images = torch.stack([render(scene, cam, settings) for cam in cameras])
        with torch.no_grad():
            latents.append(codec.encode(images).float())
        cams.append(stack_embeddings([camera_embedding(c) for c in cameras]))
    return torch.stack(latents), torch.stack(cams)


def train_denoiser(scenes, captions, config: DenoiserConfig, schedule: DiffusionSchedule, steps: int, seed: int,
                   vocab: Vocabulary, codec, training: TrainingConfig = None, history=None,
                   progress: bool = False) -> Denoiser:
    """
    Minimizes E||eps - eps_hat(x_t, t, caption, camera)||^2 over random scenes,
    view groups and timesteps. Deterministic given `seed`.
    """
    scenes, captions = list(scenes), [list(c) for c in captions]
    if not scenes:
        raise ConfigError("denoiser training needs a non-empty corpus")
    if len(captions) != len(scenes):
        raise ConfigError("need one caption per scene", scenes=len(scenes), captions=len(captions))
    for caption in captions:
        for word in caption:
            vocab.index(word)
    if vocab.dim != config.text_dim:
        raise ConfigError("vocabulary dimension must equal text_dim", vocab=vocab.dim, text_dim=config.text_dim)
    training = training or TrainingConfig()

    denoiser = Denoiser.initialize(config, schedule, seed)
    denoiser.corpus_hash = corpus_hash(scenes, captions)
    latents, cams = render_view_bank(scenes, training, codec, seed)
    if latents.shape[2] != config.latent_channels:
        raise ConfigError("codec latent channels do not match the denoiser",
                          codec=latents.shape[2], denoiser=config.latent_channels)
    prompts = [assemble_prompt(c, None, vocab).vectors for c in captions]

    gen = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(denoiser.network.parameters(), lr=training.learning_rate)
    net = denoiser.network.train()
    group = min(config.views_per_step, training.views_per_scene)
    losses = []
    for step in tqdm(range(steps), desc="train-denoiser", disable=not progress):
        s = int(torch.randint(len(scenes), (1,), generator=gen))
        views = torch.randperm(training.views_per_scene, generator=gen)[:group]
        x0 = latents[s, views]
        t = torch.randint(1, schedule.T + 1, (group,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = add_noise(x0, eps, t, schedule)
        pred = net(x_t, t, prompts[s], cams[s, views])
        loss = F.mse_loss(pred, eps)
        if not torch.isfinite(loss):
            raise NonFiniteError("denoiser training loss is not finite", step=step + 1)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
        if history is not None and (step + 1) % max(1, steps // 10) == 0:
            history.add_entry("train-denoiser", f"step {step + 1}", round(float(np.mean(losses[-50:])), 6))

    denoiser.freeze()
    denoiser.trained = True
    denoiser.losses = losses
    logger.info("trained denoiser for %d steps on %d scenes, final loss %.5f",
                steps, len(scenes), losses[-1] if losses else float("nan"))
    return denoiser
