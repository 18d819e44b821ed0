
"""
Camera-conditioned text inversion and its single-image baseline.

Each iteration samples cameras, renders and encodes the views, draws a
timestep and noise, and updates only the pseudo-token vectors with Adam.
Everything else (denoiser, codec, vocabulary) stays frozen.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from modules.denoiser import add_noise, predict_noise, predict_x0
from modules.errors import ConfigError, NonFiniteError
from modules.history import loss_frame
from modules.renderer import RenderSettings, render
from modules.scene import CAMERA_DIM, Camera, camera_embedding, sample_cameras, stack_embeddings
from modules.text_embed import PseudoToken, assemble_prompt, init_pseudo_token

logger = logging.getLogger(__name__)

LOSS_MODES = ("epsilon_prediction", "latent_reconstruction")


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 600
    learning_rate: float = 5e-3
    views_per_iteration: int = 4
    loss_mode: str = "epsilon_prediction"
    seed: int = 0
    num_vectors: int = 32
    init_word: str = "object"
    token_name: str = "S*"
    template: tuple = ()  # empty means the bare pseudo-token
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    camera_conditioning: bool = True
    azimuth_range: tuple = (0.0, 360.0)
    elevation_range: tuple = (-30.0, 30.0)
    radius: float = 2.0
    fov_y: float = 49.1
    resolution: tuple = (64, 64)

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("inversion steps must be >= 1", steps=self.steps)
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0", learning_rate=self.learning_rate)
        if self.views_per_iteration < 1:
            raise ConfigError("views_per_iteration must be >= 1", views_per_iteration=self.views_per_iteration)
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}", loss_mode=self.loss_mode)

    def prompt_template(self) -> tuple:
        return tuple(self.template) or (self.token_name,)


@dataclass
class InversionTrace:
    losses: list = field(default_factory=list)
    cameras: list = field(default_factory=list)    # per step: list of Camera
    timesteps: list = field(default_factory=list)  # per step: list of int
    final_embedding: PseudoToken = None

    def __len__(self):
        return len(self.losses)

    def to_frame(self) -> pd.DataFrame:
        def joined(values):
            return ";".join(f"{v:.6f}" for v in values)

        return loss_frame(
            self.losses,
            azimuth=[joined(c.azimuth for c in cams) for cams in self.cameras],
            elevation=[joined(c.elevation for c in cams) for cams in self.cameras],
            timestep=[";".join(str(t) for t in ts) for ts in self.timesteps],
        )


def inversion_loss(denoiser, prompt, x0: torch.Tensor, cams: torch.Tensor, t, eps: torch.Tensor,
                   loss_mode: str = "epsilon_prediction") -> torch.Tensor:
    """
    epsilon_prediction: ||eps - eps_hat(x_t)||^2.
    latent_reconstruction: ||x0 - x0_hat||^2 with x0_hat the one-step denoised estimate.
    """
    x_t = add_noise(x0, eps, t, denoiser.schedule)
    eps_hat, _ = predict_noise(denoiser, x_t, t, prompt, cams)
    if loss_mode == "epsilon_prediction":
        return F.mse_loss(eps_hat, eps)
    return F.mse_loss(predict_x0(x_t, eps_hat, t, denoiser.schedule), x0)


def _camera_batch(cameras, conditioning: bool) -> torch.Tensor:
    cams = stack_embeddings([camera_embedding(c) for c in cameras])
    return cams if conditioning else torch.zeros(len(cameras), CAMERA_DIM)


def _optimize(view_source, denoiser, vocab, config: InversionConfig, init: PseudoToken = None,
              history=None, progress: bool = False):
    denoiser.freeze()
    token = init.clone() if init is not None else init_pseudo_token(
        config.init_word, config.num_vectors, vocab, name=config.token_name)
    param = torch.nn.Parameter(token.vectors.detach().clone().float())
    live = PseudoToken(token.name, param, True, token.init_word)
    template = config.prompt_template()
    optimizer = torch.optim.Adam([param], lr=config.learning_rate, betas=tuple(config.adam_betas),
                                 eps=config.adam_eps)
    gen = torch.Generator().manual_seed(config.seed)
    trace = InversionTrace()
    T = denoiser.schedule.T

    for step in tqdm(range(config.steps), desc="invert", disable=not progress):
        x0, cams, cameras = view_source(step)
        t = torch.randint(1, T + 1, (x0.shape[0],), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        prompt = assemble_prompt(template, live, vocab)
        loss = inversion_loss(denoiser, prompt, x0, cams, t, eps, config.loss_mode)
        if not torch.isfinite(loss):
            raise NonFiniteError("inversion loss is not finite", step=step + 1, timesteps=t.tolist(),
                                 loss=float(loss.detach()))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        trace.losses.append(float(loss.detach()))
        trace.cameras.append(list(cameras))
        trace.timesteps.append(t.tolist())
        if history is not None and (step + 1) % max(1, config.steps // 10) == 0:
            history.add_entry("invert", f"step {step + 1}", round(float(np.mean(trace.losses[-50:])), 6))

    meta = dict(token.metadata, seed=config.seed, steps=config.steps, loss_mode=config.loss_mode)
    z_star = PseudoToken(token.name, param.detach().clone(), True, token.init_word, meta)
    trace.final_embedding = z_star
    logger.info("inversion finished after %d steps, final loss %.5f", config.steps, trace.losses[-1])
    return z_star, trace


def invert3d(scene, denoiser, codec, vocab, config: InversionConfig, init: PseudoToken = None,
             render_settings: RenderSettings = None, history=None, progress: bool = False):
    """
    Camera-conditioned inversion of a splat scene.

    Returns:
        (z_star, trace)
    """
    settings = render_settings or RenderSettings()
    rng = np.random.default_rng(config.seed)

    def views(step):
        cameras = sample_cameras(rng, config.views_per_iteration, config.azimuth_range, config.elevation_range,
                                 config.radius, fov_y=config.fov_y, resolution=config.resolution)
        with torch.no_grad():
            images = torch.stack([render(scene, cam, settings) for cam in cameras])
            x0 = codec.encode(images).float()
        return x0, _camera_batch(cameras, config.camera_conditioning), cameras

    return _optimize(views, denoiser, vocab, config, init, history, progress)


def invert2d(image: torch.Tensor, denoiser, codec, vocab, config: InversionConfig, init: PseudoToken = None,
             history=None, progress: bool = False):
    """
    Single-image inversion: one fixed target, conditioned on the canonical
    identity pose.
    """
    height, width = image.shape[:2]
    camera = Camera.canonical(resolution=(height, width), radius=config.radius, fov_y=config.fov_y)
    with torch.no_grad():
        x0 = codec.encode(image).float()[None]
    cams = stack_embeddings([camera_embedding(camera)])

    def views(step):
        return x0, cams, [camera]

    return _optimize(views, denoiser, vocab, config, init, history, progress)


def evaluate_embedding(z: PseudoToken, scene, cameras, denoiser, codec, vocab, template=None, seed: int = 0,
                       timesteps=None, camera_conditioning: bool = True,
                       loss_mode: str = "epsilon_prediction", render_settings: RenderSettings = None) -> float:
    """
    Mean inversion loss of `z` on the given (held-out) cameras, with a fixed
    timestep grid and a seeded noise draw shared across calls.
    """
    settings = render_settings or RenderSettings()
    T = denoiser.schedule.T
    if timesteps is None:
        timesteps = [max(1, round(T * f)) for f in (0.1, 0.3, 0.5, 0.7, 0.9)]
    template = tuple(template or (z.name,))
    gen = torch.Generator().manual_seed(seed)
    losses = []
    with torch.no_grad():
        prompt = assemble_prompt(template, z, vocab)
        images = torch.stack([render(scene, cam, settings) for cam in cameras])
        x0 = codec.encode(images).float()
        cams = _camera_batch(cameras, camera_conditioning)
        for t in timesteps:
            eps = torch.randn(x0.shape, generator=gen)
            losses.append(float(inversion_loss(denoiser, prompt, x0, cams, t, eps, loss_mode)))
    return float(np.mean(losses))
