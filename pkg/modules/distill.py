
"""
Embedding-driven multi-view generation and score distillation into a splat scene.

Guidance happens in latent space: the render is encoded, noised and scored
by the frozen denoiser; the residual is chained back through the codec and
the renderer. The denoiser itself receives no gradient.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from modules.attention import AttentionControl
from modules.denoiser import add_noise, sample
from modules.errors import ConfigError, NonFiniteError
from modules.history import loss_frame
from modules.renderer import RenderSettings, render_params
from modules.scene import CAMERA_DIM, Camera, Scene, SplatParams, camera_embedding, sample_cameras
from modules.text_embed import PseudoToken, Vocabulary, assemble_prompt

logger = logging.getLogger(__name__)

WEIGHT_FNS = ("one_minus_alpha_bar", "constant")
MIN_SCALE = 1e-4


@dataclass(frozen=True)
class SDSConfig:
    iterations: int = 500
    scene_learning_rate: float = 1e-2
    timestep_range: tuple = ()  # empty means [0.02 T, 0.98 T]
    weight_fn: str = "one_minus_alpha_bar"
    seed: int = 0
    guidance_space: str = "latent"
    camera_conditioning: bool = True
    azimuth_range: tuple = (0.0, 360.0)
    elevation_range: tuple = (-30.0, 30.0)
    radius: float = 2.0
    fov_y: float = 49.1
    resolution: tuple = (64, 64)
    snapshot_every: int = 0
    initial_splats: int = 64

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0", iterations=self.iterations)
        if self.scene_learning_rate < 0:
            raise ConfigError("scene_learning_rate must be >= 0")
        if self.weight_fn not in WEIGHT_FNS:
            raise ConfigError(f"weight_fn must be one of {WEIGHT_FNS}", weight_fn=self.weight_fn)
        if self.guidance_space != "latent":
            raise ConfigError("only latent-space guidance is supported", guidance_space=self.guidance_space)

    def resolved_timesteps(self, T: int) -> tuple:
        if self.timestep_range:
            t_min, t_max = (int(t) for t in self.timestep_range)
        else:
            t_min, t_max = max(1, round(0.02 * T)), max(1, round(0.98 * T))
        if not 1 <= t_min <= t_max <= T:
            raise ConfigError("timestep_range must satisfy 1 <= t_min <= t_max <= T",
                              t_min=t_min, t_max=t_max, T=T)
        return t_min, t_max

    def weight(self, t: int, schedule) -> float:
        if self.weight_fn == "constant":
            return 1.0
        return 1.0 - schedule.alpha_bar_at(t)


# --- generation ------------------------------------------------------------

def _template(z_star: PseudoToken, template) -> tuple:
    return tuple(template) if template else (z_star.name,)


def generate_views_with_maps(z_star: PseudoToken, cameras, denoiser, codec, vocab: Vocabulary, steps: int,
                             seed: int, control: AttentionControl = None, template=None,
                             record_maps: bool = False):
    """
    Like `generate_views`, but also returns the raw SampleResult (latents,
    attention maps, untrained tag).
    """
    cameras = list(cameras)
    if not cameras:
        raise ConfigError("generate_views needs at least one camera")
    resolution = cameras[0].resolution
    if any(c.resolution != resolution for c in cameras):
        raise ConfigError("all cameras must share one resolution")
    prompt = assemble_prompt(_template(z_star, template), z_star, vocab)
    embeddings = [camera_embedding(c) for c in cameras]
    result = sample(denoiser, prompt, embeddings, denoiser.schedule, steps, seed, control,
                    latent_shape=codec.latent_shape(resolution), record_maps=record_maps)
    with torch.no_grad():
        images = list(codec.decode(torch.stack(result.latents)).unbind(0))
    return images, result


def generate_views(z_star: PseudoToken, cameras, denoiser, codec, vocab: Vocabulary, steps: int, seed: int,
                   control: AttentionControl = None, template=None) -> list:
    """Samples latents jointly for all cameras and decodes them to (H, W, 3) images."""
    images, _ = generate_views_with_maps(z_star, cameras, denoiser, codec, vocab, steps, seed, control, template)
    return images


# --- score distillation ----------------------------------------------------

def _sds_step(params: SplatParams, background, camera: Camera, prompt, t: int, eps: torch.Tensor, weight: float,
              denoiser, codec, control=None, camera_conditioning: bool = True, settings: RenderSettings = None):
    """
    Returns (grads, residual_norm). `denoiser` only needs `.predict` and
    `.schedule`, so tests can pass oracle predictors.
    """
    settings = settings or RenderSettings()
    image = render_params(params, background, camera, settings)
    x0 = codec.encode(image)
    if eps.shape != x0.shape:
        raise ConfigError("noise sample must match the latent shape", eps=tuple(eps.shape), latent=tuple(x0.shape))
    eps = eps.to(x0.dtype)
    cam = camera_embedding(camera) if camera_conditioning else torch.zeros(CAMERA_DIM)
    with torch.no_grad():
        x_t = add_noise(x0.detach(), eps, t, denoiser.schedule)
        eps_hat, _ = denoiser.predict(x_t, t, prompt, cam, control)
        residual = eps_hat.to(x0.dtype) - eps
    tensors = params.tensors()
    grads = torch.autograd.grad(x0, tensors, grad_outputs=weight * residual, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, tensors)]
    return SplatParams(*grads), float(residual.norm())


def sds_gradient(scene: Scene, camera: Camera, z_star: PseudoToken, t: int, eps: torch.Tensor, weight: float,
                 denoiser, codec, vocab: Vocabulary, template=None, control: AttentionControl = None,
                 settings: RenderSettings = None) -> SplatParams:
    """
    Per-splat SDS gradient: weight * (eps_hat - eps) chained through dx0/dI
    and dI/dscene.
    """
    settings = settings or RenderSettings()
    params = scene.to_params(settings.dtype).requires_grad_()
    if len(params) == 0:
        return params.detach()
    prompt = assemble_prompt(_template(z_star, template), z_star, vocab)
    grads, _ = _sds_step(params, scene.background, camera, prompt, t, eps, weight, denoiser, codec, control,
                         settings=settings)
    return grads


def project_params(params: SplatParams):
    """In-place projection back onto valid splats; a no-op on already valid values."""
    with torch.no_grad():
        params.opacity.clamp_(0.0, 1.0)
        params.color.clamp_(0.0, 1.0)
        params.scale.clamp_(min=MIN_SCALE)
        norm = params.rotation.norm(dim=-1, keepdim=True)
        off = (norm - 1.0).abs() > 1e-9
        params.rotation.copy_(torch.where(off, params.rotation / norm.clamp(min=1e-12), params.rotation))


def sds_draws(config: SDSConfig, T: int, latent_shape, dtype=torch.float64):
    """
    Endless seeded stream of (camera, timestep, noise) draws, in the order
    `reconstruct` consumes them.
    """
    t_min, t_max = config.resolved_timesteps(T)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    while True:
        (camera,) = sample_cameras(rng, 1, config.azimuth_range, config.elevation_range, config.radius,
                                   fov_y=config.fov_y, resolution=config.resolution)
        t = int(torch.randint(t_min, t_max + 1, (1,), generator=gen))
        yield camera, t, torch.randn(tuple(latent_shape), generator=gen, dtype=dtype)


def reconstruct(z_star: PseudoToken, initial: Scene, config: SDSConfig, denoiser, codec, vocab: Vocabulary,
                control: AttentionControl = None, template=None, on_snapshot=None, history=None,
                settings: RenderSettings = None, progress: bool = False):
    """
    SDS optimization of splat parameters from the embedding.

    Returns:
        (Scene, pd.DataFrame): final scene and the per-iteration trace
        (step, loss = residual norm, timestep, azimuth, elevation).
    """
    settings = settings or RenderSettings()
    if config.iterations == 0 or len(initial) == 0:
        return initial, loss_frame([], timestep=[], azimuth=[], elevation=[])

    T = denoiser.schedule.T
    prompt = assemble_prompt(_template(z_star, template), z_star, vocab)
    params = SplatParams(*(t.detach().clone() for t in initial.to_params(settings.dtype).tensors()))
    params.requires_grad_()
    optimizer = torch.optim.Adam(params.tensors(), lr=config.scene_learning_rate)
    draws = sds_draws(config, T, codec.latent_shape(config.resolution), settings.dtype)

    norms, timesteps, azimuths, elevations = [], [], [], []
    for it in tqdm(range(config.iterations), desc="reconstruct", disable=not progress):
        camera, t, eps = next(draws)
        grads, rnorm = _sds_step(params, initial.background, camera, prompt, t, eps, config.weight(t, denoiser.schedule),
                                 denoiser, codec, control, config.camera_conditioning, settings)
        if not all(torch.isfinite(g).all() for g in grads.tensors()):
            raise NonFiniteError("SDS gradient is not finite", iteration=it + 1, timestep=t,
                                 azimuth=camera.azimuth, elevation=camera.elevation)
        for p, g in zip(params.tensors(), grads.tensors()):
            p.grad = g
        optimizer.step()
        project_params(params)

        norms.append(rnorm)
        timesteps.append(t)
        azimuths.append(camera.azimuth)
        elevations.append(camera.elevation)
        if on_snapshot is not None and config.snapshot_every and (it + 1) % config.snapshot_every == 0:
            on_snapshot(it + 1, params.to_scene(initial.background))
        if history is not None and (it + 1) % max(1, config.iterations // 10) == 0:
            history.add_entry("reconstruct", f"iteration {it + 1}", round(float(np.mean(norms[-50:])), 6))

    final = params.to_scene(initial.background)
    logger.info("reconstruction finished after %d iterations, final residual norm %.5f", config.iterations, norms[-1])
    return final, loss_frame(norms, timestep=timesteps, azimuth=azimuths, elevation=elevations)


def residual_trend(trace: pd.DataFrame, fraction: float = 0.1) -> tuple:
    """Mean residual norm over the first and last `fraction` of iterations."""
    k = max(1, int(len(trace) * fraction))
    return float(trace["loss"].iloc[:k].mean()), float(trace["loss"].iloc[-k:].mean())
