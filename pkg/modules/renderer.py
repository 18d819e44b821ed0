
"""
Differentiable splat rasterizer.

Each splat is projected to a 2D Gaussian footprint (EWA-style linearized
perspective), evaluated at pixel centers, depth sorted, and alpha
composited front to back over a constant background.
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from modules.errors import ConfigError
from modules.scene import Camera, Scene, SplatParams

# Image: torch tensor (height, width, 3), RGB in [0, 1]


@dataclass(frozen=True)
class RenderSettings:
    alpha_max: float = 0.999
    cov_eps: float = 1e-6
    near: float = 0.01
    dtype: torch.dtype = torch.float64


DEFAULT_SETTINGS = RenderSettings()


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """(N, 4) quaternions (w, x, y, z), normalized here, to (N, 3, 3) rotations."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
        2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
        2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(*q.shape[:-1], 3, 3)


def canonical_order(params: SplatParams, camera: Camera) -> np.ndarray:
    """
    Front-to-back order of the splats.

    Primary key is camera-space depth. Splats at exactly equal depth are ordered
    by their parameters (position, scale, rotation, color, opacity, compared
    lexicographically), never by list position, so two coincident splats always
    composite the same way round whichever one is listed first.
    """
    values = [t.detach().cpu().double().numpy().reshape(len(params), -1) for t in params.tensors()]
    c2w = camera.camera_to_world()
    depth = -((values[0] - c2w[:3, 3]) @ c2w[:3, :3])[:, 2]
    keys = [col for block in reversed(values) for col in block.T[::-1]]
    return np.lexsort(keys + [depth])


def render_params(params: SplatParams, background, camera: Camera,
                  settings: RenderSettings = DEFAULT_SETTINGS) -> torch.Tensor:
    """Differentiable render of splat tensors. Returns (H, W, 3)."""
    dtype, device = params.position.dtype, params.position.device
    height, width = camera.resolution
    bg = torch.as_tensor(background, dtype=dtype, device=device)
    if len(params) == 0:
        return bg.expand(height, width, 3).clone()

    order = torch.as_tensor(canonical_order(params, camera), device=device)
    p = params.permute(order)

    c2w = torch.as_tensor(camera.camera_to_world(), dtype=dtype, device=device)
    rot_cw, eye = c2w[:3, :3], c2w[:3, 3]
    p_cam = (p.position - eye) @ rot_cw
    depth = -p_cam[:, 2]
    visible = depth > settings.near
    # keeps gradients finite for skipped splats
    d = torch.where(visible, depth, torch.ones_like(depth))

    f = camera.focal()
    x, y = p_cam[:, 0], p_cam[:, 1]
    u = f * x / d + 0.5 * width
    v = -f * y / d + 0.5 * height

    rot = quaternion_to_matrix(p.rotation)
    m = rot * p.scale[:, None, :]
    cov_world = m @ m.transpose(1, 2)
    cov_cam = rot_cw.T @ cov_world @ rot_cw
    zero = torch.zeros_like(d)
    jac = torch.stack([
        torch.stack([f / d, zero, f * x / d ** 2], dim=-1),
        torch.stack([zero, -f / d, -f * y / d ** 2], dim=-1),
    ], dim=1)
    cov2d = jac @ cov_cam @ jac.transpose(1, 2)
    a = cov2d[:, 0, 0] + settings.cov_eps
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + settings.cov_eps
    det = a * c - b * b

    xs = torch.arange(width, dtype=dtype, device=device) + 0.5
    ys = torch.arange(height, dtype=dtype, device=device) + 0.5
    dx = xs[None, None, :] - u[:, None, None]
    dy = ys[None, :, None] - v[:, None, None]
    power = -0.5 * (c[:, None, None] * dx * dx - 2.0 * b[:, None, None] * dx * dy
                    + a[:, None, None] * dy * dy) / det[:, None, None]
    alpha = p.opacity[:, None, None] * torch.exp(power)
    alpha = alpha.clamp(0.0, settings.alpha_max)
    alpha = torch.where(visible[:, None, None], alpha, torch.zeros_like(alpha))

    transmit = torch.cumprod(1.0 - alpha, dim=0)
    before = torch.cat([torch.ones_like(alpha[:1]), transmit[:-1]], dim=0)
    weights = alpha * before
    image = torch.einsum("nhw,nc->hwc", weights, p.color) + transmit[-1][..., None] * bg
    return image.clamp(0.0, 1.0)


def render(scene: Scene, camera: Camera, settings: RenderSettings = DEFAULT_SETTINGS) -> torch.Tensor:
    with torch.no_grad():
        return render_params(scene.to_params(settings.dtype), scene.background, camera, settings)


def render_with_gradients(scene: Scene, camera: Camera, pixel_loss_gradient,
                          settings: RenderSettings = DEFAULT_SETTINGS) -> SplatParams:
    """
    Chains dL/dpixel through the compositing formula.

    Returns:
        SplatParams: dL/d(position, scale, rotation, color, opacity) per splat.
    """
    params = scene.to_params(settings.dtype).requires_grad_()
    grad_out = torch.as_tensor(np.asarray(pixel_loss_gradient), dtype=settings.dtype)
    expected = (*camera.resolution, 3)
    if tuple(grad_out.shape) != expected:
        raise ConfigError("pixel_loss_gradient shape must match the render",
                          expected=expected, got=tuple(grad_out.shape))
    if len(params) == 0:
        return params.detach()
    image = render_params(params, scene.background, camera, settings)
    grads = torch.autograd.grad(image, params.tensors(), grad_outputs=grad_out, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, params.tensors())]
    return SplatParams(*grads)


# --- image persistence -----------------------------------------------------

def to_uint8(image: torch.Tensor) -> np.ndarray:
    array = image.detach().cpu().double().clamp(0.0, 1.0).numpy()
    return np.round(array * 255.0).astype(np.uint8)


def save_png(image: torch.Tensor, path) -> Path:
    path = Path(path)
    PILImage.fromarray(to_uint8(image)).save(path)
    return path


def image_grid(images, columns: int = 4) -> torch.Tensor:
    if not images:
        raise ConfigError("image grid needs at least one image")
    height, width, _ = images[0].shape
    rows = -(-len(images) // columns)
    cols = min(columns, len(images))
    grid = torch.zeros(rows * height, cols * width, 3, dtype=images[0].dtype)
    for i, img in enumerate(images):
        r, c = divmod(i, columns)
        grid[r * height:(r + 1) * height, c * width:(c + 1) * width] = img.detach().cpu()
    return grid


def save_array(image: torch.Tensor, path) -> Path:
    path = Path(path)
    np.save(path, image.detach().cpu().numpy())
    return path
