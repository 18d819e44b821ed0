
"""
Latent codec E(.) and its decoder.

Two modes:
  - orthonormal: non-overlapping patches projected by a fixed orthonormal
    basis. Exactly invertible and an isometry.
  - learned: a small convolutional autoencoder (mean-only, no sampling).

Images are (H, W, 3) tensors; latents are (C, H/f, W/f) tensors, where f is
the patch size. A leading batch dimension is accepted on both.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from modules.errors import ConfigError, MissingArtifactError, UsageError
from modules.run_store import tensor_hash

logger = logging.getLogger(__name__)

BASIS_SEED = 20240229


@dataclass(frozen=True)
class CodecConfig:
    mode: str = "orthonormal"
    patch_size: int = 8
    latent_channels: int = 0  # 0 selects the mode default
    hidden_channels: int = 32
    learning_rate: float = 2e-3

    def __post_init__(self):
        if self.mode not in ("orthonormal", "learned"):
            raise ConfigError("codec mode must be 'orthonormal' or 'learned'", mode=self.mode)
        if self.patch_size < 1 or self.patch_size & (self.patch_size - 1):
            raise ConfigError("patch_size must be a power of two", patch_size=self.patch_size)
        rank = 3 * self.patch_size ** 2
        if self.latent_channels == 0:
            object.__setattr__(self, "latent_channels", rank if self.mode == "orthonormal" else 4)
        if self.mode == "orthonormal" and self.latent_channels != rank:
            raise ConfigError("orthonormal codec needs latent_channels = 3 * patch_size^2",
                              latent_channels=self.latent_channels, expected=rank)

    def latent_shape(self, resolution) -> tuple:
        height, width = resolution
        if height % self.patch_size or width % self.patch_size:
            raise ConfigError("image size must be divisible by the patch size",
                              resolution=tuple(resolution), patch_size=self.patch_size)
        return (self.latent_channels, height // self.patch_size, width // self.patch_size)


def orthonormal_basis(dim: int, dtype=torch.float64) -> torch.Tensor:
    """Fixed seeded orthonormal matrix (rows are basis vectors)."""
    gen = torch.Generator().manual_seed(BASIS_SEED)
    gauss = torch.randn(dim, dim, generator=gen, dtype=torch.float64)
    q, r = torch.linalg.qr(gauss)
    # sign fix makes the factorization unique
    q = q * torch.sign(torch.diagonal(r))[None, :]
    return q.T.contiguous().to(dtype)


class ConvAutoencoder(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        hidden = config.hidden_channels
        levels = config.patch_size.bit_length() - 1
        enc = [nn.Conv2d(3, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(levels):
            enc += [nn.Conv2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(hidden, config.latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(config.latent_channels, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(levels):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(hidden, 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def encode(self, x):
        return self.encoder(x)

    def decode(self, h):
        return self.decoder(h)

    def forward(self, x):
        return self.decode(self.encode(x))


class Codec:
    """Encoder/decoder pair. Differentiable in both modes."""

    def __init__(self, config: CodecConfig, network: ConvAutoencoder = None, seed: int = None):
        self.config = config
        self.seed = seed
        self.network = network
        self._basis = None
        if config.mode == "learned" and network is None:
            raise UsageError("learned codec needs a network; use train_codec or Codec.load")
        if network is not None:
            network.requires_grad_(False).eval()

    def basis(self, dtype) -> torch.Tensor:
        if self._basis is None:
            self._basis = orthonormal_basis(self.config.latent_channels)
        return self._basis.to(dtype)

    def latent_shape(self, resolution) -> tuple:
        return self.config.latent_shape(resolution)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        batched = image.dim() == 4
        x = image if batched else image[None]
        self.latent_shape(x.shape[1:3])
        x = x.permute(0, 3, 1, 2)
        if self.config.mode == "orthonormal":
            patches = F.pixel_unshuffle(x, self.config.patch_size)
            latent = torch.einsum("kc,bchw->bkhw", self.basis(x.dtype), patches)
        else:
            net_dtype = next(self.network.parameters()).dtype
            latent = self.network.encode(x.to(net_dtype)).to(x.dtype)
        return latent if batched else latent[0]

    def decode(self, latent: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        batched = latent.dim() == 4
        z = latent if batched else latent[None]
        if z.shape[1] != self.config.latent_channels:
            raise ConfigError("latent channel count does not match the codec",
                              got=z.shape[1], expected=self.config.latent_channels)
        if self.config.mode == "orthonormal":
            patches = torch.einsum("kc,bkhw->bchw", self.basis(z.dtype), z)
            x = F.pixel_shuffle(patches, self.config.patch_size)
        else:
            net_dtype = next(self.network.parameters()).dtype
            x = self.network.decode(z.to(net_dtype)).to(z.dtype)
        image = x.permute(0, 2, 3, 1)
        if clamp:
            image = image.clamp(0.0, 1.0)
        return image if batched else image[0]

    def state_hash(self) -> str:
        if self.network is None:
            return tensor_hash([self.basis(torch.float64)])
        return tensor_hash(list(self.network.state_dict().values()))

    # --- persistence ---

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"config": asdict(self.config), "seed": self.seed}
        if self.network is not None:
            torch.save(self.network.state_dict(), directory / "codec.pt")
        (directory / "codec.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "Codec":
        directory = Path(directory)
        manifest_path = directory / "codec.json"
        if not manifest_path.exists():
            raise MissingArtifactError("codec manifest not found", path=str(manifest_path))
        manifest = json.loads(manifest_path.read_text())
        config = CodecConfig(**manifest["config"])
        network = None
        if config.mode == "learned":
            weights = directory / "codec.pt"
            if not weights.exists():
                raise MissingArtifactError("codec weights not found", path=str(weights))
            network = ConvAutoencoder(config)
            network.load_state_dict(torch.load(weights, map_location="cpu"))
        return cls(config, network, seed=manifest.get("seed"))


def encode(image: torch.Tensor, codec: Codec) -> torch.Tensor:
    return codec.encode(image)


def decode(latent: torch.Tensor, codec: Codec) -> torch.Tensor:
    return codec.decode(latent)


@dataclass
class CodecTrainingResult:
    codec: Codec
    losses: list = field(default_factory=list)  # mean reconstruction MSE per epoch


def train_codec(dataset, config: CodecConfig, epochs: int, seed: int,
                batch_size: int = 16, progress: bool = False) -> CodecTrainingResult:
    """
    Fits the learned autoencoder to a list of (H, W, 3) images by pixel MSE.
    Deterministic given `seed`.
    """
    if config.mode != "learned":
        raise UsageError("train_codec only applies to the learned codec", mode=config.mode)
    if len(dataset) == 0:
        raise ConfigError("codec training needs at least one image")

    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    network = ConvAutoencoder(config).float()
    data = torch.stack([img.float() for img in dataset]).permute(0, 3, 1, 2).contiguous()
    config.latent_shape(data.shape[2:])
    optimizer = torch.optim.Adam(network.parameters(), lr=config.learning_rate)

    losses = []
    for epoch in tqdm(range(epochs), desc="train-codec", disable=not progress):
        perm = torch.randperm(len(data), generator=gen)
        total = 0.0
        for start in range(0, len(data), batch_size):
            batch = data[perm[start:start + batch_size]]
            loss = F.mse_loss(network(batch), batch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
        losses.append(total / len(data))
        if epoch % 50 == 0:
            logger.debug("codec epoch %d mse %.6f", epoch, losses[-1])
    logger.info("trained codec for %d epochs, final mse %.6f", epochs, losses[-1] if losses else float("nan"))
    return CodecTrainingResult(Codec(config, network, seed=seed), losses)
