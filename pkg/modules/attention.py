
"""
Cross-attention capture and re-weighting.

A control multiplies the attention weights of chosen prompt positions (key
columns) by a factor c. The default applies it after the softmax with no
renormalization; `mode="pre_softmax"` adds log(c) to the logits instead.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from modules.errors import ConfigError


@dataclass(frozen=True)
class AttentionControl:
    token_indices: frozenset = frozenset()
    factor: float = 1.0
    active: bool = True
    mode: str = "post_softmax"

    def __post_init__(self):
        object.__setattr__(self, "token_indices", frozenset(int(i) for i in self.token_indices))
        object.__setattr__(self, "factor", float(self.factor))
        if self.factor < 0:
            raise ConfigError("attention factor must be >= 0", factor=self.factor)
        if self.mode not in ("post_softmax", "pre_softmax"):
            raise ConfigError("attention control mode must be post_softmax or pre_softmax", mode=self.mode)
        if any(i < 0 for i in self.token_indices):
            raise ConfigError("attention control indices must be >= 0")

    def validate(self, num_keys: int):
        bad = sorted(i for i in self.token_indices if i >= num_keys)
        if bad:
            raise ConfigError("attention control indices out of prompt range", indices=bad, num_keys=num_keys)

    @property
    def is_noop(self) -> bool:
        return not self.active or not self.token_indices or self.factor == 1.0


@dataclass
class AttentionMap:
    """
    Cross-attention weights of one layer at one timestep, shaped
    (views, heads, queries, keys). `weights` are the softmax output; when a
    control was active, `controlled` holds the weights actually used.
    """
    layer: int
    timestep: int
    weights: torch.Tensor
    controlled: torch.Tensor = None

    @property
    def effective(self) -> torch.Tensor:
        return self.weights if self.controlled is None else self.controlled

    def row_sums(self) -> torch.Tensor:
        return self.weights.sum(dim=-1)


def _columns(control: AttentionControl, num_keys: int) -> torch.Tensor:
    control.validate(num_keys)
    return torch.tensor(sorted(control.token_indices), dtype=torch.long)


def apply_control(weights: torch.Tensor, control: AttentionControl) -> torch.Tensor:
    """Scales controlled key columns of post-softmax weights; other entries are untouched."""
    if control is None or control.is_noop:
        return weights
    cols = _columns(control, weights.shape[-1])
    out = weights.clone()
    out[..., cols] = weights[..., cols] * control.factor
    return out


def apply_control_to_logits(logits: torch.Tensor, control: AttentionControl) -> torch.Tensor:
    if control is None or control.is_noop:
        return logits
    cols = _columns(control, logits.shape[-1])
    shift = math.log(control.factor) if control.factor > 0 else float("-inf")
    out = logits.clone()
    out[..., cols] = logits[..., cols] + shift
    return out


def reweight_attention(attention_map: AttentionMap, control: AttentionControl) -> AttentionMap:
    return AttentionMap(attention_map.layer, attention_map.timestep,
                        apply_control(attention_map.weights, control))


@dataclass
class AttentionRecorder:
    """Per-call capture buffer. Never shared between calls."""
    timestep: int = 0
    enabled: bool = True
    maps: list = field(default_factory=list)

    def record(self, layer: int, weights: torch.Tensor, controlled: torch.Tensor = None):
        if self.enabled:
            self.maps.append(AttentionMap(layer, self.timestep, weights.detach().clone(),
                                          None if controlled is None else controlled.detach().clone()))


def export_attention_maps(maps, directory) -> list:
    """Writes one .npy array per (layer, timestep) into `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in maps:
        path = directory / f"layer{m.layer:02d}_t{m.timestep:04d}.npy"
        np.save(path, m.weights.cpu().numpy())
        paths.append(path)
        if m.controlled is not None:
            controlled = path.with_name(path.stem + "_controlled.npy")
            np.save(controlled, m.controlled.cpu().numpy())
            paths.append(controlled)
    return paths


def load_attention_maps(directory) -> list:
    maps = []
    for path in sorted(Path(directory).glob("layer*_t*.npy")):
        if path.stem.endswith("_controlled"):
            continue
        layer, timestep = path.stem.split("_")
        controlled = path.with_name(path.stem + "_controlled.npy")
        maps.append(AttentionMap(int(layer[5:]), int(timestep[1:]), torch.from_numpy(np.load(path)),
                                 torch.from_numpy(np.load(controlled)) if controlled.exists() else None))
    return maps
