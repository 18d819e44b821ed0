
"""
Text-guided personalization of an inverted embedding.

An edit combines two independent knobs: embedding arithmetic
(z_edit = z* + lam * (pooled(target) - pooled(source))) and cross-attention
amplification of style words appended after the pseudo-token.
"""
import logging
from dataclasses import dataclass, field

import torch

from modules.attention import AttentionControl
from modules.distill import SDSConfig, generate_views_with_maps, reconstruct
from modules.errors import ConfigError
from modules.text_embed import PseudoToken, Vocabulary, edit_embedding, text_delta

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EditRequest:
    source_words: tuple = ()
    target_words: tuple = ()
    lam: float = 1.0
    style_words: tuple = ()
    attention_factor: float = 2.0
    seed: int = 0
    attention_mode: str = "post_softmax"

    def __post_init__(self):
        object.__setattr__(self, "source_words", tuple(self.source_words))
        object.__setattr__(self, "target_words", tuple(self.target_words))
        object.__setattr__(self, "style_words", tuple(self.style_words))
        if self.attention_factor < 0:
            raise ConfigError("attention_factor must be >= 0", attention_factor=self.attention_factor)
        if bool(self.source_words) != bool(self.target_words):
            raise ConfigError("source_words and target_words must be given together",
                              source=self.source_words, target=self.target_words)

    @property
    def is_trivial(self) -> bool:
        return not self.target_words and not self.style_words


@dataclass
class EditOutcome:
    images: list
    z_edit: PseudoToken
    template: tuple
    control: AttentionControl = None
    maps: list = field(default_factory=list)
    untrained: bool = False


def build_edit(z_star: PseudoToken, request: EditRequest, vocab: Vocabulary):
    """
    Returns (z_edit, template, control). The style words follow the N pseudo
    vectors in the prompt, so their key columns are N, N+1, ...
    """
    for word in request.source_words + request.target_words + request.style_words:
        vocab.index(word)
    if request.target_words:
        delta = text_delta(request.target_words, request.source_words, vocab)
    else:
        delta = torch.zeros(vocab.dim, dtype=z_star.vectors.dtype)
    z_edit = edit_embedding(z_star, delta, request.lam)
    template = (z_edit.name, *request.style_words)
    control = None
    if request.style_words:
        n = z_edit.num_vectors
        control = AttentionControl(frozenset(range(n, n + len(request.style_words))), request.attention_factor,
                                   mode=request.attention_mode)
    if request.is_trivial:
        logger.info("edit request has no target or style words")
    return z_edit, template, control


def edit_views(z_star: PseudoToken, request: EditRequest, cameras, denoiser, codec, vocab: Vocabulary,
               steps: int = 50, record_maps: bool = False) -> EditOutcome:
    cameras = list(cameras)
    if not cameras:
        raise ConfigError("personalization needs at least one camera")
    z_edit, template, control = build_edit(z_star, request, vocab)
    images, result = generate_views_with_maps(z_edit, cameras, denoiser, codec, vocab, steps, request.seed,
                                              control, template, record_maps)
    return EditOutcome(images, z_edit, template, control, result.maps, result.untrained)


def personalize_views(z_star: PseudoToken, request: EditRequest, cameras, denoiser, codec, vocab: Vocabulary,
                      steps: int = 50) -> list:
    """Edited multi-view images; `z_star` is not modified."""
    return edit_views(z_star, request, cameras, denoiser, codec, vocab, steps).images


def personalize_scene(z_star: PseudoToken, request: EditRequest, sds_config: SDSConfig, initial, denoiser, codec,
                      vocab: Vocabulary, on_snapshot=None, history=None, progress: bool = False):
    """
    Runs reconstruction from z_edit with the style-word attention control
    active in every denoiser call.

    Returns:
        (Scene, pd.DataFrame)
    """
    z_edit, template, control = build_edit(z_star, request, vocab)
    return reconstruct(z_edit, initial, sds_config, denoiser, codec, vocab, control=control, template=template,
                       on_snapshot=on_snapshot, history=history, progress=progress)
