
"""
Toy text encoder, pseudo-tokens, prompt assembly and embedding arithmetic.

The encoder is a frozen, seeded word-embedding table. Prompts are sequences
of table rows; a pseudo-token slot expands to its N learnable vectors.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from modules.errors import ConfigError, SchemaError
from modules.run_store import tensor_hash

EMBEDDING_MAGIC = b"IV3D"
EMBEDDING_VERSION = 1

DEFAULT_WORDS = (
    "a", "an", "the", "photo", "of", "render", "object", "scene", "thing",
    "red", "green", "blue", "yellow", "white", "black", "grey", "orange", "purple",
    "small", "large", "round", "flat", "tall", "shiny", "matte",
    "cube", "sphere", "cluster", "blob", "toy", "chair", "vase",
    "style", "painting", "sketch", "van", "gogh", "pixel", "art", "watercolor",
    "in", "with", "and",
)


@dataclass(frozen=True)
class Vocabulary:
    words: tuple
    table: torch.Tensor  # (V, d_text), frozen

    def __post_init__(self):
        words = tuple(self.words)
        if len(set(words)) != len(words):
            raise ConfigError("vocabulary words must be unique")
        if self.table.dim() != 2 or self.table.shape[0] != len(words):
            raise ConfigError("embedding table must be (len(words), d_text)", shape=tuple(self.table.shape))
        object.__setattr__(self, "words", words)
        object.__setattr__(self, "table", self.table.detach())
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(words)})

    @classmethod
    def build(cls, words=DEFAULT_WORDS, dim: int = 64, seed: int = 0) -> "Vocabulary":
        gen = torch.Generator().manual_seed(seed)
        table = torch.randn(len(words), dim, generator=gen) / dim ** 0.5
        return cls(tuple(words), table)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def __contains__(self, word) -> bool:
        return word in self._index

    def __getitem__(self, word) -> torch.Tensor:
        return self.table[self.index(word)]

    def index(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise ConfigError(f"word '{word}' is not in the vocabulary", word=word) from None

    def state_hash(self) -> str:
        return tensor_hash([self.table]) + ":" + ",".join(self.words)

    def to_dict(self) -> dict:
        return {"words": list(self.words), "table": self.table.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Vocabulary":
        return cls(tuple(doc["words"]), torch.tensor(doc["table"], dtype=torch.float32))


@dataclass
class PseudoToken:
    name: str
    vectors: torch.Tensor  # (N, d_text)
    trainable: bool = True
    init_word: str = ""
    metadata: dict = field(default_factory=dict)
    # (base vectors, delta, accumulated lambda) of the edit that produced this token
    edit_origin: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.vectors.dim() != 2 or self.vectors.shape[0] < 1:
            raise ConfigError("pseudo-token needs an (N >= 1, d_text) array", shape=tuple(self.vectors.shape))
        if not torch.isfinite(self.vectors).all():
            raise ConfigError("pseudo-token vectors must be finite")

    @property
    def num_vectors(self) -> int:
        return self.vectors.shape[0]

    def clone(self) -> "PseudoToken":
        return PseudoToken(self.name, self.vectors.detach().clone(), self.trainable,
                           self.init_word, dict(self.metadata), self.edit_origin)

    def state_hash(self) -> str:
        return tensor_hash([self.vectors])


@dataclass
class PromptEmbedding:
    vectors: torch.Tensor  # (L, d_text)
    token_labels: tuple

    def __post_init__(self):
        if self.vectors.shape[0] != len(self.token_labels):
            raise ConfigError("prompt labels must align with vectors",
                              vectors=self.vectors.shape[0], labels=len(self.token_labels))

    def __len__(self):
        return len(self.token_labels)

    def positions(self, label: str) -> list:
        return [i for i, lab in enumerate(self.token_labels) if lab == label]


def init_pseudo_token(init_word: str, num_vectors: int, vocab: Vocabulary, name: str = "S*") -> PseudoToken:
    if num_vectors < 1:
        raise ConfigError("num_vectors must be >= 1", num_vectors=num_vectors)
    row = vocab[init_word]
    vectors = row[None, :].repeat(num_vectors, 1).clone()
    return PseudoToken(name=name, vectors=vectors, trainable=True, init_word=init_word)


def assemble_prompt(template, pseudo: PseudoToken, vocab: Vocabulary) -> PromptEmbedding:
    """
    Looks up template words; the entry equal to the pseudo-token's name
    expands to its N vectors in order. Gradients flow into `pseudo.vectors`.
    """
    template = list(template)
    slots = [i for i, w in enumerate(template) if pseudo is not None and w == pseudo.name]
    if len(slots) > 1:
        raise ConfigError("template may contain at most one pseudo-token slot", template=template)
    pieces, labels = [], []
    for word in template:
        if pseudo is not None and word == pseudo.name:
            pieces.append(pseudo.vectors)
            labels.extend([pseudo.name] * pseudo.num_vectors)
        else:
            pieces.append(vocab[word][None, :])
            labels.append(word)
    if not pieces:
        raise ConfigError("prompt template is empty")
    dtype = vocab.table.dtype
    vectors = torch.cat([p.to(dtype) for p in pieces], dim=0)
    return PromptEmbedding(vectors=vectors, token_labels=tuple(labels))


def pooled(words, vocab: Vocabulary) -> torch.Tensor:
    words = list(words)
    if not words:
        raise ConfigError("word list must not be empty")
    return torch.stack([vocab[w] for w in words]).mean(dim=0)


def text_delta(target, source, vocab: Vocabulary) -> torch.Tensor:
    """Mean-pooled embedding of `target` minus that of `source`."""
    return pooled(target, vocab) - pooled(source, vocab)


def edit_embedding(z_star: PseudoToken, delta: torch.Tensor, lam: float) -> PseudoToken:
    """
    Adds lam * delta to every pseudo vector. `z_star` is left untouched.

    Repeated edits along the same delta are taken from the pre-edit vectors with
    the lambdas summed, so edit(edit(z, d, a), d, b) equals edit(z, d, a + b) bit
    for bit.
    """
    delta = torch.as_tensor(delta, dtype=z_star.vectors.dtype).detach().clone()
    if delta.shape != (z_star.vectors.shape[1],):
        raise ConfigError("delta dimension must equal d_text",
                          delta=tuple(delta.shape), d_text=z_star.vectors.shape[1])
    origin = z_star.edit_origin
    if origin is not None and torch.equal(origin[1], delta):
        base, total = origin[0], origin[2] + float(lam)
    else:
        base, total = z_star.vectors.detach(), float(lam)
    edited = base + total * delta[None, :]
    meta = dict(z_star.metadata, edit_lambda=total)
    return PseudoToken(z_star.name, edited, z_star.trainable, z_star.init_word, meta, edit_origin=(base, delta, total))


# --- embedding file --------------------------------------------------------

def save_embedding(token: PseudoToken, path, metadata: dict = None) -> Path:
    """
    Layout (little-endian): magic "IV3D", version u16, N u32, d u32,
    N*d float32, metadata length u32, UTF-8 JSON metadata.
    """
    path = Path(path)
    vectors = token.vectors.detach().cpu().numpy().astype("<f4")
    meta = {"name": token.name, "init_word": token.init_word}
    meta.update(token.metadata)
    meta.update(metadata or {})
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    n, d = vectors.shape
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<HII", EMBEDDING_VERSION, n, d))
        fh.write(vectors.tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
    return path


def load_embedding(path) -> PseudoToken:
    data = Path(path).read_bytes()
    if data[:4] != EMBEDDING_MAGIC:
        raise SchemaError("not an embedding file", path=str(path))
    if len(data) < 4 + struct.calcsize("<HII"):
        raise SchemaError("embedding header is truncated", path=str(path))
    version, n, d = struct.unpack_from("<HII", data, 4)
    if version != EMBEDDING_VERSION:
        raise SchemaError("unsupported embedding version", version=version)
    offset = 4 + struct.calcsize("<HII")
    end = offset + 4 * n * d
    if len(data) < end + 4:
        raise SchemaError("embedding file is truncated", path=str(path))
    vectors = np.frombuffer(data[offset:end], dtype="<f4").reshape(n, d)
    (length,) = struct.unpack_from("<I", data, end)
    if len(data) < end + 4 + length:
        raise SchemaError("embedding metadata is truncated", path=str(path), length=length)
    try:
        meta = json.loads(data[end + 4:end + 4 + length].decode("utf-8"))
    except ValueError as e:
        raise SchemaError("embedding metadata is not valid JSON", path=str(path), reason=str(e)) from e
    if not isinstance(meta, dict):
        raise SchemaError("embedding metadata must be a JSON object", path=str(path))
    name = meta.pop("name", "S*")
    init_word = meta.pop("init_word", "")
    return PseudoToken(name, torch.tensor(vectors.copy()), True, init_word, meta)
