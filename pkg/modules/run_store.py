
"""
Append-only run directories, content hashes, manifests and seed fan-out.
"""
import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from modules.errors import ConfigError, MissingArtifactError, SchemaError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
# run metadata, excluded from the artifact list
METADATA_FILES = {MANIFEST_NAME, "history.csv", "error.json"}


def derive_seed(root_seed: int, name: str) -> int:
    """Deterministic sub-seed for a named component of a run."""
    digest = hashlib.sha256(f"{int(root_seed)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tensor_hash(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        array = t.detach().cpu().contiguous().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        h.update(str(array.dtype).encode())
        h.update(str(array.shape).encode())
        h.update(array.tobytes())
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return tensor_hash(list(module.state_dict().values()))


@dataclass
class RunManifest:
    run_id: str
    timestamp: str
    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)   # name -> sha256
    outputs: dict = field(default_factory=dict)  # relative path -> sha256
    status: str = "running"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        missing = {"run_id", "timestamp", "command", "config"} - set(doc)
        if missing:
            raise SchemaError("manifest is missing fields", missing=sorted(missing))
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})


class RunDirectory:
    """
    One run's artifact store. Refuses to reuse a directory that already holds
    a manifest, so earlier runs are never modified.
    """

    def __init__(self, path, manifest: RunManifest):
        self.path = Path(path)
        self.manifest = manifest

    @classmethod
    def create(cls, out_dir, command: str, config: dict, seeds: dict, run_id: str = None,
               timestamp: str = "") -> "RunDirectory":
        out_dir = Path(out_dir)
        run_id = run_id or f"{command}-{config_digest(config)[:12]}"
        if not re.fullmatch(r"[A-Za-z0-9._-]+", run_id):
            raise ConfigError("run id may only contain letters, digits, '.', '_' and '-'", run_id=run_id)
        path = out_dir / run_id
        if (path / MANIFEST_NAME).exists():
            raise ConfigError("run directory already exists; runs are append-only", path=str(path))
        path.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(run_id=run_id, timestamp=timestamp, command=command,
                               config=config, seeds=dict(seeds))
        run = cls(path, manifest)
        run.write_manifest()
        return run

    @classmethod
    def open(cls, path) -> "RunDirectory":
        path = Path(path)
        manifest_path = path / MANIFEST_NAME
        if not manifest_path.exists():
            raise MissingArtifactError("run manifest not found", path=str(manifest_path))
        return cls(path, RunManifest.from_dict(json.loads(manifest_path.read_text())))

    def file(self, name: str) -> Path:
        target = self.path / name
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def record_output(self, path) -> str:
        path = Path(path)
        rel = path.relative_to(self.path).as_posix()
        if rel in METADATA_FILES:
            return ""
        digest = file_sha256(path)
        self.manifest.outputs[rel] = digest
        return digest

    def record_input(self, name: str, path) -> str:
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError("input artifact not found", name=name, path=str(path))
        digest = file_sha256(path) if path.is_file() else directory_hash(path)
        self.manifest.inputs[name] = digest
        return digest

    def write_json(self, name: str, doc) -> Path:
        target = self.file(name)
        target.write_text(json.dumps(doc, indent=2, sort_keys=True))
        self.record_output(target)
        return target

    def finish(self, status: str = "ok"):
        self.manifest.status = status
        self.write_manifest()

    def write_manifest(self):
        (self.path / MANIFEST_NAME).write_text(json.dumps(self.manifest.to_dict(), indent=2, sort_keys=True))


def directory_hash(path) -> str:
    h = hashlib.sha256()
    for item in sorted(Path(path).rglob("*")):
        if item.is_file() and item.name not in METADATA_FILES:
            h.update(item.relative_to(path).as_posix().encode())
            h.update(file_sha256(item).encode())
    return h.hexdigest()


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def error_directory(out_dir, run_id: str) -> Path:
    """
    Where a run that failed before its directory was created records error.json.
    A directory that already holds a finished run is left alone; the record goes
    to the first free sibling `<run_id>-error-<n>` instead.
    """
    path = Path(out_dir) / run_id
    n = 0
    while (path / MANIFEST_NAME).exists() or (path / "error.json").exists():
        n += 1
        path = Path(out_dir) / f"{run_id}-error-{n}"
    return path
