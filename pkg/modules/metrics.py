
"""
Image and latent metrics, and the persisted metrics report.
"""
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from modules.errors import ConfigError, SchemaError

PSNR_CAP = 99.0
METRICS_FORMAT = "invert3d-metrics"
METRICS_VERSION = 1


def _as_tensor(x) -> torch.Tensor:
    return x.detach().to(torch.float64) if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x),
                                                                                           dtype=torch.float64)


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical inputs give PSNR_CAP."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ConfigError("psnr needs images of equal shape", a=tuple(a.shape), b=tuple(b.shape))
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, max(0.0, 10.0 * math.log10(1.0 / mse))))


def latent_mse(a, b) -> float:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ConfigError("latent_mse needs latents of equal shape", a=tuple(a.shape), b=tuple(b.shape))
    return float(((a - b) ** 2).mean())


def mean_abs_difference(a, b) -> float:
    a, b = _as_tensor(a), _as_tensor(b)
    return float((a - b).abs().mean())


@dataclass
class MetricsReport:
    """
    Evaluation summary of one run. `ablation` rows carry num_vectors,
    final_loss and heldout_psnr; `notes` holds free-form scalar findings
    (baseline PSNR, 2D/3D held-out losses, ...).
    """
    run_id: str
    source_run: str = ""
    per_view_psnr: list = field(default_factory=list)
    latent_mse: float = None
    loss_traces: dict = field(default_factory=dict)
    ablation: list = field(default_factory=list)
    untrained: bool = False
    notes: dict = field(default_factory=dict)

    @property
    def mean_psnr(self):
        return float(np.mean(self.per_view_psnr)) if self.per_view_psnr else None

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.update(format=METRICS_FORMAT, version=METRICS_VERSION, mean_psnr=self.mean_psnr)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        validate_metrics_report(doc)
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})


def _number(value, name: str, lo=None, hi=None, nullable=False):
    if value is None and nullable:
        return
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise SchemaError(f"'{name}' must be a finite number", value=value)
    if (lo is not None and value < lo) or (hi is not None and value > hi):
        raise SchemaError(f"'{name}' out of range", value=value, lo=lo, hi=hi)


def validate_metrics_report(doc) -> dict:
    """Raises SchemaError unless `doc` matches the metrics report layout (see README)."""
    if not isinstance(doc, dict):
        raise SchemaError("metrics report must be a JSON object")
    if doc.get("format") != METRICS_FORMAT or doc.get("version") != METRICS_VERSION:
        raise SchemaError("unknown metrics format", format=doc.get("format"), version=doc.get("version"))
    required = {"run_id", "per_view_psnr", "latent_mse", "loss_traces", "ablation", "mean_psnr"}
    missing = sorted(required - set(doc))
    if missing:
        raise SchemaError("metrics report is missing fields", missing=missing)
    if not isinstance(doc["run_id"], str) or not doc["run_id"]:
        raise SchemaError("'run_id' must be a non-empty string")
    if not isinstance(doc["per_view_psnr"], list):
        raise SchemaError("'per_view_psnr' must be a list")
    for i, value in enumerate(doc["per_view_psnr"]):
        _number(value, f"per_view_psnr[{i}]", 0.0, PSNR_CAP)
    _number(doc["mean_psnr"], "mean_psnr", 0.0, PSNR_CAP, nullable=not doc["per_view_psnr"])
    _number(doc["latent_mse"], "latent_mse", 0.0, nullable=True)
    if not isinstance(doc["loss_traces"], dict):
        raise SchemaError("'loss_traces' must be an object")
    for name, trace in doc["loss_traces"].items():
        if not isinstance(trace, list):
            raise SchemaError("loss trace must be a list", trace=name)
        for value in trace:
            _number(value, f"loss_traces.{name}")
    if not isinstance(doc["ablation"], list):
        raise SchemaError("'ablation' must be a list")
    for row in doc["ablation"]:
        if not isinstance(row, dict) or not {"num_vectors", "final_loss", "heldout_psnr"} <= set(row):
            raise SchemaError("ablation rows need num_vectors, final_loss and heldout_psnr", row=row)
        _number(row["num_vectors"], "ablation.num_vectors", 1)
        _number(row["final_loss"], "ablation.final_loss", 0.0)
        _number(row["heldout_psnr"], "ablation.heldout_psnr", 0.0, PSNR_CAP)
    return doc
