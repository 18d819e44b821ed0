import json
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from modules.errors import MissingArtifactError, SchemaError
from modules.run_store import MANIFEST_NAME, RunDirectory, RunManifest

RUN_COLUMNS = ["run_id", "command", "status", "timestamp", "outputs", "path"]
IMAGE_SUFFIXES = {".png"}


@dataclass
class RunRecord:
    path: Path
    manifest: RunManifest
    history: pd.DataFrame
    traces: dict = field(default_factory=dict)  # name -> DataFrame
    ablation: pd.DataFrame = None
    curves: pd.DataFrame = None
    metrics: dict = None
    error: dict = None
    images: list = field(default_factory=list)


def read_table(path) -> pd.DataFrame:
    """
    Loads a CSV artifact.

    Args:
        path: Path to the CSV file.

    Returns:
        pd.DataFrame: The table with stripped column names. Empty if the file is missing.
    """
    path = Path(path)
    if not path.exists():
        return pd.DataFrame()
    df = pd.read_csv(path)
    df.columns = df.columns.str.strip()
    return df


def list_runs(root) -> pd.DataFrame:
    """
    One row per run directory under `root` (directories without a manifest
    are skipped). Empty frame if `root` does not exist.
    """
    root = Path(root)
    if not root.is_dir():
        return pd.DataFrame(columns=RUN_COLUMNS)
    rows = []
    for manifest_path in sorted(root.glob(f"*/{MANIFEST_NAME}")):
        try:
            manifest = RunManifest.from_dict(json.loads(manifest_path.read_text()))
        except (json.JSONDecodeError, SchemaError):
            continue
        rows.append({
            "run_id": manifest.run_id,
            "command": manifest.command,
            "status": manifest.status,
            "timestamp": manifest.timestamp,
            "outputs": len(manifest.outputs),
            "path": str(manifest_path.parent),
        })
    return pd.DataFrame(rows, columns=RUN_COLUMNS).sort_values("timestamp", kind="stable").reset_index(drop=True)


def load_run(run_dir) -> RunRecord:
    """Reads everything a run directory holds into memory (images as paths)."""
    run = RunDirectory.open(run_dir)
    path = run.path
    traces = {p.stem: read_table(p) for p in sorted(path.glob("*trace.csv"))}
    metrics_path, error_path = path / "metrics.json", path / "error.json"
    ablation = read_table(path / "ablation.csv")
    curves = read_table(path / "ablation_curves.csv")
    return RunRecord(
        path=path,
        manifest=run.manifest,
        history=read_table(path / "history.csv"),
        traces=traces,
        ablation=None if ablation.empty else ablation,
        curves=None if curves.empty else curves,
        metrics=json.loads(metrics_path.read_text()) if metrics_path.exists() else None,
        error=json.loads(error_path.read_text()) if error_path.exists() else None,
        images=sorted(p for p in path.rglob("*") if p.suffix in IMAGE_SUFFIXES),
    )


def run_artifact(run_dir, name: str) -> Path:
    """Path of an artifact inside an earlier run; raises if it is absent."""
    if not run_dir:
        raise MissingArtifactError(f"no run given for required artifact '{name}'", artifact=name)
    target = Path(run_dir) / name
    if not target.exists():
        raise MissingArtifactError("artifact not found", artifact=name, path=str(target))
    return target
