import json
from pathlib import Path

import numpy as np
import pandas as pd

from modules.errors import Invert3DError, MissingArtifactError
from modules.metrics import validate_metrics_report
from modules.run_store import METADATA_FILES, RunDirectory, file_sha256
from modules.scene import load_scene
from modules.text_embed import load_embedding

DETAIL_COLUMNS = ["Artifact", "Kind", "Size (bytes)", "Status", "Note"]


def _validate(path: Path):
    """Content check for artifact kinds with a documented format. Returns an error note or ''."""
    try:
        if path.name == "scene.json" or (path.parent.name == "corpus" and path.suffix == ".json"):
            load_scene(path)
        elif path.name == "metrics.json":
            validate_metrics_report(json.loads(path.read_text()))
        elif path.suffix == ".iv3d":
            load_embedding(path)
        elif path.name.endswith("trace.csv"):
            losses = pd.read_csv(path)["loss"].to_numpy(dtype=float)
            if not np.isfinite(losses).all():
                return "non-finite loss values"
    except (Invert3DError, ValueError, KeyError) as e:
        return str(e)
    return ""


def audit_run(run_dir):
    """
    Re-hashes and validates every artifact of a run and returns a dictionary with:
    - score: Run health score (0-100)
    - summary: Textual summary of issues
    - details_table: DataFrame, one row per artifact
    - status_str: Manifest status
    """
    score = 100
    summary_logs = []
    rows = []

    try:
        run = RunDirectory.open(run_dir)
    except (MissingArtifactError, Invert3DError, json.JSONDecodeError) as e:
        return {
            "score": 0,
            "summary": [f"🔴 No readable manifest: {e}"],
            "details_table": pd.DataFrame(columns=DETAIL_COLUMNS),
            "status_str": "unknown",
        }
    manifest = run.manifest

    # --- status ---
    if (run.path / "error.json").exists():
        score -= 30
        record = json.loads((run.path / "error.json").read_text())
        summary_logs.append(f"🔴 Run failed with {record.get('error')}: {record.get('message')}")
    elif manifest.status != "ok":
        score -= 10
        summary_logs.append(f"⚠️ Run status is '{manifest.status}' (not finished).")

    # --- listed artifacts: presence, hash, content ---
    broken = 0
    for rel, digest in sorted(manifest.outputs.items()):
        path = run.path / rel
        status, note = "Valid", ""
        if not path.exists():
            status, note = "Critical", "missing"
            broken += 1
            score -= 20
            summary_logs.append(f"🔴 Listed artifact '{rel}' is missing.")
        elif file_sha256(path) != digest:
            status, note = "Critical", "hash mismatch"
            broken += 1
            score -= 20
            summary_logs.append(f"🔴 Artifact '{rel}' was modified after the run (hash mismatch).")
        else:
            note = _validate(path)
            if note:
                status = "Critical"
                score -= 10
                summary_logs.append(f"🔴 Artifact '{rel}' failed validation: {note}")
        rows.append({
            "Artifact": rel,
            "Kind": path.suffix.lstrip(".") or "file",
            "Size (bytes)": path.stat().st_size if path.exists() else 0,
            "Status": status,
            "Note": note,
        })
    if manifest.outputs and broken == 0:
        summary_logs.append("✅ All listed artifacts match their recorded hashes.")

    # --- files nobody listed ---
    listed = set(manifest.outputs)
    for path in sorted(p for p in run.path.rglob("*") if p.is_file()):
        rel = path.relative_to(run.path).as_posix()
        if rel in listed or rel in METADATA_FILES:
            continue
        score -= 2
        rows.append({"Artifact": rel, "Kind": path.suffix.lstrip(".") or "file",
                     "Size (bytes)": path.stat().st_size, "Status": "Warning", "Note": "not in manifest"})
        summary_logs.append(f"⚠️ '{rel}' is not listed in the manifest.")

    if not manifest.outputs:
        summary_logs.append("⚠️ Manifest lists no artifacts.")

    score = max(0, min(100, score))
    return {
        "score": score,
        "summary": summary_logs,
        "details_table": pd.DataFrame(rows, columns=DETAIL_COLUMNS),
        "status_str": manifest.status,
    }
