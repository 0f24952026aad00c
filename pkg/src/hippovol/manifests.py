"""Cohort manifest files: one JSON record per (subject, timepoint) volume.

Each record carries subject_id, timepoint_years, status and any of the
path fields "scan", "label", "mask" (relative to the manifest directory).
"""

from __future__ import annotations

import json
from pathlib import Path


def write_manifest(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"records": records}, indent=2, sort_keys=True))
    return path


def read_manifest(path) -> list:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"no such manifest: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from None
    records = payload.get("records")
    if not isinstance(records, list):
        raise ValueError(f"{path}: manifest must contain a 'records' list")
    for i, rec in enumerate(records):
        for key in ("subject_id", "timepoint_years"):
            if key not in rec:
                raise ValueError(f"{path}: record {i} is missing {key!r}")
    return records


def resolve_path(manifest_path, relative) -> Path:
    return (Path(manifest_path).parent / relative).resolve()
