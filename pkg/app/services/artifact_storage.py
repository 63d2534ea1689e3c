# app/services/artifact_storage.py
"""
Run Artifact Storage Module

Writes the columnar text files of a run and its manifest.
Naming pattern: <kind>_<label>.txt inside the run directory, e.g.
density_RB-SHMC.txt, error_vs_te_RBMC-v2.txt; the manifest is manifest.json.
All writes go through this module so a run has a single writer.
"""

import hashlib
import json
import logging
import os
import re
import tempfile
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.core.config import settings
from app.core.errors import ConfigError
from app.schemas.experiment_schemas import FileEntry, RunManifest

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

# Artifact kind -> column header
ARTIFACT_HEADERS = {
    "samples": None,   # built from the sample shape
    "density": "bin_center density",
    "error_vs_te": "iteration evolution_time relative_error",
    "sweep": "dt strong_error weak_error",
    "fourth_moment": "time fourth_moment",
}


def safe_label(label: str) -> str:
    """File-name safe version of a sampler label."""
    return re.sub(r"[^A-Za-z0-9_.+-]+", "_", label).strip("_") or "chain"


def resolve_run_dir(output_dir: Optional[str], default_name: str, output_root: Optional[str] = None) -> str:
    """
    Absolute run directory; relative paths live under SHMC_OUTPUT_ROOT.
    """
    root = output_root if output_root is not None else settings.SHMC_OUTPUT_ROOT
    target = output_dir or default_name
    path = target if os.path.isabs(target) else os.path.join(root, target)
    os.makedirs(path, exist_ok=True)
    return path


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


class ArtifactWriter:
    """Collects every file a run emits together with its checksum."""

    def __init__(self, run_dir: str):
        self.run_dir = run_dir
        self.entries: List[FileEntry] = []

    def _register(self, filename: str) -> str:
        path = os.path.join(self.run_dir, filename)
        self.entries.append(FileEntry(path=filename, sha256=file_sha256(path), bytes=os.path.getsize(path)))
        logger.info(f"Wrote {path}")
        return path

    def write_table(self, kind: str, label: str, columns: Sequence[np.ndarray], header: Optional[str] = None) -> str:
        """
        Save equal-length columns as whitespace separated text with a one-line header.

        Returns:
            Path of the written file
        """
        if kind not in ARTIFACT_HEADERS:
            raise ValueError(f"unknown artifact kind '{kind}'")
        header = header or ARTIFACT_HEADERS[kind]
        filename = f"{kind}_{safe_label(label)}.txt" if label else f"{kind}.txt"
        data = np.column_stack([np.asarray(c, dtype=float) for c in columns]) if columns else np.empty((0, 0))
        np.savetxt(os.path.join(self.run_dir, filename), data, header=header, fmt="%.10g")
        return self._register(filename)

    def write_samples(self, label: str, iterations: Sequence[int], samples: np.ndarray) -> str:
        """One row per kept sample: iteration followed by the flattened configuration."""
        flat = samples.reshape(samples.shape[0], -1) if samples.size else np.empty((0, 0))
        width = flat.shape[1] if flat.ndim == 2 else 0
        header = "iteration " + " ".join(f"x{k}" for k in range(width))
        data = np.column_stack([np.asarray(iterations, dtype=float), flat]) if flat.size else np.empty((0, width + 1))
        filename = f"samples_{safe_label(label)}.txt"
        np.savetxt(os.path.join(self.run_dir, filename), data, header=header, fmt="%.10g")
        return self._register(filename)

    def write_manifest(self, manifest: RunManifest) -> str:
        """Atomic write: temp file in the run directory, then os.replace."""
        manifest.files = list(self.entries)
        payload = manifest.model_dump_json(indent=2)
        handle, temp_path = tempfile.mkstemp(dir=self.run_dir, prefix=".manifest-", suffix=".json")
        try:
            with os.fdopen(handle, "w", encoding="utf-8") as out:
                out.write(payload)
            os.replace(temp_path, os.path.join(self.run_dir, MANIFEST_NAME))
        except Exception:
            if os.path.exists(temp_path):
                os.remove(temp_path)
            raise
        path = os.path.join(self.run_dir, MANIFEST_NAME)
        logger.info(f"Manifest written to {path}")
        return path


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def load_manifest(path: str) -> RunManifest:
    """Read a manifest (or the manifest inside a run directory)."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(path):
        raise ConfigError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        try:
            raw = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}") from exc
    return RunManifest.model_validate(raw)


def verify_checksums(manifest: RunManifest, run_dir: str) -> Dict[str, bool]:
    """File name -> whether its sha256 still matches the manifest."""
    return {
        entry.path: os.path.exists(os.path.join(run_dir, entry.path))
        and file_sha256(os.path.join(run_dir, entry.path)) == entry.sha256
        for entry in manifest.files
    }


def load_table(run_dir: str, filename: str) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(os.path.join(run_dir, filename), ndmin=2))
