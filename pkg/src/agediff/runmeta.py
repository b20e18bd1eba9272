"""Run manifests: content hashes, timings, and artifact listings per command."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from pathlib import Path
from typing import Optional

from .core import PipelineConfig


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_hash(config: PipelineConfig) -> str:
    payload = json.dumps(dataclasses.asdict(config), sort_keys=True).encode("utf-8")
    return sha256_bytes(payload)


def hash_tree(root: str | Path, exclude: tuple[str, ...] = ("run_manifest.json",)) -> dict[str, str]:
    """Stable relative-path -> sha256 map over every file under ``root``."""
    root = Path(root)
    out: dict[str, str] = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if rel in exclude:
            continue
        out[rel] = sha256_file(path)
    return out


class RunManifest:
    """Collects inputs, outputs, and timings for one command invocation."""

    def __init__(self, command: str, seed: int = 0, config: Optional[PipelineConfig] = None):
        self.command = command
        self.seed = seed
        self.config_hash = config_hash(config) if config is not None else ""
        self.inputs: dict[str, str] = {}
        self.artifacts: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self._start = time.monotonic()

    def add_input(self, label: str, path: str | Path) -> None:
        self.inputs[label] = sha256_file(path)

    def add_artifact(self, path: str | Path) -> None:
        p = Path(path)
        self.artifacts[str(p)] = sha256_file(p)

    def add_artifact_tree(self, root: str | Path) -> None:
        root = Path(root)
        for rel, digest in hash_tree(root).items():
            self.artifacts[str(root / rel)] = digest

    def record_timing(self, label: str) -> None:
        self.timings[label] = time.monotonic() - self._start

    def write(self, out_dir: str | Path) -> Path:
        self.timings.setdefault("total_s", time.monotonic() - self._start)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "run_manifest.json"
        path.write_text(
            json.dumps(
                {
                    "command": self.command,
                    "seed": self.seed,
                    "config_hash": self.config_hash,
                    "inputs": self.inputs,
                    "artifacts": self.artifacts,
                    "timings": self.timings,
                },
                indent=2,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )
        return path
