"""Reproducibility manifest written next to simulation output."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, Sequence

MANIFEST_FORMAT_VERSION = 1


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class RunManifest:
    """What produced a result directory, and from which inputs.

    Wall time is the only field expected to vary between two runs of
    the same command on the same inputs.
    """

    command: Sequence[str]
    config_hash: str
    seed: int
    version: str
    wall_time_s: float
    input_digests: Dict[str, str] = field(default_factory=dict)
    format_version: int = MANIFEST_FORMAT_VERSION

    def to_json(self) -> str:
        payload = {
            "format_version": self.format_version,
            "command": list(self.command),
            "config_hash": self.config_hash,
            "input_digests": dict(sorted(self.input_digests.items())),
            "seed": self.seed,
            "version": self.version,
            "wall_time_s": round(self.wall_time_s, 3),
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
