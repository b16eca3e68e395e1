"""Sample batches and their CSV serialization."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class CsvFormatError(ValueError):
    """Malformed sample CSV; message carries the offending line number."""


@dataclass
class SampleBatch:
    """Ordered 2D samples plus the seed and settings that produced them."""

    points: np.ndarray
    seed: Optional[int] = None
    settings: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"points must be (n, 2), got {self.points.shape}")

    def __len__(self) -> int:
        return self.points.shape[0]


def write_csv(batch: SampleBatch | np.ndarray, path) -> None:
    """Header "x1,x2" then one point per line at 17 significant digits."""
    pts = batch.points if isinstance(batch, SampleBatch) else np.asarray(batch, dtype=np.float64)
    lines = ["x1,x2"]
    for a, b in pts:
        lines.append(f"{a:.17g},{b:.17g}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_csv(path) -> SampleBatch:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "x1,x2":
        raise CsvFormatError(f"{path}: line 1: expected header 'x1,x2'")
    pts = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != 2:
            raise CsvFormatError(f"{path}: line {ln}: expected 2 comma-separated values")
        try:
            pts.append((float(cells[0]), float(cells[1])))
        except ValueError as exc:
            raise CsvFormatError(f"{path}: line {ln}: {exc}") from exc
    return SampleBatch(points=np.array(pts, dtype=np.float64).reshape(-1, 2))


def write_run_sidecar(artifact_path, config: dict) -> str:
    """Echo the effective config next to an output artifact."""
    sidecar = str(artifact_path) + ".run.json"
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump(config, f, sort_keys=True, indent=2)
        f.write("\n")
    return sidecar
