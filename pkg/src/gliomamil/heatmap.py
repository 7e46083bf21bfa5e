"""Per-patch decision-score export: a text table plus grayscale PGM grids."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .backbone import TASKS


def score_table(weights: dict[str, np.ndarray], source_index: np.ndarray | None = None) -> str:
    n = len(next(iter(weights.values())))
    src = np.arange(n) if source_index is None else source_index
    lines = ["patch_index source_index " + " ".join(TASKS)]
    for i in range(n):
        lines.append(f"{i} {int(src[i])} " + " ".join(f"{float(weights[t][i]):.17g}" for t in TASKS))
    return "\n".join(lines) + "\n"


def grid_image(w: np.ndarray, cell: int = 8) -> np.ndarray:
    """Row-major grid of patch intensities, 255 at the bag's largest weight.

    Grid cells past the last patch stay black.
    """
    w = np.asarray(w, dtype=np.float64)
    n = w.size
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    peak = w.max()
    level = np.zeros(rows * cols, dtype=np.uint8)
    if peak > 0:
        level[:n] = np.floor(255.0 * w / peak + 0.5).astype(np.uint8)
    img = level.reshape(rows, cols)
    return np.kron(img, np.ones((cell, cell), dtype=np.uint8))


def write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_heatmap(outputs, path, source_index: np.ndarray | None = None, cell: int = 8) -> list[Path]:
    """Write ``scores.txt`` and one ``heatmap_<task>.pgm`` per task into directory ``path``."""
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = {t: np.asarray(getattr(outputs.decision_weights[t], "data", outputs.decision_weights[t])) for t in TASKS}
    written = [out_dir / "scores.txt"]
    written[0].write_text(score_table(weights, source_index))
    for t in TASKS:
        p = out_dir / f"heatmap_{t}.pgm"
        write_pgm(p, grid_image(weights[t], cell))
        written.append(p)
    return written
