"""Heatmap decoding, normalized error, and per-landmark reports in the
L.Collar ... R.Hem, Avg. column layout."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import SLOTS
from .network import LandmarkNet, forward
from .tensor import Tensor


def decode_heatmaps(heatmaps) -> np.ndarray:
    """Per-channel argmax as integer ``(x, y)`` pixel coordinates, shape ``[N, C, 2]``.

    Ties go to the lowest row-major index.
    """
    h = heatmaps.data if isinstance(heatmaps, Tensor) else np.asarray(heatmaps)
    n, c, rows, cols = h.shape
    flat = h.reshape(n, c, rows * cols).argmax(axis=-1)
    return np.stack([flat % cols, flat // cols], axis=-1)


def normalized_error(pred, gt, width: float, height: float, literal: bool = False) -> float:
    """Distance between ``pred`` and ``gt`` after scaling x by 1/width and y by 1/height.

    With ``literal=True`` the raw pixel distance is divided by ``height * width``
    instead.
    """
    if not (width > 0 and height > 0):
        raise ValueError(f"width and height must be positive, got {width}x{height}")
    dx = float(pred[0]) - float(gt[0])
    dy = float(pred[1]) - float(gt[1])
    if literal:
        return math.hypot(dx, dy) / (height * width)
    return math.hypot(dx / width, dy / height)


@dataclass
class EvalReport:
    per_slot: list  # NE per slot, None where the slot never occurs
    counts: list
    avg: Optional[float]
    dataset_id: str = ""
    config_hash: str = ""
    metric: str = "per-axis"

    def table(self) -> str:
        header = [""] + list(SLOTS) + ["Avg."]
        cells = [self.dataset_id or "model"]
        cells += ["-" if v is None else f"{v:.4f}" for v in self.per_slot]
        cells.append("-" if self.avg is None else f"{self.avg:.4f}")
        widths = [max(len(a), len(b)) for a, b in zip(header, cells)]
        fmt = lambda row: " | ".join(s.rjust(w) for s, w in zip(row, widths))
        rule = "-+-".join("-" * w for w in widths)
        return "\n".join([fmt(header), rule, fmt(cells)])

    def key_values(self) -> str:
        lines = [f"dataset = {self.dataset_id}", f"config_hash = {self.config_hash}", f"metric = {self.metric}"]
        for name, ne, count in zip(SLOTS, self.per_slot, self.counts):
            lines.append(f"{name}.ne = {'-' if ne is None else repr(ne)}")
            lines.append(f"{name}.count = {count}")
        lines.append(f"Avg. = {'-' if self.avg is None else repr(self.avg)}")
        lines.append(f"total_count = {sum(self.counts)}")
        return "\n".join(lines) + "\n"


def aggregate(errors: Sequence[Sequence[float]], dataset_id: str = "", config_hash: str = "",
              metric: str = "per-axis") -> EvalReport:
    """``errors[slot]`` lists every per-instance NE for that slot."""
    per_slot, counts = [], []
    for errs in errors:
        counts.append(len(errs))
        per_slot.append(math.fsum(errs) / len(errs) if errs else None)
    total = sum(counts)
    avg = math.fsum(e for errs in errors for e in errs) / total if total else None
    return EvalReport(per_slot, counts, avg, dataset_id, config_hash, metric)


def predict_coords(net: LandmarkNet, images: np.ndarray, batch_size: int = 16) -> tuple:
    """Eval-mode heatmaps and decoded coordinates for ``images`` [N,3,S,S]."""
    coords, maps = [], []
    for start in range(0, len(images), batch_size):
        out = forward(net, Tensor(images[start:start + batch_size]), "eval")
        maps.append(out.data)
        coords.append(decode_heatmaps(out))
    return np.concatenate(coords), np.concatenate(maps)


def evaluate(net: LandmarkNet, samples: Sequence, dataset_id: str = "", config_hash: str = "",
             literal: bool = False, batch_size: int = 16) -> EvalReport:
    """NE of every visible landmark, aggregated per slot and overall."""
    if not samples:
        raise ValueError("evaluate: empty dataset")
    size = net.config.input_size
    coords, _ = predict_coords(net, np.stack([s.image for s in samples]), batch_size)
    errors = [[] for _ in SLOTS]
    for sample, pred in zip(samples, coords):
        for slot in np.flatnonzero(sample.mask):
            errors[slot].append(normalized_error(pred[slot], sample.gt_coords[slot], size, size, literal))
    return aggregate(errors, dataset_id, config_hash, "literal-area" if literal else "per-axis")


def config_hash(config: dict) -> str:
    raw = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:16]
