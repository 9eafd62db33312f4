"""Middlebury ``.flo`` optical flow files."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ValidationError

FLO_MAGIC = 202021.25


def write_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValidationError(f"flow must be HxWx2, got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], "<f4").tofile(f)
        np.array([w, h], "<i4").tofile(f)
        flow.astype("<f4").tofile(f)


def read_flo(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing flow file: {path}") from None
    if len(raw) < 12:
        raise OSError(f"corrupt flow file (truncated header): {path}")
    magic = np.frombuffer(raw, "<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise OSError(f"corrupt flow file (bad magic {magic}): {path}")
    w, h = (int(v) for v in np.frombuffer(raw, "<i4", count=2, offset=4))
    if w <= 0 or h <= 0 or len(raw) != 12 + 8 * w * h:
        raise OSError(f"corrupt flow file (size mismatch for {w}x{h}): {path}")
    data = np.frombuffer(raw, "<f4", offset=12).reshape(h, w, 2)
    return data.astype(np.float32)
