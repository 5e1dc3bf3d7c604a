"""Batched model inference over spectrogram clips.

Track-level scores come from sliding eval windows (window = crop_frames,
hop = crop_frames/2): per window, sigmoid over the logits; per track, the
mean of its window scores.  Clips shorter than one window are repeat-tiled.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import Model


def tile_to_length(values: np.ndarray, frames: int) -> np.ndarray:
    """Repeat-tile along time until at least ``frames`` columns, then cut."""
    have = values.shape[1]
    if have >= frames:
        return values
    reps = -(-frames // have)
    return np.tile(values, (1, reps))[:, :frames]


def window_starts(frames: int, window: int, hop: int) -> list[int]:
    if frames <= window:
        return [0]
    starts = list(range(0, frames - window + 1, hop))
    if starts[-1] != frames - window:
        starts.append(frames - window)  # cover the tail
    return starts


def predict_scores(model: Model, values_list: list, crop_frames: int,
                   norm_mean: float, norm_std: float,
                   mode: str = "windows", batch_size: int = 8) -> np.ndarray:
    """Per-clip, per-tag sigmoid scores in [0, 1].

    mode "windows": mean of sliding-window scores; mode "center": one central
    crop per clip (the fast path used for per-epoch validation).
    """
    if mode not in ("windows", "center"):
        raise ValueError(f"unknown inference mode {mode!r}")
    hop = max(1, crop_frames // 2)
    crops = []
    owners = []
    for i, values in enumerate(values_list):
        v = tile_to_length(values, crop_frames)
        if mode == "center":
            off = (v.shape[1] - crop_frames) // 2
            starts = [off]
        else:
            starts = window_starts(v.shape[1], crop_frames, hop)
        for s in starts:
            crops.append(v[:, s:s + crop_frames])
            owners.append(i)

    scores_sum = np.zeros((len(values_list), model.config.n_tags), dtype=np.float64)
    counts = np.zeros(len(values_list), dtype=np.int64)
    for lo in range(0, len(crops), batch_size):
        chunk = crops[lo:lo + batch_size]
        x = np.stack(chunk)[:, None, :, :].astype(ad.DEFAULT_DTYPE)
        x = (x - norm_mean) / norm_std
        logits = model.forward(Tensor(x), mode="eval")
        probs = ad.sigmoid(logits).data
        for row, owner in zip(probs, owners[lo:lo + batch_size]):
            scores_sum[owner] += row
            counts[owner] += 1
    return scores_sum / counts[:, None]
