"""Whole-mosaic prediction by overlapping sliding windows."""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from .types import LabelMap, Mosaic, ProbabilityMap


def window_grid(
    width: int, height: int, window: int = 256, overlap: float = 0.75, max_depth: int = 4
) -> list[tuple[int, int]]:
    """``(x, y)`` origins of windows covering a ``width x height`` mosaic.

    Origins step by ``window * (1 - overlap)``; a flush right/bottom origin
    is appended when the regular grid leaves a remainder.  A mosaic smaller
    than the window yields the single origin ``(0, 0)``.
    """
    if window % 2 ** max_depth:
        raise ValueError(f"window {window} is not divisible by 2^{max_depth}")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    stride = int(round(window * (1 - overlap)))
    if stride < 1:
        raise ValueError("overlap leaves a zero stride")

    def axis(n):
        if n <= window:
            return [0]
        pos = list(range(0, n - window + 1, stride))
        if pos[-1] != n - window:
            pos.append(n - window)
        return pos

    return [(x, y) for y in axis(height) for x in axis(width)]


def _reflect_pad(px: np.ndarray, window: int) -> np.ndarray:
    ph, pw = max(window - px.shape[0], 0), max(window - px.shape[1], 0)
    if not (ph or pw):
        return px
    mode = "reflect" if min(px.shape) > 1 and ph < px.shape[0] and pw < px.shape[1] else "symmetric"
    return np.pad(px, ((0, ph), (0, pw)), mode=mode)


WindowFn = Callable[[torch.Tensor], torch.Tensor]
"""Maps an ``(N, 1, w, w)`` batch of windows to ``(N, K, w, w)`` probabilities."""


def model_window_fn(model) -> WindowFn:
    def run(batch: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return model.predict_window(batch)

    return run


def stitch(
    px: np.ndarray,
    window_fn: WindowFn,
    window: int = 256,
    overlap: float = 0.75,
    batch_size: int = 8,
    max_depth: int = 4,
) -> tuple[np.ndarray, np.ndarray]:
    """Average window probabilities over a 2D intensity array.

    Returns the ``(K, H, W)`` float64 mean probability and the ``(H, W)``
    per-pixel coverage count.  Windows are accumulated in grid order.
    """
    h, w = px.shape
    padded = _reflect_pad(np.asarray(px, dtype=np.float32), window)
    H, W = padded.shape
    origins = window_grid(W, H, window, overlap, max_depth)
    total = None
    count = np.zeros((H, W), dtype=np.int64)
    for start in range(0, len(origins), batch_size):
        chunk = origins[start : start + batch_size]
        batch = np.stack([padded[y : y + window, x : x + window] for x, y in chunk])
        probs = window_fn(torch.from_numpy(batch)[:, None]).detach().cpu().numpy().astype(np.float64)
        if total is None:
            total = np.zeros((probs.shape[1], H, W), dtype=np.float64)
        for (x, y), p in zip(chunk, probs):
            total[:, y : y + window, x : x + window] += p
            count[y : y + window, x : x + window] += 1
    mean = total / count
    return mean[:, :h, :w], count[:h, :w]


def predict_mosaic(
    model,
    mosaic: Mosaic,
    window: int | None = None,
    overlap: float = 0.75,
    batch_size: int = 8,
    window_fn: WindowFn | None = None,
) -> tuple[ProbabilityMap, LabelMap]:
    """Sliding-window probabilities and argmax labels for a whole mosaic.

    Ties in the argmax resolve to the lowest class index.
    """
    if model is not None:
        model.eval()
        window = window or model.config.input_window
        max_depth = model.config.max_depth
        fn = window_fn or model_window_fn(model)
    else:
        if window_fn is None:
            raise ValueError("need a model or a window_fn")
        window = window or 256
        max_depth = 4
        fn = window_fn
    mean, _ = stitch(mosaic.pixels, fn, window, overlap, batch_size, max_depth)
    prob = ProbabilityMap(mean)
    return prob, prob.argmax()
