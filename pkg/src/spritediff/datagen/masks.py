"""Mask generators for inpainting fine-tuning. Masks are (1, H, W) float
arrays with 1 on the known (kept) region and 0 where content was erased."""

from __future__ import annotations

import numpy as np

MASK_KINDS = ("full", "rectangle", "halfplane")
FULL_MASK_PROB = 0.1  # everything erased: keeps unconditional generation alive


def random_mask(rng, size):
    """Draw one training mask; returns (mask, kind)."""
    u = rng.random()
    if u < FULL_MASK_PROB:
        return np.zeros((1, size, size), dtype=np.float32), "full"
    kind = "rectangle" if u < FULL_MASK_PROB + 0.45 else "halfplane"
    mask = np.ones((1, size, size), dtype=np.float32)
    if kind == "rectangle":
        h = int(rng.integers(size // 4, size - 1))
        w = int(rng.integers(size // 4, size - 1))
        r = int(rng.integers(0, size - h + 1))
        c = int(rng.integers(0, size - w + 1))
        mask[0, r:r + h, c:c + w] = 0.0
    else:
        rows, cols = np.mgrid[0:size, 0:size]
        while True:  # redraw until the half-plane actually crosses the canvas
            theta = rng.random() * 2 * np.pi
            nr, nc = np.sin(theta), np.cos(theta)
            pr, pc = rng.random() * size, rng.random() * size
            erased = (rows - pr) * nr + (cols - pc) * nc > 0
            if 0 < erased.sum() < size * size:
                break
        mask[0, erased] = 0.0
    return mask, kind
