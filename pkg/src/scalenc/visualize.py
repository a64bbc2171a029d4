"""First-layer kernel grids."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff.checkpoint import load_checkpoint

FIRST_LAYER_KEY = "stem.weight"
SEPARATOR = 255


def normalize_weights(weights: np.ndarray) -> np.ndarray:
    """Joint min-max over every kernel, mapped to uint8 [0, 255]; a constant set maps to 128."""
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = w.min(), w.max()
    if hi == lo:
        return np.full(w.shape, 128, dtype=np.uint8)
    return np.rint((w - lo) / (hi - lo) * 255.0).astype(np.uint8)


def kernel_tiles(weights: np.ndarray) -> tuple[np.ndarray, bool]:
    """(n, k, k, 3) RGB tiles when the layer reads 3 channels, otherwise (n*c, k, k) grey tiles."""
    w = np.asarray(weights)
    if w.ndim != 4:
        raise ValueError(f"expected (out, in, kh, kw) kernels, got shape {w.shape}")
    norm = normalize_weights(w)
    if w.shape[1] == 3:
        return norm.transpose(0, 2, 3, 1), True
    return norm.reshape(-1, w.shape[2], w.shape[3]), False


def weight_grid(weights: np.ndarray, scale: int = 8, pad: int = 1, columns: int | None = None) -> np.ndarray:
    """Tile the normalised kernels into one image, each tap enlarged to ``scale`` pixels."""
    tiles, rgb = kernel_tiles(weights)
    n, kh, kw = tiles.shape[:3]
    cols = columns or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    th, tw = kh * scale, kw * scale
    shape = (rows * (th + pad) + pad, cols * (tw + pad) + pad) + ((3,) if rgb else ())
    grid = np.full(shape, SEPARATOR, dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        big = np.repeat(np.repeat(tiles[i], scale, axis=0), scale, axis=1)
        top, left = pad + r * (th + pad), pad + c * (tw + pad)
        grid[top : top + th, left : left + tw] = big
    return grid


def read_tile(grid: np.ndarray, index: int, kernel: int, scale: int = 8, pad: int = 1,
              columns: int = 1) -> np.ndarray:
    """Recover the normalised kernel values of tile ``index`` from a decoded grid."""
    r, c = divmod(index, columns)
    t = kernel * scale
    top, left = pad + r * (t + pad), pad + c * (t + pad)
    return grid[top : top + t : scale, left : left + t : scale]


def visualize_weights(checkpoint, out_path, scale: int = 8, key: str = FIRST_LAYER_KEY) -> Path:
    """Write the first-layer kernels of a checkpoint (path or weight array) as a PNG grid."""
    if isinstance(checkpoint, np.ndarray):
        weights = checkpoint
    else:
        arrays, _ = load_checkpoint(checkpoint)
        if key not in arrays:
            raise KeyError(f"checkpoint has no {key!r} entry")
        weights = arrays[key]
    grid = weight_grid(weights, scale=scale)
    out_path = Path(out_path)
    Image.fromarray(grid, mode="RGB" if grid.ndim == 3 else "L").save(out_path)
    return out_path
