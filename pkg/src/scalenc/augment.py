"""Stochastic views of 32x32 crops that keep the original-size metadata consistent.

Geometric transforms change the apparent extent of the object, so rotation
and resized crop also rewrite the (h, w) record fed to the scale-dependent
layer and to size injection. Flips, colour jitter and greyscale leave it
alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

GREY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class AugmentConfig:
    p_rotate: float = 0.5
    p_vflip: float = 0.5
    p_hflip: float = 0.5
    p_jitter: float = 0.5
    p_crop: float = 0.5
    p_grey: float = 0.5
    max_angle: float = 90.0
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_rotate=0, p_vflip=0, p_hflip=0, p_jitter=0, p_crop=0, p_grey=0)


def rotated_size(h: float, w: float, theta_deg: float) -> tuple[float, float]:
    """Bounding extent of an h x w box rotated by theta in [0, 90] degrees."""
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    return h * c + w * s, h * s + w * c


def rotate(img: np.ndarray, theta_deg: float) -> np.ndarray:
    """Rotate about the centre; bilinear, border pixels replicated."""
    side_h, side_w = img.shape[:2]
    m = cv2.getRotationMatrix2D(((side_w - 1) / 2.0, (side_h - 1) / 2.0), theta_deg, 1.0)
    return cv2.warpAffine(img, m, (side_w, side_h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def to_grey(img: np.ndarray) -> np.ndarray:
    g = img @ GREY_WEIGHTS
    return np.repeat(g[..., None], 3, axis=2)


def _rgb_to_hsv(img):
    return cv2.cvtColor(img, cv2.COLOR_RGB2HSV)


def color_jitter(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation and hue perturbations, applied in that order."""
    b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    h = rng.uniform(-cfg.hue, cfg.hue)
    out = np.clip(img * b, 0, 1)
    mean = float((out @ GREY_WEIGHTS).mean())
    out = np.clip((out - mean) * c + mean, 0, 1)
    grey = to_grey(out)
    out = np.clip((out - grey) * s + grey, 0, 1)
    if h:
        hsv = _rgb_to_hsv(out.astype(np.float32))
        # opencv float HSV uses hue in degrees [0, 360)
        hsv[..., 0] = (hsv[..., 0] + h * 360.0) % 360.0
        out = np.clip(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB), 0, 1)
    return out.astype(np.float32)


def resized_crop(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Random sub-window resized back to full size. Returns (image, row_fraction, col_fraction)."""
    side_h, side_w = img.shape[:2]
    area = side_h * side_w
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        ratio = np.exp(rng.uniform(np.log(cfg.crop_ratio[0]), np.log(cfg.crop_ratio[1])))
        cw = int(round(np.sqrt(target * ratio)))
        ch = int(round(np.sqrt(target / ratio)))
        if 0 < cw <= side_w and 0 < ch <= side_h:
            break
    else:
        ch, cw = side_h, side_w
    top = int(rng.integers(0, side_h - ch + 1))
    left = int(rng.integers(0, side_w - cw + 1))
    window = img[top : top + ch, left : left + cw]
    out = cv2.resize(window, (side_w, side_h), interpolation=cv2.INTER_LINEAR)
    return out, ch / side_h, cw / side_w


def augment(image: np.ndarray, size, rng: np.random.Generator, cfg: AugmentConfig | None = None):
    """One random view of an (H, W, 3) float image in [0, 1] and its original (h, w).

    Each transform fires independently with its own probability.
    """
    cfg = cfg or AugmentConfig()
    img = np.asarray(image, dtype=np.float32)
    h, w = float(size[0]), float(size[1])
    if rng.random() < cfg.p_rotate:
        theta = rng.uniform(0.0, cfg.max_angle)
        img = rotate(img, theta)
        h, w = rotated_size(h, w, theta)
    if rng.random() < cfg.p_vflip:
        img = img[::-1]
    if rng.random() < cfg.p_hflip:
        img = img[:, ::-1]
    if rng.random() < cfg.p_jitter:
        img = color_jitter(img, cfg, rng)
    if rng.random() < cfg.p_crop:
        img, fh, fw = resized_crop(np.ascontiguousarray(img), cfg, rng)
        h, w = h * fh, w * fw
    if rng.random() < cfg.p_grey:
        img = to_grey(img)
    img = np.clip(np.ascontiguousarray(img, dtype=np.float32), 0.0, 1.0)
    return img, (h, w)


@dataclass
class ViewPair:
    view_a: np.ndarray
    size_a: tuple[float, float]
    view_b: np.ndarray
    size_b: tuple[float, float]
    source_id: int


def view_pair(image, size, source_id: int, rng, cfg: AugmentConfig | None = None) -> ViewPair:
    a, sa = augment(image, size, rng, cfg)
    b, sb = augment(image, size, rng, cfg)
    return ViewPair(a, sa, b, sb, source_id)


def augment_batch(images: np.ndarray, sizes: np.ndarray, rng, cfg: AugmentConfig | None = None):
    """Augment an (N, H, W, 3) batch; returns (N, H, W, 3) float32 and (N, 2) sizes."""
    out = np.empty_like(images, dtype=np.float32)
    new_sizes = np.empty((len(images), 2), dtype=np.float64)
    for i in range(len(images)):
        out[i], new_sizes[i] = augment(images[i], sizes[i], rng, cfg)
    return out, new_sizes
