"""The 68 handcrafted object descriptors.

The first 36 entries describe the object mask itself; the last 32 repeat the
appearance measurements on the mask dilated by a radius-4 disk, which adds
the immediate surroundings. Order (see :data:`FEATURE_NAMES`)::

    nucleus_area, nucleus_width, nucleus_height, nucleus_elongation,
    nucleus_circularity,
    nucleus_{mean,std}_{r,g,b,grey}                  (means first, then stds)
    nucleus_lbp_r1_q10 ... q90, nucleus_lbp_r3_q10 ... q90
    nucleus_gran_1 ... gran_5
    dilated_area, dilated_{mean,std}_..., dilated_lbp_..., dilated_gran_...
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.measure import perimeter

log = logging.getLogger(__name__)

GREY = np.array([0.299, 0.587, 0.114])
QUANTILES = np.linspace(0.1, 0.9, 9)
LBP_RADII = (1, 3)
GRAN_SIZES = (1, 2, 3, 4, 5)
DILATION_RADIUS = 4

_CHANNELS = ("r", "g", "b", "grey")


def _appearance_names(prefix: str) -> list[str]:
    names = [f"{prefix}_mean_{c}" for c in _CHANNELS] + [f"{prefix}_std_{c}" for c in _CHANNELS]
    for r in LBP_RADII:
        names += [f"{prefix}_lbp_r{r}_q{int(round(q * 100))}" for q in QUANTILES]
    names += [f"{prefix}_gran_{s}" for s in GRAN_SIZES]
    return names


FEATURE_NAMES: tuple[str, ...] = tuple(
    ["nucleus_area", "nucleus_width", "nucleus_height", "nucleus_elongation", "nucleus_circularity"]
    + _appearance_names("nucleus")
    + ["dilated_area"]
    + _appearance_names("dilated")
)
assert len(FEATURE_NAMES) == 68


@dataclass
class FeatureVector:
    values: np.ndarray
    names: tuple[str, ...] = FEATURE_NAMES
    warnings: list[str] = field(default_factory=list)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def __len__(self) -> int:
        return len(self.values)


def disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def to_grey(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img / 255.0
    return np.asarray(img, dtype=np.float64) @ GREY


def _as_float_rgb(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img / 255.0
    return np.asarray(img, dtype=np.float64)


# ---------------------------------------------------------------------------
# local binary patterns
# ---------------------------------------------------------------------------

def _sample(grey: np.ndarray, rr: np.ndarray, cc: np.ndarray) -> np.ndarray:
    """Bilinear sample at float coordinates; coordinates outside the image take the nearest edge pixel."""
    h, w = grey.shape
    r0 = np.floor(rr).astype(np.int64)
    c0 = np.floor(cc).astype(np.int64)
    dr = rr - r0
    dc = cc - c0

    def px(r, c):
        return grey[np.clip(r, 0, h - 1), np.clip(c, 0, w - 1)]

    v00, v01 = px(r0, c0), px(r0, c0 + 1)
    v10, v11 = px(r0 + 1, c0), px(r0 + 1, c0 + 1)
    # lerp form is exact on constant neighbourhoods
    top = v00 + dc * (v01 - v00)
    bottom = v10 + dc * (v11 - v10)
    return top + dr * (bottom - top)


def lbp_offsets(radius: int) -> tuple[np.ndarray, np.ndarray]:
    p = 8 * radius
    theta = 2 * np.pi * np.arange(p) / p
    return np.round(-radius * np.sin(theta), 5), np.round(radius * np.cos(theta), 5)


def lbp_codes(grey: np.ndarray, radius: int) -> np.ndarray:
    """Per-pixel LBP code with P = 8 * radius neighbours; bit p is set when neighbour p >= centre."""
    grey = np.asarray(grey, dtype=np.float64)
    h, w = grey.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    drs, dcs = lbp_offsets(radius)
    codes = np.zeros((h, w), dtype=np.int64)
    for p, (dr, dc) in enumerate(zip(drs, dcs)):
        neigh = _sample(grey, rows + dr, cols + dc)
        codes |= (neigh >= grey).astype(np.int64) << p
    return codes


def lbp_quantiles(grey: np.ndarray, mask: np.ndarray, radius: int) -> np.ndarray:
    """10%..90% quantiles (linear interpolation) of LBP codes over the mask pixels."""
    if radius not in LBP_RADII:
        raise ValueError(f"LBP radius must be one of {LBP_RADII}, got {radius}")
    grey = np.asarray(grey, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    side = 2 * radius + 1
    if grey.shape[0] < side or grey.shape[1] < side:
        raise ValueError(f"region {grey.shape} smaller than the {side}x{side} LBP neighbourhood")
    if not mask.any():
        raise ValueError("empty mask")
    codes = lbp_codes(grey, radius)[mask].astype(np.float64)
    return np.quantile(codes, QUANTILES)


# ---------------------------------------------------------------------------
# granulometry and morphology
# ---------------------------------------------------------------------------

def grey_opening(grey: np.ndarray, radius: int) -> np.ndarray:
    """Opening by a disk; the structuring element only sees in-image pixels."""
    if radius == 0:
        return grey
    fp = disk(radius)
    # 'nearest' replication equals ignoring out-of-image pixels for convex, axis-symmetric footprints
    eroded = ndimage.grey_erosion(grey, footprint=fp, mode="nearest")
    return ndimage.grey_dilation(eroded, footprint=fp, mode="nearest")


def granulometry(grey: np.ndarray, mask: np.ndarray, sizes=GRAN_SIZES) -> np.ndarray:
    """Pattern spectrum: mass removed inside the mask by each successive disk opening, over total mass."""
    grey = np.asarray(grey, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    total = grey[mask].sum()
    if total <= 0:
        return np.zeros(len(sizes))
    out = []
    prev = grey[mask].sum()
    for s in sizes:
        cur = grey_opening(grey, s)[mask].sum()
        out.append((prev - cur) / total)
        prev = cur
    return np.array(out)


def dilate_mask(mask: np.ndarray, radius: int = DILATION_RADIUS) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return ndimage.binary_dilation(mask, structure=disk(radius))


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------

def shape_features(mask: np.ndarray) -> dict[str, float]:
    """Area, bounding-box width/height, elongation and circularity of a binary mask.

    Elongation is the major/minor axis ratio of the second-moment ellipse,
    treating each pixel as a unit square (adds 1/12 to each variance).
    Circularity is 4 pi area / perimeter^2 with a 4-connected perimeter,
    capped at 1.
    """
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    area = float(len(rows))
    height = float(rows.max() - rows.min() + 1)
    width = float(cols.max() - cols.min() + 1)
    cov = np.cov(np.stack([rows, cols]).astype(np.float64), bias=True) + np.eye(2) / 12.0
    evals = np.linalg.eigvalsh(cov)
    elongation = float(np.sqrt(evals[1] / evals[0]))
    per = perimeter(mask, neighborhood=4)
    if per <= 0:
        per = 4.0 * np.sqrt(area)
    # tiny masks have underestimated perimeters; a disk is the upper bound
    circularity = float(min(4 * np.pi * area / per**2, 1.0))
    return {"area": area, "width": width, "height": height, "elongation": elongation,
            "circularity": circularity}


def _appearance(rgb: np.ndarray, grey: np.ndarray, mask: np.ndarray) -> list[float]:
    chans = [rgb[..., 0][mask], rgb[..., 1][mask], rgb[..., 2][mask], grey[mask]]
    # std is shift invariant; shifting by one sample keeps constant regions at exactly 0
    feats = [float(c.mean()) for c in chans] + [float((c - c[0]).std()) for c in chans]
    for r in LBP_RADII:
        feats += lbp_quantiles(grey, mask, r).tolist()
    feats += granulometry(grey, mask).tolist()
    return feats


def _touches_border(mask: np.ndarray) -> bool:
    return bool(mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any())


def extract_features(image: np.ndarray, mask: np.ndarray) -> FeatureVector:
    """68 descriptors of one object from its native-resolution RGB crop and mask."""
    mask = np.asarray(mask, dtype=bool)
    rgb = _as_float_rgb(image)
    if rgb.shape[:2] != mask.shape:
        raise ValueError(f"image {rgb.shape[:2]} and mask {mask.shape} differ in size")
    if not mask.any():
        raise ValueError("empty mask")
    warnings = []
    if _touches_border(mask):
        warnings.append("mask touches the crop border")
    grey = rgb @ GREY
    shape = shape_features(mask)
    dil = dilate_mask(mask)
    if _touches_border(dil) and not warnings:
        warnings.append("dilated mask touches the crop border")
    values = [shape["area"], shape["width"], shape["height"], shape["elongation"], shape["circularity"]]
    values += _appearance(rgb, grey, mask)
    values.append(float(dil.sum()))
    values += _appearance(rgb, grey, dil)
    fv = FeatureVector(np.array(values, dtype=np.float64), FEATURE_NAMES, warnings)
    if not np.all(np.isfinite(fv.values)):
        raise FloatingPointError("non-finite handcrafted feature")
    return fv


def feature_matrix(objects) -> tuple[np.ndarray, list[list[str]]]:
    """Features for every object of an :class:`~scalenc.dataio.ObjectSet`."""
    rows, flags = [], []
    for img, mask in objects.natives:
        fv = extract_features(img, mask)
        rows.append(fv.values)
        flags.append(fv.warnings)
    return np.array(rows).reshape(-1, len(FEATURE_NAMES)), flags


def write_feature_csv(path, ids, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["object_id", *FEATURE_NAMES])
        for oid, row in zip(ids, matrix):
            w.writerow([oid, *(f"{v:.10g}" for v in row)])


def read_feature_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[1:]) != FEATURE_NAMES:
            raise ValueError(f"{path}: header does not match the feature schema")
        ids, rows = [], []
        for row in reader:
            ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return ids, np.array(rows).reshape(-1, len(FEATURE_NAMES))


def schema() -> list[dict]:
    """Machine-readable feature order."""
    return [{"index": i, "name": n} for i, n in enumerate(FEATURE_NAMES)]
