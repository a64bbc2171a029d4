"""Object crops, on-disk dataset formats and the synthetic multi-scale generator.

Generic dataset directory::

    <root>/
      index.csv            columns: file, slide_id
      images/<file>.png    8-bit RGB
      instances/<file>.png 16-bit single channel, 0 = background, k > 0 = object id
      classes/<file>.png   8-bit single channel, 0 = background, c + 1 = class c

Crop cache archive (an uncompressed zip)::

    index.csv      record, slide_id, instance_id, label, h, w, native_offset
                   (label = -1 when absent; native_offset indexes native.bin)
    crops.f32      N x 32 x 32 x 3 little-endian float32, C order
    native.bin     per record: u16 h, u16 w, h*w*3 bytes RGB, h*w bytes mask
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

CROP_MARGIN = 5
CROP_SIDE = 32
MIN_AREA = 4


class DataError(ValueError):
    pass


@dataclass
class ObjectRecord:
    image: np.ndarray  # (32, 32, 3) float32 in [0, 1]
    size: tuple[int, int]  # (h, w) of the crop before resizing
    native_image: np.ndarray  # (h, w, 3) uint8
    native_mask: np.ndarray  # (h, w) bool
    label: int | None = None
    slide_id: str = ""
    instance_id: int = 0


@dataclass
class ObjectSet:
    """Column-oriented batch of records, the form the trainers consume."""

    images: np.ndarray
    sizes: np.ndarray
    labels: np.ndarray | None
    slide_ids: np.ndarray
    instance_ids: np.ndarray
    natives: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_records(cls, records: list[ObjectRecord]) -> "ObjectSet":
        labels = [r.label for r in records]
        has_labels = records and all(lbl is not None for lbl in labels)
        return cls(
            images=np.stack([r.image for r in records]).astype(np.float32) if records
            else np.zeros((0, CROP_SIDE, CROP_SIDE, 3), np.float32),
            sizes=np.array([r.size for r in records], dtype=np.float64).reshape(-1, 2),
            labels=np.array(labels, dtype=np.int64) if has_labels else None,
            slide_ids=np.array([r.slide_id for r in records], dtype=object),
            instance_ids=np.array([r.instance_id for r in records], dtype=np.int64),
            natives=[(r.native_image, r.native_mask) for r in records],
        )

    def subset(self, idx) -> "ObjectSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ObjectSet(
            images=self.images[idx],
            sizes=self.sizes[idx],
            labels=None if self.labels is None else self.labels[idx],
            slide_ids=self.slide_ids[idx],
            instance_ids=self.instance_ids[idx],
            natives=[self.natives[i] for i in idx] if self.natives else [],
        )


def resize_bilinear(img: np.ndarray, side: int = CROP_SIDE) -> np.ndarray:
    return cv2.resize(img, (side, side), interpolation=cv2.INTER_LINEAR)


def label_components(binary: np.ndarray) -> np.ndarray:
    """8-connected component labelling of a binary mask."""
    labels, _ = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
    return labels


def prepare_crops(image: np.ndarray, instance_map: np.ndarray, class_map: np.ndarray | None = None,
                  slide_id: str = "", margin: int = CROP_MARGIN) -> list[ObjectRecord]:
    """One record per instance id: bounding box plus margin, clipped, resized to 32x32."""
    image = np.asarray(image)
    instance_map = np.asarray(instance_map)
    if image.shape[:2] != instance_map.shape:
        raise DataError(f"image {image.shape[:2]} and instance map {instance_map.shape} differ in size")
    if np.any(instance_map < 0):
        raise DataError("instance map must be non-negative")
    if image.dtype != np.uint8:
        image = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    H, W = instance_map.shape
    records = []
    slices = ndimage.find_objects(instance_map.astype(np.int64))
    for inst_id, sl in enumerate(slices, start=1):
        if sl is None:
            continue
        inst_mask_full = instance_map[sl] == inst_id
        area = int(inst_mask_full.sum())
        if area < MIN_AREA:
            log.warning("skipping instance %d of slide %r: area %d px < %d", inst_id, slide_id, area, MIN_AREA)
            continue
        r0, r1 = max(sl[0].start - margin, 0), min(sl[0].stop + margin, H)
        c0, c1 = max(sl[1].start - margin, 0), min(sl[1].stop + margin, W)
        native = image[r0:r1, c0:c1].copy()
        mask = instance_map[r0:r1, c0:c1] == inst_id
        label = None
        if class_map is not None:
            vals = np.asarray(class_map)[r0:r1, c0:c1][mask]
            vals = vals[vals > 0]
            if vals.size:
                label = int(np.bincount(vals).argmax()) - 1
        resized = resize_bilinear(native).astype(np.float32) / 255.0
        records.append(ObjectRecord(resized, (r1 - r0, c1 - c0), native, mask, label, slide_id, inst_id))
    return records


# ---------------------------------------------------------------------------
# generic on-disk format
# ---------------------------------------------------------------------------

def write_dataset(root, slides: list[dict]) -> None:
    """``slides``: dicts with keys file, slide_id, image, instances and optional classes."""
    root = Path(root)
    for sub in ("images", "instances", "classes"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    with open(root / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "slide_id"])
        for s in slides:
            name = s["file"]
            Image.fromarray(np.asarray(s["image"], dtype=np.uint8), mode="RGB").save(root / "images" / f"{name}.png")
            inst = np.asarray(s["instances"])
            if inst.max(initial=0) > 65535:
                raise DataError(f"{name}: more than 65535 instances")
            Image.fromarray(inst.astype(np.uint16)).save(root / "instances" / f"{name}.png")
            if s.get("classes") is not None:
                Image.fromarray(np.asarray(s["classes"], dtype=np.uint8), mode="L").save(
                    root / "classes" / f"{name}.png")
            w.writerow([name, s["slide_id"]])


def read_dataset(root) -> list[dict]:
    root = Path(root)
    index = root / "index.csv"
    if not index.exists():
        raise DataError(f"{root}: missing index.csv")
    slides = []
    with open(index, newline="") as fh:
        for row in csv.DictReader(fh):
            name = row["file"]
            cls_path = root / "classes" / f"{name}.png"
            slides.append({
                "file": name,
                "slide_id": row["slide_id"],
                "image": np.array(Image.open(root / "images" / f"{name}.png").convert("RGB")),
                "instances": np.array(Image.open(root / "instances" / f"{name}.png")).astype(np.uint16),
                "classes": np.array(Image.open(cls_path)) if cls_path.exists() else None,
            })
    return slides


def load_objects(root) -> ObjectSet:
    records = []
    for s in read_dataset(root):
        records.extend(prepare_crops(s["image"], s["instances"], s["classes"], s["slide_id"]))
    return ObjectSet.from_records(records)


def dataset_fingerprint(root) -> str:
    """SHA-256 over every file of a dataset directory, in sorted path order."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# crop cache archive
# ---------------------------------------------------------------------------

def save_crop_archive(path, objects: ObjectSet) -> None:
    index = io.StringIO()
    w = csv.writer(index)
    w.writerow(["record", "slide_id", "instance_id", "label", "h", "w", "native_offset"])
    native = io.BytesIO()
    for i in range(len(objects)):
        img, mask = objects.natives[i]
        h, wd = mask.shape
        label = -1 if objects.labels is None else int(objects.labels[i])
        w.writerow([i, objects.slide_ids[i], int(objects.instance_ids[i]), label,
                    int(objects.sizes[i, 0]), int(objects.sizes[i, 1]), native.tell()])
        native.write(struct.pack("<HH", h, wd))
        native.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())
        native.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("index.csv", index.getvalue())
        zf.writestr("crops.f32", np.ascontiguousarray(objects.images, dtype="<f4").tobytes())
        zf.writestr("native.bin", native.getvalue())


def load_crop_archive(path) -> ObjectSet:
    with zipfile.ZipFile(path) as zf:
        rows = list(csv.DictReader(io.StringIO(zf.read("index.csv").decode())))
        crops = np.frombuffer(zf.read("crops.f32"), dtype="<f4").reshape(-1, CROP_SIDE, CROP_SIDE, 3)
        native = zf.read("native.bin")
    natives = []
    for row in rows:
        off = int(row["native_offset"])
        h, w = struct.unpack_from("<HH", native, off)
        off += 4
        img = np.frombuffer(native, np.uint8, h * w * 3, off).reshape(h, w, 3).copy()
        off += h * w * 3
        mask = np.frombuffer(native, np.uint8, h * w, off).reshape(h, w).astype(bool)
        natives.append((img, mask))
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    return ObjectSet(
        images=crops.astype(np.float32),
        sizes=np.array([[float(r["h"]), float(r["w"])] for r in rows]).reshape(-1, 2),
        labels=None if (labels < 0).any() or not len(rows) else labels,
        slide_ids=np.array([r["slide_id"] for r in rows], dtype=object),
        instance_ids=np.array([int(r["instance_id"]) for r in rows], dtype=np.int64),
        natives=natives,
    )


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split(slide_ids, fractions=(0.8, 0.2), seed: int = 0, labels=None) -> tuple[list[np.ndarray], list[str]]:
    """Slide-aware partition of object indices.

    Slides are shuffled with ``seed`` and dealt into consecutive groups whose
    sizes are ``round(fraction * n_slides)`` (the last group takes the rest).
    Returns the index arrays and any warnings about classes missing from a part.
    """
    slide_ids = np.asarray(slide_ids)
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise DataError(f"split fractions must be non-negative and sum to 1, got {fractions.tolist()}")
    slides = np.array(sorted(set(slide_ids.tolist())))
    order = np.random.default_rng(seed).permutation(len(slides))
    counts = [int(round(f * len(slides))) for f in fractions[:-1]]
    counts.append(len(slides) - sum(counts))
    if counts[-1] < 0:
        raise DataError("split fractions round to more slides than available")
    parts, lo = [], 0
    for c in counts:
        chosen = set(slides[order[lo : lo + c]].tolist())
        parts.append(np.flatnonzero([s in chosen for s in slide_ids.tolist()]))
        lo += c
    warnings = []
    if labels is not None:
        labels = np.asarray(labels)
        every = set(np.unique(labels).tolist())
        for i, idx in enumerate(parts):
            missing = sorted(every - set(np.unique(labels[idx]).tolist()))
            if missing:
                warnings.append(f"split part {i} is missing classes {missing}")
                log.warning(warnings[-1])
    return parts, warnings


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Desk-scale stand-in for nuclei data.

    Objects are filled ellipses with a sinusoidal stripe texture. The stripe
    period is tied to the object's own diameter (``texture_cycles`` periods
    across it), so after resizing to 32x32 two classes with equal cycle
    counts look alike and are told apart only by their original size.
    Colour, orientation and stripe phase vary per object independently of
    class.
    """

    n_objects: int = 600
    size_ranges: tuple = ((12, 20), (40, 80), (40, 80))
    texture_cycles: tuple = (3.0, 3.0, 6.0)
    proportions: tuple | None = None
    noise: float = 0.04
    slide_side: int = 384
    seed: int = 0
    aspect_range: tuple = (0.7, 1.0)
    prefix: str = "slide"

    @property
    def num_classes(self) -> int:
        return len(self.size_ranges)


def _class_counts(spec: SyntheticSpec) -> list[int]:
    props = np.ones(spec.num_classes) if spec.proportions is None else np.asarray(spec.proportions, float)
    props = props / props.sum()
    raw = props * spec.n_objects
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: spec.n_objects - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _background(rng, side: int) -> np.ndarray:
    coarse = rng.random((side // 16 + 2, side // 16 + 2, 3))
    smooth = cv2.resize(coarse, (side, side), interpolation=cv2.INTER_CUBIC)
    base = np.array([0.92, 0.78, 0.86])
    return np.clip(base + 0.08 * (smooth - 0.5), 0, 1)


def _render_object(canvas, inst, cls_map, obj_id, cls, cy, cx, a, b, angle, cycles, color, phase):
    half = int(np.ceil(max(a, b) / 2)) + 1
    ys, xs = np.mgrid[cy - half : cy + half + 1, cx - half : cx + half + 1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = (xs - cx) * ca + (ys - cy) * sa
    v = -(xs - cx) * sa + (ys - cy) * ca
    inside = (u / (a / 2)) ** 2 + (v / (b / 2)) ** 2 <= 1.0
    stripe = 0.5 + 0.5 * np.sin(2 * np.pi * cycles * u / a + phase)
    shade = 0.55 + 0.45 * stripe
    pix = color[None, None, :] * shade[..., None]
    region = (slice(cy - half, cy + half + 1), slice(cx - half, cx + half + 1))
    canvas[region][inside] = pix[inside]
    inst[region][inside] = obj_id
    cls_map[region][inside] = cls + 1


def generate_slides(spec: SyntheticSpec) -> list[dict]:
    """Render the slides in memory (see :func:`generate_synthetic` for the on-disk variant)."""
    rng = np.random.default_rng(spec.seed)
    labels = np.concatenate([np.full(c, k) for k, c in enumerate(_class_counts(spec))])
    labels = labels[rng.permutation(len(labels))]
    side = spec.slide_side
    slides = []
    dropped = 0

    def new_slide():
        return {
            "canvas": _background(rng, side),
            "inst": np.zeros((side, side), np.uint16),
            "cls": np.zeros((side, side), np.uint8),
            "boxes": [],
            "next_id": 1,
        }

    cur = new_slide()
    for cls in labels:
        lo, hi = spec.size_ranges[cls]
        a = rng.uniform(lo, hi)
        b = a * rng.uniform(*spec.aspect_range)
        angle = rng.uniform(0, np.pi)
        hue_shift = rng.uniform(-1, 1)
        color = np.clip(np.array([0.45, 0.25, 0.60]) + 0.18 * hue_shift * np.array([1.0, 0.3, -0.6])
                        + rng.normal(0, 0.04, 3), 0.05, 0.95) * rng.uniform(0.7, 1.15)
        phase = rng.uniform(0, 2 * np.pi)
        half = int(np.ceil(a / 2)) + 1
        placed = False
        for attempt in range(2):
            for _ in range(100):
                cy = int(rng.integers(half + CROP_MARGIN, side - half - CROP_MARGIN))
                cx = int(rng.integers(half + CROP_MARGIN, side - half - CROP_MARGIN))
                box = (cy - half - CROP_MARGIN, cy + half + CROP_MARGIN, cx - half - CROP_MARGIN,
                       cx + half + CROP_MARGIN)
                if all(box[1] <= o[0] or box[0] >= o[1] or box[3] <= o[2] or box[2] >= o[3] for o in cur["boxes"]):
                    placed = True
                    break
            if placed or attempt == 1:
                break
            slides.append(cur)
            cur = new_slide()
        if not placed:
            dropped += 1
            continue
        cur["boxes"].append(box)
        _render_object(cur["canvas"], cur["inst"], cur["cls"], cur["next_id"], int(cls), cy, cx, a, b, angle,
                       spec.texture_cycles[cls], color, phase)
        cur["next_id"] += 1
    slides.append(cur)
    if dropped:
        log.warning("synthetic generator dropped %d objects after 100 placement attempts", dropped)
    out = []
    for i, s in enumerate(slides):
        img = np.clip(s["canvas"] + rng.normal(0, spec.noise, s["canvas"].shape), 0, 1)
        name = f"{spec.prefix}_{i:04d}"
        out.append({
            "file": name,
            "slide_id": name,
            "image": np.round(img * 255).astype(np.uint8),
            "instances": s["inst"],
            "classes": s["cls"],
        })
    return out


def generate_synthetic(spec: SyntheticSpec, root) -> Path:
    root = Path(root)
    write_dataset(root, generate_slides(spec))
    return root


def synthetic_objects(spec: SyntheticSpec) -> ObjectSet:
    """Generate and crop in memory, bypassing the disk round trip."""
    records = []
    for s in generate_slides(spec):
        records.extend(prepare_crops(s["image"], s["instances"], s["classes"], s["slide_id"]))
    return ObjectSet.from_records(records)
