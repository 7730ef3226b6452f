"""Synthetic garment images, the ``glefmt v1`` annotation format, cropping and
Gaussian target heatmaps.

Landmarks live in a fixed 8-slot layout::

    L.Collar R.Collar L.Sleeve R.Sleeve L.Waistline R.Waistline L.Hem R.Hem

"L" is the image-left side. Upper-body garments have no waistline slots and
lower-body garments have no collar or sleeve slots.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .rasters import read_ppm, write_ppm

SLOTS = ("L.Collar", "R.Collar", "L.Sleeve", "R.Sleeve", "L.Waistline", "R.Waistline", "L.Hem", "R.Hem")
CATEGORIES = ("full_body", "upper", "lower")
PRESENT_SLOTS = {
    "full_body": frozenset(range(8)),
    "upper": frozenset((0, 1, 2, 3, 6, 7)),
    "lower": frozenset((4, 5, 6, 7)),
}
VISIBLE, OCCLUDED, ABSENT = 0, 1, 2
FORMAT_HEADER = "glefmt v1"
ANNOTATION_FILE = "annotations.txt"
IMAGE_DIR = "images"
MIN_IMAGE_SIZE = 32

_SUPERSAMPLE = 4


class AnnotationError(ValueError):
    """Raised for malformed annotation rows or broken category/absence invariants."""


@dataclass(frozen=True)
class LandmarkAnnotation:
    image_id: str
    category: str
    bbox: tuple  # (x0, y0, x1, y1); x1 - x0 is the crop width
    landmarks: tuple  # 8 x (x, y, visibility)

    def validate(self) -> None:
        if self.category not in CATEGORIES:
            raise AnnotationError(f"{self.image_id}: unknown category {self.category!r}")
        x0, y0, x1, y1 = self.bbox
        if not (x1 > x0 and y1 > y0):
            raise AnnotationError(f"{self.image_id}: degenerate bbox {self.bbox}")
        if len(self.landmarks) != len(SLOTS):
            raise AnnotationError(f"{self.image_id}: expected {len(SLOTS)} landmark slots, got {len(self.landmarks)}")
        present = PRESENT_SLOTS[self.category]
        for i, (x, y, vis) in enumerate(self.landmarks):
            if vis not in (VISIBLE, OCCLUDED, ABSENT):
                raise AnnotationError(f"{self.image_id}: slot {SLOTS[i]} has visibility code {vis}")
            if not (math.isfinite(x) and math.isfinite(y)):
                raise AnnotationError(f"{self.image_id}: slot {SLOTS[i]} has a non-finite coordinate")
            if i in present and vis == ABSENT:
                raise AnnotationError(f"{self.image_id}: slot {SLOTS[i]} must be present for category {self.category}")
            if i not in present and (vis != ABSENT or x != 0 or y != 0):
                raise AnnotationError(f"{self.image_id}: slot {SLOTS[i]} must be absent for category {self.category}")

    def check_bounds(self, width: int, height: int) -> None:
        for i, (x, y, vis) in enumerate(self.landmarks):
            if vis == VISIBLE and not (0 <= x <= width - 1 and 0 <= y <= height - 1):
                raise AnnotationError(f"{self.image_id}: visible slot {SLOTS[i]} at ({x}, {y}) "
                                      f"lies outside the {width}x{height} image")

    @property
    def visible_mask(self) -> np.ndarray:
        return np.array([vis == VISIBLE for _, _, vis in self.landmarks])


# ----------------------------------------------------------------------------
# annotation files


def _columns() -> list:
    cols = ["image_id", "category", "x0", "y0", "x1", "y1"]
    for name in SLOTS:
        cols += [f"{name}.x", f"{name}.y", f"{name}.v"]
    return cols


def _fmt(v: float) -> str:
    return repr(float(v)) if v != int(v) else str(int(v))


def save_annotations(path, annotations: Sequence[LandmarkAnnotation]) -> None:
    buf = io.StringIO()
    buf.write(FORMAT_HEADER + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_columns())
    for ann in annotations:
        row = [ann.image_id, ann.category] + [_fmt(v) for v in ann.bbox]
        for x, y, vis in ann.landmarks:
            row += [_fmt(x), _fmt(y), str(vis)]
        writer.writerow(row)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_annotations(path) -> list:
    """Parse and validate a ``glefmt v1`` file; errors name the file line."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != FORMAT_HEADER:
        raise AnnotationError(f"{path}: line 1: expected header {FORMAT_HEADER!r}")
    if len(lines) < 2 or lines[1].strip().split(",") != _columns():
        raise AnnotationError(f"{path}: line 2: unexpected column header")
    out, seen = [], set()
    for lineno, row in enumerate(csv.reader(lines[2:]), start=3):
        if not row:
            continue
        where = f"{path}: line {lineno}"
        if len(row) != len(_columns()):
            raise AnnotationError(f"{where}: expected {len(_columns())} fields, got {len(row)}")
        try:
            bbox = tuple(float(v) for v in row[2:6])
            lms = tuple((float(row[6 + 3 * i]), float(row[7 + 3 * i]), int(row[8 + 3 * i]))
                        for i in range(len(SLOTS)))
        except ValueError as exc:
            raise AnnotationError(f"{where}: {exc}") from exc
        ann = LandmarkAnnotation(row[0], row[1], bbox, lms)
        try:
            ann.validate()
        except AnnotationError as exc:
            raise AnnotationError(f"{where}: {exc}") from exc
        if ann.image_id in seen:
            raise AnnotationError(f"{where}: duplicate image_id {ann.image_id!r}")
        seen.add(ann.image_id)
        out.append(ann)
    return out


def save_dataset(root, dataset: Sequence[tuple]) -> None:
    root = Path(root)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    for image, ann in dataset:
        write_ppm(root / IMAGE_DIR / f"{ann.image_id}.ppm", image)
    save_annotations(root / ANNOTATION_FILE, [ann for _, ann in dataset])


def load_dataset(root) -> list:
    root = Path(root)
    out = []
    for ann in load_annotations(root / ANNOTATION_FILE):
        image = read_ppm(root / IMAGE_DIR / f"{ann.image_id}.ppm")
        ann.check_bounds(image.shape[1], image.shape[0])
        out.append((image, ann))
    return out


# ----------------------------------------------------------------------------
# synthetic garments


def stratified_counts(n: int, mix: Sequence[float]) -> list:
    """Largest-remainder apportionment of ``n`` items to the given proportions."""
    mix = np.asarray(mix, dtype=float)
    if mix.shape != (3,) or (mix < 0).any() or abs(mix.sum() - 1.0) > 1e-9:
        raise ValueError(f"category_mix must be 3 non-negative proportions summing to 1, got {tuple(mix)}")
    raw = n * mix
    counts = np.floor(raw).astype(int)
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _garment(category: str, rng: np.random.Generator) -> tuple:
    """Canonical garment in a unit-height frame (y down, x<0 is image-left).

    Returns (polygons, landmarks[8,2]) with NaN rows for absent slots.
    """
    lm = np.full((8, 2), np.nan)
    polys = []
    if category == "lower":
        ww = rng.uniform(0.14, 0.22)
        hw = rng.uniform(0.18, 0.34)
        lm[4], lm[5] = (-ww, -0.5), (ww, -0.5)
        if rng.random() < 0.5:
            leg = rng.uniform(0.12, 0.16)
            crotch = rng.uniform(-0.1, 0.1)
            polys.append([(-ww, -0.5), (ww, -0.5), (hw, 0.5), (hw - leg, 0.5), (0.0, crotch),
                          (-hw + leg, 0.5), (-hw, 0.5)])
            lm[6], lm[7] = (-hw + leg / 2, 0.5), (hw - leg / 2, 0.5)
        else:
            polys.append([(-ww, -0.5), (ww, -0.5), (hw, 0.5), (-hw, 0.5)])
            lm[6], lm[7] = (-hw, 0.5), (hw, 0.5)
        return polys, lm

    cw = rng.uniform(0.07, 0.12)
    sw = rng.uniform(0.18, 0.25)
    ax = sw * rng.uniform(0.82, 0.92)
    neck = rng.uniform(0.06, 0.14)
    shoulder, armpit = (sw, -0.42), (ax, -0.2)
    lm[0], lm[1] = (-cw, -0.5), (cw, -0.5)
    if category == "full_body":
        wy = rng.uniform(-0.05, 0.08)
        ww = rng.uniform(0.12, 0.18)
        hw = rng.uniform(0.22, 0.36)
        right = [(ax, -0.2), (ww, wy), (hw, 0.5)]
        lm[4], lm[5] = (-ww, wy), (ww, wy)
    else:
        hw = rng.uniform(0.19, 0.28)
        right = [(ax, -0.2), (hw, 0.5)]
    lm[6], lm[7] = (-hw, 0.5), (hw, 0.5)
    left = [(-x, y) for x, y in right]
    polys.append([(-cw, -0.5), (-sw, -0.42)] + left + right[::-1] + [(sw, -0.42), (cw, -0.5), (0.0, -0.5 + neck)])
    for side, slot in ((-1.0, 2), (1.0, 3)):
        angle = math.radians(rng.uniform(25.0, 75.0))
        length = rng.uniform(0.14, 0.32)
        d = np.array([side * math.cos(angle), math.sin(angle)]) * length
        s = np.array([side * shoulder[0], shoulder[1]])
        a = np.array([side * armpit[0], armpit[1]])
        polys.append([tuple(s), tuple(s + d), tuple(a + d), tuple(a)])
        lm[slot] = (s + a) / 2 + d
    return polys, lm


def _place(points: np.ndarray, size: int, rng: np.random.Generator) -> tuple:
    """Random similarity-ish transform (scale, x-stretch, rotation, shift) into the image."""
    margin = 4.0
    height = rng.uniform(0.55, 0.8) * size
    stretch = rng.uniform(0.85, 1.2)
    theta = math.radians(rng.uniform(-15.0, 15.0))
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    while True:
        lin = rot @ np.diag([height * stretch, height])
        p = points @ lin.T
        lo, hi = p.min(axis=0), p.max(axis=0)
        room = (size - 1 - 2 * margin) - (hi - lo)
        if (room >= 0).all():
            break
        height *= 0.9
    offset = margin - lo + rng.uniform(0.0, 1.0, size=2) * room
    return lin, offset


def _contrasting_color(rng: np.random.Generator, against: np.ndarray) -> np.ndarray:
    while True:
        c = rng.integers(0, 256, size=3)
        if np.abs(c.astype(int) - against.astype(int)).sum() > 180:
            return c


def render_garment(category: str, size: int, rng: np.random.Generator) -> tuple:
    """Draw one garment; returns (uint8 image [S,S,3], landmarks [8,2], visibility [8], bbox)."""
    polys, lm = _garment(category, rng)
    allpts = np.concatenate([np.asarray(p) for p in polys])
    lin, offset = _place(np.concatenate([allpts, lm[~np.isnan(lm[:, 0])]]), size, rng)
    polys = [np.asarray(p) @ lin.T + offset for p in polys]
    lm = lm @ lin.T + offset

    bg = rng.integers(0, 256, size=3)
    fg = _contrasting_color(rng, bg)
    hi = size * _SUPERSAMPLE
    canvas = Image.new("RGB", (hi, hi), tuple(int(v) for v in bg))
    draw = ImageDraw.Draw(canvas)
    # pixel i of the output covers supersampled pixels [4i, 4i+3], centred at 4i+1.5
    to_hi = lambda pts: [(float(x) * _SUPERSAMPLE + 1.5, float(y) * _SUPERSAMPLE + 1.5) for x, y in pts]
    for poly in polys:
        draw.polygon(to_hi(poly), fill=tuple(int(v) for v in fg))

    vis = np.full(8, ABSENT)
    present = sorted(PRESENT_SLOTS[category])
    vis[present] = VISIBLE
    radius = 0.05 * size
    for i in present:
        if rng.random() >= 0.05:
            continue
        others = [j for j in present if j != i and vis[j] == VISIBLE]
        if any(np.hypot(*(lm[j] - lm[i])) < 2.5 * radius for j in others):
            continue
        vis[i] = OCCLUDED
        color = tuple(int(v) for v in _contrasting_color(rng, fg))
        cx, cy = to_hi([lm[i]])[0]
        r = radius * _SUPERSAMPLE
        draw.ellipse((cx - r, cy - r, cx + r, cy + r), fill=color)

    hi_arr = np.asarray(canvas, dtype=np.float64)
    image = hi_arr.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE, 3).mean(axis=(1, 3))
    image += rng.normal(0.0, 6.0, size=image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)

    pts = np.concatenate(polys)
    lo = np.maximum(np.floor(pts.min(axis=0)) - 3, 0)
    hi_ = np.minimum(np.ceil(pts.max(axis=0)) + 4, size)
    bbox = (float(lo[0]), float(lo[1]), float(hi_[0]), float(hi_[1]))
    return image, lm, vis, bbox


def generate_synthetic_dataset(n: int, image_size: int, seed: int,
                               category_mix: Sequence[float] = (0.4, 0.4, 0.2)) -> list:
    """Deterministic list of ``(uint8 image [S,S,3], LandmarkAnnotation)``.

    Category counts are apportioned exactly (largest remainder) and then
    shuffled; each image draws from its own ``default_rng([seed, index])``.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    if image_size < MIN_IMAGE_SIZE:
        raise ValueError(f"image_size too small: {image_size} < {MIN_IMAGE_SIZE}")
    counts = stratified_counts(n, category_mix)
    cats = [c for c, k in zip(CATEGORIES, counts) for _ in range(k)]
    cats = [cats[i] for i in np.random.default_rng(seed).permutation(n)]
    out = []
    for i, category in enumerate(cats):
        image, lm, vis, bbox = render_garment(category, image_size, np.random.default_rng([seed, i]))
        slots = tuple((0.0, 0.0, ABSENT) if v == ABSENT else (float(x), float(y), int(v))
                      for (x, y), v in zip(lm, vis))
        ann = LandmarkAnnotation(f"img_{i:05d}", category, bbox, slots)
        ann.validate()
        out.append((image, ann))
    return out


# ----------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class CropTransform:
    """Maps original pixel coordinates to resized-crop coordinates: ``u = (x - x0) * sx``."""

    x0: float
    y0: float
    sx: float
    sy: float

    def apply(self, x, y):
        return (np.asarray(x) - self.x0) * self.sx, (np.asarray(y) - self.y0) * self.sy

    def inverse(self, u, v):
        return np.asarray(u) / self.sx + self.x0, np.asarray(v) / self.sy + self.y0


def _bilinear_axis(coords: np.ndarray, n: int) -> tuple:
    c = np.clip(coords, 0.0, n - 1)
    i0 = np.floor(c).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, c - i0


def crop_and_resize(image: np.ndarray, bbox, target_size: int) -> tuple:
    """Crop ``image`` ([H,W,3] uint8 or float in [0,1]) to ``bbox`` and bilinearly
    resize to ``target_size``; returns (Tensor-ready array [3,S,S] in [0,1], CropTransform)."""
    x0, y0, x1, y1 = (float(v) for v in bbox)
    h, w = image.shape[:2]
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate bbox {tuple(bbox)}")
    if x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
        raise ValueError(f"bbox {tuple(bbox)} does not intersect the {w}x{h} image")
    img = image.astype(np.float64) / 255.0 if image.dtype == np.uint8 else np.asarray(image, dtype=np.float64)
    t = CropTransform(x0, y0, target_size / (x1 - x0), target_size / (y1 - y0))
    xs, ys = t.inverse(np.arange(target_size, dtype=np.float64), np.arange(target_size, dtype=np.float64))
    cx0, cx1, fx = _bilinear_axis(xs, w)
    cy0, cy1, fy = _bilinear_axis(ys, h)
    top = img[cy0][:, cx0] * (1 - fx)[None, :, None] + img[cy0][:, cx1] * fx[None, :, None]
    bot = img[cy1][:, cx0] * (1 - fx)[None, :, None] + img[cy1][:, cx1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return np.ascontiguousarray(out.transpose(2, 0, 1)), t


def default_sigma(size: int) -> float:
    return size / 32.0


def render_target_heatmaps(annotation: LandmarkAnnotation, transform: CropTransform, size: int,
                           sigma: Optional[float] = None) -> tuple:
    """Gaussian targets peaking at 1.0 on the rounded transformed landmark.

    Returns (maps [8,S,S], mask [8] bool, gt_coords [8,2]); only visible slots
    are unmasked, masked channels are zero and their coordinates NaN.
    """
    sigma = default_sigma(size) if sigma is None else sigma
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    maps = np.zeros((len(SLOTS), size, size))
    mask = np.zeros(len(SLOTS), dtype=bool)
    gt = np.full((len(SLOTS), 2), np.nan)
    grid = np.arange(size, dtype=np.float64)
    for i, (x, y, vis) in enumerate(annotation.landmarks):
        if vis != VISIBLE:
            continue
        u, v = (float(c) for c in transform.apply(x, y))
        gt[i] = (u, v)
        mask[i] = True
        cu = min(max(math.floor(u + 0.5), 0), size - 1)
        cv = min(max(math.floor(v + 0.5), 0), size - 1)
        gx = np.exp(-((grid - cu) ** 2) / (2 * sigma * sigma))
        gy = np.exp(-((grid - cv) ** 2) / (2 * sigma * sigma))
        maps[i] = gy[:, None] * gx[None, :]
    return maps, mask, gt


@dataclass
class Sample:
    image: np.ndarray  # [3,S,S]
    target: np.ndarray  # [8,S,S]
    mask: np.ndarray  # [8] bool
    gt_coords: np.ndarray  # [8,2], NaN where masked
    image_id: str = ""
    category: str = ""


def prepare_samples(dataset: Sequence[tuple], size: int, sigma: Optional[float] = None,
                    crop: bool = True) -> list:
    """Turn ``(image, annotation)`` pairs into network-ready samples.

    With ``crop=False`` the whole image is resized (bbox = full frame).
    """
    out = []
    for image, ann in dataset:
        bbox = ann.bbox if crop else (0.0, 0.0, float(image.shape[1]), float(image.shape[0]))
        arr, t = crop_and_resize(image, bbox, size)
        maps, mask, gt = render_target_heatmaps(ann, t, size, sigma)
        out.append(Sample(arr, maps, mask, gt, ann.image_id, ann.category))
    return out
