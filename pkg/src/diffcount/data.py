"""Datasets: synthetic multi-class blob scenes, FSC147-format loading,
augmentations, and the exemplar-driven resize rule.

Images are H x W x 3 uint8 arrays; annotations use pixel coordinates with
x = column, y = row.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .locmap import ExemplarBox, PointSet

log = logging.getLogger(__name__)

__all__ = [
    "SceneAnnotation",
    "SceneSample",
    "SceneDataset",
    "SynthConfig",
    "synth_generate",
    "load_fsc_format",
    "augment",
    "hflip_sample",
    "tile_sample",
    "resize_rule",
    "resize_to",
    "ResizeTransform",
    "PlacementError",
]


class PlacementError(RuntimeError):
    """Raised when object placement cannot satisfy the separation constraints."""


@dataclass
class SceneAnnotation:
    image_id: str
    height: int
    width: int
    exemplar_boxes: list[ExemplarBox]
    gt_points: PointSet
    point_boxes: list[ExemplarBox] | None = None
    class_ids: list[int] | None = None
    split: str = "train"

    @property
    def count(self) -> int:
        return len(self.gt_points)

    def validate(self) -> None:
        self.gt_points.validate(self.height, self.width)
        for b in self.exemplar_boxes:
            if b.x_min < 0 or b.y_min < 0 or b.x_max > self.width or b.y_max > self.height:
                raise ValueError(f"exemplar box out of bounds: {b}")
        if self.point_boxes is not None and len(self.point_boxes) != len(self.gt_points):
            raise ValueError("point_boxes must align with gt_points")
        if self.class_ids is not None and len(self.class_ids) != len(self.gt_points):
            raise ValueError("class_ids must align with gt_points")

    def to_json_dict(self) -> dict:
        doc = {
            "image": self.image_id,
            "height": self.height,
            "width": self.width,
            "exemplar_boxes": [[b.x_min, b.y_min, b.x_max, b.y_max] for b in self.exemplar_boxes],
            "points": [[float(x), float(y)] for x, y in self.gt_points.points],
        }
        if self.point_boxes is not None:
            doc["point_boxes"] = [[b.x_min, b.y_min, b.x_max, b.y_max] for b in self.point_boxes]
        if self.class_ids is not None:
            doc["class_ids"] = [int(c) for c in self.class_ids]
        return doc

    @staticmethod
    def from_json_dict(doc: dict, split: str) -> "SceneAnnotation":
        return SceneAnnotation(
            image_id=doc["image"],
            height=int(doc["height"]),
            width=int(doc["width"]),
            exemplar_boxes=[ExemplarBox(*b) for b in doc["exemplar_boxes"]],
            gt_points=PointSet(np.asarray(doc["points"], dtype=np.float64).reshape(-1, 2)),
            point_boxes=[ExemplarBox(*b) for b in doc["point_boxes"]] if "point_boxes" in doc else None,
            class_ids=[int(c) for c in doc["class_ids"]] if "class_ids" in doc else None,
            split=split,
        )


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, 3) uint8
    annotation: SceneAnnotation


class SceneDataset:
    """In-memory list of scene samples with deterministic iteration order."""

    def __init__(self, samples: list[SceneSample], split: str = "train"):
        self.samples = samples
        self.split = split
        for s in samples:
            s.annotation.validate()

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> SceneSample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def mean_count(self) -> float:
        return float(np.mean([s.annotation.count for s in self.samples]))

    def save(self, root: str | Path) -> None:
        root = Path(root)
        img_dir = root / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        scenes = []
        for s in self.samples:
            Image.fromarray(s.image).save(img_dir / s.annotation.image_id)
            scenes.append(s.annotation.to_json_dict())
        doc = {"format": "diffcount-scenes/1", "split": self.split, "scenes": scenes}
        (root / f"annotations_{self.split}.json").write_text(json.dumps(doc, sort_keys=True))

    @staticmethod
    def load(root: str | Path, split: str) -> "SceneDataset":
        root = Path(root)
        doc = json.loads((root / f"annotations_{split}.json").read_text())
        if doc.get("format") != "diffcount-scenes/1":
            raise ValueError(f"unrecognized dataset format in {root}")
        samples = []
        for scene in doc["scenes"]:
            ann = SceneAnnotation.from_json_dict(scene, split)
            img = np.asarray(Image.open(root / "images" / ann.image_id).convert("RGB"))
            samples.append(SceneSample(img, ann))
        return SceneDataset(samples, split)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthConfig:
    image_size: int = 128
    classes_per_scene: tuple[int, int] = (1, 2)
    objects_per_class: tuple[int, int] = (1, 30)
    radius_range: tuple[float, float] = (3.0, 5.0)
    size_jitter: float = 0.15
    color_jitter: float = 0.06
    shape_families: tuple[str, ...] = ("disc", "square", "ellipse")
    occlusion_cap: float = 0.3
    exemplars: int = 3
    separation_pad: float = 3.0
    target_selection: str = "random"  # or "majority" for reference-less data
    max_scene_retries: int = 25
    max_place_attempts: int = 400

    def __post_init__(self):
        if self.image_size <= 0 or self.exemplars < 1:
            raise ValueError("image_size and exemplars must be positive")
        for lo, hi in (self.classes_per_scene, self.objects_per_class):
            if lo < 1 or hi < lo:
                raise ValueError("ranges must be nonempty")
        if self.radius_range[0] <= 0 or self.radius_range[1] < self.radius_range[0]:
            raise ValueError("bad radius range")


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.78, 0.92)
    tint = rng.uniform(-0.04, 0.04, size=3)
    cells = rng.normal(0.0, 0.05, size=(9, 9))
    xs = np.linspace(0, 8, size)
    i0 = np.clip(xs.astype(int), 0, 7)
    frac = xs - i0
    rowint = cells[i0, :] * (1 - frac[:, None]) + cells[i0 + 1, :] * frac[:, None]
    texture = rowint[:, i0] * (1 - frac[None, :]) + rowint[:, i0 + 1] * frac[None, :]
    img = base + texture[:, :, None] + tint[None, None, :]
    img += rng.normal(0.0, 0.008, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _blob_mask(shape: str, r: float, aspect: float, angle: float, size: int, cx: float, cy: float):
    """Boolean mask of one blob instance on the full canvas plus its tight box."""
    ext = int(math.ceil(r)) + 1
    x0, x1 = max(int(cx) - ext, 0), min(int(cx) + ext + 1, size)
    y0, y1 = max(int(cy) - ext, 0), min(int(cy) + ext + 1, size)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx, dy = xs - cx, ys - cy
    if shape == "disc":
        m = dx**2 + dy**2 <= r**2
    elif shape == "square":
        ca, sa = math.cos(angle), math.sin(angle)
        u, w = ca * dx + sa * dy, -sa * dx + ca * dy
        half = r / math.sqrt(2.0)
        m = (np.abs(u) <= half) & (np.abs(w) <= half)
    elif shape == "ellipse":
        ca, sa = math.cos(angle), math.sin(angle)
        u, w = ca * dx + sa * dy, -sa * dx + ca * dy
        m = (u / r) ** 2 + (w / (r * aspect)) ** 2 <= 1.0
    else:
        raise ValueError(f"unknown shape family {shape!r}")
    if not m.any():  # guard tiny radii
        m[min(int(cy) - y0, m.shape[0] - 1), min(int(cx) - x0, m.shape[1] - 1)] = True
    rows, cols = np.nonzero(m)
    box = ExemplarBox(
        x0 + cols.min() - 0.5, y0 + rows.min() - 0.5, x0 + cols.max() + 0.5, y0 + rows.max() + 0.5
    )
    return (slice(y0, y1), slice(x0, x1)), m, box


def _generate_scene(cfg: SynthConfig, rng: np.random.Generator, image_id: str, split: str):
    size = cfg.image_size
    n_classes = int(rng.integers(cfg.classes_per_scene[0], cfg.classes_per_scene[1] + 1))
    # distinct hues keep classes visually separable
    hue0 = rng.uniform(0.0, 1.0)
    hues = [(hue0 + k / n_classes + rng.uniform(-0.06, 0.06)) % 1.0 for k in range(n_classes)]
    classes = []
    for k in range(n_classes):
        classes.append(
            {
                "family": cfg.shape_families[int(rng.integers(len(cfg.shape_families)))],
                "hue": hues[k],
                "sat": rng.uniform(0.55, 0.95),
                "val": rng.uniform(0.25, 0.6),
                "radius": rng.uniform(*cfg.radius_range),
                "count": int(rng.integers(cfg.objects_per_class[0], cfg.objects_per_class[1] + 1)),
            }
        )

    # place centers: same-class separation keeps exemplar boxes single-center,
    # cross-class separation keeps every center visible
    placed = []  # (cx, cy, r, class_k)
    for k, cls in enumerate(classes):
        r_cls = cls["radius"] * (1.0 + cfg.size_jitter)
        margin = r_cls + 1.5
        for _ in range(cls["count"]):
            for attempt in range(cfg.max_place_attempts):
                cx = rng.uniform(margin, size - 1 - margin)
                cy = rng.uniform(margin, size - 1 - margin)
                ok = True
                for px, py, pr, pk in placed:
                    d = math.hypot(cx - px, cy - py)
                    if pk == k:
                        if d < 2.0 * r_cls + cfg.separation_pad:
                            ok = False
                            break
                    elif d < max(pr, r_cls) + 2.0:
                        ok = False
                        break
                if ok:
                    placed.append((cx, cy, cls["radius"], k))
                    break
            else:
                raise PlacementError(
                    f"could not place object {len(placed) + 1} (class {k}) in {image_id}"
                )

    img = _background(size, rng)
    order = rng.permutation(len(placed))
    instances = [None] * len(placed)
    owner = np.full((size, size), -1, dtype=np.int64)
    for z, idx in enumerate(order):
        cx, cy, r_base, k = placed[idx]
        cls = classes[k]
        r = r_base * (1.0 + rng.uniform(-cfg.size_jitter, cfg.size_jitter))
        angle = rng.uniform(0.0, math.pi)
        aspect = rng.uniform(0.55, 0.8)
        sl, mask, box = _blob_mask(cls["family"], r, aspect, angle, size, cx, cy)
        hue = (cls["hue"] + rng.uniform(-cfg.color_jitter, cfg.color_jitter)) % 1.0
        val = np.clip(cls["val"] + rng.uniform(-cfg.color_jitter, cfg.color_jitter), 0.05, 0.95)
        color = np.array(_hsv_to_rgb(hue, cls["sat"], val))
        region = img[sl]
        region[mask] = color + rng.normal(0.0, 0.01, size=3)
        owner_region = owner[sl]
        owner_region[mask] = idx
        instances[idx] = {"center": (cx, cy), "box": box, "class": k, "area": int(mask.sum())}

    visible = np.bincount(owner[owner >= 0], minlength=len(placed))
    for i, inst in enumerate(instances):
        inst["occlusion"] = 1.0 - visible[i] / inst["area"]

    counts = [c["count"] for c in classes]
    if cfg.target_selection == "majority":
        target_k = int(np.argmax(counts))
    else:
        target_k = int(rng.integers(n_classes))
    target = [inst for inst in instances if inst["class"] == target_k]

    def lone_center(inst):
        b = inst["box"]
        inside = sum(1 for o in target if b.contains(o["center"][0], o["center"][1], strict=True))
        return inside == 1

    eligible = sorted(
        (i for i in target if i["occlusion"] < cfg.occlusion_cap and lone_center(i)),
        key=lambda i: (i["occlusion"], i["center"]),
    )
    if len(eligible) < cfg.exemplars:
        return None  # caller retries with fresh randomness

    points = np.array([i["center"] for i in target], dtype=np.float64)
    ann = SceneAnnotation(
        image_id=image_id,
        height=size,
        width=size,
        exemplar_boxes=[i["box"] for i in eligible[: cfg.exemplars]],
        gt_points=PointSet(points),
        point_boxes=[i["box"] for i in target],
        class_ids=[target_k] * len(target),
        split=split,
    )
    return SceneSample(np.clip(img * 255.0, 0, 255).astype(np.uint8), ann)


def synth_generate(
    cfg: SynthConfig, n: int, rng: np.random.Generator, split: str = "train"
) -> SceneDataset:
    """Render n annotated blob scenes; fully reproducible from the generator state."""
    samples = []
    for i in range(n):
        for retry in range(cfg.max_scene_retries):
            sample = _generate_scene(cfg, rng, f"scene_{split}_{i:05d}.png", split)
            if sample is not None:
                samples.append(sample)
                break
        else:
            raise PlacementError(f"scene {i}: no valid exemplar set after retries")
    return SceneDataset(samples, split)


# ---------------------------------------------------------------------------
# FSC147-format loading


def load_fsc_format(root: str | Path, split: str, on_error: str = "raise") -> SceneDataset:
    """Load a dataset laid out in the FSC147 convention.

    Expects an ``annotation*.json`` with per-image ``box_examples_coordinates``
    (4-corner polygons) and ``points``, a split json mapping split names to
    image lists, and an ``images*`` directory.  ``on_error`` is ``raise`` or
    ``skip`` (skipping logs and continues).
    """
    root = Path(root)
    if on_error not in ("raise", "skip"):
        raise ValueError("on_error must be 'raise' or 'skip'")
    ann_files = sorted(p for p in root.glob("annotation*.json"))
    if not ann_files:
        raise FileNotFoundError(f"no annotation*.json under {root}")
    annotations = json.loads(ann_files[0].read_text())
    split_files = [p for p in root.glob("*.json") if p not in ann_files]
    splits = None
    for p in sorted(split_files):
        doc = json.loads(p.read_text())
        if isinstance(doc, dict) and split in doc:
            splits = doc
            break
    if splits is None:
        raise FileNotFoundError(f"no split json containing {split!r} under {root}")
    img_dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("images"))
    if not img_dirs:
        raise FileNotFoundError(f"no images directory under {root}")
    img_dir = img_dirs[0]

    samples = []
    for name in splits[split]:
        try:
            if name not in annotations:
                raise KeyError(f"image {name!r} missing from annotation file")
            path = img_dir / name
            if not path.exists():
                raise FileNotFoundError(f"image file missing on disk: {path}")
            img = np.asarray(Image.open(path).convert("RGB"))
            h, w = img.shape[:2]
            entry = annotations[name]
            boxes = []
            for poly in entry["box_examples_coordinates"]:
                corners = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
                x0, y0 = corners.min(axis=0)
                x1, y1 = corners.max(axis=0)
                boxes.append(
                    ExemplarBox(
                        max(x0, 0.0), max(y0, 0.0), min(x1, float(w)), min(y1, float(h))
                    )
                )
            pts = np.asarray(entry["points"], dtype=np.float64).reshape(-1, 2)
            clipped = np.clip(pts, 0.0, [w - 1, h - 1])
            if not np.array_equal(pts, clipped):
                log.warning("%s: %d points clamped to bounds", name, int((pts != clipped).any(axis=1).sum()))
            ann = SceneAnnotation(
                image_id=name,
                height=h,
                width=w,
                exemplar_boxes=boxes,
                gt_points=PointSet(clipped),
                split=split,
            )
            ann.validate()
            samples.append(SceneSample(img, ann))
        except Exception as exc:
            if on_error == "raise":
                raise
            log.warning("skipping %s: %s", name, exc)
    return SceneDataset(samples, split)


# ---------------------------------------------------------------------------
# augmentations


def _flip_box(b: ExemplarBox, width: int) -> ExemplarBox:
    return ExemplarBox(width - 1 - b.x_max, b.y_min, width - 1 - b.x_min, b.y_max)


def hflip_sample(sample: SceneSample) -> SceneSample:
    """Mirror image, boxes and points around the vertical axis."""
    ann = sample.annotation
    w = ann.width
    pts = ann.gt_points.points.copy()
    pts[:, 0] = w - 1 - pts[:, 0]
    new_ann = replace(
        ann,
        exemplar_boxes=[_flip_box(b, w) for b in ann.exemplar_boxes],
        gt_points=PointSet(pts),
        point_boxes=[_flip_box(b, w) for b in ann.point_boxes] if ann.point_boxes else None,
    )
    return SceneSample(np.ascontiguousarray(sample.image[:, ::-1]), new_ann)


def _halve_image(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    pil = Image.fromarray(img).resize((w // 2, h // 2), Image.BILINEAR)
    return np.asarray(pil)


def tile_sample(sample: SceneSample, rng: np.random.Generator) -> SceneSample:
    """2x2 self-mosaic of the downscaled image with per-tile random flips.

    Annotation points are remapped into all four tiles (count x4); exemplar
    boxes are remapped into the top-left tile only, keeping their number.
    """
    ann = sample.annotation
    h, w = ann.height, ann.width
    half = _halve_image(sample.image)
    hh, hw = half.shape[:2]
    flips = rng.integers(0, 2, size=4).astype(bool)
    canvas = np.zeros((hh * 2, hw * 2, 3), dtype=sample.image.dtype)
    offsets = [(0, 0), (0, hw), (hh, 0), (hh, hw)]

    sx, sy = hw / w, hh / h

    def map_pts(pts, flip, ox, oy):
        out = pts.copy()
        out[:, 0] = out[:, 0] * sx
        out[:, 1] = out[:, 1] * sy
        if flip:
            out[:, 0] = hw - 1 - out[:, 0]
        out[:, 0] += ox
        out[:, 1] += oy
        return out

    def map_box(b, flip, ox, oy):
        x0, x1 = b.x_min * sx, b.x_max * sx
        if flip:
            x0, x1 = hw - 1 - x1, hw - 1 - x0
        return ExemplarBox(x0 + ox, b.y_min * sy + oy, x1 + ox, b.y_max * sy + oy)

    all_pts, all_boxes, all_cls = [], [], []
    for t, (oy, ox) in enumerate(offsets):
        tile = half[:, ::-1] if flips[t] else half
        canvas[oy : oy + hh, ox : ox + hw] = tile
        all_pts.append(map_pts(ann.gt_points.points, flips[t], ox, oy))
        if ann.point_boxes is not None:
            all_boxes.extend(map_box(b, flips[t], ox, oy) for b in ann.point_boxes)
        if ann.class_ids is not None:
            all_cls.extend(ann.class_ids)

    new_ann = replace(
        ann,
        height=hh * 2,
        width=hw * 2,
        exemplar_boxes=[map_box(b, flips[0], 0, 0) for b in ann.exemplar_boxes],
        gt_points=PointSet(np.concatenate(all_pts, axis=0)),
        point_boxes=all_boxes if ann.point_boxes is not None else None,
        class_ids=all_cls if ann.class_ids is not None else None,
    )
    return SceneSample(canvas, new_ann)


def augment(
    sample: SceneSample,
    rng: np.random.Generator,
    enabled: tuple[str, ...] = ("hflip",),
    tiling_prob: float = 0.3,
) -> SceneSample:
    """Random training-time augmentation; each enabled transform draws its coin."""
    if "hflip" in enabled and rng.random() < 0.5:
        sample = hflip_sample(sample)
    if "tiling" in enabled and rng.random() < tiling_prob:
        sample = tile_sample(sample, rng)
    return sample


# ---------------------------------------------------------------------------
# resize rule


@dataclass(frozen=True)
class ResizeTransform:
    """Affine map from original image coordinates to model coordinates."""

    scale_x: float
    scale_y: float
    orig_height: int
    orig_width: int
    target: int

    def points_to_model(self, pts: np.ndarray) -> np.ndarray:
        out = np.asarray(pts, dtype=np.float64).reshape(-1, 2).copy()
        out[:, 0] *= self.scale_x
        out[:, 1] *= self.scale_y
        return out

    def points_to_original(self, pts: np.ndarray) -> np.ndarray:
        out = np.asarray(pts, dtype=np.float64).reshape(-1, 2).copy()
        out[:, 0] /= self.scale_x
        out[:, 1] /= self.scale_y
        return out

    def box_to_model(self, b: ExemplarBox) -> ExemplarBox:
        return ExemplarBox(
            b.x_min * self.scale_x, b.y_min * self.scale_y,
            b.x_max * self.scale_x, b.y_max * self.scale_y,
        )


def _letterbox(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    side = max(h, w)
    if h == w:
        return image
    canvas = np.zeros((side, side, 3), dtype=image.dtype)
    canvas[:h, :w] = image  # pad bottom/right; offsets stay zero
    return canvas


def resize_to(image: np.ndarray, target: int) -> tuple[np.ndarray, ResizeTransform]:
    """Letterbox to square and resize to target x target."""
    h, w = image.shape[:2]
    square = _letterbox(image)
    side = square.shape[0]
    resized = np.asarray(Image.fromarray(square).resize((target, target), Image.BILINEAR))
    s = target / side
    return resized, ResizeTransform(s, s, h, w, target)


def resize_rule(
    image: np.ndarray,
    boxes: list[ExemplarBox],
    standard_size: int = 512,
    upscale_size: int = 1024,
    area_threshold: float = 1250.0,
) -> tuple[np.ndarray, list[ExemplarBox], ResizeTransform]:
    """Resize to the standard side, or upscale when exemplars are small.

    The mean exemplar area is computed in original pixels; below the
    threshold the image goes to the upscale size instead.
    """
    if not boxes:
        raise ValueError("resize_rule requires exemplar boxes; use resize_to without them")
    mean_area = float(np.mean([b.area for b in boxes]))
    target = upscale_size if mean_area < area_threshold else standard_size
    resized, tf = resize_to(image, target)
    return resized, [tf.box_to_model(b) for b in boxes], tf
