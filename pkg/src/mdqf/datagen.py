"""Synthetic registered RGB / thermal scene pairs and COCO-format IO.

Each object is drawn into the RGB image, the thermal image, or both,
according to its visibility mode. Ground truth always lists every object,
so a single-modality detector has a recall ceiling that fusion can lift.
Images are quantized to 8 bits at generation time, which makes a PNG
export/import round trip exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

VISIBILITY = ("rgb_only", "tir_only", "both")
CLASSES = ("disk", "square", "triangle")
_SUPERSAMPLE = 4


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class MissingImageError(DatasetError):
    pass


class MalformedAnnotationError(DatasetError):
    pass


class DanglingPairError(DatasetError):
    pass


@dataclass
class SceneSpec:
    image_size: tuple = (64, 64)
    min_objects: int = 1
    max_objects: int = 4
    classes: tuple = CLASSES
    visibility: dict = field(default_factory=lambda: {"rgb_only": 0.3, "tir_only": 0.3, "both": 0.4})
    object_size: tuple = (12, 24)
    noise: float = 0.02
    seed: int = 0
    max_retries: int = 50

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.classes = tuple(self.classes)
        self.object_size = tuple(int(s) for s in self.object_size)
        unknown = set(self.visibility) - set(VISIBILITY)
        if unknown:
            raise ValueError(f"unknown visibility modes: {sorted(unknown)}")
        if abs(sum(self.visibility.values()) - 1.0) > 1e-9:
            raise ValueError("visibility probabilities must sum to 1")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        unsupported = set(self.classes) - set(CLASSES)
        if unsupported:
            raise ValueError(f"unsupported shapes: {sorted(unsupported)}")

    @classmethod
    def from_dict(cls, data):
        names = set(cls.__dataclass_fields__)
        bad = sorted(set(data) - names)
        if bad:
            raise ValueError(f"invalid scene spec key(s): {', '.join(bad)}")
        return cls(**data)

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(d["image_size"])
        d["classes"] = list(d["classes"])
        d["object_size"] = list(d["object_size"])
        return d


@dataclass
class Annotation:
    box: tuple  # normalized (cx, cy, w, h)
    class_id: int
    visibility: str

    def visible_in(self, modality):
        return self.visibility == "both" or self.visibility == f"{modality}_only"


@dataclass
class PairedSample:
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    tir: np.ndarray  # (H, W, 1) float32 in [0, 1]
    annotations: list
    image_id: int = 0
    dropped: int = 0  # objects that could not be placed

    def image(self, modality):
        return self.rgb if modality == "rgb" else self.tir


@dataclass
class Sample:
    """Single-modality training sample."""

    image: np.ndarray
    annotations: list
    image_id: int = 0
    modality: str = "rgb"


def quantize(image):
    """Round to the 8-bit grid and return float32, exactly as PNG loading does."""
    return _from_uint8(np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8))


def _from_uint8(a):
    return a.astype(np.float32) / np.float32(255.0)


def _coverage(kind, size, h, w, cx, cy):
    """Anti-aliased coverage mask of one shape whose bounding box is ``size`` px square."""
    ys = (np.arange(h * _SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
    xs = (np.arange(w * _SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    half = size / 2
    if kind == "disk":
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= half ** 2
    elif kind == "square":
        inside = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    else:  # upright triangle, apex at the top edge of the box
        top, bottom = cy - half, cy + half
        t = np.clip((yy - top) / size, 0, 1)
        inside = (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= t * half)
    return inside.reshape(h, _SUPERSAMPLE, w, _SUPERSAMPLE).mean(axis=(1, 3))


def _smooth_field(rng, h, w, channels, cells=4):
    coarse = rng.uniform(0, 1, size=(cells, cells, channels))
    return ndimage.zoom(coarse, (h / cells, w / cells, 1), order=1, mode="nearest")[:h, :w]


def _place(rng, spec, boxes):
    h, w = spec.image_size
    lo, hi = spec.object_size
    for _ in range(spec.max_retries):
        size = int(rng.integers(lo, hi + 1))
        cx = rng.uniform(size / 2, w - size / 2)
        cy = rng.uniform(size / 2, h - size / 2)
        cand = (cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2)
        if all(cand[2] <= b[0] or b[2] <= cand[0] or cand[3] <= b[1] or b[3] <= cand[1] for b in boxes):
            return size, cx, cy, cand
    return None


def generate_scene(spec: SceneSpec, index: int = 0) -> PairedSample:
    """Render one paired sample; ``(spec.seed, index)`` fully determines it."""
    h, w = spec.image_size
    rng_bg, rng_obj, rng_noise = (np.random.default_rng(s) for s in
                                  np.random.SeedSequence([spec.seed, index]).spawn(3))
    rgb = 0.15 + 0.6 * _smooth_field(rng_bg, h, w, 3)
    rgb = rgb + 0.08 * (rng_bg.uniform(size=(h, w, 3)) - 0.5)
    tir = 0.15 + 0.15 * _smooth_field(rng_bg, h, w, 1)

    modes = list(spec.visibility)
    probs = np.array([spec.visibility[m] for m in modes], dtype=float)
    count = int(rng_obj.integers(spec.min_objects, spec.max_objects + 1))
    boxes, annotations = [], []
    for _ in range(count):
        placed = _place(rng_obj, spec, boxes)
        cls = int(rng_obj.integers(len(spec.classes)))
        mode = modes[int(rng_obj.choice(len(modes), p=probs))]
        color = rng_obj.uniform(0, 1, size=3)
        heat = rng_obj.uniform(0.7, 1.0)
        if placed is None:
            continue
        size, cx, cy, corners = placed
        boxes.append(corners)
        cover = _coverage(spec.classes[cls], size, h, w, cx, cy)[..., None]
        if mode in ("rgb_only", "both"):
            local = rgb[max(int(corners[1]), 0):int(corners[3]) + 1, max(int(corners[0]), 0):int(corners[2]) + 1]
            bg = local.reshape(-1, 3).mean(0)
            # keep the object clearly separable from the local background
            color = np.where(np.abs(color - bg) < 0.35, np.where(bg > 0.5, bg - 0.45, bg + 0.45), color)
            rgb = rgb * (1 - cover) + np.clip(color, 0, 1) * cover
        if mode in ("tir_only", "both"):
            blob = ndimage.gaussian_filter(cover[..., 0], sigma=0.8)[..., None]
            tir = tir * (1 - blob) + heat * blob
        annotations.append(Annotation((cx / w, cy / h, size / w, size / h), cls, mode))
    rgb = rgb + rng_noise.normal(0, spec.noise, size=rgb.shape)
    tir = tir + rng_noise.normal(0, spec.noise, size=tir.shape)
    return PairedSample(quantize(np.clip(rgb, 0, 1)), quantize(np.clip(tir, 0, 1)), annotations,
                        image_id=index, dropped=count - len(annotations))


def generate_dataset(spec: SceneSpec, count: int, start: int = 0) -> list[PairedSample]:
    return [generate_scene(spec, i) for i in range(start, start + count)]


def degrade_contrast(image, factor: float):
    """Shrink contrast towards the image mean; ``factor=0`` leaves a constant image.

    Works on a single ``(H, W, C)`` image or a ``(B, H, W, C)`` batch, where the
    mean is taken per image.
    """
    if not 0 <= factor <= 1:
        raise ValueError(f"contrast factor must be in [0, 1], got {factor}")
    x = np.asarray(image)
    axes = tuple(range(x.ndim - 3, x.ndim))
    mean = x.mean(axis=axes, keepdims=True, dtype=np.float64)
    return (mean + factor * (x - mean)).astype(x.dtype)


def single_modality(samples, modality, visible_only=True) -> list[Sample]:
    """Unpaired view of a paired dataset.

    With ``visible_only`` the annotations keep only objects that appear in that
    modality, as a per-modality labelled dataset would.
    """
    out = []
    for s in samples:
        anns = [a for a in s.annotations if a.visible_in(modality)] if visible_only else list(s.annotations)
        out.append(Sample(s.image(modality), anns, s.image_id, modality))
    return out


# COCO IO

def _coco_doc(samples, modality, classes, h, w):
    images, annotations = [], []
    ann_id = 1
    for s in samples:
        images.append({"id": int(s.image_id), "file_name": f"{modality}/{s.image_id:06d}.png",
                       "width": w, "height": h})
        for a in s.annotations:
            cx, cy, bw, bh = a.box
            box = [(cx - bw / 2) * w, (cy - bh / 2) * h, bw * w, bh * h]
            annotations.append({"id": ann_id, "image_id": int(s.image_id), "category_id": a.class_id + 1,
                                "bbox": box, "area": box[2] * box[3], "iscrowd": 0,
                                "visibility": a.visibility})
            ann_id += 1
    categories = [{"id": i + 1, "name": n} for i, n in enumerate(classes)]
    return {"images": images, "annotations": annotations, "categories": categories}


def _write_png(path, image):
    a = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a[..., 0] if a.shape[-1] == 1 else a).save(path, format="PNG")


def export_coco(samples, root, classes=CLASSES):
    """Write PNG images, one COCO JSON per modality and a pairing manifest.

    Returns a dict of the written annotation/manifest paths.
    """
    os.makedirs(os.path.join(root, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(root, "tir"), exist_ok=True)
    if not samples:
        h, w = 0, 0
    else:
        h, w = samples[0].rgb.shape[:2]
    pairs = []
    for s in samples:
        _write_png(os.path.join(root, "rgb", f"{s.image_id:06d}.png"), s.rgb)
        _write_png(os.path.join(root, "tir", f"{s.image_id:06d}.png"), s.tir)
        pairs.append({"image_id": int(s.image_id), "rgb_file": f"rgb/{s.image_id:06d}.png",
                      "tir_file": f"tir/{s.image_id:06d}.png"})
    paths = {}
    for modality in ("rgb", "tir"):
        paths[modality] = os.path.join(root, f"annotations_{modality}.json")
        with open(paths[modality], "w") as f:
            json.dump(_coco_doc(samples, modality, classes, h, w), f, indent=1)
    paths["pairs"] = os.path.join(root, "pairs.json")
    with open(paths["pairs"], "w") as f:
        json.dump(pairs, f, indent=1)
    return paths


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise MalformedAnnotationError(f"{path}: {e}") from None


def _read_png(path, image_id):
    if not os.path.exists(path):
        raise MissingImageError(f"image {image_id}: file not found: {path}")
    a = np.asarray(Image.open(path))
    if a.ndim == 2:
        a = a[..., None]
    return _from_uint8(a)


def _parse_coco(doc, path):
    try:
        images = {int(im["id"]): im for im in doc["images"]}
        w_h = {i: (im["width"], im["height"]) for i, im in images.items()}
        anns = {i: [] for i in images}
        for a in doc["annotations"]:
            x, y, bw, bh = (float(v) for v in a["bbox"])
            img_w, img_h = w_h[int(a["image_id"])]
            box = ((x + bw / 2) / img_w, (y + bh / 2) / img_h, bw / img_w, bh / img_h)
            anns[int(a["image_id"])].append(
                Annotation(box, int(a["category_id"]) - 1, a.get("visibility", "both")))
        classes = tuple(c["name"] for c in sorted(doc["categories"], key=lambda c: c["id"]))
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedAnnotationError(f"{path}: malformed COCO document ({e!r})") from None
    return images, anns, classes


def import_coco(root, manifest="pairs.json", modality=None, visible_only=False):
    """Load a dataset written by :func:`export_coco` (or any COCO pair of splits).

    With ``modality`` set, only that split is read and a list of unpaired
    :class:`Sample` is returned; otherwise the manifest drives pairing and a
    list of :class:`PairedSample` is returned. ``visible_only`` drops objects
    whose visibility field says they do not appear in that split's modality.
    """
    if modality is not None:
        path = os.path.join(root, f"annotations_{modality}.json")
        images, anns, _ = _parse_coco(_read_json(path), path)
        keep = (lambda a: a.visible_in(modality)) if visible_only else (lambda a: True)
        return [Sample(_read_png(os.path.join(root, im["file_name"]), i), [a for a in anns[i] if keep(a)], i,
                       modality)
                for i, im in sorted(images.items())]

    path_r = os.path.join(root, "annotations_rgb.json")
    _, anns, _ = _parse_coco(_read_json(path_r), path_r)
    entries = _read_json(os.path.join(root, manifest))
    samples = []
    for e in entries:
        try:
            image_id, rgb_file, tir_file = int(e["image_id"]), e["rgb_file"], e["tir_file"]
        except (KeyError, TypeError, ValueError):
            raise MalformedAnnotationError(f"bad manifest entry: {e!r}") from None
        for f in (rgb_file, tir_file):
            if not os.path.exists(os.path.join(root, f)):
                raise DanglingPairError(f"pair {image_id} references missing file {f}")
        if image_id not in anns:
            raise DanglingPairError(f"pair {image_id} has no annotation entry")
        samples.append(PairedSample(_read_png(os.path.join(root, rgb_file), image_id),
                                    _read_png(os.path.join(root, tir_file), image_id),
                                    anns[image_id], image_id))
    return samples
