"""Synthetic co-saliency benchmark: parametric shapes on cluttered backgrounds.

Every category is a (shape, hue) archetype.  Evaluation images hold one
instance of the group's archetype plus extraneous instances of other
archetypes; training images are single-object (plain saliency) samples with an
id -> category table; a separate classification set pretrains the toy backbone.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .data import Image, ImageGroup, write_gray, write_rgb
from .errors import ConfigurationError
from .jigsaw import SODSample, write_label_table
from .seeding import derive_seed

SHAPES = ("circle", "square", "triangle", "star", "cross", "hexagon")


def default_categories(n=12):
    """``n`` archetypes cycling through the shapes, each with its own hue."""
    return [(SHAPES[i % len(SHAPES)], round(360.0 * i / n, 1)) for i in range(n)]


@dataclass
class SynthSpec:
    categories: list = field(default_factory=default_categories)
    images_per_group: int = 40
    train_per_group: int = 16
    cls_per_category: int = 120
    cls_holdout: float = 0.25
    distractors_per_image: tuple = (1, 2)
    canvas: int = 128
    background: str = "clutter"
    scale: tuple = (0.13, 0.2)
    seed: int = 0

    def __post_init__(self):
        self.categories = [(str(s), float(h)) for s, h in self.categories]
        self.distractors_per_image = tuple(int(v) for v in self.distractors_per_image)
        self.scale = tuple(float(v) for v in self.scale)
        if len(self.categories) < 2:
            raise ConfigurationError("a synthetic spec needs at least two categories")
        if len(set(self.categories)) != len(self.categories):
            raise ConfigurationError("synthetic categories must be distinct")
        for shape, _ in self.categories:
            if shape not in SHAPES:
                raise ConfigurationError(f"unknown shape {shape!r}")
        lo, hi = self.distractors_per_image
        if not 0 <= lo <= hi or hi > len(self.categories) - 1:
            raise ConfigurationError(f"invalid distractor range {self.distractors_per_image}")
        if self.background not in ("clutter", "flat"):
            raise ConfigurationError(f"unknown background mode {self.background!r}")

    @property
    def names(self):
        return [category_name(i, c) for i, c in enumerate(self.categories)]

    @classmethod
    def desk(cls, seed=0):
        return cls(seed=seed)

    @classmethod
    def tiny(cls, seed=0):
        return cls(categories=default_categories(3), images_per_group=4, train_per_group=8,
                   cls_per_category=12, canvas=64, seed=seed)

    def to_dict(self):
        d = asdict(self)
        d["categories"] = [list(c) for c in self.categories]
        return d


def category_name(index, archetype):
    return f"c{index:02d}_{archetype[0]}"


@dataclass
class Scene:
    pixels: np.ndarray
    target_mask: np.ndarray
    distractor_mask: np.ndarray
    categories: list


def _polygon(shape, r, angle):
    if shape == "square":
        k, radii = 4, [r]
    elif shape == "triangle":
        k, radii = 3, [r]
    elif shape == "hexagon":
        k, radii = 6, [r]
    elif shape == "star":
        k, radii = 10, [r, 0.45 * r]
    elif shape == "cross":
        a, b = r, 0.36 * r
        pts = np.array([(b, a), (b, b), (a, b), (a, -b), (b, -b), (b, -a),
                        (-b, -a), (-b, -b), (-a, -b), (-a, b), (-b, b), (-b, a)], dtype=np.float64)
        c, s = math.cos(angle), math.sin(angle)
        return pts @ np.array([[c, s], [-s, c]])
    else:
        raise ValueError(shape)
    t = angle + np.arange(k) * 2 * math.pi / k
    rad = np.array([radii[i % len(radii)] for i in range(k)])
    return np.stack([rad * np.cos(t), rad * np.sin(t)], axis=1)


def _shape_mask(shape, size, center, r, angle, aspect):
    m = np.zeros((size, size), dtype=np.uint8)
    cx, cy = center
    if shape == "circle":
        axes = (max(int(round(r)), 1), max(int(round(r * aspect)), 1))
        cv2.ellipse(m, (int(round(cx)), int(round(cy))), axes, math.degrees(angle), 0, 360, 1, -1, cv2.LINE_8)
    else:
        pts = _polygon(shape, r, angle) + np.array([cx, cy])
        cv2.fillPoly(m, [np.round(pts).astype(np.int32)], 1, cv2.LINE_8)
    return m.astype(bool)


def _hsv_to_rgb(h, s, v):
    hsv = np.array([[[h / 2.0, s * 255.0, v * 255.0]]], dtype=np.float32)
    hsv = np.clip(hsv, 0, [179.99, 255, 255]).astype(np.uint8)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)[0, 0].astype(np.float32) / 255.0


def _background(size, mode, rng):
    base = rng.uniform(0.3, 0.6)
    img = np.full((size, size, 3), base, dtype=np.float32)
    if mode == "flat":
        return img
    tint = rng.normal(0.0, 0.03, size=3).astype(np.float32)
    low = rng.normal(0.0, 1.0, size=(6, 6, 1)).astype(np.float32)
    blobs = cv2.resize(low, (size, size), interpolation=cv2.INTER_CUBIC)[..., None]
    grain = rng.normal(0.0, 0.03, size=(size, size, 1)).astype(np.float32)
    img = img + tint + 0.07 * blobs + grain
    # low-contrast clutter strokes
    strokes = np.zeros((size, size), dtype=np.float32)
    for _ in range(rng.integers(3, 7)):
        p1 = tuple(int(v) for v in rng.integers(0, size, 2))
        p2 = tuple(int(v) for v in rng.integers(0, size, 2))
        cv2.line(strokes, p1, p2, float(rng.uniform(-0.08, 0.08)), int(rng.integers(1, 3)))
    return np.clip(img + strokes[..., None], 0.0, 1.0)


def _place(rng, size, radii, tries=200):
    """Non-overlapping centers for objects of bounding radii ``radii``."""
    centers = []
    for r in radii:
        for _ in range(tries):
            c = rng.uniform(r + 1, size - r - 1, size=2)
            if all(np.hypot(*(c - c2)) > r + r2 + 2 for c2, r2 in zip(centers, radii)):
                centers.append(c)
                break
        else:
            return None
    return centers


def render_scene(spec, target, n_distractors, seed, size=None):
    """One image with the ``target`` archetype and ``n_distractors`` others."""
    rng = np.random.default_rng(seed)
    size = size or spec.canvas
    others = [i for i in range(len(spec.categories)) if i != target]
    distractors = list(rng.choice(others, size=n_distractors, replace=False)) if n_distractors else []
    cats = [target] + [int(d) for d in distractors]
    scale = np.array(spec.scale)
    while True:
        radii = [rng.uniform(*scale) * size for _ in cats]
        centers = _place(rng, size, [r * 1.1 for r in radii])
        if centers is not None:
            break
        scale = scale * 0.9
    img = _background(size, spec.background, rng)
    target_mask = np.zeros((size, size), dtype=bool)
    distractor_mask = np.zeros((size, size), dtype=bool)
    for k, (cat, r, c) in enumerate(zip(cats, radii, centers)):
        shape, hue = spec.categories[cat]
        m = _shape_mask(shape, size, c, r, rng.uniform(0, 2 * math.pi), rng.uniform(0.75, 1.0))
        color = _hsv_to_rgb((hue + rng.uniform(-6, 6)) % 360, rng.uniform(0.75, 0.95), rng.uniform(0.8, 1.0))
        fill = color + rng.normal(0.0, 0.035, size=(size, size, 3)).astype(np.float32)
        img[m] = np.clip(fill[m], 0.0, 1.0)
        if k == 0:
            target_mask |= m
        else:
            distractor_mask |= m
    return Scene(img.astype(np.float32), target_mask.astype(np.float32), distractor_mask.astype(np.float32), cats)


def generate_group(spec, category, seed, n_images=None, distractors=None):
    """Group of images sharing ``category`` (index or name), with target-only masks."""
    index = spec.names.index(category) if isinstance(category, str) else int(category)
    if not 0 <= index < len(spec.categories):
        raise ConfigurationError(f"category {category!r} not in spec")
    lo, hi = distractors if distractors is not None else spec.distractors_per_image
    n_images = spec.images_per_group if n_images is None else n_images
    name = spec.names[index]
    images, masks, ids = [], [], []
    for i in range(n_images):
        img_seed = derive_seed(seed, "group", name, i)
        k = int(np.random.default_rng(img_seed).integers(lo, hi + 1))
        scene = render_scene(spec, index, k, derive_seed(img_seed, "scene"))
        images.append(Image(scene.pixels))
        masks.append(scene.target_mask)
        ids.append(f"{name}_e{i:04d}")
    return ImageGroup(name, images, masks, ids)


@dataclass
class SynthDataset:
    spec: SynthSpec
    train: list
    labels: dict
    eval_groups: dict
    cls_train: list
    cls_heldout: list


def generate_dataset(spec):
    """Train split (single-object samples + labels), eval groups and a classification set."""
    train, labels = [], {}
    eval_groups = {}
    cls_train, cls_heldout = [], []
    n_holdout = int(round(spec.cls_per_category * spec.cls_holdout))
    for index, name in enumerate(spec.names):
        for i in range(spec.train_per_group):
            scene = render_scene(spec, index, 0, derive_seed(spec.seed, "train", name, i))
            sid = f"{name}_t{i:04d}"
            train.append(SODSample(Image(scene.pixels), scene.target_mask, name, sid))
            labels[sid] = name
        eval_groups[name] = generate_group(spec, index, derive_seed(spec.seed, "eval"))
        for i in range(spec.cls_per_category):
            scene = render_scene(spec, index, 0, derive_seed(spec.seed, "cls", name, i))
            (cls_heldout if i < n_holdout else cls_train).append((scene.pixels, index))
    return SynthDataset(spec, train, labels, eval_groups, cls_train, cls_heldout)


def write_dataset(ds, root):
    """Lay the dataset out on disk::

        train/sod/{img,gt}/<id>.png   train/labels.tsv
        eval/<category>/{img,gt}/<id>.png
        cls/<category>/<id>.png       cls/heldout.txt
    """
    root = Path(root)
    for s in ds.train:
        write_rgb(root / "train" / "sod" / "img" / f"{s.sample_id}.png", s.image.pixels)
        write_gray(root / "train" / "sod" / "gt" / f"{s.sample_id}.png", s.mask)
    write_label_table(root / "train" / "labels.tsv", ds.labels)
    for name, group in ds.eval_groups.items():
        for sid, im, m in zip(group.ids, group.images, group.masks):
            write_rgb(root / "eval" / name / "img" / f"{sid}.png", im.pixels)
            write_gray(root / "eval" / name / "gt" / f"{sid}.png", m)
    heldout = []
    names = ds.spec.names
    counters = {}
    for split, items in (("train", ds.cls_train), ("heldout", ds.cls_heldout)):
        for pixels, index in items:
            k = counters.get(index, 0)
            counters[index] = k + 1
            rel = Path(names[index]) / f"{names[index]}_k{k:04d}.png"
            write_rgb(root / "cls" / rel, pixels)
            if split == "heldout":
                heldout.append(rel.as_posix())
    (root / "cls" / "heldout.txt").write_text("\n".join(heldout) + "\n")
    (root / "synth_spec.json").write_text(json.dumps(ds.spec.to_dict(), indent=2))
    return root
