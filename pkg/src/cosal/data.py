"""Image containers, resizing and PNG interchange.

Pixels are ``float32`` numpy arrays in ``[0, 1]``: images are ``H x W x 3``,
masks and saliency maps are ``H x W``.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .errors import IngestionError, ShapeError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MASK_THRESHOLD = 128


@dataclass
class Image:
    pixels: np.ndarray
    original_size: tuple = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"expected H x W x 3 pixels, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min(initial=0.0) < 0.0 or px.max(initial=0.0) > 1.0:
            raise ShapeError("image pixels must be finite and lie in [0, 1]")
        self.pixels = px
        if self.original_size is None:
            self.original_size = px.shape[:2]
        self.original_size = tuple(int(v) for v in self.original_size)

    @property
    def size(self):
        return self.pixels.shape[:2]


@dataclass
class ImageGroup:
    group_id: str
    images: list
    masks: list = None
    ids: list = field(default=None)

    def __post_init__(self):
        if len(self.images) < 1:
            raise ShapeError(f"group {self.group_id!r} is empty")
        if self.masks is not None and len(self.masks) != len(self.images):
            raise ShapeError(f"group {self.group_id!r}: {len(self.masks)} masks for {len(self.images)} images")
        if self.ids is None:
            self.ids = [f"{i:04d}" for i in range(len(self.images))]
        if len(self.ids) != len(self.images):
            raise ShapeError("ids must align with images")

    def __len__(self):
        return len(self.images)


def resize_map(arr, size, antialias=None):
    """Bilinear resize of an ``H x W`` or ``H x W x C`` array to ``size=(h, w)``."""
    arr = np.asarray(arr, dtype=np.float32)
    size = (int(size[0]), int(size[1]))
    if arr.shape[:2] == size:
        return arr.copy()
    t = torch.from_numpy(np.ascontiguousarray(arr))
    t = t[None, None] if arr.ndim == 2 else t.permute(2, 0, 1)[None]
    if antialias is None:
        antialias = size[0] < arr.shape[0] or size[1] < arr.shape[1]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=antialias)
    out = out[0, 0] if arr.ndim == 2 else out[0].permute(1, 2, 0)
    return np.clip(out.numpy(), 0.0, 1.0)


def resize_mask(mask, size):
    """Resize a binary mask, re-binarizing at 0.5."""
    return (resize_map(mask, size) >= 0.5).astype(np.float32)


def ingest(pixels, input_size):
    """Resize raw ``[0, 1]`` pixels to the square network input, keeping the original size."""
    pixels = np.asarray(pixels, dtype=np.float32)
    return Image(resize_map(pixels, (input_size, input_size)), original_size=pixels.shape[:2])


def binarize(mask):
    """Ground-truth binarization: 8-bit masks at 128, float masks at 0.5."""
    mask = np.asarray(mask)
    if mask.dtype == np.uint8:
        return (mask >= MASK_THRESHOLD).astype(np.float32)
    return (mask >= 0.5).astype(np.float32)


def read_rgb(path):
    try:
        with PILImage.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc


def read_gray(path):
    """8-bit grayscale as ``uint8``."""
    try:
        with PILImage.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read map {path}: {exc}") from exc


def read_mask(path):
    return binarize(read_gray(path))


def to_uint8(arr):
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_gray(path, arr):
    """Write a ``[0, 1]`` map as 8-bit grayscale, ``round(255 * s)``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(arr), mode="L").save(path)


def write_rgb(path, pixels):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(pixels), mode="RGB").save(path)


def find_image(directory, stem):
    """Locate ``<directory>/<stem>.<png|jpg|jpeg>``."""
    for suffix in IMAGE_SUFFIXES:
        p = Path(directory) / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def list_images(directory):
    directory = Path(directory)
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def image_tensor(images):
    """Stack ``Image`` objects (or raw arrays) into an ``N x 3 x H x W`` tensor."""
    arrs = [im.pixels if isinstance(im, Image) else np.asarray(im, dtype=np.float32) for im in images]
    return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous()


def mask_tensor(masks):
    return torch.from_numpy(np.stack([np.asarray(m, dtype=np.float32) for m in masks]))[:, None].contiguous()
