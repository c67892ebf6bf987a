"""Frozen embedding network, per-image feature pyramids and the group consensus.

Two backbones share one contract: ``blocks(x)`` returns the five stage
activations ``[F1, ..., F5]`` (strictly decreasing spatial size) and
``head(f5)`` maps the top block to classifier logits, which serve as the
image embedding (no softmax).
"""

import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import Image, image_tensor
from .errors import ConfigurationError, NumericError, PreconditionError, ShapeError

CHECKPOINT_FORMAT = "cosal-backbone"
CHECKPOINT_VERSION = 1

TOY_WIDTHS = (16, 32, 64, 64, 64)
VGG_WIDTHS = (64, 128, 256, 512, 512)
# last ReLU of each VGG-16 stage, i.e. the activation right before its max-pool
_VGG_STAGE_ENDS = (4, 9, 16, 23, 30)


@dataclass
class BackboneSpec:
    variant: str = "toy"
    widths: tuple = TOY_WIDTHS
    embedding_dim: int = 12
    checkpoint: str = None
    head_hidden: int = 0

    def __post_init__(self):
        if self.variant not in ("toy", "paper-scale"):
            raise ConfigurationError(f"unknown backbone variant {self.variant!r}")
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 5:
            raise ConfigurationError("a backbone has exactly five blocks")
        if self.variant == "paper-scale":
            if self.widths != VGG_WIDTHS or self.embedding_dim != 1000:
                raise ConfigurationError("paper-scale backbone is VGG-16: widths 64/128/256/512/512, d=1000")

    @classmethod
    def paper_scale(cls, checkpoint=None):
        return cls(variant="paper-scale", widths=VGG_WIDTHS, embedding_dim=1000, checkpoint=checkpoint)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class FeaturePyramid:
    blocks: list
    embedding: torch.Tensor
    input_size: tuple = None

    @property
    def f5(self):
        return self.blocks[4]


@dataclass
class ConsensusEmbedding:
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)

    def tensor(self, dtype=torch.float32):
        return torch.as_tensor(self.weights, dtype=dtype)

    def __len__(self):
        return len(self.weights)


class ToyBackbone(nn.Module):
    """Five stride-2 conv stages and a small classification head.

    BatchNorm runs on frozen statistics once the backbone is frozen, so it acts
    per pixel and images stay independent of each other and of the batch.
    """

    def __init__(self, widths=TOY_WIDTHS, num_classes=12, head_hidden=0):
        super().__init__()
        stages = []
        c_in = 3
        # 1x1 second convs keep F5 receptive fields well below the image size,
        # so class evidence stays where the object is
        for w in widths:
            stages.append(nn.Sequential(
                nn.Conv2d(c_in, w, 3, stride=2, padding=1), nn.BatchNorm2d(w), nn.ReLU(inplace=True),
                nn.Conv2d(w, w, 1), nn.BatchNorm2d(w), nn.ReLU(inplace=True),
            ))
            c_in = w
        self.stages = nn.ModuleList(stages)
        if head_hidden:
            # smooth activation keeps d(logits)/d(F5) free of kinks
            self.classifier = nn.Sequential(
                nn.Conv2d(c_in, head_hidden, 1), nn.SiLU(),
                nn.AdaptiveAvgPool2d(1), nn.Flatten(),
                nn.Linear(head_hidden, num_classes),
            )
        else:
            # pooled linear head: class evidence has to live in individual F5 channels
            self.classifier = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(c_in, num_classes))

    def blocks(self, x):
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out

    def head(self, f5):
        return self.classifier(f5)

    def forward(self, x):
        return self.head(self.blocks(x)[-1])


class VGGBackbone(nn.Module):
    """VGG-16 split into its five pre-pooling stages plus pool5 and the classifier."""

    def __init__(self):
        super().__init__()
        from torchvision.models import vgg16

        net = vgg16(weights=None)
        self.features = net.features
        self.avgpool = net.avgpool
        self.classifier = net.classifier

    def blocks(self, x):
        out = []
        start = 0
        for end in _VGG_STAGE_ENDS:
            for layer in self.features[start:end]:
                x = layer(x)
            out.append(x)
            start = end
        return out

    def head(self, f5):
        x = self.features[30](f5)
        x = self.avgpool(x)
        return self.classifier(torch.flatten(x, 1))

    def forward(self, x):
        return self.head(self.blocks(x)[-1])


def build_backbone(spec, seed=None):
    """Freshly initialized (untrained) backbone for ``spec``."""
    if seed is not None:
        torch.manual_seed(seed)
    if spec.variant == "toy":
        return ToyBackbone(spec.widths, spec.embedding_dim, spec.head_hidden)
    return VGGBackbone()


def freeze(module):
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def state_hash(module):
    """Content hash of a module's parameters and buffers."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_backbone(module, spec, path, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": spec.to_dict() | {"checkpoint": None},
        "state_dict": module.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_backbone(spec):
    """Load and freeze the backbone named by ``spec.checkpoint``.

    Raw torchvision VGG-16 state dicts are accepted for the paper-scale variant.
    """
    if not spec.checkpoint:
        raise ConfigurationError("backbone spec has no checkpoint locator")
    path = Path(spec.checkpoint)
    if not path.exists():
        raise ConfigurationError(f"backbone checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ConfigurationError(f"unreadable backbone checkpoint {path}: {exc}") from exc

    if isinstance(payload, dict) and payload.get("format") == CHECKPOINT_FORMAT:
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported backbone checkpoint version {payload.get('version')}")
        stored = payload["spec"]
        if stored["variant"] != spec.variant or tuple(stored["widths"]) != spec.widths \
                or stored["embedding_dim"] != spec.embedding_dim \
                or stored.get("head_hidden", spec.head_hidden) != spec.head_hidden:
            raise ConfigurationError(f"checkpoint {path} does not match backbone spec: {stored}")
        state = payload["state_dict"]
    elif spec.variant == "paper-scale" and isinstance(payload, dict):
        state = payload
    else:
        raise ConfigurationError(f"{path} is not a backbone checkpoint")

    module = build_backbone(spec)
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise ConfigurationError(f"checkpoint {path} does not fit the {spec.variant} backbone: {exc}") from exc
    return freeze(module)


def read_backbone_spec(path):
    """Recover the ``BackboneSpec`` stored inside a backbone checkpoint."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"backbone checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if isinstance(payload, dict) and payload.get("format") == CHECKPOINT_FORMAT:
        d = dict(payload["spec"])
        d["checkpoint"] = str(path)
        return BackboneSpec(**d)
    return BackboneSpec.paper_scale(str(path))


def _check_finite(t, what):
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")


def extract_features(image, backbone):
    """Five-block pyramid and classifier-logit embedding of one image."""
    x = image_tensor([image]) if isinstance(image, Image) else image
    if x.ndim == 3:
        x = x[None]
    dtype = next(backbone.parameters()).dtype
    with torch.no_grad():
        blocks = backbone.blocks(x.to(dtype))
        embedding = backbone.head(blocks[-1])
    for i, b in enumerate(blocks):
        _check_finite(b, f"block F{i + 1}")
    _check_finite(embedding, "embedding")
    return FeaturePyramid(blocks=[b[0] for b in blocks], embedding=embedding[0],
                          input_size=tuple(x.shape[-2:]))


def consensus(embeddings):
    """Softmax of the summed embeddings.

    The sum is exactly rounded per coordinate, so the result does not depend
    on the order of the group.
    """
    vecs = [np.asarray(e.detach().cpu().numpy() if torch.is_tensor(e) else e, dtype=np.float64).ravel()
            for e in embeddings]
    if not vecs:
        raise PreconditionError("consensus needs at least one embedding")
    d = vecs[0].shape[0]
    for v in vecs:
        if v.shape[0] != d:
            raise ShapeError(f"embedding dimensions differ: {v.shape[0]} vs {d}")
        if not np.all(np.isfinite(v)):
            raise NumericError("non-finite embedding")
    stacked = np.stack(vecs, axis=1)
    total = np.array([math.fsum(row) for row in stacked])
    z = np.exp(total - total.max())
    return ConsensusEmbedding(z / z.sum())
