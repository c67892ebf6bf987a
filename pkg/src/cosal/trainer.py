"""Training, inference, checkpoints and the ablation grid.

One optimizer step per group batch: the group's consensus is computed from
the sampled batch, every image is induced and decoded, and the deep
supervision losses of the batch are summed.  Only decoder parameters train;
the backbone stays frozen.
"""

import functools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import metrics
from .data import Image, image_tensor, mask_tensor, resize_map
from .decoder import Decoder, upsample
from .encoder import build_backbone, consensus, freeze, state_hash
from .errors import ConfigurationError, NumericError, PreconditionError, TrainingDivergedError
from .gim import gim
from .jigsaw import ExpandedDataset, expand_dataset, materialize, sample_epoch
from .loss import group_loss
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cosal-checkpoint"
CHECKPOINT_VERSION = 1

# Table-2 variant letters -> (jigsaw training, gradient inducing, attention retaining)
VARIANTS = {
    "A": (False, False, False),
    "B": (True, False, False),
    "C": (False, True, False),
    "D": (False, False, True),
    "E": (True, True, False),
    "F": (True, False, True),
    "G": (False, True, True),
    "GICD": (True, True, True),
}


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    lr_drop_epoch: int = 50
    lr_drop_factor: float = 10.0
    input_size: int = 224
    max_per_group: int = 20
    jigsaws_per_sample: int = 3
    min_group_size: int = 8
    seed: int = 0
    backbone: str = "toy"
    use_jt: bool = True
    use_gim: bool = True
    use_arm: bool = True

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2", "lr_drop_factor", "input_size", "max_per_group", "lr_drop_epoch"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.epochs < 0 or self.jigsaws_per_sample < 0:
            raise ConfigurationError("epochs and jigsaws_per_sample must be non-negative")
        if not (self.beta1 < 1 and self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in (0, 1)")
        if self.input_size % 32:
            raise ConfigurationError("input_size must be a multiple of 32 (five stride-2 stages)")

    def lr_at(self, epoch):
        """Learning rate of 1-based ``epoch``: divided once after ``lr_drop_epoch``."""
        return self.lr / self.lr_drop_factor if epoch > self.lr_drop_epoch else self.lr

    def with_variant(self, letter):
        jt, g, a = VARIANTS[letter]
        return TrainConfig(**{**asdict(self), "use_jt": jt, "use_gim": g, "use_arm": a})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class CoSalNet(nn.Module):
    """Frozen backbone + gradient inducing + decoder.

    The backbone is held outside the module tree so that ``train()``,
    ``parameters()`` and ``state_dict()`` only see the decoder.
    """

    def __init__(self, backbone, widths, use_gim=True, use_arm=True):
        super().__init__()
        object.__setattr__(self, "backbone", freeze(backbone))
        self.decoder = Decoder(widths, use_arm=use_arm)
        self.use_gim = use_gim

    def encode(self, x):
        with torch.no_grad():
            blocks = self.backbone.blocks(x)
            emb = self.backbone.head(blocks[-1])
        return blocks, emb

    def induce(self, f5, e_dag):
        if not self.use_gim:
            return f5, torch.ones(f5.shape[:2], dtype=f5.dtype)
        return gim(self.backbone, f5, e_dag)

    def forward(self, x, e_dag=None, out_size=None, return_all=False):
        blocks, emb = self.encode(x)
        if e_dag is None:
            e_dag = consensus(list(emb))
        f5_induced, w = self.induce(blocks[-1], e_dag)
        maps = self.decoder(blocks, f5_induced, out_size=out_size or tuple(x.shape[-2:]))
        if return_all:
            return maps, {"blocks": blocks, "embeddings": emb, "consensus": e_dag,
                          "f5_induced": f5_induced, "weights": w}
        return maps


@dataclass
class Checkpoint:
    decoder_state: dict
    backbone_hash: str
    backbone_spec: dict
    config: dict
    epoch: int
    rng_state: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **asdict(self)}, path)
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"checkpoint not found: {path}")
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise ConfigurationError(f"{path} is not a co-saliency checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {payload.get('version')}")
        return cls(**{f.name: payload[f.name] for f in fields(cls)})

    @property
    def train_config(self):
        return TrainConfig.from_dict(self.config)


def build_model(config, backbone, widths=None):
    widths = widths or tuple(b.shape[0] for b in _probe_widths(backbone))
    model = CoSalNet(backbone, widths, use_gim=config.use_gim, use_arm=config.use_arm)
    model.input_size = config.input_size
    return model


def _probe_widths(backbone):
    with torch.no_grad():
        dtype = next(backbone.parameters()).dtype
        return [b[0] for b in backbone.blocks(torch.zeros(1, 3, 64, 64, dtype=dtype))]


def load_model(checkpoint, backbone):
    """Rebuild the network of ``checkpoint`` on ``backbone``, checking identity."""
    if state_hash(backbone) != checkpoint.backbone_hash:
        raise ConfigurationError("backbone does not match the one this checkpoint was trained with")
    model = build_model(checkpoint.train_config, backbone)
    model.decoder.load_state_dict(checkpoint.decoder_state)
    model.eval()
    return model


class _SampleCache:
    """Resized originals and composed jigsaws at network input size."""

    def __init__(self, samples_by_id, size):
        self.samples = samples_by_id
        self.size = size
        self._originals = {}

    def get(self, item):
        key = getattr(item, "sample_id", None)
        if key is not None and key in self._originals:
            return self._originals[key]
        image, mask = materialize(item, self.samples, self.size)
        if key is not None:
            self._originals[key] = (image, mask)
        return image, mask


def _training_items(config, groups):
    if config.use_jt and config.jigsaws_per_sample > 0:
        return expand_dataset(groups, config.jigsaws_per_sample, derive_seed(config.seed, "jigsaw"))
    return ExpandedDataset({k: list(v) for k, v in groups.items()},
                           {s.sample_id: s for v in groups.values() for s in v})


def _flush_denormals(fn):
    # saturated sigmoid guides produce subnormal floats, which are very slow on CPU;
    # the switch is process-wide, so it is restored on the way out
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        torch.set_flush_denormal(True)
        try:
            return fn(*args, **kwargs)
        finally:
            torch.set_flush_denormal(False)
    return wrapper


@_flush_denormals
def train(config, groups, backbone, backbone_spec=None, log_path=None, callback=None):
    """Train the decoder on ``{group: [SODSample, ...]}`` and return a ``Checkpoint``.

    ``callback(epoch, model, history, optimizer)`` runs after every epoch.
    """
    if not groups or not any(groups.values()):
        raise PreconditionError("training needs a non-empty grouped dataset")
    torch.manual_seed(derive_seed(config.seed, "decoder-init"))
    model = build_model(config, backbone)
    frozen_before = state_hash(model.backbone)
    opt = torch.optim.Adam(model.decoder.parameters(), lr=config.lr_at(1), betas=(config.beta1, config.beta2))
    items = _training_items(config, groups)
    cache = _SampleCache(items.samples, config.input_size)
    history = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            lr = config.lr_at(epoch)
            for pg in opt.param_groups:
                pg["lr"] = lr
            model.train()
            plan = sample_epoch(items.groups, config.max_per_group, derive_seed(config.seed, "epoch", epoch))
            total, count, t0 = 0.0, 0, time.time()
            for group, batch in plan:
                pairs = [cache.get(it) for it in batch]
                x = image_tensor([p[0] for p in pairs])
                y = mask_tensor([p[1] for p in pairs])
                try:
                    maps = model(x)
                except NumericError as exc:
                    raise TrainingDivergedError(f"epoch {epoch}, group {group!r} (lr={lr}): {exc}") from exc
                loss = group_loss(maps, y)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, group {group!r} (lr={lr})")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                value = float(loss.detach())
                total += value
                count += len(batch)
                record = {"epoch": epoch, "group": group, "loss": value, "lr": lr, "n": len(batch)}
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
            mean = total / max(count, 1)
            history.append({"epoch": epoch, "mean_loss": mean, "lr": lr, "seconds": time.time() - t0})
            log.info("epoch %d lr %.1e mean loss %.4f (%.1fs)", epoch, lr, mean, time.time() - t0)
            if callback:
                callback(epoch, model, history, opt)
    finally:
        if log_fh:
            log_fh.close()
    if state_hash(model.backbone) != frozen_before:
        raise NumericError("backbone parameters changed during training")
    model.eval()
    return Checkpoint(
        decoder_state={k: v.detach().clone() for k, v in model.decoder.state_dict().items()},
        backbone_hash=frozen_before,
        backbone_spec=backbone_spec.to_dict() if backbone_spec is not None else {},
        config=config.to_dict(),
        epoch=config.epochs,
        rng_state={"torch": torch.get_rng_state()},
        history=history,
    )


def _ingest(image, size):
    px = image.pixels
    if px.shape[:2] != (size, size):
        px = resize_map(px, (size, size))
    return px


@_flush_denormals
def predict_group(model, images, input_size, return_all=False):
    """Per-image saliency at input size; one image per forward pass."""
    xs = [image_tensor([_ingest(im, input_size)]) for im in images]
    with torch.no_grad():
        embeddings = [model.encode(x)[1][0] for x in xs]
    e_dag = consensus(embeddings)
    out, extras = [], []
    for x in xs:
        # gradient inducing re-enables autograd locally
        with torch.no_grad():
            maps, info = model(x, e_dag=e_dag, return_all=True)
        if return_all:
            extras.append(info)
        out.append(maps)
    return (out, extras) if return_all else out


def infer_group(model, group, input_size=None):
    """Final saliency maps of a group, resized to each image's original size."""
    if len(group.images) == 0:
        raise PreconditionError("cannot infer on an empty group")
    model.eval()
    size = input_size or model.input_size
    results = []
    for im, maps in zip(group.images, predict_group(model, group.images, size)):
        s1 = maps[-1]
        h, w = im.original_size
        s = upsample(s1, (h, w))[0, 0] if tuple(s1.shape[-2:]) != (h, w) else s1[0, 0]
        results.append(s.clamp(0.0, 1.0).numpy().astype(np.float32))
    return results


def evaluate_model(model, eval_groups, input_size, f_avg="adaptive"):
    """Metric report of ``model`` on ``{name: ImageGroup}`` with masks."""
    pairs = {}
    for name, group in eval_groups.items():
        preds = infer_group(model, group, input_size)
        pairs[name] = list(zip(preds, group.masks))
    return metrics.evaluate_maps(pairs, f_avg=f_avg)


def run_ablation(base, groups, eval_groups, backbone, variants=None, out_dir=None, backbone_spec=None):
    """Train and evaluate each variant; one row of dataset metrics per variant."""
    rows = []
    for letter in variants or list(VARIANTS):
        cfg = base.with_variant(letter)
        t0 = time.time()
        ckpt = train(cfg, groups, backbone, backbone_spec)
        model = load_model(ckpt, backbone)
        report = evaluate_model(model, eval_groups, cfg.input_size)
        jt, g, a = VARIANTS[letter]
        row = {"variant": letter, "JT": jt, "GIM": g, "ARM": a,
               **{k: report.dataset[k] for k in metrics.SCALARS}, "seconds": round(time.time() - t0, 1)}
        rows.append(row)
        log.info("variant %s: %s", letter, row)
        if out_dir:
            ckpt.save(Path(out_dir) / f"variant_{letter}.pt")
    return rows


# -- toy backbone pretraining ------------------------------------------------------

def _augment(x, rng):
    if rng.random() < 0.5:
        x = torch.flip(x, dims=(-1,))
    if rng.random() < 0.5:
        x = torch.flip(x, dims=(-2,))
    return x


def pretrain_backbone(spec, train_set, heldout_set, input_size, epochs=30, lr=2e-3, batch_size=32, seed=0):
    """Fit the toy backbone as a classifier; returns ``(frozen module, held-out accuracy)``.

    ``train_set`` and ``heldout_set`` are lists of ``(pixels, class index)``.
    """
    if spec.variant != "toy":
        raise ConfigurationError("only the toy backbone is pretrained here")
    torch.manual_seed(derive_seed(seed, "backbone-init"))
    net = build_backbone(spec)
    rng = rng_for(seed, "backbone-batches")
    x_all = image_tensor([_ingest(Image(p), input_size) for p, _ in train_set])
    y_all = torch.tensor([c for _, c in train_set])
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    steps = epochs * math.ceil(len(train_set) / batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps)
    net.train()
    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = torch.as_tensor(order[i:i + batch_size])
            logits = net(_augment(x_all[idx], rng))
            loss = F.cross_entropy(logits, y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss.detach()) * len(idx)
        log.info("backbone epoch %d loss %.4f", epoch + 1, total / len(order))
    freeze(net)
    return net, classification_accuracy(net, heldout_set, input_size)


def classification_accuracy(net, dataset, input_size, batch_size=64):
    if not dataset:
        return float("nan")
    correct = 0
    with torch.no_grad():
        for i in range(0, len(dataset), batch_size):
            chunk = dataset[i:i + batch_size]
            x = image_tensor([_ingest(Image(p), input_size) for p, _ in chunk])
            pred = net(x).argmax(dim=1)
            correct += int((pred == torch.tensor([c for _, c in chunk])).sum())
    return correct / len(dataset)
