"""Jigsaw training data: turn grouped single-object saliency samples into
multi-foreground composites whose mask marks only the group's object.

On-disk dataset layout::

    <root>/<group>/img/<id>.png|jpg
    <root>/<group>/gt/<id>.png        8-bit, foreground >= 128

Label tables are text lines ``<sample_id><TAB><label>``.  An expanded dataset
adds ``manifest.jsonl`` with one record per sample.
"""

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .data import Image, find_image, list_images, read_mask, read_rgb, resize_map, resize_mask, write_gray, write_rgb
from .errors import ContractError, IngestionError, PreconditionError
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

DEFAULT_MIN_GROUP_SIZE = 8


@dataclass
class SODSample:
    image: Image
    mask: np.ndarray
    category: str
    sample_id: str

    def __post_init__(self):
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float32)
            if not (self.mask >= 0.5).any():
                raise ContractError(f"sample {self.sample_id} has an empty mask")


@dataclass(frozen=True)
class JigsawProvenance:
    jigsaw_id: str
    group: str
    target: str
    distractors: tuple
    cell: int
    seed: int
    grid: int = 2

    def to_record(self):
        d = asdict(self)
        d["distractors"] = list(self.distractors)
        return {"kind": "jigsaw", **d}


@dataclass
class JigsawSample:
    image: Image
    mask: np.ndarray
    provenance: JigsawProvenance


# -- label tables and grouping ---------------------------------------------------

def read_label_table(path):
    labels = {}
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"label table not found: {path}")
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise IngestionError(f"{path}:{n}: expected '<sample_id><TAB><label>'")
        labels[parts[0]] = parts[1]
    return labels


def write_label_table(path, labels):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}\t{v}\n" for k, v in labels.items()))


def assign_groups(samples, labels, min_group_size=DEFAULT_MIN_GROUP_SIZE):
    """Partition samples by label, dropping groups smaller than ``min_group_size``."""
    missing = [s.sample_id for s in samples if s.sample_id not in labels]
    if missing:
        raise IngestionError(f"{len(missing)} samples have no label: {', '.join(missing[:20])}")
    groups = {}
    for s in samples:
        label = labels[s.sample_id]
        groups.setdefault(label, []).append(replace(s, category=label) if s.category != label else s)
    kept = {}
    for label in sorted(groups):
        members = sorted(groups[label], key=lambda s: s.sample_id)
        if len(members) < min_group_size:
            log.info("dropping group %r: %d samples < %d", label, len(members), min_group_size)
            continue
        kept[label] = members
    dropped = len(groups) - len(kept)
    if dropped:
        log.info("dropped %d noisy groups (%d samples)", dropped,
                 sum(len(v) for k, v in groups.items() if k not in kept))
    return kept


# -- composition ---------------------------------------------------------------

def _tile_box(cell, grid, size):
    tile = size // grid
    r, c = divmod(cell, grid)
    return r * tile, c * tile, tile


def compose_jigsaw(target, distractors, seed, size=None, grid=2, group=None, jigsaw_id=None):
    """Splice ``target`` with ``grid**2 - 1`` distractor samples on a grid.

    Each source is resized to one tile; the target takes a cell drawn from
    ``seed`` and the distractors fill the remaining cells in order.  The mask
    is the target's mask in its cell and zero elsewhere.
    """
    if len(distractors) != grid * grid - 1:
        raise ContractError(f"a {grid}x{grid} jigsaw needs {grid * grid - 1} distractors, got {len(distractors)}")
    for d in distractors:
        if d.category == target.category:
            raise ContractError(f"distractor {d.sample_id} shares category {target.category!r} with the target")
    size = size or target.image.size[0]
    cell = int(np.random.default_rng(seed).integers(grid * grid))
    out = np.zeros((size, size, 3), dtype=np.float32)
    mask = np.zeros((size, size), dtype=np.float32)
    others = iter(distractors)
    for k in range(grid * grid):
        y, x, tile = _tile_box(k, grid, size)
        src = target if k == cell else next(others)
        out[y:y + tile, x:x + tile] = resize_map(src.image.pixels, (tile, tile))
        if k == cell:
            mask[y:y + tile, x:x + tile] = resize_mask(target.mask, (tile, tile))
    prov = JigsawProvenance(jigsaw_id or f"{target.sample_id}_jig", group or target.category,
                            target.sample_id, tuple(d.sample_id for d in distractors), cell, int(seed), grid)
    return JigsawSample(Image(out, original_size=(size, size)), mask, prov)


def recompose(provenance, samples_by_id, size=None):
    """Rebuild a jigsaw from its provenance record."""
    try:
        target = samples_by_id[provenance.target]
        distractors = [samples_by_id[d] for d in provenance.distractors]
    except KeyError as exc:
        raise IngestionError(f"provenance refers to unknown sample {exc}") from exc
    sample = compose_jigsaw(target, distractors, provenance.seed, size, provenance.grid,
                            provenance.group, provenance.jigsaw_id)
    if sample.provenance.cell != provenance.cell:
        raise ContractError(f"provenance cell {provenance.cell} disagrees with seed-derived cell")
    return sample


# -- expansion and epoch sampling ----------------------------------------------

@dataclass
class ExpandedDataset:
    """Per-group training items: ``SODSample`` originals and lazy ``JigsawProvenance`` plans."""

    groups: dict
    samples: dict

    def __len__(self):
        return sum(len(v) for v in self.groups.values())

    def jigsaws(self):
        return [it for items in self.groups.values() for it in items if isinstance(it, JigsawProvenance)]

    def manifest(self):
        records = []
        for group, items in self.groups.items():
            for it in items:
                if isinstance(it, JigsawProvenance):
                    records.append(it.to_record())
                else:
                    records.append({"kind": "original", "jigsaw_id": None, "id": it.sample_id, "group": group})
        return records


def expand_dataset(groups, jigsaws_per_sample=3, seed=0, grid=2):
    """Every original sample plus ``jigsaws_per_sample`` jigsaws per sample.

    Distractors come from distinct other groups when enough exist, otherwise
    groups repeat.  Each jigsaw's draws depend only on ``(seed, sample id, k)``.
    """
    names = list(groups)
    if jigsaws_per_sample and len(names) < 2:
        raise PreconditionError("jigsaw expansion needs at least two groups for cross-category distractors")
    n_dis = grid * grid - 1
    samples = {s.sample_id: s for items in groups.values() for s in items}
    out = {}
    for name in names:
        others = [n for n in names if n != name]
        items = []
        for s in groups[name]:
            items.append(s)
            for k in range(jigsaws_per_sample):
                rng = rng_for(seed, "jigsaw", s.sample_id, k)
                picked = rng.choice(len(others), size=n_dis, replace=len(others) < n_dis)
                dis = tuple(groups[others[g]][int(rng.integers(len(groups[others[g]])))].sample_id for g in picked)
                compose_seed = derive_seed(seed, "compose", s.sample_id, k)
                cell = int(np.random.default_rng(compose_seed).integers(grid * grid))
                items.append(JigsawProvenance(f"{s.sample_id}_j{k}", name, s.sample_id, dis, cell,
                                              compose_seed, grid))
        out[name] = items
    return ExpandedDataset(out, samples)


def sample_epoch(groups, max_per_group=20, seed=0):
    """Shuffled group order, each with a seeded subset of at most ``max_per_group`` items."""
    rng = rng_for(seed, "epoch")
    names = list(groups)
    plan = []
    for gi in rng.permutation(len(names)):
        name = names[int(gi)]
        items = list(groups[name])
        k = min(len(items), max_per_group)
        idx = np.sort(rng.choice(len(items), size=k, replace=False))
        plan.append((name, [items[int(i)] for i in idx]))
    return plan


def materialize(item, samples_by_id, size):
    """``(Image, mask)`` at ``size x size`` for an original sample or a jigsaw plan."""
    if isinstance(item, JigsawProvenance):
        j = recompose(item, samples_by_id, size)
        return j.image, j.mask
    return Image(resize_map(item.image.pixels, (size, size)), original_size=item.image.size), \
        resize_mask(item.mask, (size, size))


# -- disk I/O ------------------------------------------------------------------

def load_samples(root, category_from_dir=True):
    """Read every ``<root>/<group>/img/<id>`` with its ``gt/<id>.png``."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root not found: {root}")
    samples, missing = [], []
    for group_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for img_path in list_images(group_dir / "img"):
            gt_path = find_image(group_dir / "gt", img_path.stem)
            if gt_path is None:
                missing.append(f"{group_dir.name}/{img_path.stem}")
                continue
            samples.append(SODSample(Image(read_rgb(img_path)), read_mask(gt_path),
                                     group_dir.name if category_from_dir else "", img_path.stem))
    if missing:
        raise IngestionError(f"{len(missing)} images lack ground truth: {', '.join(missing[:20])}")
    if not samples:
        raise IngestionError(f"no samples under {root}")
    return samples


def write_expanded(expanded, out_root, size, manifest_only=False):
    """Write the expanded dataset (unless ``manifest_only``) and ``manifest.jsonl``."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    if not manifest_only:
        for group, items in expanded.groups.items():
            for it in items:
                image, mask = materialize(it, expanded.samples, size)
                sid = it.jigsaw_id if isinstance(it, JigsawProvenance) else it.sample_id
                write_rgb(out_root / group / "img" / f"{sid}.png", image.pixels)
                write_gray(out_root / group / "gt" / f"{sid}.png", mask)
    with open(out_root / "manifest.jsonl", "w") as fh:
        for rec in expanded.manifest():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out_root / "manifest.jsonl"


def read_manifest(path):
    provs = []
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        if rec.get("kind") == "jigsaw":
            rec.pop("kind")
            rec["distractors"] = tuple(rec["distractors"])
            provs.append(JigsawProvenance(**rec))
    return provs
