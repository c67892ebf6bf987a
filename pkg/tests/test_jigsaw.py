import json

import numpy as np
import pytest

from cosal.data import Image, write_gray, write_rgb
from cosal.errors import ContractError, IngestionError, PreconditionError
from cosal.jigsaw import (
    JigsawProvenance, SODSample, assign_groups, compose_jigsaw, expand_dataset, load_samples, materialize,
    read_label_table, read_manifest, recompose, sample_epoch, write_expanded, write_label_table,
)


def make_sample(category, sid, rng, size=32):
    mask = np.zeros((size, size), dtype=np.float32)
    y, x = rng.integers(0, size - 8, 2)
    mask[y:y + 8, x:x + 8] = 1
    return SODSample(Image(rng.random((size, size, 3)).astype(np.float32)), mask, category, sid)


def make_groups(n_groups, per_group, seed=0, size=32):
    rng = np.random.default_rng(seed)
    return {f"g{k:03d}": [make_sample(f"g{k:03d}", f"g{k:03d}_{i:03d}", rng, size) for i in range(per_group)]
            for k in range(n_groups)}


def leaked_pixels(sample):
    """Mask mass outside the target's cell."""
    size = sample.mask.shape[0]
    tile = size // sample.provenance.grid
    r, c = divmod(sample.provenance.cell, sample.provenance.grid)
    outside = sample.mask.copy()
    outside[r * tile:(r + 1) * tile, c * tile:(c + 1) * tile] = 0
    return int(np.count_nonzero(outside))


def test_composition_layout():
    groups = make_groups(4, 1, seed=1)
    target, *distractors = [v[0] for v in groups.values()]
    j = compose_jigsaw(target, distractors, seed=5, size=64)
    assert j.image.size == (64, 64) and j.mask.shape == (64, 64)
    assert leaked_pixels(j) == 0
    r, c = divmod(j.provenance.cell, 2)
    tile_mask = j.mask[r * 32:(r + 1) * 32, c * 32:(c + 1) * 32]
    assert tile_mask.sum() > 0
    assert set(np.unique(j.mask)) <= {0.0, 1.0}
    assert j.provenance.distractors == tuple(d.sample_id for d in distractors)


def test_composition_errors():
    groups = make_groups(3, 2)
    a, b, c = (v[0] for v in groups.values())
    with pytest.raises(ContractError):
        compose_jigsaw(a, [b, c], seed=0)
    with pytest.raises(ContractError):
        compose_jigsaw(a, [b, c, groups["g000"][1]], seed=0)


def test_cell_depends_on_seed_only():
    groups = make_groups(4, 1)
    target, *distractors = [v[0] for v in groups.values()]
    cells = {compose_jigsaw(target, distractors, seed=s).provenance.cell for s in range(40)}
    assert cells == {0, 1, 2, 3}
    assert compose_jigsaw(target, distractors, seed=9).provenance.cell == \
        compose_jigsaw(target, distractors[::-1], seed=9).provenance.cell


def test_empty_masks_rejected():
    with pytest.raises(ContractError):
        SODSample(Image(np.zeros((4, 4, 3), np.float32)), np.zeros((4, 4)), "a", "x")


def test_expand_quadruples_and_plans_valid_jigsaws():
    groups = make_groups(5, 6)
    expanded = expand_dataset(groups, jigsaws_per_sample=3, seed=11)
    assert len(expanded) == 4 * 30
    for name, items in expanded.groups.items():
        assert len(items) == 4 * len(groups[name])
    for prov in expanded.jigsaws():
        target_cat = expanded.samples[prov.target].category
        cats = [expanded.samples[d].category for d in prov.distractors]
        assert len(set(cats)) == 3 and target_cat not in cats
        assert prov.group == target_cat


def test_expand_is_deterministic_and_needs_two_groups():
    groups = make_groups(4, 3)
    a = expand_dataset(groups, seed=2).manifest()
    b = expand_dataset(groups, seed=2).manifest()
    assert a == b
    assert a != expand_dataset(groups, seed=3).manifest()
    with pytest.raises(PreconditionError):
        expand_dataset(make_groups(1, 3))


def test_expand_reuses_groups_when_few_exist():
    expanded = expand_dataset(make_groups(2, 2), seed=0)
    for prov in expanded.jigsaws():
        assert all(expanded.samples[d].category != prov.group for d in prov.distractors)


def test_paper_sized_expansion_counts():
    rng = np.random.default_rng(0)
    sizes = rng.multinomial(8250 - 291 * 8, np.ones(291) / 291) + 8
    groups = {f"c{k:03d}": [SODSample(None, None, f"c{k:03d}", f"c{k:03d}_{i:04d}") for i in range(n)]
              for k, n in enumerate(sizes)}
    assert sum(len(v) for v in groups.values()) == 8250
    expanded = expand_dataset(groups, seed=0)
    assert len(expanded) == 33000
    assert len(expanded.jigsaws()) == 24750


def test_recompose_is_bit_exact():
    groups = make_groups(4, 3, seed=4)
    expanded = expand_dataset(groups, seed=7)
    for prov in expanded.jigsaws()[:10]:
        a = recompose(prov, expanded.samples, 64)
        b = recompose(JigsawProvenance(**{k: v for k, v in prov.to_record().items() if k != "kind"}
                                       | {"distractors": tuple(prov.distractors)}), expanded.samples, 64)
        assert np.array_equal(a.image.pixels, b.image.pixels)
        assert np.array_equal(a.mask, b.mask)
        assert a.provenance == prov


def test_recompose_errors():
    groups = make_groups(4, 2)
    expanded = expand_dataset(groups, seed=0)
    prov = expanded.jigsaws()[0]
    with pytest.raises(IngestionError):
        recompose(prov, {}, 32)
    wrong = JigsawProvenance(prov.jigsaw_id, prov.group, prov.target, prov.distractors,
                             (prov.cell + 1) % 4, prov.seed)
    with pytest.raises(ContractError):
        recompose(wrong, expanded.samples, 32)


def test_sample_epoch_caps_and_shuffles():
    groups = {"a": list(range(50)), "b": list(range(5)), "c": list(range(20))}
    plan = sample_epoch(groups, max_per_group=20, seed=1)
    assert sorted(name for name, _ in plan) == ["a", "b", "c"]
    sizes = dict((name, len(items)) for name, items in plan)
    assert sizes == {"a": 20, "b": 5, "c": 20}
    for name, items in plan:
        assert len(set(items)) == len(items) and set(items) <= set(groups[name])
    assert plan == sample_epoch(groups, 20, seed=1)
    orders = {tuple(n for n, _ in sample_epoch(groups, 20, seed=s)) for s in range(20)}
    assert len(orders) > 1


def test_materialize_original_and_jigsaw():
    groups = make_groups(4, 2)
    expanded = expand_dataset(groups, seed=0)
    image, mask = materialize(groups["g000"][0], expanded.samples, 48)
    assert image.size == (48, 48) and mask.shape == (48, 48)
    image, mask = materialize(expanded.jigsaws()[0], expanded.samples, 48)
    assert image.size == (48, 48)


def test_assign_groups(caplog):
    rng = np.random.default_rng(0)
    samples = [make_sample("x", f"s{i}", rng) for i in range(12)]
    labels = {f"s{i}": ("big" if i < 9 else "small") for i in range(12)}
    with caplog.at_level("INFO"):
        groups = assign_groups(samples, labels, min_group_size=8)
    assert list(groups) == ["big"]
    assert all(s.category == "big" for s in groups["big"])
    assert "small" in caplog.text
    with pytest.raises(IngestionError):
        assign_groups(samples, {"s0": "a"})


def test_label_table_round_trip(tmp_path):
    labels = {"a": "cat", "b": "dog"}
    write_label_table(tmp_path / "l.tsv", labels)
    assert read_label_table(tmp_path / "l.tsv") == labels
    (tmp_path / "bad.tsv").write_text("a cat\n")
    with pytest.raises(IngestionError):
        read_label_table(tmp_path / "bad.tsv")
    with pytest.raises(IngestionError):
        read_label_table(tmp_path / "missing.tsv")


def test_disk_round_trip(tmp_path):
    groups = make_groups(3, 2, seed=5)
    for name, items in groups.items():
        for s in items:
            write_rgb(tmp_path / "src" / name / "img" / f"{s.sample_id}.png", s.image.pixels)
            write_gray(tmp_path / "src" / name / "gt" / f"{s.sample_id}.png", s.mask)
    loaded = load_samples(tmp_path / "src")
    assert sorted(s.sample_id for s in loaded) == sorted(s.sample_id for v in groups.values() for s in v)
    expanded = expand_dataset(assign_groups(loaded, {s.sample_id: s.category for s in loaded}, 2), seed=0)
    manifest = write_expanded(expanded, tmp_path / "out", 32)
    records = [json.loads(line) for line in manifest.read_text().splitlines()]
    assert len(records) == 24
    assert sum(r["kind"] == "jigsaw" for r in records) == 18
    assert read_manifest(manifest) == expanded.jigsaws()
    assert len(list((tmp_path / "out").glob("*/img/*.png"))) == 24
    only = write_expanded(expanded, tmp_path / "plan", 32, manifest_only=True)
    assert only.read_text() == manifest.read_text()
    assert not list((tmp_path / "plan").glob("*/img"))


def test_load_samples_errors(tmp_path):
    with pytest.raises(IngestionError):
        load_samples(tmp_path / "missing")
    write_rgb(tmp_path / "g" / "img" / "a.png", np.zeros((4, 4, 3)))
    with pytest.raises(IngestionError):
        load_samples(tmp_path)
