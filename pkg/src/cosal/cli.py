"""``cosal`` command suite.

Every artifact-producing command writes ``config.resolved.ini`` next to its
outputs; feeding that file back through ``--config`` reproduces the run.
Failures print one JSON record on stderr and exit nonzero (2 for usage and
configuration errors, 3 for missing or malformed inputs).
"""

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import Image, ImageGroup, find_image, list_images, read_mask, read_rgb, write_gray
from .errors import ConfigurationError, CosalError, IngestionError

log = logging.getLogger("cosal")

CACHE_ENV = "COSAL_CACHE_DIR"
RESOLVED_NAME = "config.resolved.ini"

# non-dataclass keys accepted per section, with their defaults
_EXTRA_KEYS = {
    "run": {"seed": 0, "cache_dir": ""},
    "paths": {"data": "", "labels": "", "eval": "", "backbone": "", "checkpoint": "", "out": ""},
    "backbone": {"pretrain_epochs": 30, "pretrain_lr": 2e-3, "pretrain_batch_size": 32, "input_size": 128},
    "eval": {"f_avg": "adaptive"},
    "synth": {"preset": "desk"},
}


class UsageError(ConfigurationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- configuration ---------------------------------------------------------------

def _dataclass_defaults(cls):
    return {f.name: getattr(cls(), f.name) for f in fields(cls)}


def _sections():
    from .encoder import BackboneSpec
    from .synthdata import SynthSpec
    from .trainer import TrainConfig

    train = _dataclass_defaults(TrainConfig)
    train.pop("seed")
    synth = {k: v for k, v in _dataclass_defaults(SynthSpec).items() if k != "seed"}
    backbone = _dataclass_defaults(BackboneSpec)
    backbone.pop("checkpoint")
    return {
        "run": dict(_EXTRA_KEYS["run"]),
        "paths": dict(_EXTRA_KEYS["paths"]),
        "train": train,
        "synth": {**dict(_EXTRA_KEYS["synth"]), **synth},
        "backbone": {**backbone, **_EXTRA_KEYS["backbone"]},
        "eval": dict(_EXTRA_KEYS["eval"]),
    }


def _coerce(raw, default, where):
    if isinstance(default, str):
        return raw
    try:
        value = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{where}: cannot parse {raw!r}") from exc
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true or false, got {raw!r}")
    elif isinstance(default, (int, float)) and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigurationError(f"{where}: expected a number, got {raw!r}")
    elif isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
        if not value.is_integer():
            raise ConfigurationError(f"{where}: expected an integer, got {raw!r}")
        value = int(value)
    elif isinstance(default, (list, tuple)) and not isinstance(value, list):
        raise ConfigurationError(f"{where}: expected a JSON list, got {raw!r}")
    return value


def _render(value):
    return value if isinstance(value, str) else json.dumps(list(value) if isinstance(value, tuple) else value)


def load_config(path=None):
    """Defaults overlaid with the INI file at ``path``; unknown sections or keys are errors."""
    resolved = _sections()
    if path is None:
        return resolved
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    for section in parser.sections():
        if section not in resolved:
            raise ConfigurationError(f"{path}: unknown section [{section}]")
        for key, raw in parser[section].items():
            if key not in resolved[section]:
                hint = " (the seed lives under [run])" if key == "seed" else ""
                raise ConfigurationError(f"{path}: unknown key {section}.{key}{hint}")
            resolved[section][key] = _coerce(raw, resolved[section][key], f"{path}: {section}.{key}")
    return resolved


def write_resolved(config, out_dir, command):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in config.items():
        parser[section] = {k: _render(v) for k, v in values.items()}
    with open(out_dir / RESOLVED_NAME, "w") as fh:
        fh.write(f"# cosal {__version__}, command: {command}\n")
        parser.write(fh)
    return out_dir / RESOLVED_NAME


def train_config(cfg):
    from .trainer import TrainConfig
    return TrainConfig(**cfg["train"], seed=cfg["run"]["seed"])


def synth_spec(cfg):
    from .synthdata import SynthSpec
    preset = cfg["synth"]["preset"]
    if preset not in ("desk", "tiny"):
        raise ConfigurationError(f"unknown synth preset {preset!r}")
    values = {k: v for k, v in cfg["synth"].items() if k != "preset"}
    defaults = {k: v for k, v in _sections()["synth"].items() if k != "preset"}
    base = SynthSpec.tiny(cfg["run"]["seed"]) if preset == "tiny" else SynthSpec.desk(cfg["run"]["seed"])
    # keys left at their defaults follow the preset
    overrides = {k: v for k, v in values.items() if _render(v) != _render(defaults[k])}
    return type(base)(**{**asdict(base), **overrides})


def backbone_spec(cfg, checkpoint=None):
    from .encoder import BackboneSpec
    keys = {f.name for f in fields(BackboneSpec)}
    values = {k: v for k, v in cfg["backbone"].items() if k in keys}
    return BackboneSpec(**values, checkpoint=checkpoint)


def cache_dir(cfg=None):
    """``$COSAL_CACHE_DIR``, else ``[run] cache_dir``, else ``~/.cache/cosal``."""
    configured = cfg["run"].get("cache_dir") if cfg else ""
    return Path(os.environ.get(CACHE_ENV) or configured or Path.home() / ".cache" / "cosal")


# -- disk helpers ------------------------------------------------------------------

def _require_dir(path, what):
    if not path:
        raise UsageError(f"missing {what}")
    path = Path(path)
    if not path.is_dir():
        raise IngestionError(f"{what} not found: {path}")
    return path


def _require_file(path, what):
    if not path:
        raise UsageError(f"missing {what}")
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{what} not found: {path}")
    return path


def load_groups(root, need_masks=False):
    """``{group: ImageGroup}`` from ``<root>/<group>/img/*`` (or images directly in the group dir)."""
    root = _require_dir(root, "image root")
    groups = {}
    for group_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        img_dir = group_dir / "img" if (group_dir / "img").is_dir() else group_dir
        paths = list_images(img_dir)
        if not paths:
            continue
        gt_dir = group_dir / "gt"
        masks = []
        for p in paths:
            gt = find_image(gt_dir, p.stem) if gt_dir.is_dir() else None
            if gt is None and need_masks:
                raise IngestionError(f"no ground truth for {group_dir.name}/{p.stem}")
            masks.append(read_mask(gt) if gt is not None else None)
        have = all(m is not None for m in masks)
        groups[group_dir.name] = ImageGroup(group_dir.name, [Image(read_rgb(p)) for p in paths],
                                            masks if have else None, [p.stem for p in paths])
    if not groups:
        raise IngestionError(f"no image groups under {root}")
    return groups


def load_classification_set(root):
    """``(train, heldout, names)`` from ``<root>/<category>/*.png`` and ``heldout.txt``."""
    root = _require_dir(root, "classification root")
    names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(names) < 2:
        raise IngestionError(f"classification set under {root} needs at least two categories")
    listed = root / "heldout.txt"
    heldout_rel = set(listed.read_text().split()) if listed.exists() else set()
    train, heldout = [], []
    for index, name in enumerate(names):
        for p in list_images(root / name):
            rel = f"{name}/{p.name}"
            (heldout if rel in heldout_rel else train).append((read_rgb(p), index))
    if not train:
        raise IngestionError(f"no training images under {root}")
    return train, heldout, names


def _grouped_training_set(data_root, labels_path, cfg):
    from .jigsaw import assign_groups, load_samples, read_label_table
    samples = load_samples(_require_dir(data_root, "training data root"))
    labels = read_label_table(labels_path) if labels_path else {s.sample_id: s.category for s in samples}
    return assign_groups(samples, labels, cfg["train"]["min_group_size"])


def _load_backbone(path, cfg):
    from .encoder import load_backbone, read_backbone_spec
    path = Path(path) if path else None
    if path is None:
        raise UsageError("missing --backbone checkpoint")
    spec = read_backbone_spec(path)
    return load_backbone(spec), spec


# -- commands ----------------------------------------------------------------------

def cmd_synth(args, cfg):
    from .synthdata import generate_dataset, write_dataset
    out = Path(args.out)
    spec = synth_spec(cfg)
    ds = generate_dataset(spec)
    write_dataset(ds, out)
    write_resolved(cfg, out, "synth")
    log.info("wrote %d training samples and %d eval groups to %s", len(ds.train), len(ds.eval_groups), out)
    return {"out": str(out), "train": len(ds.train), "eval_groups": len(ds.eval_groups)}


def _label_only_groups(labels_path, min_group_size):
    """Groups of image-less samples, enough to plan a manifest."""
    from .jigsaw import SODSample, assign_groups, read_label_table
    labels = read_label_table(labels_path)
    samples = [SODSample(None, None, label, sid) for sid, label in labels.items()]
    return assign_groups(samples, labels, min_group_size)


def cmd_jigsaw(args, cfg):
    from .jigsaw import expand_dataset, write_expanded
    out = Path(args.out)
    paths = cfg["paths"]
    if args.manifest_only and not paths["data"]:
        groups = _label_only_groups(_require_file(paths["labels"], "label table"), cfg["train"]["min_group_size"])
    else:
        groups = _grouped_training_set(paths["data"], paths["labels"], cfg)
    expanded = expand_dataset(groups, cfg["train"]["jigsaws_per_sample"], cfg["run"]["seed"])
    write_expanded(expanded, out, cfg["train"]["input_size"], manifest_only=args.manifest_only)
    write_resolved(cfg, out, "jigsaw")
    n_orig = sum(len(v) for v in groups.values())
    log.info("%d groups, %d samples -> %d items", len(groups), n_orig, len(expanded))
    return {"groups": len(groups), "samples": n_orig, "items": len(expanded),
            "manifest": str(out / "manifest.jsonl")}


def cmd_pretrain_backbone(args, cfg):
    from .encoder import save_backbone
    from .trainer import pretrain_backbone
    out = Path(args.out)
    root = _require_dir(cfg["paths"]["data"], "data root")
    cls_root = root / "cls" if (root / "cls").is_dir() else root
    train_set, heldout, names = load_classification_set(cls_root)
    spec = backbone_spec(cfg)
    spec.embedding_dim = len(names)
    b = cfg["backbone"]
    epochs = b["pretrain_epochs"]
    net, acc = pretrain_backbone(spec, train_set, heldout, b["input_size"], epochs=epochs, lr=b["pretrain_lr"],
                                 batch_size=b["pretrain_batch_size"], seed=cfg["run"]["seed"])
    path = save_backbone(net, spec, out / "backbone.pt", extra={"classes": names, "heldout_accuracy": acc})
    (out / "pretrain.json").write_text(json.dumps({"heldout_accuracy": acc, "classes": names,
                                                   "epochs": epochs}, indent=2))
    write_resolved(cfg, out, "pretrain-backbone")
    log.info("held-out accuracy %.4f", acc)
    return {"backbone": str(path), "heldout_accuracy": acc}


def cmd_train(args, cfg):
    from .trainer import train
    out = Path(args.out)
    paths = cfg["paths"]
    backbone, spec = _load_backbone(paths["backbone"], cfg)
    groups = _grouped_training_set(paths["data"], paths["labels"], cfg)
    config = train_config(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out, "train")
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    ckpt = train(config, groups, backbone, spec, log_path=log_path)
    path = ckpt.save(out / "checkpoint.pt")
    return {"checkpoint": str(path), "final_loss": ckpt.history[-1]["mean_loss"] if ckpt.history else None}


def _load_model(cfg):
    from .trainer import Checkpoint, load_model
    paths = cfg["paths"]
    ckpt = Checkpoint.load(_require_file(paths["checkpoint"], "checkpoint"))
    backbone_path = paths["backbone"] or ckpt.backbone_spec.get("checkpoint")
    backbone, _ = _load_backbone(backbone_path, cfg)
    return load_model(ckpt, backbone)


def cmd_infer(args, cfg):
    from .trainer import infer_group
    out = Path(args.out)
    model = _load_model(cfg)
    groups = load_groups(cfg["paths"]["data"])
    n = 0
    for name, group in groups.items():
        for sid, s in zip(group.ids, infer_group(model, group)):
            write_gray(out / name / f"{sid}.png", s)
            n += 1
    write_resolved(cfg, out, "infer")
    return {"groups": len(groups), "maps": n, "out": str(out)}


def cmd_eval(args, cfg):
    from .metrics import evaluate_dataset
    out = Path(args.out)
    pred = _require_dir(args.pred, "prediction root")
    gt = _require_dir(args.gt or cfg["paths"]["eval"], "ground-truth root")
    report = evaluate_dataset(pred, gt, f_avg=cfg["eval"]["f_avg"])
    report.write(out)
    write_resolved(cfg, out, "eval")
    return {"dataset": report.dataset, "missing": len(report.missing)}


def _synthetic_inputs(cfg):
    """Synthetic dataset and a pretrained backbone, cached under the cache dir by spec."""
    import pickle

    from .encoder import load_backbone, save_backbone
    from .synthdata import generate_dataset
    from .trainer import pretrain_backbone
    spec = synth_spec(cfg)
    b = cfg["backbone"]
    key = hashlib.sha256(json.dumps({"synth": spec.to_dict(), "backbone": b},
                                    sort_keys=True).encode()).hexdigest()[:16]
    root = cache_dir(cfg) / "synthetic" / key
    ds_path, bb_path = root / "dataset.pkl", root / "backbone.pt"
    if ds_path.exists():
        with open(ds_path, "rb") as fh:
            ds = pickle.load(fh)
    else:
        ds = generate_dataset(spec)
        root.mkdir(parents=True, exist_ok=True)
        with open(ds_path, "wb") as fh:
            pickle.dump(ds, fh)
    bspec = backbone_spec(cfg)
    bspec.embedding_dim = len(spec.categories)
    if bb_path.exists():
        bspec.checkpoint = str(bb_path)
        backbone = load_backbone(bspec)
    else:
        backbone, acc = pretrain_backbone(bspec, ds.cls_train, ds.cls_heldout, b["input_size"],
                                          epochs=b["pretrain_epochs"], lr=b["pretrain_lr"],
                                          batch_size=b["pretrain_batch_size"], seed=cfg["run"]["seed"])
        log.info("pretrained backbone: held-out accuracy %.4f", acc)
        save_backbone(backbone, bspec, bb_path, extra={"heldout_accuracy": acc})
        bspec.checkpoint = str(bb_path)
    return ds, backbone, bspec


def cmd_ablate(args, cfg):
    from .jigsaw import assign_groups
    from .trainer import VARIANTS, run_ablation
    out = Path(args.out)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    if cfg["paths"]["data"]:
        backbone, bspec = _load_backbone(cfg["paths"]["backbone"], cfg)
        groups = _grouped_training_set(cfg["paths"]["data"], cfg["paths"]["labels"], cfg)
        eval_groups = load_groups(cfg["paths"]["eval"], need_masks=True)
    else:
        ds, backbone, bspec = _synthetic_inputs(cfg)
        groups = assign_groups(ds.train, ds.labels, cfg["train"]["min_group_size"])
        eval_groups = ds.eval_groups
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out, "ablate")
    rows = run_ablation(train_config(cfg), groups, eval_groups, backbone, variants,
                        out_dir=out if args.save_checkpoints else None, backbone_spec=bspec)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return {"rows": len(rows), "csv": str(out / "ablation.csv")}


def cmd_plot(args, cfg):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    src = _require_dir(args.report, "report directory")
    curves_path = src / "curves.npz"
    if not curves_path.exists():
        raise IngestionError(f"no curves.npz in {src}")
    curves = np.load(curves_path)
    out.mkdir(parents=True, exist_ok=True)
    label = args.label or src.name
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.plot(curves["recall"], curves["precision"], label=label)
    ax.set(xlabel="Recall", ylabel="Precision", xlim=(0, 1), ylim=(0, 1.02), title="PR curve")
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(out / "pr_curve.png", dpi=120)
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.plot(curves["thresholds"], curves["fmeasure"], label=label)
    ax.set(xlabel="Threshold", ylabel="F-measure", xlim=(0, 255), ylim=(0, 1.02), title="F-measure vs threshold")
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(out / "f_threshold.png", dpi=120)
    plt.close(fig)
    write_resolved(cfg, out, "plot")
    return {"plots": [str(out / "pr_curve.png"), str(out / "f_threshold.png")]}


def _heat(t):
    t = t.detach().double()
    lo, hi = float(t.min()), float(t.max())
    return ((t - lo) / (hi - lo)).numpy() if hi > lo else np.zeros(tuple(t.shape))


def cmd_dump(args, cfg):
    from .decoder import upsample
    from .trainer import predict_group
    out = Path(args.out)
    model = _load_model(cfg)
    groups = load_groups(cfg["paths"]["data"])
    n = 0
    for name, group in groups.items():
        maps, extras = predict_group(model, group.images, model.input_size, return_all=True)
        for sid, levels, info in zip(group.ids, maps, extras):
            size = (model.input_size, model.input_size)
            f5 = info["blocks"][-1].mean(dim=1, keepdim=True)
            f5i = info["f5_induced"].mean(dim=1, keepdim=True)
            write_gray(out / name / sid / "f5_mean.png", _heat(upsample(f5, size)[0, 0]))
            write_gray(out / name / sid / "f5_induced_mean.png", _heat(upsample(f5i, size)[0, 0]))
            for level, s in zip((5, 4, 3, 2, 1), levels):
                write_gray(out / name / sid / f"S{level}.png", upsample(s, size)[0, 0].clamp(0, 1).numpy())
            n += 1
    write_resolved(cfg, out, "dump")
    return {"images": n, "out": str(out)}


# -- entry point ---------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth, "jigsaw": cmd_jigsaw, "pretrain-backbone": cmd_pretrain_backbone,
    "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "ablate": cmd_ablate,
    "plot": cmd_plot, "dump": cmd_dump,
}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="root seed for every random stream")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    model = _Parser(add_help=False)
    model.add_argument("--epochs", type=int)
    model.add_argument("--backbone", help="backbone checkpoint")
    model.add_argument("--no-gim", action="store_true", help="disable gradient inducing")
    model.add_argument("--no-arm", action="store_true", help="disable attention retaining")
    model.add_argument("--no-jt", action="store_true", help="disable jigsaw training")

    parser = _Parser(prog="cosal", description="Group-wise co-saliency detection toolkit.")
    parser.add_argument("--version", action="version", version=f"cosal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark")
    p.add_argument("--preset", choices=("desk", "tiny"))

    p = sub.add_parser("jigsaw", parents=[common], help="expand a grouped dataset with jigsaws")
    p.add_argument("--data", help="dataset root: <root>/<group>/{img,gt}/<id>.png")
    p.add_argument("--labels", help="label table: <sample_id><TAB><label> per line")
    p.add_argument("--manifest-only", action="store_true", help="write manifest.jsonl but no images")

    p = sub.add_parser("pretrain-backbone", parents=[common], help="pretrain the toy backbone as a classifier")
    p.add_argument("--data", help="synthetic root (or its cls/ directory)")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train", parents=[common, model], help="train the decoder")
    p.add_argument("--data", help="training root: <root>/<group>/{img,gt}/<id>.png")
    p.add_argument("--labels", help="label table overriding directory groups")

    for name, helptext in (("infer", "write saliency maps for image groups"),
                           ("dump", "write GIM heat-maps and per-level maps")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", help="trained checkpoint")
        p.add_argument("--backbone", help="backbone checkpoint (default: the one recorded in the checkpoint)")
        p.add_argument("--data", help="group root: <root>/<group>/[img/]<id>.png")

    p = sub.add_parser("eval", parents=[common], help="score saliency maps against ground truth")
    p.add_argument("--pred", required=True, help="prediction root: <root>/<group>/<id>.png")
    p.add_argument("--gt", help="ground-truth root")
    p.add_argument("--f-avg", choices=("adaptive", "mean"))

    p = sub.add_parser("ablate", parents=[common, model], help="train and score the variant grid")
    p.add_argument("--data", help="training root (default: the synthetic benchmark)")
    p.add_argument("--labels")
    p.add_argument("--eval", help="evaluation root with gt/ masks")
    p.add_argument("--preset", choices=("desk", "tiny"), help="synthetic preset when --data is absent")
    p.add_argument("--variants", help="comma-separated subset of A,B,C,D,E,F,G,GICD")
    p.add_argument("--save-checkpoints", action="store_true")

    p = sub.add_parser("plot", parents=[common], help="PR and F-vs-threshold curves from an eval report")
    p.add_argument("--report", required=True, help="directory written by eval")
    p.add_argument("--label")
    return parser


def resolve(args):
    """Config file, then command-line overrides."""
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    paths = cfg["paths"]
    for key in ("data", "labels", "eval", "backbone", "checkpoint"):
        value = getattr(args, key, None)
        if value:
            paths[key] = str(value)
    paths["out"] = str(args.out)
    if getattr(args, "preset", None):
        cfg["synth"]["preset"] = args.preset
    if getattr(args, "f_avg", None):
        cfg["eval"]["f_avg"] = args.f_avg
    if getattr(args, "epochs", None) is not None:
        section, key = ("backbone", "pretrain_epochs") if args.command == "pretrain-backbone" else ("train", "epochs")
        cfg[section][key] = args.epochs
    for flag, key in (("no_gim", "use_gim"), ("no_arm", "use_arm"), ("no_jt", "use_jt")):
        if getattr(args, flag, False):
            cfg["train"][key] = False
    cfg["run"]["cache_dir"] = str(cache_dir(cfg))
    # record the effective synthetic spec so the resolved file is self-describing
    spec = synth_spec(cfg)
    for key in cfg["synth"]:
        if key != "preset":
            value = getattr(spec, key)
            cfg["synth"][key] = [list(c) for c in value] if key == "categories" else value
    return cfg


def _error_record(exc, command):
    status = getattr(exc, "exit_status", 3 if isinstance(exc, OSError) else 1)
    return status, {"error": type(exc).__name__, "message": str(exc), "exit_status": status, "command": command}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else [os.fspath(a) if isinstance(a, os.PathLike) else a for a in argv]
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        cfg = resolve(args)
        result = COMMANDS[command](args, cfg)
    except CosalError as exc:
        status, record = _error_record(exc, command)
        print(json.dumps(record), file=sys.stderr)
        return status
    except (OSError, KeyError, ValueError) as exc:
        status, record = _error_record(exc, command)
        print(json.dumps(record), file=sys.stderr)
        return status
    print(json.dumps({"command": command, "status": "ok", **(result or {})}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
