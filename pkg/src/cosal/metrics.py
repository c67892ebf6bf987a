"""Co-saliency evaluation: PR curves, F-measures, S-measure and mean E-measure.

Saliency maps are quantized to 8-bit levels ``v = round(255 * s)`` and
binarized as ``v >= t`` for the 256 thresholds ``t = 0..255``.  Index ``t``
of every curve array corresponds to threshold ``t``.  Scalars are averaged
image -> group -> dataset (macro over groups).
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import find_image, list_images, read_gray, read_mask, resize_map
from .errors import IngestionError, PreconditionError, ShapeError

log = logging.getLogger(__name__)

BETA2 = 0.3
N_THRESHOLDS = 256
SCALARS = ("F_avg", "F_max", "S_alpha", "E_xi")


class DegenerateMask(PreconditionError):
    """Ground truth without foreground: recall and F are undefined."""


def quantize(s):
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ShapeError("saliency map has non-finite values")
    return np.clip(np.rint(np.clip(s, 0.0, 1.0) * 255.0), 0, 255).astype(np.int64)


def _check_pair(s, g):
    s = np.asarray(s)
    g = np.asarray(g)
    if s.shape != g.shape:
        raise ShapeError(f"prediction {s.shape} and ground truth {g.shape} differ in size")
    return s, g >= 0.5


def _counts(v, gb):
    """Per-threshold (TP, predicted positives) for ``v >= t``."""
    fg = np.bincount(v[gb], minlength=N_THRESHOLDS)
    allv = np.bincount(v.ravel(), minlength=N_THRESHOLDS)
    tp = np.cumsum(fg[::-1])[::-1]
    npred = np.cumsum(allv[::-1])[::-1]
    return tp.astype(np.float64), npred.astype(np.float64)


def pr_curve(s, g):
    """Precision and recall at each of the 256 thresholds.

    Precision of an empty binarization is 1.  Raises ``DegenerateMask`` when
    ``g`` has no foreground.
    """
    s, gb = _check_pair(s, g)
    n_fg = gb.sum()
    if n_fg == 0:
        raise DegenerateMask("ground truth has no foreground; recall undefined")
    tp, npred = _counts(quantize(s), gb)
    precision = np.where(npred > 0, tp / np.maximum(npred, 1), 1.0)
    recall = tp / n_fg
    return precision, recall


def f_beta(precision, recall, beta2=BETA2):
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    den = beta2 * p + r
    out = np.where(den > 0, (1 + beta2) * p * r / np.where(den > 0, den, 1.0), 0.0)
    return out if out.ndim else float(out)


def adaptive_threshold(s):
    """Twice the mean 8-bit saliency, capped at 255."""
    return min(2.0 * quantize(s).mean(), 255.0)


def f_measures(s, g, f_avg="adaptive"):
    """``(F_avg, F_max, F curve)``.

    ``f_avg="adaptive"`` binarizes at ``adaptive_threshold``; ``"mean"``
    averages the F curve over all thresholds instead.
    """
    precision, recall = pr_curve(s, g)
    curve = f_beta(precision, recall)
    f_max = float(curve.max())
    if f_avg == "mean":
        f_mean = float(curve.mean())
    elif f_avg == "adaptive":
        s, gb = _check_pair(s, g)
        binary = quantize(s) >= adaptive_threshold(s)
        tp = float(np.logical_and(binary, gb).sum())
        p = tp / binary.sum() if binary.sum() else 1.0
        f_mean = float(f_beta(p, tp / gb.sum()))
    else:
        raise ValueError(f"unknown F_avg mode {f_avg!r}")
    return f_mean, f_max, curve


# -- S-measure -----------------------------------------------------------------

def _object_score(x):
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    # the denominator is at least 1, so no epsilon is needed
    return 2.0 * mu / (mu * mu + 1.0 + sigma)


def _s_object(s, g):
    fg = s * g
    bg = (1.0 - s) * (1.0 - g)
    u = g.mean()
    return u * _object_score(fg[g == 1]) + (1.0 - u) * _object_score(bg[g == 0])


def _centroid(g):
    h, w = g.shape
    total = g.sum()
    if total == 0:
        return int(np.round(w / 2)) + 1, int(np.round(h / 2)) + 1
    x = np.round((g.sum(axis=0) * np.arange(w)).sum() / total)
    y = np.round((g.sum(axis=1) * np.arange(h)).sum() / total)
    return int(x) + 1, int(y) + 1


def _ssim(s, g):
    n = s.size
    if n == 0:
        return 0.0
    x, y = s.mean(), g.mean()
    d = max(n - 1, 1)
    sx = ((s - x) ** 2).sum() / d
    sy = ((g - y) ** 2).sum() / d
    sxy = ((s - x) * (g - y)).sum() / d
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        # alpha != 0 forces both variances, hence beta, to be positive
        return alpha / beta
    return 1.0 if beta == 0 else 0.0


def _s_region(s, g):
    h, w = g.shape
    x, y = _centroid(g)
    area = h * w
    w1 = x * y / area
    w2 = (w - x) * y / area
    w3 = x * (h - y) / area
    w4 = 1.0 - w1 - w2 - w3
    parts = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
             (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))]
    return sum(wt * _ssim(s[r, c], g[r, c]) for wt, (r, c) in zip((w1, w2, w3, w4), parts))


def s_measure(s, g, alpha=0.5):
    """Structure measure ``alpha * S_object + (1 - alpha) * S_region``, floored at 0.

    All-background ground truth scores ``1 - mean(s)``; all-foreground scores ``mean(s)``.
    """
    s, gb = _check_pair(s, g)
    s = np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)
    g = gb.astype(np.float64)
    mu = g.mean()
    if mu == 0:
        return float(1.0 - s.mean())
    if mu == 1:
        return float(s.mean())
    score = alpha * _s_object(s, g) + (1.0 - alpha) * _s_region(s, g)
    return float(min(max(score, 0.0), 1.0))


# -- E-measure -----------------------------------------------------------------

def e_measure_curve(s, g):
    """Enhanced-alignment score at each of the 256 thresholds."""
    s, gb = _check_pair(s, g)
    n = gb.size
    n_fg = gb.sum()
    tp, npred = _counts(quantize(s), gb)
    if n_fg == 0:
        return (n - npred) / n
    if n_fg == n:
        return npred / n
    fp = npred - tp
    fn = n_fg - tp
    tn = n - n_fg - fp
    mu_g = n_fg / n
    mu_b = npred / n
    total = np.zeros(N_THRESHOLDS)
    for count, b, gv in ((tp, 1.0, 1.0), (fp, 1.0, 0.0), (fn, 0.0, 1.0), (tn, 0.0, 0.0)):
        fm = b - mu_b
        gc = gv - mu_g
        # 0 < mu_g < 1 here, so gc != 0 and the denominator is positive
        align = 2.0 * gc * fm / (gc * gc + fm * fm)
        total += count * (align + 1.0) ** 2 / 4.0
    return total / n


def e_measure_mean(s, g):
    return float(e_measure_curve(s, g).mean())


# -- aggregation ---------------------------------------------------------------

@dataclass
class ImageMetrics:
    image_id: str
    S_alpha: float
    E_xi: float
    F_avg: float = None
    F_max: float = None
    precision: np.ndarray = None
    recall: np.ndarray = None
    fmeasure: np.ndarray = None
    flags: list = field(default_factory=list)


def image_metrics(s, g, image_id="", f_avg="adaptive", alpha=0.5):
    s, gb = _check_pair(s, g)
    flags = []
    if gb.all() or not gb.any():
        flags.append("degenerate-gt")
    m = ImageMetrics(image_id, S_alpha=s_measure(s, gb, alpha), E_xi=e_measure_mean(s, gb), flags=flags)
    if gb.any():
        m.precision, m.recall = pr_curve(s, gb)
        m.F_avg, m.F_max, m.fmeasure = f_measures(s, gb, f_avg)
    return m


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else float("nan")


def _mean_curve(curves):
    curves = [c for c in curves if c is not None]
    return np.mean(curves, axis=0) if curves else np.full(N_THRESHOLDS, np.nan)


@dataclass
class MetricReport:
    groups: dict
    dataset: dict
    precision: np.ndarray
    recall: np.ndarray
    fmeasure: np.ndarray
    flags: dict = field(default_factory=dict)
    missing: list = field(default_factory=list)

    def to_dict(self):
        return {
            "dataset": self.dataset,
            "groups": self.groups,
            "flags": self.flags,
            "missing": self.missing,
        }

    def write(self, out_dir):
        """``report.json``, ``groups.csv`` and ``curves.npz`` (the plot command's input)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with open(out / "groups.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["group", "n_images", *SCALARS])
            for name, row in self.groups.items():
                writer.writerow([name, row["n_images"], *(f"{row[k]:.6f}" for k in SCALARS)])
        np.savez(out / "curves.npz", thresholds=np.arange(N_THRESHOLDS), precision=self.precision,
                 recall=self.recall, fmeasure=self.fmeasure,
                 group_names=np.array(list(self.groups), dtype=str))
        return out


def aggregate(per_group, missing=()):
    """Macro aggregation of ``{group: [ImageMetrics, ...]}``."""
    groups, flags = {}, {}
    curves = {"precision": [], "recall": [], "fmeasure": []}
    for name in sorted(per_group):
        items = per_group[name]
        if not items:
            continue
        groups[name] = {"n_images": len(items), **{k: _mean(getattr(m, k) for m in items) for k in SCALARS}}
        for key in curves:
            curves[key].append(_mean_curve([getattr(m, key) for m in items]))
        for m in items:
            if m.flags:
                flags[f"{name}/{m.image_id}"] = list(m.flags)
    dataset = {k: _mean(g[k] for g in groups.values() if not np.isnan(g[k])) for k in SCALARS}
    dataset["n_groups"] = len(groups)
    dataset["n_images"] = sum(g["n_images"] for g in groups.values())
    return MetricReport(groups=groups, dataset=dataset,
                        precision=_mean_curve(curves["precision"]),
                        recall=_mean_curve(curves["recall"]),
                        fmeasure=_mean_curve(curves["fmeasure"]),
                        flags=flags, missing=list(missing))


def evaluate_maps(maps_by_group, f_avg="adaptive"):
    """In-memory evaluation of ``{group: [(saliency, gt), ...]}``."""
    per_group = {}
    for name, pairs in maps_by_group.items():
        per_group[name] = [image_metrics(s, g, str(i), f_avg) for i, (s, g) in enumerate(pairs)]
    return aggregate(per_group)


def _gt_dir(gt_root, group):
    d = Path(gt_root) / group
    return d / "gt" if (d / "gt").is_dir() else d


def evaluate_dataset(pred_root, gt_root, f_avg="adaptive"):
    """Evaluate ``<pred_root>/<group>/<id>.png`` against ground truth.

    Ground truth may sit at ``<gt_root>/<group>/<id>.png`` or
    ``<gt_root>/<group>/gt/<id>.png``.  Missing predictions are listed in the
    report and excluded.
    """
    pred_root, gt_root = Path(pred_root), Path(gt_root)
    if not gt_root.is_dir():
        raise IngestionError(f"ground-truth root not found: {gt_root}")
    if not pred_root.is_dir():
        raise IngestionError(f"prediction root not found: {pred_root}")
    per_group, missing = {}, []
    for group_dir in sorted(p for p in gt_root.iterdir() if p.is_dir()):
        group = group_dir.name
        items = []
        for gt_path in list_images(_gt_dir(gt_root, group)):
            pred_path = find_image(pred_root / group, gt_path.stem)
            if pred_path is None:
                missing.append(f"{group}/{gt_path.stem}")
                continue
            g = read_mask(gt_path)
            s = read_gray(pred_path).astype(np.float64) / 255.0
            if s.shape != g.shape:
                s = resize_map(s, g.shape)
            items.append(image_metrics(s, g, gt_path.stem, f_avg))
        if items:
            per_group[group] = items
    if missing:
        log.warning("%d predictions missing", len(missing))
    return aggregate(per_group, missing)
