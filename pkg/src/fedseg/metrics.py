"""Voxel-level segmentation evaluation and report serialization.

Counts-based metrics (Dice, IoU, sensitivity, specificity) follow the
absent-class convention: a class missing from both prediction and ground
truth scores 1.0. ROC/AUC sweeps the distinct softmax probabilities and
integrates with the trapezoidal rule, which equals the tie-aware pairwise
ranking probability exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .model import CLASS_NAMES, ModelConfig, forward
from .params import ParameterStore
from .tensor import Tensor

SUBREGIONS = {"ET": (3,), "TC": (2, 3), "WT": (1, 2, 3)}


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.tn + other.tn,
        )


def _check_shapes(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Per-voxel argmax over the class axis; ties go to the lowest class."""
    logits = np.asarray(logits)
    if logits.ndim == 4:
        return np.argmax(logits, axis=0)
    if logits.ndim == 5:
        return np.argmax(logits, axis=1)
    raise ValueError(f"expected [C,...] or [N,C,...] logits, got {logits.shape}")


def binary_counts(pred_mask: np.ndarray, gt_mask: np.ndarray) -> ConfusionCounts:
    tp = int(np.count_nonzero(pred_mask & gt_mask))
    fp = int(np.count_nonzero(pred_mask & ~gt_mask))
    fn = int(np.count_nonzero(~pred_mask & gt_mask))
    tn = int(np.count_nonzero(~pred_mask & ~gt_mask))
    return ConfusionCounts(tp, fp, fn, tn)


def confusion_counts(pred, gt, num_classes: int = 4) -> list[ConfusionCounts]:
    pred, gt = _check_shapes(pred, gt)
    return [binary_counts(pred == c, gt == c) for c in range(num_classes)]


def dice_from_counts(c: ConfusionCounts) -> float:
    if c.tp + c.fp + c.fn == 0:
        return 1.0  # class absent from both volumes
    return 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn)


def iou_from_counts(c: ConfusionCounts) -> float:
    if c.tp + c.fp + c.fn == 0:
        return 1.0
    return c.tp / (c.tp + c.fp + c.fn)


def dice_score(pred, gt, c: int) -> float:
    pred, gt = _check_shapes(pred, gt)
    return dice_from_counts(binary_counts(pred == c, gt == c))


def iou_score(pred, gt, c: int) -> float:
    pred, gt = _check_shapes(pred, gt)
    return iou_from_counts(binary_counts(pred == c, gt == c))


def sensitivity_specificity(pred, gt) -> tuple[Optional[float], Optional[float]]:
    """Binarized tumor (classes 1-3) vs background; absent denominators
    yield None rather than 0."""
    pred, gt = _check_shapes(pred, gt)
    c = binary_counts(pred > 0, gt > 0)
    sens = c.tp / (c.tp + c.fn) if c.tp + c.fn > 0 else None
    spec = c.tn / (c.tn + c.fp) if c.tn + c.fp > 0 else None
    return sens, spec


def micro_sensitivity_specificity(
    counts: Sequence[ConfusionCounts],
) -> tuple[float, float]:
    """Micro average: pool the per-class confusion counts, then divide."""
    tp = sum(c.tp for c in counts)
    fn = sum(c.fn for c in counts)
    tn = sum(c.tn for c in counts)
    fp = sum(c.fp for c in counts)
    return tp / (tp + fn), tn / (tn + fp)


def roc_auc(probabilities, gt_mask) -> tuple[list[tuple[float, float]], Optional[float]]:
    """Threshold sweep over distinct probabilities, one-vs-rest.

    Returns ROC points from (0,0) to (1,1) and the trapezoidal AUC, which is
    identical to P(score_pos > score_neg) + 0.5 P(tie). Single-class ground
    truth gives (points=[], auc=None).
    """
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    y = np.asarray(gt_mask, dtype=bool).ravel()
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: probs {p.shape} vs gt {y.shape}")
    npos = int(y.sum())
    nneg = y.size - npos
    if npos == 0 or nneg == 0:
        return [], None

    order = np.argsort(-p, kind="stable")
    ps, ys = p[order], y[order]
    # cumulative counts at each distinct threshold boundary
    boundary = np.flatnonzero(np.diff(ps)) if ps.size > 1 else np.array([], dtype=int)
    idx = np.concatenate([boundary, [ps.size - 1]])
    tp_cum = np.cumsum(ys)[idx]
    fp_cum = (idx + 1) - tp_cum
    tp = np.concatenate([[0], tp_cum])
    fp = np.concatenate([[0], fp_cum])

    points = [(f / nneg, t / npos) for f, t in zip(fp, tp)]
    # integer trapezoid numerator: sum dFP * (TP_i + TP_{i+1})
    num = int(np.sum(np.diff(fp) * (tp[:-1] + tp[1:])))
    return points, num / (2.0 * npos * nneg)


def composite_subregions(pred, gt) -> dict[str, dict[str, float]]:
    """Binary Dice/IoU on the standard nested unions of tumor classes."""
    pred, gt = _check_shapes(pred, gt)
    out = {}
    for name, classes in SUBREGIONS.items():
        pm = np.isin(pred, classes)
        gm = np.isin(gt, classes)
        c = binary_counts(pm, gm)
        out[name] = {"dice": dice_from_counts(c), "iou": iou_from_counts(c)}
    return out


@dataclass
class MetricsReport:
    per_class_dice: list
    per_class_iou: list
    per_class_sensitivity: list
    per_class_specificity: list
    per_class_auc: list
    composite: dict
    tumor_sensitivity: Optional[float]
    tumor_specificity: Optional[float]
    micro_sensitivity: float
    micro_specificity: float
    mean_foreground_dice: float
    mean_foreground_iou: float
    voxels: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def _class_sens_spec(c: ConfusionCounts):
    sens = c.tp / (c.tp + c.fn) if c.tp + c.fn > 0 else None
    spec = c.tn / (c.tn + c.fp) if c.tn + c.fp > 0 else None
    return sens, spec


def report_from_predictions(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    prob_stacks: Optional[Sequence[np.ndarray]] = None,
    num_classes: int = 4,
) -> MetricsReport:
    """Aggregate voxel counts over a set of volumes into one report.

    ``prob_stacks`` are per-volume [C,...] softmax probabilities; omit them
    to skip AUC (reported as None).
    """
    totals = [ConfusionCounts(0, 0, 0, 0) for _ in range(num_classes)]
    tumor = ConfusionCounts(0, 0, 0, 0)
    for pred, gt in zip(preds, gts):
        pred, gt = _check_shapes(pred, gt)
        for c, cc in enumerate(confusion_counts(pred, gt, num_classes)):
            totals[c] = totals[c] + cc
        tumor = tumor + binary_counts(pred > 0, gt > 0)

    aucs: list = [None] * num_classes
    if prob_stacks is not None:
        for c in range(num_classes):
            probs = np.concatenate([np.asarray(p)[c].ravel() for p in prob_stacks])
            mask = np.concatenate([np.asarray(g).ravel() == c for g in gts])
            _, aucs[c] = roc_auc(probs, mask)

    dice = [dice_from_counts(c) for c in totals]
    iou = [iou_from_counts(c) for c in totals]
    sens_spec = [_class_sens_spec(c) for c in totals]
    micro_sens, micro_spec = micro_sensitivity_specificity(totals)
    t_sens = tumor.tp / (tumor.tp + tumor.fn) if tumor.tp + tumor.fn > 0 else None
    t_spec = tumor.tn / (tumor.tn + tumor.fp) if tumor.tn + tumor.fp > 0 else None

    pred_all = [p for p in preds]
    gt_all = [g for g in gts]
    comp_totals = {name: ConfusionCounts(0, 0, 0, 0) for name in SUBREGIONS}
    for pred, gt in zip(pred_all, gt_all):
        for name, classes in SUBREGIONS.items():
            comp_totals[name] = comp_totals[name] + binary_counts(
                np.isin(pred, classes), np.isin(gt, classes)
            )
    composite = {
        name: {"dice": dice_from_counts(c), "iou": iou_from_counts(c)}
        for name, c in comp_totals.items()
    }

    return MetricsReport(
        per_class_dice=dice,
        per_class_iou=iou,
        per_class_sensitivity=[s for s, _ in sens_spec],
        per_class_specificity=[s for _, s in sens_spec],
        per_class_auc=aucs,
        composite=composite,
        tumor_sensitivity=t_sens,
        tumor_specificity=t_spec,
        micro_sensitivity=micro_sens,
        micro_specificity=micro_spec,
        mean_foreground_dice=float(np.mean(dice[1:])),
        mean_foreground_iou=float(np.mean(iou[1:])),
        voxels=totals[0].total,
    )


def _softmax_np(logits: np.ndarray, axis: int) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def evaluate_model(
    store: ParameterStore,
    volumes,
    config: ModelConfig,
    batch_size: int = 4,
    with_auc: bool = True,
) -> MetricsReport:
    """Eval-mode inference over a list of volumes, then one pooled report."""
    preds, gts, probs = [], [], [] if with_auc else None
    for i in range(0, len(volumes), batch_size):
        batch = volumes[i : i + batch_size]
        x = Tensor(np.stack([v.image for v in batch]))
        logits = forward(store, x, config, mode="eval").data
        labels = predict_labels(logits)
        for j, v in enumerate(batch):
            preds.append(labels[j])
            gts.append(v.label)
            if with_auc:
                probs.append(_softmax_np(logits[j], axis=0))
    return report_from_predictions(preds, gts, prob_stacks=probs)


# ---------------------------------------------------------------------------
# comparison tables and serialization


@dataclass
class ComparisonRow:
    client: str
    global_dice: float
    dt_dice: float
    delta_dice: float
    global_iou: float
    dt_iou: float
    delta_iou: float


def compare_global_vs_dt(
    global_reports: dict, dt_reports: dict
) -> tuple[list[ComparisonRow], dict]:
    """Per-client mean-foreground Dice/IoU for global vs digital twin.

    Returns rows sorted by client key plus the mean deltas.
    """
    if set(global_reports) != set(dt_reports):
        raise ValueError(
            f"client sets differ: {sorted(global_reports)} vs {sorted(dt_reports)}"
        )
    rows = []
    for key in sorted(global_reports):
        g, d = global_reports[key], dt_reports[key]
        rows.append(
            ComparisonRow(
                client=str(key),
                global_dice=g.mean_foreground_dice,
                dt_dice=d.mean_foreground_dice,
                delta_dice=d.mean_foreground_dice - g.mean_foreground_dice,
                global_iou=g.mean_foreground_iou,
                dt_iou=d.mean_foreground_iou,
                delta_iou=d.mean_foreground_iou - g.mean_foreground_iou,
            )
        )
    means = {
        "mean_delta_dice": float(np.mean([r.delta_dice for r in rows])),
        "mean_delta_iou": float(np.mean([r.delta_iou for r in rows])),
    }
    return rows, means


def write_comparison_csv(rows, means, path, config_hash: str = ""):
    """Comparison table as CSV; dice/iou columns are mean-foreground values."""
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(f)
        writer.writerow(
            [
                "client",
                "global_mean_fg_dice",
                "dt_mean_fg_dice",
                "delta_dice",
                "global_mean_fg_iou",
                "dt_mean_fg_iou",
                "delta_iou",
            ]
        )
        for r in rows:
            writer.writerow(
                [
                    r.client,
                    repr(r.global_dice),
                    repr(r.dt_dice),
                    repr(r.delta_dice),
                    repr(r.global_iou),
                    repr(r.dt_iou),
                    repr(r.delta_iou),
                ]
            )
        writer.writerow(
            ["mean", "", "", repr(means["mean_delta_dice"]), "", "",
             repr(means["mean_delta_iou"])]
        )


def write_per_class_long_csv(reports: dict, path, config_hash: str = ""):
    """Plot-ready long format: one row per (client, class, metric)."""
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(f)
        writer.writerow(["client", "class", "metric", "value"])
        for key in sorted(reports):
            rep = reports[key]
            for c, cname in enumerate(CLASS_NAMES):
                writer.writerow([key, cname, "dice", repr(rep.per_class_dice[c])])
                writer.writerow([key, cname, "iou", repr(rep.per_class_iou[c])])
                auc = rep.per_class_auc[c]
                writer.writerow([key, cname, "auc", "" if auc is None else repr(auc)])


def write_report_json(report: MetricsReport, path, config_hash: str = ""):
    payload = {"config_hash": config_hash, "report": report.to_dict()}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_report_json(path) -> MetricsReport:
    with open(path) as f:
        return MetricsReport.from_dict(json.load(f)["report"])
