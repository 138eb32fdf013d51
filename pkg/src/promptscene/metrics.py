"""Task evaluation: IoU, grounding accuracy, multi-object F1, instance AP, exact match.

All metrics are pure functions of predictions and ground truth and land in
[0, 1]. Zero-target conventions: IoU of two empty sets is 1, and a
zero-target sample with no predictions scores a perfect F1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .assignment import hungarian


def _as_set(x):
    return x if isinstance(x, (set, frozenset)) else set(int(v) for v in np.asarray(x).reshape(-1))


def mask_iou(pred_points, gt_points):
    """|intersection| / |union|; defined as 1.0 when both sets are empty."""
    p, g = _as_set(pred_points), _as_set(gt_points)
    if not p and not g:
        return 1.0
    return len(p & g) / len(p | g)


def top1_index(scores):
    """Argmax with ties resolved to the lowest index."""
    return int(np.argmax(np.asarray(scores)))


def grounding_accuracy(samples, tau):
    """Fraction of (top-1 mask, gt mask) pairs with IoU >= tau."""
    if not samples:
        return 0.0
    hits = sum(1 for pred, gt in samples if mask_iou(pred, gt) >= tau)
    return hits / len(samples)


def multi_f1(samples, tau, score_threshold=0.5):
    """Mean per-sample F1 with optimal IoU matching between predictions and GTs.

    Each sample is {"masks": [...], "scores": [...], "gts": [...]}; predictions
    are the masks whose score clears the threshold. A zero-target sample scores
    1.0 with no predictions and 0.0 otherwise.
    """
    if not samples:
        return 0.0
    out = []
    for s in samples:
        preds = [m for m, sc in zip(s["masks"], s["scores"]) if sc >= score_threshold]
        gts = list(s["gts"])
        if not gts:
            out.append(1.0 if not preds else 0.0)
            continue
        if not preds:
            out.append(0.0)
            continue
        iou = np.array([[mask_iou(p, g) for g in gts] for p in preds])
        pairs = hungarian(-iou)
        tp = sum(1 for pi, gi in pairs if iou[pi, gi] >= tau)
        fp = len(preds) - tp
        fn = len(gts) - tp
        out.append(2.0 * tp / (2.0 * tp + fp + fn))
    return float(np.mean(out))


AP_OVERLAPS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))


def _ap_at_threshold(preds, gts, tau):
    """101-point interpolated AP at one IoU threshold.

    preds: list of (group, point_set, confidence); gts: list of (group,
    point_set). Predictions match greedily in descending confidence against
    unused GTs of the same group.
    """
    n_gt = len(gts)
    if n_gt == 0:
        return 0.0
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][2], i))
    gt_by_group = {}
    for gi, (grp, pts) in enumerate(gts):
        gt_by_group.setdefault(grp, []).append((gi, pts))
    used = set()
    tp_flags = []
    for i in order:
        grp, pts, _conf = preds[i]
        best_iou, best_gi = 0.0, None
        for gi, gpts in gt_by_group.get(grp, []):
            if gi in used:
                continue
            iou = mask_iou(pts, gpts)
            if iou > best_iou:
                best_iou, best_gi = iou, gi
        if best_gi is not None and best_iou >= tau:
            used.add(best_gi)
            tp_flags.append(True)
        else:
            tp_flags.append(False)
    tp = np.cumsum(tp_flags, dtype=np.float64) if tp_flags else np.zeros(0)
    fp = np.cumsum([not t for t in tp_flags], dtype=np.float64) if tp_flags else np.zeros(0)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1.0)
    # 101-point interpolation: max precision at recall >= r
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / 101.0


def instance_ap(preds, gts, overlaps=AP_OVERLAPS):
    """(AP, AP50, AP25): AP averaged over the 0.50:0.05:0.95 overlap range."""
    per = [_ap_at_threshold(preds, gts, t) for t in overlaps]
    ap = float(np.mean(per)) if per else 0.0
    return ap, _ap_at_threshold(preds, gts, 0.50), _ap_at_threshold(preds, gts, 0.25)


def truncate_at(tokens, eos_id):
    out = []
    for t in tokens:
        if t == eos_id:
            break
        out.append(int(t))
    return out


def exact_match(pred_tokens, gt_tokens, eos_id):
    """1 if the sequences agree after truncating each at the first [EOS]."""
    return 1 if truncate_at(pred_tokens, eos_id) == truncate_at(gt_tokens, eos_id) else 0


def em_at_1(pairs, eos_id):
    if not pairs:
        return 0.0
    return sum(exact_match(p, g, eos_id) for p, g in pairs) / len(pairs)


# ---------------------------------------------------------------------------
# report container


@dataclass
class MetricsReport:
    metrics: dict
    counts: dict
    rep_subset: tuple
    seed: int
    config_echo: dict = field(default_factory=dict)

    def __post_init__(self):
        for group in self.metrics.values():
            for key, value in group.items():
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"metric {key} out of [0, 1]: {value}")

    def to_dict(self):
        return {
            "metrics": self.metrics,
            "counts": self.counts,
            "rep_subset": list(self.rep_subset),
            "seed": self.seed,
            "config_echo": self.config_echo,
        }

    def canonical(self):
        """Stable serialized form (sorted keys) for diff-based regression."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.canonical() + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.loads(fh.read())
        return cls(metrics=d["metrics"], counts=d["counts"],
                   rep_subset=tuple(d["rep_subset"]), seed=d["seed"],
                   config_echo=d.get("config_echo", {}))
