"""One-pass evaluation metrics: precision (PR), normalized precision (NPR), success (SR).

Conventions used throughout:

* every curve is sampled on 51 uniform thresholds;
* precision and normalized precision count a frame as successful when its error
  is ``<=`` the threshold, success counts a frame when IoU is strictly ``>``
  the threshold, so a perfect tracker scores SR = 50/51;
* NPR is the mean of the normalized precision curve over [0, 0.5], i.e. its
  AUC divided by the 0.5 range;
* dataset-level scores average per-sequence curves.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import ATTRIBUTE_NAMES, BoundingBox, DatasetManifest, SequenceRecord

PRECISION_THRESHOLD_PX = 5
PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
NORM_PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64) / 100.0
SUCCESS_THRESHOLDS = np.arange(51, dtype=np.float64) / 50.0


@dataclass
class MetricCurve:
    thresholds: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.thresholds.shape != self.values.shape:
            raise ValueError("thresholds and values must have equal length")
        if np.any(np.diff(self.thresholds) < 0):
            raise ValueError("thresholds must be monotone")

    def auc(self) -> float:
        """Mean of the curve values (area normalized by the threshold range)."""
        return float(np.mean(self.values))


@dataclass
class TrackResult:
    sequence_name: str
    boxes: np.ndarray
    tracker: str = "tracker"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)

    def __len__(self) -> int:
        return len(self.boxes)

    def to_json(self) -> dict:
        return {"tracker": self.tracker, "sequence": self.sequence_name,
                "boxes": [[float(v) for v in b] for b in self.boxes]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "TrackResult":
        return cls(obj["sequence"], np.asarray(obj["boxes"], dtype=np.float64), obj.get("tracker", "tracker"))


def save_results(path: str | Path, results: Iterable[TrackResult]) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in results], indent=1))


def load_results(path: str | Path) -> list[TrackResult]:
    obj = json.loads(Path(path).read_text())
    if isinstance(obj, dict):
        obj = [obj]
    return [TrackResult.from_json(o) for o in obj]


def _as_array(boxes) -> np.ndarray:
    if isinstance(boxes, BoundingBox):
        return np.array(boxes.as_list(), dtype=np.float64)
    if isinstance(boxes, SequenceRecord):
        return boxes.boxes
    if isinstance(boxes, TrackResult):
        return boxes.boxes
    return np.asarray(boxes, dtype=np.float64)


# -- per-frame errors -------------------------------------------------------------


def iou_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two (N, 4) arrays of x, y, w, h boxes."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    x1 = np.maximum(a[:, 0], b[:, 0])
    y1 = np.maximum(a[:, 1], b[:, 1])
    x2 = np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2])
    y2 = np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def iou(a, b) -> float:
    return float(iou_many(_as_array(a), _as_array(b))[0])


def _centers(b: np.ndarray) -> np.ndarray:
    return b[:, :2] + b[:, 2:] / 2.0


def center_error_many(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    d = _centers(np.atleast_2d(pred)) - _centers(np.atleast_2d(gt))
    return np.hypot(d[:, 0], d[:, 1])


def center_error(pred, gt) -> float:
    return float(center_error_many(_as_array(pred), _as_array(gt))[0])


def normalized_center_error_many(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred = np.atleast_2d(pred)
    gt = np.atleast_2d(gt)
    if np.any(gt[:, 2] <= 0) or np.any(gt[:, 3] <= 0):
        raise ValueError("ground-truth box with non-positive size")
    d = (_centers(pred) - _centers(gt)) / gt[:, 2:]
    return np.hypot(d[:, 0], d[:, 1])


def normalized_center_error(pred, gt) -> float:
    return float(normalized_center_error_many(_as_array(pred), _as_array(gt))[0])


# -- curves ---------------------------------------------------------------------------


def _aligned(result, gt_sequence) -> tuple[np.ndarray, np.ndarray]:
    pred = _as_array(result).reshape(-1, 4)
    gt = _as_array(gt_sequence).reshape(-1, 4)
    if len(pred) != len(gt):
        raise ValueError(f"result has {len(pred)} boxes but ground truth has {len(gt)}")
    if len(gt) == 0:
        raise ValueError("empty sequence")
    return pred, gt


def _le_curve(errors: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    counts = (errors[None, :] <= thresholds[:, None]).sum(axis=1)
    return counts / len(errors)


def precision_curve(result, gt_sequence) -> MetricCurve:
    pred, gt = _aligned(result, gt_sequence)
    return MetricCurve(PRECISION_THRESHOLDS, _le_curve(center_error_many(pred, gt), PRECISION_THRESHOLDS))


def precision_score(result, gt_sequence) -> tuple[float, MetricCurve]:
    curve = precision_curve(result, gt_sequence)
    return float(curve.values[PRECISION_THRESHOLD_PX]), curve


def normalized_precision_curve(result, gt_sequence) -> MetricCurve:
    pred, gt = _aligned(result, gt_sequence)
    errs = normalized_center_error_many(pred, gt)
    return MetricCurve(NORM_PRECISION_THRESHOLDS, _le_curve(errs, NORM_PRECISION_THRESHOLDS))


def normalized_precision_score(result, gt_sequence) -> tuple[float, MetricCurve]:
    curve = normalized_precision_curve(result, gt_sequence)
    return curve.auc(), curve


def success_curve(result, gt_sequence) -> MetricCurve:
    pred, gt = _aligned(result, gt_sequence)
    overlaps = iou_many(pred, gt)
    counts = (overlaps[None, :] > SUCCESS_THRESHOLDS[:, None]).sum(axis=1)
    return MetricCurve(SUCCESS_THRESHOLDS, counts / len(overlaps))


def success_score(result, gt_sequence) -> tuple[float, MetricCurve]:
    curve = success_curve(result, gt_sequence)
    return curve.auc(), curve


@dataclass
class SequenceScores:
    sequence: str
    precision: MetricCurve
    norm_precision: MetricCurve
    success: MetricCurve

    @property
    def pr(self) -> float:
        return float(self.precision.values[PRECISION_THRESHOLD_PX])

    @property
    def npr(self) -> float:
        return self.norm_precision.auc()

    @property
    def sr(self) -> float:
        return self.success.auc()


def evaluate_sequence(result, gt_sequence, name: str | None = None) -> SequenceScores:
    if name is None:
        name = getattr(gt_sequence, "name", None) or getattr(result, "sequence_name", "")
    return SequenceScores(name, precision_curve(result, gt_sequence),
                          normalized_precision_curve(result, gt_sequence), success_curve(result, gt_sequence))


@dataclass
class AggregateScores:
    """Per-sequence curves averaged over a set of sequences."""

    tracker: str
    sequences: list[str]
    precision: MetricCurve
    norm_precision: MetricCurve
    success: MetricCurve

    @property
    def pr(self) -> float:
        return float(self.precision.values[PRECISION_THRESHOLD_PX])

    @property
    def npr(self) -> float:
        return self.norm_precision.auc()

    @property
    def sr(self) -> float:
        return self.success.auc()


def aggregate(tracker: str, per_sequence: Sequence[SequenceScores]) -> AggregateScores:
    if not per_sequence:
        raise ValueError("cannot aggregate an empty set of sequences")

    def mean_curve(attr: str) -> MetricCurve:
        curves = [getattr(s, attr) for s in per_sequence]
        return MetricCurve(curves[0].thresholds, np.mean([c.values for c in curves], axis=0))

    return AggregateScores(tracker, [s.sequence for s in per_sequence], mean_curve("precision"),
                           mean_curve("norm_precision"), mean_curve("success"))


def group_by_tracker(results: Iterable[TrackResult]) -> dict[str, dict[str, TrackResult]]:
    out: dict[str, dict[str, TrackResult]] = {}
    for r in results:
        out.setdefault(r.tracker, {})[r.sequence_name] = r
    return out


def evaluate_tracker(results: Mapping[str, TrackResult], sequences: Iterable[SequenceRecord],
                     tracker: str = "tracker") -> tuple[AggregateScores, list[SequenceScores]]:
    per_seq = []
    for seq in sequences:
        if seq.name not in results:
            raise KeyError(f"{tracker}: no result for sequence {seq.name}")
        per_seq.append(evaluate_sequence(results[seq.name], seq, seq.name))
    return aggregate(tracker, per_seq), per_seq


def rank_trackers(scores: Iterable[AggregateScores], key: str = "sr") -> list[AggregateScores]:
    return sorted(scores, key=lambda s: getattr(s, key), reverse=True)


# -- attribute analysis ---------------------------------------------------------------


@dataclass
class AttributeEntry:
    tracker: str
    attribute: str
    num_sequences: int
    pr: float | None
    npr: float | None
    sr: float | None


def attribute_report(results: Mapping[str, Mapping[str, TrackResult]] | Iterable[TrackResult],
                     manifest: DatasetManifest | Sequence[SequenceRecord]) -> list[AttributeEntry]:
    """PR/NPR/SR per tracker on the sequences carrying each attribute.

    Entries for attributes no evaluated sequence carries have ``None`` scores.
    The ``ALL`` pseudo-attribute covers every evaluated sequence.
    """
    if not isinstance(results, Mapping):
        results = group_by_tracker(results)
    seqs = {s.name: s for s in (manifest.sequences if isinstance(manifest, DatasetManifest) else manifest)}
    entries = []
    for tracker, by_seq in results.items():
        missing = [n for n in by_seq if n not in seqs]
        if missing:
            raise KeyError(f"{tracker}: results for sequences not in manifest: {missing[:5]}")
        scored = {n: evaluate_sequence(r, seqs[n], n) for n, r in by_seq.items()}
        groups = {"ALL": list(scored)}
        for attr in ATTRIBUTE_NAMES:
            groups[attr] = [n for n in scored if getattr(seqs[n].attributes, attr)]
        for attr, names in groups.items():
            if not names:
                entries.append(AttributeEntry(tracker, attr, 0, None, None, None))
                continue
            agg = aggregate(tracker, [scored[n] for n in names])
            entries.append(AttributeEntry(tracker, attr, len(names), agg.pr, agg.npr, agg.sr))
    return entries


# -- report files -----------------------------------------------------------------------


def _fmt(v: float | None) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"


def write_scores_csv(path: str | Path, scores: Sequence[AggregateScores]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "tracker", "sequences", "PR", "NPR", "SR"])
        for i, s in enumerate(rank_trackers(scores), 1):
            w.writerow([i, s.tracker, len(s.sequences), _fmt(s.pr), _fmt(s.npr), _fmt(s.sr)])


def write_per_sequence_csv(path: str | Path, rows: Mapping[str, Sequence[SequenceScores]]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tracker", "sequence", "PR", "NPR", "SR"])
        for tracker, seqs in rows.items():
            for s in seqs:
                w.writerow([tracker, s.sequence, _fmt(s.pr), _fmt(s.npr), _fmt(s.sr)])


def write_attribute_csv(path: str | Path, entries: Sequence[AttributeEntry], metric: str | None = None) -> None:
    """Long format by default; ``metric`` in {"pr", "npr", "sr"} writes a tracker x attribute table."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if metric is None:
            w.writerow(["tracker", "attribute", "sequences", "PR", "NPR", "SR"])
            for e in entries:
                w.writerow([e.tracker, e.attribute, e.num_sequences, _fmt(e.pr), _fmt(e.npr), _fmt(e.sr)])
            return
        attrs = ["ALL", *ATTRIBUTE_NAMES]
        w.writerow(["tracker", *attrs])
        trackers = list(dict.fromkeys(e.tracker for e in entries))
        for t in trackers:
            row = {e.attribute: getattr(e, metric) for e in entries if e.tracker == t}
            w.writerow([t, *(_fmt(row.get(a)) for a in attrs)])


PLOTS = (
    ("precision", "precision_plot.png", "Precision plot", "Location error threshold (px)", "pr"),
    ("norm_precision", "norm_precision_plot.png", "Normalized precision plot",
     "Normalized location error threshold", "npr"),
    ("success", "success_plot.png", "Success plot", "Overlap threshold", "sr"),
)


def write_plots(out_dir: str | Path, scores: Sequence[AggregateScores], title_suffix: str = "") -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    paths = []
    for attr, fname, title, xlabel, key in PLOTS:
        fig, ax = plt.subplots(figsize=(5, 4))
        for s in sorted(scores, key=lambda s: getattr(s, key), reverse=True):
            curve = getattr(s, attr)
            ax.plot(curve.thresholds, curve.values, label=f"[{getattr(s, key):.3f}] {s.tracker}")
        ax.set_title(title + title_suffix)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("Success rate" if key == "sr" else "Precision")
        ax.set_ylim(0, 1)
        ax.grid(alpha=0.3)
        ax.legend(loc="lower right" if key != "sr" else "lower left", fontsize=8)
        fig.tight_layout()
        path = out_dir / fname
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
