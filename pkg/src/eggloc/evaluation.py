"""IoU-distribution evaluation of one detector, and two-detector comparison.

Every ground-truth box yields exactly one record; a missed box scores 0,
which is what produces the spike at 0 in a poorly adapted detector's
histogram. False positives are counted separately and never enter the mean.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Hashable, Mapping, Optional, Sequence

import numpy as np

from eggloc.dataset_io import CategoryLabel, GroundTruthAnnotation, ImageRecord, normalize_category
from eggloc.errors import SchemaError, ValidationError
from eggloc.geometry import MatchStatus, match_boxes
from eggloc.predictions import Prediction

__all__ = [
    "ComparisonReport",
    "EvalRecord",
    "EvalReport",
    "IoUDistribution",
    "SpreadStats",
    "build_histogram",
    "compare",
    "evaluate",
]

DEFAULT_BINS = 20
SPREAD_RANGE = (0.80, 0.95)


@dataclass(frozen=True)
class EvalRecord:
    image_id: Hashable
    category: CategoryLabel
    iou: float
    status: str

    def __post_init__(self):
        if self.status not in (MatchStatus.MATCHED.value, MatchStatus.MISSED_GT.value):
            raise ValidationError(f"invalid record status {self.status!r}")
        if not 0.0 <= self.iou <= 1.0:
            raise ValidationError(f"iou out of range: {self.iou}")
        if self.status == MatchStatus.MISSED_GT.value and self.iou != 0.0:
            raise ValidationError("missed ground truth must score iou 0")


@dataclass(frozen=True)
class IoUDistribution:
    bin_edges: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        edges = tuple(float(e) for e in self.bin_edges)
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)
        if len(edges) != len(counts) + 1 or len(counts) < 1:
            raise ValidationError("need exactly one more edge than counts")
        if edges[0] != 0.0 or edges[-1] != 1.0:
            raise ValidationError("bin edges must start at 0 and end at 1")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValidationError("bin edges must be strictly increasing")
        if any(c < 0 for c in counts):
            raise ValidationError("counts must be non-negative")

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class EvalReport:
    detector_name: str
    mean_iou: float
    n_ground_truth: int
    n_missed: int
    n_false_positive: int
    distribution: IoUDistribution
    records: tuple[EvalRecord, ...] = field(default=(), repr=False)

    @property
    def ious(self) -> np.ndarray:
        return np.array([r.iou for r in self.records], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "detector_name": self.detector_name,
            "mean_iou": self.mean_iou,
            "n_ground_truth": self.n_ground_truth,
            "n_missed": self.n_missed,
            "n_false_positive": self.n_false_positive,
            "distribution": {
                "bin_edges": list(self.distribution.bin_edges),
                "counts": list(self.distribution.counts),
            },
            "records": [
                {
                    "image_id": r.image_id,
                    "category": r.category.name,
                    "category_id": r.category.id,
                    "iou": r.iou,
                    "status": r.status,
                }
                for r in self.records
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> EvalReport:
        dist = data["distribution"]
        return cls(
            detector_name=data["detector_name"],
            mean_iou=float(data["mean_iou"]),
            n_ground_truth=int(data["n_ground_truth"]),
            n_missed=int(data["n_missed"]),
            n_false_positive=int(data["n_false_positive"]),
            distribution=IoUDistribution(tuple(dist["bin_edges"]), tuple(dist["counts"])),
            records=tuple(
                EvalRecord(r["image_id"], CategoryLabel(r["category"], r["category_id"]), r["iou"], r["status"])
                for r in data.get("records", [])
            ),
        )


@dataclass(frozen=True)
class SpreadStats:
    std: float
    frac_in_range: float
    frac_zero_bin: float
    range: tuple[float, float] = SPREAD_RANGE


@dataclass(frozen=True)
class ComparisonReport:
    report_a: EvalReport
    report_b: EvalReport
    delta_mean: float
    spread_a: SpreadStats
    spread_b: SpreadStats

    @property
    def better_localized(self) -> Optional[str]:
        """Name of the detector with the higher mean IoU, ``None`` on a tie."""
        if self.delta_mean > 0:
            return self.report_a.detector_name
        if self.delta_mean < 0:
            return self.report_b.detector_name
        return None

    def to_dict(self) -> dict:
        return {
            "report_a": self.report_a.to_dict(),
            "report_b": self.report_b.to_dict(),
            "delta_mean": self.delta_mean,
            "better_localized": self.better_localized,
            "spread_a": asdict(self.spread_a),
            "spread_b": asdict(self.spread_b),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> ComparisonReport:
        def spread(d):
            return SpreadStats(d["std"], d["frac_in_range"], d["frac_zero_bin"], tuple(d["range"]))

        return cls(
            report_a=EvalReport.from_dict(data["report_a"]),
            report_b=EvalReport.from_dict(data["report_b"]),
            delta_mean=float(data["delta_mean"]),
            spread_a=spread(data["spread_a"]),
            spread_b=spread(data["spread_b"]),
        )


def build_histogram(records: Sequence, n_bins: int = DEFAULT_BINS) -> IoUDistribution:
    """Uniform IoU histogram over ``[0, 1]``.

    Bins are half-open ``[a, b)`` except the last, which also holds 1.0, so
    IoU 0 always lands in the first bin. ``records`` may hold
    :class:`EvalRecord` objects or bare IoU values.
    """
    if isinstance(n_bins, bool) or not isinstance(n_bins, int) or n_bins < 2:
        raise ValidationError(f"n_bins must be an integer >= 2, got {n_bins!r}")
    if len(records) == 0:
        raise ValidationError("cannot build a histogram from zero records")
    values = np.array([getattr(r, "iou", r) for r in records], dtype=np.float64)
    if np.any(values < 0) or np.any(values > 1) or np.any(np.isnan(values)):
        raise ValidationError("iou values must lie in [0, 1]")
    counts, edges = np.histogram(values, bins=n_bins, range=(0.0, 1.0))
    return IoUDistribution(tuple(edges.tolist()), tuple(counts.tolist()))


def _canonical(label: str) -> Optional[CategoryLabel]:
    try:
        return normalize_category(label)
    except SchemaError:
        return None


def _image_keys(
    annotations: Sequence[GroundTruthAnnotation], images: Optional[Sequence[ImageRecord]]
) -> dict:
    """Lookup from every accepted spelling of an image reference to its id.

    Predictions may name an image by its id, the id as a string, or (when
    image records are supplied) the file name or file stem.
    """
    keys: dict = {}
    ids = [im.image_id for im in images] if images is not None else [a.image_id for a in annotations]
    for image_id in ids:
        keys.setdefault(image_id, image_id)
        keys.setdefault(str(image_id), image_id)
    if images is not None:
        for im in images:
            name = im.file_path.replace("\\", "/").rsplit("/", 1)[-1]
            keys.setdefault(name, im.image_id)
            keys.setdefault(name.rsplit(".", 1)[0], im.image_id)
    return keys


def evaluate(
    predictions: Sequence[Prediction],
    ground_truth: Sequence[GroundTruthAnnotation],
    *,
    images: Optional[Sequence[ImageRecord]] = None,
    category_aware: bool = False,
    detector_name: str = "detector",
    n_bins: int = DEFAULT_BINS,
) -> EvalReport:
    """Score ``predictions`` against ``ground_truth``.

    Per image, :func:`eggloc.geometry.match_boxes` pairs predictions with
    ground-truth boxes (only within the same canonical category when
    ``category_aware``). The mean runs over all ground-truth boxes with
    misses counted as 0.

    Raises:
        ValidationError: empty ground truth.
        SchemaError: a prediction refers to an image that is not in the
            ground truth (or in ``images`` when given).
    """
    ground_truth = list(ground_truth)
    if not ground_truth:
        raise ValidationError("ground truth is empty")
    keys = _image_keys(ground_truth, images)

    gt_by_image: dict = {}
    for ann in ground_truth:
        gt_by_image.setdefault(ann.image_id, []).append(ann)
    pred_by_image: dict = {}
    for p in predictions:
        image_id = keys.get(p.image_id, keys.get(str(p.image_id)))
        if image_id is None:
            raise SchemaError(f"prediction refers to unknown image_id {p.image_id!r}")
        pred_by_image.setdefault(image_id, []).append(p)

    # per-image results keyed by gt position so output follows ground-truth order
    ious: dict[tuple, float] = {}
    n_fp = 0
    for image_id in dict.fromkeys(list(gt_by_image) + list(pred_by_image)):
        gts = gt_by_image.get(image_id, [])
        preds = pred_by_image.get(image_id, [])
        if category_aware:
            groups: dict = {}
            for gi, g in enumerate(gts):
                groups.setdefault(g.category, ([], []))[0].append(gi)
            for pi, p in enumerate(preds):
                groups.setdefault(_canonical(p.label), ([], []))[1].append(pi)
        else:
            groups = {None: (list(range(len(gts))), list(range(len(preds))))}
        for g_idx, p_idx in groups.values():
            for m in match_boxes([preds[i].box for i in p_idx], [gts[i].box for i in g_idx]):
                if m.status is MatchStatus.FALSE_POSITIVE:
                    n_fp += 1
                else:
                    ious[(image_id, g_idx[m.gt_index])] = m.iou

    records = []
    position: dict = {}
    for ann in ground_truth:
        k = position.get(ann.image_id, 0)
        position[ann.image_id] = k + 1
        score = ious[(ann.image_id, k)]
        status = MatchStatus.MATCHED.value if score > 0 else MatchStatus.MISSED_GT.value
        records.append(EvalRecord(ann.image_id, ann.category, score, status))

    values = [r.iou for r in records]
    return EvalReport(
        detector_name=detector_name,
        mean_iou=float(sum(values) / len(values)),
        n_ground_truth=len(records),
        n_missed=sum(r.status == MatchStatus.MISSED_GT.value for r in records),
        n_false_positive=n_fp,
        distribution=build_histogram(records, n_bins),
        records=tuple(records),
    )


def spread_stats(report: EvalReport) -> SpreadStats:
    """Population standard deviation, share of IoUs in [0.80, 0.95], share in the first bin."""
    values = report.ious
    lo, hi = SPREAD_RANGE
    n = report.n_ground_truth
    return SpreadStats(
        std=float(np.std(values)) if len(values) else 0.0,
        frac_in_range=float(np.count_nonzero((values >= lo) & (values <= hi)) / n),
        frac_zero_bin=report.distribution.counts[0] / n,
    )


def compare(a: EvalReport, b: EvalReport) -> ComparisonReport:
    """Contrast two detectors scored on the same ground truth.

    Raises:
        ValidationError: the reports cover different numbers of ground-truth boxes.
    """
    if a.n_ground_truth != b.n_ground_truth:
        raise ValidationError(
            f"reports cover different ground truth ({a.n_ground_truth} vs {b.n_ground_truth} boxes)"
        )
    return ComparisonReport(
        report_a=a,
        report_b=b,
        delta_mean=a.mean_iou - b.mean_iou,
        spread_a=spread_stats(a),
        spread_b=spread_stats(b),
    )


def report_json(report) -> str:
    """Canonical serialized form of an :class:`EvalReport` or :class:`ComparisonReport`."""
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
