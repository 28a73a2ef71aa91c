import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eggloc.errors import DegenerateBoxError, ValidationError
from eggloc.geometry import BoundingBox, MatchRecord, MatchStatus, area, clamp_to_image, iou, match_boxes


def pixel_iou(a, b, size=None):
    """Count unit pixels covered by integer boxes; independent of the analytic path."""
    size = size or int(max(a[2], a[3], b[2], b[3])) + 1
    ma = np.zeros((size, size), dtype=bool)
    mb = np.zeros((size, size), dtype=bool)
    ma[a[1] : a[3], a[0] : a[2]] = True
    mb[b[1] : b[3], b[0] : b[2]] = True
    union = np.count_nonzero(ma | mb)
    return np.count_nonzero(ma & mb) / union


def best_assignment_total(ious):
    """Max total IoU over every one-to-one assignment (brute force)."""
    n_pred, n_gt = ious.shape
    best = 0.0
    for k in range(min(n_pred, n_gt) + 1):
        for preds in itertools.permutations(range(n_pred), k):
            for gts in itertools.combinations(range(n_gt), k):
                best = max(best, sum(ious[p, g] for p, g in zip(preds, gts)))
    return best


int_boxes = st.tuples(
    st.integers(0, 40), st.integers(0, 40), st.integers(1, 40), st.integers(1, 40)
).map(lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))

real_boxes = st.tuples(
    st.floats(0, 500), st.floats(0, 500), st.floats(0.01, 300), st.floats(0.01, 300)
).map(lambda t: BoundingBox(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@pytest.mark.parametrize(
    "box, expected",
    [((0, 0, 10, 10), 100.0), ((5, 5, 6, 6), 1.0), ((0, 0, 3, 7), 21.0)],
)
def test_area(box, expected):
    assert area(BoundingBox(*box)) == expected


@pytest.mark.parametrize("coords", [(5, 0, 5, 10), (0, 10, 10, 2), (-1, 0, 3, 3), (0, 0, float("nan"), 3)])
def test_invalid_box_rejected(coords):
    with pytest.raises(ValidationError):
        BoundingBox(*coords)


def test_iou_examples():
    a = BoundingBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(2, 2, 3, 3)) == 0.0
    # pixel oracle: intersection 50, union 150
    assert pixel_iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)
    assert iou(a, BoundingBox(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-12)


def test_touching_boxes_do_not_overlap():
    assert iou(BoundingBox(0, 0, 5, 5), BoundingBox(5, 0, 10, 5)) == 0.0


@given(int_boxes, int_boxes)
def test_iou_matches_pixel_oracle(a, b):
    assert abs(iou(BoundingBox(*a), BoundingBox(*b)) - pixel_iou(a, b)) <= 1e-9


@given(real_boxes, real_boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@given(real_boxes)
def test_iou_self_is_one(a):
    assert iou(a, a) == 1.0


@given(int_boxes, int_boxes, st.integers(0, 1000), st.integers(0, 1000))
def test_iou_translation_invariant(a, b, dx, dy):
    shift = lambda c: BoundingBox(c[0] + dx, c[1] + dy, c[2] + dx, c[3] + dy)  # noqa: E731
    assert iou(shift(a), shift(b)) == pytest.approx(iou(BoundingBox(*a), BoundingBox(*b)), abs=1e-12)


def test_clamp_examples():
    assert clamp_to_image((-5, -5, 10, 10), 100, 100) == BoundingBox(0, 0, 10, 10)
    assert clamp_to_image(BoundingBox(0, 0, 10, 10), 100, 100) == BoundingBox(0, 0, 10, 10)
    assert clamp_to_image(BoundingBox(90, 90, 200, 200), 100, 100) == BoundingBox(90, 90, 100, 100)


def test_clamp_fully_outside():
    with pytest.raises(DegenerateBoxError):
        clamp_to_image(BoundingBox(150, 150, 200, 200), 100, 100)
    with pytest.raises(ValidationError):
        clamp_to_image(BoundingBox(0, 0, 1, 1), 0, 100)


def test_match_no_predictions():
    (rec,) = match_boxes([], [BoundingBox(0, 0, 10, 10)])
    assert rec.status is MatchStatus.MISSED_GT and rec.iou == 0.0 and rec.pred_index is None


def test_match_perfect():
    (rec,) = match_boxes([BoundingBox(0, 0, 10, 10)], [BoundingBox(0, 0, 10, 10)])
    assert rec == MatchRecord(0, 0, 1.0, MatchStatus.MATCHED)


def test_match_duplicate_prediction():
    preds = [BoundingBox(0, 0, 10, 10), BoundingBox(0, 0, 9, 9)]
    gts = [BoundingBox(0, 0, 10, 10)]
    recs = match_boxes(preds, gts)
    assert recs == [
        MatchRecord(0, 0, 1.0, MatchStatus.MATCHED),
        MatchRecord(None, 1, 0.0, MatchStatus.FALSE_POSITIVE),
    ]
    ious = np.array([[iou(p, g) for g in gts] for p in preds])
    assert best_assignment_total(ious) == pytest.approx(sum(r.iou for r in recs))


def test_match_disjoint_prediction_is_false_positive():
    recs = match_boxes([BoundingBox(50, 50, 60, 60)], [BoundingBox(0, 0, 10, 10)])
    assert [r.status for r in recs] == [MatchStatus.MISSED_GT, MatchStatus.FALSE_POSITIVE]


@given(st.lists(int_boxes, max_size=4), st.lists(int_boxes, max_size=4))
def test_match_structure(preds, gts):
    preds = [BoundingBox(*p) for p in preds]
    gts = [BoundingBox(*g) for g in gts]
    recs = match_boxes(preds, gts)
    matched = [r for r in recs if r.status is MatchStatus.MATCHED]
    missed = [r for r in recs if r.status is MatchStatus.MISSED_GT]
    fps = [r for r in recs if r.status is MatchStatus.FALSE_POSITIVE]
    assert len(matched) + len(missed) == len(gts)
    assert len(matched) + len(fps) == len(preds)
    assert len({r.gt_index for r in matched}) == len(matched)
    assert len({r.pred_index for r in matched}) == len(matched)
    assert [r.gt_index for r in recs[: len(gts)]] == list(range(len(gts)))
    if preds and gts:
        ious = np.array([[iou(p, g) for g in gts] for p in preds])
        assert sum(r.iou for r in matched) <= best_assignment_total(ious) + 1e-9


def test_match_record_invariants():
    with pytest.raises(ValidationError):
        MatchRecord(0, None, 0.5, MatchStatus.MATCHED)
    with pytest.raises(ValidationError):
        MatchRecord(0, None, 0.2, MatchStatus.MISSED_GT)
    with pytest.raises(ValidationError):
        MatchRecord(0, 1, 0.0, MatchStatus.FALSE_POSITIVE)
