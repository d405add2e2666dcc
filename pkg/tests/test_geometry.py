from __future__ import annotations

import numpy as np
import pytest

from tenet.errors import (
    AlignmentError,
    DegenerateBoxError,
    OrderingError,
    ValidationError,
)
from tenet.geometry import Box, BoxSequence, box_miou, clamp_to_frame, giou, iou

# ---------------------------------------------------------------------------
# oracles


def _raster_iou(a: Box, b: Box, cell: float = 0.25) -> float:
    """Pixel-rasterization IoU oracle.

    Rasterizes both boxes on a grid of `cell`-sized pixels and counts
    cells whose centers fall inside each box. Exact whenever all box
    corners are multiples of `cell`, so the tests below quantize their
    random coordinates accordingly.
    """
    corners = np.array([a.corners(), b.corners()])
    x_lo = corners[:, 0].min() - cell
    y_lo = corners[:, 1].min() - cell
    x_hi = corners[:, 2].max() + cell
    y_hi = corners[:, 3].max() + cell
    xs = np.arange(x_lo + cell / 2, x_hi, cell)
    ys = np.arange(y_lo + cell / 2, y_hi, cell)
    gx, gy = np.meshgrid(xs, ys)

    def inside(box: Box) -> np.ndarray:
        x0, y0, x1, y1 = box.corners()
        return (gx > x0) & (gx < x1) & (gy > y0) & (gy < y1)

    in_a, in_b = inside(a), inside(b)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def _quantized_box(rng: np.random.Generator, cell: float = 0.25) -> Box:
    # sides are even multiples of the cell so every corner lands on the grid
    cx = round(float(rng.uniform(2, 18)) / cell) * cell
    cy = round(float(rng.uniform(2, 18)) / cell) * cell
    w = max(cell * 2, round(float(rng.uniform(1, 8)) / (2 * cell)) * 2 * cell)
    h = max(cell * 2, round(float(rng.uniform(1, 8)) / (2 * cell)) * 2 * cell)
    return Box(cx, cy, w, h)


# ---------------------------------------------------------------------------
# Box construction


def test_box_rejects_nonpositive_sides():
    with pytest.raises(ValidationError):
        Box(0.0, 0.0, 0.0, 1.0)
    with pytest.raises(ValidationError):
        Box(0.0, 0.0, 1.0, -2.0)


def test_box_rejects_nonfinite():
    with pytest.raises(ValidationError):
        Box(float("nan"), 0.0, 1.0, 1.0)
    with pytest.raises(ValidationError):
        Box(0.0, float("inf"), 1.0, 1.0)


def test_corners_round_trip():
    b = Box(3.5, 2.0, 5.0, 4.0)
    assert b.corners() == (1.0, 0.0, 6.0, 4.0)
    assert Box.from_corners(*b.corners()) == b
    assert b.area == 20.0
    assert b.to_list() == [3.5, 2.0, 5.0, 4.0]


# ---------------------------------------------------------------------------
# iou


def test_iou_identity():
    b = Box(1.0, 1.0, 2.0, 2.0)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    assert iou(Box(1, 1, 2, 2), Box(10, 10, 2, 2)) == 0.0


def test_iou_half_overlap_matches_raster_oracle():
    a = Box(1, 1, 2, 2)
    b = Box(2, 1, 2, 2)
    # intersection 2, union 6
    assert iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-15)
    assert _raster_iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-15)


def test_iou_matches_raster_oracle_on_random_boxes():
    rng = np.random.default_rng(7)
    for _ in range(50):
        a, b = _quantized_box(rng), _quantized_box(rng)
        assert iou(a, b) == pytest.approx(_raster_iou(a, b), abs=1e-12)


def test_iou_symmetric_and_bounded():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        a = Box(*rng.uniform(0.5, 20, size=4))
        b = Box(*rng.uniform(0.5, 20, size=4))
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0


def test_iou_scale_and_translation_invariant():
    rng = np.random.default_rng(13)
    for _ in range(200):
        a = Box(*rng.uniform(0.5, 20, size=4))
        b = Box(*rng.uniform(0.5, 20, size=4))
        scale = float(rng.uniform(0.1, 10))
        dx, dy = rng.uniform(-50, 50, size=2)
        a2 = Box(a.cx * scale + dx, a.cy * scale + dy, a.w * scale, a.h * scale)
        b2 = Box(b.cx * scale + dx, b.cy * scale + dy, b.w * scale, b.h * scale)
        assert iou(a2, b2) == pytest.approx(iou(a, b), abs=1e-12)


# ---------------------------------------------------------------------------
# giou


def test_giou_identity():
    b = Box(5, 5, 3, 2)
    assert giou(b, b) == 1.0


def test_giou_separated_boxes_hand_oracle():
    # IoU 0, union 8, enclosing box 5x2=10 -> 0 - (10-8)/10 = -0.2
    assert giou(Box(1, 1, 2, 2), Box(4, 1, 2, 2)) == pytest.approx(-0.2, abs=1e-15)


def test_giou_limit_far_apart():
    a = Box(0, 0, 1, 1)
    b = Box(1e6, 0, 1, 1)
    assert giou(a, b) == pytest.approx(-1.0, abs=1e-3)


def test_giou_symmetric_and_below_iou():
    rng = np.random.default_rng(17)
    for _ in range(1000):
        a = Box(*rng.uniform(0.5, 20, size=4))
        b = Box(*rng.uniform(0.5, 20, size=4))
        assert giou(a, b) == giou(b, a)
        assert giou(a, b) <= iou(a, b) + 1e-12


def test_giou_equals_iou_when_union_fills_enclosure():
    # two stacked boxes tiling their enclosing box exactly
    a = Box(1, 0.5, 2, 1)
    b = Box(1, 1.5, 2, 1)
    assert giou(a, b) == iou(a, b)


# ---------------------------------------------------------------------------
# clamp_to_frame


def test_clamp_inside_unchanged():
    b = Box(5, 5, 2, 2)
    assert clamp_to_frame(b, 10, 10) == b


def test_clamp_corner_arithmetic():
    # corners (-2,-2)-(2,2) clipped to (0,0)-(2,2) -> center (1,1), size 2x2
    assert clamp_to_frame(Box(0, 0, 4, 4), 10, 10) == Box(1, 1, 2, 2)


def test_clamp_outside_raises():
    with pytest.raises(DegenerateBoxError):
        clamp_to_frame(Box(-10, 5, 2, 2), 10, 10)


# ---------------------------------------------------------------------------
# BoxSequence / box_miou


def _seq(video: str, pairs) -> BoxSequence:
    return BoxSequence.from_pairs(video, pairs)


def test_sequence_rejects_nonincreasing_frames():
    b = Box(1, 1, 2, 2)
    with pytest.raises(OrderingError):
        _seq("v", [(1, b), (1, b)])
    with pytest.raises(OrderingError):
        _seq("v", [(2, b), (1, b)])


def test_sequence_rejects_length_mismatch():
    with pytest.raises(ValidationError):
        BoxSequence("v", (1, 2), (Box(1, 1, 2, 2),))


def test_box_at_returns_frame_box():
    a, b = Box(1, 1, 2, 2), Box(3, 3, 2, 2)
    s = _seq("v", [(1, a), (2, b)])
    assert s.box_at(1) == a
    assert s.box_at(2) == b


def test_box_miou_identity():
    s = _seq("v", [(1, Box(1, 1, 2, 2)), (2, Box(3, 3, 2, 2))])
    assert box_miou(s, s) == 1.0


def test_box_miou_is_frame_mean():
    a = _seq("v", [(1, Box(1, 1, 2, 2)), (2, Box(1, 1, 2, 2))])
    b = _seq("v", [(1, Box(1, 1, 2, 2)), (2, Box(10, 10, 2, 2))])
    assert box_miou(a, b) == pytest.approx(0.5, abs=1e-15)


def test_box_miou_matches_loop_oracle():
    rng = np.random.default_rng(19)
    pairs_a = [(t, Box(*rng.uniform(1, 20, size=4))) for t in range(1, 4)]
    pairs_b = [(t, Box(*rng.uniform(1, 20, size=4))) for t in range(1, 4)]
    a, b = _seq("v", pairs_a), _seq("v", pairs_b)
    per_frame = [iou(pa[1], pb[1]) for pa, pb in zip(pairs_a, pairs_b)]
    assert box_miou(a, b) == pytest.approx(sum(per_frame) / 3, abs=1e-15)
    assert min(per_frame) - 1e-12 <= box_miou(a, b) <= max(per_frame) + 1e-12


def test_box_miou_alignment_errors():
    a = _seq("v", [(1, Box(1, 1, 2, 2))])
    b = _seq("w", [(1, Box(1, 1, 2, 2))])
    c = _seq("v", [(1, Box(1, 1, 2, 2)), (2, Box(1, 1, 2, 2))])
    with pytest.raises(AlignmentError):
        box_miou(a, b)
    with pytest.raises(AlignmentError):
        box_miou(a, c)
