from __future__ import annotations

import json
import random

import numpy as np
import pytest

from tenet.errors import DimensionError, LengthError, ParseError, ValidationError
from tenet.geometry import Box
from tenet.io import (
    Detection,
    FeatureRecord,
    FrameDetections,
    MaskRaster,
    MaskRecord,
    TrackFrame,
    TrackRecord,
    parse_detections,
    parse_features,
    parse_masks,
    parse_tracks,
    rle_decode,
    rle_encode,
    write_detections,
    write_features,
    write_masks,
    write_tracks,
)

# ---------------------------------------------------------------------------
# RLE oracle: column-major index arithmetic done by hand


def _rle_by_index_walk(mask: np.ndarray) -> list[int]:
    """Walk the column-major flattening and count alternating runs.

    Independent of the implementation: builds the flat sequence index by
    index (column by column, top to bottom) and emits run lengths starting
    with the zero-run.
    """
    h, w = mask.shape
    flat = [bool(mask[r, c]) for c in range(w) for r in range(h)]
    counts: list[int] = []
    current = False  # runs start with zeros
    run = 0
    for bit in flat:
        if bit == current:
            run += 1
        else:
            counts.append(run)
            current = bit
            run = 1
    counts.append(run)
    return counts


def _raster(mask: np.ndarray) -> MaskRaster:
    h, w = mask.shape
    return MaskRaster(width=w, height=h, bits=mask.astype(bool))


def test_rle_all_ones_2x2():
    assert rle_encode(_raster(np.ones((2, 2)))) == [0, 4]


def test_rle_all_zeros_2x2():
    assert rle_encode(_raster(np.zeros((2, 2)))) == [4]


def test_rle_single_pixel_3x3():
    # one at row 2, col 2 (1-based): column-major flat index 4 -> [4, 1, 4]
    m = np.zeros((3, 3))
    m[1, 1] = 1
    assert rle_encode(_raster(m)) == [4, 1, 4]


def test_rle_matches_index_walk_oracle():
    rng = np.random.default_rng(23)
    for _ in range(50):
        h, w = rng.integers(1, 12, size=2)
        m = rng.random((h, w)) < 0.4
        assert rle_encode(_raster(m)) == _rle_by_index_walk(m)


def test_rle_decode_examples():
    assert not rle_decode([4], 2, 2).bits.any()
    assert rle_decode([0, 4], 2, 2).bits.all()


def test_rle_round_trip_random():
    rng = np.random.default_rng(29)
    for _ in range(200):
        h, w = rng.integers(1, 20, size=2)
        raster = _raster(rng.random((h, w)) < 0.5)
        decoded = rle_decode(rle_encode(raster), raster.width, raster.height)
        assert decoded == raster


def test_rle_decode_sum_mismatch():
    with pytest.raises(LengthError):
        rle_decode([3], 2, 2)


def test_rle_decode_negative_count():
    with pytest.raises(ValidationError):
        rle_decode([-1, 5], 2, 2)


# ---------------------------------------------------------------------------
# detections


def _det_fixture() -> list[FrameDetections]:
    # already in canonical (video, frame, source) order
    return [
        FrameDetections("vid_a", 1, "finetuned", (Detection(Box(5, 5, 2, 2), 0.8),)),
        FrameDetections(
            "vid_a",
            1,
            "pretrained",
            (Detection(Box(5, 5, 2, 2), 0.9), Detection(Box(8, 8, 2, 2), 0.4)),
        ),
        FrameDetections("vid_a", 2, "pretrained", (Detection(Box(6, 5, 2, 2), 0.7),)),
        FrameDetections("vid_b", 1, "finetuned", (Detection(Box(1, 1, 1, 1), 0.5),)),
    ]


def test_frame_detections_requires_descending_scores():
    with pytest.raises(ValidationError):
        FrameDetections(
            "v", 1, "pretrained",
            (Detection(Box(1, 1, 1, 1), 0.2), Detection(Box(2, 2, 1, 1), 0.9)),
        )


def test_unknown_source_rejected_at_parse(tmp_path):
    path = tmp_path / "det.jsonl"
    path.write_text(json.dumps({"schema": 1, "video": "v", "frame": 1,
                                "source": "zeroshot", "box": [1, 1, 1, 1],
                                "score": 0.5}) + "\n")
    with pytest.raises(ParseError):
        parse_detections(path)


def test_detections_round_trip(tmp_path):
    path = tmp_path / "det.jsonl"
    write_detections(path, _det_fixture())
    assert parse_detections(path) == _det_fixture()


def test_detections_parse_is_order_insensitive(tmp_path):
    path = tmp_path / "det.jsonl"
    write_detections(path, _det_fixture())
    lines = path.read_text().splitlines()
    shuffled = tmp_path / "shuffled.jsonl"
    rng = random.Random(31)
    for _ in range(5):
        rng.shuffle(lines)
        shuffled.write_text("\n".join(lines) + "\n")
        assert parse_detections(shuffled) == _det_fixture()


def test_detections_rewrite_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_detections(a, _det_fixture())
    write_detections(b, parse_detections(a))
    assert a.read_bytes() == b.read_bytes()


def test_empty_file_parses_to_empty_list(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert parse_detections(path) == []


def test_out_of_range_score_clamped_with_warning(tmp_path, caplog):
    path = tmp_path / "det.jsonl"
    rec = {
        "schema": 1, "video": "v", "frame": 1, "source": "pretrained",
        "box": [5.0, 5.0, 2.0, 2.0], "score": 3.7,
    }
    path.write_text(json.dumps(rec) + "\n")
    with caplog.at_level("WARNING"):
        parsed = parse_detections(path)
    assert parsed[0].entries[0].score == 1.0
    assert any("clamp" in r.message.lower() for r in caplog.records)


def test_duplicate_detection_kept_with_warning(tmp_path, caplog):
    path = tmp_path / "det.jsonl"
    rec = {
        "schema": 1, "video": "v", "frame": 1, "source": "pretrained",
        "box": [5.0, 5.0, 2.0, 2.0], "score": 0.5,
    }
    path.write_text(json.dumps(rec) + "\n" + json.dumps(rec) + "\n")
    with caplog.at_level("WARNING"):
        parsed = parse_detections(path)
    assert len(parsed[0].entries) == 2
    assert any("duplicate" in r.message.lower() for r in caplog.records)


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "det.jsonl"
    good = json.dumps(
        {"schema": 1, "video": "v", "frame": 1, "source": "pretrained",
         "box": [5.0, 5.0, 2.0, 2.0], "score": 0.5}
    )
    path.write_text(good + "\n{not json\n")
    with pytest.raises(ParseError) as exc:
        parse_detections(path)
    assert "2" in str(exc.value)


def test_wrong_schema_version_rejected(tmp_path):
    path = tmp_path / "det.jsonl"
    path.write_text(json.dumps({"schema": 99, "video": "v", "frame": 1,
                                "source": "pretrained", "box": [1, 1, 1, 1],
                                "score": 0.5}) + "\n")
    with pytest.raises(ParseError):
        parse_detections(path)


# ---------------------------------------------------------------------------
# tracks


def _track_fixture() -> list[TrackRecord]:
    return [
        TrackRecord(
            "vid_a", 1, "candidate_track",
            (TrackFrame(1, Box(5, 5, 2, 2), False, 0.9),
             TrackFrame(2, Box(6, 5, 2, 2), True, None)),
        ),
        TrackRecord("vid_a", 0, "reference",
                    (TrackFrame(1, Box(5, 5, 2, 2), False, 0.8),)),
        TrackRecord("vid_b", 3, "raw_track",
                    (TrackFrame(4, Box(2, 2, 1, 1), False, 0.3),)),
    ]


def test_tracks_round_trip(tmp_path):
    path = tmp_path / "tracks.jsonl"
    write_tracks(path, _track_fixture())
    assert parse_tracks(path) == sorted(
        _track_fixture(), key=lambda r: (r.video_id, r.kind, r.prompt_id)
    )


def test_track_record_rejects_unknown_kind():
    with pytest.raises(ValidationError):
        TrackRecord("v", 1, "mystery", (TrackFrame(1, Box(1, 1, 1, 1)),))


# ---------------------------------------------------------------------------
# features


def _feature_fixture(dim: int = 4) -> list[FeatureRecord]:
    rng = np.random.default_rng(37)
    return [
        FeatureRecord("vid_a", 1, "candidate_track", rng.normal(size=(3, dim))),
        FeatureRecord("vid_a", 0, "reference", rng.normal(size=(3, dim))),
        FeatureRecord("vid_a", -1, "text", rng.normal(size=(1, dim))),
    ]


def test_features_round_trip(tmp_path):
    path = tmp_path / "feat.jsonl"
    write_features(path, _feature_fixture())
    assert parse_features(path) == sorted(
        _feature_fixture(), key=lambda r: (r.video_id, r.kind, r.prompt_id)
    )


def test_feature_record_rejects_zero_dim():
    with pytest.raises((DimensionError, ValidationError)):
        FeatureRecord("v", 1, "candidate_track", np.zeros((2, 0)))


def test_features_mixed_dims_rejected(tmp_path):
    path = tmp_path / "feat.jsonl"
    write_features(path, _feature_fixture(dim=4))
    extra = {
        "schema": 1, "video": "vid_z", "prompt_id": 9, "kind": "text",
        "dim": 5, "vectors": [[0.0] * 5],
    }
    with open(path, "a") as fh:
        fh.write(json.dumps(extra) + "\n")
    with pytest.raises(DimensionError) as exc:
        parse_features(path)
    assert "vid_z" in str(exc.value)


# ---------------------------------------------------------------------------
# masks


def test_masks_round_trip(tmp_path):
    rng = np.random.default_rng(41)
    records = [
        MaskRecord("vid_a", t, _raster(rng.random((6, 9)) < 0.5))
        for t in range(1, 5)
    ]
    path = tmp_path / "masks.jsonl"
    write_masks(path, records)
    assert parse_masks(path) == records


def test_masks_bad_rle_is_parse_error(tmp_path):
    path = tmp_path / "masks.jsonl"
    path.write_text(json.dumps({"schema": 1, "video": "v", "frame": 1,
                                "width": 2, "height": 2, "rle": [3]}) + "\n")
    with pytest.raises(ParseError):
        parse_masks(path)
