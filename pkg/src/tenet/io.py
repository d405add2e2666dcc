"""Line-delimited JSON record streams and the mask RLE codec.

Four record kinds share one envelope convention: every line is a JSON
object with a ``"schema": 1`` field. Parsers are order-insensitive (a
shuffled file parses to the same canonical structures as a sorted one)
and writers always emit canonical order, so write -> parse -> write is
byte-stable.

Formats
-------
detections  {"schema":1,"video":v,"frame":t,"source":s,"box":[cx,cy,w,h],"score":p}
tracks      {"schema":1,"video":v,"prompt_id":i,"kind":k,
             "frames":[{"frame":t,"box":[...],"filled":b,"score":p|null},...]}
features    {"schema":1,"video":v,"prompt_id":i,"kind":k,"dim":d,"vectors":[[...],...]}
masks       {"schema":1,"video":v,"frame":t,"width":w,"height":h,"rle":[...]}

Mask pixels are run-length encoded in column-major order; the first
count is the leading run of zeros and may be 0.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DimensionError, LengthError, ParseError, ValidationError
from .geometry import Box

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# kind vocabularies shared by track and feature records
DETECTION_SOURCES = ("pretrained", "finetuned")
TRACK_KINDS = ("raw_track", "candidate_track", "reference", "gt")
FEATURE_KINDS = ("candidate_track", "reference", "text")


# ---------------------------------------------------------------------------
# record types


@dataclass(frozen=True)
class Detection:
    """One scored box."""

    box: Box
    score: float


@dataclass(frozen=True)
class FrameDetections:
    """All detections of one source at one frame, best score first."""

    video_id: str
    frame_index: int
    source: str
    entries: tuple[Detection, ...]

    def __post_init__(self):
        scores = [e.score for e in self.entries]
        if scores != sorted(scores, reverse=True):
            raise ValidationError("entries must be sorted by descending score")


@dataclass(frozen=True)
class TrackFrame:
    frame: int
    box: Box
    filled: bool = False
    score: float | None = None


@dataclass(frozen=True)
class TrackRecord:
    """One prompt (or raw track) as a per-frame box list."""

    video_id: str
    prompt_id: int
    kind: str
    frames: tuple[TrackFrame, ...]

    def __post_init__(self):
        if self.kind not in TRACK_KINDS:
            raise ValidationError(f"unknown track kind {self.kind!r}")
        prev = 0
        for tf in self.frames:
            if tf.frame <= prev:
                raise ValidationError("track frames must strictly increase")
            prev = tf.frame


@dataclass(frozen=True)
class FeatureRecord:
    """Per-frame feature vectors for one prompt, or the single text vector."""

    video_id: str
    prompt_id: int
    kind: str
    vectors: np.ndarray  # (n, dim) float64

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ValidationError(f"unknown feature kind {self.kind!r}")
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] == 0:
            raise DimensionError(f"vectors must be (n, dim>0), got shape {v.shape}")
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __eq__(self, other):
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.prompt_id == other.prompt_id
            and self.kind == other.kind
            and self.vectors.shape == other.vectors.shape
            and bool(np.all(self.vectors == other.vectors))
        )


@dataclass(frozen=True)
class MaskRaster:
    """A binary mask; bits are a (height, width) bool array."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool)
        if b.shape != (self.height, self.width):
            raise ValidationError(
                f"bits shape {b.shape} does not match {self.height}x{self.width}"
            )
        object.__setattr__(self, "bits", b)

    def __eq__(self, other):
        if not isinstance(other, MaskRaster):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and bool(np.all(self.bits == other.bits))
        )


@dataclass(frozen=True)
class MaskRecord:
    video_id: str
    frame_index: int
    raster: MaskRaster


# ---------------------------------------------------------------------------
# RLE codec


def rle_encode(mask) -> list[int]:
    """Run-length counts of a binary mask, column-major, zeros first.

    The counts alternate zero-run / one-run / zero-run / ...; the leading
    zero count may be 0 when the mask starts with a set pixel. An all-zero
    mask encodes to a single count.
    """
    bits = mask.bits if isinstance(mask, MaskRaster) else np.asarray(mask, dtype=bool)
    flat = np.ravel(bits, order="F").astype(np.uint8)
    n = flat.size
    if n == 0:
        return [0]
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [n]))
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts.insert(0, 0)
    return [int(c) for c in counts]


def rle_decode(counts: Iterable[int], width: int, height: int) -> MaskRaster:
    """Inverse of :func:`rle_encode`. Counts must sum to width*height."""
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise ValidationError(f"negative run length in {counts}")
    total = sum(counts)
    if total != width * height:
        raise LengthError(
            f"run lengths sum to {total}, expected {width}x{height}={width * height}"
        )
    flat = np.zeros(width * height, dtype=bool)
    pos = 0
    value = False
    for c in counts:
        if value:
            flat[pos : pos + c] = True
        pos += c
        value = not value
    bits = flat.reshape((width, height)).T  # undo column-major flattening
    return MaskRaster(width=width, height=height, bits=bits)


# ---------------------------------------------------------------------------
# shared line helpers


def _read_lines(path) -> list[tuple[int, dict]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", line=lineno) from e
            if not isinstance(obj, dict):
                raise ParseError("record is not an object", line=lineno)
            if obj.get("schema") != SCHEMA_VERSION:
                raise ParseError(
                    f"unsupported schema {obj.get('schema')!r}", line=lineno
                )
            out.append((lineno, obj))
    return out


def _require(obj: dict, key: str, lineno: int):
    if key not in obj:
        raise ParseError(f"missing field {key!r}", line=lineno)
    return obj[key]


def _parse_box(value, lineno: int) -> Box:
    if not isinstance(value, list) or len(value) != 4:
        raise ParseError(f"box must be a 4-element list, got {value!r}", line=lineno)
    try:
        return Box(*[float(v) for v in value])
    except (TypeError, ValueError, ValidationError) as e:
        raise ParseError(f"bad box {value!r}: {e}", line=lineno) from e


def _dump_line(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":")) + "\n"


def _box_json(box: Box) -> list[float]:
    return [float(box.cx), float(box.cy), float(box.w), float(box.h)]


# ---------------------------------------------------------------------------
# detections


def _detection_sort_key(d: Detection):
    return (-d.score, d.box.cx, d.box.cy, d.box.w, d.box.h)


def parse_detections(path) -> list[FrameDetections]:
    """Parse a detection stream into canonical per-frame groups.

    Scores outside [0, 1] are clamped with a warning; exact duplicate
    records are kept, also with a warning. Output groups are sorted by
    (video, frame, source) and entries within a group by descending
    score (ties by box components), so line order in the file does not
    matter.
    """
    groups: dict[tuple[str, int, str], list[Detection]] = {}
    seen: set[tuple] = set()
    for lineno, obj in _read_lines(path):
        video = str(_require(obj, "video", lineno))
        frame = _require(obj, "frame", lineno)
        source = str(_require(obj, "source", lineno))
        if source not in DETECTION_SOURCES:
            raise ParseError(f"unknown detection source {source!r}", line=lineno)
        if not isinstance(frame, int) or frame < 1:
            raise ParseError(f"frame must be a positive integer, got {frame!r}", line=lineno)
        box = _parse_box(_require(obj, "box", lineno), lineno)
        try:
            score = float(_require(obj, "score", lineno))
        except (TypeError, ValueError) as e:
            raise ParseError(f"bad score: {e}", line=lineno) from e
        if score < 0.0 or score > 1.0:
            clamped = min(1.0, max(0.0, score))
            logger.warning(
                "line %d: score %g outside [0, 1], clamped to %g", lineno, score, clamped
            )
            score = clamped
        key = (video, frame, source, box.cx, box.cy, box.w, box.h, score)
        if key in seen:
            logger.warning("line %d: duplicate detection record kept", lineno)
        seen.add(key)
        groups.setdefault((video, frame, source), []).append(Detection(box, score))
    out = []
    for gkey in sorted(groups):
        entries = tuple(sorted(groups[gkey], key=_detection_sort_key))
        out.append(FrameDetections(gkey[0], gkey[1], gkey[2], entries))
    return out


def write_detections(path, frames: Iterable[FrameDetections]) -> None:
    frames = sorted(frames, key=lambda f: (f.video_id, f.frame_index, f.source))
    with open(path, "w", encoding="utf-8") as fh:
        for fd in frames:
            for det in sorted(fd.entries, key=_detection_sort_key):
                fh.write(
                    _dump_line(
                        {
                            "schema": SCHEMA_VERSION,
                            "video": fd.video_id,
                            "frame": fd.frame_index,
                            "source": fd.source,
                            "box": _box_json(det.box),
                            "score": float(det.score),
                        }
                    )
                )


# ---------------------------------------------------------------------------
# tracks


def parse_tracks(path) -> list[TrackRecord]:
    records = []
    for lineno, obj in _read_lines(path):
        video = str(_require(obj, "video", lineno))
        prompt_id = _require(obj, "prompt_id", lineno)
        kind = str(_require(obj, "kind", lineno))
        if kind not in TRACK_KINDS:
            raise ParseError(f"unknown track kind {kind!r}", line=lineno)
        raw_frames = _require(obj, "frames", lineno)
        if not isinstance(raw_frames, list):
            raise ParseError("frames must be a list", line=lineno)
        frames = []
        for item in raw_frames:
            if not isinstance(item, dict):
                raise ParseError("frame entry must be an object", line=lineno)
            frame = item.get("frame")
            if not isinstance(frame, int) or frame < 1:
                raise ParseError(f"bad frame index {frame!r}", line=lineno)
            box = _parse_box(item.get("box"), lineno)
            filled = bool(item.get("filled", False))
            score = item.get("score")
            score = None if score is None else float(score)
            frames.append(TrackFrame(frame, box, filled, score))
        try:
            records.append(TrackRecord(video, int(prompt_id), kind, tuple(frames)))
        except ValidationError as e:
            raise ParseError(str(e), line=lineno) from e
    records.sort(key=lambda r: (r.video_id, r.kind, r.prompt_id))
    return records


def write_tracks(path, records: Iterable[TrackRecord]) -> None:
    records = sorted(records, key=lambda r: (r.video_id, r.kind, r.prompt_id))
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                _dump_line(
                    {
                        "schema": SCHEMA_VERSION,
                        "video": rec.video_id,
                        "prompt_id": rec.prompt_id,
                        "kind": rec.kind,
                        "frames": [
                            {
                                "frame": tf.frame,
                                "box": _box_json(tf.box),
                                "filled": tf.filled,
                                "score": None if tf.score is None else float(tf.score),
                            }
                            for tf in rec.frames
                        ],
                    }
                )
            )


# ---------------------------------------------------------------------------
# features


def parse_features(path) -> list[FeatureRecord]:
    """Parse feature records, enforcing one shared dimension per file."""
    records = []
    shared_dim: int | None = None
    for lineno, obj in _read_lines(path):
        video = str(_require(obj, "video", lineno))
        prompt_id = int(_require(obj, "prompt_id", lineno))
        kind = str(_require(obj, "kind", lineno))
        if kind not in FEATURE_KINDS:
            raise ParseError(f"unknown feature kind {kind!r}", line=lineno)
        dim = _require(obj, "dim", lineno)
        if not isinstance(dim, int) or dim <= 0:
            raise DimensionError(
                f"line {lineno}: dim must be a positive integer, got {dim!r}"
            )
        vectors = _require(obj, "vectors", lineno)
        if not isinstance(vectors, list) or not vectors:
            raise ParseError("vectors must be a non-empty list", line=lineno)
        arr = []
        for vec in vectors:
            if not isinstance(vec, list) or len(vec) != dim:
                raise DimensionError(
                    f"line {lineno}: vector of length "
                    f"{len(vec) if isinstance(vec, list) else '?'} in a dim={dim} "
                    f"record for ({video!r}, {prompt_id}, {kind!r})"
                )
            arr.append([float(v) for v in vec])
        if shared_dim is None:
            shared_dim = dim
        elif dim != shared_dim:
            raise DimensionError(
                f"line {lineno}: record ({video!r}, {prompt_id}, {kind!r}) has dim "
                f"{dim}, file established dim {shared_dim}"
            )
        records.append(FeatureRecord(video, prompt_id, kind, np.array(arr)))
    records.sort(key=lambda r: (r.video_id, r.kind, r.prompt_id))
    return records


def write_features(path, records: Iterable[FeatureRecord]) -> None:
    records = sorted(records, key=lambda r: (r.video_id, r.kind, r.prompt_id))
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                _dump_line(
                    {
                        "schema": SCHEMA_VERSION,
                        "video": rec.video_id,
                        "prompt_id": rec.prompt_id,
                        "kind": rec.kind,
                        "dim": rec.dim,
                        "vectors": [[float(v) for v in row] for row in rec.vectors],
                    }
                )
            )


# ---------------------------------------------------------------------------
# masks


def parse_masks(path) -> list[MaskRecord]:
    records = []
    for lineno, obj in _read_lines(path):
        video = str(_require(obj, "video", lineno))
        frame = _require(obj, "frame", lineno)
        if not isinstance(frame, int) or frame < 1:
            raise ParseError(f"bad frame index {frame!r}", line=lineno)
        width = _require(obj, "width", lineno)
        height = _require(obj, "height", lineno)
        if not isinstance(width, int) or not isinstance(height, int) or width <= 0 or height <= 0:
            raise ParseError(f"bad raster size {width!r}x{height!r}", line=lineno)
        counts = _require(obj, "rle", lineno)
        if not isinstance(counts, list):
            raise ParseError("rle must be a list of counts", line=lineno)
        try:
            raster = rle_decode(counts, width, height)
        except (LengthError, ValidationError) as e:
            raise ParseError(str(e), line=lineno) from e
        records.append(MaskRecord(video, frame, raster))
    records.sort(key=lambda r: (r.video_id, r.frame_index))
    return records


def write_masks(path, records: Iterable[MaskRecord]) -> None:
    records = sorted(records, key=lambda r: (r.video_id, r.frame_index))
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                _dump_line(
                    {
                        "schema": SCHEMA_VERSION,
                        "video": rec.video_id,
                        "frame": rec.frame_index,
                        "width": rec.raster.width,
                        "height": rec.raster.height,
                        "rle": rle_encode(rec.raster),
                    }
                )
            )
