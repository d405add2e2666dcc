"""Temporal prompt construction: the reference proposal, candidate tracks,
and the ground-truth-aware analysis oracles.

The reference proposal is the per-frame best single-object detection with
carry-forward over gaps. Candidate prompts are tracker outputs, gap-filled
from the reference so every prompt covers the full video. The oracle_*
functions peek at ground truth and exist only for analysis (upper bounds,
sweeps); nothing downstream of selection consumes them.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import (
    EmptySelectionError,
    EmptyVideoError,
    MissingAnchorError,
    ValidationError,
)
from .geometry import Box, BoxSequence, box_miou
from .io import Detection, FrameDetections, TrackFrame, TrackRecord
from .tracking import BoxTracker, RawTrack, TrackerParams

__all__ = [
    "ReferenceProposal",
    "CandidateTrack",
    "build_reference",
    "assemble_tracker_input",
    "build_candidates",
    "oracle_best",
    "oracle_conf",
    "merge_tracks_oracle",
    "k_sweep",
    "reference_to_record",
    "record_to_reference",
    "candidate_to_record",
    "record_to_candidate",
]

REFERENCE_PROMPT_ID = 0


@dataclass(frozen=True)
class ReferenceProposal:
    """Top-1 finetuned detection per frame, gaps carried forward."""

    video_id: str
    boxes: BoxSequence  # frames 1..T
    scores: tuple[float, ...]  # score of the (possibly carried) source detection
    carried: tuple[bool, ...]  # True where the box was copied from the previous frame

    def __post_init__(self):
        n = len(self.boxes)
        if len(self.scores) != n or len(self.carried) != n:
            raise ValidationError("scores/carried must align with boxes")


@dataclass(frozen=True)
class CandidateTrack:
    """One full-coverage candidate prompt derived from a raw track."""

    video_id: str
    prompt_id: int
    source_track_id: int | None
    boxes: BoxSequence  # frames 1..T
    filled: tuple[bool, ...]  # True where the box came from the reference
    scores: tuple[float | None, ...]  # detection score at native frames, else None

    def __post_init__(self):
        n = len(self.boxes)
        if len(self.filled) != n or len(self.scores) != n:
            raise ValidationError("filled/scores must align with boxes")

    @property
    def native_coverage(self) -> float:
        n = len(self.filled)
        return (n - sum(self.filled)) / n if n else 0.0

    def mean_native_score(self) -> float:
        native = [s for s, f in zip(self.scores, self.filled) if not f and s is not None]
        if not native:
            raise EmptySelectionError(
                f"candidate {self.prompt_id} has no scored native frames"
            )
        return sum(native) / len(native)


def _frames_by_index(frames: list[FrameDetections]) -> dict[int, FrameDetections]:
    by_index: dict[int, FrameDetections] = {}
    for fd in frames:
        if fd.frame_index in by_index:
            raise ValidationError(f"duplicate frame {fd.frame_index}")
        by_index[fd.frame_index] = fd
    return by_index


def build_reference(
    finetuned: list[FrameDetections], n_frames: int | None = None
) -> ReferenceProposal:
    """Reference proposal from single-object detections.

    Takes the highest-scoring detection at each frame; frames with no
    detection reuse the previous frame's box (flagged carried). The first
    frame must carry a detection to anchor the carry-forward.
    """
    if not finetuned:
        raise EmptyVideoError("no finetuned detections")
    video_ids = {f.video_id for f in finetuned}
    if len(video_ids) != 1:
        raise ValidationError(f"multiple videos in reference input: {sorted(video_ids)}")
    video_id = finetuned[0].video_id
    by_index = _frames_by_index(finetuned)
    t_max = n_frames if n_frames is not None else max(by_index)
    if t_max < 1:
        raise EmptyVideoError("video has no frames")
    first = by_index.get(1)
    if first is None or not first.entries:
        raise MissingAnchorError(f"video {video_id!r}: frame 1 has no detection")
    boxes: list[tuple[int, Box]] = []
    scores: list[float] = []
    carried: list[bool] = []
    for t in range(1, t_max + 1):
        fd = by_index.get(t)
        if fd is not None and fd.entries:
            top = fd.entries[0]
            boxes.append((t, top.box))
            scores.append(top.score)
            carried.append(False)
        else:
            boxes.append((t, boxes[-1][1]))
            scores.append(scores[-1])
            carried.append(True)
    return ReferenceProposal(
        video_id, BoxSequence.from_pairs(video_id, boxes), tuple(scores), tuple(carried)
    )


def assemble_tracker_input(
    pretrained: list[FrameDetections],
    finetuned: list[FrameDetections],
    k: int,
    n_frames: int | None = None,
) -> list[FrameDetections]:
    """Merge top-k pretrained detections with the finetuned top-1 per frame.

    Emits one (possibly empty) merged frame for every index 1..T so the
    tracker ages its tracks through detection-free frames.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    video_ids = {f.video_id for f in pretrained} | {f.video_id for f in finetuned}
    if len(video_ids) != 1:
        raise ValidationError(f"multiple videos in tracker input: {sorted(video_ids)}")
    video_id = next(iter(video_ids))
    pre = _frames_by_index(pretrained)
    fin = _frames_by_index(finetuned)
    t_max = n_frames if n_frames is not None else max(list(pre) + list(fin))
    merged = []
    for t in range(1, t_max + 1):
        entries: list[Detection] = []
        fd = pre.get(t)
        if fd is not None:
            entries.extend(fd.entries[:k])
        fd = fin.get(t)
        if fd is not None and fd.entries:
            entries.append(fd.entries[0])
        entries.sort(key=lambda d: (-d.score, d.box.cx, d.box.cy, d.box.w, d.box.h))
        merged.append(FrameDetections(video_id, t, "merged", tuple(entries)))
    return merged


def build_candidates(
    raw_tracks: list[RawTrack],
    reference: ReferenceProposal,
    coverage_min: float = 0.3,
) -> list[CandidateTrack]:
    """Turn raw tracks into full-coverage candidate prompts.

    Tracks natively covering less than coverage_min of the video are
    dropped; remaining gaps are filled with the reference box for that
    frame. Output is ordered by descending native coverage (ties by source
    track id) and prompt ids number that order from 0.
    """
    t_max = len(reference.boxes)
    kept: list[tuple[float, int, RawTrack]] = []
    for trk in raw_tracks:
        if trk.video_id != reference.video_id:
            raise ValidationError(
                f"track video {trk.video_id!r} does not match reference "
                f"{reference.video_id!r}"
            )
        coverage = len(trk.observations) / t_max
        if coverage >= coverage_min:
            kept.append((coverage, trk.track_id, trk))
    kept.sort(key=lambda item: (-item[0], item[1]))
    candidates = []
    for prompt_id, (_, _, trk) in enumerate(kept):
        observed = {frame: (box, score) for frame, box, score in trk.observations}
        boxes: list[tuple[int, Box]] = []
        filled: list[bool] = []
        scores: list[float | None] = []
        for t in range(1, t_max + 1):
            if t in observed:
                box, score = observed[t]
                boxes.append((t, box))
                filled.append(False)
                scores.append(score)
            else:
                boxes.append((t, reference.boxes.box_at(t)))
                filled.append(True)
                scores.append(None)
        candidates.append(
            CandidateTrack(
                video_id=reference.video_id,
                prompt_id=prompt_id,
                source_track_id=trk.track_id,
                boxes=BoxSequence.from_pairs(reference.video_id, boxes),
                filled=tuple(filled),
                scores=tuple(scores),
            )
        )
    return candidates


def oracle_best(
    candidates: list[CandidateTrack],
    reference: ReferenceProposal,
    gt: BoxSequence,
):
    """(prompt, box mIoU) of the best prompt against ground truth.

    The reference participates; a candidate must be strictly better to
    displace it (and earlier candidates win ties).
    """
    best_prompt = reference
    best = box_miou(reference.boxes, gt)
    for cand in candidates:
        m = box_miou(cand.boxes, gt)
        if m > best:
            best_prompt, best = cand, m
    return best_prompt, best


def oracle_conf(candidates: list[CandidateTrack]) -> tuple[CandidateTrack, float]:
    """(candidate, confidence) with the highest mean native detection score."""
    if not candidates:
        raise EmptySelectionError("no candidates to rank by confidence")
    best_cand = candidates[0]
    best = best_cand.mean_native_score()
    for cand in candidates[1:]:
        c = cand.mean_native_score()
        if c > best:
            best_cand, best = cand, c
    return best_cand, best


def merge_tracks_oracle(
    candidates: list[CandidateTrack],
    reference: ReferenceProposal,
    gt: BoxSequence,
) -> tuple[BoxSequence, float]:
    """Greedy rank-based merge of prompts, scored against ground truth.

    Prompts (candidates plus the reference) are ranked by track-level box
    mIoU; each frame takes the native box of the highest-ranked prompt
    covering it natively (for the reference, frames it did not carry).
    Frames no prompt covers natively fall back to the reference box. The
    greedy selection step then keeps whichever of {merged sequence, best
    single prompt} scores higher, so the result never falls below the
    single-prompt oracle.
    """
    ref_miou = box_miou(reference.boxes, gt)
    pool: list[tuple[float, int, list[tuple[int, Box, bool]]]] = []
    # rank key: (-miou, order) with the reference first among equals
    ref_frames = [
        (t, box, not carried)
        for (t, box), carried in zip(
            zip(reference.boxes.frames, reference.boxes.boxes), reference.carried
        )
    ]
    pool.append((ref_miou, -1, ref_frames))
    for cand in candidates:
        cand_frames = [
            (t, box, not filled)
            for (t, box), filled in zip(
                zip(cand.boxes.frames, cand.boxes.boxes), cand.filled
            )
        ]
        pool.append((box_miou(cand.boxes, gt), cand.prompt_id, cand_frames))
    pool.sort(key=lambda item: (-item[0], item[1]))

    t_max = len(reference.boxes)
    merged: list[Box | None] = [None] * t_max
    for _, _, frames in pool:
        for t, box, native in frames:
            if native and merged[t - 1] is None:
                merged[t - 1] = box
    for t in range(1, t_max + 1):
        if merged[t - 1] is None:
            merged[t - 1] = reference.boxes.box_at(t)
    merged_seq = BoxSequence(
        reference.video_id, tuple(range(1, t_max + 1)), tuple(merged)
    )
    merged_miou = box_miou(merged_seq, gt)

    best_prompt, best_miou = oracle_best(candidates, reference, gt)
    if merged_miou >= best_miou:
        return merged_seq, merged_miou
    best_seq = best_prompt.boxes if isinstance(best_prompt, CandidateTrack) else reference.boxes
    return best_seq, best_miou


def k_sweep(
    pretrained: list[FrameDetections],
    finetuned: list[FrameDetections],
    gt: BoxSequence,
    k_values,
    tracker_params: TrackerParams | None = None,
    coverage_min: float = 0.3,
    n_frames: int | None = None,
) -> list[tuple[int, float]]:
    """Oracle-best box mIoU as a function of the pretrained top-k budget.

    Duplicate k values are deduplicated; rows come back sorted by k.
    """
    ks = sorted(set(int(k) for k in k_values))
    if not ks:
        raise ValidationError("k_sweep needs at least one k value")
    if n_frames is None:
        n_frames = max(gt.frames)
    reference = build_reference(finetuned, n_frames=n_frames)
    rows = []
    for k in ks:
        merged = assemble_tracker_input(pretrained, finetuned, k, n_frames=n_frames)
        raw = BoxTracker(tracker_params).run(merged)
        candidates = build_candidates(raw, reference, coverage_min=coverage_min)
        _, best = oracle_best(candidates, reference, gt)
        rows.append((k, best))
    return rows


# ---------------------------------------------------------------------------
# record conversions


def reference_to_record(ref: ReferenceProposal) -> TrackRecord:
    frames = tuple(
        TrackFrame(t, box, filled=carried, score=score)
        for (t, box), carried, score in zip(
            zip(ref.boxes.frames, ref.boxes.boxes), ref.carried, ref.scores
        )
    )
    return TrackRecord(ref.video_id, REFERENCE_PROMPT_ID, "reference", frames)


def record_to_reference(rec: TrackRecord) -> ReferenceProposal:
    if rec.kind != "reference":
        raise ValidationError(f"expected a reference record, got kind {rec.kind!r}")
    pairs = [(tf.frame, tf.box) for tf in rec.frames]
    scores = tuple(0.0 if tf.score is None else tf.score for tf in rec.frames)
    carried = tuple(tf.filled for tf in rec.frames)
    return ReferenceProposal(
        rec.video_id, BoxSequence.from_pairs(rec.video_id, pairs), scores, carried
    )


def candidate_to_record(cand: CandidateTrack) -> TrackRecord:
    frames = tuple(
        TrackFrame(t, box, filled=filled, score=score)
        for (t, box), filled, score in zip(
            zip(cand.boxes.frames, cand.boxes.boxes), cand.filled, cand.scores
        )
    )
    return TrackRecord(cand.video_id, cand.prompt_id, "candidate_track", frames)


def record_to_candidate(rec: TrackRecord) -> CandidateTrack:
    if rec.kind != "candidate_track":
        raise ValidationError(f"expected a candidate record, got kind {rec.kind!r}")
    pairs = [(tf.frame, tf.box) for tf in rec.frames]
    return CandidateTrack(
        video_id=rec.video_id,
        prompt_id=rec.prompt_id,
        source_track_id=None,
        boxes=BoxSequence.from_pairs(rec.video_id, pairs),
        filled=tuple(tf.filled for tf in rec.frames),
        scores=tuple(tf.score for tf in rec.frames),
    )


def raw_track_to_record(trk: RawTrack) -> TrackRecord:
    frames = tuple(
        TrackFrame(t, box, filled=False, score=score) for t, box, score in trk.observations
    )
    return TrackRecord(trk.video_id, trk.track_id, "raw_track", frames)


def record_to_raw_track(rec: TrackRecord) -> RawTrack:
    if rec.kind != "raw_track":
        raise ValidationError(f"expected a raw track record, got kind {rec.kind!r}")
    return RawTrack(
        rec.video_id,
        rec.prompt_id,
        tuple((tf.frame, tf.box, 0.0 if tf.score is None else tf.score) for tf in rec.frames),
    )
