"""Deterministic synthetic scenes for exercising the whole pipeline.

A scene is one target object plus distractors moving on linear or
sinusoidal paths. From the noise-free trajectories the generator derives:

* ground-truth boxes and rectangle masks for the target,
* "finetuned" detections: the target with small jitter, plus
  framewise-independent dropout and distractor-swap errors,
* "pretrained" detections: every object with larger jitter and
  miscalibrated scores (a bias makes distractors look confident), and
* per-prompt feature records carrying trajectory statistics plus a
  planted quality signal with controllable noise, so prompt preference is
  learnable by construction.

Candidate prompts depend on the tracker, so the generator runs the
reference/track/candidate chain itself; the pipeline stages re-derive the
same prompts deterministically from the emitted detections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ValidationError
from .geometry import Box, BoxSequence, clamp_to_frame, iou
from .io import Detection, FeatureRecord, FrameDetections, MaskRaster
from .prompts import (
    CandidateTrack,
    ReferenceProposal,
    build_candidates,
    build_reference,
    assemble_tracker_input,
)
from .segment import rasterize_box
from .tracking import BoxTracker, RawTrack, TrackerParams

__all__ = [
    "MotionSpec",
    "ObjectSpec",
    "NoiseSpec",
    "SceneSpec",
    "SceneData",
    "generate",
    "make_suite",
    "TEXT_PROMPT_ID",
]

TEXT_PROMPT_ID = 0


@dataclass(frozen=True)
class MotionSpec:
    kind: str = "linear"  # "linear" or "sinusoidal"
    velocity: tuple[float, float] = (0.0, 0.0)  # px per frame
    amplitude: tuple[float, float] = (0.0, 0.0)  # sinusoidal sweep, px
    period: float = 24.0  # frames per cycle
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("linear", "sinusoidal"):
            raise ValidationError(f"unknown motion kind {self.kind!r}")
        if self.kind == "sinusoidal" and self.period <= 0:
            raise ValidationError("sinusoidal motion needs a positive period")

    def center_at(self, cx0: float, cy0: float, t: int) -> tuple[float, float]:
        dt = t - 1
        cx = cx0 + self.velocity[0] * dt
        cy = cy0 + self.velocity[1] * dt
        if self.kind == "sinusoidal":
            angle = 2.0 * math.pi * dt / self.period + self.phase
            cx += self.amplitude[0] * math.sin(angle)
            cy += self.amplitude[1] * math.sin(angle)
        return cx, cy


@dataclass(frozen=True)
class ObjectSpec:
    box: Box  # initial box
    motion: MotionSpec = field(default_factory=MotionSpec)
    is_target: bool = False


@dataclass(frozen=True)
class NoiseSpec:
    center_sigma: float = 1.0  # finetuned detector center jitter, px
    size_sigma: float = 0.5  # finetuned detector size jitter, px
    dropout: float = 0.1  # finetuned per-frame dropout probability
    distractor_bias: float = 0.25  # pretrained score bias for distractors
    swap_probability: float = 0.1  # finetuned fires on a distractor instead
    feature_noise: float = 0.1  # sigma on the planted quality signal
    pretrained_scale: float = 2.5  # pretrained jitter = scale * finetuned jitter

    def __post_init__(self):
        for name in ("dropout", "swap_probability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be a probability, got {v}")


@dataclass(frozen=True)
class SceneSpec:
    video_id: str
    width: int
    height: int
    n_frames: int
    objects: tuple[ObjectSpec, ...]
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    d_in: int = 16

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValidationError("scene needs at least one frame")
        if self.width < 8 or self.height < 8:
            raise ValidationError("frame too small to be useful")
        targets = sum(1 for o in self.objects if o.is_target)
        if targets != 1:
            raise ValidationError(f"scene needs exactly one target, got {targets}")
        if self.d_in < 12:
            raise ConfigurationError("d_in must be >= 12 to hold the descriptor")


@dataclass(frozen=True)
class SceneData:
    """Everything the pipeline consumes for one video."""

    spec: SceneSpec
    gt_boxes: BoxSequence
    pretrained: list[FrameDetections]
    finetuned: list[FrameDetections]
    reference: ReferenceProposal
    raw_tracks: list[RawTrack]
    candidates: list[CandidateTrack]
    features: list[FeatureRecord]

    def gt_mask(self, frame: int) -> MaskRaster:
        return rasterize_box(
            self.gt_boxes.box_at(frame), self.spec.width, self.spec.height
        )

    def gt_masks(self) -> dict[int, MaskRaster]:
        return {t: self.gt_mask(t) for t in self.gt_boxes.frames}


def _trajectory(spec: SceneSpec, obj: ObjectSpec) -> list[Box]:
    boxes = []
    for t in range(1, spec.n_frames + 1):
        cx, cy = obj.motion.center_at(obj.box.cx, obj.box.cy, t)
        boxes.append(
            clamp_to_frame(Box(cx, cy, obj.box.w, obj.box.h), spec.width, spec.height)
        )
    return boxes


def _jitter(box: Box, center_sigma: float, size_sigma: float, rng, width, height) -> Box:
    cx = box.cx + rng.normal(0.0, center_sigma)
    cy = box.cy + rng.normal(0.0, center_sigma)
    w = max(2.0, box.w + rng.normal(0.0, size_sigma))
    h = max(2.0, box.h + rng.normal(0.0, size_sigma))
    cx = min(max(cx, 1.0), width - 1.0)
    cy = min(max(cy, 1.0), height - 1.0)
    return clamp_to_frame(Box(cx, cy, w, h), width, height)


def _clip_score(v: float) -> float:
    return float(min(0.99, max(0.01, v)))


def generate(
    spec: SceneSpec,
    k: int = 5,
    coverage_min: float = 0.3,
    tracker_params: TrackerParams | None = None,
) -> SceneData:
    """Build one scene: detections, prompts, and feature records.

    Fully deterministic in spec.seed. Frame 1 is exempt from dropout and
    swap errors so the reference proposal always has its anchor.
    """
    rng = np.random.default_rng(spec.seed)
    noise = spec.noise
    trajectories = {i: _trajectory(spec, obj) for i, obj in enumerate(spec.objects)}
    target_idx = next(i for i, obj in enumerate(spec.objects) if obj.is_target)
    distractor_idx = [i for i in range(len(spec.objects)) if i != target_idx]
    gt_boxes = BoxSequence.from_pairs(
        spec.video_id,
        [(t, trajectories[target_idx][t - 1]) for t in range(1, spec.n_frames + 1)],
    )

    pretrained: list[FrameDetections] = []
    finetuned: list[FrameDetections] = []
    pre_sigma_c = noise.center_sigma * noise.pretrained_scale
    pre_sigma_s = noise.size_sigma * noise.pretrained_scale
    for t in range(1, spec.n_frames + 1):
        entries = []
        for i in range(len(spec.objects)):
            box = _jitter(
                trajectories[i][t - 1], pre_sigma_c, pre_sigma_s, rng,
                spec.width, spec.height,
            )
            bias = 0.0 if i == target_idx else noise.distractor_bias
            entries.append(Detection(box, _clip_score(0.55 + bias + rng.normal(0.0, 0.12))))
        entries.sort(key=lambda d: (-d.score, d.box.cx, d.box.cy, d.box.w, d.box.h))
        pretrained.append(FrameDetections(spec.video_id, t, "pretrained", tuple(entries)))

        dropped = t > 1 and rng.random() < noise.dropout
        swapped = t > 1 and rng.random() < noise.swap_probability and distractor_idx
        swap_pick = int(rng.integers(len(distractor_idx))) if distractor_idx else 0
        if dropped:
            continue
        if swapped:
            source = trajectories[distractor_idx[swap_pick]][t - 1]
            score = _clip_score(0.70 + rng.normal(0.0, 0.05))
        else:
            source = trajectories[target_idx][t - 1]
            score = _clip_score(0.78 + rng.normal(0.0, 0.05))
        det = Detection(
            _jitter(source, noise.center_sigma, noise.size_sigma, rng,
                    spec.width, spec.height),
            score,
        )
        finetuned.append(FrameDetections(spec.video_id, t, "finetuned", (det,)))

    reference = build_reference(finetuned, n_frames=spec.n_frames)
    merged = assemble_tracker_input(pretrained, finetuned, k, n_frames=spec.n_frames)
    raw_tracks = BoxTracker(tracker_params).run(merged)
    candidates = build_candidates(raw_tracks, reference, coverage_min=coverage_min)

    feat_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7]))
    features = [
        _prompt_features(spec, gt_boxes, reference.boxes,
                         [0.0 if c else s for s, c in zip(reference.scores, reference.carried)],
                         list(reference.carried), "reference", 0, feat_rng)
    ]
    for cand in candidates:
        features.append(
            _prompt_features(
                spec, gt_boxes, cand.boxes,
                [0.0 if s is None else s for s in cand.scores],
                list(cand.filled), "candidate_track", cand.prompt_id, feat_rng,
                ref_boxes=reference.boxes,
            )
        )
    features.append(_text_features(spec, gt_boxes, feat_rng))

    return SceneData(
        spec=spec,
        gt_boxes=gt_boxes,
        pretrained=pretrained,
        finetuned=finetuned,
        reference=reference,
        raw_tracks=raw_tracks,
        candidates=candidates,
        features=features,
    )


def _prompt_features(
    spec: SceneSpec,
    gt: BoxSequence,
    boxes: BoxSequence,
    scores: list[float],
    filled: list[bool],
    kind: str,
    prompt_id: int,
    rng: np.random.Generator,
    ref_boxes: BoxSequence | None = None,
) -> FeatureRecord:
    """Per-frame descriptor: planted quality signal + trajectory statistics.

    ref_boxes adds a per-frame agreement term (IoU against the reference
    proposal's box); the reference's own record uses the constant 1.
    """
    w, h = float(spec.width), float(spec.height)
    vectors = np.zeros((len(boxes), spec.d_in))
    prev: Box | None = None
    for row, (t, box) in enumerate(zip(boxes.frames, boxes.boxes)):
        quality = iou(box, gt.box_at(t))
        vec = vectors[row]
        vec[0] = quality + rng.normal(0.0, spec.noise.feature_noise)
        if prev is not None:
            vec[1] = (box.cx - prev.cx) / w
            vec[2] = (box.cy - prev.cy) / h
        vec[3] = box.w / w
        vec[4] = box.h / h
        vec[5] = box.cx / w
        vec[6] = box.cy / h
        vec[7] = (box.w / box.h) / 4.0
        vec[8] = scores[row]
        vec[9] = 1.0 if filled[row] else 0.0
        vec[10] = 1.0 if ref_boxes is None else iou(box, ref_boxes.box_at(t))
        vec[11:] = rng.normal(0.0, 0.1, size=spec.d_in - 11)
        prev = box
    return FeatureRecord(spec.video_id, prompt_id, kind, vectors)


def _text_features(spec: SceneSpec, gt: BoxSequence, rng: np.random.Generator) -> FeatureRecord:
    first = gt.boxes[0]
    speeds = [
        math.hypot(b2.cx - b1.cx, b2.cy - b1.cy)
        for b1, b2 in zip(gt.boxes, gt.boxes[1:])
    ]
    vec = np.zeros(spec.d_in)
    vec[0] = spec.n_frames / 64.0
    vec[1] = len(spec.objects) / 8.0
    vec[2] = first.cx / spec.width
    vec[3] = first.cy / spec.height
    vec[4] = first.w / spec.width
    vec[5] = first.h / spec.height
    vec[6] = (sum(speeds) / len(speeds) / 5.0) if speeds else 0.0
    vec[7:] = rng.normal(0.0, 0.05, size=spec.d_in - 7)
    return FeatureRecord(spec.video_id, TEXT_PROMPT_ID, "text", vec[None, :])


def make_suite(
    n_videos: int,
    seed: int = 0,
    width: int = 128,
    height: int = 96,
    noise: NoiseSpec | None = None,
    d_in: int = 16,
) -> list[SceneSpec]:
    """Randomized but reproducible scene specs for a benchmark suite."""
    if n_videos < 1:
        raise ValidationError("suite needs at least one video")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    noise = noise or NoiseSpec(
        center_sigma=0.8,
        size_sigma=0.5,
        dropout=0.15,
        distractor_bias=0.18,
        swap_probability=0.20,
        feature_noise=0.05,
        pretrained_scale=2.0,
    )
    specs = []
    for v in range(n_videos):
        n_frames = int(rng.integers(24, 37))
        n_distractors = 4
        objects = []
        for j in range(1 + n_distractors):
            is_target = j == 0
            bw = float(rng.uniform(14.0, 26.0))
            bh = float(rng.uniform(12.0, 22.0))
            margin_x = bw / 2 + 2
            margin_y = bh / 2 + 2
            cx0 = float(rng.uniform(margin_x + 8, width - margin_x - 8))
            cy0 = float(rng.uniform(margin_y + 6, height - margin_y - 6))
            span_x = min(cx0 - margin_x, width - margin_x - cx0)
            span_y = min(cy0 - margin_y, height - margin_y - cy0)
            if rng.random() < 0.5:
                # Cap speed so a fresh track (zero initial velocity) still
                # overlaps its own object on the next frame.
                vx = float(rng.uniform(-1, 1)) * min(span_x / n_frames, 2.2)
                vy = float(rng.uniform(-1, 1)) * min(span_y / n_frames, 2.2)
                motion = MotionSpec(kind="linear", velocity=(vx, vy))
            else:
                period = float(rng.uniform(16.0, 40.0))
                # Peak sinusoidal speed is 2*pi*A/period; keep it under
                # ~2.8 px/frame for the same reason as the linear cap.
                max_amp = period * 0.45
                motion = MotionSpec(
                    kind="sinusoidal",
                    amplitude=(
                        min(float(rng.uniform(0.2, 0.9)) * span_x, max_amp),
                        min(float(rng.uniform(0.2, 0.9)) * span_y, max_amp),
                    ),
                    period=period,
                    phase=float(rng.uniform(0.0, 2.0 * math.pi)),
                )
            objects.append(
                ObjectSpec(box=Box(cx0, cy0, bw, bh), motion=motion, is_target=is_target)
            )
        specs.append(
            SceneSpec(
                video_id=f"vid{v:04d}",
                width=width,
                height=height,
                n_frames=n_frames,
                objects=tuple(objects),
                noise=noise,
                seed=int(rng.integers(0, 2**31 - 1)),
                d_in=d_in,
            )
        )
    return specs


def scene_spec_from_dict(data: dict) -> SceneSpec:
    """Deserialize a SceneSpec from plain JSON data."""
    objects = []
    for obj in data["objects"]:
        motion = obj.get("motion", {})
        objects.append(
            ObjectSpec(
                box=Box(*obj["box"]),
                motion=MotionSpec(
                    kind=motion.get("kind", "linear"),
                    velocity=tuple(motion.get("velocity", (0.0, 0.0))),
                    amplitude=tuple(motion.get("amplitude", (0.0, 0.0))),
                    period=float(motion.get("period", 24.0)),
                    phase=float(motion.get("phase", 0.0)),
                ),
                is_target=bool(obj.get("is_target", False)),
            )
        )
    noise = NoiseSpec(**data.get("noise", {}))
    return SceneSpec(
        video_id=str(data["video_id"]),
        width=int(data["width"]),
        height=int(data["height"]),
        n_frames=int(data["n_frames"]),
        objects=tuple(objects),
        noise=noise,
        seed=int(data.get("seed", 0)),
        d_in=int(data.get("d_in", 16)),
    )


def scene_spec_to_dict(spec: SceneSpec) -> dict:
    return {
        "video_id": spec.video_id,
        "width": spec.width,
        "height": spec.height,
        "n_frames": spec.n_frames,
        "objects": [
            {
                "box": obj.box.to_list(),
                "motion": {
                    "kind": obj.motion.kind,
                    "velocity": list(obj.motion.velocity),
                    "amplitude": list(obj.motion.amplitude),
                    "period": obj.motion.period,
                    "phase": obj.motion.phase,
                },
                "is_target": obj.is_target,
            }
            for obj in spec.objects
        ],
        "noise": {
            "center_sigma": spec.noise.center_sigma,
            "size_sigma": spec.noise.size_sigma,
            "dropout": spec.noise.dropout,
            "distractor_bias": spec.noise.distractor_bias,
            "swap_probability": spec.noise.swap_probability,
            "feature_noise": spec.noise.feature_noise,
            "pretrained_scale": spec.noise.pretrained_scale,
        },
        "seed": spec.seed,
        "d_in": spec.d_in,
    }
