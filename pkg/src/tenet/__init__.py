"""Temporal prompt generation and selection for box-prompted video
segmentation.

The pipeline turns per-frame box detections into full-video box prompts
(a carry-forward reference plus tracker-derived candidates), learns which
prompt to trust with a small transformer preference model, segments the
chosen prompt, and scores the result with region/boundary metrics.
"""

from .errors import TenetError
from .geometry import Box, BoxSequence, box_miou, clamp_to_frame, giou, iou
from .io import (
    Detection,
    FeatureRecord,
    FrameDetections,
    MaskRaster,
    MaskRecord,
    TrackFrame,
    TrackRecord,
    rle_decode,
    rle_encode,
)
from .metrics import EvalReport, contour_f, evaluate, region_j
from .preference import (
    PreferenceClassifier,
    PreferenceSample,
    Selection,
    bce_loss,
    grad_check,
    load_checkpoint,
    make_labels,
    sample_frame_indices,
    sample_track_tokens,
    save_checkpoint,
    select,
)
from .prompts import (
    CandidateTrack,
    ReferenceProposal,
    build_candidates,
    build_reference,
    assemble_tracker_input,
    k_sweep,
    merge_tracks_oracle,
    oracle_best,
    oracle_conf,
)
from .segment import RemoteConfig, SegmentRequest, mock_segment, remote_segment
from .synth import NoiseSpec, SceneSpec, generate, make_suite
from .tracking import BoxTracker, RawTrack, TrackerParams, assignment, associate

__version__ = "0.1.0"

__all__ = [
    "TenetError",
    "Box",
    "BoxSequence",
    "iou",
    "giou",
    "box_miou",
    "clamp_to_frame",
    "Detection",
    "FrameDetections",
    "TrackRecord",
    "TrackFrame",
    "FeatureRecord",
    "MaskRaster",
    "MaskRecord",
    "rle_encode",
    "rle_decode",
    "BoxTracker",
    "TrackerParams",
    "RawTrack",
    "assignment",
    "associate",
    "ReferenceProposal",
    "CandidateTrack",
    "build_reference",
    "assemble_tracker_input",
    "build_candidates",
    "oracle_best",
    "oracle_conf",
    "merge_tracks_oracle",
    "k_sweep",
    "PreferenceClassifier",
    "PreferenceSample",
    "Selection",
    "bce_loss",
    "grad_check",
    "make_labels",
    "sample_frame_indices",
    "sample_track_tokens",
    "select",
    "save_checkpoint",
    "load_checkpoint",
    "region_j",
    "contour_f",
    "evaluate",
    "EvalReport",
    "SegmentRequest",
    "mock_segment",
    "remote_segment",
    "RemoteConfig",
    "SceneSpec",
    "NoiseSpec",
    "generate",
    "make_suite",
    "__version__",
]
