"""Online multi-object tracking over per-frame box detections.

A constant-velocity Kalman filter per track, Hungarian association on a
combined overlap / motion-direction cost, and an observation-centric
re-update that replays linearly interpolated virtual observations when a
track is re-acquired after a gap. Everything is deterministic: identical
inputs produce identical tracks.

State layout is the classic 7-vector [cx, cy, s, r, vcx, vcy, vs] where
s = w*h is the box area and r = w/h its aspect ratio; the aspect ratio
carries no velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EmptyVideoError, NumericError, OrderingError, ValidationError
from .geometry import Box, iou
from .io import FrameDetections

__all__ = [
    "TrackerParams",
    "KalmanTrackState",
    "kf_predict",
    "kf_update",
    "state_from_box",
    "state_box",
    "assignment",
    "associate",
    "TrackHypothesis",
    "RawTrack",
    "BoxTracker",
]

STATE_DIM = 7
MEAS_DIM = 4

# constant-velocity transition: cx += vcx, cy += vcy, s += vs
_F = np.eye(STATE_DIM)
_F[0, 4] = _F[1, 5] = _F[2, 6] = 1.0

_H = np.zeros((MEAS_DIM, STATE_DIM))
_H[:4, :4] = np.eye(4)

# classic SORT noise profile
_R = np.diag([1.0, 1.0, 10.0, 10.0])
_P0 = np.diag([10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4])
_Q = np.diag([1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 1e-4])


@dataclass
class TrackerParams:
    """Tunable knobs of the tracker; defaults follow common practice."""

    iou_threshold: float = 0.3
    max_age: int = 30
    min_hits: int = 1
    direction_weight: float = 0.2


@dataclass
class KalmanTrackState:
    """Filter mean and covariance for one track."""

    mean: np.ndarray  # (7,)
    cov: np.ndarray  # (7, 7)

    def copy(self) -> "KalmanTrackState":
        return KalmanTrackState(self.mean.copy(), self.cov.copy())


def _box_to_measurement(box: Box) -> np.ndarray:
    return np.array([box.cx, box.cy, box.w * box.h, box.w / box.h])


def _measurement_to_box(z: np.ndarray) -> Box:
    s, r = max(float(z[2]), 1e-12), max(float(z[3]), 1e-12)
    w = math.sqrt(s * r)
    return Box(float(z[0]), float(z[1]), w, s / w)


def state_from_box(box: Box) -> KalmanTrackState:
    """Fresh filter state centered on a detection with zero velocity."""
    mean = np.zeros(STATE_DIM)
    mean[:4] = _box_to_measurement(box)
    return KalmanTrackState(mean, _P0.copy())


def state_box(state: KalmanTrackState) -> Box:
    """The box described by the filter mean."""
    return _measurement_to_box(state.mean[:4])


def kf_predict(state: KalmanTrackState) -> KalmanTrackState:
    """Advance one frame under the constant-velocity model."""
    if not np.all(np.isfinite(state.mean)) or not np.all(np.isfinite(state.cov)):
        raise NumericError("non-finite filter state")
    mean = state.mean.copy()
    if mean[2] + mean[6] <= 0:  # keep the area observable part positive
        mean[6] = 0.0
    mean = _F @ mean
    cov = _F @ state.cov @ _F.T + _Q
    return KalmanTrackState(mean, cov)


def kf_update(state: KalmanTrackState, box: Box) -> KalmanTrackState:
    """Condition the state on an observed box."""
    z = _box_to_measurement(box)
    innovation = z - _H @ state.mean
    s_mat = _H @ state.cov @ _H.T + _R
    try:
        gain = np.linalg.solve(s_mat, _H @ state.cov).T  # (7, 4)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"singular innovation covariance: {e}") from e
    mean = state.mean + gain @ innovation
    cov = state.cov - gain @ s_mat @ gain.T
    cov = (cov + cov.T) / 2.0  # keep symmetric against round-off drift
    return KalmanTrackState(mean, cov)


def assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-total-cost one-to-one assignment on a rectangular matrix.

    Returns (row, col) pairs sorted by row; min(n_rows, n_cols) pairs.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return [(int(r), int(c)) for r, c in pairs]


def _direction(from_box: Box, to_box: Box) -> tuple[float, float] | None:
    dx = to_box.cx - from_box.cx
    dy = to_box.cy - from_box.cy
    norm = math.hypot(dx, dy)
    if norm == 0.0:
        return None
    return (dx / norm, dy / norm)


@dataclass
class TrackHypothesis:
    """One live track: filter state plus observation bookkeeping."""

    track_id: int
    state: KalmanTrackState
    last_observation: Box
    last_observation_frame: int
    prev_observation: Box | None = None
    hits: int = 1
    time_since_update: int = 0
    observations: list = field(default_factory=list)  # (frame, Box, score)
    frozen: KalmanTrackState | None = None
    predicted_box: Box | None = None

    def velocity_direction(self) -> tuple[float, float] | None:
        if self.prev_observation is None:
            return None
        return _direction(self.prev_observation, self.last_observation)


def _direction_inconsistency(track: TrackHypothesis, det_box: Box) -> float:
    """Angle, as a fraction of pi, between the track's observed velocity
    and the step from its last observation to the detection. Zero when the
    track has no velocity estimate yet."""
    vel = track.velocity_direction()
    if vel is None:
        return 0.0
    step = _direction(track.last_observation, det_box)
    if step is None:
        return 0.0
    cos = min(1.0, max(-1.0, vel[0] * step[0] + vel[1] * step[1]))
    return math.acos(cos) / math.pi


def associate(
    tracks: list[TrackHypothesis],
    detections: list[Box],
    iou_threshold: float = 0.3,
    direction_weight: float = 0.2,
) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Match predicted tracks against detections.

    Cost is -IoU(predicted box, detection) plus direction_weight times the
    direction inconsistency; matched pairs whose IoU falls below
    iou_threshold are discarded back to the unmatched pools.
    """
    if not tracks or not detections:
        return [], list(range(len(tracks))), list(range(len(detections)))
    n, m = len(tracks), len(detections)
    iou_mat = np.zeros((n, m))
    cost = np.zeros((n, m))
    for i, trk in enumerate(tracks):
        pred = trk.predicted_box if trk.predicted_box is not None else state_box(trk.state)
        for j, det in enumerate(detections):
            iou_mat[i, j] = iou(pred, det)
            cost[i, j] = -iou_mat[i, j] + direction_weight * _direction_inconsistency(trk, det)
    matches = []
    matched_t, matched_d = set(), set()
    for r, c in assignment(cost):
        if iou_mat[r, c] < iou_threshold:
            continue
        matches.append((r, c))
        matched_t.add(r)
        matched_d.add(c)
    unmatched_tracks = [i for i in range(n) if i not in matched_t]
    unmatched_dets = [j for j in range(m) if j not in matched_d]
    return matches, unmatched_tracks, unmatched_dets


@dataclass(frozen=True)
class RawTrack:
    """Tracker output: the frames where a track was actually observed."""

    video_id: str
    track_id: int
    observations: tuple  # of (frame_index, Box, score)


class BoxTracker:
    """Stateful per-video tracker. Feed frames in order via :meth:`step`,
    or hand a whole video to :meth:`run`."""

    def __init__(self, params: TrackerParams | None = None):
        self.params = params or TrackerParams()
        if self.params.max_age < 1 or self.params.min_hits < 1:
            raise ValidationError("max_age and min_hits must be >= 1")
        self.tracks: list[TrackHypothesis] = []
        self._retired: list[TrackHypothesis] = []
        self._next_id = 1
        self._last_frame = 0

    def step(self, frame_index: int, detections) -> dict[int, Box]:
        """Advance to frame_index with its detections.

        detections is a sequence of (Box, score) pairs (or objects with
        .box and .score). Returns {track_id: box} for tracks confirmed at
        this frame.
        """
        if frame_index <= self._last_frame:
            raise OrderingError(
                f"frame {frame_index} after frame {self._last_frame}"
            )
        self._last_frame = frame_index
        dets = []
        for d in detections:
            if isinstance(d, tuple):
                box, score = d
            else:
                box, score = d.box, d.score
            dets.append((box, float(score)))

        for trk in self.tracks:
            trk.state = kf_predict(trk.state)
            trk.predicted_box = state_box(trk.state)
            trk.time_since_update += 1

        det_boxes = [b for b, _ in dets]
        matches, _, unmatched_dets = associate(
            self.tracks,
            det_boxes,
            iou_threshold=self.params.iou_threshold,
            direction_weight=self.params.direction_weight,
        )

        for ti, dj in matches:
            self._observe(self.tracks[ti], frame_index, dets[dj][0], dets[dj][1])

        for dj in unmatched_dets:
            box, score = dets[dj]
            trk = TrackHypothesis(
                track_id=self._next_id,
                state=state_from_box(box),
                last_observation=box,
                last_observation_frame=frame_index,
                observations=[(frame_index, box, score)],
            )
            trk.frozen = trk.state.copy()
            self._next_id += 1
            self.tracks.append(trk)

        survivors = []
        for trk in self.tracks:
            if trk.time_since_update > self.params.max_age:
                self._retired.append(trk)
            else:
                survivors.append(trk)
        self.tracks = survivors

        return {
            trk.track_id: trk.last_observation
            for trk in self.tracks
            if trk.time_since_update == 0 and trk.hits >= self.params.min_hits
        }

    def _observe(self, trk: TrackHypothesis, frame: int, box: Box, score: float):
        gap = trk.time_since_update
        if gap > 1 and trk.frozen is not None:
            # Re-acquired after missing frames: rewind to the state at the
            # last real observation and replay virtual observations linearly
            # interpolated toward the new one (the last replayed step uses
            # the real detection).
            state = trk.frozen.copy()
            prev = trk.last_observation
            for k in range(1, gap + 1):
                t = k / gap
                virtual = Box(
                    prev.cx + t * (box.cx - prev.cx),
                    prev.cy + t * (box.cy - prev.cy),
                    prev.w + t * (box.w - prev.w),
                    prev.h + t * (box.h - prev.h),
                )
                state = kf_update(kf_predict(state), virtual)
            trk.state = state
        else:
            trk.state = kf_update(trk.state, box)
        trk.prev_observation = trk.last_observation
        trk.last_observation = box
        trk.last_observation_frame = frame
        trk.hits += 1
        trk.time_since_update = 0
        trk.frozen = trk.state.copy()
        trk.predicted_box = None
        trk.observations.append((frame, box, score))

    def run(self, frames: list[FrameDetections]) -> list[RawTrack]:
        """Track a whole video and return every raw track ever spawned."""
        if not frames:
            raise EmptyVideoError("no frames to track")
        video_ids = {f.video_id for f in frames}
        if len(video_ids) != 1:
            raise ValidationError(f"frames span multiple videos: {sorted(video_ids)}")
        frames = sorted(frames, key=lambda f: f.frame_index)
        for fd in frames:
            self.step(fd.frame_index, [(d.box, d.score) for d in fd.entries])
        video_id = frames[0].video_id
        out = [
            RawTrack(video_id, t.track_id, tuple(t.observations))
            for t in (self._retired + self.tracks)
        ]
        out.sort(key=lambda t: t.track_id)
        return out
