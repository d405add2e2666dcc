"""Box-prompted segmentation backends.

The mock backend rasterizes the prompt box itself (pixel centers inside
the clamped box), which makes end-to-end runs deterministic and lets the
metrics stack be exercised without a model server. The remote backend
POSTs prompt requests to a segmentation service and decodes the RLE
response; transient failures are retried with exponential backoff.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import requests

from .errors import (
    DegenerateBoxError,
    LengthError,
    ProtocolError,
    RetryableError,
    ServiceError,
    ValidationError,
)
from .geometry import Box, clamp_to_frame
from .io import SCHEMA_VERSION, MaskRaster, rle_decode

logger = logging.getLogger(__name__)

__all__ = [
    "SegmentRequest",
    "rasterize_box",
    "mock_segment",
    "remote_segment",
    "segment_boxes",
    "RemoteConfig",
]

ENDPOINT_ENV = "TENET_ENDPOINT"
TIMEOUT_ENV = "TENET_TIMEOUT"
SEGMENT_PATH = "/segment"


@dataclass(frozen=True)
class SegmentRequest:
    """One box prompt against one frame."""

    video_id: str
    frame_index: int
    box: Box
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"bad frame size {self.width}x{self.height}")
        if self.frame_index < 1:
            raise ValidationError(f"bad frame index {self.frame_index}")


def rasterize_box(box: Box, width: int, height: int) -> MaskRaster:
    """Pixels whose centers fall inside the box, clamped to the frame.

    A box that clamps away to nothing yields an empty mask (with a
    warning) rather than an error: segmentation of an off-frame prompt is
    a legitimate no-op.
    """
    try:
        box = clamp_to_frame(box, width, height)
    except DegenerateBoxError:
        logger.warning(
            "box %s degenerate in %dx%d frame, emitting empty mask",
            box.to_list(),
            width,
            height,
        )
        return MaskRaster(width, height, np.zeros((height, width), dtype=bool))
    x0, y0, x1, y1 = box.corners()
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    cols = (xs >= x0) & (xs < x1)
    rows = (ys >= y0) & (ys < y1)
    return MaskRaster(width, height, np.outer(rows, cols))


def mock_segment(request: SegmentRequest) -> MaskRaster:
    """Deterministic stand-in segmenter: the box itself, rasterized."""
    return rasterize_box(request.box, request.width, request.height)


@dataclass(frozen=True)
class RemoteConfig:
    """Connection settings for the segmentation service.

    endpoint/timeout default from the TENET_ENDPOINT and TENET_TIMEOUT
    environment variables.
    """

    endpoint: str | None = None
    timeout: float | None = None
    retries: int = 3
    backoff: float = 0.5

    def resolved_endpoint(self) -> str:
        endpoint = self.endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise ValidationError(
                f"no segmentation endpoint configured (set {ENDPOINT_ENV})"
            )
        return endpoint.rstrip("/")

    def resolved_timeout(self) -> float:
        if self.timeout is not None:
            return self.timeout
        raw = os.environ.get(TIMEOUT_ENV)
        if raw is None:
            return 10.0
        try:
            return float(raw)
        except ValueError as e:
            raise ValidationError(f"bad {TIMEOUT_ENV} value {raw!r}") from e


def remote_segment(
    request: SegmentRequest,
    config: RemoteConfig | None = None,
    session: requests.Session | None = None,
) -> MaskRaster:
    """POST one box prompt to the service and decode the mask response.

    Timeouts and connection failures are retried up to config.retries
    times with exponential backoff; a still-failing request raises
    RetryableError. Non-2xx responses raise ServiceError with the status
    code and malformed response bodies raise ProtocolError.
    """
    config = config or RemoteConfig()
    url = config.resolved_endpoint() + SEGMENT_PATH
    timeout = config.resolved_timeout()
    payload = {
        "schema": SCHEMA_VERSION,
        "video": request.video_id,
        "frame": request.frame_index,
        "box": [request.box.cx, request.box.cy, request.box.w, request.box.h],
        "width": request.width,
        "height": request.height,
    }
    post = (session or requests).post
    last: Exception | None = None
    for attempt in range(config.retries + 1):
        if attempt:
            time.sleep(config.backoff * 2 ** (attempt - 1))
        try:
            response = post(url, json=payload, timeout=timeout)
        except (requests.Timeout, requests.ConnectionError) as e:
            last = e
            logger.warning("segment request attempt %d failed: %s", attempt + 1, e)
            continue
        if response.status_code != 200:
            raise ServiceError(
                f"segmentation service returned {response.status_code}",
                status=response.status_code,
            )
        try:
            body = response.json()
        except (json.JSONDecodeError, ValueError) as e:
            raise ProtocolError(f"response is not JSON: {e}") from e
        try:
            return rle_decode(body["rle"], int(body["width"]), int(body["height"]))
        except (KeyError, TypeError, ValueError, LengthError, ValidationError) as e:
            raise ProtocolError(f"malformed mask response: {e}") from e
    raise RetryableError(
        f"segmentation request failed after {config.retries + 1} attempts: {last}"
    )


def segment_boxes(
    requests_list: list[SegmentRequest],
    backend: str = "mock",
    config: RemoteConfig | None = None,
    jobs: int = 1,
) -> list[MaskRaster]:
    """Segment many prompts, preserving input order.

    backend is "mock" or "remote". jobs > 1 fans remote requests out over
    a bounded thread pool; results are reassembled in request order so the
    output is deterministic either way.
    """
    if backend == "mock":
        return [mock_segment(r) for r in requests_list]
    if backend != "remote":
        raise ValidationError(f"unknown segmentation backend {backend!r}")
    config = config or RemoteConfig()
    if jobs <= 1 or len(requests_list) <= 1:
        return [remote_segment(r, config) for r in requests_list]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda r: remote_segment(r, config), requests_list))
