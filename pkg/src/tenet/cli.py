"""Command-line pipeline driver.

Subcommands mirror the pipeline stages::

    tenet synth    scene config -> dataset record files
    tenet track    detections   -> raw tracks
    tenet prompts  detections   -> reference + candidate prompts
    tenet train    prompts + features + gt -> preference checkpoint
    tenet select   prompts + features (+ checkpoint) -> selection
    tenet segment  selection -> predicted masks
    tenet eval     masks + boxes -> metric report

Configuration layers, weakest first: built-in defaults, --config file,
command-line flags, environment (TENET_ENDPOINT, TENET_TIMEOUT). Each
stage writes the effective config next to its outputs. One run seed feeds
per-stage substreams, and reruns with identical inputs and seed produce
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io as record_io
from . import metrics, preference, prompts, segment, synth
from .errors import TenetError, UsageError
from .geometry import BoxSequence, box_miou
from .tracking import BoxTracker, TrackerParams

logger = logging.getLogger(__name__)

ENV_OVERRIDES = {
    segment.ENDPOINT_ENV: ("endpoint", str),
    segment.TIMEOUT_ENV: ("timeout", float),
}


@dataclasses.dataclass
class PipelineConfig:
    """Every tunable of the pipeline in one flat record."""

    data_dir: str = "."
    out_dir: str = "."
    seed: int = 0
    jobs: int = 1
    # prompt construction
    k: int = 5
    coverage_min: float = 0.3
    # tracker
    iou_threshold: float = 0.3
    max_age: int = 30
    min_hits: int = 1
    direction_weight: float = 0.2
    # preference model
    d_in: int = 16
    d_model: int = 64
    n_heads: int = 4
    n_frames: int = 8
    learning_rate: float = 1e-4
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # selection / segmentation
    checkpoint: str | None = None
    segmenter: str = "mock"
    endpoint: str | None = None
    timeout: float | None = None
    retries: int = 3
    # metrics
    tolerance_radius: int | None = None

    def tracker_params(self) -> TrackerParams:
        return TrackerParams(
            iou_threshold=self.iou_threshold,
            max_age=self.max_age,
            min_hits=self.min_hits,
            direction_weight=self.direction_weight,
        )

    def classifier(self) -> preference.PreferenceClassifier:
        return preference.PreferenceClassifier(
            d_in=self.d_in,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_frames=self.n_frames,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            seed=stage_seed(self.seed, "train"),
        )


def stage_seed(seed: int, stage: str) -> int:
    """Deterministic per-stage substream of the run seed."""
    mix = np.random.SeedSequence([seed, zlib.crc32(stage.encode("utf-8"))])
    return int(mix.generate_state(1)[0])


def load_config(path: str | None, overrides: dict) -> PipelineConfig:
    """defaults < config file < flags < environment."""
    values: dict = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as e:
                raise UsageError(f"config file {path}: invalid JSON ({e.msg})") from e
        if not isinstance(data, dict):
            raise UsageError(f"config file {path}: expected an object")
        known = {f.name for f in dataclasses.fields(PipelineConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(f"config file {path}: unknown keys {unknown}")
        values.update(data)
    values.update({k: v for k, v in overrides.items() if v is not None})
    for env_name, (field_name, cast) in ENV_OVERRIDES.items():
        raw = os.environ.get(env_name)
        if raw is not None:
            try:
                values[field_name] = cast(raw)
            except ValueError as e:
                raise UsageError(f"bad {env_name} value {raw!r}") from e
    try:
        return PipelineConfig(**values)
    except TypeError as e:
        raise UsageError(f"bad configuration: {e}") from e


def write_effective_config(config: PipelineConfig, stage: str) -> None:
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"schema": record_io.SCHEMA_VERSION, "stage": stage}
    payload.update(dataclasses.asdict(config))
    with open(out_dir / f"{stage}_config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# shared data loading


def _split_sources(detections):
    pretrained: dict[str, list] = {}
    finetuned: dict[str, list] = {}
    for fd in detections:
        if fd.source == "pretrained":
            pretrained.setdefault(fd.video_id, []).append(fd)
        elif fd.source == "finetuned":
            finetuned.setdefault(fd.video_id, []).append(fd)
        else:
            raise UsageError(f"unexpected detection source {fd.source!r}")
    return pretrained, finetuned


def _video_lengths(detections) -> dict[str, int]:
    lengths: dict[str, int] = {}
    for fd in detections:
        lengths[fd.video_id] = max(lengths.get(fd.video_id, 0), fd.frame_index)
    return lengths


def _load_prompts(path) -> tuple[dict, dict]:
    references, candidates = {}, {}
    for rec in record_io.parse_tracks(path):
        if rec.kind == "reference":
            references[rec.video_id] = prompts.record_to_reference(rec)
        elif rec.kind == "candidate_track":
            candidates.setdefault(rec.video_id, []).append(prompts.record_to_candidate(rec))
    for cands in candidates.values():
        cands.sort(key=lambda c: c.prompt_id)
    return references, candidates


def _load_gt(path) -> dict[str, BoxSequence]:
    gt = {}
    for rec in record_io.parse_tracks(path):
        if rec.kind == "gt":
            gt[rec.video_id] = BoxSequence.from_pairs(
                rec.video_id, [(tf.frame, tf.box) for tf in rec.frames]
            )
    return gt


def _load_masks(path) -> dict[str, dict[int, record_io.MaskRaster]]:
    masks: dict[str, dict[int, record_io.MaskRaster]] = {}
    for rec in record_io.parse_masks(path):
        masks.setdefault(rec.video_id, {})[rec.frame_index] = rec.raster
    return masks


def _prompt_boxes(selection, reference, candidates) -> BoxSequence:
    if selection is None:
        return reference.boxes
    for cand in candidates:
        if cand.prompt_id == selection:
            return cand.boxes
    raise UsageError(f"selected prompt {selection} not among candidates")


# ---------------------------------------------------------------------------
# stages


def cmd_synth(config: PipelineConfig, spec_path: str) -> None:
    with open(spec_path, "r", encoding="utf-8") as fh:
        try:
            scene_cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise UsageError(f"scene config {spec_path}: invalid JSON ({e.msg})") from e
    if "videos" in scene_cfg:
        specs = [synth.scene_spec_from_dict(d) for d in scene_cfg["videos"]]
    elif "suite" in scene_cfg:
        suite = dict(scene_cfg["suite"])
        noise = synth.NoiseSpec(**suite["noise"]) if "noise" in suite else None
        specs = synth.make_suite(
            n_videos=int(suite["n_videos"]),
            seed=int(suite.get("seed", stage_seed(config.seed, "synth"))),
            width=int(suite.get("width", 128)),
            height=int(suite.get("height", 96)),
            noise=noise,
            d_in=int(suite.get("d_in", config.d_in)),
        )
    else:
        raise UsageError("scene config needs a 'videos' list or a 'suite' block")

    def build(spec):
        return synth.generate(
            spec,
            k=config.k,
            coverage_min=config.coverage_min,
            tracker_params=config.tracker_params(),
        )

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            scenes = list(pool.map(build, specs))
    else:
        scenes = [build(spec) for spec in specs]

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    detections, features, gt_tracks, gt_masks = [], [], [], []
    for scene in scenes:
        detections.extend(scene.pretrained)
        detections.extend(scene.finetuned)
        features.extend(scene.features)
        gt_tracks.append(
            record_io.TrackRecord(
                scene.spec.video_id,
                0,
                "gt",
                tuple(
                    record_io.TrackFrame(t, box)
                    for t, box in zip(scene.gt_boxes.frames, scene.gt_boxes.boxes)
                ),
            )
        )
        for t in scene.gt_boxes.frames:
            gt_masks.append(
                record_io.MaskRecord(scene.spec.video_id, t, scene.gt_mask(t))
            )
    record_io.write_detections(out / "detections.jsonl", detections)
    record_io.write_features(out / "features.jsonl", features)
    record_io.write_tracks(out / "gt_tracks.jsonl", gt_tracks)
    record_io.write_masks(out / "gt_masks.jsonl", gt_masks)
    write_effective_config(config, "synth")
    logger.info("synthesized %d videos into %s", len(scenes), out)


def cmd_track(config: PipelineConfig) -> None:
    detections = record_io.parse_detections(Path(config.data_dir) / "detections.jsonl")
    pretrained, finetuned = _split_sources(detections)
    lengths = _video_lengths(detections)
    records = []
    for video_id in sorted(lengths):
        merged = prompts.assemble_tracker_input(
            pretrained.get(video_id, []),
            finetuned.get(video_id, []),
            config.k,
            n_frames=lengths[video_id],
        )
        for trk in BoxTracker(config.tracker_params()).run(merged):
            records.append(prompts.raw_track_to_record(trk))
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record_io.write_tracks(out / "raw_tracks.jsonl", records)
    write_effective_config(config, "track")
    logger.info("tracked %d videos -> %d raw tracks", len(lengths), len(records))


def cmd_prompts(config: PipelineConfig) -> None:
    detections = record_io.parse_detections(Path(config.data_dir) / "detections.jsonl")
    pretrained, finetuned = _split_sources(detections)
    lengths = _video_lengths(detections)
    records = []
    for video_id in sorted(lengths):
        reference = prompts.build_reference(
            finetuned.get(video_id, []), n_frames=lengths[video_id]
        )
        merged = prompts.assemble_tracker_input(
            pretrained.get(video_id, []),
            finetuned.get(video_id, []),
            config.k,
            n_frames=lengths[video_id],
        )
        raw = BoxTracker(config.tracker_params()).run(merged)
        candidates = prompts.build_candidates(raw, reference, config.coverage_min)
        records.append(prompts.reference_to_record(reference))
        records.extend(prompts.candidate_to_record(c) for c in candidates)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record_io.write_tracks(out / "prompts.jsonl", records)
    write_effective_config(config, "prompts")
    logger.info("built prompts for %d videos", len(lengths))


def cmd_train(config: PipelineConfig) -> None:
    data = Path(config.data_dir)
    references, candidates = _load_prompts(data / "prompts.jsonl")
    gt = _load_gt(data / "gt_tracks.jsonl")
    feature_records = record_io.parse_features(data / "features.jsonl")
    by_video = preference.samples_from_features(feature_records, config.n_frames)

    samples, labels, groups = [], [], []
    for video_id in sorted(references):
        if video_id not in gt or not candidates.get(video_id):
            continue
        video_labels = preference.make_labels(
            candidates[video_id], references[video_id], gt[video_id]
        )
        label_by_id = {
            c.prompt_id: int(l) for c, l in zip(candidates[video_id], video_labels)
        }
        for sample in by_video.get(video_id, []):
            if sample.prompt_id not in label_by_id:
                raise UsageError(
                    f"feature prompt {sample.prompt_id} of video {video_id!r} has no "
                    "matching candidate"
                )
            samples.append(sample)
            labels.append(label_by_id[sample.prompt_id])
            groups.append(video_id)

    model = config.classifier()
    model.fit(samples, labels, groups=groups)

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    preference.save_checkpoint(out / "checkpoint.jsonl", model)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for row in model.history_:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")

    report = preference.grad_check(model, samples[0], label=labels[0])
    logger.info(
        "trained on %d samples (%d videos); final loss %.4f; gradient check %.2e",
        len(samples),
        len(set(groups)),
        model.history_[-1]["loss"],
        report.max_rel_error,
    )
    if report.max_rel_error >= 1e-4:
        logger.warning("gradient check above threshold: %.3e", report.max_rel_error)
    write_effective_config(config, "train")


def cmd_select(config: PipelineConfig, oracle: bool = False) -> None:
    data = Path(config.data_dir)
    references, candidates = _load_prompts(data / "prompts.jsonl")
    rows = []
    mode = "reference"
    model = None
    by_video: dict[str, list[preference.PreferenceSample]] = {}
    if oracle:
        gt = _load_gt(data / "gt_tracks.jsonl")
        mode = "oracle"
    elif config.checkpoint:
        model = preference.load_checkpoint(config.checkpoint)
        feature_records = record_io.parse_features(data / "features.jsonl")
        by_video = preference.samples_from_features(feature_records, model.n_frames)
        mode = "model"

    for video_id in sorted(references):
        cands = candidates.get(video_id, [])
        selected = None
        probabilities: dict[int, float] = {}
        if oracle:
            best, _ = prompts.oracle_best(cands, references[video_id], gt[video_id])
            selected = best.prompt_id if isinstance(best, prompts.CandidateTrack) else None
        elif model is not None and cands and by_video.get(video_id):
            choice = preference.select(model, by_video[video_id])
            selected = choice.prompt_id
            probabilities = choice.probabilities
        rows.append(
            {
                "schema": record_io.SCHEMA_VERSION,
                "video": video_id,
                "mode": mode,
                "selected": selected,
                "probabilities": {str(k): v for k, v in sorted(probabilities.items())},
            }
        )
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "selection.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    write_effective_config(config, "select")
    logger.info("selected prompts for %d videos (%s mode)", len(rows), mode)


def cmd_segment(config: PipelineConfig) -> None:
    data = Path(config.data_dir)
    references, candidates = _load_prompts(data / "prompts.jsonl")
    gt_masks = _load_masks(data / "gt_masks.jsonl")
    selections = {}
    with open(data / "selection.jsonl", "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                row = json.loads(line)
                selections[row["video"]] = row.get("selected")

    remote_cfg = segment.RemoteConfig(
        endpoint=config.endpoint, timeout=config.timeout, retries=config.retries
    )
    records = []
    for video_id in sorted(references):
        frames = gt_masks.get(video_id)
        if not frames:
            raise UsageError(f"no ground-truth masks for video {video_id!r} to size frames")
        sample = next(iter(frames.values()))
        width, height = sample.width, sample.height
        boxes = _prompt_boxes(
            selections.get(video_id), references[video_id], candidates.get(video_id, [])
        )
        reqs = [
            segment.SegmentRequest(video_id, t, box, width, height)
            for t, box in zip(boxes.frames, boxes.boxes)
        ]
        masks = segment.segment_boxes(
            reqs, backend=config.segmenter, config=remote_cfg, jobs=config.jobs
        )
        records.extend(
            record_io.MaskRecord(video_id, req.frame_index, mask)
            for req, mask in zip(reqs, masks)
        )
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record_io.write_masks(out / "pred_masks.jsonl", records)
    write_effective_config(config, "segment")
    logger.info("segmented %d videos", len(references))


def cmd_eval(config: PipelineConfig) -> None:
    data = Path(config.data_dir)
    pred_masks = _load_masks(data / "pred_masks.jsonl")
    gt_masks = _load_masks(data / "gt_masks.jsonl")
    gt = _load_gt(data / "gt_tracks.jsonl")
    references, candidates = _load_prompts(data / "prompts.jsonl")
    selections = {}
    selection_path = data / "selection.jsonl"
    if selection_path.exists():
        with open(selection_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    row = json.loads(line)
                    selections[row["video"]] = row.get("selected")

    pred_boxes = {
        v: _prompt_boxes(selections.get(v), references[v], candidates.get(v, []))
        for v in sorted(references)
    }
    report = metrics.evaluate(
        pred_masks,
        gt_masks,
        pred_boxes=pred_boxes,
        gt_boxes=gt,
        tolerance_radius=config.tolerance_radius,
    )

    comparison: dict[str, list[float]] = {
        "reference": [],
        "highest_confidence": [],
        "oracle_best": [],
        "selected": [],
        "merged_oracle": [],
    }
    for video_id in sorted(references):
        if video_id not in gt:
            continue
        ref = references[video_id]
        cands = candidates.get(video_id, [])
        gt_seq = gt[video_id]
        comparison["reference"].append(box_miou(ref.boxes, gt_seq))
        if cands:
            conf_cand, _ = prompts.oracle_conf(cands)
            comparison["highest_confidence"].append(box_miou(conf_cand.boxes, gt_seq))
        else:
            comparison["highest_confidence"].append(box_miou(ref.boxes, gt_seq))
        _, best = prompts.oracle_best(cands, ref, gt_seq)
        comparison["oracle_best"].append(best)
        comparison["selected"].append(box_miou(pred_boxes[video_id], gt_seq))
        _, merged = prompts.merge_tracks_oracle(cands, ref, gt_seq)
        comparison["merged_oracle"].append(merged)

    rows = {name: float(np.mean(vals)) for name, vals in comparison.items() if vals}
    payload = {
        "schema": record_io.SCHEMA_VERSION,
        "n_videos": report.n_videos,
        "n_frames": report.n_frames,
        "J_mean": report.j_mean,
        "F_mean": report.f_mean,
        "JF_mean": report.jf_mean,
        "box_miou_mean": report.box_miou_mean,
        "comparison_box_miou": rows,
        "per_video": {
            v: {
                "J": s.j,
                "F": s.f,
                "JF": s.jf,
                "box_miou": s.box_miou,
            }
            for v, s in sorted(report.per_video.items())
        },
    }
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_effective_config(config, "eval")

    print(f"videos: {report.n_videos}  frames: {report.n_frames}")
    print(f"J: {report.j_mean:.4f}  F: {report.f_mean:.4f}  J&F: {report.jf_mean:.4f}")
    if report.box_miou_mean is not None:
        print(f"box mIoU (selected prompt): {report.box_miou_mean:.4f}")
    for name in ("reference", "highest_confidence", "oracle_best", "selected", "merged_oracle"):
        if name in rows:
            print(f"  {name:<20} box mIoU {rows[name]:.4f}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tenet",
        description="Temporal prompt generation, selection, and evaluation.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--jobs", type=int, help="parallel workers where supported")
        p.add_argument("--out", dest="out_dir", help="output directory")
        p.add_argument("--data", dest="data_dir", help="input data directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    add_common(p)
    p.add_argument("--spec", required=True, help="scene config JSON")
    p.add_argument("--k", type=int, help="pretrained top-k budget")

    p = sub.add_parser("track", help="run the tracker over detections")
    add_common(p)
    p.add_argument("--k", type=int, help="pretrained top-k budget")

    p = sub.add_parser("prompts", help="build reference and candidate prompts")
    add_common(p)
    p.add_argument("--k", type=int, help="pretrained top-k budget")
    p.add_argument("--coverage-min", dest="coverage_min", type=float)

    p = sub.add_parser("train", help="train the preference model")
    add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)

    p = sub.add_parser("select", help="pick one prompt per video")
    add_common(p)
    p.add_argument("--checkpoint", help="trained preference checkpoint")
    p.add_argument("--oracle", action="store_true", help="use ground truth instead")

    p = sub.add_parser("segment", help="segment the selected prompts")
    add_common(p)
    p.add_argument("--segmenter", choices=["mock", "remote"])
    p.add_argument("--endpoint", help="segmentation service base URL")
    p.add_argument("--timeout", type=float, help="per-request timeout, seconds")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    add_common(p)
    p.add_argument("--tolerance-radius", dest="tolerance_radius", type=int)
    return parser


_CONFIG_KEYS = {f.name for f in dataclasses.fields(PipelineConfig)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {
        k: v for k, v in vars(args).items() if k in _CONFIG_KEYS and v is not None
    }
    try:
        config = load_config(args.config, overrides)
        if args.command == "synth":
            cmd_synth(config, args.spec)
        elif args.command == "track":
            cmd_track(config)
        elif args.command == "prompts":
            cmd_prompts(config)
        elif args.command == "train":
            cmd_train(config)
        elif args.command == "select":
            cmd_select(config, oracle=args.oracle)
        elif args.command == "segment":
            cmd_segment(config)
        elif args.command == "eval":
            cmd_eval(config)
        else:  # pragma: no cover - argparse enforces choices
            raise UsageError(f"unknown command {args.command!r}")
    except UsageError as e:
        _emit_error(args.command, e)
        return 2
    except OSError as e:
        _emit_error(args.command, e)
        return 2
    except TenetError as e:
        _emit_error(args.command, e)
        return 1
    return 0


def _emit_error(stage: str, error: Exception) -> None:
    record = {
        "error": {
            "stage": stage,
            "type": type(error).__name__,
            "message": str(error),
        }
    }
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
