"""Scoring-time evaluation: ROC/AUC, false-alarm rates, score timelines.

Units are either segments (default; labels from the instance-truth sidecar
or from annotations) or frames (scores expanded piecewise-constant over
segment windows, labels from frame annotations). ROC pools units across all
test videos. The alarm rule at a threshold is >=, so a score exactly at the
threshold counts as an alarm.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (
    LABEL_ABNORMAL,
    TRUTH_FILENAME,
    DatasetManifest,
    VideoEntry,
    aggregate_clips_to_segments,
    read_features,
    read_truth,
    segment_bounds,
)
from .scorer import ScorerParams, score_matrix

LEVEL_SEGMENT = "segment"
LEVEL_FRAME = "frame"


@dataclass
class ScoreTimeline:
    video_id: str
    segment_scores: np.ndarray
    segment_truth: np.ndarray
    frame_scores: np.ndarray | None = None


@dataclass
class EvalReport:
    roc_points: list[tuple[float, float]]
    auc: float
    far_normal_pct: float
    far_abnormal_pct: float
    miss_abnormal_pct: float
    timelines: list[ScoreTimeline]
    level: str
    threshold: float

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "threshold": self.threshold,
            "auc": self.auc,
            "far_normal_pct": self.far_normal_pct,
            "far_abnormal_pct": self.far_abnormal_pct,
            "miss_abnormal_pct": self.miss_abnormal_pct,
            "roc_points": [[fpr, tpr] for fpr, tpr in self.roc_points],
            "timelines": [
                {
                    "video_id": t.video_id,
                    "scores": [float(s) for s in t.segment_scores],
                    "truth": [int(v) for v in t.segment_truth],
                }
                for t in self.timelines
            ],
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load_json(cls, path) -> "EvalReport":
        doc = json.loads(Path(path).read_text())
        timelines = [
            ScoreTimeline(
                t["video_id"],
                np.array(t["scores"], dtype=np.float64),
                np.array(t["truth"], dtype=np.int64),
            )
            for t in doc["timelines"]
        ]
        return cls(
            roc_points=[(float(f), float(t)) for f, t in doc["roc_points"]],
            auc=float(doc["auc"]),
            far_normal_pct=float(doc["far_normal_pct"]),
            far_abnormal_pct=float(doc["far_abnormal_pct"]),
            miss_abnormal_pct=float(doc["miss_abnormal_pct"]),
            timelines=timelines,
            level=doc["level"],
            threshold=float(doc["threshold"]),
        )

    def write_roc_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fpr", "tpr"])
            for fpr, tpr in self.roc_points:
                writer.writerow([repr(fpr), repr(tpr)])

    def write_timelines_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["video_id", "segment_index", "score", "truth"])
            for t in self.timelines:
                for i, (score, truth) in enumerate(zip(t.segment_scores, t.segment_truth)):
                    writer.writerow([t.video_id, i, repr(float(score)), int(truth)])


def expand_segments_to_frames(scores: np.ndarray, n_frames: int) -> np.ndarray:
    """Piecewise-constant expansion: frame f takes segment floor(f*n/F)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] < 1:
        raise ValueError("need a nonempty 1-d score vector")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    idx = np.arange(n_frames) * scores.shape[0] // n_frames
    return scores[idx]


def _check_units(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d and the same length")
    if not np.isfinite(scores).all():
        raise ValueError("non-finite scores")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """ROC points swept over the distinct score values, descending.

    Tied scores fall at a single threshold. The curve always starts at
    (0, 0) and ends at (1, 1).
    """
    scores, labels = _check_units(scores, labels)
    n_pos = int(labels.sum())
    n_neg = int(labels.shape[0] - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # last index of each run of equal scores = one threshold per distinct value
    group_ends = np.flatnonzero(np.append(sorted_scores[1:] != sorted_scores[:-1], True))
    cum_tp = np.cumsum(sorted_labels)[group_ends]
    cum_fp = group_ends + 1 - cum_tp
    points = [(0.0, 0.0)]
    points.extend((float(fp) / n_neg, float(tp) / n_pos) for fp, tp in zip(cum_fp, cum_tp))
    return points


def auc(roc_points) -> float:
    """Trapezoidal area under an ROC curve."""
    total = 0.0
    for (x0, y0), (x1, y1) in zip(roc_points[:-1], roc_points[1:]):
        total += 0.5 * (y0 + y1) * (x1 - x0)
    return total


def false_alarm_rate(scores, labels, threshold: float = 0.5) -> float:
    """Percentage of truly-normal units scored at or above the threshold.

    The caller chooses which videos' units are passed in; evaluate() uses
    this once over normal videos and once over abnormal videos.
    """
    scores, labels = _check_units(scores, labels)
    normal = labels == 0
    if not normal.any():
        raise ValueError("no normal-labeled units to rate")
    return 100.0 * float((scores[normal] >= threshold).mean())


def miss_rate(scores, labels, threshold: float = 0.5) -> float:
    """Percentage of truly-anomalous units scored below the threshold."""
    scores, labels = _check_units(scores, labels)
    anomalous = labels == 1
    if not anomalous.any():
        raise ValueError("no anomalous-labeled units to rate")
    return 100.0 * float((scores[anomalous] < threshold).mean())


def _segment_labels_from_annotations(video: VideoEntry, n_segments: int) -> np.ndarray:
    """A segment is anomalous iff its frame window overlaps an annotation."""
    labels = np.zeros(n_segments, dtype=np.int64)
    if not video.annotations:
        return labels
    for i, (lo, hi) in enumerate(segment_bounds(video.n_frames, n_segments)):
        hi = max(hi, lo + 1)  # zero-width windows still cover their start frame
        for start, end in video.annotations:
            if start < hi and end >= lo:
                labels[i] = 1
                break
    return labels


def _frame_labels(video: VideoEntry) -> np.ndarray:
    labels = np.zeros(video.n_frames, dtype=np.int64)
    for start, end in video.annotations or []:
        labels[start : end + 1] = 1
    return labels


def _n_threads() -> int:
    raw = os.environ.get("MILRANK_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"MILRANK_THREADS must be an integer, got {raw!r}") from None
    return max(1, value)


def evaluate(
    params: ScorerParams,
    manifest: DatasetManifest,
    *,
    split: str = "test",
    level: str = LEVEL_SEGMENT,
    threshold: float = 0.5,
    n_segments: int = 32,
    truth: dict[str, np.ndarray] | str | None = "auto",
) -> EvalReport:
    """Scores a manifest split in eval mode and assembles the full report.

    Segment truth comes from the truth sidecar when available ("auto" looks
    for truth.csv next to the manifest), otherwise from frame annotations.
    """
    if level not in (LEVEL_SEGMENT, LEVEL_FRAME):
        raise ValueError(f"level must be segment or frame, got {level!r}")
    videos = manifest.split_videos(split)
    if not videos:
        raise ValueError(f"no videos in split {split!r}")
    present = {v.label for v in videos}
    if len(present) < 2:
        raise ValueError(
            f"split {split!r} has a single class ({present.pop()}); ROC needs both"
        )

    if truth == "auto":
        truth_path = (manifest.root or Path(".")) / TRUTH_FILENAME
        truth = read_truth(truth_path) if truth_path.exists() else None
    elif isinstance(truth, (str, Path)):
        truth = read_truth(truth)

    def score_video(video: VideoEntry) -> np.ndarray:
        features = read_features(manifest.feature_file(video))
        segments = aggregate_clips_to_segments(features, n_segments)
        return score_matrix(params, segments)

    threads = _n_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            all_scores = list(pool.map(score_video, videos))
    else:
        all_scores = [score_video(v) for v in videos]

    timelines: list[ScoreTimeline] = []
    unit_scores: list[np.ndarray] = []
    unit_labels: list[np.ndarray] = []
    unit_from_abnormal: list[np.ndarray] = []
    for video, seg_scores in zip(videos, all_scores):
        if truth is not None:
            if video.id not in truth:
                raise ValueError(f"video {video.id} missing from the truth sidecar")
            seg_truth = truth[video.id]
            if seg_truth.shape[0] != n_segments:
                raise ValueError(
                    f"video {video.id}: truth has {seg_truth.shape[0]} segments, expected {n_segments}"
                )
        else:
            if video.label == LABEL_ABNORMAL and not video.annotations:
                raise ValueError(
                    f"video {video.id} is abnormal but has neither truth rows nor annotations"
                )
            seg_truth = _segment_labels_from_annotations(video, n_segments)

        timeline = ScoreTimeline(video.id, seg_scores, seg_truth)
        if level == LEVEL_FRAME:
            timeline.frame_scores = expand_segments_to_frames(seg_scores, video.n_frames)
            scores_u = timeline.frame_scores
            labels_u = _frame_labels(video)
            if video.label == LABEL_ABNORMAL and not video.annotations:
                raise ValueError(f"video {video.id}: frame-level labels need annotations")
        else:
            scores_u = seg_scores
            labels_u = seg_truth
        timelines.append(timeline)
        unit_scores.append(scores_u)
        unit_labels.append(labels_u)
        unit_from_abnormal.append(
            np.full(scores_u.shape[0], video.label == LABEL_ABNORMAL, dtype=bool)
        )

    scores = np.concatenate(unit_scores)
    labels = np.concatenate(unit_labels)
    from_abnormal = np.concatenate(unit_from_abnormal)

    points = roc_curve(scores, labels)
    report = EvalReport(
        roc_points=points,
        auc=auc(points),
        far_normal_pct=false_alarm_rate(scores[~from_abnormal], labels[~from_abnormal], threshold),
        far_abnormal_pct=false_alarm_rate(scores[from_abnormal], labels[from_abnormal], threshold),
        miss_abnormal_pct=miss_rate(scores[from_abnormal], labels[from_abnormal], threshold),
        timelines=timelines,
        level=level,
        threshold=threshold,
    )
    return report
