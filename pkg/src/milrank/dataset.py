"""Data handling: feature files, manifests, bag assembly, synthetic data.

Feature files hold one row of precomputed features per 16-frame clip; videos
are reduced to a fixed number of segments by averaging the clip rows that
fall into each segment window and L2-normalizing the result. A synthetic
planted-anomaly generator produces datasets small enough to verify the whole
pipeline on a desk.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .binio import FormatError, Reader, f32_bytes, u32_bytes

FEATURE_MAGIC = b"MILF"
FEATURE_VERSION = 1

LABEL_NORMAL = "normal"
LABEL_ABNORMAL = "abnormal"
SPLIT_TRAIN = "train"
SPLIT_TEST = "test"

POSITIVE = "positive"
NEGATIVE = "negative"

TRUTH_FILENAME = "truth.csv"
MANIFEST_FILENAME = "manifest.json"
FRAMES_PER_CLIP = 16


@dataclass
class Bag:
    """One video as an ordered set of segment features sharing one label."""

    polarity: str
    instances: np.ndarray
    video_id: str = ""

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"polarity must be positive or negative, got {self.polarity!r}")
        self.instances = np.asarray(self.instances, dtype=np.float64)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise ValueError("bag needs a nonempty (n, d) instance matrix")

    @property
    def n(self) -> int:
        return self.instances.shape[0]

    @property
    def dim(self) -> int:
        return self.instances.shape[1]


@dataclass
class VideoEntry:
    id: str
    feature_path: str
    label: str
    split: str
    n_frames: int
    fps: float = 30.0
    annotations: list[tuple[int, int]] | None = None


@dataclass
class DatasetManifest:
    videos: list[VideoEntry]
    root: Path | None = None  # directory feature paths are relative to

    def validate(self) -> None:
        seen = set()
        for v in self.videos:
            if v.id in seen:
                raise ValueError(f"duplicate video id {v.id!r}")
            seen.add(v.id)
            if v.label not in (LABEL_NORMAL, LABEL_ABNORMAL):
                raise ValueError(f"video {v.id}: label must be normal or abnormal, got {v.label!r}")
            if v.split not in (SPLIT_TRAIN, SPLIT_TEST):
                raise ValueError(f"video {v.id}: split must be train or test, got {v.split!r}")
            if v.n_frames < 1:
                raise ValueError(f"video {v.id}: n_frames must be positive")
            if v.fps <= 0:
                raise ValueError(f"video {v.id}: fps must be positive")
            if v.annotations is not None:
                if v.label != LABEL_ABNORMAL:
                    raise ValueError(f"video {v.id}: annotations only allowed on abnormal videos")
                for start, end in v.annotations:
                    if not (0 <= start <= end < v.n_frames):
                        raise ValueError(
                            f"video {v.id}: annotation [{start}, {end}] outside [0, {v.n_frames})"
                        )

    def split_videos(self, split: str) -> list[VideoEntry]:
        return [v for v in self.videos if v.split == split]

    def feature_file(self, video: VideoEntry) -> Path:
        path = Path(video.feature_path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path


def save_manifest(path, manifest: DatasetManifest) -> None:
    manifest.validate()
    videos = []
    for v in manifest.videos:
        entry = {
            "id": v.id,
            "feature_path": v.feature_path,
            "label": v.label,
            "split": v.split,
            "n_frames": v.n_frames,
            "fps": v.fps,
        }
        if v.annotations is not None:
            entry["annotations"] = [[int(s), int(e)] for s, e in v.annotations]
        videos.append(entry)
    Path(path).write_text(json.dumps({"videos": videos}, indent=2) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ValueError(f"manifest {path}: invalid JSON ({err})") from err
    if not isinstance(doc, dict) or "videos" not in doc:
        raise ValueError(f"manifest {path}: missing 'videos' field")
    videos = []
    for i, entry in enumerate(doc["videos"]):
        try:
            annotations = entry.get("annotations")
            if annotations is not None:
                annotations = [(int(s), int(e)) for s, e in annotations]
            videos.append(
                VideoEntry(
                    id=str(entry["id"]),
                    feature_path=str(entry["feature_path"]),
                    label=str(entry["label"]),
                    split=str(entry["split"]),
                    n_frames=int(entry["n_frames"]),
                    fps=float(entry.get("fps", 30.0)),
                    annotations=annotations,
                )
            )
        except (KeyError, TypeError, ValueError) as err:
            raise ValueError(f"manifest {path}: videos[{i}] is malformed ({err})") from err
    manifest = DatasetManifest(videos, root=path.parent)
    manifest.validate()
    return manifest


# --- MILF feature file --------------------------------------------------------
#
# Little-endian layout: magic "MILF" | u32 version=1 | u32 T | u32 d |
# T*d f32 row-major (one row per 16-frame clip, temporal order).


def write_features(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 1 or matrix.shape[1] < 1:
        raise ValueError(f"feature matrix must be (T>=1, d>=1), got shape {matrix.shape}")
    if not np.isfinite(matrix).all():
        raise ValueError("feature matrix has non-finite entries")
    t, d = matrix.shape
    Path(path).write_bytes(
        FEATURE_MAGIC + u32_bytes(FEATURE_VERSION) + u32_bytes(t) + u32_bytes(d)
        + f32_bytes(matrix)
    )


def read_features(path) -> np.ndarray:
    reader = Reader(Path(path).read_bytes(), f"feature file {path}")
    reader.expect_magic(FEATURE_MAGIC)
    version = reader.u32()
    if version != FEATURE_VERSION:
        raise FormatError(f"feature file {path}: unsupported version {version} at offset 4")
    t = reader.u32()
    d = reader.u32()
    if t == 0 or d == 0:
        raise FormatError(f"feature file {path}: zero dimension (T={t}, d={d}) at offset 8")
    matrix = reader.f32_array(t * d).reshape(t, d)
    reader.expect_end()
    return matrix


def segment_bounds(total: int, n: int) -> list[tuple[int, int]]:
    """Index windows [floor(i*total/n), floor((i+1)*total/n)) per segment."""
    return [(i * total // n, (i + 1) * total // n) for i in range(n)]


def aggregate_clips_to_segments(matrix: np.ndarray, n: int) -> np.ndarray:
    """Reduces T clip rows to n segment features: mean over each segment's
    clip window, then L2 normalization (zero vectors stay zero).

    When T < n some windows are empty; those segments take the single row at
    the window's start index, so short videos still yield n instances.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise ValueError("feature matrix must be (T>=1, d)")
    if n < 1:
        raise ValueError("segment count must be >= 1")
    t = matrix.shape[0]
    segments = np.empty((n, matrix.shape[1]))
    for i, (lo, hi) in enumerate(segment_bounds(t, n)):
        seg = matrix[lo:hi].mean(axis=0) if hi > lo else matrix[lo].astype(np.float64)
        norm = np.sqrt(np.sum(seg * seg))
        segments[i] = seg / norm if norm > 0.0 else seg
    return segments


def assemble_bag(
    video: VideoEntry, features: np.ndarray, n_segments: int = 32,
    expected_dim: int | None = None,
) -> Bag:
    """Builds the MIL bag of one video from its clip feature matrix."""
    if expected_dim is not None and features.shape[1] != expected_dim:
        raise ValueError(
            f"video {video.id}: feature dim {features.shape[1]} != configured {expected_dim}"
        )
    instances = aggregate_clips_to_segments(features, n_segments)
    polarity = POSITIVE if video.label == LABEL_ABNORMAL else NEGATIVE
    return Bag(polarity, instances, video_id=video.id)


def load_bags(
    manifest: DatasetManifest, split: str, n_segments: int = 32,
    expected_dim: int | None = None,
) -> list[Bag]:
    videos = manifest.split_videos(split)
    return [
        assemble_bag(v, read_features(manifest.feature_file(v)), n_segments, expected_dim)
        for v in videos
    ]


# --- truth sidecar -------------------------------------------------------------


def write_truth(path, truth: dict[str, np.ndarray]) -> None:
    """CSV of instance-level labels; kept out of the manifest on purpose so
    training code has no path to it."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "segment_index", "is_anomalous"])
        for video_id, flags in truth.items():
            for i, flag in enumerate(flags):
                writer.writerow([video_id, i, int(flag)])


def read_truth(path) -> dict[str, np.ndarray]:
    rows: dict[str, list[tuple[int, int]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["video_id", "segment_index", "is_anomalous"]:
            raise ValueError(f"truth file {path}: unexpected header {reader.fieldnames}")
        for row in reader:
            rows.setdefault(row["video_id"], []).append(
                (int(row["segment_index"]), int(row["is_anomalous"]))
            )
    truth = {}
    for video_id, pairs in rows.items():
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError(f"truth file {path}: video {video_id} has gaps in segment indices")
        truth[video_id] = np.array([flag for _, flag in pairs], dtype=np.int64)
    return truth


# --- synthetic planted-anomaly generator ---------------------------------------


@dataclass
class SyntheticConfig:
    """Controls the planted-anomaly generator.

    Segments are unit-normalized Gaussian draws: normal segments around a
    base mean, anomalous segments around a mean shifted by ``separation``
    along a random unit direction. Each positive bag plants k anomalous
    segments with k uniform in [k_min, k_max], contiguous by default.
    ``noise_std`` scales the isotropic noise around both means.
    """

    dim: int = 32
    n_segments: int = 32
    train_per_class: int = 200
    test_per_class: int = 50
    separation: float = 2.0
    k_min: int = 3
    k_max: int = 8
    contiguous: bool = True
    noise_std: float = 0.5
    fps: float = 30.0
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 1 or self.n_segments < 1:
            raise ValueError("dim and n_segments must be positive")
        if not 1 <= self.k_min <= self.k_max <= self.n_segments:
            raise ValueError(
                f"need 1 <= k_min <= k_max <= n_segments, got "
                f"[{self.k_min}, {self.k_max}] with {self.n_segments} segments"
            )
        if self.separation < 0:
            raise ValueError("separation must be >= 0")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be > 0")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("bag counts must be positive")


def _anomalous_flags(gen: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    k = int(gen.integers(cfg.k_min, cfg.k_max + 1))
    flags = np.zeros(cfg.n_segments, dtype=np.int64)
    if cfg.contiguous:
        offset = int(gen.integers(0, cfg.n_segments - k + 1))
        flags[offset : offset + k] = 1
    else:
        flags[gen.choice(cfg.n_segments, size=k, replace=False)] = 1
    return flags


def _flags_to_annotations(flags: np.ndarray, frames_per_segment: int) -> list[tuple[int, int]]:
    ranges = []
    start = None
    for i, flag in enumerate(flags):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            ranges.append((start * frames_per_segment, i * frames_per_segment - 1))
            start = None
    if start is not None:
        ranges.append((start * frames_per_segment, len(flags) * frames_per_segment - 1))
    return ranges


def generate_synthetic(cfg: SyntheticConfig, out_dir) -> DatasetManifest:
    """Writes a complete dataset tree (manifest, features, truth sidecar).

    Fully deterministic given cfg.seed: the same config produces a
    byte-identical tree. Instance-level truth goes to a separate sidecar so
    training cannot accidentally consume it.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    features_dir = out_dir / "features"
    features_dir.mkdir(parents=True, exist_ok=True)

    gen = rng.stream(cfg.seed, rng.NS_SYNTH)
    direction = gen.standard_normal(cfg.dim)
    direction /= np.sqrt(np.sum(direction * direction))
    mean_normal = np.zeros(cfg.dim)
    mean_abnormal = cfg.separation * direction

    n_frames = cfg.n_segments * FRAMES_PER_CLIP
    videos: list[VideoEntry] = []
    truth: dict[str, np.ndarray] = {}

    for split, per_class in ((SPLIT_TRAIN, cfg.train_per_class), (SPLIT_TEST, cfg.test_per_class)):
        for label in (LABEL_ABNORMAL, LABEL_NORMAL):
            for i in range(per_class):
                video_id = f"{split}_{label}_{i:04d}"
                if label == LABEL_ABNORMAL:
                    flags = _anomalous_flags(gen, cfg)
                else:
                    flags = np.zeros(cfg.n_segments, dtype=np.int64)
                noise = cfg.noise_std * gen.standard_normal((cfg.n_segments, cfg.dim))
                rows = np.where(flags[:, None] == 1, mean_abnormal, mean_normal) + noise
                rows /= np.sqrt(np.sum(rows * rows, axis=1, keepdims=True))
                rel_path = f"features/{video_id}.milf"
                write_features(out_dir / rel_path, rows)
                annotations = _flags_to_annotations(flags, FRAMES_PER_CLIP) or None
                videos.append(
                    VideoEntry(
                        id=video_id,
                        feature_path=rel_path,
                        label=label,
                        split=split,
                        n_frames=n_frames,
                        fps=cfg.fps,
                        annotations=annotations,
                    )
                )
                truth[video_id] = flags

    manifest = DatasetManifest(videos, root=out_dir)
    save_manifest(out_dir / MANIFEST_FILENAME, manifest)
    write_truth(out_dir / TRUTH_FILENAME, truth)
    return manifest
