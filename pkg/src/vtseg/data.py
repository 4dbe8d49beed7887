"""Feature files, manifests, sliding windows, batching, prediction records.

On-disk corpus layout::

    <corpus>/<video_id>/manifest.json
    <corpus>/<video_id>/visual.vtsf
    <corpus>/<video_id>/text.vtsf

A ``.vtsf`` blob is: magic ``VTSF``, u32 version (1), u32 rows, u32 cols,
then rows*cols little-endian float32 values in row-major order. Features
are stored as f32 and promoted to f64 in memory. Prediction files are
line-oriented: ``video_id<TAB>clip_index<TAB>probability<TAB>decision``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError
from .metrics import TopicSegmentation

FEATURE_MAGIC = b"VTSF"
FEATURE_VERSION = 1


@dataclass
class ClipFeatureSequence:
    """One video: per-clip times, visual/text feature rows, optional labels."""

    video_id: str
    clip_times: list[tuple[float, float]]
    visual: np.ndarray
    text: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.visual = np.asarray(self.visual, dtype=np.float64)
        self.text = np.asarray(self.text, dtype=np.float64)
        n = len(self.clip_times)
        if self.visual.shape[0] != n or self.text.shape[0] != n:
            raise DataError(
                f"video {self.video_id}: {n} clips but feature rows "
                f"visual={self.visual.shape[0]} text={self.text.shape[0]}")
        for (s1, e1), (s2, e2) in zip(self.clip_times, self.clip_times[1:]):
            if e1 > s2 or s1 >= e1:
                raise DataError(f"video {self.video_id}: clip times not monotone")
        if n and self.clip_times[-1][0] >= self.clip_times[-1][1]:
            raise DataError(f"video {self.video_id}: empty final clip span")
        if not (np.isfinite(self.visual).all() and np.isfinite(self.text).all()):
            raise DataError(f"video {self.video_id}: non-finite feature values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise DataError(f"video {self.video_id}: labels shape {self.labels.shape}")

    @property
    def n(self) -> int:
        return len(self.clip_times)

    def end_times(self) -> tuple[float, ...]:
        return tuple(e for _, e in self.clip_times)

    def segmentation(self) -> TopicSegmentation:
        if self.labels is None:
            raise DataError(f"video {self.video_id} has no labels")
        return TopicSegmentation.from_labels(self.labels, self.end_times())

    def topic_ids(self) -> np.ndarray:
        """Per-clip topic index derived from boundary labels."""
        if self.labels is None:
            raise DataError(f"video {self.video_id} has no labels")
        return topic_ids_from_labels(self.labels)


def topic_ids_from_labels(labels) -> np.ndarray:
    """Per-clip topic index: a label-1 clip is the last clip of its topic."""
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.zeros(len(labels), dtype=np.int64)
    if len(labels) > 1:
        ids[1:] = np.cumsum(labels[:-1])
    return ids


def write_feature_blob(path: str, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 2:
        raise DataError(f"feature blob must be 2-D, got shape {array.shape}")
    rows, cols = array.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, rows, cols))
        f.write(array.astype("<f4").tobytes())


def read_feature_blob(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise FormatError(f"{path}: header truncated at byte {len(blob)} (need 16)")
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    version, rows, cols = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    expected = 16 + rows * cols * 4
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for {rows}x{cols} f32, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=16).reshape(rows, cols)
    return data.astype(np.float64)


def write_features(corpus_dir: str, seq: ClipFeatureSequence) -> str:
    """Write one video's manifest and feature blobs; returns the video dir."""
    vdir = os.path.join(corpus_dir, seq.video_id)
    os.makedirs(vdir, exist_ok=True)
    write_feature_blob(os.path.join(vdir, "visual.vtsf"), seq.visual)
    write_feature_blob(os.path.join(vdir, "text.vtsf"), seq.text)
    manifest = {
        "video_id": seq.video_id,
        "n": seq.n,
        "clip_times": [[float(s), float(e)] for s, e in seq.clip_times],
        "label_indices": (None if seq.labels is None
                          else [int(i) for i in np.nonzero(seq.labels)[0]]),
        "visual": {"file": "visual.vtsf", "rows": seq.n, "cols": int(seq.visual.shape[1])},
        "text": {"file": "text.vtsf", "rows": seq.n, "cols": int(seq.text.shape[1])},
    }
    with open(os.path.join(vdir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return vdir


def read_features(corpus_dir: str, video_id: str) -> ClipFeatureSequence:
    vdir = os.path.join(corpus_dir, video_id)
    mpath = os.path.join(vdir, "manifest.json")
    try:
        with open(mpath, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except OSError as e:
        raise DataError(f"cannot read manifest for video {video_id}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{mpath}: invalid manifest JSON: {e}") from e
    visual = read_feature_blob(os.path.join(vdir, manifest["visual"]["file"]))
    text = read_feature_blob(os.path.join(vdir, manifest["text"]["file"]))
    n = manifest["n"]
    for name, arr, meta in (("visual", visual, manifest["visual"]),
                            ("text", text, manifest["text"])):
        if arr.shape != (meta["rows"], meta["cols"]) or meta["rows"] != n:
            raise FormatError(
                f"{mpath}: {name} blob shape {arr.shape} does not match manifest "
                f"({meta['rows']}x{meta['cols']}, n={n})")
    labels = None
    if manifest["label_indices"] is not None:
        labels = np.zeros(n, dtype=np.int64)
        labels[manifest["label_indices"]] = 1
    return ClipFeatureSequence(
        video_id=manifest["video_id"],
        clip_times=[(float(s), float(e)) for s, e in manifest["clip_times"]],
        visual=visual, text=text, labels=labels)


def list_videos(corpus_dir: str) -> list[str]:
    if not os.path.isdir(corpus_dir):
        raise DataError(f"corpus directory not found: {corpus_dir}")
    return sorted(d for d in os.listdir(corpus_dir)
                  if os.path.isfile(os.path.join(corpus_dir, d, "manifest.json")))


def read_corpus(corpus_dir: str) -> list[ClipFeatureSequence]:
    return [read_features(corpus_dir, vid) for vid in list_videos(corpus_dir)]


# ---------------------------------------------------------------------------
# Sliding windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Window:
    """A [start, stop) clip range; `first_is_overlap` marks a junction clip."""

    video_id: str
    start: int
    stop: int
    first_is_overlap: bool


def make_windows(video_id: str, n: int, max_seq_len: int) -> list[Window]:
    """Split a long video into windows overlapping by exactly one clip."""
    if max_seq_len < 2:
        raise DataError(f"max_seq_len must be >= 2, got {max_seq_len}")
    if n <= max_seq_len:
        return [Window(video_id, 0, n, False)]
    windows = []
    start = 0
    while True:
        stop = min(start + max_seq_len, n)
        windows.append(Window(video_id, start, stop, start > 0))
        if stop == n:
            return windows
        start = stop - 1


def merge_window_predictions(windows: list[Window],
                             probs: list[np.ndarray]) -> np.ndarray:
    """Combine per-window probabilities into one per-clip vector.

    Each clip takes its value from the window where it is not the final
    clip; at a junction that is the later window. The video's true final
    clip keeps its only available value.
    """
    if len(windows) != len(probs):
        raise DataError(f"{len(windows)} windows but {len(probs)} probability arrays")
    n = windows[-1].stop
    out = np.full(n, np.nan)
    assigned = np.zeros(n, dtype=bool)
    last = len(windows) - 1
    for wi, (w, p) in enumerate(zip(windows, probs)):
        if len(p) != w.stop - w.start:
            raise DataError(
                f"window [{w.start},{w.stop}) expects {w.stop - w.start} values, got {len(p)}")
        for local, clip in enumerate(range(w.start, w.stop)):
            if clip == w.stop - 1 and wi != last:
                continue  # junction clip: the later window owns it
            if assigned[clip]:
                raise DataError(f"clip {clip} assigned twice during window merge")
            out[clip] = p[local]
            assigned[clip] = True
    if not assigned.all():
        raise DataError(f"clips never assigned during merge: {np.nonzero(~assigned)[0]}")
    return out


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class PaddedBatch:
    """Length-padded stack of sequences plus validity masks."""

    video_ids: list[str]
    lengths: list[int]
    visual: np.ndarray    # [B x L x Dv]
    text: np.ndarray      # [B x L x Dt]
    mask: np.ndarray      # [B x L] bool
    labels: np.ndarray | None  # [B x L] int, 0 on padding


def batch_and_mask(sequences: list[ClipFeatureSequence],
                   batch_size: int) -> list[PaddedBatch]:
    """Group sequences into padded batches with validity masks."""
    batches = []
    for at in range(0, len(sequences), batch_size):
        group = sequences[at:at + batch_size]
        lengths = [s.n for s in group]
        lmax = max(lengths)
        dv = group[0].visual.shape[1]
        dt = group[0].text.shape[1]
        visual = np.zeros((len(group), lmax, dv))
        text = np.zeros((len(group), lmax, dt))
        mask = np.zeros((len(group), lmax), dtype=bool)
        have_labels = all(s.labels is not None for s in group)
        labels = np.zeros((len(group), lmax), dtype=np.int64) if have_labels else None
        for i, s in enumerate(group):
            visual[i, :s.n] = s.visual
            text[i, :s.n] = s.text
            mask[i, :s.n] = True
            if have_labels:
                labels[i, :s.n] = s.labels
        batches.append(PaddedBatch([s.video_id for s in group], lengths,
                                   visual, text, mask, labels))
    return batches


# ---------------------------------------------------------------------------
# Prediction records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionRecord:
    video_id: str
    clip_index: int
    probability: float
    decision: bool


def write_predictions(path: str, records: list[PredictionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(f"{r.video_id}\t{r.clip_index}\t{r.probability:.17g}\t"
                    f"{1 if r.decision else 0}\n")


def read_predictions(path: str) -> list[PredictionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
            records.append(PredictionRecord(parts[0], int(parts[1]),
                                            float(parts[2]), parts[3] == "1"))
    return records


def predictions_to_segmentations(records: list[PredictionRecord],
                                 gts: dict[str, TopicSegmentation]
                                 ) -> dict[str, TopicSegmentation]:
    """Group decision records into per-video segmentations."""
    by_video: dict[str, dict[int, PredictionRecord]] = {}
    for r in records:
        by_video.setdefault(r.video_id, {})[r.clip_index] = r
    out = {}
    for vid, gt in gts.items():
        if vid not in by_video:
            raise DataError(f"predictions missing for video {vid}")
        recs = by_video[vid]
        if sorted(recs) != list(range(gt.n)):
            raise DataError(f"video {vid}: prediction clip indices not exactly 0..{gt.n - 1}")
        bounds = tuple(i for i in range(gt.n - 1) if recs[i].decision)
        out[vid] = TopicSegmentation(n=gt.n, boundaries=bounds, end_times=gt.end_times)
    return out
