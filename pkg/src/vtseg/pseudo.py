"""Pseudo-boundary corpus construction from unlabeled videos.

Unlabeled videos are cut into segments of KDE-sampled durations; each
segment is then, with probability 1/3 each, retained, followed by an
inserted foreign segment, or replaced by one. Foreign segments are
KDE-sized spans cut from a uniformly chosen other video at a uniformly
chosen start clip. Every constructed segment becomes a pseudo topic with
a boundary label on its last clip, and a provenance record is kept per
segment for audit.

Unlabeled inputs carry no label field, so ground truth can never leak
into pseudo labels. Timestamps are re-laid cumulatively after assembly
(clip durations preserved) to keep the monotone-times invariant.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import ClipFeatureSequence
from .errors import DataError
from .kde import KdeModel, sample_duration, segment_by_kde


@dataclass(frozen=True)
class SegmentProvenance:
    """How a pseudo-topic came to be: retained / inserted-from / replaced-by."""

    kind: str                      # "retained" | "inserted-from" | "replaced-by"
    source_video: str | None = None
    source_range: tuple[int, int] | None = None  # [start, stop) in the source

    def render(self) -> str:
        if self.kind == "retained":
            return "retained"
        return f"{self.kind}({self.source_video},{self.source_range[0]}:{self.source_range[1]})"


@dataclass
class PseudoLabeledSequence:
    clips: ClipFeatureSequence
    provenance: list[SegmentProvenance]


def _min_clip_duration(seq: ClipFeatureSequence) -> float:
    return min(e - s for s, e in seq.clip_times)


def _cut_foreign_segment(pool: list[ClipFeatureSequence], kde: KdeModel,
                         rng: np.random.Generator) -> tuple[ClipFeatureSequence, int, int]:
    """A KDE-length clip span from a random position of a random pool video."""
    src = pool[rng.integers(len(pool))]
    want = sample_duration(kde, rng, min_duration=_min_clip_duration(src))
    start = int(rng.integers(src.n))
    stop = start
    got = 0.0
    while stop < src.n and got < want:
        s, e = src.clip_times[stop]
        got += e - s
        stop += 1
    return src, start, stop


def corrupt_segments(seq: ClipFeatureSequence, segments: list[list[int]],
                     pool: list[ClipFeatureSequence], kde: KdeModel,
                     rng: np.random.Generator,
                     max_seq_len: int | None = None) -> PseudoLabeledSequence:
    """Insert/replace/retain each segment with equal probability.

    `pool` must not contain `seq` itself. An empty pool degrades to
    retain-only with a warning record in the provenance list.
    """
    pool = [p for p in pool if p.video_id != seq.video_id]
    pieces: list[tuple[np.ndarray, np.ndarray, list[float], SegmentProvenance]] = []

    def own_piece(idxs):
        durs = [seq.clip_times[i][1] - seq.clip_times[i][0] for i in idxs]
        return (seq.visual[idxs], seq.text[idxs], durs,
                SegmentProvenance("retained"))

    def foreign_piece(kind):
        src, start, stop = _cut_foreign_segment(pool, kde, rng)
        idxs = list(range(start, stop))
        durs = [src.clip_times[i][1] - src.clip_times[i][0] for i in idxs]
        return (src.visual[idxs], src.text[idxs], durs,
                SegmentProvenance(kind, src.video_id, (start, stop)))

    warned = not pool
    if warned:
        warnings.warn(f"video {seq.video_id}: empty corruption pool, retaining all segments")
    for idxs in segments:
        op = int(rng.integers(3))  # 0=insert, 1=replace, 2=retain
        if warned or op == 2:
            pieces.append(own_piece(idxs))
        elif op == 0:
            pieces.append(own_piece(idxs))
            pieces.append(foreign_piece("inserted-from"))
        else:
            pieces.append(foreign_piece("replaced-by"))

    visual = np.concatenate([p[0] for p in pieces], axis=0)
    text = np.concatenate([p[1] for p in pieces], axis=0)
    labels = np.zeros(visual.shape[0], dtype=np.int64)
    provenance = []
    at = 0
    durations: list[float] = []
    for vis, _, durs, prov in pieces:
        at += len(durs)
        labels[at - 1] = 1
        durations.extend(durs)
        provenance.append(prov)
    times = []
    t = 0.0
    for d in durations:
        times.append((t, t + d))
        t += d
    if max_seq_len is not None and len(times) > max_seq_len:
        visual = visual[:max_seq_len]
        text = text[:max_seq_len]
        labels = labels[:max_seq_len]
        times = times[:max_seq_len]
    clips = ClipFeatureSequence(video_id=seq.video_id, clip_times=times,
                                visual=visual, text=text, labels=labels)
    return PseudoLabeledSequence(clips=clips, provenance=provenance)


def topic_durations(labeled: list[ClipFeatureSequence]) -> list[float]:
    """Per-topic durations in seconds across a labeled corpus."""
    out = []
    for seq in labeled:
        if seq.labels is None:
            raise DataError(f"video {seq.video_id} is unlabeled")
        seg = seq.segmentation()
        cuts = [0.0] + [seq.end_times()[b] for b in seg.boundaries] + [seq.end_times()[-1]]
        out.extend(b - a for a, b in zip(cuts[:-1], cuts[1:]))
    return out


def build_pseudo_corpus(unlabeled: list[ClipFeatureSequence],
                        durations: list[float], seed: int,
                        max_seq_len: int | None = None
                        ) -> tuple[list[PseudoLabeledSequence], KdeModel]:
    """KDE-segment and corrupt every unlabeled video (per-video derived seeds)."""
    from .kde import fit_kde

    for seq in unlabeled:
        if seq.labels is not None:
            raise DataError(
                f"video {seq.video_id}: pseudo-labeling expects unlabeled sequences")
    kde = fit_kde(durations)
    out = []
    for i, seq in enumerate(unlabeled):
        rng = np.random.default_rng(seed ^ (i + 1))
        segments = segment_by_kde(seq.end_times(), kde, rng,
                                  min_duration=_min_clip_duration(seq))
        pool = unlabeled[:i] + unlabeled[i + 1:]
        out.append(corrupt_segments(seq, segments, pool, kde, rng,
                                    max_seq_len=max_seq_len))
    return out, kde


def write_provenance(path: str, corpus: list[PseudoLabeledSequence]) -> None:
    """Line-oriented sidecar: one record per constructed segment."""
    with open(path, "w", encoding="utf-8") as f:
        for item in corpus:
            for si, prov in enumerate(item.provenance):
                f.write(f"{item.clips.video_id}\t{si}\t{prov.render()}\n")
