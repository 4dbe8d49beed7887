"""Planted-topic synthetic corpora for CPU-scale verification.

Each video gets a random number of topics; each topic draws a latent
vector z, and every clip in the topic emits visual = Av @ z + noise and
text = At @ z + noise with fixed per-corpus mixing matrices. Same-clip
visual/text features are therefore correlated through z, and topics form
linearly separable clusters whose separation is set by the
boundary-strength / noise ratio. Labels mark the last clip of each topic.
Generation is deterministic per seed (per-video seeds are seed XOR a
global video counter).
"""

from __future__ import annotations

import numpy as np

from .config import SynthSpec
from .data import ClipFeatureSequence
from .errors import DataError
from .metrics import exact_f1


def _compose_topics(n: int, topics: int, min_len: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Split n clips into `topics` parts, each at least min_len clips."""
    min_len = max(1, min(min_len, n // topics))
    spare = n - topics * min_len
    # distribute the spare clips over the parts uniformly
    extra = np.zeros(topics, dtype=np.int64)
    for _ in range(spare):
        extra[rng.integers(topics)] += 1
    lengths = min_len + extra
    return np.concatenate([[0], np.cumsum(lengths)])


def _make_video(spec: SynthSpec, video_id: str, mix_v: np.ndarray,
                mix_t: np.ndarray, rng: np.random.Generator,
                labeled: bool) -> ClipFeatureSequence:
    n = int(rng.integers(spec.synth_clips_min, spec.synth_clips_max + 1))
    t_lo = min(spec.synth_topics_min, n)
    t_hi = min(spec.synth_topics_max, n)
    topics = int(rng.integers(t_lo, t_hi + 1))
    bounds = _compose_topics(n, topics, spec.synth_min_topic_clips, rng)

    visual = np.zeros((n, spec.synth_visual_dim))
    text = np.zeros((n, spec.synth_text_dim))
    labels = np.zeros(n, dtype=np.int64)
    for a, b in zip(bounds[:-1], bounds[1:]):
        z = spec.synth_boundary_strength * rng.standard_normal(spec.synth_latent_dim)
        size = b - a
        visual[a:b] = (mix_v @ z)[None, :] + spec.synth_noise * rng.standard_normal(
            (size, spec.synth_visual_dim))
        text[a:b] = (mix_t @ z)[None, :] + spec.synth_noise * rng.standard_normal(
            (size, spec.synth_text_dim))
        labels[b - 1] = 1

    dur = spec.synth_clip_duration
    times = [(i * dur, (i + 1) * dur) for i in range(n)]
    return ClipFeatureSequence(video_id=video_id, clip_times=times,
                               visual=visual, text=text,
                               labels=labels if labeled else None)


def generate_synthetic_corpus(spec: SynthSpec, seed: int
                              ) -> dict[str, list[ClipFeatureSequence]]:
    """Labeled train/valid/test splits plus an unlabeled split."""
    spec.validate()
    if spec.synth_noise == 0.0 and spec.synth_boundary_strength <= 0.0:
        raise DataError("zero noise requires positive boundary strength")
    base = np.random.default_rng(seed)
    mix_v = base.standard_normal((spec.synth_visual_dim, spec.synth_latent_dim))
    mix_t = base.standard_normal((spec.synth_text_dim, spec.synth_latent_dim))

    splits = {
        "train": (spec.synth_train_videos, True),
        "valid": (spec.synth_valid_videos, True),
        "test": (spec.synth_test_videos, True),
        "unlabeled": (spec.synth_unlabeled_videos, False),
    }
    out: dict[str, list[ClipFeatureSequence]] = {}
    counter = 0
    for split, (count, labeled) in splits.items():
        vids = []
        for i in range(count):
            counter += 1
            vrng = np.random.default_rng(seed ^ counter)
            vids.append(_make_video(spec, f"{split}_{i:04d}", mix_v, mix_t,
                                    vrng, labeled))
        out[split] = vids
    return out


def centroid_oracle_f1(seq: ClipFeatureSequence) -> float:
    """Learnability probe: assign clips to the nearest true-topic centroid.

    Boundaries fall where the assignment changes; returns exact boundary
    F1 against the planted labels. High values confirm the corpus is
    separable from raw features alone.
    """
    if seq.labels is None:
        raise DataError(f"video {seq.video_id} has no labels")
    feats = np.concatenate([seq.visual, seq.text], axis=1)
    ids = seq.topic_ids()
    centroids = np.stack([feats[ids == t].mean(axis=0) for t in range(ids.max() + 1)])
    d2 = ((feats[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)
    pred_labels = np.zeros(seq.n, dtype=np.int64)
    for i in range(seq.n - 1):
        if assign[i] != assign[i + 1]:
            pred_labels[i] = 1
    from .metrics import TopicSegmentation
    pred = TopicSegmentation.from_labels(pred_labels, seq.end_times())
    return exact_f1(pred, seq.segmentation())
