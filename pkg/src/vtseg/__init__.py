"""Multimodal video topic segmentation over pre-extracted per-clip features.

Subpackages:

* `autodiff`: float64 reverse-mode tensor engine with gradient checking.
* `model`: projection, fusion layers (merge/co attention, optional MoE),
  boundary predictor, checkpoints.
* `losses`: boundary cross-entropy, cross-modal alignment, topic-coherence
  contrast, expert-balance penalties.
* `kde` / `pseudo` / `synth`: duration KDE, pseudo-boundary corpus
  construction, planted-topic synthetic corpora.
* `metrics`: exact F1, BS@k, F1@k, mIoU, Avg, annotator consistency.
* `data`: feature files, manifests, sliding windows, batching, predictions.
* `train`: AdamW loop, pre-train/fine-tune orchestration, inference.
* `cli`: the `vtseg` command.
"""

__version__ = "0.1.0"
