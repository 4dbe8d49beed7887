"""Optimization loop, pre-train / fine-tune orchestration, inference.

One process owns the parameters; forward/backward over a sequence is
single-threaded and deterministic. With ``deterministic`` set (or
``VTS_DETERMINISTIC=1``), dropout and gating noise are disabled and the
whole pipeline is bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .autodiff import Param, Tensor, narrow, zero_grads
from .config import ModelConfig, RunConfig
from .data import (ClipFeatureSequence, PaddedBatch, PredictionRecord, batch_and_mask,
                   make_windows, merge_window_predictions, read_corpus,
                   topic_ids_from_labels)
from .errors import ConfigError, DataError
from .metrics import MetricsReport, TopicSegmentation, evaluate_segmentations
from .model import (ForwardMode, ModelParams, init_params, load_checkpoint,
                    model_forward, named_params, save_checkpoint)


@dataclass
class AdamWState:
    """Decoupled-weight-decay adaptive-moment optimizer state."""

    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Param], cfg: RunConfig) -> "AdamWState":
        return cls(lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                   eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
                   m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def optimizer_step(params: list[Param], state: AdamWState) -> bool:
    """One update from accumulated gradients; skipped entirely on NaN/Inf grads.

    Returns True if the step was applied.
    """
    for p in params:
        if not np.isfinite(p.grad).all():
            return False
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        g = p.grad
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data = p.data - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                                      + state.weight_decay * p.data)
    return True


# ---------------------------------------------------------------------------
# Loss over sequences and batches
# ---------------------------------------------------------------------------


def sequence_loss(visual: np.ndarray, text: np.ndarray, mask: np.ndarray,
                  labels: np.ndarray, params: ModelParams, cfg: ModelConfig,
                  mode: ForwardMode, stage: str
                  ) -> tuple[Tensor, L.LossBreakdown, np.ndarray | None]:
    """Objective for one (possibly padded) sequence; padding is masked out."""
    n_valid = int(np.asarray(mask, dtype=bool).sum())
    states = model_forward(visual, text, mask, params, cfg, mode)
    p = narrow(states.p, 0, 0, n_valid)
    h_v = narrow(states.h_v, 0, 0, n_valid)
    h_t = narrow(states.h_t, 0, 0, n_valid)
    y = np.asarray(labels, dtype=np.float64)[:n_valid]

    vts_t = L.l_vts(p, y)
    cma_t = L.l_cma(h_v, h_t, cfg.temperature, cfg.epsilon, form=cfg.cma_form)

    bd = L.LossBreakdown(l_vts=vts_t.item(), l_cma=cma_t.item())
    total = vts_t
    if stage == "pretrain":
        if cfg.alpha != 0.0:
            total = total + cfg.alpha * cma_t
    elif stage == "finetune":
        if cfg.gamma != 0.0:
            total = total + cfg.gamma * cma_t
        m_valid = narrow(states.m, 0, 0, n_valid)
        topic_ids = topic_ids_from_labels(labels[:n_valid])
        pairs = L.select_cssl_pairs(m_valid.data, topic_ids, cfg.k1, cfg.k2,
                                    negatives=cfg.cssl_negatives)
        mcssl_t = L.l_mcssl(m_valid, pairs, cfg.temperature)
        bd.l_mcssl = mcssl_t.item()
        if cfg.theta != 0.0:
            total = total + cfg.theta * mcssl_t
    else:
        raise ConfigError(f"unknown stage {stage!r}")

    counts: np.ndarray | None = None
    if states.gate_stats:
        imp_t, load_t, bal_t = L.l_balance(states.gate_stats, cfg.active_experts)
        bd.l_importance = imp_t.item()
        bd.l_load = load_t.item()
        bd.l_balance = bal_t.item()
        weight = cfg.effective_beta if stage == "pretrain" else cfg.effective_sigma
        if weight != 0.0:
            total = total + weight * bal_t
        counts = np.zeros(cfg.expert_count, dtype=np.int64)
        for st in states.gate_stats:
            active = (st.gate.data > 0.0) & st.row_valid[:, None]
            counts += active.sum(axis=0)
    return total, L.finalize_breakdown(bd, cfg, stage), counts


def batch_loss(batch: PaddedBatch, params: ModelParams, cfg: ModelConfig,
               mode: ForwardMode, stage: str
               ) -> tuple[Tensor, L.LossBreakdown, np.ndarray | None]:
    """Sum of per-sequence objectives plus pooled expert routing counts."""
    if batch.labels is None:
        raise DataError("training batches need labels")
    total: Tensor | None = None
    bd = L.LossBreakdown()
    expert_counts: np.ndarray | None = None
    for i in range(len(batch.video_ids)):
        t, b, counts = sequence_loss(batch.visual[i], batch.text[i], batch.mask[i],
                                     batch.labels[i], params, cfg, mode, stage)
        total = t if total is None else total + t
        bd = bd + b
        if counts is not None:
            expert_counts = counts if expert_counts is None else expert_counts + counts
    return total, bd, expert_counts


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    breakdown: L.LossBreakdown
    wall_s: float
    expert_counts: np.ndarray | None = None

    def render(self) -> str:
        parts = [f"epoch={self.epoch}", f"step={self.step}"]
        parts += [f"{k}={v:.6g}" for k, v in self.breakdown.as_dict().items()]
        parts.append(f"wall_s={self.wall_s:.3f}")
        if self.expert_counts is not None:
            parts.append("experts=" + ":".join(str(int(c)) for c in self.expert_counts))
        return " ".join(parts)


class TrainLog:
    """Append-only line log; records stay in memory for tests."""

    def __init__(self, path: str | None = None):
        self.path = path
        self.records: list[TrainLogRecord] = []
        self.lines: list[str] = []
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write_line(self, line: str) -> None:
        self.lines.append(line)
        if self._fh:
            self._fh.write(line + "\n")
            self._fh.flush()

    def add(self, rec: TrainLogRecord) -> None:
        self.records.append(rec)
        self.write_line(rec.render())

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def train_stage(sequences: list[ClipFeatureSequence], params: ModelParams,
                run_cfg: RunConfig, stage: str, epochs: int,
                log: TrainLog | None = None,
                valid: list[ClipFeatureSequence] | None = None,
                keep_best: bool = False) -> tuple[ModelParams, list[float]]:
    """Run `epochs` of AdamW over shuffled batches of `sequences`.

    With `keep_best` (fine-tuning), validation Avg is computed each epoch
    and the best epoch's parameters are restored at the end.
    """
    if not sequences:
        raise DataError("empty training corpus")
    cfg = run_cfg.model
    plist = named_params(params)
    opt = AdamWState.for_params(plist, run_cfg)
    data_rng = np.random.default_rng(run_cfg.seed ^ 0x9E3779B9)
    mode = ForwardMode(training=True, deterministic=run_cfg.deterministic,
                       rng=np.random.default_rng(run_cfg.seed ^ 0x7F4A7C15))
    log = log or TrainLog()

    best_avg = -1.0
    best_data: list[np.ndarray] | None = None
    val_history: list[float] = []
    step = 0
    for epoch in range(1, epochs + 1):
        order = data_rng.permutation(len(sequences))
        shuffled = [sequences[i] for i in order]
        for batch in batch_and_mask(shuffled, run_cfg.batch_size):
            t0 = time.perf_counter()
            zero_grads(plist)
            total, bd, counts = batch_loss(batch, params, cfg, mode, stage)
            total.backward()
            applied = optimizer_step(plist, opt)
            step += 1
            rec = TrainLogRecord(epoch, step, bd, time.perf_counter() - t0, counts)
            log.add(rec)
            if not applied:
                log.write_line(f"epoch={epoch} step={step} skipped=nan_gradients")
        if valid is not None:
            report = evaluate_model(params, run_cfg, valid)
            val_history.append(report.avg)
            log.write_line(f"epoch={epoch} valid_avg={report.avg:.6f}")
            if keep_best and report.avg > best_avg:
                best_avg = report.avg
                best_data = [p.data.copy() for p in plist]
    if keep_best and best_data is not None:
        for p, d in zip(plist, best_data):
            p.data = d
    return params, val_history


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------


def predict_sequence(seq: ClipFeatureSequence, params: ModelParams,
                     cfg: ModelConfig) -> np.ndarray:
    """Deterministic per-clip boundary probabilities with window merging."""
    windows = make_windows(seq.video_id, seq.n, cfg.max_seq_len)
    probs = []
    mode = ForwardMode(training=False, deterministic=True)
    for w in windows:
        vis = seq.visual[w.start:w.stop]
        txt = seq.text[w.start:w.stop]
        mask = np.ones(w.stop - w.start, dtype=bool)
        states = model_forward(vis, txt, mask, params, cfg, mode)
        probs.append(states.p.data.copy())
    return merge_window_predictions(windows, probs)


def segment_corpus(params: ModelParams, cfg: ModelConfig,
                   sequences: list[ClipFeatureSequence],
                   threshold: float | None = None) -> list[PredictionRecord]:
    """Thresholded boundary decisions; the final clip is never a boundary."""
    thr = cfg.threshold if threshold is None else threshold
    records = []
    for seq in sequences:
        if seq.visual.shape[1] != cfg.visual_dim or seq.text.shape[1] != cfg.text_dim:
            raise DataError(
                f"video {seq.video_id}: feature dims "
                f"({seq.visual.shape[1]}, {seq.text.shape[1]}) do not match model "
                f"({cfg.visual_dim}, {cfg.text_dim})")
        p = predict_sequence(seq, params, cfg)
        for i in range(seq.n):
            decision = bool(p[i] > thr) and i != seq.n - 1
            records.append(PredictionRecord(seq.video_id, i, float(p[i]), decision))
    return records


def corpus_segmentations(sequences: list[ClipFeatureSequence]
                         ) -> dict[str, TopicSegmentation]:
    return {s.video_id: s.segmentation() for s in sequences}


def evaluate_records(records: list[PredictionRecord], run_cfg: RunConfig,
                     sequences: list[ClipFeatureSequence]) -> MetricsReport:
    from .data import predictions_to_segmentations

    gts = corpus_segmentations(sequences)
    preds = predictions_to_segmentations(records, gts)
    return evaluate_segmentations(preds, gts, run_cfg.metric_k,
                                  bs_matching=run_cfg.bs_matching,
                                  miou_symmetric=run_cfg.miou_symmetric)


def evaluate_model(params: ModelParams, run_cfg: RunConfig,
                   sequences: list[ClipFeatureSequence]) -> MetricsReport:
    records = segment_corpus(params, run_cfg.model, sequences)
    return evaluate_records(records, run_cfg, sequences)


# ---------------------------------------------------------------------------
# Orchestration entry points (paths in, paths out)
# ---------------------------------------------------------------------------


def run_pretrain(run_cfg: RunConfig) -> str:
    """Train from fresh init on the pseudo-labeled corpus; write a checkpoint."""
    if not run_cfg.pretrain_dir:
        raise ConfigError("pretrain requires pretrain_dir (pseudo-labeled corpus)")
    corpus = read_corpus(run_cfg.pretrain_dir)
    if not corpus:
        raise DataError(f"no videos found in {run_cfg.pretrain_dir}")
    params = init_params(run_cfg.model, seed=run_cfg.seed)
    log = TrainLog(run_cfg.log_path or None)
    try:
        train_stage(corpus, params, run_cfg, "pretrain", run_cfg.pretrain_epochs, log=log)
    finally:
        log.close()
    out = run_cfg.checkpoint_out or "pretrained.vtsm"
    save_checkpoint(out, params, run_cfg.model)
    return out


def run_finetune(run_cfg: RunConfig) -> str:
    """Fine-tune on labeled data, keeping the best-validation-Avg epoch."""
    if not run_cfg.train_dir:
        raise ConfigError("finetune requires train_dir")
    train_seqs = read_corpus(run_cfg.train_dir)
    valid_seqs = read_corpus(run_cfg.valid_dir) if run_cfg.valid_dir else None
    if run_cfg.checkpoint_in:
        params, _ = load_checkpoint(run_cfg.checkpoint_in, expect=run_cfg.model)
    else:
        params = init_params(run_cfg.model, seed=run_cfg.seed)
    log = TrainLog(run_cfg.log_path or None)
    try:
        train_stage(train_seqs, params, run_cfg, "finetune", run_cfg.finetune_epochs,
                    log=log, valid=valid_seqs, keep_best=valid_seqs is not None)
    finally:
        log.close()
    out = run_cfg.checkpoint_out or "finetuned.vtsm"
    save_checkpoint(out, params, run_cfg.model)
    return out
