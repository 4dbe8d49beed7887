"""Training objectives.

* `l_vts`: per-clip boundary cross-entropy (sum over the first n-1 clips;
  the final clip carries no defined boundary label).
* `l_cma`: cross-modal alignment contrast between the fused visual and
  text states of the same clip versus different clips.
* `l_mcssl`: topic-coherence contrast over the concatenated multimodal
  clip representations, with mined positive/negative clip pairs.
* `l_balance`: importance + load penalties that keep mixture-of-experts
  routing spread across experts.

All loss builders return graph `Tensor`s so they can be backpropagated;
`LossBreakdown` carries the float values for logging, and the
`pretrain_objective` / `finetune_objective` helpers apply the configured
weights (balance weights are forced to zero for fusion kinds without MoE).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, clamp, concat, div, exp, gather_rows, log, mul, narrow, normal_cdf, softmax, sqrt, sub, take_along_cols, tmean, tsum
from .config import ModelConfig
from .errors import ConfigError, DataError
from .model import GateStats, LOAD_NOISE_FLOOR

PROB_CLAMP = 1e-12
CV_EPS = 1e-10


@dataclass
class LossBreakdown:
    """Float view of one objective evaluation (for logs and tests)."""

    l_vts: float = 0.0
    l_cma: float = 0.0
    l_mcssl: float = 0.0
    l_importance: float = 0.0
    l_load: float = 0.0
    l_balance: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {
            "l_vts": self.l_vts, "l_cma": self.l_cma, "l_mcssl": self.l_mcssl,
            "l_importance": self.l_importance, "l_load": self.l_load,
            "l_balance": self.l_balance, "total": self.total,
        }

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(*(a + b for a, b in
                               zip(self.as_tuple(), other.as_tuple())))

    def as_tuple(self):
        return (self.l_vts, self.l_cma, self.l_mcssl, self.l_importance,
                self.l_load, self.l_balance, self.total)


def l_vts(p: Tensor, y: np.ndarray) -> Tensor:
    """Binary cross-entropy summed over clips 0..n-2 (final clip excluded).

    Probabilities are clamped to [1e-12, 1 - 1e-12] before the logs, so
    saturated predictions stay finite.
    """
    y = np.asarray(y, dtype=np.float64)
    n = p.shape[0]
    if n < 2:
        raise DataError(f"l_vts needs at least 2 clips, got {n}")
    if y.shape != (n,):
        raise DataError(f"labels shape {y.shape} does not match {n} probabilities")
    pc = clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    count = np.ones(n)
    count[n - 1] = 0.0
    terms = ad.add(mul(log(pc), y), mul(log(sub(1.0, pc)), 1.0 - y))
    return mul(tsum(mul(terms, Tensor(count))), -1.0)


def _row_normalize(x: Tensor) -> Tensor:
    norms_sq = tsum(mul(x, x), axis=1, keepdims=True)
    if np.any(norms_sq.data <= 0.0):
        raise DataError("cosine similarity of a zero vector is undefined")
    return div(x, sqrt(norms_sq))


def sim(x1: Tensor, x2: Tensor, tau: float) -> Tensor:
    """Temperature-scaled cosine similarity of two vectors."""
    x1 = ad.reshape(ad._coerce(x1), (1, -1))
    x2 = ad.reshape(ad._coerce(x2), (1, -1))
    s = ad.matmul(_row_normalize(x1), ad.transpose(_row_normalize(x2)))
    return mul(ad.reshape(s, ()), 1.0 / tau)


def _sim_matrix(a: Tensor, b: Tensor, tau: float) -> Tensor:
    """All-pairs temperature-scaled cosine similarities (rows of a vs rows of b)."""
    return mul(ad.matmul(_row_normalize(a), ad.transpose(_row_normalize(b))), 1.0 / tau)


def l_cma(h_v: Tensor, h_t: Tensor, tau: float, eps: float,
          form: str = "literal") -> Tensor:
    """Cross-modal alignment loss over fused per-clip states.

    `literal` is a single global ratio: -(1/n) * sum_i e^{s_ii} /
    (sum_ij e^{s_ij} + eps). `lognce` is the standard symmetric
    per-anchor log-ratio alternative.
    """
    n = h_v.shape[0]
    s = _sim_matrix(h_v, h_t, tau)
    eye = Tensor(np.eye(n))
    if form == "literal":
        es = exp(s)
        num = tsum(mul(es, eye))
        den = ad.add(tsum(es), eps)
        return mul(div(num, den), -1.0 / n)
    if form == "lognce":
        diag = tsum(mul(s, eye), axis=1)
        row_lse = log(tsum(exp(s), axis=1))
        col_lse = log(tsum(exp(s), axis=0))
        loss_v = tmean(sub(row_lse, diag))
        loss_t = tmean(sub(col_lse, diag))
        return mul(ad.add(loss_v, loss_t), 0.5)
    raise ConfigError(f"unknown cma_form {form!r}")


@dataclass
class CsslPairSet:
    """Mined contrast pairs: per clip, same-topic and cross-topic indices."""

    positives: list[np.ndarray]
    negatives: list[np.ndarray]

    def n_anchors(self) -> int:
        return sum(1 for p in self.positives if p.size > 0)


def select_cssl_pairs(m: np.ndarray, topic_ids: np.ndarray, k1: int, k2: int,
                      negatives: str = "hardest") -> CsslPairSet:
    """Pick contrast partners by cosine similarity of the current clip states.

    Positives: the k1 most similar clips sharing the anchor's topic.
    Negatives: the k2 most similar (`hardest`) or least similar
    (`easiest`) clips from other topics. Ties resolve to the lower clip
    index; similarity is computed on detached values, so selection never
    carries gradient.
    """
    m = np.asarray(m, dtype=np.float64)
    topic_ids = np.asarray(topic_ids)
    n = m.shape[0]
    if topic_ids.shape != (n,):
        raise DataError(f"topic ids shape {topic_ids.shape} does not match {n} clips")
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DataError("cosine similarity of a zero clip representation is undefined")
    sims = (m / norms) @ (m / norms).T
    idx = np.arange(n)
    positives, negatives_out = [], []
    for i in range(n):
        same = idx[(topic_ids == topic_ids[i]) & (idx != i)]
        other = idx[topic_ids != topic_ids[i]]
        # argsort is stable, so sorting on -sim keeps lower indices first on ties
        same_ranked = same[np.argsort(-sims[i, same], kind="stable")]
        if negatives == "hardest":
            other_ranked = other[np.argsort(-sims[i, other], kind="stable")]
        elif negatives == "easiest":
            other_ranked = other[np.argsort(sims[i, other], kind="stable")]
        else:
            raise ConfigError(f"unknown negatives mode {negatives!r}")
        positives.append(same_ranked[:k1])
        negatives_out.append(other_ranked[:k2])
    return CsslPairSet(positives, negatives_out)


def l_mcssl(m: Tensor, pairs: CsslPairSet, tau: float) -> Tensor:
    """Topic-coherence contrast: raise same-topic similarity, lower cross-topic.

    Anchors with no positive partner are skipped; the mean runs over the
    remaining anchors.
    """
    n = m.shape[0]
    valid = [i for i in range(n) if pairs.positives[i].size > 0]
    if not valid:
        return Tensor(0.0)
    s = _sim_matrix(m, m, tau)
    pos_mask = np.zeros((n, n))
    neg_mask = np.zeros((n, n))
    for i in valid:
        pos_mask[i, pairs.positives[i]] = 1.0
        neg_mask[i, pairs.negatives[i]] = 1.0
    es = exp(s)
    pos = tsum(mul(es, Tensor(pos_mask)), axis=1, keepdims=True)
    neg = tsum(mul(es, Tensor(neg_mask)), axis=1, keepdims=True)
    vidx = np.asarray(valid, dtype=np.intp)
    pos_v = gather_rows(pos, vidx)
    neg_v = gather_rows(neg, vidx)
    ratio = div(pos_v, ad.add(pos_v, neg_v))
    return mul(tmean(log(ratio)), -1.0)


def _cv_squared(x: Tensor) -> Tensor:
    """Squared coefficient of variation with an epsilon-guarded mean."""
    n = x.shape[0]
    if n <= 1:
        return Tensor(0.0)
    mean = tmean(x)
    centered = sub(x, mean)
    var = tmean(mul(centered, centered))
    return div(var, ad.add(mul(mean, mean), CV_EPS))


def l_balance(stats: list[GateStats], k: int) -> tuple[Tensor, Tensor, Tensor]:
    """Importance and load CV^2 penalties, averaged over MoE layers.

    Importance sums gate weights per expert over valid rows. Load uses the
    smooth estimator: the probability that a row's (noisy) score for an
    expert clears the k-th best score among the other experts, summed over
    rows. With k >= expert count every expert is always active and the
    load term is a constant zero.
    """
    if not stats:
        raise ConfigError("l_balance requires gate statistics from a MoE fusion kind")
    imp_total: Tensor | None = None
    load_total: Tensor | None = None
    for st in stats:
        rows, e_count = st.gate.shape
        valid = np.asarray(st.row_valid, dtype=np.float64)[:, None]
        importance = tsum(mul(st.gate, Tensor(valid)), axis=0)
        imp_term = _cv_squared(importance)

        if k >= e_count or valid.sum() == 0:
            load_term = Tensor(0.0)
        else:
            order = np.argsort(-st.noisy.data, axis=1, kind="stable")
            in_topk = np.zeros((rows, e_count), dtype=bool)
            np.put_along_axis(in_topk, order[:, :k], True, axis=1)
            # k-th best among the *other* experts: overall rank k if this
            # expert is currently in the top k, else overall rank k-1.
            kth_if_in = order[:, k]
            kth_if_out = order[:, k - 1]
            thr_idx = np.where(in_topk, kth_if_in[:, None], kth_if_out[:, None])
            thresholds = take_along_cols(st.noisy, thr_idx)
            z = div(sub(st.clean, thresholds), st.load_scale)
            probs = normal_cdf(z)
            load = tsum(mul(probs, Tensor(valid)), axis=0)
            load_term = _cv_squared(load)

        imp_total = imp_term if imp_total is None else ad.add(imp_total, imp_term)
        load_total = load_term if load_total is None else ad.add(load_total, load_term)
    scale = 1.0 / len(stats)
    l_imp = mul(imp_total, scale)
    l_load = mul(load_total, scale)
    return l_imp, l_load, ad.add(l_imp, l_load)


def pretrain_objective(breakdown: LossBreakdown, cfg: ModelConfig) -> float:
    """total = l_vts + alpha * l_cma + beta * l_balance (beta 0 without MoE)."""
    return breakdown.l_vts + cfg.alpha * breakdown.l_cma \
        + cfg.effective_beta * breakdown.l_balance


def finetune_objective(breakdown: LossBreakdown, cfg: ModelConfig) -> float:
    """total = l_vts + sigma*l_balance + theta*l_mcssl + gamma*l_cma."""
    return breakdown.l_vts + cfg.effective_sigma * breakdown.l_balance \
        + cfg.theta * breakdown.l_mcssl + cfg.gamma * breakdown.l_cma


def finalize_breakdown(breakdown: LossBreakdown, cfg: ModelConfig,
                       stage: str) -> LossBreakdown:
    """Fill the `total` field per the stage's weighting."""
    if stage == "pretrain":
        total = pretrain_objective(breakdown, cfg)
    elif stage == "finetune":
        total = finetune_objective(breakdown, cfg)
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    return replace(breakdown, total=total)
