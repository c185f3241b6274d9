"""Object distillation, temporal reasoning and classification objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import NumericGuardError, Tensor, as_tensor, cross_entropy, l2_norm, log_softmax, relu, softmax

MASKED_LOGIT = -1e9


@dataclass
class BatchContext:
    """Everything the losses need for one mini-batch of B clips."""

    tokens: Tensor  # [B, T, N, D]
    cls: Tensor  # [B, T, D], frozen
    s: Tensor  # [B, T', N, D]
    logits: Tensor  # [B, K]
    labels: np.ndarray  # [B]
    tau: float = 0.07
    margin: float = 1.0
    tau_outer: float | None = None
    normalize_temp: bool = True
    max_negatives: int | None = None
    rng: np.random.Generator | None = None
    use_obj: bool = True
    use_temp: bool = True

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.tau <= 0 or (self.tau_outer is not None and self.tau_outer <= 0):
            raise ConfigError("temperature must be positive")
        if self.margin < 0:
            raise ConfigError("margin must be non-negative")

    @property
    def positive_mask(self) -> np.ndarray:
        """[B, B] True where clip b' is another clip with b's label."""
        same = self.labels[:, None] == self.labels[None, :]
        return same & ~np.eye(len(self.labels), dtype=bool)

    @property
    def negative_mask(self) -> np.ndarray:
        return self.labels[:, None] != self.labels[None, :]


def _unit(x: Tensor) -> Tensor:
    n = l2_norm(x, axis=-1, keepdims=True)
    if np.any(n.data == 0):
        raise NumericGuardError("cosine similarity undefined for a zero-norm vector")
    return x / n


def correspondence_matrix(tokens: Tensor, cls, tau: float) -> Tensor:
    """c(o_t^b, p_t^b') for every frame t and clip pair: returns [T, B, B'].

    Cosine similarities between each object token and the cls vector are
    pooled over objects with softmax(cos / tau) weights.
    """
    tokens, cls = as_tensor(tokens), as_tensor(cls)
    on = _unit(tokens).transpose(1, 0, 2, 3)  # [T, B, N, D]
    b_, t, d = cls.shape
    pn = _unit(cls).transpose(1, 2, 0).reshape(t, 1, d, b_)  # [T, 1, D, B']
    cos = on @ pn  # [T, B, N, B']
    w = softmax(cos * (1.0 / tau), axis=2)
    return (w * cos).sum(axis=2)


def correspondence(o_t: Tensor, p: Tensor, tau: float) -> Tensor:
    """Correspondence score between one frame's tokens [N, D] and a cls vector [D]."""
    o_t, p = as_tensor(o_t), as_tensor(p)
    n, d = o_t.shape
    return correspondence_matrix(o_t.reshape(1, 1, n, d), p.reshape(1, 1, d), tau).reshape(())


def negative_pool(batch_size: int, max_negatives: int | None = None,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """[B, B] mask of the cls vectors used as negatives for each clip: every other clip, optionally capped."""
    pool = ~np.eye(batch_size, dtype=bool)
    if max_negatives is not None and max_negatives < batch_size - 1:
        rng = rng or np.random.default_rng(0)
        capped = np.zeros_like(pool)
        for b in range(batch_size):
            others = np.flatnonzero(pool[b])
            capped[b, rng.choice(others, size=max_negatives, replace=False)] = True
        pool = capped
    return pool


def distillation_from_scores(scores: Tensor, negatives: np.ndarray, tau: float) -> Tensor:
    """Contrastive loss on a [T, B, B'] score tensor whose diagonal holds the positives.

    Returns the per-clip sum over frames, averaged over clips.
    """
    t, b, _ = scores.shape
    if not np.any(negatives, axis=1).all():
        raise ConfigError("object distillation loss needs at least one negative cls vector per clip")
    allowed = negatives | np.eye(b, dtype=bool)
    logits = scores * (1.0 / tau) + Tensor(np.where(allowed, 0.0, MASKED_LOGIT))
    lp = log_softmax(logits, axis=-1)
    idx = np.arange(b)
    return -lp[:, idx, idx].sum() * (1.0 / b)


def object_distillation_loss(ctx: BatchContext) -> Tensor:
    scores = correspondence_matrix(ctx.tokens, ctx.cls, ctx.tau)
    negatives = negative_pool(ctx.tokens.shape[0], ctx.max_negatives, ctx.rng)
    return distillation_from_scores(scores, negatives, ctx.tau_outer or ctx.tau)


def temporal_reasoning_loss(ctx: BatchContext) -> Tensor:
    """Margin loss over state changes [B, T', N, D].

    Pulls same-slot state changes of same-label clips together, pushes
    same-slot different-label pairs and different-slot same-clip pairs at
    least ``margin`` apart.  With ``normalize_temp`` each of the three terms
    is a mean over its contributing pairs; otherwise the raw per-clip sums
    are averaged over the clips of the batch.  Empty pools contribute zero.
    """
    s = ctx.s
    b, tp, n, _ = s.shape
    cross = l2_norm(s.reshape(b, 1, tp, n, -1) - s.reshape(1, b, tp, n, -1), axis=-1)  # [B, B', T', N]
    pos = ctx.positive_mask.astype(float)[:, :, None, None]
    neg = ctx.negative_mask.astype(float)[:, :, None, None]
    pos_term = (cross * pos).sum()
    neg_term = (relu(ctx.margin - cross) * neg).sum()
    counts = [pos.sum() * tp * n, neg.sum() * tp * n]
    terms = [pos_term, neg_term]
    if n > 1:
        intra = l2_norm(s.reshape(b, tp, n, 1, -1) - s.reshape(b, tp, 1, n, -1), axis=-1)  # [B, T', N, N]
        off = (~np.eye(n, dtype=bool)).astype(float)
        terms.append((relu(ctx.margin - intra) * off).sum())
        counts.append(b * tp * n * (n - 1))
    total = Tensor(0.0)
    for term, count in zip(terms, counts):
        if count == 0:
            continue
        total = total + term * (1.0 / count if ctx.normalize_temp else 1.0 / b)
    return total


def classification_loss(ctx: BatchContext) -> Tensor:
    return cross_entropy(ctx.logits, ctx.labels)


def total_loss(ctx: BatchContext) -> tuple[Tensor, dict[str, float]]:
    """Unweighted sum of the enabled terms plus a float breakdown for logging."""
    l_cls = classification_loss(ctx)
    l_obj = object_distillation_loss(ctx) if ctx.use_obj else Tensor(0.0)
    l_temp = temporal_reasoning_loss(ctx) if ctx.use_temp else Tensor(0.0)
    total = l_obj + l_temp + l_cls
    parts = {"L_obj": l_obj.item(), "L_temp": l_temp.item(), "L_cls": l_cls.item(), "total": total.item()}
    return total, parts
