"""Hierarchical contrastive loss for masked sentence prediction.

One masked position contributes ``-log softmax`` over [positive, intra-doc
negatives, cross-doc negatives], where intra-doc logits are shifted by a
dynamic bias ``-mu * alpha``. ``alpha`` is the gap between the mean intra
similarity and the mean cross similarity and is a stop-gradient quantity:
its value enters the loss but no gradient flows through it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag

NEG_INF = -1e30


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    mu: float = 0.5
    similarity: str = "dot"  # "dot" | "cosine"

    def __post_init__(self):
        if not math.isfinite(self.mu) or self.mu < 0:
            raise LossError(f"mu must be finite and >= 0, got {self.mu}")
        if self.similarity not in ("dot", "cosine"):
            raise LossError(f"unknown similarity {self.similarity!r}")


@dataclass
class NegativePools:
    """Projected sentence vectors: same-document (minus the positive) and
    other-document negatives. ``intra`` may be empty; ``cross`` may not."""
    intra: list
    cross: list


@dataclass
class LossBreakdown:
    msm: float
    mlm: float
    total: float
    alpha: float = 0.0


def _normalize_rows(m):
    norms = ag.powc(ag.tsum(ag.mul(m, m), axis=-1, keepdims=True), 0.5)
    return ag.mul(m, ag.powc(norms, -1.0))


def _sim_vector(p, pool, kind):
    """Similarities of a d-vector against an [n, d] pool, as a length-n tensor."""
    p2 = ag.reshape(p, (1, -1))
    if kind == "cosine":
        p2 = _normalize_rows(p2)
        pool = _normalize_rows(pool)
    out = ag.matmul(pool, ag.swapaxes(p2, 0, 1))
    return ag.reshape(out, (-1,))


def _stack_pool(vectors):
    rows = [ag.reshape(v if isinstance(v, ag.Tensor) else ag.Tensor(np.asarray(v, dtype=np.float64)),
                       (1, -1)) for v in vectors]
    return ag.concat(rows, axis=0)


def compute_alpha(p_t, pools, similarity="dot"):
    """Mean intra similarity minus mean cross similarity, gradient-severed.

    Returns 0 for an empty intra pool; an empty cross pool is an error.
    """
    if len(pools.cross) == 0:
        raise LossError("no cross-doc negatives")
    p = p_t.data if isinstance(p_t, ag.Tensor) else np.asarray(p_t, dtype=np.float64)
    cross = np.stack([v.data if isinstance(v, ag.Tensor) else np.asarray(v) for v in pools.cross])
    if len(pools.intra) == 0:
        intra_mean = None
    else:
        intra = np.stack([v.data if isinstance(v, ag.Tensor) else np.asarray(v) for v in pools.intra])
        intra_mean = _np_sims(p, intra, similarity).mean()
    cross_mean = _np_sims(p, cross, similarity).mean()
    alpha = 0.0 if intra_mean is None else float(intra_mean - cross_mean)
    if not math.isfinite(alpha):
        raise LossError(f"non-finite similarity in alpha: {alpha}")
    return alpha


def _np_sims(p, pool, kind):
    if kind == "cosine":
        p = p / np.linalg.norm(p)
        pool = pool / np.linalg.norm(pool, axis=1, keepdims=True)
    return pool @ p


def msm_loss(p_t, h_positive, pools, config, alpha=None):
    """Contrastive loss of one masked position (autograd scalar).

    ``alpha=None`` recomputes the detached bias from the pools; pass a float
    to hold it frozen (required when driving finite differences, which must
    see the same constant that backprop saw).
    """
    if len(pools.cross) == 0:
        raise LossError("no cross-doc negatives")
    if alpha is None:
        alpha = compute_alpha(p_t, pools, config.similarity)
    p = p_t if isinstance(p_t, ag.Tensor) else ag.Tensor(np.asarray(p_t, dtype=np.float64))
    hp = h_positive if isinstance(h_positive, ag.Tensor) else ag.Tensor(np.asarray(h_positive, dtype=np.float64))

    pos = _sim_vector(p, _stack_pool([hp]), config.similarity)
    parts = [pos]
    if len(pools.intra) > 0:
        intra = _sim_vector(p, _stack_pool(pools.intra), config.similarity)
        parts.append(ag.add(intra, -config.mu * alpha))
    parts.append(_sim_vector(p, _stack_pool(pools.cross), config.similarity))
    logits = ag.concat(parts, axis=0)
    if not np.all(np.isfinite(logits.data)):
        raise LossError("non-finite similarity in loss logits")
    lse = ag.logsumexp(logits, axis=0)
    return ag.sub(lse, ag.reshape(pos, ()))


def msm_loss_rows(p_rows, h_own, h_cross, config, alphas=None, include_intra=True):
    """Batched loss for all masked positions of one document.

    ``p_rows[t]`` is the prediction for position t, ``h_own`` the document's
    clean projected sentence vectors and ``h_cross`` the shared cross-document
    pool. Row t uses ``h_own[t]`` as positive and the other rows as intra
    negatives. Returns (per-row loss tensor [n], per-row alphas ndarray).
    """
    n = p_rows.shape[0]
    if h_cross.shape[0] == 0:
        raise LossError("no cross-doc negatives")
    kind = config.similarity
    if kind == "cosine":
        p_rows = _normalize_rows(p_rows)
        h_own = _normalize_rows(h_own)
        h_cross = _normalize_rows(h_cross)
    sims_own = ag.matmul(p_rows, ag.swapaxes(h_own, 0, 1))      # [n, n]
    sims_cross = ag.matmul(p_rows, ag.swapaxes(h_cross, 0, 1))  # [n, C]
    if not (np.all(np.isfinite(sims_own.data)) and np.all(np.isfinite(sims_cross.data))):
        raise LossError("non-finite similarity in loss logits")

    eye = np.eye(n)
    if alphas is None:
        if include_intra and n > 1:
            intra_mean = (sims_own.data * (1.0 - eye)).sum(axis=1) / (n - 1)
            alphas = intra_mean - sims_cross.data.mean(axis=1)
        else:
            alphas = np.zeros(n)
    alphas = np.asarray(alphas, dtype=np.float64)

    diag = ag.reshape(ag.tsum(ag.mul(sims_own, eye), axis=1, keepdims=True), (n, 1))
    parts = [diag]
    if include_intra and n > 1:
        bias = (-config.mu * alphas).reshape(n, 1) + eye * NEG_INF  # mask own positive slot
        parts.append(ag.add(sims_own, bias))
    parts.append(sims_cross)
    logits = ag.concat(parts, axis=1)
    lse = ag.logsumexp(logits, axis=1)
    return ag.sub(lse, ag.reshape(diag, (n,))), alphas


def mlm_loss(logits, target_ids):
    """Mean token cross-entropy over masked positions; zero when none."""
    if isinstance(logits, ag.Tensor) and logits.data.shape[0] == 0:
        return ag.Tensor(np.asarray(0.0))
    return ag.cross_entropy(logits, target_ids)


def total_loss(msm, mlm, alpha=0.0):
    """Unweighted sum of the two objectives, as a diagnostic record."""
    msm, mlm = float(msm), float(mlm)
    return LossBreakdown(msm=msm, mlm=mlm, total=msm + mlm, alpha=float(alpha))


def msm_loss_oracle(p_t, h_positive, intra, cross, mu, similarity="dot"):
    """Straight-line scalar reference for the masked-sentence loss.

    Pure python arithmetic, no vectorization, no code shared with the
    training path. Used only by tests.
    """
    def sim(a, b):
        if similarity == "cosine":
            na = math.sqrt(sum(float(x) * float(x) for x in a))
            nb = math.sqrt(sum(float(x) * float(x) for x in b))
            return sum(float(x) * float(y) for x, y in zip(a, b)) / (na * nb)
        return sum(float(x) * float(y) for x, y in zip(a, b))

    if len(cross) == 0:
        raise LossError("no cross-doc negatives")
    s_pos = sim(p_t, h_positive)
    intra_sims = [sim(p_t, h) for h in intra]
    cross_sims = [sim(p_t, h) for h in cross]
    if intra_sims:
        alpha = sum(intra_sims) / len(intra_sims) - sum(cross_sims) / len(cross_sims)
    else:
        alpha = 0.0
    denom = math.exp(s_pos)
    for s in intra_sims:
        denom += math.exp(s - mu * alpha)
    for s in cross_sims:
        denom += math.exp(s)
    return -math.log(math.exp(s_pos) / denom)
