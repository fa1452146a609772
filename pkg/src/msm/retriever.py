"""Bi-encoder fine-tuning, exact dense search and retrieval metrics.

Fine-tuning uses one shared tower (the exported sentence encoder) for both
queries and passages, in-batch softmax negatives and dot-product scoring;
projection heads play no role here. Search is an exhaustive scan with a
canonical tie rule so results do not depend on corpus row order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import model as md
from .corpus import CLS, SEP, MAX_SENTENCE_TOKENS
from .pretrain import AdamState, adam_update, learning_rate_at


class RetrieverError(RuntimeError):
    pass


@dataclass
class FinetuneConfig:
    steps: int = 500
    batch_pairs: int = 16
    learning_rate: float = 3e-4
    warmup_steps: int = 25
    total_steps: int = 0              # 0 mirrors steps; kept for the lr schedule
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.total_steps == 0:
            self.total_steps = self.steps
        if self.batch_pairs < 2:
            raise RetrieverError("in-batch negatives need batch_pairs >= 2")


def text_to_ids(text, vocab):
    """Flatten a possibly multi-sentence text into one capped token sequence."""
    toks = text.replace("\n", " ").split()[:MAX_SENTENCE_TOKENS]
    return np.asarray([CLS] + [vocab.encode_token(t) for t in toks] + [SEP], dtype=np.int64)


def encode_texts(mp, texts, vocab, batch_size=256):
    """CLS embeddings for a list of texts as an [n, d] float array."""
    out = []
    for lo in range(0, len(texts), batch_size):
        chunk = [text_to_ids(t, vocab) for t in texts[lo:lo + batch_size]]
        out.append(md.encode_sentences(mp, chunk).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, mp.config.dim))


def in_batch_loss(mp, queries_ids, passages_ids):
    """Mean -log softmax over the diagonal of the B x B score matrix."""
    b = len(queries_ids)
    q = md.encode_sentences(mp, queries_ids)
    p = md.encode_sentences(mp, passages_ids)
    scores = ag.matmul(q, ag.swapaxes(p, 0, 1))
    return ag.cross_entropy(scores, np.arange(b))


def finetune_biencoder(mp, pairs, vocab, config, log_fn=None):
    """DPR-style fine-tuning of a sentence-encoder checkpoint, in place.

    ``pairs`` are (query_text, positive_doc_id, positive_text) records; each
    step samples a batch and treats the other passages as negatives.
    Deterministic given ``config.seed``.
    """
    if len(pairs) < config.batch_pairs:
        raise RetrieverError(f"need at least batch_pairs={config.batch_pairs} pairs, "
                             f"got {len(pairs)}")
    opt = AdamState.for_store(mp.store)
    history = []
    for step in range(1, config.steps + 1):
        rng = np.random.default_rng((config.seed, step))
        picked = rng.choice(len(pairs), size=config.batch_pairs, replace=False)
        qs = [text_to_ids(pairs[i].query_text, vocab) for i in picked]
        ps = [text_to_ids(pairs[i].positive_text, vocab) for i in picked]
        loss = in_batch_loss(mp, qs, ps)
        if not np.isfinite(loss.data):
            raise RetrieverError(f"non-finite fine-tune loss at step {step}")
        mp.store.zero_grad()
        loss.backward()
        adam_update(mp.store, opt, learning_rate_at(step, config), config)
        history.append(loss.item())
        if log_fn is not None:
            log_fn(step, loss.item())
    return mp, history


# ---------------------------------------------------------------------------
# corpus encoding and exact search
# ---------------------------------------------------------------------------

@dataclass
class EncodedCorpus:
    doc_ids: list[str]
    embeddings: np.ndarray            # [M, d]
    token_lengths: np.ndarray         # whitespace tokens per passage text

    def __post_init__(self):
        if len(self.doc_ids) != self.embeddings.shape[0]:
            raise RetrieverError("doc_ids and embeddings disagree on row count")
        if not np.all(np.isfinite(self.embeddings)):
            raise RetrieverError("non-finite corpus embeddings")

    def lengths_by_doc(self):
        return {doc: int(n) for doc, n in zip(self.doc_ids, self.token_lengths)}


@dataclass
class RunResult:
    query_ids: list[str]
    ranked: list[list[tuple[str, float]]]  # per query: (doc_id, score), best first

    def doc_lists(self):
        return [[doc for doc, _ in row] for row in self.ranked]


def encode_corpus(mp, items, vocab):
    """Embed (doc_id, text) passages; token lengths feed kilo-token recall."""
    doc_ids = [doc_id for doc_id, _ in items]
    texts = [text for _, text in items]
    emb = encode_texts(mp, texts, vocab)
    lengths = np.asarray([len(t.replace("\n", " ").split()) for t in texts], dtype=np.int64)
    return EncodedCorpus(doc_ids=doc_ids, embeddings=emb, token_lengths=lengths)


def _rank_order(scores, tie_rank):
    # descending score, ascending doc_id on ties; lexsort keys read right-left
    return np.lexsort((tie_rank, -scores))


def search(encoded, query_vec, k):
    """Exact dot-product top-k with deterministic tie-breaking."""
    scores = encoded.embeddings @ np.asarray(query_vec, dtype=encoded.embeddings.dtype)
    tie_rank = np.argsort(np.argsort(np.asarray(encoded.doc_ids)))
    order = _rank_order(scores, tie_rank)[: min(k, len(scores))]
    return [(encoded.doc_ids[i], float(scores[i])) for i in order]


def search_batch(encoded, query_ids, query_vecs, k):
    ids_arr = np.asarray(encoded.doc_ids)
    tie_rank = np.argsort(np.argsort(ids_arr))
    all_scores = query_vecs @ encoded.embeddings.T
    ranked = []
    for qi in range(len(query_ids)):
        order = _rank_order(all_scores[qi], tie_rank)[: min(k, ids_arr.size)]
        ranked.append([(encoded.doc_ids[i], float(all_scores[qi, i])) for i in order])
    return RunResult(query_ids=list(query_ids), ranked=ranked)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _check_qrels(run, qrels):
    missing = [q for q in run.query_ids if not qrels.get(q)]
    if missing:
        raise RetrieverError(f"queries without relevance judgments: {missing[:5]}")


def mrr_at_k(run, qrels, k):
    """Mean reciprocal rank of the first relevant hit within the top k."""
    _check_qrels(run, qrels)
    total = 0.0
    for qid, row in zip(run.query_ids, run.ranked):
        rel = qrels[qid]
        for rank, (doc, _) in enumerate(row[:k], start=1):
            if doc in rel:
                total += 1.0 / rank
                break
    return total / len(run.query_ids)


def recall_at_k(run, qrels, k):
    """Mean fraction of each query's relevant set found in the top k."""
    _check_qrels(run, qrels)
    total = 0.0
    for qid, row in zip(run.query_ids, run.ranked):
        rel = qrels[qid]
        hits = sum(1 for doc, _ in row[:k] if doc in rel)
        total += hits / len(rel)
    return total / len(run.query_ids)


def map_at_k(run, qrels, k):
    """Mean average precision at k, normalized by min(|relevant|, k)."""
    _check_qrels(run, qrels)
    total = 0.0
    for qid, row in zip(run.query_ids, run.ranked):
        rel = qrels[qid]
        hits = 0
        ap = 0.0
        for rank, (doc, _) in enumerate(row[:k], start=1):
            if doc in rel:
                hits += 1
                ap += hits / rank
        total += ap / min(len(rel), k)
    return total / len(run.query_ids)


def recall_at_kilotokens(run, qrels, token_lengths, budget_tokens):
    """Fraction of queries whose prefix within the token budget hits a relevant doc.

    The ranked list is walked accumulating passage lengths; the passage that
    crosses the budget is still included.
    """
    _check_qrels(run, qrels)
    total = 0.0
    for qid, row in zip(run.query_ids, run.ranked):
        rel = qrels[qid]
        used = 0
        for doc, _ in row:
            if used >= budget_tokens:
                break
            used += int(token_lengths[doc])
            if doc in rel:
                total += 1.0
                break
    return total / len(run.query_ids)


# ---------------------------------------------------------------------------
# run / qrels files
# ---------------------------------------------------------------------------

def write_trec_run(path, run, tag="msm"):
    with open(path, "w", encoding="utf-8") as fh:
        for qid, row in zip(run.query_ids, run.ranked):
            for rank, (doc, score) in enumerate(row, start=1):
                fh.write(f"{qid} Q0 {doc} {rank} {score:.6f} {tag}\n")


def read_trec_run(path):
    per_query: dict[str, list] = {}
    order = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        qid, _, doc, rank, score, _ = line.split()
        if qid not in per_query:
            per_query[qid] = []
            order.append(qid)
        per_query[qid].append((int(rank), doc, float(score)))
    ranked = []
    for qid in order:
        rows = sorted(per_query[qid])
        ranked.append([(doc, score) for _, doc, score in rows])
    return RunResult(query_ids=order, ranked=ranked)


def write_qrels(path, qrels):
    with open(path, "w", encoding="utf-8") as fh:
        for qid in qrels:
            for doc in sorted(qrels[qid]):
                fh.write(f"{qid}\t{doc}\t1\n")


def read_qrels(path):
    qrels: dict[str, set] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        qid, doc, _ = line.split("\t")
        qrels.setdefault(qid, set()).add(doc)
    return qrels


def write_token_lengths(path, encoded):
    with open(path, "w", encoding="utf-8") as fh:
        for doc, n in zip(encoded.doc_ids, encoded.token_lengths):
            fh.write(f"{doc}\t{int(n)}\n")


def read_token_lengths(path):
    lengths = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        doc, n = line.split("\t")
        lengths[doc] = int(n)
    return lengths
