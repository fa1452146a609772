"""Corpus handling: tokenization, document segmentation, synthetic generation.

Documents are newline-separated sentences of whitespace tokens. Sentences are
capped at 64 content tokens and documents at 32 sentences. The synthetic
generator emits parallel renderings of latent topic-chain documents, one per
language, with fully disjoint surface vocabularies so any cross-lingual
transfer must come from structure rather than shared tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
MAX_SENTENCE_TOKENS = 64          # content tokens, before [CLS]/[SEP]
MAX_DOC_SENTENCES = 32


class CorpusError(ValueError):
    pass


@dataclass
class Vocab:
    tokens: list[str]
    id_of: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id_of:
            self.id_of = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode_token(self, tok):
        return self.id_of.get(tok, UNK)

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tokens=tokens)


@dataclass
class Sentence:
    token_ids: np.ndarray  # [CLS] content... [SEP]

    @property
    def content_length(self):
        return len(self.token_ids) - 2

    def __post_init__(self):
        ids = np.asarray(self.token_ids, dtype=np.int64)
        if ids[0] != CLS or ids[-1] != SEP:
            raise CorpusError("sentence must start with [CLS] and end with [SEP]")
        if len(ids) - 2 > MAX_SENTENCE_TOKENS:
            raise CorpusError(f"sentence exceeds {MAX_SENTENCE_TOKENS} content tokens")
        self.token_ids = ids


@dataclass
class Document:
    doc_id: str
    lang: str
    sentences: list[Sentence]

    def __post_init__(self):
        if not 1 <= len(self.sentences) <= MAX_DOC_SENTENCES:
            raise CorpusError(f"document must hold 1..{MAX_DOC_SENTENCES} sentences, "
                              f"got {len(self.sentences)}")

    @property
    def num_sentences(self):
        return len(self.sentences)


def build_vocab(raw_corpus, max_size):
    """Frequency-ranked whitespace vocabulary with reserved ids 0..4.

    Ties are broken lexicographically; everything beyond ``max_size`` maps
    to [UNK] at encode time.
    """
    if max_size < 16:
        raise CorpusError("max_size must be >= 16")
    counts: dict[str, int] = {}
    any_text = False
    for text in raw_corpus:
        for tok in text.split():
            any_text = True
            counts[tok] = counts.get(tok, 0) + 1
    if not any_text:
        raise CorpusError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: max_size - len(RESERVED_TOKENS)]]
    return Vocab(tokens=list(RESERVED_TOKENS) + keep)


def tokenize_sentence(line, vocab):
    """One text line to a [CLS] ids [SEP] array, truncated at 64 content tokens."""
    toks = line.split()[:MAX_SENTENCE_TOKENS]
    ids = [CLS] + [vocab.encode_token(t) for t in toks] + [SEP]
    return Sentence(token_ids=np.asarray(ids, dtype=np.int64))


def segment_and_split(raw_doc, vocab, doc_id="doc", lang="L0"):
    """Newline-separated text to Documents of at most 32 sentences each.

    Oversize documents are split greedily into consecutive chunks; order is
    preserved and chunk doc_ids get a ``#<k>`` suffix.
    """
    lines = [ln for ln in raw_doc.split("\n") if ln.strip()]
    if not lines:
        raise CorpusError("empty document")
    sentences = [tokenize_sentence(ln, vocab) for ln in lines]
    if len(sentences) <= MAX_DOC_SENTENCES:
        return [Document(doc_id=doc_id, lang=lang, sentences=sentences)]
    docs = []
    for k, start in enumerate(range(0, len(sentences), MAX_DOC_SENTENCES)):
        chunk = sentences[start:start + MAX_DOC_SENTENCES]
        docs.append(Document(doc_id=f"{doc_id}#{k}", lang=lang, sentences=chunk))
    return docs


# ---------------------------------------------------------------------------
# synthetic parallel corpus
# ---------------------------------------------------------------------------

@dataclass
class SyntheticCorpusSpec:
    num_languages: int = 2
    latent_vocab_size: int = 300
    num_topics: int = 8
    topic_transition_stickiness: float = 0.9
    sentences_per_doc: tuple[int, int] = (4, 8)
    tokens_per_sentence: tuple[int, int] = (6, 12)
    num_docs: int = 1000              # latent documents; each rendered per language
    seed: int = 0

    def __post_init__(self):
        if min(self.num_languages, self.latent_vocab_size, self.num_topics,
               self.num_docs) <= 0:
            raise CorpusError("all counts must be positive")
        # 1.0 is admitted as the degenerate single-topic-per-document case
        if not 0.0 < self.topic_transition_stickiness <= 1.0:
            raise CorpusError("stickiness must lie in (0, 1]")
        for lo, hi in (self.sentences_per_doc, self.tokens_per_sentence):
            if lo <= 0 or hi < lo:
                raise CorpusError("ranges must be positive and ordered")
        if self.sentences_per_doc[1] > MAX_DOC_SENTENCES:
            raise CorpusError(f"sentences_per_doc cap is {MAX_DOC_SENTENCES}")


@dataclass
class RawDocument:
    doc_id: str
    lang: str
    text: str            # "\n"-separated sentences of whitespace tokens
    latent_id: int = -1


@dataclass
class SyntheticCorpus:
    spec: SyntheticCorpusSpec
    documents: list[RawDocument]                      # all languages, latent-major order
    alignment: list[tuple[int, str, str]]             # (latent_id, lang, doc_id)
    latent_sentences: list[list[np.ndarray]]          # per latent doc, latent token ids
    latent_topics: list[list[int]]                    # per latent doc, topic per sentence

    def languages(self):
        return sorted({d.lang for d in self.documents})

    def docs_for_lang(self, lang):
        return [d for d in self.documents if d.lang == lang]


def lang_tag(lang_index):
    return f"L{lang_index}"


def surface_token(lang_index, latent_token):
    return f"L{lang_index}_{latent_token}"


def _doc_id(lang_index, latent_id):
    return f"{lang_tag(lang_index)}-{latent_id:05d}"


def generate_synthetic_corpus(spec):
    """Sample latent topic-chain documents and render them per language.

    Deterministic in ``spec.seed``: topic token distributions come from the
    master seed and each latent document uses the sub-seed ``seed ^ index``,
    so generation may be parallelized across documents without changing output.
    """
    master = np.random.default_rng(spec.seed)
    topic_token_probs = master.dirichlet(
        np.full(spec.latent_vocab_size, 0.08), size=spec.num_topics)

    documents = []
    alignment = []
    latent_sentences = []
    latent_topics = []
    s_lo, s_hi = spec.sentences_per_doc
    t_lo, t_hi = spec.tokens_per_sentence
    for latent_id in range(spec.num_docs):
        rng = np.random.default_rng(spec.seed ^ latent_id)
        n_sent = int(rng.integers(s_lo, s_hi + 1))
        topics = [int(rng.integers(spec.num_topics))]
        for _ in range(n_sent - 1):
            if rng.random() < spec.topic_transition_stickiness or spec.num_topics == 1:
                topics.append(topics[-1])
            else:
                others = [t for t in range(spec.num_topics) if t != topics[-1]]
                topics.append(int(others[rng.integers(len(others))]))
        sent_tokens = []
        for topic in topics:
            n_tok = int(rng.integers(t_lo, t_hi + 1))
            toks = rng.choice(spec.latent_vocab_size, size=n_tok,
                              p=topic_token_probs[topic])
            sent_tokens.append(np.asarray(toks, dtype=np.int64))
        latent_sentences.append(sent_tokens)
        latent_topics.append(topics)
        for li in range(spec.num_languages):
            text = "\n".join(
                " ".join(surface_token(li, v) for v in sent) for sent in sent_tokens)
            did = _doc_id(li, latent_id)
            documents.append(RawDocument(doc_id=did, lang=lang_tag(li),
                                         text=text, latent_id=latent_id))
            alignment.append((latent_id, lang_tag(li), did))
    return SyntheticCorpus(spec=spec, documents=documents, alignment=alignment,
                           latent_sentences=latent_sentences, latent_topics=latent_topics)


# ---------------------------------------------------------------------------
# retrieval pairs
# ---------------------------------------------------------------------------

@dataclass
class RetrievalPair:
    query_text: str
    positive_doc_id: str
    positive_text: str
    latent_id: int = -1


def make_retrieval_pairs(corpus, lang, seed, dropout=0.2):
    """One (query, positive passage) pair per document of ``lang``.

    The query is a randomly chosen sentence with token dropout; the positive
    is that sentence plus its immediate neighbours (clipped at document
    edges), so the undropped query is an exact substring of its positive.
    Documents with fewer than two sentences are skipped. The per-document
    draw depends only on (seed, latent_id), so pairs are parallel across
    languages.
    """
    pairs = []
    for doc in corpus.docs_for_lang(lang):
        sents = doc.text.split("\n")
        n = len(sents)
        if n < 2:
            continue
        rng = np.random.default_rng((seed, doc.latent_id))
        t = int(rng.integers(n))
        toks = sents[t].split()
        if dropout > 0.0:
            keep = rng.random(len(toks)) >= dropout
            kept = [tok for tok, k in zip(toks, keep) if k]
            if not kept:
                kept = [toks[0]]
        else:
            kept = toks
        lo, hi = max(0, t - 1), min(n - 1, t + 1)
        pairs.append(RetrievalPair(
            query_text=" ".join(kept),
            positive_doc_id=doc.doc_id,
            positive_text="\n".join(sents[lo:hi + 1]),
            latent_id=doc.latent_id,
        ))
    return pairs


# ---------------------------------------------------------------------------
# MLM masking
# ---------------------------------------------------------------------------

@dataclass
class MlmMaskedBatch:
    input_ids: np.ndarray       # ids with masking applied
    target_ids: np.ndarray      # original ids at mask_positions
    mask_positions: np.ndarray  # indices into input_ids


def make_mlm_mask(sentence, rate, rng, vocab_size):
    """BERT-style masking: each content position iid with ``rate``, then
    80% [MASK] / 10% random id / 10% unchanged. Special tokens never masked."""
    if not 0.0 < rate < 1.0:
        raise CorpusError(f"mask rate must lie in (0, 1), got {rate}")
    ids = np.asarray(sentence.token_ids, dtype=np.int64).copy()
    content = np.arange(1, len(ids) - 1)
    picked = content[rng.random(len(content)) < rate]
    targets = ids[picked].copy()
    lo = len(RESERVED_TOKENS)
    for pos in picked:
        r = rng.random()
        if r < 0.8:
            ids[pos] = MASK
        elif r < 0.9 and vocab_size > lo:
            ids[pos] = int(rng.integers(lo, vocab_size))
        # else unchanged (still predicted)
    return MlmMaskedBatch(input_ids=ids, target_ids=targets,
                          mask_positions=picked.astype(np.int64))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_documents_jsonl(path, documents):
    with open(path, "w", encoding="utf-8") as fh:
        for d in documents:
            fh.write(json.dumps({"doc_id": d.doc_id, "lang": d.lang, "text": d.text},
                                sort_keys=True) + "\n")


def read_documents_jsonl(path):
    docs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        docs.append(RawDocument(doc_id=obj["doc_id"], lang=obj["lang"], text=obj["text"]))
    return docs


def write_alignment_tsv(path, alignment):
    with open(path, "w", encoding="utf-8") as fh:
        for latent_id, lang, doc_id in alignment:
            fh.write(f"{latent_id}\t{lang}\t{doc_id}\n")


def read_alignment_tsv(path):
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        latent, lang, doc_id = line.split("\t")
        rows.append((int(latent), lang, doc_id))
    return rows


def write_pairs_tsv(path, pairs):
    # sentence breaks inside the positive are escaped as literal \n
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            pos = p.positive_text.replace("\n", "\\n")
            fh.write(f"{p.query_text}\t{p.positive_doc_id}\t{pos}\n")


def read_pairs_tsv(path):
    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        q, did, pos = line.split("\t")
        pairs.append(RetrievalPair(query_text=q, positive_doc_id=did,
                                   positive_text=pos.replace("\\n", "\n")))
    return pairs
