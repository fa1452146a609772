"""Hierarchical encoder: sentence transformer, document transformer, heads.

The sentence encoder embeds tokens and returns the final-layer CLS state as
the sentence vector. The document encoder runs over a document's sentence
vectors (one learned vector substituted at the masked position, then sentence
position embeddings added); it has no token-type table. Projection heads map
document-side outputs and sentence-side vectors into the contrastive space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from .checkpoint import load_arrays, save_arrays
from .corpus import PAD, Sentence

INIT_STD = 0.02
ATTN_MASK_VALUE = -1e30


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    dim: int = 64
    sent_layers: int = 2
    doc_layers: int = 2
    heads: int = 4
    ff_dim: int = 0                     # 0 means 4 * dim
    max_sentence_tokens: int = 66       # [CLS] + 64 content + [SEP]
    max_doc_sentences: int = 32
    projection: str = "asymmetric"      # none | shared | asymmetric
    dtype: str = "float64"

    def __post_init__(self):
        if self.ff_dim == 0:
            self.ff_dim = 4 * self.dim
        if self.dim % self.heads != 0:
            raise ModelError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.sent_layers < 1 or self.doc_layers < 1:
            raise ModelError("encoders need at least one layer")
        if self.projection not in ("none", "shared", "asymmetric"):
            raise ModelError(f"unknown projection mode {self.projection!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class ModelParams:
    config: ModelConfig
    store: ag.ParamStore
    doc_groups: tuple = ("shared",)
    head_groups: tuple = ("shared",)
    lang_partition: dict = field(default_factory=dict)  # lang -> group name
    has_document_encoder: bool = True

    def doc_group_for(self, lang):
        if not self.lang_partition:
            return self.doc_groups[0]
        if lang not in self.lang_partition:
            raise ModelError(f"unknown lang {lang!r}; partition covers "
                             f"{sorted(self.lang_partition)}")
        group = self.lang_partition[lang]
        return group if group in self.doc_groups else self.doc_groups[0]

    def head_group_for(self, lang):
        if not self.lang_partition or len(self.head_groups) == 1:
            return self.head_groups[0]
        if lang not in self.lang_partition:
            raise ModelError(f"unknown lang {lang!r}; partition covers "
                             f"{sorted(self.lang_partition)}")
        return self.lang_partition[lang]


def _add_layer_params(store, prefix, dim, ff_dim, rng, dtype):
    def w(shape):
        return (rng.standard_normal(shape) * INIT_STD).astype(dtype)

    store.add(f"{prefix}.wq", w((dim, dim)))
    store.add(f"{prefix}.bq", np.zeros(dim, dtype=dtype))
    store.add(f"{prefix}.wk", w((dim, dim)))
    store.add(f"{prefix}.bk", np.zeros(dim, dtype=dtype))
    store.add(f"{prefix}.wv", w((dim, dim)))
    store.add(f"{prefix}.bv", np.zeros(dim, dtype=dtype))
    store.add(f"{prefix}.wo", w((dim, dim)))
    store.add(f"{prefix}.bo", np.zeros(dim, dtype=dtype))
    store.add(f"{prefix}.ln1_g", np.ones(dim, dtype=dtype))
    store.add(f"{prefix}.ln1_b", np.zeros(dim, dtype=dtype))
    store.add(f"{prefix}.w1", w((dim, ff_dim)))
    store.add(f"{prefix}.b1", np.zeros(ff_dim, dtype=dtype))
    store.add(f"{prefix}.w2", w((ff_dim, dim)))
    store.add(f"{prefix}.b2", np.zeros(dim, dtype=dtype))
    store.add(f"{prefix}.ln2_g", np.ones(dim, dtype=dtype))
    store.add(f"{prefix}.ln2_b", np.zeros(dim, dtype=dtype))


def _add_doc_encoder(store, group, cfg, rng):
    dt = cfg.np_dtype
    store.add(f"doc.{group}.sent_pos",
              (rng.standard_normal((cfg.max_doc_sentences, cfg.dim)) * INIT_STD).astype(dt))
    store.add(f"doc.{group}.mask_vec",
              (rng.standard_normal(cfg.dim) * INIT_STD).astype(dt))
    for i in range(cfg.doc_layers):
        _add_layer_params(store, f"doc.{group}.{i}", cfg.dim, cfg.ff_dim, rng, dt)


def _add_heads(store, group, cfg, rng):
    if cfg.projection == "none":
        return
    dt = cfg.np_dtype
    pw = store.add(f"head.{group}.p_w",
                   (rng.standard_normal((cfg.dim, cfg.dim)) * INIT_STD).astype(dt))
    pb = store.add(f"head.{group}.p_b", np.zeros(cfg.dim, dtype=dt))
    if cfg.projection == "shared":
        store.alias(f"head.{group}.h_w", pw)
        store.alias(f"head.{group}.h_b", pb)
    else:
        store.add(f"head.{group}.h_w",
                  (rng.standard_normal((cfg.dim, cfg.dim)) * INIT_STD).astype(dt))
        store.add(f"head.{group}.h_b", np.zeros(cfg.dim, dtype=dt))


def init_model_params(cfg, seed, doc_groups=("shared",), head_groups=("shared",),
                      lang_partition=None, with_document_encoder=True):
    """Fresh parameters, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    store = ag.ParamStore()
    store.add("tok_emb", (rng.standard_normal((cfg.vocab_size, cfg.dim)) * INIT_STD).astype(dt))
    store.add("tok_pos", (rng.standard_normal((cfg.max_sentence_tokens, cfg.dim)) * INIT_STD).astype(dt))
    for i in range(cfg.sent_layers):
        _add_layer_params(store, f"sent.{i}", cfg.dim, cfg.ff_dim, rng, dt)
    store.add("mlm_bias", np.zeros(cfg.vocab_size, dtype=dt))
    if with_document_encoder:
        for g in doc_groups:
            _add_doc_encoder(store, g, cfg, rng)
        for g in head_groups:
            _add_heads(store, g, cfg, rng)
    return ModelParams(config=cfg, store=store, doc_groups=tuple(doc_groups),
                       head_groups=tuple(head_groups),
                       lang_partition=dict(lang_partition or {}),
                       has_document_encoder=with_document_encoder)


def _transformer(x, store, prefix, n_layers, heads, attn_mask=None):
    """Post-LN transformer stack over the last two axes of ``x`` [..., T, d]."""
    for i in range(n_layers):
        p = f"{prefix}.{i}"
        attn = _attention(x, store, p, heads, attn_mask)
        x = ag.layer_norm(ag.add(x, attn), store[f"{p}.ln1_g"], store[f"{p}.ln1_b"])
        ff = ag.matmul(ag.gelu(ag.add(ag.matmul(x, store[f"{p}.w1"]), store[f"{p}.b1"])),
                       store[f"{p}.w2"])
        ff = ag.add(ff, store[f"{p}.b2"])
        x = ag.layer_norm(ag.add(x, ff), store[f"{p}.ln2_g"], store[f"{p}.ln2_b"])
    return x


def _attention(x, store, prefix, heads, attn_mask):
    shape = x.shape  # [..., T, d]
    t, d = shape[-2], shape[-1]
    k = d // heads
    lead = shape[:-2]

    def split(v):
        v = ag.reshape(v, lead + (t, heads, k))
        return ag.swapaxes(v, -2, -3)  # [..., heads, T, k]

    q = split(ag.add(ag.matmul(x, store[f"{prefix}.wq"]), store[f"{prefix}.bq"]))
    key = split(ag.add(ag.matmul(x, store[f"{prefix}.wk"]), store[f"{prefix}.bk"]))
    v = split(ag.add(ag.matmul(x, store[f"{prefix}.wv"]), store[f"{prefix}.bv"]))
    scores = ag.scale(ag.matmul(q, ag.swapaxes(key, -1, -2)), 1.0 / math.sqrt(k))
    if attn_mask is not None:
        scores = ag.add(scores, attn_mask)
    ctx = ag.matmul(ag.softmax(scores, axis=-1), v)       # [..., heads, T, k]
    ctx = ag.reshape(ag.swapaxes(ctx, -2, -3), lead + (t, d))
    out = ag.add(ag.matmul(ctx, store[f"{prefix}.wo"]), store[f"{prefix}.bo"])
    return out


def _pad_batch(id_arrays, max_len):
    """Stack variable-length id sequences into [S, T] plus an additive mask."""
    t = max(len(a) for a in id_arrays)
    if t > max_len:
        raise ModelError(f"sentence of {t} tokens exceeds position table ({max_len})")
    ids = np.full((len(id_arrays), t), PAD, dtype=np.int64)
    mask = np.full((len(id_arrays), 1, 1, t), ATTN_MASK_VALUE)
    for i, a in enumerate(id_arrays):
        ids[i, :len(a)] = a
        mask[i, 0, 0, :len(a)] = 0.0
    return ids, mask


def _sentence_ids(sentence):
    return sentence.token_ids if isinstance(sentence, Sentence) else np.asarray(sentence)


def _encode_token_batch(mp, ids, mask):
    cfg = mp.config
    t = ids.shape[1]
    emb = ag.embedding_lookup(mp.store["tok_emb"], ids)
    pos = ag.index_select(mp.store["tok_pos"], 0, np.arange(t))
    x = ag.add(emb, pos)
    return _transformer(x, mp.store, "sent", cfg.sent_layers, cfg.heads, attn_mask=mask)


def encode_sentences(mp, sentences):
    """Clean-pass sentence vectors: final-layer CLS state per sentence [S, d]."""
    ids, mask = _pad_batch([_sentence_ids(s) for s in sentences],
                           mp.config.max_sentence_tokens)
    hidden = _encode_token_batch(mp, ids, mask)
    cls = ag.index_select(hidden, 1, np.array([0]))
    return ag.reshape(cls, (len(sentences), mp.config.dim))


def encode_sentence(mp, sentence):
    """Single-sentence convenience wrapper returning a d-vector."""
    return ag.reshape(encode_sentences(mp, [sentence]), (mp.config.dim,))


def encode_document(mp, sentence_vectors, mask_position=None, group="shared"):
    """Context vectors for one document [N, d].

    Row ``mask_position`` of the input is replaced by the learned mask vector
    before sentence position embeddings are added; pass ``None`` to encode
    without masking.
    """
    if not mp.has_document_encoder:
        raise ModelError("this checkpoint has no document encoder")
    cfg = mp.config
    n = sentence_vectors.shape[0]
    if n > cfg.max_doc_sentences:
        raise ModelError(f"document of {n} sentences exceeds {cfg.max_doc_sentences}")
    h = sentence_vectors
    if mask_position is not None:
        if not 0 <= mask_position < n:
            raise ModelError(f"mask position {mask_position} out of range [0, {n})")
        onehot = np.zeros((n, 1))
        onehot[mask_position, 0] = 1.0
        h = ag.add(ag.mul(h, 1.0 - onehot),
                   ag.mul(ag.reshape(mp.store[f"doc.{group}.mask_vec"], (1, cfg.dim)), onehot))
    pos = ag.index_select(mp.store[f"doc.{group}.sent_pos"], 0, np.arange(n))
    x = ag.add(h, pos)
    return _transformer(x, mp.store, f"doc.{group}", cfg.doc_layers, cfg.heads)


def encode_document_all_masks(mp, sentence_vectors, group="shared"):
    """Masked predictions for every position at once.

    Builds N instances of the document, instance t with row t replaced by the
    mask vector, and returns row t of instance t's output: an [N, d] tensor
    of predictions aligned with the input rows.
    """
    if not mp.has_document_encoder:
        raise ModelError("this checkpoint has no document encoder")
    cfg = mp.config
    n = sentence_vectors.shape[0]
    if n > cfg.max_doc_sentences:
        raise ModelError(f"document of {n} sentences exceeds {cfg.max_doc_sentences}")
    eye = np.eye(n)[:, :, None]                           # [inst, row, 1]
    h = ag.reshape(sentence_vectors, (1, n, cfg.dim))
    masked = ag.add(ag.mul(h, 1.0 - eye),
                    ag.mul(ag.reshape(mp.store[f"doc.{group}.mask_vec"], (1, 1, cfg.dim)), eye))
    pos = ag.index_select(mp.store[f"doc.{group}.sent_pos"], 0, np.arange(n))
    x = ag.add(masked, pos)
    out = _transformer(x, mp.store, f"doc.{group}", cfg.doc_layers, cfg.heads)
    return ag.tsum(ag.mul(out, eye), axis=1)              # diagonal rows [N, d]


def project(mp, vectors, side, group="shared"):
    """Affine head per side; identity when the projection mode is none."""
    if side not in ("p", "h"):
        raise ModelError(f"side must be 'p' or 'h', got {side!r}")
    if mp.config.projection == "none":
        return vectors
    w = mp.store[f"head.{group}.{side}_w"]
    b = mp.store[f"head.{group}.{side}_b"]
    squeeze = False
    if vectors.ndim == 1:
        vectors = ag.reshape(vectors, (1, -1))
        squeeze = True
    out = ag.add(ag.matmul(vectors, w), b)
    return ag.reshape(out, (mp.config.dim,)) if squeeze else out


def mlm_logits(mp, masked_batches):
    """Vocabulary logits at the masked positions of a list of MlmMaskedBatch.

    Runs the masked token sequences through the sentence encoder body and
    projects the selected hidden states with the embedding-tied output head.
    Returns (logits [M, V], target ids [M]).
    """
    cfg = mp.config
    positions = []
    targets = []
    kept = []
    for b in masked_batches:
        if len(b.mask_positions) == 0:
            continue
        kept.append(b)
    if not kept:
        return ag.Tensor(np.zeros((0, cfg.vocab_size))), np.zeros(0, dtype=np.int64)
    ids, mask = _pad_batch([b.input_ids for b in kept], cfg.max_sentence_tokens)
    t = ids.shape[1]
    for row, b in enumerate(kept):
        for p in b.mask_positions:
            positions.append(row * t + p)
        targets.extend(b.target_ids.tolist())
    hidden = _encode_token_batch(mp, ids, mask)
    flat = ag.reshape(hidden, (len(kept) * t, cfg.dim))
    states = ag.index_select(flat, 0, np.asarray(positions))
    logits = ag.add(ag.matmul(states, ag.swapaxes(mp.store["tok_emb"], 0, 1)),
                    mp.store["mlm_bias"])
    return logits, np.asarray(targets, dtype=np.int64)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

SENTENCE_ENCODER_PREFIXES = ("tok_emb", "tok_pos", "sent.")


def _is_sentence_encoder_array(name):
    return name in ("tok_emb", "tok_pos") or name.startswith("sent.")


def model_meta(mp):
    meta = {"config": asdict(mp.config),
            "doc_groups": list(mp.doc_groups),
            "head_groups": list(mp.head_groups),
            "lang_partition": dict(mp.lang_partition),
            "has_document_encoder": mp.has_document_encoder}
    return meta


def save_model(mp, dir_path, export=False, extra_meta=None):
    """Write a checkpoint; ``export=True`` keeps only the sentence encoder
    (the document encoder and heads are pretraining machinery)."""
    arrays = mp.store.arrays()
    meta = model_meta(mp)
    if export:
        arrays = {k: v for k, v in arrays.items() if _is_sentence_encoder_array(k)}
        meta["has_document_encoder"] = False
        meta["doc_groups"] = []
        meta["head_groups"] = []
    if extra_meta:
        meta.update(extra_meta)
    save_arrays(dir_path, arrays, meta=meta)


def load_model(dir_path):
    arrays, meta = load_arrays(dir_path)
    cfg = ModelConfig(**meta["config"])
    mp = init_model_params(cfg, seed=0,
                           doc_groups=tuple(meta["doc_groups"]) or ("shared",),
                           head_groups=tuple(meta["head_groups"]) or ("shared",),
                           lang_partition=meta.get("lang_partition", {}),
                           with_document_encoder=bool(meta["has_document_encoder"]))
    if not meta["has_document_encoder"]:
        # rebuild with only sentence-encoder params
        store = ag.ParamStore()
        mp_clean = ModelParams(config=cfg, store=store, doc_groups=(),
                               head_groups=(), lang_partition={},
                               has_document_encoder=False)
        for name in ["tok_emb", "tok_pos"]:
            store.add(name, arrays[name])
        for i in range(cfg.sent_layers):
            for suffix in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                           "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b"):
                name = f"sent.{i}.{suffix}"
                store.add(name, arrays[name])
        if "mlm_bias" in arrays:
            store.add("mlm_bias", arrays["mlm_bias"])
        return mp_clean
    expected = {name for name, _ in mp.store.unique_items()}
    if set(arrays) != expected:
        missing = expected - set(arrays)
        extra = set(arrays) - expected
        raise ModelError(f"checkpoint arrays do not match architecture "
                         f"(missing={sorted(missing)}, extra={sorted(extra)})")
    for name, arr in arrays.items():
        if mp.store[name].shape != arr.shape:
            raise ModelError(f"shape mismatch for {name}: "
                             f"{mp.store[name].shape} vs {arr.shape}")
        mp.store[name].data = arr
    return mp
