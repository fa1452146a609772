"""Masked-sentence pretraining loop.

Every batch samples documents, masks each sentence position in turn (N
prediction instances for an N-sentence document, all sharing one clean
sentence-vector matrix), and optimizes the contrastive objective plus token
MLM with Adam under a linear warmup / linear decay schedule. The document
encoder and projection heads can be shared across languages or split per
language partition to probe cross-lingual transfer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import loss as ls
from . import model as md
from .checkpoint import load_arrays, save_arrays
from .corpus import Document, make_mlm_mask

SHARING_MODES = ("share_all", "sep_doc", "sep_doc_head")


class PretrainError(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    # model
    dim: int = 64
    sent_layers: int = 2
    doc_layers: int = 2
    heads: int = 4
    ff_dim: int = 0
    projection: str = "asymmetric"
    # objective
    mu: float = 0.5
    similarity: str = "dot"
    mlm_rate: float = 0.15
    msm_weight: float = 1.0           # 0 gives the MLM-only baseline
    mlm_weight: float = 1.0
    intra_negatives: bool = True
    cross_negative_cap: int = 512
    # schedule; 4e-5 is the reference full-scale rate, far too small at dim 64
    batch_docs: int = 8
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # language handling
    doc_encoder_sharing: str = "share_all"
    language_partition: str = ""      # "L0=0,L1=1"; empty = first lang alone
    dtype: str = "float64"

    def __post_init__(self):
        if self.cross_negative_cap < 1:
            raise PretrainError("cross_negative_cap must be >= 1")
        if self.warmup_steps > self.total_steps:
            raise PretrainError("warmup_steps must not exceed total_steps")
        if self.doc_encoder_sharing not in SHARING_MODES:
            raise PretrainError(f"unknown sharing mode {self.doc_encoder_sharing!r}")


def parse_partition(spec_str, langs):
    """Partition map lang -> group. Default: first language vs the rest."""
    langs = sorted(langs)
    if spec_str:
        mapping = {}
        for part in spec_str.split(","):
            lang, group = part.split("=")
            mapping[lang.strip()] = group.strip()
        return mapping
    if len(langs) == 1:
        return {langs[0]: "0"}
    return {langs[0]: "0", **{lg: "1" for lg in langs[1:]}}


def select_doc_encoder(sharing_mode, lang, partition):
    """(document-encoder group, head group) serving ``lang``."""
    if sharing_mode == "share_all":
        return "shared", "shared"
    if lang not in partition:
        raise PretrainError(f"unknown lang {lang!r}; partition covers {sorted(partition)}")
    group = partition[lang]
    if sharing_mode == "sep_doc":
        return group, "shared"
    return group, group


def build_model(config, langs, vocab_size):
    mcfg = md.ModelConfig(vocab_size=vocab_size, dim=config.dim,
                          sent_layers=config.sent_layers, doc_layers=config.doc_layers,
                          heads=config.heads, ff_dim=config.ff_dim,
                          projection=config.projection, dtype=config.dtype)
    partition = parse_partition(config.language_partition, langs)
    groups = tuple(sorted(set(partition.values())))
    if config.doc_encoder_sharing == "share_all":
        doc_groups, head_groups = ("shared",), ("shared",)
    elif config.doc_encoder_sharing == "sep_doc":
        doc_groups, head_groups = groups, ("shared",)
    else:
        doc_groups, head_groups = groups, groups
    return md.init_model_params(mcfg, seed=config.seed, doc_groups=doc_groups,
                                head_groups=head_groups, lang_partition=partition)


@dataclass
class PretrainBatch:
    docs: list[Document]
    sent_offsets: list[int]           # flat offsets; len(docs) + 1 entries
    cross_indices: list[np.ndarray]   # per doc, flat sentence indices of its cross pool
    mlm: list                         # MlmMaskedBatch per sentence, flat doc order

    @property
    def num_instances(self):
        return self.sent_offsets[-1]


def build_batch(documents, config, step, vocab_size):
    """Deterministic batch for one step: documents, cross pools, MLM masks."""
    if not documents:
        raise PretrainError("empty corpus")
    rng = np.random.default_rng((config.seed, step))
    n_take = min(config.batch_docs, len(documents))
    picked = rng.choice(len(documents), size=n_take, replace=False)
    docs = [documents[i] for i in picked]

    offsets = [0]
    for d in docs:
        offsets.append(offsets[-1] + d.num_sentences)
    total = offsets[-1]

    cross_indices = []
    for di, d in enumerate(docs):
        own = set(range(offsets[di], offsets[di + 1]))
        candidates = np.asarray([i for i in range(total) if i not in own])
        if candidates.size == 0:
            raise PretrainError("cross-doc negative pool is empty; "
                                "a batch needs at least two documents")
        if candidates.size > config.cross_negative_cap:
            candidates = np.sort(rng.choice(candidates, size=config.cross_negative_cap,
                                            replace=False))
        cross_indices.append(candidates)

    mlm = [make_mlm_mask(s, config.mlm_rate, rng, vocab_size)
           for d in docs for s in d.sentences]
    return PretrainBatch(docs=docs, sent_offsets=offsets,
                         cross_indices=cross_indices, mlm=mlm)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_store(cls, store):
        state = cls()
        for name, tensor in store.unique_items():
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state


def learning_rate_at(step, config):
    """Linear warmup to the peak rate, then linear decay to zero."""
    lr = config.learning_rate
    if config.warmup_steps > 0 and step <= config.warmup_steps:
        return lr * step / config.warmup_steps
    if config.total_steps <= config.warmup_steps:
        return lr
    return lr * max(0.0, config.total_steps - step) / (config.total_steps - config.warmup_steps)


def adam_update(store, state, lr, config):
    state.t += 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    for name, tensor in store.unique_items():
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / (1 - b1 ** state.t)
        vhat = state.v[name] / (1 - b2 ** state.t)
        tensor.data = tensor.data - lr * mhat / (np.sqrt(vhat) + eps)


def forward_batch(mp, batch, config, partition, frozen_alphas=None):
    """Loss tensor plus diagnostics for one batch.

    ``frozen_alphas`` (per-doc arrays) pins the detached bias for gradient
    checking; training always recomputes it from the current vectors.
    """
    all_sentences = [s for d in batch.docs for s in d.sentences]
    h_all = md.encode_sentences(mp, all_sentences)

    row_losses = []
    alpha_values = []
    for di, doc in enumerate(batch.docs):
        lo, hi = batch.sent_offsets[di], batch.sent_offsets[di + 1]
        doc_group, head_group = select_doc_encoder(config.doc_encoder_sharing,
                                                   doc.lang, partition)
        h_doc = ag.index_select(h_all, 0, np.arange(lo, hi))
        p_rows = md.encode_document_all_masks(mp, h_doc, group=doc_group)
        pp = md.project(mp, p_rows, side="p", group=head_group)
        hh_own = md.project(mp, h_doc, side="h", group=head_group)
        h_cross = ag.index_select(h_all, 0, batch.cross_indices[di])
        hh_cross = md.project(mp, h_cross, side="h", group=head_group)
        fa = None if frozen_alphas is None else frozen_alphas[di]
        lcfg = ls.LossConfig(mu=config.mu, similarity=config.similarity)
        rows, alphas = ls.msm_loss_rows(pp, hh_own, hh_cross, lcfg, alphas=fa,
                                        include_intra=config.intra_negatives)
        row_losses.append(rows)
        alpha_values.append(alphas)

    msm_t = ag.tmean(ag.concat(row_losses, axis=0))
    logits, targets = md.mlm_logits(mp, batch.mlm)
    mlm_t = ls.mlm_loss(logits, targets)
    total_t = ag.add(ag.scale(msm_t, config.msm_weight), ag.scale(mlm_t, config.mlm_weight))
    diag = ls.total_loss(config.msm_weight * msm_t.item(),
                         config.mlm_weight * mlm_t.item(),
                         alpha=float(np.mean(np.concatenate(alpha_values))))
    return total_t, diag, alpha_values


def train_step(mp, opt_state, batch, config, step, partition):
    total_t, diag, _ = forward_batch(mp, batch, config, partition)
    if not np.isfinite(total_t.data):
        raise PretrainError(f"non-finite loss at step {step}: msm={diag.msm} "
                            f"mlm={diag.mlm} alpha={diag.alpha}")
    mp.store.zero_grad()
    total_t.backward()
    adam_update(mp.store, opt_state, learning_rate_at(step, config), config)
    return diag


def run_pretraining(documents, vocab_size, config, out_dir=None, log_fn=None):
    """Full pretraining run; returns (model, per-step LossBreakdown list).

    Writes ``log.tsv``, a full ``checkpoint/`` and a sentence-encoder-only
    ``export/`` under ``out_dir`` when given.
    """
    langs = sorted({d.lang for d in documents})
    partition = parse_partition(config.language_partition, langs)
    mp = build_model(config, langs, vocab_size)
    opt = AdamState.for_store(mp.store)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_lines = ["step\tmsm\tmlm\ttotal\talpha_mean"]
    history = []
    for step in range(1, config.total_steps + 1):
        batch = build_batch(documents, config, step, vocab_size)
        diag = train_step(mp, opt, batch, config, step, partition)
        history.append(diag)
        log_lines.append(f"{step}\t{diag.msm:.10e}\t{diag.mlm:.10e}"
                         f"\t{diag.total:.10e}\t{diag.alpha:.10e}")
        if log_fn is not None:
            log_fn(step, diag)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "log.tsv").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
        save_checkpoint(mp, opt, out_dir / "checkpoint")
        md.save_model(mp, out_dir / "export", export=True)
    return mp, history


def save_checkpoint(mp, opt_state, dir_path):
    """Full checkpoint: model arrays plus Adam moments."""
    md.save_model(mp, dir_path)
    opt_arrays = {}
    for name, arr in opt_state.m.items():
        opt_arrays[f"m.{name}"] = arr
    for name, arr in opt_state.v.items():
        opt_arrays[f"v.{name}"] = arr
    save_arrays(Path(dir_path) / "optimizer", opt_arrays, meta={"t": opt_state.t})


def load_checkpoint(dir_path, for_training=False):
    """Load a checkpoint; refuses sentence-encoder exports when training."""
    mp = md.load_model(dir_path)
    if for_training and not mp.has_document_encoder:
        raise PretrainError(
            f"checkpoint at {dir_path} is a fine-tune export (no document encoder); "
            "pretraining needs a full checkpoint")
    opt_dir = Path(dir_path) / "optimizer"
    opt = None
    if opt_dir.exists():
        arrays, meta = load_arrays(opt_dir)
        opt = AdamState(t=int(meta.get("t", 0)))
        for key, arr in arrays.items():
            kind, name = key.split(".", 1)
            (opt.m if kind == "m" else opt.v)[name] = arr
    return mp, opt


def config_to_dict(config):
    return asdict(config)
