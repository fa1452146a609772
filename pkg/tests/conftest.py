"""Shared fixtures: tiny tokenized corpora for training-path tests."""

import pytest

from msm import corpus as cp


def make_tiny_corpus(num_docs=20, num_languages=2, seed=3, sentences=(3, 5),
                     tokens=(4, 8), latent_vocab=40, topics=3, vocab_cap=256):
    spec = cp.SyntheticCorpusSpec(
        num_languages=num_languages, latent_vocab_size=latent_vocab,
        num_topics=topics, topic_transition_stickiness=0.9,
        sentences_per_doc=sentences, tokens_per_sentence=tokens,
        num_docs=num_docs, seed=seed)
    corpus = cp.generate_synthetic_corpus(spec)
    vocab = cp.build_vocab([d.text for d in corpus.documents], max_size=vocab_cap)
    docs = []
    for rd in corpus.documents:
        docs.extend(cp.segment_and_split(rd.text, vocab, doc_id=rd.doc_id, lang=rd.lang))
    return corpus, docs, vocab


@pytest.fixture(scope="session")
def tiny_corpus():
    return make_tiny_corpus()
