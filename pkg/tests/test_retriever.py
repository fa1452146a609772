"""Exact search, metric definitions and bi-encoder fine-tuning."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msm import corpus as cp
from msm import model as md
from msm import pretrain as pt
from msm import retriever as rt
from tests.conftest import make_tiny_corpus


def _run(query_ids, ranked):
    return rt.RunResult(query_ids=query_ids, ranked=ranked)


def _encoded(vectors, doc_ids=None, lengths=None):
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    doc_ids = doc_ids or [f"d{i:03d}" for i in range(n)]
    lengths = np.asarray(lengths if lengths is not None else [100] * n)
    return rt.EncodedCorpus(doc_ids=doc_ids, embeddings=vectors, token_lengths=lengths)


class TestSearch:
    def test_orthonormal_two_docs(self):
        enc = _encoded([[1.0, 0.0], [0.0, 1.0]], doc_ids=["e1", "e2"])
        out = rt.search(enc, [1.0, 0.0], k=2)
        assert [d for d, _ in out] == ["e1", "e2"]
        assert out[0][1] == 1.0 and out[1][1] == 0.0

    def test_k_larger_than_corpus(self):
        enc = _encoded([[1.0, 0.0], [0.0, 1.0]])
        assert len(rt.search(enc, [1.0, 1.0], k=10)) == 2

    def test_ties_break_by_doc_id(self):
        enc = _encoded([[1.0], [1.0], [1.0]], doc_ids=["b", "a", "c"])
        out = rt.search(enc, [1.0], k=3)
        assert [d for d, _ in out] == ["a", "b", "c"]

    def test_row_order_invariance(self):
        rng = np.random.default_rng(0)
        vecs = rng.standard_normal((30, 8))
        ids = [f"d{i:02d}" for i in range(30)]
        enc = _encoded(vecs, doc_ids=ids)
        perm = rng.permutation(30)
        enc_shuffled = _encoded(vecs[perm], doc_ids=[ids[i] for i in perm])
        q = rng.standard_normal(8)
        a, b = rt.search(enc, q, 10), rt.search(enc_shuffled, q, 10)
        assert [d for d, _ in a] == [d for d, _ in b]
        np.testing.assert_allclose([s for _, s in a], [s for _, s in b], rtol=1e-12)

    def test_matches_naive_scan_oracle(self):
        rng = np.random.default_rng(1)
        vecs = rng.standard_normal((1000, 64))
        ids = [f"d{i:04d}" for i in range(1000)]
        enc = _encoded(vecs, doc_ids=ids)
        for _ in range(5):
            q = rng.standard_normal(64)
            got = rt.search(enc, q, 10)
            # independent scan: python loop over rows
            scored = sorted(((float(sum(a * b for a, b in zip(row, q))), did)
                             for row, did in zip(vecs, ids)),
                            key=lambda t: (-t[0], t[1]))
            want = [(did, s) for s, did in scored[:10]]
            assert [d for d, _ in got] == [d for d, _ in want]
            np.testing.assert_allclose([s for _, s in got], [s for _, s in want],
                                       rtol=1e-12)

    def test_batch_search_matches_single(self):
        rng = np.random.default_rng(2)
        enc = _encoded(rng.standard_normal((50, 8)))
        qs = rng.standard_normal((4, 8))
        batch = rt.search_batch(enc, [f"q{i}" for i in range(4)], qs, k=7)
        for qi in range(4):
            single = rt.search(enc, qs[qi], 7)
            assert [d for d, _ in batch.ranked[qi]] == [d for d, _ in single]
            np.testing.assert_allclose([s for _, s in batch.ranked[qi]],
                                       [s for _, s in single], rtol=1e-12)


class TestMetricValues:
    def test_mrr_definition(self):
        # ranks of first relevant: 1, 4, none -> (1 + 0.25 + 0) / 3
        run = _run(["q1", "q2", "q3"],
                   [[("a", 3.0), ("b", 2.0)],
                    [("c", 9.0), ("d", 8.0), ("e", 7.0), ("f", 6.0)],
                    [("g", 1.0)]])
        qrels = {"q1": {"a"}, "q2": {"f"}, "q3": {"zz"}}
        got = rt.mrr_at_k(run, qrels, k=10)
        assert abs(got - (1 + 0.25 + 0) / 3) < 1e-12

    def test_all_rank_one_gives_unity(self):
        run = _run(["q1", "q2"], [[("a", 1.0)], [("b", 1.0)]])
        qrels = {"q1": {"a"}, "q2": {"b"}}
        assert rt.mrr_at_k(run, qrels, 10) == 1.0
        assert rt.recall_at_k(run, qrels, 10) == 1.0

    def test_recall_counts_fraction_of_relevant(self):
        run = _run(["q"], [[("a", 3.0), ("b", 2.0), ("c", 1.0)]])
        qrels = {"q": {"a", "c", "zz"}}
        assert abs(rt.recall_at_k(run, qrels, 3) - 2 / 3) < 1e-12
        assert abs(rt.recall_at_k(run, qrels, 1) - 1 / 3) < 1e-12

    def test_map_worked_example(self):
        # relevants at ranks 1 and 3 with |relevant| = 2 -> (1 + 2/3) / 2
        run = _run(["q"], [[("a", 3.0), ("b", 2.0), ("c", 1.0)]])
        qrels = {"q": {"a", "c"}}
        assert abs(rt.map_at_k(run, qrels, 10) - (1 + 2 / 3) / 2) < 1e-12

    def test_map_single_relevant_rank_one(self):
        run = _run(["q"], [[("a", 1.0)]])
        assert rt.map_at_k(run, {"q": {"a"}}, 5) == 1.0

    def test_map_nothing_retrieved(self):
        run = _run(["q"], [[("x", 1.0), ("y", 0.5)]])
        assert rt.map_at_k(run, {"q": {"a"}}, 5) == 0.0

    def test_kilotoken_prefix_arithmetic(self):
        # twenty 100-token passages fit a 2000-token budget
        row = [(f"d{i:02d}", float(-i)) for i in range(30)]
        run = _run(["q"], [row])
        lengths = {f"d{i:02d}": 100 for i in range(30)}
        assert rt.recall_at_kilotokens(run, {"q": {"d19"}}, lengths, 2000) == 1.0
        assert rt.recall_at_kilotokens(run, {"q": {"d20"}}, lengths, 2000) == 0.0

    def test_kilotoken_crossing_passage_included(self):
        row = [("a", 3.0), ("b", 2.0), ("c", 1.0), ("d", 0.5)]
        run = _run(["q"], [row])
        lengths = {"a": 500, "b": 800, "c": 900, "d": 100}
        # budget 2000: a (500) + b (1300) + c crosses at 2200 and is included
        assert rt.recall_at_kilotokens(run, {"q": {"c"}}, lengths, 2000) == 1.0
        assert rt.recall_at_kilotokens(run, {"q": {"d"}}, lengths, 2000) == 0.0

    def test_kilotoken_rank_one_always_hits(self):
        run = _run(["q"], [[("a", 1.0)]])
        assert rt.recall_at_kilotokens(run, {"q": {"a"}}, {"a": 10_000}, 1) == 1.0

    def test_empty_relevance_set_rejected(self):
        run = _run(["q"], [[("a", 1.0)]])
        with pytest.raises(rt.RetrieverError):
            rt.mrr_at_k(run, {"q": set()}, 5)

    def test_against_slow_scorer_on_random_runs(self):
        rng = np.random.default_rng(3)
        docs = [f"d{i}" for i in range(40)]
        qids = [f"q{i}" for i in range(20)]
        ranked = []
        qrels = {}
        for q in qids:
            perm = rng.permutation(40)
            ranked.append([(docs[i], float(40 - r)) for r, i in enumerate(perm)])
            qrels[q] = set(rng.choice(docs, size=rng.integers(1, 5), replace=False))
        run = _run(qids, ranked)
        for k in (1, 5, 10, 40):
            slow_mrr = np.mean([next((1 / r for r, (d, _) in enumerate(row[:k], 1)
                                      if d in qrels[q]), 0.0)
                                for q, row in zip(qids, ranked)])
            slow_rec = np.mean([len(qrels[q] & {d for d, _ in row[:k]}) / len(qrels[q])
                                for q, row in zip(qids, ranked)])
            assert abs(rt.mrr_at_k(run, qrels, k) - slow_mrr) < 1e-12
            assert abs(rt.recall_at_k(run, qrels, k) - slow_rec) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_metrics_bounded_and_monotone_in_k(self, seed):
        rng = np.random.default_rng(seed)
        docs = [f"d{i}" for i in range(15)]
        perm = rng.permutation(15)
        run = _run(["q"], [[(docs[i], float(15 - r)) for r, i in enumerate(perm)]])
        qrels = {"q": set(rng.choice(docs, size=3, replace=False))}
        lengths = {d: int(rng.integers(50, 300)) for d in docs}
        prev = {"mrr": 0.0, "rec": 0.0, "map": 0.0}
        for k in (1, 3, 5, 10, 15):
            vals = {"mrr": rt.mrr_at_k(run, qrels, k),
                    "rec": rt.recall_at_k(run, qrels, k),
                    "map": rt.map_at_k(run, qrels, k)}
            for key, v in vals.items():
                assert 0.0 <= v <= 1.0
            assert vals["mrr"] >= prev["mrr"] - 1e-12
            assert vals["rec"] >= prev["rec"] - 1e-12
            prev = vals
        r_small = rt.recall_at_kilotokens(run, qrels, lengths, 200)
        r_big = rt.recall_at_kilotokens(run, qrels, lengths, 5000)
        assert 0.0 <= r_small <= r_big <= 1.0


class TestRunFiles:
    def test_trec_roundtrip_and_pure_eval(self, tmp_path):
        rng = np.random.default_rng(4)
        enc = _encoded(rng.standard_normal((20, 6)))
        qs = rng.standard_normal((3, 6))
        run = rt.search_batch(enc, ["q0", "q1", "q2"], qs, k=8)
        path = tmp_path / "run.trec"
        rt.write_trec_run(path, run)
        back = rt.read_trec_run(path)
        assert back.query_ids == run.query_ids
        assert back.doc_lists() == run.doc_lists()
        qrels = {q: {run.ranked[i][2][0]} for i, q in enumerate(run.query_ids)}
        m1 = rt.mrr_at_k(back, qrels, 8)
        m2 = rt.mrr_at_k(rt.read_trec_run(path), qrels, 8)
        assert m1 == m2

    def test_trec_line_format(self, tmp_path):
        run = _run(["q7"], [[("docA", 1.25)]])
        path = tmp_path / "r.trec"
        rt.write_trec_run(path, run, tag="t1")
        assert path.read_text() == "q7 Q0 docA 1 1.250000 t1\n"

    def test_qrels_roundtrip(self, tmp_path):
        qrels = {"q1": {"a", "b"}, "q2": {"c"}}
        path = tmp_path / "q.tsv"
        rt.write_qrels(path, qrels)
        assert rt.read_qrels(path) == qrels

    def test_token_lengths_roundtrip(self, tmp_path):
        enc = _encoded(np.zeros((2, 3)), doc_ids=["a", "b"], lengths=[7, 9])
        path = tmp_path / "len.tsv"
        rt.write_token_lengths(path, enc)
        assert rt.read_token_lengths(path) == {"a": 7, "b": 9}


class TestFinetune:
    def _export(self, tmp_path, docs, vocab, steps=2):
        cfg = pt.PretrainConfig(dim=16, sent_layers=1, doc_layers=1, heads=2,
                                batch_docs=4, total_steps=steps, warmup_steps=0,
                                learning_rate=1e-3, seed=1)
        pt.run_pretraining(docs, len(vocab), cfg, out_dir=tmp_path / "run")
        return md.load_model(tmp_path / "run" / "export")

    def test_batch_too_small_rejected(self):
        with pytest.raises(rt.RetrieverError):
            rt.FinetuneConfig(batch_pairs=1)

    def test_needs_enough_pairs(self, tmp_path, tiny_corpus):
        corpus, docs, vocab = tiny_corpus
        mp = self._export(tmp_path, docs, vocab)
        pairs = cp.make_retrieval_pairs(corpus, "L0", seed=1)[:3]
        with pytest.raises(rt.RetrieverError, match="batch_pairs"):
            rt.finetune_biencoder(mp, pairs, vocab, rt.FinetuneConfig(steps=1, batch_pairs=8))

    def test_zero_lr_keeps_zero_shot_metrics(self, tmp_path, tiny_corpus):
        corpus, docs, vocab = tiny_corpus
        mp = self._export(tmp_path, docs, vocab)
        pairs = cp.make_retrieval_pairs(corpus, "L0", seed=1)
        items = [(p.positive_doc_id, p.positive_text) for p in pairs]
        enc0 = rt.encode_corpus(mp, items, vocab)
        q0 = rt.encode_texts(mp, [p.query_text for p in pairs], vocab)
        base = rt.search_batch(enc0, [p.positive_doc_id for p in pairs], q0, k=10)
        cfg = rt.FinetuneConfig(steps=5, batch_pairs=4, learning_rate=0.0,
                                warmup_steps=0, seed=3)
        rt.finetune_biencoder(mp, pairs, vocab, cfg)
        enc1 = rt.encode_corpus(mp, items, vocab)
        q1 = rt.encode_texts(mp, [p.query_text for p in pairs], vocab)
        after = rt.search_batch(enc1, [p.positive_doc_id for p in pairs], q1, k=10)
        assert base.doc_lists() == after.doc_lists()

    def test_finetune_beats_untrained_encoder(self, tmp_path):
        corpus, docs, vocab = make_tiny_corpus(num_docs=60, num_languages=1, seed=8)
        mp = self._export(tmp_path, docs, vocab, steps=10)
        pairs = cp.make_retrieval_pairs(corpus, "L0", seed=2)
        train = [p for p in pairs if p.latent_id % 5 != 0]
        held = [p for p in pairs if p.latent_id % 5 == 0]
        items = [(p.positive_doc_id, p.positive_text) for p in pairs]
        qrels = {p.positive_doc_id: {p.positive_doc_id} for p in held}

        def mrr(model):
            enc = rt.encode_corpus(model, items, vocab)
            qv = rt.encode_texts(model, [p.query_text for p in held], vocab)
            run = rt.search_batch(enc, [p.positive_doc_id for p in held], qv, k=10)
            return rt.mrr_at_k(run, qrels, 10)

        before = mrr(mp)
        cfg = rt.FinetuneConfig(steps=120, batch_pairs=8, learning_rate=5e-4,
                                warmup_steps=10, seed=4)
        rt.finetune_biencoder(mp, train, vocab, cfg)
        after = mrr(mp)
        assert after > before

    def test_finetune_deterministic(self, tmp_path, tiny_corpus):
        corpus, docs, vocab = tiny_corpus
        pairs = cp.make_retrieval_pairs(corpus, "L0", seed=5)
        outs = []
        for _ in range(2):
            mp = self._export(tmp_path, docs, vocab)
            cfg = rt.FinetuneConfig(steps=4, batch_pairs=4, seed=9, warmup_steps=0)
            _, history = rt.finetune_biencoder(mp, pairs, vocab, cfg)
            outs.append((history, mp.store["tok_emb"].data.copy()))
        assert outs[0][0] == outs[1][0]
        assert np.array_equal(outs[0][1], outs[1][1])
