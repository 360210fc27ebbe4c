import math

import numpy as np
import pytest

import neural_oie.inference as inf
from neural_oie.inference import (
    BeamConfig, ExtractStats, Extraction, Extractor, Hypothesis, beam_search, confidence, extract_corpus,
    extract_sentence, greedy_decode,
)
from neural_oie.model import ModelConfig, ModelParams, loss_forward, make_batch
from neural_oie.text import BOS_ID, EOS_ID, TuplePair, Vocabulary, build_vocab, encode_tuple, gen_synthetic, parse_tagged, tokenize
from neural_oie.training import prepare_examples, sgd_step

V = 16


def rand_params(seed, scale=1.0, **kw):
    cfg = ModelConfig(**{**dict(num_layers=1, hidden_dim=6, embed_dim=5, vocab_size=V, dropout=0.0), **kw})
    return ModelParams.init(cfg, seed, scale)


class TestBeamConfig:
    def test_defaults(self):
        b = BeamConfig()
        assert (b.beam_width, b.top_k, b.max_decode_len) == (10, 5, 80)

    @pytest.mark.parametrize("kw", [dict(top_k=11), dict(max_decode_len=6), dict(beam_width=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            BeamConfig(**kw)


class TestConfidence:
    def test_certain(self):
        assert confidence(Hypothesis((4, 5, EOS_ID), 0.0, True)) == 1.0

    def test_uniform_step_probability(self):
        p = 0.37
        h = Hypothesis((4, 5, 6, EOS_ID), 4 * math.log(p), True)
        assert confidence(h) == pytest.approx(p, rel=1e-14)

    def test_monotone_in_mean_logprob(self):
        a = Hypothesis((4, 5, EOS_ID), -1.0, True)
        b = Hypothesis((4, 5, 6, 7, EOS_ID), -1.0, True)
        assert confidence(a) < confidence(b)
        assert 0 < confidence(a) <= 1


class TestBeamSearch:
    def test_width_one_equals_greedy(self):
        rng = np.random.default_rng(0)
        for i in range(20):
            p = rand_params(i)
            src = rng.integers(4, V + 2, size=int(rng.integers(1, 6))).tolist()
            src = [s if s < V else V for s in src]  # at most one OOV id, numbered V
            (h,) = beam_search(src, p, BeamConfig(1, 1, 12))
            g = greedy_decode(src, p, 12)
            assert h.ids == g.ids and h.finished == g.finished
            assert h.logprob == pytest.approx(g.logprob, abs=1e-12)

    def test_sorted_and_well_formed(self):
        rng = np.random.default_rng(1)
        for i in range(10):
            p = rand_params(100 + i)
            src = rng.integers(4, V, size=4).tolist()
            hyps = beam_search(src, p, BeamConfig(6, 3, 10))
            assert 1 <= len(hyps) <= 6
            keys = [(-h.logprob, h.finish_step, h.ids) for h in hyps]
            assert keys == sorted(keys)
            for h in hyps:
                assert h.logprob <= 0
                if h.finished:
                    assert h.ids[-1] == EOS_ID and EOS_ID not in h.ids[:-1]
                    assert len(h.ids) == h.finish_step

    def test_scores_are_sequence_logprobs(self):
        from neural_oie.model import sequence_logprob

        p = rand_params(7)
        src = [4, 9, V]
        for h in beam_search(src, p, BeamConfig(4, 2, 9)):
            if h.finished:
                assert h.logprob == pytest.approx(sequence_logprob(src, (BOS_ID,) + h.ids, p), abs=1e-10)

    def test_unfinished_returned_when_nothing_finishes(self):
        p = rand_params(3)
        p.out_b.value[EOS_ID] = -1e4
        hyps = beam_search([4, 5], p, BeamConfig(3, 2, 7))
        assert len(hyps) == 3
        assert all(not h.finished and len(h.ids) == 7 for h in hyps)

    def test_ties_broken_lexicographically(self):
        # all-zero model: every token equally likely at every step
        p = ModelParams.zeros(ModelConfig(num_layers=1, hidden_dim=3, embed_dim=3, vocab_size=12, dropout=0.0))
        hyps = beam_search([4], p, BeamConfig(3, 1, 7))
        # ids 0, 1, 2 sort before EOS (3), so nothing ever finishes
        assert [h.ids for h in hyps] == [(0,) * 7, (0,) * 6 + (1,), (0,) * 6 + (2,)]
        assert not any(h.finished for h in hyps)

    def test_overfit_single_pair_top1_is_target(self):
        p = rand_params(5, 0.3, hidden_dim=16, embed_dim=8)
        src = [10, 11, V, 12]
        tgt = [BOS_ID, 4, 10, 5, 6, 11, V, 7, 8, 12, 9, EOS_ID]
        batch = make_batch([(src, tgt)], p.cfg)
        for _ in range(150):
            p.zero_grad()
            loss_forward(p, batch)[1].backward()
            sgd_step(p, 1.0, 5.0)
        assert beam_search(src, p, BeamConfig(5, 1, 20))[0].ids == tuple(tgt[1:])


def _overfit(pairs, steps=60, seed=0):
    """A small model trained to memorise ``pairs`` (tagged targets)."""
    data = [(p.sentence, encode_tuple(p)) for p in pairs]
    vocab = build_vocab((t for s, tg in data for t in (s, tg)), 40)
    cfg = ModelConfig(num_layers=1, hidden_dim=24, embed_dim=16, vocab_size=len(vocab), dropout=0.0)
    params = ModelParams.init(cfg, seed, 0.2)
    examples = prepare_examples(data, vocab)
    for _ in range(steps):
        for ex in examples:
            params.zero_grad()
            loss_forward(params, make_batch([ex], cfg))[1].backward()
            sgd_step(params, 1.0, 5.0)
    return params, vocab


DL = "deep learning is a subfield of machine learning"


@pytest.fixture(scope="module")
def dl_model():
    dl = TuplePair(tokenize(DL), ["deep", "learning"], ["is", "a", "subfield", "of"], ["machine", "learning"], 1.0)
    return _overfit([dl] + gen_synthetic(3, 7))


class TestExtractSentence:
    def test_finds_the_running_example(self, dl_model):
        params, vocab = dl_model
        out = extract_sentence(DL, params, vocab, BeamConfig(10, 5, 30))
        triples = [(e.arg1, e.rel, e.arg2) for e in out]
        assert (("deep", "learning"), ("is", "a", "subfield", "of"), ("machine", "learning")) in triples

    def test_extractions_are_valid(self, dl_model):
        params, vocab = dl_model
        stats = ExtractStats()
        out = extract_sentence(DL, params, vocab, BeamConfig(10, 5, 30), "s1", stats)
        assert 1 <= len(out) <= 5
        assert len({e.triple for e in out}) == len(out)
        assert [e.confidence for e in out] == sorted((e.confidence for e in out), reverse=True)
        for e in out:
            assert e.sentence_id == "s1" and 0 < e.confidence <= 1
            assert "<unk>" not in e.arg1 + e.rel + e.arg2
            pair = TuplePair(list(e.arg1 + e.rel + e.arg2), list(e.arg1), list(e.rel), list(e.arg2))
            assert parse_tagged(encode_tuple(pair)) == e.triple
        assert stats.sentences == 1 and stats.hypotheses == 10

    def test_all_malformed_gives_empty_list(self):
        p = rand_params(1)
        p.out_b.value[EOS_ID] = 50.0
        vocab = Vocabulary([f"w{i}" for i in range(V - 10)])
        stats = ExtractStats()
        assert extract_sentence("w1 w2 w3", p, vocab, BeamConfig(4, 2, 8), stats=stats) == []
        assert stats.hypotheses > 0 and stats.malformed + stats.with_unk == stats.hypotheses
        assert stats.extractions == 0

    def test_duplicates_and_unk(self, monkeypatch):
        vocab = Vocabulary(["a", "b", "c"])
        p = ModelParams.zeros(ModelConfig(num_layers=1, hidden_dim=2, embed_dim=2, vocab_size=len(vocab), dropout=0.0))
        tag = lambda *w: tuple(vocab.encode_target(list(w), [])[1:])  # noqa: E731
        good = tag("<arg1>", "a", "</arg1>", "<rel>", "b", "</rel>", "<arg2>", "c", "</arg2>")
        unk = tag("<arg1>", "a", "</arg1>", "<rel>", "zzz", "</rel>", "<arg2>", "c", "</arg2>")
        fake = [
            Hypothesis(good, -2.0, True, 10),
            Hypothesis(unk, -2.5, True, 10),
            Hypothesis(good, -1.0, True, 10),
            Hypothesis((4, EOS_ID), -3.0, True, 2),
        ]
        monkeypatch.setattr(inf, "beam_search", lambda *a, **k: fake)
        stats = ExtractStats()
        (e,) = extract_sentence("a b c", p, vocab, BeamConfig(4, 4, 10), stats=stats)
        assert e.confidence == pytest.approx(math.exp(-1.0 / 10))
        assert (stats.with_unk, stats.malformed, stats.extractions) == (1, 1, 1)

    def test_overlong_sentence_skipped(self):
        p = rand_params(0)
        stats = ExtractStats()
        assert extract_sentence(" ".join(["x"] * 101), p, Vocabulary([]), stats=stats) == []
        assert stats.skipped_sentences == 1

    def test_extractor_wrapper(self, dl_model):
        params, vocab = dl_model
        ex = Extractor(params, vocab, BeamConfig(10, 5, 30))
        assert ex.extract_sentence(DL) == extract_sentence(DL, params, vocab, BeamConfig(10, 5, 30))


class TestExtractCorpus:
    def test_empty_input(self, tmp_path):
        (tmp_path / "in.tsv").write_text("", encoding="utf-8")
        stats = extract_corpus(tmp_path / "in.tsv", rand_params(0), Vocabulary([]), BeamConfig(), tmp_path / "out.tsv")
        assert (tmp_path / "out.tsv").read_text() == ""
        assert (stats.sentences, stats.extractions, stats.malformed_rate) == (0, 0, 0.0)

    def test_deterministic_threads_and_order(self, tmp_path, dl_model):
        params, vocab = dl_model
        lines = [f"s{i}\t{p}" for i, p in enumerate([DL, "machine learning is a subfield of deep learning", DL])]
        (tmp_path / "in.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        beam = BeamConfig(6, 3, 30)
        extract_corpus(tmp_path / "in.tsv", params, vocab, beam, tmp_path / "a.tsv")
        extract_corpus(tmp_path / "in.tsv", params, vocab, beam, tmp_path / "b.tsv")
        extract_corpus(tmp_path / "in.tsv", params, vocab, beam, tmp_path / "c.tsv", threads=3)
        a = (tmp_path / "a.tsv").read_bytes()
        assert a == (tmp_path / "b.tsv").read_bytes() == (tmp_path / "c.tsv").read_bytes()
        ids = [ln.split("\t")[0] for ln in a.decode().splitlines()]
        assert ids == sorted(ids, key=lambda s: int(s[1:]))
        assert "s0" in ids and "s2" in ids

    def test_line_format(self):
        e = Extraction("7", ("a", "b"), ("c",), ("d",), 0.5)
        assert e.to_line() == "7\t0.500000\ta b\tc\td"
