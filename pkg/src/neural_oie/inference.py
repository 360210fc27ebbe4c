"""Greedy and beam-search decoding, and turning hypotheses into extractions."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import DecoderState, ModelParams, decode_step, start
from .text import (
    BOS_ID, EOS_ID, UNK, TaggedParseError, Triple, Vocabulary, load_sentences, parse_tagged, tokenize,
)

log = logging.getLogger(__name__)


@dataclass
class BeamConfig:
    beam_width: int = 10
    top_k: int = 5
    max_decode_len: int = 80

    def __post_init__(self):
        if self.beam_width < 1 or self.top_k < 1:
            raise ValueError("beam_width and top_k must be >= 1")
        if self.top_k > self.beam_width:
            raise ValueError("top_k cannot exceed beam_width")
        if self.max_decode_len < 7:
            raise ValueError("max_decode_len must allow a minimal tuple (7 tokens)")


@dataclass(frozen=True)
class Hypothesis:
    ids: tuple[int, ...]  # emitted extended ids, BOS excluded, EOS included when finished
    logprob: float
    finished: bool
    finish_step: int = 0


@dataclass(frozen=True)
class Extraction:
    sentence_id: str
    arg1: tuple[str, ...]
    rel: tuple[str, ...]
    arg2: tuple[str, ...]
    confidence: float

    @property
    def triple(self) -> Triple:
        return Triple(self.arg1, self.rel, self.arg2)

    def to_line(self) -> str:
        return "\t".join(
            [self.sentence_id, f"{self.confidence:.6f}", " ".join(self.arg1), " ".join(self.rel), " ".join(self.arg2)]
        )


def confidence(h: Hypothesis) -> float:
    """Length-normalised sequence probability ``exp(logprob / length)``."""
    if not h.ids:
        return 1.0
    return math.exp(h.logprob / len(h.ids))


def greedy_decode(source_ids, params: ModelParams, max_decode_len: int = 80) -> Hypothesis:
    enc, state = start(source_ids, params)
    prev = BOS_ID
    ids: list[int] = []
    total = 0.0
    for step in range(1, max_decode_len + 1):
        state, dist = decode_step(prev, state, enc, params)
        prev = int(np.argmax(dist.log_probs[0]))
        total += float(dist.log_probs[0, prev])
        ids.append(prev)
        if prev == EOS_ID:
            return Hypothesis(tuple(ids), total, True, step)
    return Hypothesis(tuple(ids), total, False, max_decode_len)


def beam_search(source_ids, params: ModelParams, beam: BeamConfig | None = None) -> list[Hypothesis]:
    """Up to ``beam_width`` hypotheses, best cumulative log-probability first.

    Ties are broken by earlier finish, then by lexicographic id order.  If no
    hypothesis emits EOS within ``max_decode_len`` the surviving unfinished
    ones are returned instead.
    """
    beam = beam or BeamConfig()
    k_max = beam.beam_width
    enc, state = start(source_ids, params)
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[Hypothesis] = []
    for step in range(1, beam.max_decode_len + 1):
        # keep live rows lexicographically sorted so that a stable sort on the
        # flattened (row, token) grid breaks score ties lexicographically
        order = sorted(range(len(live)), key=lambda i: live[i][0])
        live = [live[i] for i in order]
        state = state.select(order)
        # one row at a time: batched matmuls round differently with the row
        # count, and a path's score must not depend on the beam it sits in
        steps = [decode_step(h[-1] if h else BOS_ID, state.select([r]), enc, params) for r, (h, _) in enumerate(live)]
        new_state = DecoderState([
            (np.concatenate([st.layers[l][0] for st, _ in steps]), np.concatenate([st.layers[l][1] for st, _ in steps]))
            for l in range(len(state.layers))
        ])
        scores = np.array([s for _, s in live])[:, None] + np.concatenate([d.log_probs for _, d in steps])
        flat = scores.ravel()
        cand = np.argsort(-flat, kind="stable")[:k_max]
        cand = cand[np.isfinite(flat[cand])]
        n_tok = scores.shape[1]
        next_live, rows = [], []
        for c in cand:
            r, w = divmod(int(c), n_tok)
            ids = live[r][0] + (w,)
            if w == EOS_ID:
                finished.append(Hypothesis(ids, float(flat[c]), True, step))
            else:
                next_live.append((ids, float(flat[c])))
                rows.append(r)
        live = next_live
        if not live:
            break
        state = new_state.select(rows)
        if len(finished) >= k_max:
            kth = sorted(h.logprob for h in finished)[-k_max]
            if max(s for _, s in live) <= kth:
                break
    if not finished:
        finished = [Hypothesis(ids, s, False, beam.max_decode_len) for ids, s in live]
    finished.sort(key=lambda h: (-h.logprob, h.finish_step, h.ids))
    return finished[:k_max]


# ---------------------------------------------------------------- extraction


@dataclass
class ExtractStats:
    sentences: int = 0
    skipped_sentences: int = 0
    hypotheses: int = 0
    malformed: int = 0
    with_unk: int = 0
    extractions: int = 0
    seconds: float = 0.0

    @property
    def sentences_per_second(self) -> float:
        return self.sentences / self.seconds if self.seconds > 0 else 0.0

    @property
    def malformed_rate(self) -> float:
        return self.malformed / self.hypotheses if self.hypotheses else 0.0

    def merge(self, other: "ExtractStats") -> None:
        for name in ("sentences", "skipped_sentences", "hypotheses", "malformed", "with_unk", "extractions"):
            setattr(self, name, getattr(self, name) + getattr(other, name))


@dataclass
class Extractor:
    params: ModelParams
    vocab: Vocabulary
    beam: BeamConfig = field(default_factory=BeamConfig)

    def extract_sentence(self, sentence: str | Sequence[str], sentence_id: str = "0", stats: ExtractStats | None = None):
        return extract_sentence(sentence, self.params, self.vocab, self.beam, sentence_id, stats)


def extract_sentence(
    sentence: str | Sequence[str],
    params: ModelParams,
    vocab: Vocabulary,
    beam: BeamConfig | None = None,
    sentence_id: str = "0",
    stats: ExtractStats | None = None,
) -> list[Extraction]:
    """Decode one sentence into at most ``top_k`` distinct, well-formed extractions."""
    beam = beam or BeamConfig()
    stats = stats if stats is not None else ExtractStats()
    tokens = tokenize(sentence) if isinstance(sentence, str) else list(sentence)
    stats.sentences += 1
    if not tokens or len(tokens) > params.cfg.max_source_len:
        stats.skipped_sentences += 1
        return []
    src, oov = vocab.encode_source(tokens)
    best: dict[Triple, float] = {}
    for h in beam_search(src, params, beam):
        stats.hypotheses += 1
        ids = h.ids[:-1] if h.ids and h.ids[-1] == EOS_ID else h.ids
        words = vocab.decode(ids, oov)
        if UNK in words:
            stats.with_unk += 1
            continue
        try:
            triple = parse_tagged(words)
        except TaggedParseError:
            stats.malformed += 1
            continue
        conf = confidence(h)
        if conf > best.get(triple, -1.0):
            best[triple] = conf
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[: beam.top_k]
    stats.extractions += len(ranked)
    return [Extraction(sentence_id, *t, conf) for t, conf in ranked]


def extract_corpus(
    in_path, params: ModelParams, vocab: Vocabulary, beam: BeamConfig | None, out_path, threads: int = 1
) -> ExtractStats:
    """Extract from ``sentence_id<TAB>sentence`` lines into a prediction TSV.

    Output follows input order; within a sentence, confidence descending.
    """
    sentences = load_sentences(in_path)
    t0 = time.perf_counter()

    def work(item):
        sid, tokens = item
        st = ExtractStats()
        return extract_sentence(tokens, params, vocab, beam, sid, st), st

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, sentences))
    else:
        results = [work(s) for s in sentences]
    stats = ExtractStats()
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        for extractions, st in results:
            stats.merge(st)
            for e in extractions:
                fh.write(e.to_line() + "\n")
    stats.seconds = time.perf_counter() - t0
    log.info(
        "extracted %d tuples from %d sentences (%.1f sent/s, malformed rate %.3f)",
        stats.extractions, stats.sentences, stats.sentences_per_second, stats.malformed_rate,
    )
    return stats
