"""Tokenization, vocabulary, the tagged-tuple codec and pair-file handling."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .numeric import make_rng

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<s>", "</s>"
ARG1_OPEN, ARG1_CLOSE = "<arg1>", "</arg1>"
REL_OPEN, REL_CLOSE = "<rel>", "</rel>"
ARG2_OPEN, ARG2_CLOSE = "<arg2>", "</arg2>"
TAG_ORDER = (ARG1_OPEN, ARG1_CLOSE, REL_OPEN, REL_CLOSE, ARG2_OPEN, ARG2_CLOSE)
SPECIALS = (PAD, UNK, BOS, EOS) + TAG_ORDER
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
DEFAULT_VOCAB_SIZE = 50000


def tokenize(text: str) -> list[str]:
    return text.split()


# ---------------------------------------------------------------- vocabulary


class Vocabulary:
    """Token/id maps with the ten reserved symbols at ids 0-9."""

    def __init__(self, tokens: Sequence[str] = (), max_size: int = DEFAULT_VOCAB_SIZE):
        itos = list(SPECIALS)
        for t in tokens:
            if t not in SPECIALS:
                itos.append(t)
        if len(itos) > max_size:
            raise ValueError(f"{len(itos)} tokens exceed max_size {max_size}")
        if len(set(itos)) != len(itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos: list[str] = itos
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(itos)}
        self.max_size = max_size

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def to_dict(self) -> dict:
        return {"max_size": self.max_size, "tokens": self.itos[len(SPECIALS):]}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], max_size=d["max_size"])

    def encode_source(self, tokens: Sequence[str]) -> tuple[list[int], list[str]]:
        """Map source tokens to extended ids.

        Out-of-vocabulary tokens get ids ``len(self) + k`` in order of first
        appearance; the list of those tokens is returned alongside.
        """
        oov: list[str] = []
        ids = []
        for t in tokens:
            if t in self.stoi:
                ids.append(self.stoi[t])
            else:
                if t not in oov:
                    oov.append(t)
                ids.append(len(self) + oov.index(t))
        return ids, oov

    def encode_target(self, tokens: Sequence[str], oov: Sequence[str]) -> list[int]:
        """``BOS tokens EOS`` as extended ids; unknown non-source tokens become UNK."""
        ids = [BOS_ID]
        for t in tokens:
            if t in self.stoi:
                ids.append(self.stoi[t])
            elif t in oov:
                ids.append(len(self) + list(oov).index(t))
            else:
                ids.append(UNK_ID)
        ids.append(EOS_ID)
        return ids

    def decode(self, ids: Iterable[int], oov: Sequence[str] = ()) -> list[str]:
        out = []
        n = len(self)
        for i in ids:
            out.append(self.itos[i] if i < n else oov[i - n])
        return out


def build_vocab(corpus: Iterable[Sequence[str]], max_size: int = DEFAULT_VOCAB_SIZE) -> Vocabulary:
    """Frequency-ranked vocabulary; ties broken lexicographically."""
    if max_size <= len(SPECIALS):
        raise ValueError(f"max_size must exceed {len(SPECIALS)} to leave room for specials")
    counts: Counter[str] = Counter()
    for tokens in corpus:
        counts.update(t for t in tokens if t not in SPECIALS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [t for t, _ in ranked[: max_size - len(SPECIALS)]]
    return Vocabulary(keep, max_size=max_size)


# ---------------------------------------------------------------- tuples


class Triple(NamedTuple):
    arg1: tuple[str, ...]
    rel: tuple[str, ...]
    arg2: tuple[str, ...]


@dataclass
class TuplePair:
    sentence: list[str]
    arg1: list[str]
    rel: list[str]
    arg2: list[str]
    confidence: float = 1.0

    @property
    def triple(self) -> Triple:
        return Triple(tuple(self.arg1), tuple(self.rel), tuple(self.arg2))

    def violation(self) -> str | None:
        """Reason the pair breaks an invariant, or ``None`` if it is valid."""
        for name in ("arg1", "rel", "arg2"):
            slot = getattr(self, name)
            if not slot:
                return f"empty {name}"
            if not is_subspan(slot, self.sentence):
                return f"{name} tokens do not occur in order in the sentence"
        if not 0.0 <= self.confidence <= 1.0:
            return f"confidence {self.confidence} outside [0, 1]"
        return None

    def is_valid(self) -> bool:
        return self.violation() is None


def is_subspan(span: Sequence[str], tokens: Sequence[str]) -> bool:
    """Ordered subsequence test; gaps are allowed, so bootstrapped relations like "was born in" match."""
    if not span:
        return False
    it = iter(tokens)
    return all(any(t == s for t in it) for s in span)


class TaggedParseError(ValueError):
    """A tagged sequence is malformed at ``position``."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (position {position})")
        self.position = position


class MissingTag(TaggedParseError):
    pass


class OutOfOrderTag(TaggedParseError):
    pass


class EmptySlot(TaggedParseError):
    pass


class TrailingTokens(TaggedParseError):
    pass


def encode_tuple(t: TuplePair | Triple) -> list[str]:
    """Serialize a tuple as ``<arg1> .. </arg1> <rel> .. </rel> <arg2> .. </arg2>``."""
    out: list[str] = []
    for (open_, close), name in zip(
        ((ARG1_OPEN, ARG1_CLOSE), (REL_OPEN, REL_CLOSE), (ARG2_OPEN, ARG2_CLOSE)),
        ("arg1", "rel", "arg2"),
    ):
        slot = list(getattr(t, name))
        if not slot:
            raise ValueError(f"cannot encode a tuple with an empty {name}")
        out += [open_, *slot, close]
    return out


def parse_tagged(seq: Sequence[str]) -> Triple:
    """Inverse of :func:`encode_tuple`.

    Raises a :class:`TaggedParseError` subclass pointing at the first
    offending position.
    """
    seq = list(seq)
    slots: list[list[str]] = []
    current: list[str] | None = None
    k = 0  # index into TAG_ORDER of the next expected tag
    for pos, tok in enumerate(seq):
        if k == len(TAG_ORDER):
            raise TrailingTokens(f"unexpected {tok!r} after {ARG2_CLOSE}", pos)
        expected = TAG_ORDER[k]
        if tok in TAG_ORDER:
            if tok != expected:
                if expected in seq[pos + 1 :]:
                    raise OutOfOrderTag(f"found {tok!r} where {expected!r} was expected", pos)
                raise MissingTag(f"missing {expected!r}", pos)
            if k % 2 == 0:
                current = []
            else:
                assert current is not None
                if not current:
                    raise EmptySlot(f"empty slot before {tok!r}", pos)
                slots.append(current)
                current = None
            k += 1
        elif current is None:
            raise MissingTag(f"missing {expected!r} before {tok!r}", pos)
        else:
            current.append(tok)
    if k < len(TAG_ORDER):
        raise MissingTag(f"missing {TAG_ORDER[k]!r}", len(seq))
    return Triple(tuple(slots[0]), tuple(slots[1]), tuple(slots[2]))


# ---------------------------------------------------------------- filtering and IO


def filter_pair(p: TuplePair, max_len: int = 40, min_conf: float = 0.9) -> bool:
    """Keep pairs with at most ``max_len`` words and confidence >= ``min_conf``."""
    reason = p.violation()
    if reason is None and len(p.sentence) > max_len:
        reason = f"sentence has {len(p.sentence)} tokens > {max_len}"
    if reason is None and p.confidence < min_conf:
        reason = f"confidence {p.confidence} < {min_conf}"
    if reason is not None:
        log.debug("dropping pair: %s", reason)
        return False
    return True


class MalformedLine(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno
        self.reason = reason


@dataclass
class LoadReport:
    loaded: int = 0
    skipped: list[tuple[int, str]] = field(default_factory=list)


def _read_lines(path):
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.endswith("\r"):
                line = line[:-1]
            yield lineno, line


def load_pairs(path, strict: bool = False, report: LoadReport | None = None) -> Iterator[TuplePair]:
    """Stream ``sentence\\targ1\\trel\\targ2\\tconfidence`` lines as pairs.

    Malformed lines are logged and skipped, or raise :class:`MalformedLine`
    when ``strict``.  Pass a :class:`LoadReport` to collect counts.
    """
    report = report if report is not None else LoadReport()
    for lineno, line in _read_lines(path):
        if not line.strip():
            continue
        fields = line.split("\t")
        reason = None
        if len(fields) != 5:
            reason = f"expected 5 fields, got {len(fields)}"
        else:
            try:
                conf = float(fields[4])
            except ValueError:
                reason = f"bad confidence {fields[4]!r}"
            else:
                if not 0.0 <= conf <= 1.0:
                    reason = f"confidence {conf} outside [0, 1]"
        if reason is not None:
            if strict:
                raise MalformedLine(path, lineno, reason)
            log.warning("%s:%d: skipping malformed line (%s)", path, lineno, reason)
            report.skipped.append((lineno, reason))
            continue
        report.loaded += 1
        yield TuplePair(
            tokenize(fields[0]), tokenize(fields[1]), tokenize(fields[2]), tokenize(fields[3]), conf
        )
    if report.skipped:
        log.info("%s: loaded %d pairs, skipped %d malformed lines", path, report.loaded, len(report.skipped))


def format_pair(p: TuplePair) -> str:
    return "\t".join(
        [" ".join(p.sentence), " ".join(p.arg1), " ".join(p.rel), " ".join(p.arg2), f"{p.confidence:g}"]
    )


def write_pairs(path, pairs: Iterable[TuplePair]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(format_pair(p) + "\n")
            n += 1
    return n


def write_tagged(path, pairs: Iterable[TuplePair]) -> int:
    """Write ``source<TAB>tagged target`` lines for the trainer."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(" ".join(p.sentence) + "\t" + " ".join(encode_tuple(p)) + "\n")
            n += 1
    return n


def load_tagged(path, strict: bool = False) -> list[tuple[list[str], list[str]]]:
    out = []
    for lineno, line in _read_lines(path):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2 or not fields[0].strip() or not fields[1].strip():
            if strict:
                raise MalformedLine(path, lineno, f"expected 2 non-empty fields, got {len(fields)}")
            log.warning("%s:%d: skipping malformed tagged line", path, lineno)
            continue
        out.append((tokenize(fields[0]), tokenize(fields[1])))
    return out


def load_sentences(path) -> list[tuple[str, list[str]]]:
    """Read ``sentence_id<TAB>sentence`` lines."""
    out = []
    for lineno, line in _read_lines(path):
        if not line.strip():
            continue
        sid, sep, sent = line.partition("\t")
        if not sep:
            raise MalformedLine(path, lineno, "expected sentence_id<TAB>sentence")
        out.append((sid, tokenize(sent)))
    return out


# ---------------------------------------------------------------- synthetic corpus

_NOUNS = (
    "deep learning", "machine learning", "the company", "a startup", "the university",
    "the museum", "the river", "the city", "the committee", "the band", "the album",
    "the president", "the director", "the team", "the league", "the novel", "the author",
    "the bridge", "the station", "the hospital", "the festival", "the village",
    "the council", "the school", "the library", "the theory", "the protein", "the enzyme",
    "the virus", "the planet", "the satellite", "the engine", "the airline", "the railway",
    "the senator", "the governor", "the painter", "the composer", "the physicist",
    "the chemist", "the poet", "the singer", "the club", "the army", "the navy",
    "the empire", "the kingdom", "the republic", "the province", "the island",
)
_ADJECTIVES = (
    "old", "new", "large", "small", "famous", "local", "national", "early", "modern", "major",
)
_RELATIONS = (
    "is a subfield of", "is part of", "was founded by", "acquired", "is located in",
    "was born in", "works for", "studied at", "is a member of", "was written by",
    "belongs to", "replaced", "is adjacent to", "was designed by", "owns",
    "is the capital of", "was elected to", "collaborated with", "is known for", "supports",
)
_SUFFIXES = (".", "in 1990 .", "last year .", "")
_PREFIXES = ("", "", "", "Instead ,", "In fact ,")


def _noun_phrase(rng: np.random.Generator) -> list[str]:
    words = _NOUNS[rng.integers(len(_NOUNS))].split()
    if words[0] in ("the", "a") and rng.random() < 0.3:
        words = [words[0], _ADJECTIVES[rng.integers(len(_ADJECTIVES))], *words[1:]]
    return words


def gen_synthetic(n: int, rng: int | np.random.Generator = 0) -> list[TuplePair]:
    """``n`` pairs from a small template grammar ``[prefix] NP REL NP [suffix]``.

    Sentences are at most 12 tokens and every pair has confidence 1.0.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(rng)
    pairs = []
    while len(pairs) < n:
        arg1 = _noun_phrase(rng)
        rel = _RELATIONS[rng.integers(len(_RELATIONS))].split()
        arg2 = _noun_phrase(rng)
        if arg1 == arg2:
            continue
        prefix = _PREFIXES[rng.integers(len(_PREFIXES))].split()
        suffix = _SUFFIXES[rng.integers(len(_SUFFIXES))].split()
        sentence = prefix + arg1 + rel + arg2 + suffix
        if len(sentence) > 12:
            sentence = arg1 + rel + arg2
        pairs.append(TuplePair(sentence, arg1, rel, arg2, 1.0))
    return pairs
