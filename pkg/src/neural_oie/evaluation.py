"""Lexical matching against gold tuples, precision-recall curves and AUC."""

from __future__ import annotations

import csv
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .inference import Extraction
from .text import MalformedLine, _read_lines, tokenize

SLOTS = ("arg1", "rel", "arg2")


@dataclass(frozen=True)
class MatchConfig:
    threshold: float = 0.5
    case_sensitive: bool = False

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must be in (0, 1]")


@dataclass(frozen=True)
class GoldExtraction:
    sentence_id: str
    arg1: tuple[str, ...]
    rel: tuple[str, ...]
    arg2: tuple[str, ...]
    sentence: tuple[str, ...] = ()


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    matched: int
    predicted: int
    gold: int


@dataclass
class Report:
    label: str
    points: list[PRPoint]
    auc: float


@dataclass
class Assignment:
    """Result of :func:`score_corpus`, aligned with the prediction list."""

    confidences: np.ndarray
    gold_index: list[int | None]  # index into the gold list, or None
    n_gold: int

    @property
    def matched(self) -> np.ndarray:
        return np.array([g is not None for g in self.gold_index], dtype=bool)

    @property
    def num_matches(self) -> int:
        return int(self.matched.sum())


# ---------------------------------------------------------------- IO


def load_gold(path) -> list[GoldExtraction]:
    """``sentence_id<TAB>sentence<TAB>arg1<TAB>rel<TAB>arg2`` per line."""
    out = []
    for lineno, line in _read_lines(path):
        if not line.strip():
            continue
        f = line.split("\t")
        if len(f) != 5:
            raise MalformedLine(path, lineno, f"expected 5 fields, got {len(f)}")
        out.append(GoldExtraction(f[0], tuple(tokenize(f[2])), tuple(tokenize(f[3])), tuple(tokenize(f[4])), tuple(tokenize(f[1]))))
    return out


def load_predictions(path) -> list[Extraction]:
    """``sentence_id<TAB>confidence<TAB>arg1<TAB>rel<TAB>arg2`` per line."""
    out = []
    for lineno, line in _read_lines(path):
        if not line.strip():
            continue
        f = line.split("\t")
        if len(f) != 5:
            raise MalformedLine(path, lineno, f"expected 5 fields, got {len(f)}")
        try:
            conf = float(f[1])
        except ValueError as exc:
            raise MalformedLine(path, lineno, f"bad confidence {f[1]!r}") from exc
        out.append(Extraction(f[0], tuple(tokenize(f[2])), tuple(tokenize(f[3])), tuple(tokenize(f[4])), conf))
    return out


def write_gold(path, golds: Sequence[GoldExtraction]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in golds:
            fh.write("\t".join([g.sentence_id, " ".join(g.sentence), " ".join(g.arg1), " ".join(g.rel), " ".join(g.arg2)]) + "\n")


# ---------------------------------------------------------------- matching


def lexical_match(pred, gold, cfg: MatchConfig = MatchConfig()) -> bool:
    """Every slot of ``gold`` must be covered by ``pred`` at ``cfg.threshold``.

    Coverage is the multiset token intersection divided by the gold slot length.
    """
    for slot in SLOTS:
        g = list(getattr(gold, slot))
        p = list(getattr(pred, slot))
        if not cfg.case_sensitive:
            g = [t.casefold() for t in g]
            p = [t.casefold() for t in p]
        if not g:
            return False
        overlap = sum((Counter(g) & Counter(p)).values())
        if overlap / len(g) < cfg.threshold:
            return False
    return True


def _pred_key(i: int, preds: Sequence[Extraction]):
    p = preds[i]
    return (-p.confidence, p.sentence_id, p.arg1, p.rel, p.arg2, i)


def score_corpus(preds: Sequence[Extraction], golds: Sequence[GoldExtraction], cfg: MatchConfig = MatchConfig()) -> Assignment:
    """Greedy one-to-one matching per sentence.

    Predictions are visited by descending confidence (ties: tuple order);
    each takes the first unmatched gold of its sentence, in gold-file order,
    that it lexically matches.
    """
    gold_by_sent: dict[str, list[int]] = defaultdict(list)
    for j, g in enumerate(golds):
        gold_by_sent[g.sentence_id].append(j)
    taken = [False] * len(golds)
    gold_index: list[int | None] = [None] * len(preds)
    for i in sorted(range(len(preds)), key=lambda i: _pred_key(i, preds)):
        p = preds[i]
        for j in gold_by_sent.get(p.sentence_id, ()):
            if not taken[j] and lexical_match(p, golds[j], cfg):
                taken[j] = True
                gold_index[i] = j
                break
    conf = np.array([p.confidence for p in preds], dtype=np.float64)
    return Assignment(conf, gold_index, len(golds))


def pr_curve(assignment: Assignment) -> list[PRPoint]:
    """One point per distinct confidence, highest threshold first."""
    if assignment.n_gold < 1:
        raise ValueError("precision-recall needs at least one gold extraction")
    conf = assignment.confidences
    if conf.size == 0:
        return []
    matched = assignment.matched
    order = np.argsort(-conf, kind="stable")
    conf_sorted = conf[order]
    cum_match = np.cumsum(matched[order])
    points = []
    for thr in np.unique(conf)[::-1]:
        n = int(np.searchsorted(-conf_sorted, -thr, side="right"))
        m = int(cum_match[n - 1])
        points.append(PRPoint(float(thr), m / n, m / assignment.n_gold, m, n, assignment.n_gold))
    return points


def auc(points: Sequence[PRPoint]) -> float:
    """Area under the step-interpolated P-R curve (precision held per recall step)."""
    area, prev_recall = 0.0, 0.0
    for p in points:
        area += p.precision * (p.recall - prev_recall)
        prev_recall = p.recall
    return area


def precision_recall_f1(assignment: Assignment) -> tuple[float, float, float]:
    """Scores over all predictions (no confidence cut-off)."""
    m = assignment.num_matches
    n = len(assignment.confidences)
    p = m / n if n else 0.0
    r = m / assignment.n_gold if assignment.n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def evaluate(preds, golds, cfg: MatchConfig = MatchConfig(), label: str = "system") -> Report:
    points = pr_curve(score_corpus(preds, golds, cfg))
    return Report(label, points, auc(points))


# ---------------------------------------------------------------- reports


def _safe_label(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label) or "system"


def emit_report(reports: Sequence[Report], out_dir) -> list[Path]:
    """Write ``curve_<label>.csv`` per report plus one overlay plot, ``pr_curves.svg``."""
    if not reports:
        raise ValueError("no reports to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rep in reports:
        path = out / f"curve_{_safe_label(rep.label)}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "precision", "recall"])
            for p in rep.points:
                w.writerow([repr(p.threshold), repr(p.precision), repr(p.recall)])
        written.append(path)
    written.append(_plot(reports, out / "pr_curves.svg"))
    return written


def _plot(reports: Sequence[Report], path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "neural-oie", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4.5))
        for rep in reports:
            r = [0.0] + [p.recall for p in rep.points]
            pr = [rep.points[0].precision if rep.points else 0.0] + [p.precision for p in rep.points]
            ax.step(r, pr, where="pre", label=f"{rep.label} (AUC={rep.auc:.3f})")
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.05)
        ax.legend(loc="upper right")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
