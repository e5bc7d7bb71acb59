"""Token accuracy, exact-match span scores and micro/macro averages.

Span scores count a prediction as correct only if start, end and category all
match a gold span. Micro scores pool TP/FP/FN over classes; macro scores are
unweighted means of per-class precision, recall and F1.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Hashable, Iterable, Sequence

from .tags import OUTSIDE, Span, TagSequence, unprefixed_runs

log = logging.getLogger(__name__)


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def empty(self) -> bool:
        return self.tp == self.fp == self.fn == 0

    def score(self) -> "Score":
        return Score.from_counts(self.tp, self.fp, self.fn)


@dataclass(frozen=True)
class Score:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "Score":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        # 2TP / (2TP + FP + FN) is the harmonic mean of p and r, without rounding drift
        f = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        return cls(p, r, f)


ZERO = Score(0.0, 0.0, 0.0)


@dataclass
class ConfusionTally:
    counts: dict[str, Counts] = field(default_factory=dict)

    def get(self, cls: str) -> Counts:
        return self.counts.setdefault(cls, Counts())

    def __add__(self, other: "ConfusionTally") -> "ConfusionTally":
        merged = ConfusionTally({k: Counts(v.tp, v.fp, v.fn) for k, v in self.counts.items()})
        for k, v in other.counts.items():
            merged.counts[k] = merged.get(k) + v
        return merged

    def pooled(self) -> Counts:
        total = Counts()
        for c in self.counts.values():
            total = total + c
        return total


def _category(span) -> str:
    return span[-1] if not isinstance(span, Span) else span.category


def tally_spans(gold: Iterable[Hashable], pred: Iterable[Hashable]) -> ConfusionTally:
    """Exact-match tally; the last element of each span tuple is its class."""
    gold_set, pred_set = set(gold), set(pred)
    tally = ConfusionTally()
    for s in gold_set & pred_set:
        tally.get(_category(s)).tp += 1
    for s in pred_set - gold_set:
        tally.get(_category(s)).fp += 1
    for s in gold_set - pred_set:
        tally.get(_category(s)).fn += 1
    return tally


def span_micro_f1(gold_spans: Iterable[Hashable], pred_spans: Iterable[Hashable]) -> tuple[Score, ConfusionTally]:
    tally = tally_spans(gold_spans, pred_spans)
    return tally.pooled().score(), tally


def macro_from_tally(tally: ConfusionTally, classes: Sequence[str],
                     include_absent: bool = True) -> tuple[Score, dict[str, Score]]:
    if not classes:
        raise ValueError("macro average needs at least one class")
    per_class = {c: tally.counts.get(c, Counts()).score() for c in classes}
    used = [c for c in classes if include_absent or not tally.counts.get(c, Counts()).empty]
    if not used:
        return ZERO, per_class
    n = len(used)
    macro = Score(
        sum(per_class[c].precision for c in used) / n,
        sum(per_class[c].recall for c in used) / n,
        sum(per_class[c].f1 for c in used) / n,
    )
    return macro, per_class


def macro_f1(gold: Iterable[Hashable], pred: Iterable[Hashable], classes: Sequence[str],
             include_absent: bool = True) -> tuple[Score, dict[str, Score]]:
    """Macro P/R/F1 over ``classes``.

    A class missing from both gold and prediction scores 0 unless
    ``include_absent`` is False, in which case it is left out of the mean.
    """
    return macro_from_tally(tally_spans(gold, pred), classes, include_absent)


def unprefixed_span_match(ner_spans: Iterable[Span], attr_tags: TagSequence) -> list[Span]:
    """Attach un-prefixed attribute tags to entity spans.

    Each maximal run of one attribute tag is kept only if its extent equals
    the extent of some entity span exactly; it then yields
    ``Span(start, end, attribute)``.
    """
    extents = {(s[0], s[1]) for s in ner_spans}
    return [run for run in unprefixed_runs(attr_tags) if (run.start, run.end) in extents]


@dataclass(frozen=True)
class IdentityReport:
    precondition_ok: bool
    tp: int
    fp: int
    fn: int
    precision: Fraction
    recall: Fraction
    f1: Fraction

    @property
    def holds(self) -> bool:
        return self.fp == self.fn and self.precision == self.recall == self.f1

    @property
    def value(self) -> float:
        return float(self.f1)


def micro_identity_check(gold: Sequence, pred: Sequence, abstain=OUTSIDE) -> IdentityReport:
    """Pool per-class TP/FP/FN of a single-label prediction and compare P, R, F1.

    When every position has exactly one gold and one predicted class (no
    ``abstain`` label), each error is an FP for one class and an FN for
    another, so FP = FN and P = R = F1. Values are exact fractions.
    """
    ok = len(gold) == len(pred) and abstain not in gold and abstain not in pred
    if len(gold) != len(pred):
        log.warning("micro identity check on sequences of different length")
    classes = set(gold) | set(pred)
    tp = fp = fn = 0
    for c in classes:
        tp += sum(1 for g, p in zip(gold, pred) if g == c and p == c)
        fp += sum(1 for g, p in zip(gold, pred) if p == c and g != c)
        fn += sum(1 for g, p in zip(gold, pred) if g == c and p != c)
    precision = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    recall = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f1 = Fraction(2 * tp, 2 * tp + fp + fn) if tp else Fraction(0)
    return IdentityReport(ok, tp, fp, fn, precision, recall, f1)


def token_accuracy(gold: Sequence, pred: Sequence) -> float:
    if isinstance(gold, TagSequence):
        gold = gold.labels
    if isinstance(pred, TagSequence):
        pred = pred.labels
    if len(gold) != len(pred):
        raise ValueError(f"length mismatch: {len(gold)} gold vs {len(pred)} predicted")
    if not gold:
        return 0.0
    return sum(g == p for g, p in zip(gold, pred)) / len(gold)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class HeadMetrics:
    token_accuracy: float
    micro: Score
    macro: Score
    per_class: dict[str, Score]
    tally: ConfusionTally
    tokens: int = 0


@dataclass
class HeadItem:
    """One sentence's gold and predicted view of one head."""

    key: Hashable
    gold_tags: Sequence[str]
    gold_spans: Sequence[Span]
    pred_tags: Sequence[str]
    pred_spans: Sequence[Span]


def score_head(items: Sequence[HeadItem], classes: Sequence[str], include_absent: bool = True) -> HeadMetrics:
    equal = total = 0
    gold_keys, pred_keys = [], []
    for it in items:
        if len(it.gold_tags) != len(it.pred_tags):
            raise ValueError(f"{it.key}: tag length mismatch")
        equal += sum(g == p for g, p in zip(it.gold_tags, it.pred_tags))
        total += len(it.gold_tags)
        gold_keys.extend((it.key, *s) for s in it.gold_spans)
        pred_keys.extend((it.key, *s) for s in it.pred_spans)
    micro, tally = span_micro_f1(gold_keys, pred_keys)
    if classes:
        macro, per_class = macro_from_tally(tally, classes, include_absent)
    else:
        macro, per_class = ZERO, {}
    return HeadMetrics(equal / total if total else 0.0, micro, macro, per_class, tally, total)


@dataclass
class MetricsReport:
    heads: dict[str, HeadMetrics]
    sentences: int = 0
    label: str = ""

    def records(self) -> list[dict]:
        out = []
        for head, m in self.heads.items():
            out.append({"metric": "token_accuracy", "head": head, "class": "", "value": m.token_accuracy})
            for avg, score in (("micro", m.micro), ("macro", m.macro)):
                for part in ("precision", "recall", "f1"):
                    out.append({"metric": f"{avg}_{part}", "head": head, "class": "", "value": getattr(score, part)})
            for cls, score in m.per_class.items():
                for part in ("precision", "recall", "f1"):
                    out.append({"metric": part, "head": head, "class": cls, "value": getattr(score, part)})
        return out

    def format_table(self) -> str:
        header = f"{'head':<10} {'acc':>6} {'P':>6} {'R':>6} {'span-F1':>8} {'mP':>6} {'mR':>6} {'macro-F1':>8}"
        lines = [header, "-" * len(header)]
        for head, m in self.heads.items():
            lines.append(
                f"{head:<10} {m.token_accuracy:6.3f} {m.micro.precision:6.3f} {m.micro.recall:6.3f} "
                f"{m.micro.f1:8.3f} {m.macro.precision:6.3f} {m.macro.recall:6.3f} {m.macro.f1:8.3f}"
            )
        return "\n".join(lines)

    def write(self, directory, stem: str = "report") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.txt").write_text(self.format_table() + "\n", encoding="utf-8")
        with open(directory / f"{stem}.jsonl", "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")
