"""Tag schemes and conversion between spans and per-token tag sequences.

Two scheme kinds are supported:

* ``BILOU``: every category ``x`` expands to ``B-x``, ``I-x``, ``L-x`` and
  ``U-x``. Used for entity columns and for attribute columns tagged by CRF
  decoders.
* ``UNPREFIXED``: each category is a bare tag (``NEG``, ``POS`` ...). Used for
  attribute columns tagged by softmax decoders. Span boundaries between
  adjacent equal tags are not representable.

The tag ``"O"`` is always index 0.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence

OUTSIDE = "O"
NEGATIVE = "NEG"
ABSENT_ANNOTATION = "ABSENT-ANNOTATION"
PREFIXES = ("B", "I", "L", "U")

POLARITY_VALUES = ("NEG", "POS", "HYP", "COND", "POSS", "ASW")
MODALITY_VALUES = ("FACTUAL", "CONDITIONAL", "POSSIBLE", "PROPOSED")


class SchemeKind(str, enum.Enum):
    BILOU = "BILOU"
    UNPREFIXED = "UNPREFIXED"


class TagError(ValueError):
    """Raised for malformed spans or illegal tag sequences.

    ``index`` points at the offending token position when one exists.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"{message} (at index {index})")
        self.index = index


class Span(NamedTuple):
    """Inclusive token span ``[start, end]`` labelled with ``category``."""

    start: int
    end: int
    category: str


@dataclass(frozen=True)
class TagScheme:
    kind: SchemeKind
    categories: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "kind", SchemeKind(self.kind))
        object.__setattr__(self, "categories", tuple(self.categories))
        if len(set(self.categories)) != len(self.categories):
            raise TagError(f"duplicate categories in {self.categories}")
        for cat in self.categories:
            if not cat or cat == OUTSIDE or any(ch.isspace() for ch in cat):
                raise TagError(f"invalid category name {cat!r}")

    @cached_property
    def tags(self) -> tuple[str, ...]:
        if self.kind is SchemeKind.UNPREFIXED:
            return (OUTSIDE,) + self.categories
        return (OUTSIDE,) + tuple(f"{p}-{c}" for c in self.categories for p in PREFIXES)

    @cached_property
    def index(self) -> dict[str, int]:
        return {tag: i for i, tag in enumerate(self.tags)}

    def __len__(self) -> int:
        return len(self.tags)

    def tag_index(self, tag: str) -> int:
        try:
            return self.index[tag]
        except KeyError:
            raise TagError(f"tag {tag!r} not in {self.kind.value} scheme {self.categories}") from None

    def to_list(self) -> list[str]:
        return list(self.tags)

    @classmethod
    def from_list(cls, tags: Sequence[str]) -> "TagScheme":
        """Rebuild a scheme from its serialized ordered tag list."""
        if not tags or tags[0] != OUTSIDE:
            raise TagError("serialized scheme must start with 'O'")
        rest = list(tags[1:])
        if rest and all(len(t) > 2 and t[1] == "-" and t[0] in PREFIXES for t in rest):
            scheme = cls(SchemeKind.BILOU, tuple(dict.fromkeys(t[2:] for t in rest)))
        else:
            scheme = cls(SchemeKind.UNPREFIXED, tuple(rest))
        if list(scheme.tags) != list(tags):
            raise TagError(f"tag list {list(tags)} is not a canonical scheme ordering")
        return scheme


def bilou_scheme(categories: Iterable[str]) -> TagScheme:
    return TagScheme(SchemeKind.BILOU, tuple(categories))


def unprefixed_scheme(categories: Iterable[str]) -> TagScheme:
    return TagScheme(SchemeKind.UNPREFIXED, tuple(categories))


def split_tag(tag: str) -> tuple[str, str]:
    """Split a BILOU tag into ``(prefix, category)``; ``"O"`` gives ``("O", "")``."""
    if tag == OUTSIDE:
        return OUTSIDE, ""
    return tag[0], tag[2:]


@dataclass(frozen=True)
class TagSequence:
    scheme: TagScheme
    indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        size = len(self.scheme)
        for pos, idx in enumerate(self.indices):
            if not 0 <= idx < size:
                raise TagError(f"tag index {idx} outside vocabulary of size {size}", pos)

    @classmethod
    def from_labels(cls, scheme: TagScheme, labels: Iterable[str]) -> "TagSequence":
        return cls(scheme, tuple(scheme.tag_index(t) for t in labels))

    @property
    def labels(self) -> list[str]:
        tags = self.scheme.tags
        return [tags[i] for i in self.indices]

    def __len__(self) -> int:
        return len(self.indices)


def check_spans(spans: Iterable[Span], length: int) -> list[Span]:
    """Return spans sorted by start, raising on out-of-range or overlapping ones."""
    ordered = sorted(Span(*s) for s in spans)
    prev_end = -1
    for span in ordered:
        if span.start > span.end:
            raise TagError(f"span {tuple(span)} has start > end", span.start)
        if span.start < 0 or span.end >= length:
            raise TagError(f"span {tuple(span)} outside sequence of length {length}", span.start)
        if span.start <= prev_end:
            raise TagError(f"span {tuple(span)} overlaps a previous span", span.start)
        prev_end = span.end
    return ordered


def encode_bilou(spans: Iterable[Span], length: int, scheme: TagScheme) -> TagSequence:
    if scheme.kind is not SchemeKind.BILOU:
        raise TagError("encode_bilou needs a BILOU scheme")
    labels = [OUTSIDE] * length
    for start, end, cat in check_spans(spans, length):
        if start == end:
            labels[start] = f"U-{cat}"
            continue
        labels[start] = f"B-{cat}"
        for i in range(start + 1, end):
            labels[i] = f"I-{cat}"
        labels[end] = f"L-{cat}"
    return TagSequence.from_labels(scheme, labels)


def _illegal_transition(prev: str | None, cur: str | None) -> bool:
    """True if ``prev -> cur`` breaks BILOU; ``None`` stands for START/STOP."""
    p_pre, p_cat = split_tag(prev) if prev is not None else ("O", "")
    c_pre, c_cat = split_tag(cur) if cur is not None else ("O", "")
    if p_pre in ("B", "I"):
        return not (c_pre in ("I", "L") and c_cat == p_cat)
    return c_pre in ("I", "L")


def validate_bilou(seq: TagSequence) -> None:
    """Raise :class:`TagError` at the first illegal BILOU adjacency."""
    if seq.scheme.kind is not SchemeKind.BILOU:
        raise TagError("validate_bilou needs a BILOU scheme")
    labels = seq.labels
    prev = None
    for i, tag in enumerate(labels):
        if _illegal_transition(prev, tag):
            raise TagError(f"illegal transition {prev or 'START'} -> {tag}", i)
        prev = tag
    if labels and _illegal_transition(prev, None):
        raise TagError(f"sequence ends inside an entity ({prev})", len(labels) - 1)


def decode_bilou(seq: TagSequence, mode: str = "strict") -> list[Span]:
    """Turn a BILOU sequence into spans.

    In ``strict`` mode any illegal adjacency raises. In ``lenient`` mode an
    open entity is closed (and kept) at the first tag that breaks its category
    or prefix continuity, and a run of ``I``/``L`` tags without a ``B`` starts
    a span at its first token. Lenient decoding never raises.
    """
    if mode not in ("strict", "lenient"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if mode == "strict":
        validate_bilou(seq)
    elif seq.scheme.kind is not SchemeKind.BILOU:
        raise TagError("decode_bilou needs a BILOU scheme")

    spans: list[Span] = []
    open_start, open_cat = None, None

    def close(end: int):
        nonlocal open_start, open_cat
        if open_start is not None:
            spans.append(Span(open_start, end, open_cat))
        open_start, open_cat = None, None

    for i, tag in enumerate(seq.labels):
        prefix, cat = split_tag(tag)
        continues = open_start is not None and cat == open_cat and prefix in ("I", "L")
        if continues:
            if prefix == "L":
                close(i)
            continue
        close(i - 1)
        if prefix == "U":
            spans.append(Span(i, i, cat))
        elif prefix == "L":
            spans.append(Span(i, i, cat))
        elif prefix in ("B", "I"):
            open_start, open_cat = i, cat
    close(len(seq) - 1)
    return spans


def encode_unprefixed(spans: Iterable[Span], length: int, scheme: TagScheme) -> TagSequence:
    if scheme.kind is not SchemeKind.UNPREFIXED:
        raise TagError("encode_unprefixed needs an UNPREFIXED scheme")
    labels = [OUTSIDE] * length
    for start, end, value in check_spans(spans, length):
        for i in range(start, end + 1):
            labels[i] = value
    return TagSequence.from_labels(scheme, labels)


def unprefixed_runs(seq: TagSequence) -> list[Span]:
    """Maximal runs of one identical non-``O`` tag."""
    runs: list[Span] = []
    labels = seq.labels
    i = 0
    while i < len(labels):
        if labels[i] == OUTSIDE:
            i += 1
            continue
        j = i
        while j + 1 < len(labels) and labels[j + 1] == labels[i]:
            j += 1
        runs.append(Span(i, j, labels[i]))
        i = j + 1
    return runs


def encode(spans: Iterable[Span], length: int, scheme: TagScheme) -> TagSequence:
    if scheme.kind is SchemeKind.BILOU:
        return encode_bilou(spans, length, scheme)
    return encode_unprefixed(spans, length, scheme)


def neg_only_scheme(scheme: TagScheme, negative: str = NEGATIVE) -> TagScheme:
    return TagScheme(scheme.kind, (negative,))


def filter_neg_only(seq: TagSequence, negative: str = NEGATIVE) -> TagSequence:
    """Replace every non-negative attribute tag by ``"O"``.

    The result lives in a scheme holding only the negative class, so
    ``BILOU`` input becomes the BILOU-Neg-only vocabulary.
    """
    target = neg_only_scheme(seq.scheme, negative)
    labels = []
    for tag in seq.labels:
        cat = split_tag(tag)[1] if seq.scheme.kind is SchemeKind.BILOU else tag
        labels.append(tag if cat == negative else OUTSIDE)
    return TagSequence.from_labels(target, labels)


def convert(seq: TagSequence, scheme: TagScheme) -> TagSequence:
    """Re-express a strictly valid BILOU sequence in another scheme.

    Spans whose category is missing from ``scheme`` raise :class:`TagError`.
    """
    if seq.scheme == scheme:
        return seq
    spans = decode_bilou(seq, "strict")
    missing = {s.category for s in spans} - set(scheme.categories)
    if missing:
        raise TagError(f"categories {sorted(missing)} not in target scheme {scheme.categories}")
    return encode(spans, len(seq), scheme)
