"""Annotated corpora.

A :class:`Corpus` holds documents of pre-tokenised sentences. Each sentence
carries its span annotations per column (``"ner"`` holds the entities) and
the BILOU tag columns derived from them: one for every span column and one
for every attribute name found on spans (``"polarity"``, ``"modality"``).
Attribute value ``ABSENT-ANNOTATION`` marks a span that was never annotated
for that attribute; it is kept on the span but tagged ``"O"``.

Canonical file format (UTF-8, one record per line, ``#`` comments allowed)::

    DOC <id>
    SENT
    TOK <char_start> <char_end> <text>
    SPAN <column> <start_tok> <end_tok> <category>
    ATTR <column> <start_tok> <end_tok> <name>=<value>

Token indices are 0-based and inclusive; ``ATTR`` attaches to the ``SPAN`` of
the same column and extent, which must appear earlier in the sentence.
"""

from __future__ import annotations

import dataclasses
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .tags import (
    ABSENT_ANNOTATION,
    NEGATIVE,
    Span,
    TagError,
    TagScheme,
    TagSequence,
    bilou_scheme,
    check_spans,
    encode_bilou,
    filter_neg_only,
)

log = logging.getLogger(__name__)

NER = "ner"
POLARITY = "polarity"
MODALITY = "modality"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Token:
    text: str
    char_start: int
    char_end: int

    def __post_init__(self):
        if self.char_start < 0 or self.char_start >= self.char_end:
            raise CorpusError(f"token {self.text!r} has invalid offsets [{self.char_start}, {self.char_end})")
        if not self.text or any(ch.isspace() for ch in self.text):
            raise CorpusError(f"token text {self.text!r} is empty or contains whitespace")


@dataclass(frozen=True)
class SpanAnnotation:
    start_token: int
    end_token: int
    category: str
    attributes: Mapping[str, str] = field(default_factory=dict)

    @property
    def span(self) -> Span:
        return Span(self.start_token, self.end_token, self.category)


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[Token, ...]
    spans: Mapping[str, tuple[SpanAnnotation, ...]]
    tag_columns: Mapping[str, TagSequence]
    doc_id: str = ""
    index: int = 0

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> list[str]:
        return [t.text for t in self.tokens]

    def attribute_spans(self, name: str) -> list[Span]:
        """``(start, end, value)`` for every span carrying a real value of ``name``."""
        out = []
        for anns in self.spans.values():
            for ann in anns:
                value = ann.attributes.get(name)
                if value is not None and value != ABSENT_ANNOTATION:
                    out.append(Span(ann.start_token, ann.end_token, value))
        return sorted(out)


@dataclass(frozen=True)
class Document:
    id: str
    sentences: tuple[Sentence, ...]


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...]
    schemes: Mapping[str, TagScheme]

    def sentences(self) -> Iterator[Sentence]:
        for doc in self.documents:
            yield from doc.sentences

    def __len__(self) -> int:
        return sum(len(d.sentences) for d in self.documents)

    def validate(self) -> None:
        """Re-check every invariant; raises :class:`CorpusError`."""
        for d, doc in enumerate(self.documents):
            for s, sent in enumerate(doc.sentences):
                where = f"document {d} ({doc.id}) sentence {s}"
                try:
                    _check_tokens(sent.tokens)
                    for col, anns in sent.spans.items():
                        check_spans([a.span for a in anns], len(sent.tokens))
                    for col, seq in sent.tag_columns.items():
                        if len(seq) != len(sent.tokens):
                            raise CorpusError(f"column {col} has {len(seq)} tags for {len(sent.tokens)} tokens")
                        if seq.scheme != self.schemes.get(col):
                            raise CorpusError(f"column {col} is not in the corpus scheme")
                except (TagError, CorpusError) as exc:
                    raise CorpusError(f"{where}: {exc}") from None


RawSentence = tuple[Sequence[Token], Mapping[str, Sequence[SpanAnnotation]]]


def _check_tokens(tokens: Sequence[Token]) -> None:
    for a, b in zip(tokens, tokens[1:]):
        if b.char_start < a.char_end:
            raise CorpusError(f"tokens {a.text!r} and {b.text!r} overlap or are out of order")


def _attribute_names(spans: Mapping[str, Sequence[SpanAnnotation]]) -> set[str]:
    return {name for anns in spans.values() for a in anns for name in a.attributes}


def infer_schemes(raw: Iterable[RawSentence]) -> dict[str, TagScheme]:
    """BILOU schemes over the sorted categories/values seen in each column."""
    cats: dict[str, set[str]] = {NER: set()}
    for _, spans in raw:
        for col, anns in spans.items():
            cats.setdefault(col, set()).update(a.category for a in anns)
            for a in anns:
                for name, value in a.attributes.items():
                    bucket = cats.setdefault(name, set())
                    if value != ABSENT_ANNOTATION:
                        bucket.add(value)
    return {col: bilou_scheme(sorted(values)) for col, values in sorted(cats.items())}


def build_sentence(tokens: Sequence[Token], spans: Mapping[str, Sequence[SpanAnnotation]],
                   schemes: Mapping[str, TagScheme], doc_id: str = "", index: int = 0) -> Sentence:
    tokens = tuple(tokens)
    _check_tokens(tokens)
    n = len(tokens)
    ordered = {col: tuple(sorted(anns, key=lambda a: (a.start_token, a.end_token))) for col, anns in spans.items() if anns}
    columns: dict[str, TagSequence] = {}
    attr_names = _attribute_names(ordered)
    clash = attr_names & set(ordered)
    if clash:
        raise CorpusError(f"attribute names {sorted(clash)} collide with span columns")
    for col, scheme in schemes.items():
        if col in ordered or col not in attr_names:
            anns = ordered.get(col, ())
            columns[col] = encode_bilou([a.span for a in anns], n, scheme)
    for name in sorted(attr_names):
        if name not in schemes:
            raise CorpusError(f"no scheme for attribute column {name}")
        seen = [a for anns in ordered.values() for a in anns if name in a.attributes]
        spans_for = [Span(a.start_token, a.end_token, a.attributes[name]) for a in seen
                     if a.attributes[name] != ABSENT_ANNOTATION]
        columns[name] = encode_bilou(spans_for, n, schemes[name])
    for col in ordered:
        if col not in schemes:
            raise CorpusError(f"no scheme for span column {col}")
    return Sentence(tokens, ordered, columns, doc_id, index)


def make_corpus(documents: Sequence[tuple[str, Sequence[RawSentence]]],
                schemes: Mapping[str, TagScheme] | None = None) -> Corpus:
    """Assemble a validated corpus; schemes are inferred unless given."""
    if schemes is None:
        schemes = infer_schemes(s for _, sents in documents for s in sents)
    docs = []
    seen_ids = set()
    for d, (doc_id, sents) in enumerate(documents):
        if not doc_id or any(ch.isspace() for ch in doc_id):
            raise CorpusError(f"document {d}: invalid id {doc_id!r}")
        if doc_id in seen_ids:
            raise CorpusError(f"document {d}: duplicate id {doc_id!r}")
        seen_ids.add(doc_id)
        built = []
        for s, (tokens, spans) in enumerate(sents):
            try:
                built.append(build_sentence(tokens, spans, schemes, doc_id, s))
            except (TagError, CorpusError) as exc:
                raise CorpusError(f"document {d} ({doc_id}) sentence {s}: {exc}") from None
        docs.append(Document(doc_id, tuple(built)))
    return Corpus(tuple(docs), dict(schemes))


def with_schemes(corpus: Corpus, schemes: Mapping[str, TagScheme]) -> Corpus:
    """Rebuild ``corpus`` under fixed schemes (e.g. aligning a dev set to training)."""
    return make_corpus(_raw_documents(corpus), schemes)


def _raw_documents(corpus: Corpus):
    return [(doc.id, [(s.tokens, s.spans) for s in doc.sentences]) for doc in corpus.documents]


def neg_only(corpus: Corpus, column: str = POLARITY) -> Corpus:
    """Keep only the negative class in ``column``; every other attribute tag becomes ``"O"``."""
    if column not in corpus.schemes:
        return corpus
    docs = []
    scheme = None
    for doc in corpus.documents:
        sents = []
        for sent in doc.sentences:
            filtered = filter_neg_only(sent.tag_columns[column], NEGATIVE)
            scheme = filtered.scheme
            sents.append(dataclasses.replace(sent, tag_columns={**sent.tag_columns, column: filtered}))
        docs.append(Document(doc.id, tuple(sents)))
    schemes = dict(corpus.schemes)
    schemes[column] = scheme if scheme is not None else bilou_scheme([NEGATIVE])
    return Corpus(tuple(docs), schemes)


def whitespace_tokenize(text: str, offset: int = 0) -> list[Token]:
    """Split on whitespace. A convenience only; the engine expects pre-tokenised input."""
    return [Token(m.group(), offset + m.start(), offset + m.end()) for m in re.finditer(r"\S+", text)]


# ---------------------------------------------------------------------------
# Canonical format
# ---------------------------------------------------------------------------


def loads_canonical(text: str, source: str = "<string>") -> Corpus:
    documents: list[tuple[str, list]] = []
    tokens: list[Token] | None = None
    spans: dict[str, list[SpanAnnotation]] = {}

    def fail(lineno: int, msg: str):
        raise CorpusError(f"{source}:{lineno}: {msg}")

    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        kind, _, rest = line.partition(" ")
        if kind == "DOC":
            doc_id = rest.strip()
            if not doc_id or " " in doc_id:
                fail(lineno, f"invalid document id {doc_id!r}")
            documents.append((doc_id, []))
            tokens = None
        elif kind == "SENT":
            if not documents:
                fail(lineno, "SENT before any DOC")
            tokens, spans = [], {}
            documents[-1][1].append((tokens, spans))
        elif kind == "TOK":
            if tokens is None:
                fail(lineno, "TOK outside a sentence")
            parts = rest.split(" ", 2)
            if len(parts) != 3:
                fail(lineno, "TOK needs <start> <end> <text>")
            try:
                tokens.append(Token(parts[2], int(parts[0]), int(parts[1])))
            except (ValueError, CorpusError) as exc:
                fail(lineno, str(exc))
        elif kind in ("SPAN", "ATTR"):
            if tokens is None:
                fail(lineno, f"{kind} outside a sentence")
            parts = rest.split()
            if len(parts) != 4:
                fail(lineno, f"{kind} needs 4 fields")
            col, s, e, last = parts
            try:
                start, end = int(s), int(e)
            except ValueError:
                fail(lineno, "token indices must be integers")
            if kind == "SPAN":
                spans.setdefault(col, []).append(SpanAnnotation(start, end, last, {}))
                continue
            name, eq, value = last.partition("=")
            if not eq or not name or not value:
                fail(lineno, "ATTR needs <name>=<value>")
            for ann in spans.get(col, []):
                if ann.start_token == start and ann.end_token == end:
                    ann.attributes[name] = value
                    break
            else:
                fail(lineno, f"ATTR refers to no {col} span ({start}, {end})")
        else:
            fail(lineno, f"unknown record kind {kind!r}")
    return make_corpus(documents)


def load_canonical(path) -> Corpus:
    return loads_canonical(Path(path).read_text(encoding="utf-8"), str(path))


def dumps_canonical(corpus: Corpus) -> str:
    lines = []
    for doc in corpus.documents:
        lines.append(f"DOC {doc.id}")
        for sent in doc.sentences:
            lines.append("SENT")
            lines.extend(f"TOK {t.char_start} {t.char_end} {t.text}" for t in sent.tokens)
            for col in sorted(sent.spans):
                for ann in sent.spans[col]:
                    lines.append(f"SPAN {col} {ann.start_token} {ann.end_token} {ann.category}")
                    for name in sorted(ann.attributes):
                        lines.append(f"ATTR {col} {ann.start_token} {ann.end_token} {name}={ann.attributes[name]}")
    return "".join(line + "\n" for line in lines)


def save_canonical(corpus: Corpus, path) -> None:
    Path(path).write_text(dumps_canonical(corpus), encoding="utf-8")


# ---------------------------------------------------------------------------
# i2b2-style standoff import
# ---------------------------------------------------------------------------

ASSERTION_CODES = {
    "present": "POS",
    "positive": "POS",
    "pos": "POS",
    "absent": "NEG",
    "negative": "NEG",
    "neg": "NEG",
    "possible": "POSS",
    "conditional": "COND",
    "hypothetical": "HYP",
    "associated_with_someone_else": "ASW",
}

MODALITY_CODES = {
    "factual": "FACTUAL",
    "conditional": "CONDITIONAL",
    "possible": "POSSIBLE",
    "proposed": "PROPOSED",
}

_CONCEPT_RE = re.compile(
    r'^c="(?P<text>.*)"\s+(?P<l1>\d+):(?P<t1>\d+)(?:\s+|\s*~\s*)(?P<l2>\d+):(?P<t2>\d+)'
    r'\s*\|\|\s*t="(?P<cat>[^"]+)"(?P<rest>.*)$'
)
_FIELD_RE = re.compile(r'\|\|\s*(\w+)="([^"]*)"')


def _parse_standoff_line(line: str, source: str, lineno: int):
    m = _CONCEPT_RE.match(line.strip())
    if not m:
        raise CorpusError(f"{source}:{lineno}: unparseable record {line.strip()!r}")
    fields = dict(_FIELD_RE.findall(m.group("rest")))
    coords = tuple(int(m.group(k)) for k in ("l1", "t1", "l2", "t2"))
    return m.group("text"), coords, m.group("cat"), fields


def import_standoff(text_path, concept_path, assertion_path=None, doc_id: str | None = None,
                    schemes: Mapping[str, TagScheme] | None = None) -> Corpus:
    """Read one i2b2-style record: a tokenised text file plus concept/assertion files.

    Text lines are sentences (1-based line numbers) of whitespace-separated
    tokens (0-based token numbers). Concept records look like
    ``c="chest pain" 3:4 3:5||t="problem"``; assertion records repeat the
    concept and add ``||a="absent"`` and optionally ``||m="proposed"``.
    Concepts without an assertion record get polarity ``ABSENT-ANNOTATION``.
    Spans crossing a line boundary are logged and skipped.
    """
    text_path = Path(text_path)
    doc_id = doc_id or text_path.stem
    lines = text_path.read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    sent_tokens = []
    offset = 0
    for line in lines:
        sent_tokens.append(whitespace_tokenize(line, offset))
        offset += len(line) + 1

    def locate(coords, source, lineno):
        l1, t1, l2, t2 = coords
        for ln, tk in ((l1, t1), (l2, t2)):
            if not 1 <= ln <= len(sent_tokens) or not 0 <= tk < len(sent_tokens[ln - 1]):
                raise CorpusError(f"{source}:{lineno}: coordinate {ln}:{tk} out of range")
        if (l1, t1) > (l2, t2):
            raise CorpusError(f"{source}:{lineno}: span end precedes start")
        return l1, t1, l2, t2

    concepts: dict[tuple[int, int, int], SpanAnnotation] = {}
    skipped: set[tuple[int, int, int, int]] = set()
    for lineno, line in enumerate(Path(concept_path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        text, coords, cat, _ = _parse_standoff_line(line, str(concept_path), lineno)
        l1, t1, l2, t2 = locate(coords, concept_path, lineno)
        if l1 != l2:
            log.warning("%s:%d: skipping cross-sentence concept %r", concept_path, lineno, text)
            skipped.add(coords)
            continue
        surface = " ".join(t.text for t in sent_tokens[l1 - 1][t1 : t2 + 1])
        if surface.lower() != text.lower():
            log.warning("%s:%d: concept text %r does not match tokens %r", concept_path, lineno, text, surface)
        concepts[(l1, t1, t2)] = SpanAnnotation(t1, t2, cat, {})

    if assertion_path is not None:
        for lineno, line in enumerate(Path(assertion_path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            _, coords, _, fields = _parse_standoff_line(line, str(assertion_path), lineno)
            l1, t1, l2, t2 = locate(coords, assertion_path, lineno)
            if coords in skipped:
                continue
            ann = concepts.get((l1, t1, t2)) if l1 == l2 else None
            if ann is None:
                raise CorpusError(f"{assertion_path}:{lineno}: assertion has no matching concept span")
            if "a" in fields:
                code = ASSERTION_CODES.get(fields["a"].strip().lower())
                if code is None:
                    raise CorpusError(f"{assertion_path}:{lineno}: unknown assertion {fields['a']!r}")
                ann.attributes[POLARITY] = code
            if "m" in fields:
                code = MODALITY_CODES.get(fields["m"].strip().lower())
                if code is None:
                    raise CorpusError(f"{assertion_path}:{lineno}: unknown modality {fields['m']!r}")
                ann.attributes[MODALITY] = code

    for ann in concepts.values():
        ann.attributes.setdefault(POLARITY, ABSENT_ANNOTATION)

    sentences = []
    for ln, toks in enumerate(sent_tokens, 1):
        if not toks:
            continue
        anns = [a for (l, _, _), a in sorted(concepts.items()) if l == ln]
        sentences.append((toks, {NER: anns} if anns else {}))
    return make_corpus([(doc_id, sentences)], schemes)


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------

POLARITY_CUES = {"NEG": ("no", "denies", "without"), "HYP": ("if",), "COND": ("when",),
                 "POSS": ("possible",), "ASW": ("family",), "POS": ()}
MODALITY_CUES = {"CONDITIONAL": ("should",), "POSSIBLE": ("may",), "PROPOSED": ("plan",), "FACTUAL": ()}


def _parse_weights(text: str) -> dict[str, float]:
    out = {}
    for item in filter(None, (p.strip() for p in text.split(","))):
        key, _, value = item.partition("=")
        out[key.strip()] = float(value)
    return out


@dataclass
class GeneratorConfig:
    sentences: int = 200
    sentences_per_doc: int = 10
    categories: tuple[str, ...] = ("problem", "treatment", "test")
    filler_vocab: int = 40
    entity_vocab: int = 12
    max_entity_len: int = 3
    max_entities: int = 3
    style: str = "2012"  # "2010": polarity only on the first category
    neg_fraction: float = 0.3
    polarity_weights: str = "POS=0.8,HYP=0.1,POSS=0.1"
    include_modality: bool = False
    modality_weights: str = "FACTUAL=0.7,POSSIBLE=0.15,PROPOSED=0.15"

    def validate(self) -> None:
        if self.sentences <= 0:
            raise ValueError("generator needs at least one sentence")
        if not self.categories:
            raise ValueError("generator needs at least one category")
        if self.style not in ("2010", "2012"):
            raise ValueError(f"unknown style {self.style!r}")
        if not 0.0 <= self.neg_fraction <= 1.0:
            raise ValueError("neg_fraction must lie in [0, 1]")
        if min(self.filler_vocab, self.entity_vocab, self.max_entity_len, self.max_entities, self.sentences_per_doc) < 1:
            raise ValueError("vocabulary sizes and lengths must be positive")
        for value in _parse_weights(self.polarity_weights):
            if value not in POLARITY_CUES or value == NEGATIVE:
                raise ValueError(f"unsupported polarity value {value!r}")
        for value in _parse_weights(self.modality_weights):
            if value not in MODALITY_CUES:
                raise ValueError(f"unsupported modality value {value!r}")

    @classmethod
    def from_file(cls, path) -> "GeneratorConfig":
        """Read a flat ``key = value`` file; tuples are comma-separated."""
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not eq or key not in types:
                raise ValueError(f"{path}:{lineno}: unknown or malformed setting {raw.strip()!r}")
            kind = types[key]
            if kind == "int":
                kwargs[key] = int(value)
            elif kind == "float":
                kwargs[key] = float(value)
            elif kind == "bool":
                kwargs[key] = value.lower() in ("1", "true", "yes", "on")
            elif kind.startswith("tuple"):
                kwargs[key] = tuple(v.strip() for v in value.split(",") if v.strip())
            else:
                kwargs[key] = value
        return cls(**kwargs)


def _draw(rng: np.random.Generator, weights: Mapping[str, float]) -> str:
    keys = list(weights)
    p = np.array([weights[k] for k in keys], dtype=float)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def generate_synthetic(config: GeneratorConfig, seed: int) -> Corpus:
    """Seeded random corpus with cue words that make attributes learnable."""
    config.validate()
    rng = np.random.default_rng(seed)
    fillers = [f"w{j}" for j in range(config.filler_vocab)]
    lexicon = {c: [f"{c}{j}" for j in range(config.entity_vocab)] for c in config.categories}
    others = _parse_weights(config.polarity_weights)
    total = sum(others.values())
    pol_weights = {NEGATIVE: config.neg_fraction}
    for value, w in others.items():
        pol_weights[value] = (1.0 - config.neg_fraction) * (w / total if total else 0.0)
    mod_weights = _parse_weights(config.modality_weights)

    documents = []
    for s in range(config.sentences):
        if s % config.sentences_per_doc == 0:
            documents.append((f"doc{len(documents):04d}", []))
        words: list[str] = []
        anns: list[SpanAnnotation] = []
        for _ in range(int(rng.integers(1, config.max_entities + 1))):
            words.extend(fillers[int(i)] for i in rng.integers(0, config.filler_vocab, size=int(rng.integers(1, 3))))
            cat = config.categories[int(rng.integers(len(config.categories)))]
            attrs = {}
            if config.style == "2012" or cat == config.categories[0]:
                attrs[POLARITY] = _draw(rng, pol_weights)
                cues = POLARITY_CUES[attrs[POLARITY]]
                if cues:
                    words.append(cues[int(rng.integers(len(cues)))])
            else:
                attrs[POLARITY] = ABSENT_ANNOTATION
            if config.include_modality:
                attrs[MODALITY] = _draw(rng, mod_weights)
                cues = MODALITY_CUES[attrs[MODALITY]]
                if cues:
                    words.append(cues[int(rng.integers(len(cues)))])
            length = int(rng.integers(1, config.max_entity_len + 1))
            start = len(words)
            words.extend(lexicon[cat][int(i)] for i in rng.integers(0, config.entity_vocab, size=length))
            anns.append(SpanAnnotation(start, start + length - 1, cat, attrs))
        words.extend(fillers[int(i)] for i in rng.integers(0, config.filler_vocab, size=int(rng.integers(0, 3))))
        tokens, pos = [], 0
        for w in words:
            tokens.append(Token(w, pos, pos + len(w)))
            pos += len(w) + 1
        documents[-1][1].append((tokens, {NER: anns}))
    return make_corpus(documents)
