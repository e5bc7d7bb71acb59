import pytest

from jointtag.corpus import GeneratorConfig, SpanAnnotation, Token, generate_synthetic, make_corpus


def tokens_of(words):
    out, pos = [], 0
    for w in words:
        out.append(Token(w, pos, pos + len(w)))
        pos += len(w) + 1
    return out


def corpus_of(sentences, schemes=None, doc_id="d0"):
    """``sentences`` = list of (words, [(start, end, category, {attrs})])."""
    raw = [(tokens_of(words), {"ner": [SpanAnnotation(s, e, c, dict(a)) for s, e, c, a in spans]})
           for words, spans in sentences]
    return make_corpus([(doc_id, raw)], schemes)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(GeneratorConfig(sentences=30, include_modality=True), seed=11)


@pytest.fixture(scope="session")
def tiny_corpus():
    """Short sentences for finite-difference checks."""
    return generate_synthetic(
        GeneratorConfig(sentences=40, max_entities=1, max_entity_len=2, filler_vocab=3, include_modality=True), seed=4)
