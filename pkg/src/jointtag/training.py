"""Training loop, evaluation, checkpoints and the loss-coefficient sweep."""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import POLARITY, Corpus, Document, load_canonical, neg_only, with_schemes
from .encoder import CharVocab, ProviderKind, provider_from_spec
from .evaluation import HeadItem, MetricsReport, score_head
from .models import (
    NER,
    Architecture,
    EncoderConfig,
    JointTagger,
    ModelConfig,
    MissingGold,
    gold_columns,
    make_heads,
)
from .numerics import load_archive, save_archive
from .tags import SchemeKind, bilou_scheme, convert, decode_bilou

log = logging.getLogger(__name__)


class Regime(str, enum.Enum):
    ALL_POLARITY = "all_polarity"
    NEG_ONLY = "neg_only"


class NumericalAbort(RuntimeError):
    """Raised when a training loss or gradient stops being finite."""


class SchemeMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    train_path: str | None = None
    dev_path: str | None = None
    architecture: Architecture = Architecture.N_CRF
    attributes: tuple[str, ...] = (POLARITY,)
    loss_weights: tuple[float, ...] | None = None
    epochs: int = 50
    batch_size: int = 16  # sentences per gradient-accumulation window
    lr: float = 1e-3
    patience: int | None = None  # epochs without dev ner improvement; None disables early stopping
    seed: int = 0
    regime: Regime = Regime.ALL_POLARITY
    hidden_size: int = 512
    tag_embedding_dim: int = 25
    embedding_kind: ProviderKind = ProviderKind.HASHED_FALLBACK
    embedding_dim: int = 32
    embedding_path: str | None = None
    clip_norm: float | None = 5.0
    transition_mask: bool = True
    dropout: float = 0.0
    target_f1: float | None = None  # stop once every dev head reaches this span F1

    def validate(self) -> None:
        self.architecture = Architecture(self.architecture)
        self.regime = Regime(self.regime)
        self.embedding_kind = ProviderKind(self.embedding_kind)
        self.attributes = tuple(self.attributes)
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.patience is not None and self.patience < 0:
            raise ValueError("patience must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.loss_weights is not None:
            self.loss_weights = tuple(float(w) for w in self.loss_weights)
            if len(self.loss_weights) != 1 + len(self.attributes):
                raise ValueError(f"{len(self.loss_weights)} loss weights for {1 + len(self.attributes)} heads")
            if any(w < 0 for w in self.loss_weights):
                raise ValueError("loss weights must be non-negative")
        if self.embedding_kind is not ProviderKind.HASHED_FALLBACK and not self.embedding_path:
            raise ValueError(f"{self.embedding_kind.value} embeddings need a path")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["architecture"] = Architecture(self.architecture).value
        d["regime"] = Regime(self.regime).value
        d["embedding_kind"] = ProviderKind(self.embedding_kind).value
        d["attributes"] = list(self.attributes)
        d["loss_weights"] = list(self.loss_weights) if self.loss_weights is not None else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training settings {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def provider_spec(self) -> dict:
        kind = ProviderKind(self.embedding_kind)
        if kind is ProviderKind.HASHED_FALLBACK:
            return {"kind": kind.value, "dim": self.embedding_dim, "salt": ""}
        return {"kind": kind.value, "path": self.embedding_path}


def regime_label(regime: Regime, bilou_attributes: bool) -> str:
    """Row label used in the results tables."""
    if Regime(regime) is Regime.ALL_POLARITY:
        return "BILOU"
    return "BILOU+Neg only" if bilou_attributes else "Negation only"


def apply_regime(corpus: Corpus, regime: Regime) -> Corpus:
    return neg_only(corpus, POLARITY) if Regime(regime) is Regime.NEG_ONLY else corpus


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, store, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in store.trainable()}
        self.v = {n: np.zeros_like(p.value) for n, p in store.trainable()}

    def step(self, scale: float = 1.0) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.store.trainable():
            g = p.grad * scale
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Model construction and checkpoints
# ---------------------------------------------------------------------------


def _char_vocab(corpus: Corpus) -> CharVocab:
    return CharVocab.from_texts(t.text for s in corpus.sentences() for t in s.tokens)


def build_model(config: TrainConfig, corpus: Corpus) -> JointTagger:
    """Fresh model whose heads follow ``corpus`` schemes (already regime-filtered)."""
    config.validate()
    heads = make_heads(config.architecture, corpus.schemes, config.attributes, config.loss_weights)
    model_config = ModelConfig(
        config.architecture, heads, config.tag_embedding_dim,
        EncoderConfig(hidden_size=config.hidden_size, dropout=config.dropout),
        config.seed, config.transition_mask,
    )
    provider = provider_from_spec(config.provider_spec())
    return JointTagger(model_config, _char_vocab(corpus), provider)


def save_checkpoint(model: JointTagger, path, extra: Mapping | None = None) -> None:
    meta = {
        "model": model.config.to_dict(),
        "chars": list(model.char_vocab.chars),
        "provider": model.provider.spec(),
        "extra": dict(extra or {}),
    }
    save_archive(path, {name: p.value for name, p in model.store.items()}, meta)


def load_checkpoint(path) -> JointTagger:
    tensors, meta = load_archive(path)
    model = JointTagger(ModelConfig.from_dict(meta["model"]), CharVocab(tuple(meta["chars"])),
                        provider_from_spec(meta["provider"]))
    missing = set(model.store) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint lacks parameters {sorted(missing)}")
    model.store.restore(tensors)
    model.checkpoint_meta = meta.get("extra", {})
    return model


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _check_schemes(model: JointTagger, corpus: Corpus) -> None:
    for head in model.heads:
        have = corpus.schemes.get(head.name)
        if have is None:
            raise SchemeMismatch(f"corpus has no {head.name!r} column")
        if head.scheme.kind is SchemeKind.BILOU:
            ok = have == head.scheme
        else:
            ok = tuple(have.categories) == tuple(head.scheme.categories)
        if not ok:
            raise SchemeMismatch(
                f"head {head.name!r} was trained on categories {list(head.scheme.categories)} "
                f"but the corpus has {list(have.categories)}"
            )


def align_corpus(model: JointTagger, corpus: Corpus) -> Corpus:
    """Re-encode ``corpus`` under the model's schemes when its categories are a subset of them."""
    schemes = dict(corpus.schemes)
    for head in model.heads:
        have = corpus.schemes.get(head.name)
        if have is None:
            raise SchemeMismatch(f"corpus has no {head.name!r} column")
        if not set(have.categories) <= set(head.scheme.categories):
            raise SchemeMismatch(
                f"column {head.name!r} has categories {sorted(set(have.categories) - set(head.scheme.categories))} "
                "unknown to the model"
            )
        schemes[head.name] = bilou_scheme(head.scheme.categories)
    if schemes == dict(corpus.schemes):
        return corpus
    docs = []
    for doc in corpus.documents:
        sents = []
        for sent in doc.sentences:
            cols = {c: convert(seq, schemes[c]) for c, seq in sent.tag_columns.items()}
            sents.append(dataclasses.replace(sent, tag_columns=cols))
        docs.append(Document(doc.id, tuple(sents)))
    return Corpus(tuple(docs), schemes)


def evaluate(model: JointTagger, corpus: Corpus, *, oracle: bool = False, include_absent: bool = True,
             label: str = "") -> MetricsReport:
    """Score ``model`` on ``corpus`` per head: token accuracy, span micro and macro P/R/F1.

    ``oracle=True`` substitutes gold for predictions, which must score 1
    everywhere (given every class occurs). Gold attribute spans are decoded
    from the corpus columns; predicted ones follow :meth:`JointTagger.predict`.
    """
    _check_schemes(model, corpus)
    sentences = list(corpus.sentences())
    if not sentences:
        log.warning("evaluating on an empty corpus; every metric is reported as 0")
    items: dict[str, list[HeadItem]] = {h.name: [] for h in model.heads}
    for sent in sentences:
        gold = gold_columns(sent, model.heads)
        pred = None if oracle else model.predict(sent)
        for h in model.heads:
            # attribute gold keeps the value on its entity extent, whatever the head scheme
            gold_spans = decode_bilou(sent.tag_columns[h.name], "strict")
            if oracle:
                p_seq, p_spans = gold[h.name], gold_spans
            else:
                p_seq, p_spans = pred[h.name]
            items[h.name].append(HeadItem((sent.doc_id, sent.index), gold[h.name].labels, gold_spans,
                                          p_seq.labels, p_spans))
    heads = {h.name: score_head(items[h.name], h.scheme.categories, include_absent) for h in model.heads}
    return MetricsReport(heads, len(sentences), label)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: JointTagger
    log: list[dict]
    best_epoch: int
    best_score: float
    dev_report: MetricsReport | None = None
    checkpoint: Path | None = None
    stopped: str = "epochs"


def _finite(x: float) -> bool:
    return math.isfinite(x)


def load_corpora(config: TrainConfig, train_corpus: Corpus | None = None,
                 dev_corpus: Corpus | None = None) -> tuple[Corpus, Corpus | None]:
    """Read (or take) train/dev corpora, align dev to train schemes, apply the regime."""
    if train_corpus is None:
        if not config.train_path:
            raise ValueError("no training corpus given")
        train_corpus = load_canonical(config.train_path)
    if dev_corpus is None and config.dev_path:
        dev_corpus = load_canonical(config.dev_path)
    if dev_corpus is not None and dict(dev_corpus.schemes) != dict(train_corpus.schemes):
        merged = dict(train_corpus.schemes)
        extra = {c: s for c, s in dev_corpus.schemes.items() if c not in merged}
        for col, scheme in dev_corpus.schemes.items():
            if col in merged and not set(scheme.categories) <= set(merged[col].categories):
                raise SchemeMismatch(f"dev column {col!r} has categories unseen in training")
        dev_corpus = with_schemes(dev_corpus, {**merged, **extra})
    missing = [c for c in (NER, *config.attributes) if c not in train_corpus.schemes]
    if missing:
        raise MissingGold(f"training corpus lacks columns {missing}")
    return apply_regime(train_corpus, config.regime), (
        apply_regime(dev_corpus, config.regime) if dev_corpus is not None else None)


def train(config: TrainConfig, train_corpus: Corpus | None = None, dev_corpus: Corpus | None = None,
          run_dir=None) -> TrainResult:
    """Train with gradient accumulation over ``batch_size`` sentences and Adam.

    Each epoch visits the training sentences in an order drawn from a
    generator seeded by ``config.seed``. After every epoch the dev set (or the
    training set when there is none) is scored; the parameters with the best
    ner span F1 are kept. The epoch log holds only deterministic values.
    """
    config.validate()
    train_corpus, dev_corpus = load_corpora(config, train_corpus, dev_corpus)
    model = build_model(config, train_corpus)
    heads = model.heads
    sentences = list(train_corpus.sentences())
    if not sentences:
        raise ValueError("training corpus is empty")
    golds = [gold_columns(s, heads) for s in sentences]
    monitor = dev_corpus if dev_corpus is not None and len(dev_corpus) else train_corpus

    optimizer = Adam(model.store, config.lr)
    order_rng = np.random.default_rng(config.seed)
    run_dir = Path(run_dir) if run_dir is not None else None
    log_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "train_log.jsonl", "w", encoding="utf-8")

    records: list[dict] = []
    best = (-1.0, -1)
    best_values = None
    best_report = None
    stale = 0
    stopped = "epochs"
    try:
        for epoch in range(1, config.epochs + 1):
            order = order_rng.permutation(len(sentences))
            head_loss = {h.name: 0.0 for h in heads}
            epoch_loss = 0.0
            for b in range(0, len(order), config.batch_size):
                batch = order[b : b + config.batch_size]
                model.store.zero_grad()
                for i in batch:
                    out = model.loss_and_grad(sentences[i], golds[i], scale=1.0 / len(batch))
                    if not _finite(out.total_loss):
                        raise NumericalAbort(
                            f"epoch {epoch}: non-finite loss {out.total_loss} on sentence "
                            f"{sentences[i].doc_id}/{sentences[i].index}; per-head losses {out.losses}"
                        )
                    epoch_loss += out.total_loss
                    for name, value in out.losses.items():
                        head_loss[name] += value
                norm = model.store.grad_norm()
                if not _finite(norm):
                    raise NumericalAbort(f"epoch {epoch}: non-finite gradient norm")
                scale = 1.0
                if config.clip_norm is not None and norm > config.clip_norm:
                    scale = config.clip_norm / norm
                optimizer.step(scale)

            report = evaluate(model, monitor)
            ner_f1 = report.heads[NER].micro.f1
            record = {"epoch": epoch, "loss": epoch_loss / len(sentences)}
            record.update({f"loss_{k}": v / len(sentences) for k, v in head_loss.items()})
            record.update({f"dev_f1_{k}": m.micro.f1 for k, m in report.heads.items()})
            record.update({f"dev_macro_f1_{k}": m.macro.f1 for k, m in report.heads.items()})
            records.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.5f ner F1 %.4f", epoch, record["loss"], ner_f1)

            if ner_f1 > best[0]:
                best = (ner_f1, epoch)
                best_values = model.store.snapshot()
                best_report = report
                stale = 0
            else:
                stale += 1
            if config.target_f1 is not None and all(m.micro.f1 >= config.target_f1 for m in report.heads.values()):
                best = (ner_f1, epoch)
                best_values = model.store.snapshot()
                best_report = report
                stopped = "target"
                break
            if config.patience is not None and stale > config.patience:
                stopped = "patience"
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    model.store.restore(best_values)
    checkpoint = None
    if run_dir is not None:
        checkpoint = run_dir / "model.jtar"
        save_checkpoint(model, checkpoint, {"regime": Regime(config.regime).value, "best_epoch": best[1],
                                            "train": config.to_dict()})
    return TrainResult(model, records, best[1], best[0], best_report, checkpoint, stopped)


# ---------------------------------------------------------------------------
# Results tables and the loss-coefficient sweep
# ---------------------------------------------------------------------------

ARCHITECTURE_NAMES = {
    Architecture.COND_SOFTMAX: "Conditional Softmax",
    Architecture.N_CRF: "BiLSTM n-CRF",
    Architecture.CRF_SMAX_TF: "BiLSTM CRF-Smax-TF",
    Architecture.N_CRF_TF: "BiLSTM n-CRF-TF",
}


@dataclass
class ResultRow:
    method: str
    other: str
    report: MetricsReport


def result_row(model: JointTagger, report: MetricsReport, regime: Regime) -> ResultRow:
    bilou_attrs = any(h.scheme.kind is SchemeKind.BILOU for h in model.attr_heads)
    return ResultRow(ARCHITECTURE_NAMES[model.arch], regime_label(regime, bilou_attrs), report)


def format_results(rows: Sequence[ResultRow], head: str, caption: str = "") -> str:
    """One tab-separated table for ``head``: entity tables carry micro scores, attribute tables add macro."""
    with_macro = head != NER
    cols = ["Method", "Other parameters", "Accuracy", "Precision", "Recall", "Span-based F1"]
    if with_macro:
        cols += ["Macro-avg P", "Macro-avg R", "Macro-avg F1"]
    lines = ["\t".join(cols)]
    for row in rows:
        m = row.report.heads.get(head)
        if m is None:
            continue
        vals = [m.token_accuracy, m.micro.precision, m.micro.recall, m.micro.f1]
        if with_macro:
            vals += [m.macro.precision, m.macro.recall, m.macro.f1]
        lines.append("\t".join([row.method, row.other, *(f"{v:.3f}" for v in vals)]))
    if caption:
        lines += ["", caption]
    return "\n".join(lines)


@dataclass
class AblationSpec:
    weights: list[tuple[float, ...]]
    metrics: tuple[str, ...] = ("ner_f1", "attr_f1", "attr_macro_f1")

    def validate(self) -> None:
        if not self.weights:
            raise ValueError("ablation sweep is empty")


@dataclass
class AblationRow:
    weights: tuple[float, ...]
    values: dict[str, float] = field(default_factory=dict)
    result: TrainResult | None = None


def ablate(spec: AblationSpec, base: TrainConfig, train_corpus: Corpus | None = None,
           dev_corpus: Corpus | None = None, run_dir=None) -> list[AblationRow]:
    """Train and evaluate once per weight tuple, all with ``base.seed``."""
    spec.validate()
    rows = []
    for k, weights in enumerate(spec.weights):
        cfg = dataclasses.replace(base, loss_weights=tuple(weights))
        sub = Path(run_dir) / f"sweep{k:02d}" if run_dir is not None else None
        result = train(cfg, train_corpus, dev_corpus, sub)
        report = result.dev_report
        values = {"ner_f1": report.heads[NER].micro.f1}
        attrs = [h for h in report.heads if h != NER]
        if attrs:
            values["attr_f1"] = report.heads[attrs[0]].micro.f1
            values["attr_macro_f1"] = report.heads[attrs[0]].macro.f1
        rows.append(AblationRow(tuple(weights), {m: values[m] for m in spec.metrics if m in values}, result))
    return rows


def format_ablation(rows: Sequence[AblationRow], architecture: Architecture) -> str:
    metrics = sorted({m for r in rows for m in r.values}, key=["ner_f1", "attr_f1", "attr_macro_f1"].index)
    lines = [f"# loss-coefficient sweep: {ARCHITECTURE_NAMES[Architecture(architecture)]}",
             "\t".join(["weights", *metrics])]
    for r in rows:
        lines.append("\t".join(["/".join(f"{w:g}" for w in r.weights), *(f"{r.values[m]:.4f}" for m in metrics)]))
    return "\n".join(lines)
