"""Joint entity + attribute taggers over a shared char-CNN/BiLSTM encoder.

Architectures:

``N_CRF``
    One linear projection + CRF per column; loss is the weighted sum of the
    per-column CRF negative log-likelihoods.
``CRF_SMAX_TF``
    CRF for entities, softmax for attributes. Attribute inputs are the encoder
    states concatenated with an embedding of the entity tag at each token:
    gold tags in TRAIN mode, Viterbi tags in EVAL mode.
``N_CRF_TF``
    As ``CRF_SMAX_TF`` but every attribute column is decoded by a CRF.
``COND_SOFTMAX``
    Baseline conditional softmax decoder: a unidirectional LSTM reads the
    encoder state and the embedding of the previous entity tag (gold while
    training, greedy prediction otherwise); entity softmax over its output,
    attribute softmax over ``[output ; entity softmax]``.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from .crf import CrfLayer, build_bilou_mask
from .encoder import (
    BiLstm,
    CharCnn,
    CharCnnConfig,
    CharVocab,
    Embedding,
    EmbeddingProvider,
    Linear,
    LstmCell,
    TokenEmbedder,
)
from .evaluation import unprefixed_span_match
from .numerics import DTYPE, ParameterStore, log_sum_exp
from .tags import (
    SchemeKind,
    Span,
    TagScheme,
    TagSequence,
    convert,
    decode_bilou,
    unprefixed_scheme,
)

NER = "ner"


class Architecture(str, enum.Enum):
    COND_SOFTMAX = "cond_softmax"
    N_CRF = "n_crf"
    CRF_SMAX_TF = "crf_smax_tf"
    N_CRF_TF = "n_crf_tf"


class DecoderKind(str, enum.Enum):
    CRF = "crf"
    SOFTMAX = "softmax"


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class ConfigError(ValueError):
    pass


class MissingGold(KeyError):
    pass


# Reference coefficients for the composite losses, keyed by (architecture, number of heads).
REFERENCE_LOSS_WEIGHTS = {
    (Architecture.N_CRF, 3): (0.6, 0.2, 0.2),
    (Architecture.CRF_SMAX_TF, 2): (0.0002, 1.0),
    (Architecture.CRF_SMAX_TF, 3): (0.0002, 1.0, 3.0),
}


@dataclass
class HeadSpec:
    name: str
    decoder: DecoderKind
    scheme: TagScheme
    loss_weight: float = 1.0
    teacher_forced_by: str | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "decoder": DecoderKind(self.decoder).value, "tags": self.scheme.to_list(),
                "loss_weight": self.loss_weight, "teacher_forced_by": self.teacher_forced_by}

    @classmethod
    def from_dict(cls, d: Mapping) -> "HeadSpec":
        return cls(d["name"], DecoderKind(d["decoder"]), TagScheme.from_list(d["tags"]),
                   float(d["loss_weight"]), d.get("teacher_forced_by"))


@dataclass
class EncoderConfig:
    hidden_size: int = 512  # per direction
    char_emb_dim: int = 16
    char_window: int = 3
    char_out_dim: int = 16
    dropout: float = 0.0


@dataclass
class ModelConfig:
    architecture: Architecture
    heads: list[HeadSpec]
    tag_embedding_dim: int = 25
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    seed: int = 0
    transition_mask: bool = True

    def head(self, name: str) -> HeadSpec:
        for h in self.heads:
            if h.name == name:
                return h
        raise KeyError(name)

    @property
    def attribute_heads(self) -> list[HeadSpec]:
        return [h for h in self.heads if h.name != NER]

    def validate(self) -> None:
        self.architecture = Architecture(self.architecture)
        names = [h.name for h in self.heads]
        if names.count(NER) != 1:
            raise ConfigError("exactly one head must be named 'ner'")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate head names {names}")
        if self.tag_embedding_dim < 0 or self.encoder.hidden_size < 1:
            raise ConfigError("sizes must be non-negative (hidden size positive)")
        if not 0.0 <= self.encoder.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        arch = self.architecture
        for h in self.heads:
            h.decoder = DecoderKind(h.decoder)
            if h.loss_weight < 0:
                raise ConfigError(f"head {h.name}: negative loss weight")
            if h.teacher_forced_by not in (None, NER):
                raise ConfigError(f"head {h.name}: teacher forcing may only come from 'ner'")
            if h.name == NER:
                if h.teacher_forced_by is not None:
                    raise ConfigError("the ner head cannot be teacher forced")
                want = DecoderKind.SOFTMAX if arch is Architecture.COND_SOFTMAX else DecoderKind.CRF
                if h.decoder is not want:
                    raise ConfigError(f"{arch.value}: ner head must use a {want.value} decoder")
                continue
            want_decoder = {
                Architecture.N_CRF: DecoderKind.CRF,
                Architecture.N_CRF_TF: DecoderKind.CRF,
                Architecture.CRF_SMAX_TF: DecoderKind.SOFTMAX,
                Architecture.COND_SOFTMAX: DecoderKind.SOFTMAX,
            }[arch]
            if h.decoder is not want_decoder:
                raise ConfigError(f"{arch.value}: head {h.name} must use a {want_decoder.value} decoder")
            forced = arch in (Architecture.CRF_SMAX_TF, Architecture.N_CRF_TF)
            if forced and h.teacher_forced_by != NER:
                raise ConfigError(f"{arch.value}: head {h.name} must be teacher forced by 'ner'")
            if arch is Architecture.N_CRF and h.teacher_forced_by is not None:
                raise ConfigError("n_crf heads are not teacher forced")

    def to_dict(self) -> dict:
        return {"architecture": Architecture(self.architecture).value,
                "heads": [h.to_dict() for h in self.heads],
                "tag_embedding_dim": self.tag_embedding_dim,
                "encoder": asdict(self.encoder),
                "seed": self.seed,
                "transition_mask": self.transition_mask}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(Architecture(d["architecture"]), [HeadSpec.from_dict(h) for h in d["heads"]],
                   d["tag_embedding_dim"], EncoderConfig(**d["encoder"]), d["seed"], d["transition_mask"])


def make_heads(architecture: Architecture, schemes: Mapping[str, TagScheme],
               attributes: list[str] | tuple[str, ...] = ("polarity",),
               weights: tuple[float, ...] | None = None) -> list[HeadSpec]:
    """Standard head layout: BILOU entities, attributes BILOU under CRFs and un-prefixed under softmax.

    ``schemes`` are the corpus (BILOU) schemes; ``weights`` follow the order
    ``ner, *attributes`` and default to 1.
    """
    architecture = Architecture(architecture)
    columns = [NER, *attributes]
    if weights is None:
        weights = (1.0,) * len(columns)
    if len(weights) != len(columns):
        raise ConfigError(f"{len(weights)} loss weights for {len(columns)} heads")
    crf_attrs = architecture in (Architecture.N_CRF, Architecture.N_CRF_TF)
    forced = architecture in (Architecture.CRF_SMAX_TF, Architecture.N_CRF_TF)
    heads = []
    for col, w in zip(columns, weights):
        if col not in schemes:
            raise ConfigError(f"corpus has no column {col!r}")
        scheme = schemes[col]
        if col == NER:
            dec = DecoderKind.SOFTMAX if architecture is Architecture.COND_SOFTMAX else DecoderKind.CRF
            heads.append(HeadSpec(col, dec, scheme, float(w)))
        elif crf_attrs:
            heads.append(HeadSpec(col, DecoderKind.CRF, scheme, float(w), NER if forced else None))
        else:
            heads.append(HeadSpec(col, DecoderKind.SOFTMAX, unprefixed_scheme(scheme.categories), float(w),
                                  NER if forced else None))
    return heads


def gold_columns(sentence, heads: list[HeadSpec]) -> dict[str, TagSequence]:
    """Gold tags of every head, re-encoded from the sentence's BILOU columns into the head schemes."""
    out = {}
    for h in heads:
        if h.name not in sentence.tag_columns:
            raise MissingGold(f"sentence has no {h.name!r} column")
        out[h.name] = convert(sentence.tag_columns[h.name], h.scheme)
    return out


@dataclass
class ForwardOutput:
    mode: Mode
    predictions: dict[str, TagSequence]
    losses: dict[str, float] = field(default_factory=dict)
    total_loss: float | None = None
    attribute_inputs: dict[str, np.ndarray] = field(default_factory=dict)
    forcing_tags: np.ndarray | None = None
    soft_outputs: np.ndarray | None = None


NerHook = Callable[[np.ndarray], np.ndarray]


def _cross_entropy(logits: np.ndarray, gold: np.ndarray, weight: float):
    """Token-averaged cross-entropy, its gradient times ``weight``, and the probabilities."""
    n = len(gold)
    logp = logits - log_sum_exp(logits, axis=1)[:, None]
    probs = np.exp(logp)
    loss = -float(np.sum(logp[np.arange(n), gold])) / n
    d = probs.copy()
    d[np.arange(n), gold] -= 1.0
    return loss, d * (weight / n), probs


class JointTagger:
    def __init__(self, config: ModelConfig, char_vocab: CharVocab, provider: EmbeddingProvider):
        config.validate()
        self.config = config
        self.char_vocab = char_vocab
        self.provider = provider
        self.store = ParameterStore(config.seed)
        enc = config.encoder
        store = self.store
        self.char_cnn = CharCnn(store, char_vocab, CharCnnConfig(enc.char_emb_dim, enc.char_window, enc.char_out_dim))
        self.embedder = TokenEmbedder(provider, self.char_cnn, store)
        self.encoder = BiLstm(store, "encoder", self.embedder.dim, enc.hidden_size)
        self.width = self.encoder.output_size
        self.ner_head = config.head(NER)
        self.attr_heads = config.attribute_heads
        self.arch = config.architecture
        self._dropout_rng = np.random.default_rng(config.seed)
        self.proj: dict[str, Linear] = {}
        self.crf: dict[str, CrfLayer] = {}
        d = config.tag_embedding_dim
        k_ner = len(self.ner_head.scheme)
        self.tag_embedding = None
        self.label_embedding = None

        if self.arch is Architecture.COND_SOFTMAX:
            hidden = enc.hidden_size
            if d:
                self.label_embedding = Embedding(store, "decoder.label_embedding", k_ner + 1, d)
            self.decoder = LstmCell(store, "decoder.lstm", self.width + d, hidden)
            self.proj[NER] = Linear(store, "ner.proj", hidden, k_ner)
            for h in self.attr_heads:
                self.proj[h.name] = Linear(store, f"{h.name}.proj", hidden + k_ner, len(h.scheme))
            return

        forced = any(h.teacher_forced_by for h in self.attr_heads)
        if forced and d:
            self.tag_embedding = Embedding(store, "forcing.tag_embedding", k_ner, d)
        for h in [self.ner_head, *self.attr_heads]:
            in_dim = self.width + (d if h.teacher_forced_by and d else 0)
            self.proj[h.name] = Linear(store, f"{h.name}.proj", in_dim, len(h.scheme))
            if h.decoder is DecoderKind.CRF:
                mask = None
                if config.transition_mask and h.scheme.kind is SchemeKind.BILOU:
                    mask = build_bilou_mask(h.scheme)
                self.crf[h.name] = CrfLayer(len(h.scheme), mask, store, f"{h.name}.crf")

    @property
    def heads(self) -> list[HeadSpec]:
        return self.config.heads

    # ------------------------------------------------------------------

    def forward(self, sentence, mode: Mode = Mode.EVAL, gold: Mapping[str, TagSequence] | None = None,
                *, backward: bool = False, scale: float = 1.0, ner_hook: NerHook | None = None) -> ForwardOutput:
        """Run the model on one sentence.

        In TRAIN mode ``gold`` must cover every head. Losses are computed
        whenever gold is given. With ``backward=True`` the gradient of
        ``scale * total_loss`` is accumulated into ``self.store``.
        ``ner_hook`` rewrites the decoded entity tags before they are used,
        which lets tests inject perturbed predictions.
        """
        mode = Mode(mode)
        if len(sentence.tokens) == 0:
            raise ValueError("cannot tag an empty sentence")
        gold_idx = None
        if gold is not None or mode is Mode.TRAIN:
            gold = gold or {}
            missing = [h.name for h in self.heads if h.name not in gold]
            if missing:
                raise MissingGold(f"gold columns missing for heads {missing}")
            gold_idx = {name: np.asarray(seq.indices, dtype=np.int64) for name, seq in gold.items()}
        if backward and gold_idx is None:
            raise MissingGold("backward pass needs gold columns")

        X, emb_cache = self.embedder.forward(sentence)
        C, enc_cache = self.encoder.forward(X)
        drop = None
        if mode is Mode.TRAIN and self.config.encoder.dropout > 0:
            keep = 1.0 - self.config.encoder.dropout
            drop = (self._dropout_rng.random(C.shape) < keep) / keep
            C = C * drop
        if self.arch is Architecture.COND_SOFTMAX:
            out, dC = self._conditional_softmax(C, mode, gold_idx, backward, scale, ner_hook)
        else:
            out, dC = self._crf_family(C, mode, gold_idx, backward, scale, ner_hook)
        if backward:
            if drop is not None:
                dC = dC * drop
            dX = self.encoder.backward(enc_cache, dC)
            self.embedder.backward(emb_cache, dX)
        return out

    def _wrap(self, head: HeadSpec, idx) -> TagSequence:
        return TagSequence(head.scheme, tuple(int(i) for i in idx))

    def _crf_family(self, C, mode, gold, backward, scale, ner_hook):
        dC = np.zeros_like(C) if backward else None
        preds, losses = {}, {}
        total = 0.0

        ner = self.ner_head
        P = self.proj[NER].forward(C)
        pred_ner = self.crf[NER].viterbi(P)
        if ner_hook is not None:
            pred_ner = np.asarray(ner_hook(pred_ner.copy()), dtype=np.int64)
        preds[NER] = self._wrap(ner, pred_ner)
        if gold is not None:
            w = ner.loss_weight
            if backward:
                loss, dP = self.crf[NER].nll_backward(P, gold[NER], w * scale)
                dC += self.proj[NER].backward(C, dP)
            else:
                loss = self.crf[NER].nll(P, gold[NER])
            losses[NER] = loss
            total += w * loss

        forcing = gold[NER] if mode is Mode.TRAIN else pred_ner
        attr_inputs = {}
        for h in self.attr_heads:
            use_tags = h.teacher_forced_by is not None and self.tag_embedding is not None
            Z = np.concatenate([C, self.tag_embedding.forward(forcing)], axis=1) if use_tags else C
            attr_inputs[h.name] = Z
            logits = self.proj[h.name].forward(Z)
            w = h.loss_weight
            dlogits = None
            if h.decoder is DecoderKind.CRF:
                preds[h.name] = self._wrap(h, self.crf[h.name].viterbi(logits))
                if gold is not None:
                    if backward:
                        loss, dlogits = self.crf[h.name].nll_backward(logits, gold[h.name], w * scale)
                    else:
                        loss = self.crf[h.name].nll(logits, gold[h.name])
            else:
                preds[h.name] = self._wrap(h, np.argmax(logits, axis=1))
                if gold is not None:
                    loss, dlogits, _ = _cross_entropy(logits, gold[h.name], w * scale)
            if gold is not None:
                losses[h.name] = loss
                total += w * loss
            if backward:
                dZ = self.proj[h.name].backward(Z, dlogits)
                dC += dZ[:, : self.width]
                if use_tags:
                    self.tag_embedding.backward(forcing, dZ[:, self.width :])

        out = ForwardOutput(mode, preds, losses, total if gold is not None else None, attr_inputs,
                            np.asarray(forcing, dtype=np.int64).copy() if self.attr_heads else None)
        return out, dC

    def _conditional_softmax(self, C, mode, gold, backward, scale, ner_hook):
        n = len(C)
        ner = self.ner_head
        k_ner = len(ner.scheme)
        bos = k_ner
        hidden = self.decoder.hidden_size
        h = np.zeros(hidden, dtype=DTYPE)
        c = np.zeros(hidden, dtype=DTYPE)
        prev = bos
        prev_tags = np.empty(n, dtype=np.int64)
        outputs = np.empty((n, hidden), dtype=DTYPE)
        ent_logits = np.empty((n, k_ner), dtype=DTYPE)
        caches = []
        for t in range(n):
            prev_tags[t] = prev
            parts = [C[t]]
            if self.label_embedding is not None:
                parts.append(self.label_embedding.forward(prev))
            h, c, cache = self.decoder.step(np.concatenate(parts), h, c)
            caches.append(cache)
            outputs[t] = h
            ent_logits[t] = self.proj[NER].forward(h[None, :])[0]
            if mode is Mode.TRAIN:
                prev = int(gold[NER][t])
            else:
                step_pred = np.array([int(np.argmax(ent_logits[t]))])
                if ner_hook is not None:
                    step_pred = np.asarray(ner_hook(step_pred), dtype=np.int64)
                prev = int(step_pred[0])

        soft = np.exp(ent_logits - log_sum_exp(ent_logits, axis=1)[:, None])
        pred_ner = np.argmax(ent_logits, axis=1)
        preds = {NER: self._wrap(ner, pred_ner)}
        losses = {}
        total = 0.0
        d_ent = None
        if gold is not None:
            loss, d_ent, _ = _cross_entropy(ent_logits, gold[NER], ner.loss_weight * scale)
            losses[NER] = loss
            total += ner.loss_weight * loss

        Z = np.concatenate([outputs, soft], axis=1)
        attr_inputs = {}
        dO = np.zeros_like(outputs) if backward else None
        d_soft = np.zeros_like(soft) if backward else None
        for head in self.attr_heads:
            attr_inputs[head.name] = Z
            logits = self.proj[head.name].forward(Z)
            preds[head.name] = self._wrap(head, np.argmax(logits, axis=1))
            if gold is not None:
                loss, dlogits, _ = _cross_entropy(logits, gold[head.name], head.loss_weight * scale)
                losses[head.name] = loss
                total += head.loss_weight * loss
                if backward:
                    dZ = self.proj[head.name].backward(Z, dlogits)
                    dO += dZ[:, :hidden]
                    d_soft += dZ[:, hidden:]

        dC = None
        if backward:
            d_ent = d_ent + soft * (d_soft - np.sum(d_soft * soft, axis=1, keepdims=True))
            dO += self.proj[NER].backward(outputs, d_ent)
            dC = np.zeros_like(C)
            dh = np.zeros(hidden, dtype=DTYPE)
            dc = np.zeros(hidden, dtype=DTYPE)
            for t in range(n - 1, -1, -1):
                dx, dh, dc = self.decoder.step_backward(caches[t], dO[t] + dh, dc)
                dC[t] += dx[: self.width]
                if self.label_embedding is not None:
                    self.label_embedding.backward(prev_tags[t : t + 1], dx[None, self.width :])

        out = ForwardOutput(mode, preds, losses, total if gold is not None else None, attr_inputs,
                            prev_tags.copy(), soft)
        return out, dC

    # ------------------------------------------------------------------

    def loss_and_grad(self, sentence, gold: Mapping[str, TagSequence], scale: float = 1.0) -> ForwardOutput:
        """TRAIN-mode forward plus backward; gradients accumulate into the store."""
        return self.forward(sentence, Mode.TRAIN, gold, backward=True, scale=scale)

    def predict(self, sentence) -> dict[str, tuple[TagSequence, list[Span]]]:
        """EVAL-mode tags and spans per column.

        Entity and BILOU attribute columns are decoded leniently; un-prefixed
        attribute runs are kept only where they cover an entity span exactly.
        Attribute spans carry the attribute value as their category.
        """
        out = self.forward(sentence, Mode.EVAL)
        ner_seq = out.predictions[NER]
        ner_spans = decode_bilou(ner_seq, "lenient")
        result = {NER: (ner_seq, ner_spans)}
        for h in self.attr_heads:
            seq = out.predictions[h.name]
            if h.scheme.kind is SchemeKind.BILOU:
                spans = decode_bilou(seq, "lenient")
            else:
                spans = unprefixed_span_match(ner_spans, seq)
            result[h.name] = (seq, spans)
        return result


def _require(model: JointTagger, arch: Architecture) -> None:
    if model.arch is not arch:
        raise ConfigError(f"model is {model.arch.value}, not {arch.value}")


def forward_n_crf(model: JointTagger, sentence, gold=None, mode: Mode = Mode.EVAL) -> ForwardOutput:
    _require(model, Architecture.N_CRF)
    return model.forward(sentence, mode, gold)


def forward_crf_smax_tf(model: JointTagger, sentence, gold=None, mode: Mode = Mode.EVAL) -> ForwardOutput:
    _require(model, Architecture.CRF_SMAX_TF)
    return model.forward(sentence, mode, gold)


def forward_n_crf_tf(model: JointTagger, sentence, gold=None, mode: Mode = Mode.EVAL) -> ForwardOutput:
    _require(model, Architecture.N_CRF_TF)
    return model.forward(sentence, mode, gold)


def forward_cond_softmax_baseline(model: JointTagger, sentence, gold=None, mode: Mode = Mode.EVAL) -> ForwardOutput:
    _require(model, Architecture.COND_SOFTMAX)
    return model.forward(sentence, mode, gold)


def predict(model: JointTagger, sentence) -> dict[str, tuple[TagSequence, list[Span]]]:
    return model.predict(sentence)
