"""Token featurisation and the bidirectional LSTM encoder.

Every layer exposes ``forward`` returning ``(output, cache)`` and ``backward``
taking that cache plus the output gradient. Parameter gradients accumulate
into the shared :class:`~jointtag.numerics.ParameterStore`.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import DTYPE, ParameterStore, sigmoid


class ProviderKind(str, enum.Enum):
    STATIC_TABLE = "static"
    PRECOMPUTED_CONTEXTUAL = "precomputed"
    HASHED_FALLBACK = "hashed"


class EmbeddingError(LookupError):
    pass


# ---------------------------------------------------------------------------
# Word embedding providers
# ---------------------------------------------------------------------------


class EmbeddingProvider:
    """Source of one frozen ``dim``-wide vector per token.

    Providers never modify their vectors. Only the unknown-word row of a
    static table is trainable.
    """

    kind: ProviderKind
    dim: int

    def register(self, store: ParameterStore) -> None:
        """Create any trainable parameters this provider owns."""

    def vectors(self, sentence, store: ParameterStore | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, sentence, grad: np.ndarray, store: ParameterStore) -> None:
        """Route gradient to trainable rows (no-op for frozen providers)."""

    def spec(self) -> dict:
        raise NotImplementedError


class HashedEmbeddings(EmbeddingProvider):
    """Deterministic pseudo-random unit vector per token text."""

    kind = ProviderKind.HASHED_FALLBACK

    def __init__(self, dim: int = 32, salt: str = ""):
        if dim <= 0:
            raise ValueError("embedding dim must be positive")
        self.dim = dim
        self.salt = salt
        self._cache: dict[str, np.ndarray] = {}

    def vector(self, text: str) -> np.ndarray:
        vec = self._cache.get(text)
        if vec is None:
            digest = hashlib.blake2b((self.salt + "\x00" + text).encode("utf-8"), digest_size=16).digest()
            rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
            vec = rng.standard_normal(self.dim)
            vec /= np.linalg.norm(vec)
            vec.setflags(write=False)
            self._cache[text] = vec
        return vec

    def vectors(self, sentence, store=None) -> np.ndarray:
        return np.stack([self.vector(t.text) for t in sentence.tokens]) if sentence.tokens else np.zeros((0, self.dim))

    def spec(self) -> dict:
        return {"kind": self.kind.value, "dim": self.dim, "salt": self.salt}


UNK_PARAM = "embed.unk"


class StaticTableEmbeddings(EmbeddingProvider):
    """Fixed word table; unknown words share a learned UNK row."""

    kind = ProviderKind.STATIC_TABLE

    def __init__(self, table: dict[str, np.ndarray], lowercase: bool = False, path: str | None = None):
        if not table:
            raise ValueError("empty embedding table")
        dims = {len(v) for v in table.values()}
        if len(dims) != 1:
            raise ValueError(f"inconsistent vector widths {sorted(dims)}")
        self.dim = dims.pop()
        self.lowercase = lowercase
        self.path = path
        self.table = {w: np.asarray(v, dtype=DTYPE) for w, v in table.items()}

    @classmethod
    def from_file(cls, path, lowercase: bool = False) -> "StaticTableEmbeddings":
        table = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if len(parts) < 2:
                    continue
                try:
                    table[parts[0]] = np.array([float(x) for x in parts[1:]], dtype=DTYPE)
                except ValueError:
                    raise EmbeddingError(f"{path}:{lineno}: non-numeric vector component") from None
        return cls(table, lowercase=lowercase, path=str(path))

    def register(self, store: ParameterStore) -> None:
        if UNK_PARAM not in store:
            store.zeros(UNK_PARAM, (self.dim,))

    def _key(self, text: str) -> str:
        return text.lower() if self.lowercase else text

    def vectors(self, sentence, store=None) -> np.ndarray:
        rows = []
        for tok in sentence.tokens:
            vec = self.table.get(self._key(tok.text))
            if vec is None:
                if store is None or UNK_PARAM not in store:
                    raise EmbeddingError("static table needs a registered UNK row for unknown words")
                vec = store[UNK_PARAM].value
            rows.append(vec)
        return np.stack(rows) if rows else np.zeros((0, self.dim))

    def backward(self, sentence, grad, store) -> None:
        for i, tok in enumerate(sentence.tokens):
            if self._key(tok.text) not in self.table:
                store[UNK_PARAM].grad += grad[i]

    def spec(self) -> dict:
        return {"kind": self.kind.value, "path": self.path, "lowercase": self.lowercase}


VECTOR_MAGIC = b"JTVC"


def write_vector_file(path, dim: int, records: Iterable[tuple[str, int, int, Sequence[float]]]) -> None:
    """Write contextual vectors keyed by ``(doc id, sentence index, token index)``.

    Layout (little-endian): magic ``JTVC``, u32 dim, u32 record count, then per
    record u16 doc-id length, UTF-8 doc id, u32 sentence index, u32 token
    index, ``dim`` float64 values.
    """
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(VECTOR_MAGIC)
        fh.write(struct.pack("<II", dim, len(records)))
        for doc_id, sent, tok, vec in records:
            vec = np.asarray(vec, dtype="<f8")
            if vec.shape != (dim,):
                raise ValueError(f"vector for {(doc_id, sent, tok)} has shape {vec.shape}")
            raw = doc_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<II", sent, tok))
            fh.write(vec.tobytes())


class PrecomputedEmbeddings(EmbeddingProvider):
    """Contextual vectors computed elsewhere (e.g. a clinical BERT), read as-is."""

    kind = ProviderKind.PRECOMPUTED_CONTEXTUAL

    def __init__(self, dim: int, vectors: dict[tuple[str, int, int], np.ndarray], path: str | None = None):
        self.dim = dim
        self.path = path
        self._vectors = vectors

    @classmethod
    def from_file(cls, path) -> "PrecomputedEmbeddings":
        data = Path(path).read_bytes()
        if data[:4] != VECTOR_MAGIC:
            raise EmbeddingError(f"{path}: not a vector file")
        dim, count = struct.unpack_from("<II", data, 4)
        pos = 12
        vectors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            doc_id = data[pos : pos + n].decode("utf-8")
            pos += n
            sent, tok = struct.unpack_from("<II", data, pos)
            pos += 8
            vec = np.frombuffer(data, dtype="<f8", count=dim, offset=pos).astype(DTYPE)
            vec.setflags(write=False)
            pos += 8 * dim
            vectors[(doc_id, sent, tok)] = vec
        return cls(dim, vectors, path=str(path))

    def vectors(self, sentence, store=None) -> np.ndarray:
        rows = []
        for i in range(len(sentence.tokens)):
            key = (sentence.doc_id, sentence.index, i)
            vec = self._vectors.get(key)
            if vec is None:
                raise EmbeddingError(f"no contextual vector for document {key[0]!r} sentence {key[1]} token {key[2]}")
            rows.append(vec)
        return np.stack(rows) if rows else np.zeros((0, self.dim))

    def spec(self) -> dict:
        return {"kind": self.kind.value, "path": self.path, "dim": self.dim}


def provider_from_spec(spec: dict) -> EmbeddingProvider:
    kind = ProviderKind(spec["kind"])
    if kind is ProviderKind.HASHED_FALLBACK:
        return HashedEmbeddings(spec["dim"], spec.get("salt", ""))
    if kind is ProviderKind.STATIC_TABLE:
        return StaticTableEmbeddings.from_file(spec["path"], spec.get("lowercase", False))
    return PrecomputedEmbeddings.from_file(spec["path"])


# ---------------------------------------------------------------------------
# Dense building blocks
# ---------------------------------------------------------------------------


class Linear:
    """``y = x @ W + b`` for row-stacked inputs."""

    def __init__(self, store: ParameterStore, name: str, in_dim: int, out_dim: int):
        self.store = store
        self.w_name, self.b_name = f"{name}.W", f"{name}.b"
        store.glorot(self.w_name, (in_dim, out_dim))
        store.zeros(self.b_name, (out_dim,))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.store[self.w_name].value + self.store[self.b_name].value

    def backward(self, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
        W = self.store[self.w_name]
        W.grad += x.T @ dy
        self.store[self.b_name].grad += dy.sum(axis=0)
        return dy @ W.value.T


class Embedding:
    def __init__(self, store: ParameterStore, name: str, rows: int, dim: int):
        self.store = store
        self.name = name
        store.glorot(name, (rows, dim))

    def forward(self, idx: np.ndarray) -> np.ndarray:
        return self.store[self.name].value[idx]

    def backward(self, idx: np.ndarray, grad: np.ndarray) -> None:
        np.add.at(self.store[self.name].grad, idx, grad)


# ---------------------------------------------------------------------------
# Character CNN
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CharVocab:
    """Character inventory; index 0 is the unknown bucket."""

    chars: tuple[str, ...]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "CharVocab":
        return cls(tuple(sorted({ch for text in texts for ch in text})))

    def __len__(self) -> int:
        return len(self.chars) + 1

    @cached_property
    def _lookup(self) -> dict[str, int]:
        return {ch: i + 1 for i, ch in enumerate(self.chars)}

    def encode(self, text: str) -> np.ndarray:
        # an empty string still yields one (unknown) position to pool over
        lookup = self._lookup
        return np.array([lookup.get(ch, 0) for ch in text] or [0], dtype=np.int64)


@dataclass
class CharCnnConfig:
    char_emb_dim: int = 16
    window: int = 3
    out_dim: int = 16


class CharCnn:
    """One convolution (zero padded, odd window) followed by max-pooling over positions."""

    def __init__(self, store: ParameterStore, vocab: CharVocab, config: CharCnnConfig | None = None,
                 name: str = "char"):
        self.config = config or CharCnnConfig()
        if self.config.window % 2 != 1:
            raise ValueError("char CNN window must be odd")
        self.store = store
        self.vocab = vocab
        self.emb = Embedding(store, f"{name}.embedding", len(vocab), self.config.char_emb_dim)
        self.conv = Linear(store, f"{name}.conv", self.config.window * self.config.char_emb_dim, self.config.out_dim)

    def forward(self, text: str):
        cfg = self.config
        idx = self.vocab.encode(text)
        m, pad = len(idx), cfg.window // 2
        padded = np.zeros((m + 2 * pad, cfg.char_emb_dim), dtype=DTYPE)
        padded[pad : pad + m] = self.emb.forward(idx)
        windows = np.stack([padded[j : j + cfg.window].reshape(-1) for j in range(m)])
        conv = self.conv.forward(windows)
        best = np.argmax(conv, axis=0)
        out = conv[best, np.arange(cfg.out_dim)]
        return out, (idx, windows, best, m)

    def backward(self, cache, dout: np.ndarray) -> None:
        cfg = self.config
        idx, windows, best, m = cache
        dconv = np.zeros((m, cfg.out_dim), dtype=DTYPE)
        dconv[best, np.arange(cfg.out_dim)] = dout
        dwin = self.conv.backward(windows, dconv).reshape(m, cfg.window, cfg.char_emb_dim)
        pad = cfg.window // 2
        dpadded = np.zeros((m + 2 * pad, cfg.char_emb_dim), dtype=DTYPE)
        for j in range(m):
            dpadded[j : j + cfg.window] += dwin[j]
        self.emb.backward(idx, dpadded[pad : pad + m])


class TokenEmbedder:
    """Row ``i`` = word vector of token ``i`` concatenated with its char-CNN vector."""

    def __init__(self, provider: EmbeddingProvider, char_cnn: CharCnn, store: ParameterStore):
        self.provider = provider
        self.char_cnn = char_cnn
        self.store = store
        provider.register(store)

    @property
    def dim(self) -> int:
        return self.provider.dim + self.char_cnn.config.out_dim

    def forward(self, sentence):
        words = self.provider.vectors(sentence, self.store)
        chars, caches = [], []
        for tok in sentence.tokens:
            vec, cache = self.char_cnn.forward(tok.text)
            chars.append(vec)
            caches.append(cache)
        out = np.concatenate([words, np.stack(chars)], axis=1)
        return out, (sentence, caches)

    def backward(self, cache, dout: np.ndarray) -> None:
        sentence, caches = cache
        d = self.provider.dim
        self.provider.backward(sentence, dout[:, :d], self.store)
        for i, c in enumerate(caches):
            self.char_cnn.backward(c, dout[i, d:])


def embed_tokens(sentence, provider: EmbeddingProvider, char_cnn: CharCnn) -> np.ndarray:
    return TokenEmbedder(provider, char_cnn, char_cnn.store).forward(sentence)[0]


# ---------------------------------------------------------------------------
# LSTM with peepholes and coupled input/forget gates
# ---------------------------------------------------------------------------


class LstmCell:
    """
    i_t = sigmoid(W_xi x_t + W_hi h_{t-1} + w_ci * c_{t-1} + b_i)
    c_t = (1 - i_t) * c_{t-1} + i_t * tanh(W_xc x_t + W_hc h_{t-1} + b_c)
    o_t = sigmoid(W_xo x_t + W_ho h_{t-1} + w_co * c_t + b_o)
    h_t = o_t * tanh(c_t)

    The cell-to-gate weights ``w_ci`` and ``w_co`` are diagonal and stored as
    vectors. There is no separate forget gate: ``1 - i_t`` plays that role.
    """

    def __init__(self, store: ParameterStore, name: str, input_size: int, hidden_size: int):
        self.store = store
        self.name = name
        self.input_size = input_size
        self.hidden_size = hidden_size
        for gate in ("i", "c", "o"):
            store.glorot(self._p(f"W_x{gate}"), (input_size, hidden_size))
            store.glorot(self._p(f"W_h{gate}"), (hidden_size, hidden_size))
            store.zeros(self._p(f"b_{gate}"), (hidden_size,))
        store.glorot(self._p("w_ci"), (hidden_size,))
        store.glorot(self._p("w_co"), (hidden_size,))

    def _p(self, short: str) -> str:
        return f"{self.name}.{short}"

    def v(self, short: str) -> np.ndarray:
        return self.store[self._p(short)].value

    def step(self, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
        if x.shape != (self.input_size,) or h_prev.shape != (self.hidden_size,) or c_prev.shape != (self.hidden_size,):
            raise ValueError(
                f"lstm_step shapes x{x.shape} h{h_prev.shape} c{c_prev.shape} do not match "
                f"input {self.input_size} / hidden {self.hidden_size}"
            )
        v = self.v
        i = sigmoid(x @ v("W_xi") + h_prev @ v("W_hi") + v("w_ci") * c_prev + v("b_i"))
        g = np.tanh(x @ v("W_xc") + h_prev @ v("W_hc") + v("b_c"))
        c = (1.0 - i) * c_prev + i * g
        o = sigmoid(x @ v("W_xo") + h_prev @ v("W_ho") + v("w_co") * c + v("b_o"))
        tc = np.tanh(c)
        h = o * tc
        return h, c, (x, h_prev, c_prev, i, g, c, o, tc)

    def step_backward(self, cache, dh: np.ndarray, dc: np.ndarray):
        x, h_prev, c_prev, i, g, c, o, tc = cache
        v = self.v
        grad = lambda short: self.store[self._p(short)].grad  # noqa: E731

        da_o = dh * tc * o * (1.0 - o)
        dc = dc + dh * o * (1.0 - tc * tc) + da_o * v("w_co")
        da_i = dc * (g - c_prev) * i * (1.0 - i)
        da_c = dc * i * (1.0 - g * g)
        dc_prev = dc * (1.0 - i) + da_i * v("w_ci")

        grad("w_co")[...] += da_o * c
        grad("w_ci")[...] += da_i * c_prev
        dx = np.zeros_like(x)
        dh_prev = np.zeros_like(h_prev)
        for gate, da in (("i", da_i), ("c", da_c), ("o", da_o)):
            grad(f"W_x{gate}")[...] += np.outer(x, da)
            grad(f"W_h{gate}")[...] += np.outer(h_prev, da)
            grad(f"b_{gate}")[...] += da
            dx += v(f"W_x{gate}") @ da
            dh_prev += v(f"W_h{gate}") @ da
        return dx, dh_prev, dc_prev

    def run(self, xs: np.ndarray):
        """Unroll over rows of ``xs`` from zero state; returns hidden states ``(n, hidden)``."""
        h = np.zeros(self.hidden_size, dtype=DTYPE)
        c = np.zeros(self.hidden_size, dtype=DTYPE)
        hs, caches = [], []
        for x in xs:
            h, c, cache = self.step(x, h, c)
            hs.append(h)
            caches.append(cache)
        return np.stack(hs), caches

    def run_backward(self, caches, dhs: np.ndarray) -> np.ndarray:
        dh_next = np.zeros(self.hidden_size, dtype=DTYPE)
        dc_next = np.zeros(self.hidden_size, dtype=DTYPE)
        dxs = np.zeros((len(caches), self.input_size), dtype=DTYPE)
        for t in range(len(caches) - 1, -1, -1):
            dxs[t], dh_next, dc_next = self.step_backward(caches[t], dhs[t] + dh_next, dc_next)
        return dxs


def lstm_step(cell: LstmCell, x_t, h_prev, c_prev) -> tuple[np.ndarray, np.ndarray]:
    h, c, _ = cell.step(np.asarray(x_t, dtype=DTYPE), np.asarray(h_prev, dtype=DTYPE), np.asarray(c_prev, dtype=DTYPE))
    return h, c


class BiLstm:
    """Row ``i`` of the output is ``[left state after x_1..x_i ; right state after x_n..x_i]``."""

    def __init__(self, store: ParameterStore, name: str, input_size: int, hidden_size: int):
        self.forward_cell = LstmCell(store, f"{name}.fwd", input_size, hidden_size)
        self.backward_cell = LstmCell(store, f"{name}.bwd", input_size, hidden_size)

    @property
    def output_size(self) -> int:
        return 2 * self.forward_cell.hidden_size

    def forward(self, xs: np.ndarray):
        if len(xs) == 0:
            raise ValueError("cannot encode an empty sequence")
        left, lcache = self.forward_cell.run(xs)
        right_rev, rcache = self.backward_cell.run(xs[::-1])
        return np.concatenate([left, right_rev[::-1]], axis=1), (lcache, rcache)

    def backward(self, cache, dout: np.ndarray) -> np.ndarray:
        lcache, rcache = cache
        h = self.forward_cell.hidden_size
        dx = self.forward_cell.run_backward(lcache, dout[:, :h])
        dx += self.backward_cell.run_backward(rcache, dout[::-1, h:])[::-1]
        return dx


def bilstm_encode(inputs, forward_cell: LstmCell, backward_cell: LstmCell) -> np.ndarray:
    xs = np.asarray(inputs, dtype=DTYPE)
    if len(xs) == 0:
        raise ValueError("cannot encode an empty sequence")
    left, _ = forward_cell.run(xs)
    right, _ = backward_cell.run(xs[::-1])
    return np.concatenate([left, right[::-1]], axis=1)
