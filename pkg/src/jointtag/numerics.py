"""Stable reductions, named parameters with gradients, seeded initialisation,
a central finite-difference gradient checker and the tensor archive format.

Tensors are plain ``float64`` numpy arrays.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

DTYPE = np.float64


def log_sum_exp(values, axis: int = -1) -> np.ndarray:
    """``max + log(sum(exp(v - max)))`` along ``axis``."""
    v = np.asarray(values, dtype=DTYPE)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise ValueError("log_sum_exp over an empty axis")
    m = np.max(v, axis=axis, keepdims=True)
    # all -inf along the axis: keep -inf instead of nan
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.sum(np.exp(v - safe), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    if z.ndim == 0 or z.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Seeded initialisation
# ---------------------------------------------------------------------------


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator determined only by ``(seed, name)``."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=16).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & (2**64 - 1), *words])))


def glorot_uniform(shape: tuple[int, ...], seed: int, name: str, fan: tuple[int, int] | None = None) -> np.ndarray:
    if fan is None:
        # a vector holds a diagonal matrix: bound it as a square one
        fan = (shape[0], shape[0]) if len(shape) == 1 else (shape[0], shape[-1])
    fan_in, fan_out = fan
    bound = np.sqrt(6.0 / max(fan_in + fan_out, 1))
    return param_rng(seed, name).uniform(-bound, bound, size=shape).astype(DTYPE)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True


class ParameterStore:
    """Named parameters with accumulated gradients. Names are unique."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._entries: dict[str, Parameter] = {}

    def add(self, name: str, value, trainable: bool = True) -> Parameter:
        if name in self._entries:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=DTYPE)
        param = Parameter(value, np.zeros_like(value), trainable)
        self._entries[name] = param
        return param

    def glorot(self, name: str, shape: tuple[int, ...], fan: tuple[int, int] | None = None) -> Parameter:
        return self.add(name, glorot_uniform(shape, self.seed, name, fan))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Parameter:
        return self.add(name, np.zeros(shape, dtype=DTYPE))

    def __getitem__(self, name: str) -> Parameter:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> Iterable[tuple[str, Parameter]]:
        return self._entries.items()

    def trainable(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self._entries.items() if p.trainable]

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.grad.fill(0.0)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(p.grad * p.grad) for _, p in self.trainable())))

    def num_values(self) -> int:
        return sum(p.value.size for _, p in self.trainable())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._entries.items()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            target = self._entries[name].value
            if target.shape != value.shape:
                raise ValueError(f"shape mismatch for {name}: {target.shape} vs {value.shape}")
            target[...] = value


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


class NonDeterministicLoss(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    worst_index: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_rel_error.values())

    @property
    def worst(self) -> tuple[str, float]:
        if not self.max_rel_error:
            return "", 0.0
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]

    def summary(self) -> str:
        lines = [f"gradient check h={self.step:g} tol={self.tolerance:g}: {'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.max_rel_error.items():
            flag = "ok" if err < self.tolerance else "FAIL"
            lines.append(f"  {name:<40s} {err:.3e} {flag}")
        return "\n".join(lines)


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def check_gradients(
    loss_fn: Callable[[ParameterStore], float],
    store: ParameterStore,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn(store)`` must return the scalar loss and accumulate its analytic
    gradient into ``store`` as a side effect. Every trainable entry (or the
    subset in ``names``) is perturbed element by element. Parameter values are
    restored exactly and gradients are left holding the analytic gradient.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    store.zero_grad()
    base = float(loss_fn(store))
    analytic = {n: p.grad.copy() for n, p in store.items()}
    store.zero_grad()
    again = float(loss_fn(store))
    if base != again or any(not np.array_equal(analytic[n], p.grad) for n, p in store.items()):
        raise NonDeterministicLoss(f"loss_fn gave {base!r} then {again!r}")

    report = GradCheckReport(tolerance=tolerance, step=step)
    selected = list(names) if names is not None else [n for n, _ in store.trainable()]
    for name in selected:
        value = store[name].value
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = float(loss_fn(store))
            flat[i] = orig - step
            minus = float(loss_fn(store))
            flat[i] = orig
            num_flat[i] = (plus - minus) / (2.0 * step)
        err = relative_error(analytic[name], numeric)
        if err.size:
            worst = int(np.argmax(err))
            report.max_rel_error[name] = float(err.reshape(-1)[worst])
            report.worst_index[name] = tuple(int(x) for x in np.unravel_index(worst, err.shape))
        else:
            report.max_rel_error[name] = 0.0
    store.zero_grad()
    for n, p in store.items():
        p.grad[...] = analytic[n]
    return report


# ---------------------------------------------------------------------------
# Tensor archive
# ---------------------------------------------------------------------------

ARCHIVE_MAGIC = b"JTAR"
ARCHIVE_VERSION = 1


class ArchiveError(ValueError):
    pass


def save_archive(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write named tensors plus JSON metadata.

    Layout (all integers little-endian): magic ``JTAR``, u32 version, u32
    metadata length, UTF-8 JSON metadata, u32 tensor count, then per tensor:
    u32 name length, UTF-8 name, u32 ndim, ndim x u64 shape, float64 data in
    row-major order.
    """
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<II", ARCHIVE_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != ARCHIVE_MAGIC:
        raise ArchiveError(f"{path}: not a tensor archive")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ArchiveError(f"{path}: truncated archive")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, meta_len = take("<II")
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        nbytes = 8 * size
        if pos + nbytes > len(data):
            raise ArchiveError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(DTYPE)
        pos += nbytes
    return tensors, meta
