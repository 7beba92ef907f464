"""Named parameters, the Adam optimizer and the checkpoint container."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .autograd import NonFiniteError, Tensor

INIT_SCALE = 0.05
CHECKPOINT_MAGIC = b"LFCK"
CHECKPOINT_VERSION = 1


class MissingGradientError(RuntimeError):
    pass


class ParamStore:
    """Ordered map of parameter name to :class:`Tensor` plus a trainable mask."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.trainable: dict[str, bool] = {}

    def add(self, name: str, shape, rng: np.random.Generator | None = None, value=None) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        if value is None:
            value = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        t = Tensor(np.array(value, dtype=self.dtype).reshape(shape), requires_grad=True, name=name)
        self.params[name] = t
        self.trainable[name] = True
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def set_trainable(self, names: Iterable[str], flag: bool) -> None:
        for n in names:
            if n not in self.params:
                raise KeyError(n)
            self.trainable[n] = flag

    def freeze(self, prefix: str = "") -> None:
        self.set_trainable(self.names(prefix), False)

    def unfreeze(self, prefix: str = "") -> None:
        self.set_trainable(self.names(prefix), True)

    def trainable_names(self) -> list[str]:
        return [n for n, on in self.trainable.items() if on]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_params(self, prefix: str = "") -> int:
        return sum(t.data.size for n, t in self.params.items() if n.startswith(prefix))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, a in arrays.items():
            if n not in self.params:
                continue
            t = self.params[n]
            if t.data.shape != a.shape:
                raise ValueError(f"shape mismatch for {n}: {t.data.shape} vs {a.shape}")
            t.data = np.array(a, dtype=self.dtype)

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store in another precision (e.g. fp64 for gradient checks)."""
        out = ParamStore(dtype)
        for n, t in self.params.items():
            out.add(n, t.data.shape, value=t.data)
            out.trainable[n] = self.trainable[n]
        return out


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState, names: Iterable[str] | None = None) -> None:
    """Bias-corrected Adam update of the trainable parameters.

    ``names`` restricts the update to a subset; parameters outside it (and all
    frozen ones) keep their values and moment estimates.
    """
    selected = store.trainable_names() if names is None else [n for n in names if store.trainable[n]]
    for n in selected:
        if store[n].grad is None:
            raise MissingGradientError(f"no gradient for trainable parameter {n!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for n in selected:
        p = store[n]
        g = p.grad.astype(np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {n!r} at step {state.step}")
        m = state.m.get(n)
        if m is None:
            m = np.zeros(g.shape)
            state.v[n] = np.zeros(g.shape)
            state.t[n] = 0
        m = b1 * m + (1 - b1) * g
        v = b2 * state.v[n] + (1 - b2) * g * g
        k = state.t[n] + 1
        state.m[n], state.v[n], state.t[n] = m, v, k
        mhat = m / (1 - b1**k)
        vhat = v / (1 - b2**k)
        p.data = (p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(store.dtype)
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f"parameter {n!r} became non-finite at step {state.step}")


# ---------------------------------------------------------------------------
# checkpoint container: magic, u32 version, u64 header size, JSON header, raw data


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(a)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "meta": meta or {}, "entries": entries}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen])
    base = 16 + hlen
    arrays = {}
    for e in header["entries"]:
        start = base + e["offset"]
        buf = data[start : start + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]
