"""Minimal reverse-mode autodiff over float64 numpy arrays.

Values are 2-D row-major arrays (scalars are (1, 1)); a Tape records every
operation and replays exact gradients in reverse. Deliberately small: just
the operators the selection model needs, double precision, single writer,
bit-deterministic for a fixed thread count.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

__all__ = [
    "ShapeMismatch",
    "NonFiniteDetected",
    "StoreMismatch",
    "Tape",
    "Var",
    "ParamStore",
    "AdamState",
    "adam_step",
    "ema_update",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"TSCK"
CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteDetected(FloatingPointError):
    """A loss or update produced NaN/inf; the step must be aborted."""


class StoreMismatch(KeyError):
    """Two parameter stores disagree on names or shapes."""


def _as2d(value) -> np.ndarray:
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeMismatch(f"expected at most 2 dims, got shape {a.shape}")
    return a


class Var:
    """A node on the tape: a value and, after backward, its gradient.

    Nodes reference only their parents (through the backward closure), so
    a finished graph has no reference cycles and dies with its tape by
    refcounting alone. Keep it that way: a Var->Tape backreference would
    strand every intermediate array until a full gc pass.
    """

    __slots__ = ("value", "grad", "_backward")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad: np.ndarray | None = None
        self._backward = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


def _accum(v: Var, g: np.ndarray) -> None:
    if v.grad is None:
        # Copy: g may alias an array another parent also receives.
        v.grad = np.array(g)
    else:
        v.grad += g


class Tape:
    """Operation recorder; ops append nodes, backward() walks them reversed."""

    def __init__(self):
        self._nodes: list[Var] = []

    def var(self, value) -> Var:
        """Create a leaf variable (a parameter or an input)."""
        v = Var(_as2d(value).copy())
        self._nodes.append(v)
        return v

    def _node(self, value: np.ndarray, backward) -> Var:
        v = Var(value)
        v._backward = backward
        self._nodes.append(v)
        return v

    # ---- operators ----

    def matmul(self, a: Var, b: Var) -> Var:
        if a.value.shape[1] != b.value.shape[0]:
            raise ShapeMismatch(f"matmul {a.value.shape} @ {b.value.shape}")
        out = a.value @ b.value

        def backward(g, a=a, b=b):
            _accum(a, g @ b.value.T)
            _accum(b, a.value.T @ g)

        return self._node(out, backward)

    def add(self, a: Var, b: Var) -> Var:
        """Elementwise add; b may be a (1, n) bias row broadcast over rows."""
        sa, sb = a.value.shape, b.value.shape
        if sa != sb and not (sb[0] == 1 and sb[1] == sa[1]):
            raise ShapeMismatch(f"add {sa} + {sb}")
        out = a.value + b.value

        def backward(g, a=a, b=b, sb=sb):
            _accum(a, g)
            _accum(b, g if sb == g.shape else g.sum(axis=0, keepdims=True))

        return self._node(out, backward)

    def sub(self, a: Var, b: Var) -> Var:
        return self.add(a, self.scale(b, -1.0))

    def mul(self, a: Var, b: Var) -> Var:
        if a.value.shape != b.value.shape:
            raise ShapeMismatch(f"mul {a.value.shape} * {b.value.shape}")
        out = a.value * b.value

        def backward(g, a=a, b=b):
            _accum(a, g * b.value)
            _accum(b, g * a.value)

        return self._node(out, backward)

    def scale(self, a: Var, c: float) -> Var:
        out = a.value * c

        def backward(g, a=a, c=c):
            _accum(a, g * c)

        return self._node(out, backward)

    def add_const(self, a: Var, c) -> Var:
        """Add a constant array (no gradient to the constant)."""
        out = a.value + np.asarray(c, dtype=np.float64)

        def backward(g, a=a):
            _accum(a, g)

        return self._node(out, backward)

    def relu(self, a: Var) -> Var:
        out = np.maximum(a.value, 0.0)

        def backward(g, a=a, out=out):
            _accum(a, g * (out > 0.0))

        return self._node(out, backward)

    def sigmoid(self, a: Var) -> Var:
        out = 1.0 / (1.0 + np.exp(-a.value))

        def backward(g, a=a, out=out):
            _accum(a, g * out * (1.0 - out))

        return self._node(out, backward)

    def softmax(self, a: Var) -> Var:
        """Row-wise softmax."""
        z = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=1, keepdims=True)

        def backward(g, a=a, out=out):
            dot = (g * out).sum(axis=1, keepdims=True)
            _accum(a, out * (g - dot))

        return self._node(out, backward)

    def layer_norm(self, a: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
        """Row-wise normalization with learned scale and shift."""
        n = a.value.shape[1]
        if gamma.value.shape != (1, n) or beta.value.shape != (1, n):
            raise ShapeMismatch("layer_norm parameter shapes")
        mu = a.value.mean(axis=1, keepdims=True)
        xc = a.value - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * gamma.value + beta.value

        def backward(g, a=a, gamma=gamma, beta=beta, xhat=xhat, inv=inv, n=n):
            _accum(gamma, (g * xhat).sum(axis=0, keepdims=True))
            _accum(beta, g.sum(axis=0, keepdims=True))
            gx = g * gamma.value
            term = gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(
                axis=1, keepdims=True
            )
            _accum(a, term * inv)

        return self._node(out, backward)

    def transpose(self, a: Var) -> Var:
        out = a.value.T.copy()

        def backward(g, a=a):
            _accum(a, g.T)

        return self._node(out, backward)

    def concat(self, parts: list[Var], axis: int = 1) -> Var:
        if axis not in (0, 1):
            raise ShapeMismatch(f"concat axis {axis}")
        out = np.concatenate([p.value for p in parts], axis=axis)
        sizes = [p.value.shape[axis] for p in parts]

        def backward(g, parts=parts, sizes=sizes, axis=axis):
            at = 0
            for p, sz in zip(parts, sizes):
                sl = (slice(at, at + sz), slice(None)) if axis == 0 else (
                    slice(None),
                    slice(at, at + sz),
                )
                _accum(p, g[sl])
                at += sz

        return self._node(out, backward)

    def slice_cols(self, a: Var, j0: int, j1: int) -> Var:
        out = a.value[:, j0:j1].copy()

        def backward(g, a=a, j0=j0, j1=j1):
            full = np.zeros_like(a.value)
            full[:, j0:j1] = g
            _accum(a, full)

        return self._node(out, backward)

    def gather_rows(self, a: Var, idx) -> Var:
        idx = np.asarray(idx, dtype=np.intp)
        out = a.value[idx].copy()

        def backward(g, a=a, idx=idx):
            full = np.zeros_like(a.value)
            np.add.at(full, idx, g)
            _accum(a, full)

        return self._node(out, backward)

    def mean(self, a: Var) -> Var:
        out = np.array([[a.value.mean()]])
        inv = 1.0 / a.value.size

        def backward(g, a=a, inv=inv):
            _accum(a, np.full_like(a.value, g[0, 0] * inv))

        return self._node(out, backward)

    def sum(self, a: Var) -> Var:
        out = np.array([[a.value.sum()]])

        def backward(g, a=a):
            _accum(a, np.full_like(a.value, g[0, 0]))

        return self._node(out, backward)

    def attention(self, q: Var, k: Var, v: Var, n_heads: int, key_mask=None) -> Var:
        """Scaled dot-product attention, heads split along the feature axis.

        key_mask is an optional boolean vector (True = attend); masked keys
        get a -1e30 additive bias before the softmax.
        """
        d = q.value.shape[1]
        if k.value.shape[1] != d or v.value.shape[1] != d:
            raise ShapeMismatch("attention feature sizes differ")
        if k.value.shape[0] != v.value.shape[0]:
            raise ShapeMismatch("attention key/value counts differ")
        if d % n_heads != 0:
            raise ShapeMismatch(f"{n_heads} heads do not divide width {d}")
        dh = d // n_heads
        bias = None
        if key_mask is not None:
            key_mask = np.asarray(key_mask, dtype=bool).reshape(1, -1)
            if key_mask.shape[1] != k.value.shape[0]:
                raise ShapeMismatch("attention mask length")
            bias = np.where(key_mask, 0.0, -1e30)
        outs = []
        for h in range(n_heads):
            qh = self.slice_cols(q, h * dh, (h + 1) * dh)
            kh = self.slice_cols(k, h * dh, (h + 1) * dh)
            vh = self.slice_cols(v, h * dh, (h + 1) * dh)
            logits = self.scale(self.matmul(qh, self.transpose(kh)), 1.0 / np.sqrt(dh))
            if bias is not None:
                logits = self.add_const(logits, bias)
            outs.append(self.matmul(self.softmax(logits), vh))
        return outs[0] if n_heads == 1 else self.concat(outs, axis=1)

    def bce(self, pred: Var, target, reduction: str = "mean") -> Var:
        """Binary cross-entropy against (possibly fractional) targets.

        pred is clamped into [1e-7, 1-1e-7] so exact 0/1 sigmoid saturation
        cannot produce log(0); the clamp also zeroes the gradient there.
        """
        t = np.asarray(target, dtype=np.float64).reshape(pred.value.shape)
        lo, hi = 1e-7, 1.0 - 1e-7
        p = np.clip(pred.value, lo, hi)
        losses = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
        if reduction == "mean":
            out = np.array([[losses.mean()]])
            w = 1.0 / losses.size
        elif reduction == "sum":
            out = np.array([[losses.sum()]])
            w = 1.0
        else:
            raise ValueError(f"unknown reduction {reduction!r}")

        def backward(g, pred=pred, t=t, p=p, w=w, lo=lo, hi=hi):
            inner = np.where(
                (pred.value > lo) & (pred.value < hi),
                (p - t) / (p * (1.0 - p)),
                0.0,
            )
            _accum(pred, g[0, 0] * w * inner)

        return self._node(out, backward)

    def cross_entropy(self, logits: Var, target) -> Var:
        """Row-wise -sum(target * log_softmax(logits)), averaged over rows."""
        t = np.asarray(target, dtype=np.float64).reshape(logits.value.shape)
        sums = t.sum(axis=1)
        if not np.all(np.abs(sums - 1.0) <= 1e-9):
            raise ValueError("target distribution rows must sum to 1")
        z = logits.value - logits.value.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - lse
        rows = logits.value.shape[0]
        out = np.array([[-(t * logp).sum() / rows]])

        def backward(g, logits=logits, t=t, logp=logp, rows=rows):
            _accum(logits, g[0, 0] * (np.exp(logp) - t) / rows)

        return self._node(out, backward)

    def backward(self, loss: Var) -> None:
        """Accumulate d loss / d node into .grad for every reachable node."""
        if loss.value.shape != (1, 1):
            raise ShapeMismatch(f"loss must be scalar (1,1), got {loss.value.shape}")
        if not np.isfinite(loss.value[0, 0]):
            raise NonFiniteDetected(f"loss = {loss.value[0, 0]}")
        loss.grad = np.ones((1, 1))
        for node in reversed(self._nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


class ParamStore:
    """Named parameters plus matching gradient buffers, insertion-ordered."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self._params:
            raise StoreMismatch(f"duplicate parameter {name!r}")
        a = _as2d(value).copy()
        self._params[name] = a
        self._grads[name] = np.zeros_like(a)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[:] = 0.0

    def bind(self, tape: Tape) -> dict[str, Var]:
        """Leaf Vars for every parameter, for one forward/backward pass."""
        return {name: tape.var(value) for name, value in self._params.items()}

    def collect(self, bound: dict[str, Var]) -> None:
        """Accumulate gradients from bound Vars into the store buffers."""
        for name, var in bound.items():
            if var.grad is not None:
                self._grads[name] += var.grad

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self._params.items():
            out.add(name, value)
        return out

    def n_params(self) -> int:
        return sum(v.size for v in self._params.values())


class AdamState:
    """Per-parameter Adam moments plus the shared step counter."""

    def __init__(self, store: ParamStore, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {n: np.zeros_like(store[n]) for n in store.names()}
        self.v = {n: np.zeros_like(store[n]) for n in store.names()}


def adam_step(store: ParamStore, state: AdamState) -> None:
    """One bias-corrected Adam update from the store's gradient buffers."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in store.names():
        g = store.grad(name)
        if not np.all(np.isfinite(g)):
            raise NonFiniteDetected(f"gradient of {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        store[name][:] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def ema_update(teacher: ParamStore, student: ParamStore, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, elementwise."""
    if teacher.names() != student.names():
        raise StoreMismatch("parameter names differ")
    for name in teacher.names():
        t = teacher[name]
        s = student[name]
        if t.shape != s.shape:
            raise StoreMismatch(f"shape of {name!r} differs")
        t *= m
        t += (1.0 - m) * s


# ---- checkpoint io ----


def _store_blobs(store: ParamStore):
    names = store.names()
    shapes = {n: list(store[n].shape) for n in names}
    blobs = [np.ascontiguousarray(store[n], dtype="<f8").tobytes() for n in names]
    return names, shapes, blobs


def save_checkpoint(path, store: ParamStore, adam: AdamState | None = None,
                    teacher: ParamStore | None = None, *, step: int = 0,
                    config_hash: str = "", extra: dict | None = None) -> str:
    """Write a versioned binary checkpoint; returns its sha256 digest.

    Layout: magic, version, header length, JSON header, then raw
    little-endian float64 blobs in header order.
    """
    names, shapes, blobs = _store_blobs(store)
    sections = [{"kind": "params", "names": names, "shapes": shapes}]
    if teacher is not None:
        tn, ts, tb = _store_blobs(teacher)
        sections.append({"kind": "teacher", "names": tn, "shapes": ts})
        blobs += tb
    adam_meta = None
    if adam is not None:
        adam_meta = {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "step": adam.step,
        }
        for part in ("m", "v"):
            sections.append({"kind": f"adam_{part}", "names": names, "shapes": shapes})
            blobs += [
                np.ascontiguousarray(getattr(adam, part)[n], dtype="<f8").tobytes()
                for n in names
            ]
    header = {
        "sections": sections,
        "adam": adam_meta,
        "step": step,
        "config_hash": config_hash,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<II", CHECKPOINT_VERSION, len(hb))
    out += hb
    for b in blobs:
        out += b
    with open(path, "wb") as fh:
        fh.write(out)
    return hashlib.sha256(bytes(out)).hexdigest()


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def load_checkpoint(path):
    """Read a checkpoint; returns (store, adam|None, teacher|None, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version}")
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    at = 12 + hlen

    def read_arrays(names, shapes):
        nonlocal at
        out = {}
        for n in names:
            shape = tuple(shapes[n])
            size = shape[0] * shape[1] * 8
            out[n] = np.frombuffer(blob, dtype="<f8", count=shape[0] * shape[1],
                                   offset=at).reshape(shape).astype(np.float64)
            at += size
        return out

    store = teacher = None
    adam_m = adam_v = None
    for sec in header["sections"]:
        arrays = read_arrays(sec["names"], sec["shapes"])
        if sec["kind"] == "params":
            store = ParamStore()
            for n, a in arrays.items():
                store.add(n, a)
        elif sec["kind"] == "teacher":
            teacher = ParamStore()
            for n, a in arrays.items():
                teacher.add(n, a)
        elif sec["kind"] == "adam_m":
            adam_m = arrays
        elif sec["kind"] == "adam_v":
            adam_v = arrays
    if store is None:
        raise CheckpointError("no parameter section")
    adam = None
    if header.get("adam") is not None:
        meta = header["adam"]
        adam = AdamState(store, meta["lr"], meta["beta1"], meta["beta2"], meta["eps"])
        adam.step = meta["step"]
        if adam_m is not None:
            adam.m = adam_m
        if adam_v is not None:
            adam.v = adam_v
    meta = {
        "step": header.get("step", 0),
        "config_hash": header.get("config_hash", ""),
        "extra": header.get("extra", {}),
    }
    return store, adam, teacher, meta
