"""Minimal dense numerics: reverse-mode autodiff over numpy, MLPs, Adam.

Gradients come from a recorded computation graph over a closed set of
primitives. Every op accepts plain ndarrays (inference fast path) or Var
nodes (recording); mixing is allowed and constants simply receive no
gradient. All training math is float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, TraceFormatError

CHECKPOINT_MAGIC = b"TRCKPT01"
CHECKPOINT_VERSION = 1


class Var:
    """Node in the recorded computation graph."""

    __slots__ = ("data", "grad", "_parents", "_bwd")

    def __init__(self, data, parents=(), bwd=None):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self._parents = parents
        self._bwd = bwd


def _d(x):
    return x.data if isinstance(x, Var) else x


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(out, args, grad_fns):
    """Wrap an op result: args and grad_fns align; non-Var args are skipped."""
    parents = []
    fns = []
    for a, fn in zip(args, grad_fns):
        if isinstance(a, Var):
            parents.append(a)
            fns.append(fn)
    if not parents:
        return out

    def bwd(g):
        return [fn(g) for fn in fns]

    return Var(out, tuple(parents), bwd)


# ---------------------------------------------------------------------------
# primitives

def matmul(a, b):
    ad, bd = _d(a), _d(b)
    out = ad @ bd

    def ga(g):
        return g @ bd.T if bd.ndim > 1 else np.outer(g, bd) if ad.ndim > 1 else g * bd

    def gb(g):
        if ad.ndim == 1 and g.ndim == 1:
            return np.outer(ad, g)
        return ad.T @ g

    return _make(out, (a, b), (ga, gb))


def add(a, b):
    ad, bd = _d(a), _d(b)
    out = ad + bd
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g, ad.shape),
                  lambda g: _unbroadcast(g, bd.shape)))


def sub(a, b):
    ad, bd = _d(a), _d(b)
    out = ad - bd
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g, ad.shape),
                  lambda g: _unbroadcast(-g, bd.shape)))


def mul(a, b):
    ad, bd = _d(a), _d(b)
    out = ad * bd
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g * bd, ad.shape),
                  lambda g: _unbroadcast(g * ad, bd.shape)))


def neg(a):
    return _make(-_d(a), (a,), (lambda g: -g,))


def relu(a):
    ad = _d(a)
    out = np.maximum(ad, 0.0)
    return _make(out, (a,), (lambda g: g * (ad > 0.0),))


def exp(a):
    out = np.exp(_d(a))
    return _make(out, (a,), (lambda g: g * out,))


def log(a):
    ad = _d(a)
    return _make(np.log(ad), (a,), (lambda g: g / ad,))


def square(a):
    ad = _d(a)
    return _make(ad * ad, (a,), (lambda g: 2.0 * ad * g,))


def minimum(a, b):
    """Elementwise minimum; on exact ties the gradient routes to ``a``."""
    ad, bd = _d(a), _d(b)
    take_a = ad <= bd
    out = np.where(take_a, ad, bd)
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g * take_a, np.asarray(ad).shape),
                  lambda g: _unbroadcast(g * ~take_a, np.asarray(bd).shape)))


def maximum(a, b):
    """Elementwise maximum; on exact ties the gradient routes to ``a``."""
    ad, bd = _d(a), _d(b)
    take_a = ad >= bd
    out = np.where(take_a, ad, bd)
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g * take_a, np.asarray(ad).shape),
                  lambda g: _unbroadcast(g * ~take_a, np.asarray(bd).shape)))


def vsum(a):
    ad = _d(a)
    return _make(np.asarray(ad.sum()), (a,), (lambda g: np.broadcast_to(g, ad.shape).copy(),))


def vmean(a):
    ad = _d(a)
    n = ad.size
    return _make(np.asarray(ad.mean()), (a,),
                 (lambda g: np.broadcast_to(g / n, ad.shape).copy(),))


def pick(a, index):
    ad = _d(a)
    out = np.asarray(ad[index])

    def ga(g):
        full = np.zeros_like(ad)
        full[index] = g
        return full

    return _make(out, (a,), (ga,))


def concat_cols(a, b):
    ad, bd = _d(a), _d(b)
    out = np.concatenate([ad, bd], axis=1)
    na = ad.shape[1]
    return _make(out, (a, b),
                 (lambda g: g[:, :na], lambda g: g[:, na:]))


def concat_rows(parts):
    datas = [_d(p) for p in parts]
    out = np.concatenate(datas, axis=0)
    offsets = np.cumsum([0] + [d.shape[0] for d in datas])
    fns = [
        (lambda lo, hi: (lambda g: g[lo:hi]))(offsets[i], offsets[i + 1])
        for i in range(len(parts))
    ]
    return _make(out, tuple(parts), tuple(fns))


def gather_rows(a, idx):
    ad = _d(a)
    idx = np.asarray(idx, dtype=int)
    out = ad[idx]

    def ga(g):
        full = np.zeros_like(ad)
        np.add.at(full, idx, g)
        return full

    return _make(out, (a,), (ga,))


def segment_max(a, starts):
    """Row-block max: rows are grouped by ``starts`` (ascending, starts[0]=0).

    The subgradient routes to the lowest winning row index of each segment.
    """
    ad = _d(a)
    starts = np.asarray(starts, dtype=int)
    out = np.maximum.reduceat(ad, starts, axis=0)
    n_rows, n_cols = ad.shape
    n_seg = len(starts)

    def ga(g):
        counts = np.diff(np.append(starts, n_rows))
        seg_of_row = np.repeat(np.arange(n_seg), counts)
        hit = ad == out[seg_of_row]
        rows = np.where(hit, np.arange(n_rows)[:, None], n_rows)
        winner = np.minimum.reduceat(rows, starts, axis=0)
        full = np.zeros_like(ad)
        cols = np.broadcast_to(np.arange(n_cols), (n_seg, n_cols))
        np.add.at(full, (winner, cols), g)
        return full

    return _make(out, (a,), (ga,))


def log_softmax(a):
    ad = _d(a)
    if ad.ndim != 1:
        raise InvalidArgument("log_softmax expects a 1D logit vector")
    m = ad.max()
    s = ad - m
    lse = np.log(np.exp(s).sum())
    out = s - lse

    def ga(g):
        return g - np.exp(out) * g.sum()

    return _make(out, (a,), (ga,))


def softmax(a):
    ls = log_softmax(a)
    return exp(ls)


def cross_entropy(logits, label: int):
    """Negative log-likelihood of ``label`` under softmax(logits)."""
    return neg(pick(log_softmax(logits), int(label)))


# ---------------------------------------------------------------------------
# graph execution

def backward(loss: Var):
    """Accumulate gradients of a scalar loss into every reachable Var."""
    if not isinstance(loss, Var):
        raise InvalidArgument("loss is a constant; nothing to differentiate")
    if loss.data.size != 1:
        raise InvalidArgument("backward expects a scalar loss")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._bwd is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._bwd(node.grad)):
            g = np.asarray(g, dtype=float)
            parent.grad = g if parent.grad is None else parent.grad + g


def make_vars(params: dict) -> dict:
    return {k: Var(v) for k, v in params.items()}


def gradients(loss_fn, params: dict):
    """Run ``loss_fn`` over Var-wrapped params; returns (loss value, grads).

    Parameters the loss does not touch get zero gradients.
    """
    pvars = make_vars(params)
    loss = loss_fn(pvars)
    backward(loss)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data))
             for k, v in pvars.items()}
    return float(loss.data.reshape(())), grads


# ---------------------------------------------------------------------------
# MLPs

@dataclass(frozen=True)
class MlpSpec:
    """Fully connected stack: widths[0] inputs through widths[-1] outputs.

    Hidden layers use the rectifier; the output layer is linear unless
    ``output_softmax`` is set.
    """

    widths: tuple
    output_softmax: bool = False

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise InvalidArgument("MLP needs >= 2 positive layer widths")


def init_mlp(spec: MlpSpec, rng, prefix: str = "") -> dict:
    """Uniform fan-in initialization: U(-1/sqrt(n_in), 1/sqrt(n_in))."""
    params = {}
    for i in range(len(spec.widths) - 1):
        n_in, n_out = spec.widths[i], spec.widths[i + 1]
        bound = 1.0 / np.sqrt(n_in)
        params[f"{prefix}w{i}"] = rng.uniform(-bound, bound, size=(n_in, n_out))
        params[f"{prefix}b{i}"] = rng.uniform(-bound, bound, size=n_out)
    return params


def mlp_forward(spec: MlpSpec, params: dict, x, prefix: str = ""):
    """Affine/rectifier stack; works on ndarrays or Vars, 1D or row-batched."""
    xd = _d(x)
    if xd.shape[-1] != spec.widths[0]:
        raise InvalidArgument(
            f"input width {xd.shape[-1]} != spec width {spec.widths[0]}")
    h = x
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        h = add(matmul(h, params[f"{prefix}w{i}"]), params[f"{prefix}b{i}"])
        if i < n_layers - 1:
            h = relu(h)
    if spec.output_softmax:
        if _d(h).ndim == 1:
            h = softmax(h)
        else:
            hd = _d(h)
            if isinstance(h, Var):
                raise InvalidArgument("batched softmax is inference-only")
            m = hd.max(axis=-1, keepdims=True)
            e = np.exp(hd - m)
            h = e / e.sum(axis=-1, keepdims=True)
    return h


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected moment update; returns fresh parameter arrays."""
    state.t += 1
    t = state.t
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[k] = m
        state.v[k] = v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        out[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


# ---------------------------------------------------------------------------
# finite-difference verification

def grad_check(loss_fn, params: dict, h: float = 1e-5, max_checks: int = 10_000,
               seed: int = 0, grads: dict | None = None) -> float:
    """Max relative error of recorded gradients vs central differences.

    Coordinates are subsampled above ``max_checks``. The relative error
    denominator is floored at 1e-3, so near-zero entries are compared on an
    absolute scale.
    """
    if grads is None:
        _, grads = gradients(loss_fn, params)

    coords = [(k, i) for k, p in sorted(params.items()) for i in range(p.size)]
    if len(coords) > max_checks:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(coords), size=max_checks, replace=False)
        coords = [coords[i] for i in chosen]

    work = {k: p.astype(float).copy() for k, p in params.items()}
    worst = 0.0
    for k, i in coords:
        flat = work[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(work)
        up = float(_d(up))
        flat[i] = orig - h
        dn = float(_d(loss_fn(work)))
        flat[i] = orig
        numeric = (up - dn) / (2.0 * h)
        analytic = float(grads[k].reshape(-1)[i])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container

def save_checkpoint(path, tensors: dict, meta: dict | None = None):
    """Versioned binary container: named float64 tensors plus a JSON header."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f8")
            shape = arr.shape  # before ascontiguousarray, which promotes 0-d
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", len(shape)))
            for dim in shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (tensors, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise TraceFormatError(f"{path}: not a parameter checkpoint")
    off = 8
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise TraceFormatError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape.append(dim)
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        tensors[name] = arr.astype(float)
    return tensors, meta
