"""Minimal differentiable compute: MLP stacks with explicit reverse-mode
backward passes, Adam, softmax cross-entropy, column max-pooling, a central
finite-difference gradient checker, and binary checkpoint I/O.

Everything runs in float64.  Caches returned by forward passes hold exactly
the values the matching backward pass needs; there is no autograd graph.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoFailure, LabelOutOfRange, MalformedHeader, ShapeMismatch, StaleCache

LEAKY_SLOPE = 0.01


def one_hot(labels, c: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelOutOfRange(f"labels outside [0, {c})")
    out = np.zeros((labels.shape[0], c))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _act(v: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return v
    return np.where(v > 0, v, LEAKY_SLOPE * v)


def _act_grad(v: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(v)
    return np.where(v > 0, 1.0, LEAKY_SLOPE)


@dataclass
class MlpStack:
    """Chain of affine layers with per-layer activation."""

    widths: tuple                 # (w0, w1, ..., wL)
    acts: tuple                   # L activation names
    weights: list = field(default_factory=list)   # (w_in, w_out) each
    biases: list = field(default_factory=list)    # (w_out,) each

    @classmethod
    def create(cls, widths, rng, acts=None, zero_last=False) -> "MlpStack":
        """He-style init; default activation is leaky on all but the last layer.

        ``zero_last`` zero-initializes the final layer so the stack starts as
        the zero map (used for distribution heads that should begin at a
        neutral output).
        """
        widths = tuple(int(w) for w in widths)
        nlayers = len(widths) - 1
        if nlayers < 1:
            raise ShapeMismatch("an MLP needs at least one layer")
        if acts is None:
            acts = ("leaky",) * (nlayers - 1) + ("identity",)
        acts = tuple(acts)
        if len(acts) != nlayers:
            raise ShapeMismatch(f"{nlayers} layers but {len(acts)} activations")
        weights, biases = [], []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            scale = np.sqrt(2.0 / w_in)
            weights.append(rng.normal(scale=scale, size=(w_in, w_out)))
            biases.append(np.zeros(w_out))
        if zero_last:
            weights[-1][:] = 0.0
        return cls(widths, acts, weights, biases)

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def params(self, prefix: str) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.w"] = w
            out[f"{prefix}.{i}.b"] = b
        return out

    def load(self, prefix: str, tensors: dict) -> None:
        for i in range(len(self.weights)):
            w = tensors[f"{prefix}.{i}.w"]
            b = tensors[f"{prefix}.{i}.b"]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ShapeMismatch(f"checkpoint shape mismatch at {prefix}.{i}")
            self.weights[i] = w
            self.biases[i] = b


def forward(stack: MlpStack, x: np.ndarray):
    """Run the stack on rows of x: (rows, w0) -> (rows, wL) plus a cache."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != stack.in_width:
        raise ShapeMismatch(
            f"input width {x.shape[1]} does not match stack width {stack.in_width}"
        )
    cache = {"stack_id": id(stack), "inputs": [], "preacts": []}
    h = x
    for w, b, act in zip(stack.weights, stack.biases, stack.acts):
        cache["inputs"].append(h)
        pre = h @ w + b
        cache["preacts"].append(pre)
        h = _act(pre, act)
    if not np.all(np.isfinite(h)):
        raise ShapeMismatch("forward produced non-finite values (overflow)")
    return h, cache


def backward(stack: MlpStack, cache: dict, gout: np.ndarray):
    """Exact reverse pass: returns ([(dW, db) per layer], dx)."""
    if cache.get("stack_id") != id(stack):
        raise StaleCache("cache does not belong to this stack")
    if len(cache["inputs"]) != len(stack.weights):
        raise StaleCache("cache layer count does not match stack")
    g = np.atleast_2d(np.asarray(gout, dtype=np.float64))
    grads = [None] * len(stack.weights)
    for i in reversed(range(len(stack.weights))):
        pre = cache["preacts"][i]
        x_in = cache["inputs"][i]
        if g.shape != pre.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != preact {pre.shape}")
        g = g * _act_grad(pre, stack.acts[i])
        grads[i] = (x_in.T @ g, g.sum(axis=0))
        g = g @ stack.weights[i].T
    return grads, g


def max_pool_points(features: np.ndarray):
    """Columnwise max over rows: (n, k) -> ((k,), argmax row per column)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1:
        raise ShapeMismatch(f"max_pool_points expects (n, k) with n >= 1, got {f.shape}")
    idx = f.argmax(axis=0)  # ties -> lowest row index
    return f[idx, np.arange(f.shape[1])], idx


def max_pool_backward(gout: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    g = np.zeros((n, idx.shape[0]))
    g[idx, np.arange(idx.shape[0])] = gout
    return g


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, targets):
    """Mean cross-entropy over rows and its exact gradient w.r.t. logits."""
    logits = np.atleast_2d(logits)
    targets = np.asarray(targets)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeMismatch(f"targets shape {targets.shape} != ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise LabelOutOfRange(f"target labels outside [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float((log_norm - z[np.arange(n), targets]).mean())
    grad = softmax(logits)
    grad[np.arange(n), targets] -= 1.0
    grad /= n
    return loss, grad


@dataclass
class AdamState:
    """Bias-corrected Adam with per-parameter moment buffers."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One in-place Adam update of every parameter present in grads."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correct1 = 1.0 - b1 ** state.step
    correct2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != param {p.shape} ({name})")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / correct1) / (np.sqrt(v / correct2) + state.eps)
    return params


@dataclass
class GradCheckReport:
    ok: bool
    tolerance: float
    max_rel_err: float
    per_param: dict          # name -> worst relative error
    failures: list           # names exceeding the tolerance

    def __str__(self):
        status = "pass" if self.ok else "FAIL"
        worst = ", ".join(f"{n}={e:.2e}" for n, e in sorted(self.per_param.items()))
        return f"grad_check {status} (max rel err {self.max_rel_err:.3e}): {worst}"


def grad_check(
    loss_fn,
    params: dict,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    floor: float = 1e-5,
    max_entries: int | None = None,
    rng=None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(params) -> (loss, grads)`` must be deterministic.  When
    ``max_entries`` is set, that many entries per parameter are sampled with
    ``rng``; otherwise every entry is checked.  Errors are relative to
    max(|numeric|, |analytic|, floor): central differences at f64 carry
    ~|loss| * 2^-52 / h of roundoff, so gradient entries below the floor
    are in effect compared absolutely (to floor * tolerance).
    """
    _, grads = loss_fn(params)
    per_param = {}
    failures = []
    for name, p in params.items():
        flat = p.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = (rng or np.random.default_rng(0)).choice(
                flat.size, size=max_entries, replace=False
            )
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up, _ = loss_fn(params)
            flat[i] = orig - h
            down, _ = loss_fn(params)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = grads[name].reshape(-1)[i]
            scale = max(abs(numeric), abs(analytic), floor)
            worst = max(worst, abs(numeric - analytic) / scale)
        per_param[name] = worst
        if worst > tolerance:
            failures.append(name)
    max_err = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(not failures, tolerance, max_err, per_param, failures)


# --- checkpoint format --------------------------------------------------------

CKPT_MAGIC = b"SLNK"
CKPT_VERSION = 1


def save_checkpoint(tensors: dict, path) -> None:
    """Write named float64 tensors: magic, u32 version, then per tensor the
    u32 name length + name bytes, u32 rank, u32 dims, little-endian data."""
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> dict:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 8 or data[:4] != CKPT_MAGIC:
        raise MalformedHeader(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CKPT_VERSION:
        raise MalformedHeader(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    off = 8
    while off < len(data):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(dims)
        off += count * 8
        tensors[name] = arr.astype(np.float64)
    return tensors
