"""Minimal reverse-mode autodiff over numpy arrays.

Only the primitives used by the encoder, the decoders and the two losses are
provided. Every op appends one node to the tape; ``GradTape.backward`` walks
the nodes in reverse insertion order, which is a valid topological order
because a node can only reference slots created before it.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "GradTape", "Var", "einsum", "sum", "mean", "reshape", "transpose",
    "take", "concat", "broadcast_to", "relu", "sigmoid", "sqrt", "where",
    "bce_with_logits", "log_softmax", "kabsch_rotation", "vn_relu",
]


class GradTape:
    """Append-only record of primitive ops.

    With ``record=False`` ops evaluate eagerly and store nothing, which is how
    inference runs through the same forward code as training.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._vjps = []      # per slot: (input slots, vjp) or None for leaves
        self._shapes = []

    def __len__(self):
        return len(self._vjps)

    def var(self, value) -> "Var":
        """Register a leaf slot (a parameter or an input we want gradients for)."""
        value = np.asarray(value, dtype=np.float64)
        return self._push(value, None, None)

    def const(self, value) -> "Var":
        return Var(np.asarray(value, dtype=np.float64), self, None)

    def _push(self, value, inputs, vjp) -> "Var":
        if not self.record:
            return Var(value, self, None)
        idx = len(self._vjps)
        self._vjps.append(None if vjp is None else (inputs, vjp))
        self._shapes.append(value.shape)
        return Var(value, self, idx)

    def backward(self, loss: "Var") -> dict:
        """Gradients of scalar ``loss`` w.r.t. every slot that received one.

        Returns a dict keyed by slot index; use ``grads.get(v.idx)`` or
        :func:`grad_of`.
        """
        if loss.idx is None:
            raise ValueError("loss is not recorded on this tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        grads = {loss.idx: np.ones_like(loss.value)}
        for idx in range(loss.idx, -1, -1):
            g = grads.get(idx)
            node = self._vjps[idx]
            if g is None or node is None:
                continue
            inputs, vjp = node
            for slot, gi in zip(inputs, vjp(g)):
                if slot is None or gi is None:
                    continue
                if slot in grads:
                    grads[slot] = grads[slot] + gi
                else:
                    grads[slot] = gi
        return grads


def grad_of(grads: dict, v: "Var") -> np.ndarray:
    g = grads.get(v.idx)
    return np.zeros_like(v.value) if g is None else g


class Var:
    __slots__ = ("value", "tape", "idx")
    __array_priority__ = 100

    def __init__(self, value, tape, idx):
        self.value = value
        self.tape = tape
        self.idx = idx

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, slot={self.idx})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Var) else -np.asarray(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)


def _tape_of(*xs) -> GradTape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _lift(tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return x
    return tape.const(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _op(value, inputs, vjp):
    tape = inputs[0].tape
    return tape._push(value, tuple(v.idx for v in inputs), vjp)


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    return _op(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _op(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return _op(av * bv, (a, b),
               lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g):
        return (_unbroadcast(g / bv, av.shape),
                _unbroadcast(-g * out / bv, bv.shape))
    return _op(out, (a, b), vjp)


def relu(a, slope: float = 0.0):
    mask = a.value > 0
    scale = np.where(mask, 1.0, slope)
    return _op(a.value * scale, (a,), lambda g: (g * scale,))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _op(out, (a,), lambda g: (g * out * (1.0 - out),))


def sqrt(a):
    out = np.sqrt(a.value)
    return _op(out, (a,), lambda g: (0.5 * g / out,))


def where(mask, a, b):
    """Select with a constant boolean mask (no gradient w.r.t. the mask)."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    return _op(np.where(mask, a.value, b.value), (a, b),
               lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa),
                          _unbroadcast(np.where(mask, 0.0, g), sb)))


# -- shape / reduction -------------------------------------------------------

def sum(a, axis=None, keepdims=False):
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _op(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _op(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape):
    old = a.shape
    return _op(np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def getitem(a, key):
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)
    return _op(a.value[key], (a,), vjp)


def take(a, indices, axis=0):
    """Gather along ``axis``; the backward pass scatter-adds repeated indices."""
    indices = np.asarray(indices)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (out,)
    return _op(np.take(a.value, indices, axis=axis), (a,), vjp)


def concat(xs, axis=0):
    tape = _tape_of(*xs)
    xs = [_lift(tape, x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _op(np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
               lambda g: tuple(np.split(g, cuts, axis=axis)))


def einsum(subscripts: str, a, b):
    """Two-operand einsum. Every index of an operand must also appear in the
    other operand or in the output (no operand-private reductions)."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    lhs, out = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if len(set(own)) != len(own):
            raise ValueError(f"repeated index in operand {own!r}")
        private = set(own) - set(other) - set(out)
        if private:
            raise ValueError(f"index {sorted(private)} reduced inside a single operand")
    av, bv = a.value, b.value

    def vjp(g):
        return (np.einsum(f"{out},{sb}->{sa}", g, bv, optimize=True),
                np.einsum(f"{out},{sa}->{sb}", g, av, optimize=True))
    return _op(np.einsum(subscripts, av, bv, optimize=True), (a, b), vjp)


# -- losses and special ops ------------------------------------------------------

def bce_with_logits(logits, labels):
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against 0/1 labels."""
    z = logits.value
    y = np.asarray(labels, dtype=np.float64)
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return _op(out, (logits,), lambda g: (g * (p - y),))


def log_softmax(a, axis=-1):
    z = a.value - a.value.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _op(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def vn_relu(x, k, eps=1e-12):
    """Vector-neuron ReLU over the last axis: keep x where ⟨x, k⟩ >= 0, else
    remove its component along k. Directions with ‖k‖ < eps pass through."""
    tape = _tape_of(x, k)
    x, k = _lift(tape, x), _lift(tape, k)
    xv, kv = x.value, k.value
    kk = np.einsum("...d,...d->...", kv, kv)
    dot = np.einsum("...d,...d->...", xv, kv)
    passthrough = kk < eps * eps
    inv_kk = 1.0 / np.maximum(kk, 1e-300)
    inv_kk[(dot >= 0) | passthrough] = 0.0
    c = (dot * inv_kk)[..., None]
    out = c * kv
    np.subtract(xv, out, out=out)

    def vjp(g):
        gk = (np.einsum("...d,...d->...", g, kv) * inv_kk)[..., None]
        return g - gk * kv, -c * g - gk * (xv - 2.0 * c * kv)
    return _op(out, (x, k), vjp)


def kabsch_rotation(m):
    """Proper rotation R maximizing tr(Rᵀ m), with m = Σ w (tgt−t̄)(src−s̄)ᵀ.

    Backward uses the optimality condition (RᵀM symmetric). In the eigenbasis
    of K = RᵀM the differential solves Ω_ij (λ_i + λ_j) = A_ij, so only
    λ_i + λ_j = 0 (a non-unique optimum) is singular; repeated singular
    values are fine.
    """
    from .mathcore import svd3

    u, s, v = svd3(m.value)
    d = np.ones(3)
    if np.linalg.det(u @ v.T) < 0:
        d[2] = -1.0
    r = (u * d) @ v.T
    lam = d * s

    def vjp(g):
        b = v.T @ (r.T @ g) @ v
        denom = lam[:, None] + lam[None, :]
        c = np.divide(b, denom, out=np.zeros_like(b), where=np.abs(denom) > 1e-300)
        e = v @ c @ v.T
        return (r @ (e - e.T),)
    return _op(r, (m,), vjp)


# -- verification ------------------------------------------------------------------

def check_gradients(loss_fn, params: dict, step: float = 1e-5, floor: float = 1e-6,
                    max_entries: int | None = None, rng=None):
    """Compare tape gradients with central finite differences.

    ``loss_fn(tape, vars)`` must build a scalar loss from the dict of leaf
    Vars. Returns (worst relative error, (name, flat index)); the relative
    error is |a − fd| / max(|a|, |fd|, floor). With ``max_entries`` only that
    many randomly chosen entries per parameter are probed.
    """
    tape = GradTape()
    vs = {k: tape.var(v) for k, v in params.items()}
    grads = tape.backward(loss_fn(tape, vs))
    rng = rng or np.random.default_rng(0)
    worst, where_ = 0.0, None
    for name, value in params.items():
        analytic = grad_of(grads, vs[name]).reshape(-1)
        entries = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            entries = rng.choice(value.size, max_entries, replace=False)
        for e in entries:
            vals = []
            for sign in (1.0, -1.0):
                bumped = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
                bumped[name].reshape(-1)[e] += sign * step
                t = GradTape(record=False)
                vals.append(float(loss_fn(t, {k: t.const(v) for k, v in bumped.items()}).value))
            fd = (vals[0] - vals[1]) / (2 * step)
            a = analytic[e]
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            if err > worst:
                worst, where_ = err, (name, int(e))
    return worst, where_
