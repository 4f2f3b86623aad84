"""Dense-array math core: a reverse-mode tape over a fixed primitive set.

Everything the models need is expressed through the primitives below
(affine, lstm_cell, softmax_xent, elementwise nonlinearities, concat,
row gather, mask multiply, reductions).  There is deliberately no
general expression compiler: a closed op set keeps every gradient
auditable against the finite-difference checker in this module.

Forward passes record onto an explicitly opened `Tape`; with no tape
active the same functions run as plain numpy (used for evaluation).
"""

from __future__ import annotations

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class NumericError(ValueError):
    """Raised on shape mismatches, bad targets, or misuse of the tape."""


class Tensor:
    """A numpy array plus a gradient slot.

    Parameters are Tensors whose `grad` is a persistently allocated
    array; intermediate values get a grad lazily during backward.
    """

    __slots__ = ("value", "grad")

    def __init__(self, value, dtype=None):
        self.value = np.asarray(value, dtype=dtype)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype})"


class _Node:
    __slots__ = ("inputs", "outputs", "backward")

    def __init__(self, inputs, outputs, backward):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


_ACTIVE_TAPE = None


class Tape:
    """Wengert list of executed primitives, walked in reverse by `backward`."""

    def __init__(self):
        self.nodes = []
        self._made = set()
        self._prev = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def owns(self, tensor):
        return id(tensor) in self._made


def active_tape():
    return _ACTIVE_TAPE


def _record(inputs, outputs, backward):
    tape = _ACTIVE_TAPE
    if tape is not None:
        tape.nodes.append(_Node(inputs, outputs, backward))
        for out in outputs:
            tape._made.add(id(out))


def backward(loss, tape):
    """Accumulate d(loss)/d(input) into every tensor reached by `tape`.

    `loss` must be a scalar produced while `tape` was active.  Gradients
    are added into `.grad` slots; tensors never reached keep theirs
    (parameters therefore read zero if untouched, because their slots
    are pre-allocated).
    """
    if tape is None or not tape.nodes:
        raise NumericError("backward called before any forward pass was recorded")
    if loss.value.shape != ():
        raise NumericError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if not tape.owns(loss):
        raise NumericError("loss tensor was not produced on this tape")
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        grads = [out.grad for out in node.outputs]
        if all(g is None for g in grads):
            continue
        grads = [
            g if g is not None else np.zeros_like(out.value)
            for g, out in zip(grads, node.outputs)
        ]
        in_grads = node.backward(*grads)
        for tensor, g in zip(node.inputs, in_grads):
            if g is not None:
                tensor.accumulate(g)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _check2d(name, *tensors):
    for t in tensors:
        if t.value.ndim != 2:
            raise NumericError(f"{name} expects 2-d operands, got shape {t.value.shape}")


def affine(x, W, b):
    """y = x W + b with x:[n,i], W:[i,o], b:[o]."""
    _check2d("affine", x, W)
    if x.value.shape[1] != W.value.shape[0] or W.value.shape[1] != b.value.shape[0]:
        raise NumericError(
            f"affine shape mismatch: x{x.value.shape} W{W.value.shape} b{b.value.shape}"
        )
    y = Tensor(x.value @ W.value + b.value)

    def bwd(gy):
        return gy @ W.value.T, x.value.T @ gy, gy.sum(axis=0)

    _record([x, W, b], [y], bwd)
    return y


def matmul(x, W):
    """y = x W (no bias)."""
    _check2d("matmul", x, W)
    if x.value.shape[1] != W.value.shape[0]:
        raise NumericError(f"matmul shape mismatch: x{x.value.shape} W{W.value.shape}")
    y = Tensor(x.value @ W.value)

    def bwd(gy):
        return gy @ W.value.T, x.value.T @ gy

    _record([x, W], [y], bwd)
    return y


def matmul_t(x, W):
    """y = x W^T; the tied-output projection (W is the embedding table)."""
    _check2d("matmul_t", x, W)
    if x.value.shape[1] != W.value.shape[1]:
        raise NumericError(f"matmul_t shape mismatch: x{x.value.shape} W^T{W.value.shape}")
    y = Tensor(x.value @ W.value.T)

    def bwd(gy):
        return gy @ W.value, gy.T @ x.value

    _record([x, W], [y], bwd)
    return y


def bias_add(x, b):
    """y = x + b broadcast over rows."""
    if x.value.ndim != 2 or b.value.shape != (x.value.shape[1],):
        raise NumericError(f"bias_add shape mismatch: x{x.value.shape} b{b.value.shape}")
    y = Tensor(x.value + b.value)

    def bwd(gy):
        return gy, gy.sum(axis=0)

    _record([x, b], [y], bwd)
    return y


def lstm_cell(x, h_prev, c_prev, Wx, Wh, b):
    """One step of standard LSTM gating; returns (h, c).

    Gate layout along the last axis of the fused weights is [i, f, g, o].
    """
    n, H = h_prev.value.shape
    if c_prev.value.shape != (n, H) or Wx.value.shape[1] != 4 * H or Wh.value.shape != (H, 4 * H):
        raise NumericError(
            "lstm_cell shape mismatch: "
            f"x{x.value.shape} h{h_prev.value.shape} c{c_prev.value.shape} "
            f"Wx{Wx.value.shape} Wh{Wh.value.shape}"
        )
    z = x.value @ Wx.value + h_prev.value @ Wh.value + b.value
    zi, zf, zg, zo = np.split(z, 4, axis=1)
    i = _sigmoid_np(zi)
    f = _sigmoid_np(zf)
    g = np.tanh(zg)
    o = _sigmoid_np(zo)
    c = i * g + f * c_prev.value
    tc = np.tanh(c)
    h_t = Tensor(o * tc)
    c_t = Tensor(c)

    def bwd(gh, gc):
        dc = gc + gh * o * (1.0 - tc * tc)
        dzo = gh * tc * o * (1.0 - o)
        dzi = dc * g * i * (1.0 - i)
        dzf = dc * c_prev.value * f * (1.0 - f)
        dzg = dc * i * (1.0 - g * g)
        dz = np.concatenate([dzi, dzf, dzg, dzo], axis=1)
        return (
            dz @ Wx.value.T,
            dz @ Wh.value.T,
            dc * f,
            x.value.T @ dz,
            h_prev.value.T @ dz,
            dz.sum(axis=0),
        )

    _record([x, h_prev, c_prev, Wx, Wh, b], [h_t, c_t], bwd)
    return h_t, c_t


def softmax_xent(logits, targets):
    """Mean NLL in nats of integer `targets` under row-wise softmax(logits).

    Numerically stabilized by per-row max subtraction.
    """
    z = logits.value
    t = np.asarray(targets, dtype=np.int64)
    n, V = z.shape
    if t.shape != (n,):
        raise NumericError(f"softmax_xent targets shape {t.shape} != ({n},)")
    if t.size and (t.min() < 0 or t.max() >= V):
        raise NumericError(f"softmax_xent target out of range [0, {V})")
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    Z = ez.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(Z)
    loss = Tensor(np.asarray(-logp[np.arange(n), t].mean(), dtype=z.dtype))

    def bwd(gy):
        p = ez / Z
        p[np.arange(n), t] -= 1.0
        return (p * (gy / n),)

    _record([logits], [loss], bwd)
    return loss


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    y = Tensor(_sigmoid_np(x.value))

    def bwd(gy):
        return (gy * y.value * (1.0 - y.value),)

    _record([x], [y], bwd)
    return y


def tanh(x):
    y = Tensor(np.tanh(x.value))

    def bwd(gy):
        return (gy * (1.0 - y.value * y.value),)

    _record([x], [y], bwd)
    return y


def relu(x):
    y = Tensor(np.maximum(x.value, 0.0))

    def bwd(gy):
        return (gy * (x.value > 0),)

    _record([x], [y], bwd)
    return y


def add(a, b):
    if a.value.shape != b.value.shape:
        raise NumericError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    y = Tensor(a.value + b.value)
    _record([a, b], [y], lambda gy: (gy, gy))
    return y


def sub(a, b):
    if a.value.shape != b.value.shape:
        raise NumericError(f"sub shape mismatch: {a.value.shape} vs {b.value.shape}")
    y = Tensor(a.value - b.value)
    _record([a, b], [y], lambda gy: (gy, -gy))
    return y


def mul(a, b):
    if a.value.shape != b.value.shape:
        raise NumericError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")
    y = Tensor(a.value * b.value)
    _record([a, b], [y], lambda gy: (gy * b.value, gy * a.value))
    return y


def scale(x, c):
    """Multiply by a python scalar (kept out of the graph)."""
    c = float(c)
    y = Tensor(x.value * c)
    _record([x], [y], lambda gy: (gy * c,))
    return y


def mul_mask(x, mask):
    """Elementwise multiply by a constant array (dropout masks)."""
    y = Tensor(x.value * mask)
    _record([x], [y], lambda gy: (gy * mask,))
    return y


def concat_cols(a, b):
    y = Tensor(np.concatenate([a.value, b.value], axis=1))
    na = a.value.shape[1]

    def bwd(gy):
        return gy[:, :na], gy[:, na:]

    _record([a, b], [y], bwd)
    return y


def concat_rows(tensors):
    """Stack 2-d tensors along axis 0."""
    y = Tensor(np.concatenate([t.value for t in tensors], axis=0))
    sizes = [t.value.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(gy):
        return tuple(gy[offsets[k]:offsets[k + 1]] for k in range(len(sizes)))

    _record(list(tensors), [y], bwd)
    return y


def take_rows(table, idx):
    """Row gather (embedding / latent-table lookup); backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise NumericError(f"take_rows needs a 1-d index, got shape {idx.shape}")
    n = table.value.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise NumericError(f"take_rows index out of range [0, {n})")
    y = Tensor(table.value[idx])

    def bwd(gy):
        gt = np.zeros_like(table.value)
        np.add.at(gt, idx, gy)
        return (gt,)

    _record([table], [y], bwd)
    return y


def sum_all(x):
    y = Tensor(np.asarray(x.value.sum(), dtype=x.value.dtype))
    _record([x], [y], lambda gy: (np.broadcast_to(gy, x.value.shape).copy(),))
    return y


def mean_all(x):
    size = x.value.size
    y = Tensor(np.asarray(x.value.mean(), dtype=x.value.dtype))
    _record([x], [y], lambda gy: (np.broadcast_to(gy / size, x.value.shape).copy(),))
    return y


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class Param:
    """Named parameter entry: value tensor, persistent grad slot, flags."""

    __slots__ = ("name", "tensor", "trainable", "wd_exempt", "wd_rate")

    def __init__(self, name, tensor, trainable=True, wd_exempt=False, wd_rate=None):
        self.name = name
        self.tensor = tensor
        self.trainable = trainable
        self.wd_exempt = wd_exempt
        # wd_rate None means "use the optimizer's global rate"
        self.wd_rate = wd_rate

    @property
    def value(self):
        return self.tensor.value

    @property
    def grad(self):
        return self.tensor.grad


class ParamSet:
    """Ordered, uniquely named collection of trainable arrays."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries = {}

    def add(self, name, value, trainable=True, wd_exempt=False, wd_rate=None):
        if name in self._entries:
            raise NumericError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(value, dtype=self.dtype))
        t.grad = np.zeros_like(t.value)
        self._entries[name] = Param(name, t, trainable, wd_exempt, wd_rate)
        return t

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def zero_grads(self):
        for p in self._entries.values():
            p.tensor.grad[...] = 0.0

    def num_values(self):
        return sum(p.value.size for p in self._entries.values())

    def state_dict(self):
        return {name: p.value.copy() for name, p in self._entries.items()}

    def load_state_dict(self, state):
        for name, p in self._entries.items():
            if name not in state:
                raise NumericError(f"missing parameter in state: {name}")
            if state[name].shape != p.value.shape:
                raise NumericError(
                    f"shape mismatch loading {name}: "
                    f"{state[name].shape} vs {p.value.shape}"
                )
            p.tensor.value[...] = state[name]


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

DROPOUT_KINDS = ("variational-input", "variational-output", "weight-drop")


def dropout_masks(kind, rate, shape, rng, train=True, dtype=np.float32):
    """Sample an inverted-scaling dropout mask.

    Variational kinds are sampled once per sequence and broadcast over
    positions; weight-drop is sampled once per minibatch and applied to
    hidden-to-hidden weight matrices.  Evaluation mode returns ones.
    """
    if kind not in DROPOUT_KINDS:
        raise NumericError(f"unknown dropout kind: {kind}")
    if not 0.0 <= rate < 1.0:
        raise NumericError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / np.asarray(1.0 - rate, dtype=dtype)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(loss_fn, params, epsilon=1e-4, sample=5, seed=0):
    """Max relative error between tape gradients and central differences.

    `loss_fn` must be a deterministic nullary callable that runs one
    forward pass through the primitives above and returns the scalar
    loss tensor; this function manages tape recording itself, so
    `loss_fn` must not open tapes of its own.  Requires 64-bit
    parameters.

    Two numerical safeguards keep the difference quotients a valid
    oracle.  Parameters are promoted to extended precision during the
    probes, because at plain f64 evaluation roundoff in f(x+e)-f(x-e)
    swamps weakly coupled coordinates (derivatives below ~1e-5).  And
    each coordinate is probed at epsilon and epsilon/2: when the two
    estimates disagree, the interval straddles a ReLU kink where no
    derivative exists, so the coordinate is skipped and another sampled
    in its place.
    """
    trainables = [p for p in params if p.trainable]
    if not trainables:
        return 0.0
    for p in trainables:
        if p.value.dtype != np.float64:
            raise NumericError(
                f"finite_diff_check needs float64 parameters, {p.name} is {p.value.dtype}"
            )
    params.zero_grads()
    tape = Tape()
    with tape:
        loss = loss_fn()
    if not np.isfinite(loss.value):
        raise NumericError("finite_diff_check: loss is not finite")
    backward(loss, tape)
    analytic = {p.name: p.grad.copy() for p in trainables}

    originals = {p.name: p.tensor.value for p in params}
    for p in params:
        p.tensor.value = p.tensor.value.astype(np.longdouble)
    rng = np.random.default_rng(seed)
    max_rel = 0.0

    def probe(flat, c, eps):
        orig = flat[c]
        flat[c] = orig + eps
        f_plus = np.longdouble(loss_fn().value)
        flat[c] = orig - eps
        f_minus = np.longdouble(loss_fn().value)
        flat[c] = orig
        return (f_plus - f_minus) / (2 * eps)

    try:
        for p in trainables:
            flat = p.tensor.value.reshape(-1)
            k = min(sample, flat.size)
            coords = rng.permutation(flat.size)[:min(flat.size, k + 8)]
            checked = 0
            for c in coords:
                if checked == k:
                    break
                eps = np.longdouble(epsilon)
                n_full = probe(flat, c, eps)
                n_half = probe(flat, c, eps / 2)
                gap = abs(float(n_full - n_half))
                if gap > max(1e-8, 1e-4 * abs(float(n_half))):
                    continue  # non-smooth inside the probing window
                numeric = float(n_half)
                ana = analytic[p.name].reshape(-1)[c]
                rel = abs(ana - numeric) / max(1e-8, abs(numeric))
                max_rel = max(max_rel, rel)
                checked += 1
    finally:
        for p in params:
            p.tensor.value = originals[p.name]
    return max_rel
