"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The op set is exactly what the pipeline needs: matmuls, elementwise maps,
row-wise softmax/layer-norm, and the gather/segment reductions used for
point-to-segment pooling. Everything is float64 and deterministic; any op
that produces a NaN or Inf raises immediately.
"""

from __future__ import annotations

import numpy as np


class GradError(ValueError):
    """Raised on invalid shapes, non-finite op outputs, or misuse of the tape."""


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    `grad` is populated by `backward()` for tensors with `requires_grad`
    and for intermediates while a backward pass is running.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        # keep row-major layout without promoting 0-d scalars to 1-d
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of op nodes for one forward pass.

    Creation order is a topological order, so `backward` is a single reverse
    sweep that applies each node's local-gradient rule exactly once.
    """

    def __init__(self):
        self.nodes = []  # (out, inputs, backward_fn)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise GradError("tape stack corrupted")
        return False

    def record(self, out, inputs, backward_fn):
        out._tape = self
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss):
        """Populate `.grad` on every tensor that influences the scalar `loss`."""
        if loss.data.size != 1:
            raise GradError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss._tape is None:
            return  # constant loss: no recorded dependencies, all gradients are zero
        if loss._tape is not self:
            raise GradError("loss was not recorded on this tape")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self.nodes):
            if out.grad is None:
                continue
            backward_fn(out.grad)


_TAPE_STACK: list[Tape] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss):
    """Run the reverse sweep of the tape that recorded `loss`."""
    if loss._tape is None:
        raise GradError("loss has no recorded tape (was it computed under `with Tape()`?)")
    loss._tape.backward(loss)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, op):
    # min/max propagate NaN and catch +-inf without allocating a bool array
    if arr.size and not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise GradError(f"non-finite values produced by {op}")


def _accum(t, g):
    if t.grad is None:
        # copy: g may be shared with another input's accumulation
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _make(op, data, inputs, backward_fn):
    _check_finite(data, op)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(i.requires_grad or i._tape is tape for i in inputs):
        out.requires_grad = False
        tape.record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# core ops


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise GradError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make("matmul", data, (a, b), bwd)


def transpose(a):
    a = _as_tensor(a)
    data = a.data.T.copy()

    def bwd(g):
        _accum(a, g.T)

    return _make("transpose", data, (a,), bwd)


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape).copy()
    orig = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(orig))

    return _make("reshape", data, (a,), bwd)


def add(a, b):
    """Elementwise add; also supports (r, c) + (c,) row broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape == b.data.shape:
        data = a.data + b.data

        def bwd(g):
            _accum(a, g)
            _accum(b, g)

    elif a.data.ndim == 2 and b.data.shape == (a.data.shape[1],):
        data = a.data + b.data

        def bwd(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))

    else:
        raise GradError(f"add shape mismatch: {a.data.shape} + {b.data.shape}")
    return _make("add", data, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise GradError(f"sub shape mismatch: {a.data.shape} - {b.data.shape}")
    data = a.data - b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make("sub", data, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise GradError(f"mul shape mismatch: {a.data.shape} * {b.data.shape}")
    data = a.data * b.data

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make("mul", data, (a, b), bwd)


def div(a, b):
    """Elementwise a / b; b may be a scalar tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if not (a.data.shape == b.data.shape or b.data.size == 1):
        raise GradError(f"div shape mismatch: {a.data.shape} / {b.data.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data  # zero denominators fail the finiteness check below

    def bwd(g):
        _accum(a, (g / b.data).reshape(a.data.shape))
        gb = -g * a.data / (b.data * b.data)
        if b.data.shape != a.data.shape:
            gb = np.full_like(b.data, gb.sum())
        _accum(b, gb)

    return _make("div", data, (a, b), bwd)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    data = a.data * c

    def bwd(g):
        _accum(a, g * c)

    return _make("scale", data, (a,), bwd)


def add_const(a, c):
    a = _as_tensor(a)
    data = a.data + float(c)

    def bwd(g):
        _accum(a, g)

    return _make("add_const", data, (a,), bwd)


def sigmoid(a):
    a = _as_tensor(a)
    # numerically symmetric form, stays finite for large |x|
    data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                    np.exp(a.data) / (1.0 + np.exp(a.data)))

    def bwd(g):
        _accum(a, g * data * (1.0 - data))

    return _make("sigmoid", data, (a,), bwd)


def relu(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return _make("relu", data, (a,), bwd)


def tanh(a):
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - data * data))

    return _make("tanh", data, (a,), bwd)


def log(a):
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)  # non-positive input fails the finiteness check below

    def bwd(g):
        _accum(a, g / a.data)

    return _make("log", data, (a,), bwd)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes through inside the interval."""
    a = _as_tensor(a)
    data = np.clip(a.data, lo, hi)

    def bwd(g):
        _accum(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _make("clamp", data, (a,), bwd)


def tsum(a):
    """Sum of all elements, as a scalar tensor."""
    a = _as_tensor(a)
    data = np.array(a.data.sum())

    def bwd(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _make("sum", data, (a,), bwd)


def mean(a):
    return scale(tsum(a), 1.0 / a.data.size)


def softmax_masked(logits, addmask=None):
    """Row-wise softmax with an optional additive {0, -inf} mask.

    Masked entries get exactly zero probability; a fully masked row is a
    hard error (callers must pre-unmask, see the decoder's safeguard).
    """
    logits = _as_tensor(logits)
    x = logits.data
    if addmask is not None:
        m = addmask.data if isinstance(addmask, Tensor) else np.asarray(addmask, dtype=np.float64)
        if m.shape != x.shape:
            raise GradError(f"mask shape {m.shape} != logits shape {x.shape}")
        x = x + m
    live = np.isfinite(x)
    if not live.any(axis=-1).all():
        raise GradError("softmax_masked: fully masked row")
    shift = np.max(np.where(live, x, -np.inf), axis=-1, keepdims=True)
    e = np.where(live, np.exp(x - shift), 0.0)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        _accum(logits, data * (g - inner))

    return _make("softmax_masked", data, (logits,), bwd)


def log_softmax(a):
    a = _as_tensor(a)
    shift = a.data.max(axis=-1, keepdims=True)
    z = a.data - shift
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    data = z - lse
    probs = np.exp(data)

    def bwd(g):
        _accum(a, g - probs * g.sum(axis=-1, keepdims=True))

    return _make("log_softmax", data, (a,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row normalization over the last axis, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise GradError("layer_norm affine shape mismatch")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def bwd(g):
        axes = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        gx = g * gamma.data
        _accum(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                         - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make("layer_norm", data, (x, gamma, beta), bwd)


def gather_rows(a, idx):
    """out[i] = a[idx[i]]; gradient scatter-adds back."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return _make("gather_rows", data, (a,), bwd)


def segment_mean(a, seg_ids, num_segments):
    """Per-segment arithmetic mean of rows; every segment must be non-empty.

    Accumulation runs in row order (np.add.at), so the result matches a
    naive in-order loop bit for bit.
    """
    a = _as_tensor(a)
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    counts = np.bincount(seg_ids, minlength=num_segments).astype(np.float64)
    if (counts == 0).any():
        raise GradError("segment_mean: empty segment")
    acc = np.zeros((num_segments, a.data.shape[1]), dtype=np.float64)
    np.add.at(acc, seg_ids, a.data)
    data = acc / counts[:, None]

    def bwd(g):
        _accum(a, g[seg_ids] / counts[seg_ids, None])

    return _make("segment_mean", data, (a,), bwd)


def segment_max(a, seg_ids, num_segments):
    """Per-segment max of rows; ties route the gradient to the lowest row index."""
    a = _as_tensor(a)
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    ncols = a.data.shape[1]
    data = np.full((num_segments, ncols), -np.inf)
    winners = np.zeros((num_segments, ncols), dtype=np.int64)
    cols = np.arange(ncols)
    for m in range(num_segments):
        rows = np.nonzero(seg_ids == m)[0]
        if rows.size == 0:
            raise GradError("segment_max: empty segment")
        block = a.data[rows]
        arg = block.argmax(axis=0)  # first occurrence wins ties
        data[m] = block[arg, cols]
        winners[m] = rows[arg]

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (winners.ravel(), np.tile(cols, num_segments)), g.ravel())

    return _make("segment_max", data, (a,), bwd)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make("concat", data, tuple(tensors), bwd)


def linear(x, w, b=None):
    """x @ w (+ b broadcast over rows), fused into one op node."""
    if b is None:
        return matmul(x, w)
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.shape[1] != w.data.shape[0] or b.data.shape != (w.data.shape[1],):
        raise GradError(
            f"linear shape mismatch: {x.data.shape} @ {w.data.shape} + {b.data.shape}")
    data = x.data @ w.data + b.data

    def bwd(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        _accum(b, g.sum(axis=0))

    return _make("linear", data, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, params, h=1e-5, max_coords_per_param=None, seed=0):
    """Compare analytic gradients of scalar `f()` against central differences.

    `f` must rebuild its graph from the current values in `params` on every
    call. Returns (max_rel_err, per_param) where per_param maps name ->
    that tensor's max relative error |a - n| / max(1, |a|, |n|).

    With `max_coords_per_param` set, a seeded subset of coordinates is
    checked per tensor (every tensor still gets coverage); by default every
    coordinate is checked.
    """
    if h <= 0:
        raise GradError("grad_check step must be > 0")
    items = sorted(params.items())
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = {}
    for name, p in items:
        analytic[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        p.grad = None

    rng = np.random.default_rng(seed)
    per_param = {}
    for name, p in items:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = np.sort(rng.choice(n, size=max_coords_per_param, replace=False))
        else:
            coords = np.arange(n)
        worst = 0.0
        aflat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = aflat[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
        per_param[name] = worst
    overall = max(per_param.values()) if per_param else 0.0
    return overall, per_param
