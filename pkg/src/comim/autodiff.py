"""Reverse-mode automatic differentiation on dense numpy arrays.

Parameters and activations are float32 by convention. Reductions and
normalization statistics accumulate in float64 before casting back to the
input dtype. Every op follows the dtype of its operands, so the same graph
code can be run in float64 when a high-precision forward is needed (e.g. for
finite-difference gradient checks).

A `Tape` records primitive ops in execution order, which is topological by
construction. `backward(loss)` walks the tape once in reverse and returns a
gradient store; no graph is reused across steps.
"""

import threading
import weakref

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_STACK = threading.local()


def _active_tape():
    stack = getattr(_STACK, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Single-threaded by design; independent tapes may live on independent
    threads (the active-tape stack is thread-local).
    """

    def __init__(self):
        # each node: (parent ids aligned with the op's tracked inputs, backward fn)
        # leaves carry ((), None)
        self.nodes = []

    def __enter__(self):
        stack = getattr(_STACK, "tapes", None)
        if stack is None:
            stack = _STACK.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _STACK.tapes.pop()
        return False

    def _add_node(self, parents, backward):
        self.nodes.append((parents, backward))
        return len(self.nodes) - 1


class Tensor:
    """Dense float array, optionally tracked on a tape."""

    # _tape/_node: the op that produced this tensor (strong ref keeps the
    # tape alive as long as its outputs are). _leaf_nodes: per-tape leaf
    # registrations, weakly keyed so long-lived parameters don't pin every
    # tape they ever appeared on.
    __slots__ = ("data", "requires_grad", "_tape", "_node", "_leaf_nodes")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._node = -1
        self._leaf_nodes = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node_on(t, tape):
    """Node id of `t` on `tape`, registering it as a leaf on first use there."""
    if t._tape is tape and t._node >= 0:
        return t._node
    if t._leaf_nodes is None:
        t._leaf_nodes = weakref.WeakKeyDictionary()
    nid = t._leaf_nodes.get(tape)
    if nid is None:
        nid = tape._add_node((), None)
        t._leaf_nodes[tape] = nid
    return nid


def _record(out_data, inputs, backward):
    """Wrap an op result, recording a node when a tape is active.

    `inputs` lists the differentiable operands; `backward` maps the output
    gradient to one gradient per input (None for untracked ones).
    """
    tape = _active_tape()
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if tape is not None and requires:
        parents = tuple(_node_on(t, tape) if t.requires_grad else None for t in inputs)
        out._tape = tape
        out._node = tape._add_node(parents, backward)
    return out


class Gradients:
    """Gradient store produced by backward(); query with wrt()."""

    def __init__(self, tape, store):
        self._tape = tape
        self._store = store

    def wrt(self, tensor):
        """Gradient of the loss w.r.t. `tensor`; zeros if it was unreachable."""
        if tensor._tape is self._tape:
            nid = tensor._node
        elif tensor._leaf_nodes is not None:
            nid = tensor._leaf_nodes.get(self._tape, -1)
        else:
            nid = -1
        if nid >= 0 and nid in self._store:
            return self._store[nid]
        return np.zeros_like(tensor.data)


def backward(loss):
    """Reverse sweep from a scalar loss; visits each tape node exactly once."""
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None or loss._node < 0:
        raise ValueError("loss was not recorded on a tape (build it inside `with Tape():`)")
    store = {loss._node: np.ones((), dtype=loss.data.dtype)}
    for nid in range(loss._node, -1, -1):
        grad = store.get(nid)
        if grad is None:
            continue
        parents, bwd = tape.nodes[nid]
        if bwd is None:
            continue
        for pid, g in zip(parents, bwd(grad)):
            if pid is None or g is None:
                continue
            if pid in store:
                # out-of-place: stored grads may be views into other grads
                store[pid] = store[pid] + g
            else:
                store[pid] = g
    return Gradients(tape, store)


def _sum_to(arr, dtype, axes):
    """Sum `arr` over `axes` with float64 accumulation, cast to `dtype`."""
    if not axes:
        return arr.astype(dtype, copy=False)
    return arr.sum(axis=axes, dtype=np.float64).astype(dtype)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product. 2-D x 2-D, or stacked [..., m, k] with a shared 2-D rhs,
    or stacked on both sides with equal leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} vs {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul stacked dims disagree: {ad.shape} vs {bd.shape}")
    out = ad @ bd

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.swapaxes(ad, -1, -2) @ g
            if bd.ndim == 2 and gb.ndim > 2:
                gb = _sum_to(gb, bd.dtype, tuple(range(gb.ndim - 2)))
        return ga, gb

    return _record(out, (a, b), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    xd = x.data
    d = xd.shape[-1] if xd.ndim else 0
    if xd.ndim < 1 or d < 1:
        raise ShapeError(f"layer_norm needs a non-empty last axis, got {xd.shape}")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.data.shape} and {bias.data.shape}"
        )
    if not eps > 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    xc = (xd - mu).astype(xd.dtype)
    var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(xd.ndim - 1))

    def bwd(g):
        dgain = _sum_to(g * xhat, gain.dtype, lead) if gain.requires_grad else None
        dbias = _sum_to(g, bias.dtype, lead) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxh = g * gain.data
            m1 = dxh.mean(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
            m2 = np.mean(dxh * xhat, axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
            dx = (dxh - m1 - xhat * m2) * inv
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), bwd)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x):
    """tanh-approximate gelu: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = _as_tensor(x)
    xd = x.data
    t = np.tanh(_GELU_C * (xd + _GELU_A * xd**3))
    out = 0.5 * xd * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _record(out, (x,), bwd)


def sigmoid(x):
    x = _as_tensor(x)
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    s[~pos] = e / (1.0 + e)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _record(s, (x,), bwd)


def add(a, b):
    """Elementwise sum; shapes must match exactly (no implicit broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes disagree: {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        return g, g

    return _record(a.data + b.data, (a, b), bwd)


def mul(a, b):
    """Elementwise product; shapes must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes disagree: {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return _record(ad * bd, (a, b), bwd)


def scale(x, s):
    """Multiply a tensor by a python scalar (the only sanctioned broadcast)."""
    x = _as_tensor(x)
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _record(x.data * s, (x,), bwd)


def add_bias(x, b):
    """Add a length-d vector to every row of [..., d]."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.data.ndim < 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_bias needs x[..., d] and b[d], got {x.data.shape} and {b.data.shape}")
    lead = tuple(range(x.data.ndim - 1))

    def bwd(g):
        return g, _sum_to(g, b.dtype, lead) if b.requires_grad else None

    return _record(x.data + b.data, (x, b), bwd)


def softmax_rows(x):
    """Softmax over the last axis, with max subtraction for stability."""
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim < 1 or xd.shape[-1] < 1:
        raise ShapeError(f"softmax_rows needs a non-empty last axis, got {xd.shape}")
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)

    def bwd(g):
        dot = np.sum(g * y, axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
        return ((g - dot) * y,)

    return _record(y, (x,), bwd)


def reduce(x, kind, axis=None):
    """Sum or mean over one axis (or all axes with axis=None), f64 accumulation."""
    x = _as_tensor(x)
    xd = x.data
    if kind not in ("sum", "mean"):
        raise ValueError(f"reduce kind must be 'sum' or 'mean', got {kind!r}")
    if axis is not None and not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"reduce axis {axis} out of range for shape {xd.shape}")
    n = xd.size if axis is None else xd.shape[axis]
    out = xd.sum(axis=axis, dtype=np.float64)
    if kind == "mean":
        out = out / n
    out = out.astype(xd.dtype)

    def bwd(g):
        if axis is None:
            gx = np.broadcast_to(g, xd.shape)
        else:
            gx = np.broadcast_to(np.expand_dims(g, axis), xd.shape)
        return (gx / n if kind == "mean" else gx.copy(),)

    return _record(out, (x,), bwd)


def gather_rows(x, indices):
    """Select rows of a 2-D tensor: idx [K] -> [K, d], idx [B, K] -> [B, K, d].

    Backward scatter-adds, so duplicate indices accumulate.
    """
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D source, got {xd.shape}")
    idx = np.asarray(indices)
    if idx.ndim not in (1, 2) or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"gather_rows needs integer indices of rank 1 or 2, got {idx.shape} {idx.dtype}")
    n = xd.shape[0]
    if idx.size:
        bad = idx[(idx < 0) | (idx >= n)]
        if bad.size:
            raise IndexError(f"gather_rows index {int(bad.flat[0])} out of range for {n} rows")

    def bwd(g):
        dx = np.zeros(xd.shape, dtype=np.float64)
        np.add.at(dx, idx.ravel(), g.reshape(-1, xd.shape[1]))
        return (dx.astype(xd.dtype),)

    return _record(xd[idx], (x,), bwd)


def fill_masked_rows(visible, mask_bits, fill):
    """Rebuild full sequences: visible rows at their original positions, the
    per-sequence fill vector everywhere the mask bit is set.

    visible [B, K, d], mask_bits bool [B, N] (constant), fill [B, d]. Gradient
    flows to both sources; the fill gradient is the sum over its masked slots.
    """
    visible, fill = _as_tensor(visible), _as_tensor(fill)
    bits = np.asarray(mask_bits, dtype=bool)
    vd, fd = visible.data, fill.data
    if vd.ndim != 3 or bits.ndim != 2 or fd.ndim != 2:
        raise ShapeError(
            f"fill_masked_rows needs visible[B,K,d], mask[B,N], fill[B,d]; got {vd.shape}, {bits.shape}, {fd.shape}"
        )
    nbatch, n = bits.shape
    counts = bits.sum(axis=1)
    if vd.shape[0] != nbatch or fd.shape[0] != nbatch or fd.shape[1] != vd.shape[2]:
        raise ShapeError(f"fill_masked_rows operand shapes disagree: {vd.shape}, {bits.shape}, {fd.shape}")
    if np.any(n - counts != vd.shape[1]):
        raise ShapeError(
            f"visible row count {vd.shape[1]} does not match mask popcounts {sorted(set(n - counts))}"
        )
    keep = ~bits
    out = np.empty((nbatch, n, vd.shape[2]), dtype=vd.dtype)
    out[keep] = vd.reshape(-1, vd.shape[2])
    out[bits] = np.repeat(fd, counts, axis=0)

    def bwd(g):
        dvis = g[keep].reshape(vd.shape) if visible.requires_grad else None
        dfill = None
        if fill.requires_grad:
            dfill = (g * bits[:, :, None]).sum(axis=1, dtype=np.float64).astype(fd.dtype)
        return dvis, dfill

    return _record(out, (visible, fill), bwd)


def transpose(x, axes=None):
    x = _as_tensor(x)
    xd = x.data
    if axes is None:
        axes = tuple(reversed(range(xd.ndim)))
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _record(xd.transpose(axes), (x,), bwd)


def reshape(x, shape):
    x = _as_tensor(x)
    in_shape = x.data.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return _record(x.data.reshape(shape), (x,), bwd)


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one operand")
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), bwd)


def slice_axis(x, axis, start, stop):
    """Contiguous slice [start:stop) along one axis."""
    x = _as_tensor(x)
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"slice_axis axis {axis} out of range for shape {xd.shape}")
    axis = axis % xd.ndim
    sl = tuple(slice(None) if i != axis else slice(start, stop) for i in range(xd.ndim))

    def bwd(g):
        dx = np.zeros(xd.shape, dtype=g.dtype)
        dx[sl] = g
        return (dx,)

    return _record(xd[sl], (x,), bwd)


def tile_axis(x, reps, axis):
    """Repeat a size-1 axis `reps` times; backward sums back over it."""
    x = _as_tensor(x)
    xd = x.data
    if xd.shape[axis] != 1:
        raise ShapeError(f"tile_axis needs size 1 along axis {axis}, got {xd.shape}")

    def bwd(g):
        return (g.sum(axis=axis, keepdims=True, dtype=np.float64).astype(xd.dtype),)

    return _record(np.repeat(xd, reps, axis=axis), (x,), bwd)


def softmax_cross_entropy(logits, targets, include=None):
    """Mean over selected rows of -log softmax(logits)[row, target].

    logits [..., V], integer targets of the leading shape, optional boolean
    `include` of the leading shape (None selects every row). Fused and
    max-subtracted; log-sum-exp accumulates in float64.
    """
    logits = _as_tensor(logits)
    ld = logits.data
    if ld.ndim < 1 or ld.shape[-1] < 1:
        raise ShapeError(f"softmax_cross_entropy needs logits [..., V], got {ld.shape}")
    lead = ld.shape[:-1]
    v = ld.shape[-1]
    tgt = np.asarray(targets)
    if tgt.shape != lead or not np.issubdtype(tgt.dtype, np.integer):
        raise ShapeError(f"targets must be integers of shape {lead}, got {tgt.shape} {tgt.dtype}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        bad = tgt[(tgt < 0) | (tgt >= v)]
        raise IndexError(f"target token {int(bad.flat[0])} out of range for vocabulary {v}")
    if include is None:
        inc = np.ones(lead, dtype=bool)
    else:
        inc = np.asarray(include, dtype=bool)
        if inc.shape != lead:
            raise ShapeError(f"include mask must have shape {lead}, got {inc.shape}")
    n_inc = int(inc.sum())
    if n_inc == 0:
        raise ValueError("softmax_cross_entropy selected zero rows")

    m = ld.max(axis=-1, keepdims=True)
    z = (ld - m).astype(np.float64)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, tgt[..., None].astype(np.int64), axis=-1)[..., 0]
    per_row = lse - picked
    out = np.asarray((per_row * inc).sum() / n_inc, dtype=ld.dtype)

    def bwd(g):
        probs = np.exp(z - lse[..., None]).astype(ld.dtype)
        flat = probs.reshape(-1, v)
        flat[np.arange(flat.shape[0]), tgt.ravel()] -= 1.0
        w = (inc.astype(ld.dtype) * (float(g) / n_inc)).reshape(-1, 1)
        return ((flat * w).reshape(ld.shape),)

    return _record(out, (logits,), bwd)


def sigmoid_cross_entropy(logits, labels):
    """One-vs-all sigmoid cross entropy against one-hot integer labels.

    logits [B, K] or [K]; per sample the K class terms are summed, then the
    batch is averaged. Uses the stable form max(l,0) - l*y + log1p(exp(-|l|)).
    Gradient w.r.t. logits is (sigmoid(l) - y) / B.
    """
    logits = _as_tensor(logits)
    ld = logits.data
    if ld.ndim == 1:
        ld2 = ld[None, :]
        lab = np.asarray([labels])
    elif ld.ndim == 2:
        ld2 = ld
        lab = np.asarray(labels)
    else:
        raise ShapeError(f"sigmoid_cross_entropy needs logits [K] or [B, K], got {ld.shape}")
    nbatch, k = ld2.shape
    if lab.shape != (nbatch,) or not np.issubdtype(lab.dtype, np.integer):
        raise ShapeError(f"labels must be {nbatch} integers, got shape {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        bad = lab[(lab < 0) | (lab >= k)]
        raise IndexError(f"label {int(bad.flat[0])} out of range for {k} classes")
    y = np.zeros((nbatch, k), dtype=ld.dtype)
    y[np.arange(nbatch), lab] = 1.0
    per_class = np.maximum(ld2, 0) - ld2 * y + np.log1p(np.exp(-np.abs(ld2)))
    out = np.asarray(per_class.sum(dtype=np.float64) / nbatch, dtype=ld.dtype)

    def bwd(g):
        s = np.empty_like(ld2)
        pos = ld2 >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-ld2[pos]))
        e = np.exp(ld2[~pos])
        s[~pos] = e / (1.0 + e)
        dl = (s - y) * (float(g) / nbatch)
        return (dl.reshape(ld.shape),)

    return _record(out, (logits,), bwd)
