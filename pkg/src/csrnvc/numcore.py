"""Dense tensors with a reverse-mode autodiff tape.

Only the operations the conditional SampleRNN needs are provided. Broadcasting
is limited to equal shapes and a 1-D vector added over the rows of a tensor
whose last axis matches it.

Usage::

    with Tape() as tape:
        loss = softmax_cross_entropy(matmul(x, w), targets)
    backward(tape, loss)
"""
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward: object


class Tape:
    """Ordered record of executed operations for one execution context."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def _record(inputs, out_data, backward_fn):
    inputs = tuple(inputs)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.records.append(_Record(inputs, out, backward_fn))
    return out


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def backward(tape, loss, params=None):
    """Run the tape in reverse from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` receive ``.grad``. When a
    ParameterStore is given, every parameter not reached gets a zero gradient.
    Returns the parameter gradients as a name -> array dict (or ``None``).
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for rec in reversed(tape.records):
        produced.add(id(rec.output))
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    seen = set()
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and id(t) not in produced and id(t) not in seen:
                seen.add(id(t))
                g = grads.get(id(t))
                t.grad = g.astype(t.dtype, copy=False) if g is not None else np.zeros_like(t.data)
    if params is None:
        return None
    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        p.grad = g.astype(p.dtype, copy=False) if g is not None else np.zeros_like(p.data)
        out[name] = p.grad
    return out


# ---------------------------------------------------------------- shape rules


def _broadcast_kind(a, b, op):
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "rows"
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_rows(g, b_shape):
    return g.reshape(-1, b_shape[0]).sum(axis=0)


# ------------------------------------------------------------------ operations


def matmul(a, b):
    """Row-batched matrix product: a[..., k] @ b[k, n] -> [..., n]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def grad(g):
        ga = g @ B.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record((a, b), out, grad)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=_as_tensor(a))
    kind = _broadcast_kind(a.data, b.data, "add")

    def grad(g):
        return g, (g if kind == "same" else _reduce_rows(g, b.shape))

    return _record((a, b), a.data + b.data, grad)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=_as_tensor(a))
    kind = _broadcast_kind(a.data, b.data, "mul")
    A, B = a.data, b.data

    def grad(g):
        ga = g * B if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * A if kind == "same" else _reduce_rows(g * A, b.shape)
        return ga, gb

    return _record((a, b), A * B, grad)


def scale(a, c):
    """Multiply by a Python scalar constant."""
    a = _as_tensor(a)
    c = a.dtype.type(c)
    return _record((a,), a.data * c, lambda g: (g * c,))


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _record((a,), s, lambda g: (g * s * (1 - s),))


def tanh(a):
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _record((a,), t, lambda g: (g * (1 - t * t),))


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _record((a,), np.where(mask, a.data, 0).astype(a.dtype), lambda g: (g * mask,))


def total(a):
    """Sum of all elements as a 0-d tensor."""
    a = _as_tensor(a)
    shape = a.shape
    return _record((a,), np.asarray(a.data.sum(), dtype=a.dtype), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    return _record((a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def repeat(a, factor, axis):
    """Copy every slice along ``axis`` ``factor`` times contiguously."""
    a = _as_tensor(a)
    if factor == 1:
        return a
    axis = axis % a.data.ndim
    shape = a.shape

    def grad(g):
        split = shape[:axis] + (shape[axis], factor) + shape[axis + 1:]
        return (g.reshape(split).sum(axis=axis + 1),)

    return _record((a,), np.repeat(a.data, factor, axis=axis), grad)


def concat(parts, axis):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat: no tensors given")
    if len(parts) == 1:
        return parts[0]
    ndim = parts[0].data.ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"concat: axis {axis} out of range for {ndim}-d tensors")
    axis = axis % ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != ndim or any(p.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise DimensionError(f"concat: shapes {ref} and {p.shape} disagree off axis {axis}")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def grad(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(parts, np.concatenate([p.data for p in parts], axis=axis), grad)


def embedding_lookup(table, ids):
    """Gather rows of ``table`` for an integer id array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    V = table.shape[0]
    bad = ids[(ids < 0) | (ids >= V)]
    if bad.size:
        raise IndexError(f"embedding id {int(bad.flat[0])} outside [0, {V})")

    flat_ids = ids.reshape(-1)

    def grad(g):
        g2 = g.reshape(-1, table.shape[1])
        gt = np.empty_like(table.data)
        for k in range(g2.shape[1]):
            gt[:, k] = np.bincount(flat_ids, weights=g2[:, k], minlength=V)
        return (gt,)

    return _record((table,), table.data[ids], grad)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, targets, mask=None, normalizer=None, base=None):
    """Mean negative log-likelihood over the unmasked rows.

    ``logits`` has shape [..., Q]; ``targets`` holds integer classes shaped
    like ``logits`` without its last axis. The result is in nats, or in units
    of ``log(base)`` when ``base`` is given (``base=2`` gives bits).
    ``normalizer`` overrides the row count used for the mean, so per-item
    losses can be summed into a batch mean. The reduction runs in float64.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    Q = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"softmax_cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    bad = targets[(targets < 0) | (targets >= Q)]
    if bad.size:
        raise IndexError(f"target {int(bad.flat[0])} outside [0, {Q})")
    flat = logits.data.reshape(-1, Q)
    t = targets.reshape(-1)
    w = np.ones(t.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    n = w.sum() if normalizer is None else normalizer
    n = max(float(n), 1.0)
    unit = 1.0 if base is None else float(np.log(base))
    z = flat - flat.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    sums = ez.sum(axis=-1, dtype=np.float64)
    rows = np.arange(t.size)
    picked = z[rows, t].astype(np.float64) - np.log(sums)
    loss = np.asarray(-(picked * w).sum() / (n * unit), dtype=flat.dtype)

    def grad(g):
        p = ez / sums.astype(flat.dtype)[:, None]
        p[rows, t] -= 1
        p *= (w / (n * unit)).astype(flat.dtype)[:, None] * g
        return (p.reshape(logits.shape),)

    return _record((logits,), loss, grad)


def gru_sequence(gx, h0, w_zr, w_n, reverse=False):
    """Run a GRU over time given precomputed input projections.

    ``gx`` is [B, T, 3H] holding x·W_x + b for the update, reset and
    candidate blocks in that order; ``w_zr`` [H, 2H] and ``w_n`` [H, H] are the
    recurrent weights. Per step::

        z = sigmoid(gx_z + h w_z);  r = sigmoid(gx_r + h w_r)
        n = tanh(gx_n + (r*h) w_n); h' = (1-z)*h + z*n

    Returns the hidden states [B, T, H]. With ``reverse`` the recursion runs
    from the last step to the first and outputs stay in input time order.
    """
    gx, h0, w_zr, w_n = (_as_tensor(t) for t in (gx, h0, w_zr, w_n))
    B, T, H3 = gx.shape
    H = H3 // 3
    if H3 != 3 * H or h0.shape != (B, H) or w_zr.shape != (H, 2 * H) or w_n.shape != (H, H):
        raise DimensionError(
            f"gru_sequence: gx {gx.shape}, h0 {h0.shape}, w_zr {w_zr.shape}, w_n {w_n.shape}"
        )
    G, Wzr, Wn = gx.data, w_zr.data, w_n.data
    order = range(T - 1, -1, -1) if reverse else range(T)
    hs = np.empty((B, T, H), dtype=G.dtype)
    zs = np.empty_like(hs)
    rs = np.empty_like(hs)
    ns = np.empty_like(hs)
    hprev = np.empty_like(hs)
    h = h0.data
    for t in order:
        hprev[:, t] = h
        zr = _stable_sigmoid(G[:, t, :2 * H] + h @ Wzr)
        z, r = zr[:, :H], zr[:, H:]
        n = np.tanh(G[:, t, 2 * H:] + (r * h) @ Wn)
        h = (1 - z) * h + z * n
        hs[:, t], zs[:, t], rs[:, t], ns[:, t] = h, z, r, n

    def grad(g):
        dG = np.empty_like(G)
        dWzr = np.zeros_like(Wzr)
        dWn = np.zeros_like(Wn)
        dh = np.zeros((B, H), dtype=G.dtype)
        for t in reversed(order):
            dh = dh + g[:, t]
            z, r, n, hp = zs[:, t], rs[:, t], ns[:, t], hprev[:, t]
            da_n = dh * z * (1 - n * n)
            dz = dh * (n - hp)
            dh_prev = dh * (1 - z)
            dWn += (r * hp).T @ da_n
            drh = da_n @ Wn.T
            dh_prev += drh * r
            da_zr = np.concatenate([dz * z * (1 - z), drh * hp * r * (1 - r)], axis=1)
            dWzr += hp.T @ da_zr
            dh_prev += da_zr @ Wzr.T
            dG[:, t, :2 * H] = da_zr
            dG[:, t, 2 * H:] = da_n
            dh = dh_prev
        return dG, dh, dWzr, dWn

    return _record((gx, h0, w_zr, w_n), hs, grad)


# ------------------------------------------------------------- parameter store


class ParameterStore:
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params = {}

    def create(self, name, data):
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(data, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def set_data(self, name, data):
        p = self._params[name]
        data = np.asarray(data)
        if data.shape != p.shape:
            raise DimensionError(f"parameter {name!r}: shape {data.shape} does not match {p.shape}")
        p.data = data.astype(self.dtype, copy=True)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def astype(self, dtype):
        out = ParameterStore(dtype)
        for name, p in self.items():
            out.create(name, p.data)
        return out

    def num_values(self):
        return sum(p.data.size for p in self._params.values())


# ---------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    h: float
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self):
        return sorted(n for n, e in self.errors.items() if not e < self.tolerance)

    @property
    def ok(self):
        return not self.failures

    def lines(self):
        for name in sorted(self.errors):
            flag = "ok" if self.errors[name] < self.tolerance else "FAIL"
            yield f"{name}\t{self.errors[name]:.3e}\t{flag}"


def relative_error(analytic, numeric, floor=1e-5):
    """Elementwise |a-b| / max(|a|, |b|, floor), reduced by max."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def finite_diff_check(f, params, h=1e-5, tolerance=1e-6, floor=1e-5, max_entries=None, rng=None):
    """Compare tape gradients with central differences.

    ``f`` maps nothing to a scalar Tensor built from ``params`` (a
    ParameterStore or a name -> Tensor dict). At most ``max_entries``
    coordinates per parameter are probed when given.
    """
    items = params.items() if isinstance(params, ParameterStore) else sorted(params.items())
    with Tape() as tape:
        loss = f()
    backward(tape, loss, dict(items))
    analytic = {n: p.grad.copy() for n, p in items}
    report = GradCheckReport(h=h, tolerance=tolerance)
    for name, p in items:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            keep = flat[i]
            flat[i] = keep + h
            up = float(f().data)
            flat[i] = keep - h
            down = float(f().data)
            flat[i] = keep
            numeric[j] = (up - down) / (2 * h)
        report.errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric, floor)
    return report
