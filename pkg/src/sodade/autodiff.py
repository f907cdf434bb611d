"""Small numpy tensor engine with reverse-mode differentiation.

Each op records its parents and a backward closure on the output tensor;
``Tensor.backward`` walks the recorded graph in reverse topological order
and then frees it. Only what the transformer and the MLP heads need is here.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

MASK_VALUE = -1e9
LN_EPS = 1e-5

_grad_enabled = True


class GraphError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_freed", "name")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._freed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self._freed:
            raise GraphError("graph already consumed by a previous backward(); re-run the forward pass")
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                # leaf
                if g is not None:
                    node._accumulate(g)
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._freed = True

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, name=None):
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _make(data, parents, backward):
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.reshape((-1,) + g.shape[ndiff:]).sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise ---------------------------------------------------------

def add(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def relu(x):
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _make(out, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximated GELU."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d = (1.0 - t * t) * (v * (0.5 * _GELU_C) + v * v2 * (1.5 * 0.044715 * _GELU_C))
        d += 0.5 * (1.0 + t)
        d *= g
        return (d,)

    return _make(out.astype(v.dtype, copy=False), (x,), backward)


def tanh(x):
    t = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - t * t),)

    return _make(t, (x,), backward)


# --- shape ---------------------------------------------------------------

def reshape(x, shape):
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), backward)


def concat(tensors, axis=-1):
    """Concatenate along ``axis`` (the model only uses the last one)."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def embedding(table, idx):
    """Row gather ``table[idx]``; ``idx`` is an integer array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        flat = idx.reshape(-1)
        g2 = g.reshape(-1, table.shape[-1])
        n_rows = table.shape[0]
        if n_rows <= 512:
            onehot = np.zeros((n_rows, flat.size), dtype=g2.dtype)
            onehot[flat, np.arange(flat.size)] = 1.0
            return (onehot @ g2,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, flat, g2)
        return (gt,)

    return _make(table.data[idx], (table,), backward)


def take_last(x, idx):
    """out[..., ] = x[..., idx[...]] : picks one entry of the last axis per position."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make(out, (x,), backward)


def _is_basic_index(key):
    key = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(None), type(Ellipsis))) for k in key)


def getitem(x, key):
    """Indexing ``x[key]``; basic indices scatter by assignment, advanced by add.at."""
    basic = _is_basic_index(key)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _make(x.data[key], (x,), backward)


# --- linear algebra ------------------------------------------------------

def matmul(a, b):
    """Batched matmul with numpy broadcasting over leading dims."""

    def backward(g):
        if b.data.ndim == 1 or a.data.ndim == 1:
            raise GraphError("matmul backward supports >=2-d operands only")
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # weight matrix shared across the batch: fold batch dims
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                gb = a2.T @ g2
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        else:
            gb = None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# --- reductions / normalisation -----------------------------------------

def sum_all(x):
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(out, (x,), backward)


def mean_all(x):
    n = x.data.size
    out = np.asarray(x.data.sum(dtype=np.float64) / n, dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _make(out, (x,), backward)


def _lastmax(v):
    # elementwise running max beats ufunc.reduce on short trailing axes
    m = v[..., 0].copy()
    for i in range(1, v.shape[-1]):
        np.maximum(m, v[..., i], out=m)
    return m[..., None]


def _lastsum(v):
    return (v @ np.ones(v.shape[-1], dtype=v.dtype))[..., None]


def softmax(x, axis=-1):
    """Softmax over the last axis."""
    if axis not in (-1, x.data.ndim - 1):
        raise ValueError("softmax supports the last axis only")
    e = np.exp(x.data - _lastmax(x.data))
    s = e / _lastsum(e)

    def backward(g):
        return (s * (g - _lastsum(g * s)),)

    return _make(s, (x,), backward)


def masked_fill_additive(x, disallowed):
    """Add MASK_VALUE where ``disallowed`` (bool, broadcastable) is True."""
    bias = np.where(disallowed, MASK_VALUE, 0.0).astype(x.dtype)
    return add(x, Tensor(bias))


def layer_norm(x, gain, bias, eps=LN_EPS):
    v = x.data
    mu = v.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((v - mu) * inv).astype(v.dtype)
    inv = inv.astype(v.dtype)
    out = xhat * gain.data + bias.data
    n = v.shape[-1]

    def backward(g):
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gain, bias), backward)


def dropout(x, p, rng, training):
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.dtype)
    keep *= 1.0 / (1.0 - p)
    return mul(x, Tensor(keep))


def masked_mse(pred, target, mask):
    """Mean of (pred - target)^2 over positions where ``mask`` is True."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("masked_mse: no selected positions")
    t = np.where(mask, np.nan_to_num(np.asarray(target, dtype=np.float64)), 0.0)
    diff = np.where(mask, pred.data.astype(np.float64) - t, 0.0)
    out = np.asarray((diff * diff).sum() / count, dtype=pred.dtype)

    def backward(g):
        return ((2.0 * g * diff / count).astype(pred.dtype),)

    return _make(out, (pred,), backward)


def mse(pred, target):
    return masked_mse(pred, target, np.ones(pred.shape, dtype=bool))


# --- modules -------------------------------------------------------------

class Module:
    """Named-parameter container; parameters are discovered from attributes."""

    training = True

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        self.training = mode
        for val in vars(self).values():
            if isinstance(val, Module):
                val.train(mode)
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, std=0.02, dtype=np.float32):
        self.weight = parameter(rng.normal(0.0, std, size=(n_in, n_out)).astype(dtype))
        self.bias = parameter(np.zeros(n_out, dtype=dtype))

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32):
        self.gain = parameter(np.ones(dim, dtype=dtype))
        self.bias = parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias)


# --- optimisation --------------------------------------------------------

def adam_step(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns new (param, m, v); inputs untouched."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    param = param - lr * mhat / (np.sqrt(vhat) + eps)
    return param, m, v


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


class Adam:
    """Adam over a dict of named parameters.

    ``lr_scale`` maps parameter names to a multiplier on the base learning
    rate (used for the reduced backbone rate during fine-tuning).
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, lr_scale=None):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lr_scale = dict(lr_scale or {})
        self.state = AdamState(
            m={k: np.zeros_like(p.data) for k, p in self.params.items()},
            v={k: np.zeros_like(p.data) for k, p in self.params.items()},
        )
        self._start = {}  # step at which late-added parameters joined

    def add_params(self, params, lr_scale=1.0):
        """Start optimising more parameters; their bias correction counts from now."""
        for k, p in params.items():
            if k in self.params:
                raise ValueError(f"parameter {k!r} already registered")
            self.params[k] = p
            self.state.m[k] = np.zeros_like(p.data)
            self.state.v[k] = np.zeros_like(p.data)
            self.lr_scale[k] = lr_scale
            self._start[k] = self.state.step

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
        self.state.step += 1
        t = self.state.step
        for name, p in self.params.items():
            if p.grad is None:
                continue
            lr = self.lr * self.lr_scale.get(name, 1.0)
            new, m, v = adam_step(p.data, p.grad, self.state.m[name], self.state.v[name],
                                  t - self._start.get(name, 0), lr,
                                  self.beta1, self.beta2, self.eps)
            self.state.m[name] = m.astype(p.dtype, copy=False)
            self.state.v[name] = v.astype(p.dtype, copy=False)
            if lr != 0.0:
                p.data = new.astype(p.dtype, copy=False)


# --- gradient checking ---------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    failures: list = field(default_factory=list)  # (param name, flat index, analytic, numeric, rel)
    warnings: list = field(default_factory=list)  # ill-conditioned entries, not counted as failures
    tolerance: float = 1e-4

    @property
    def passed(self):
        return not self.failures


def _rel_error(a, n, floor):
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(loss_fn, params, tolerance=1e-4, h=1e-4, floor=1e-6, max_entries=None, rng=None):
    """Compare analytic gradients to central finite differences.

    ``loss_fn()`` must rebuild the graph and return a scalar Tensor; ``params``
    maps names to the tensors to check (use float64 data for a meaningful
    check). An entry that misses the tolerance is re-estimated at h/2 and by
    Richardson extrapolation; if it still misses and the h and h/2 estimates
    disagree with each other by at least half the discrepancy, it is a
    conditioning warning, otherwise a failure.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    def f():
        with no_grad():
            return float(np.asarray(loss_fn().data, dtype=np.float64))

    def central(p, i, step):
        flat = p.data.reshape(-1)
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        return (fp - fm) / (2 * step)

    report = GradCheckReport(max_rel_error=0.0, n_checked=0, tolerance=tolerance)
    for name, p in params.items():
        n = p.data.size
        idx = np.arange(n)
        if max_entries is not None and n > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            num = central(p, i, h)
            a = float(a_flat[i])
            rel = _rel_error(a, num, floor)
            report.n_checked += 1
            if rel > tolerance:
                num2 = central(p, i, h / 2)
                # Richardson extrapolation cancels the O(h^2) truncation term
                rel = min(rel, _rel_error(a, (4 * num2 - num) / 3, floor))
                if rel > tolerance:
                    # finite-difference noise as large as the discrepancy: not conclusive
                    if _rel_error(num, num2, floor) > max(tolerance, 0.5 * rel):
                        report.warnings.append((name, int(i), a, num, rel))
                        continue
                    report.failures.append((name, int(i), a, num, rel))
            report.max_rel_error = max(report.max_rel_error, rel)
    return report
