"""Minimal reverse-mode differentiation engine over float64 numpy arrays.

Graphs are built define-by-run: every operation returns a fresh TensorNode
holding the forward values plus a closure that routes the upstream gradient
to its parents. Graphs are rebuilt per forward pass and never cached.
"""

import numpy as np

from .errors import ContractError, DimensionError, GuardError

DIV_GUARD = 1e-12


class TensorNode:
    """A value in the computation graph.

    values are float64 in row-major order; grad is allocated lazily on the
    first accumulation and always shape-matches values.
    """

    __slots__ = ("values", "grad", "op", "parents", "_backward")

    def __init__(self, values, op="leaf", parents=(), backward=None):
        arr = np.asarray(values, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.values = arr
        self.grad = None
        self.op = op
        self.parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.values.shape:
                self.grad = np.broadcast_to(g, self.values.shape).astype(np.float64)
        else:
            self.grad += g

    def grad_or_zeros(self):
        return self.grad if self.grad is not None else np.zeros_like(self.values)

    def __repr__(self):
        return f"TensorNode(op={self.op!r}, shape={self.values.shape})"


def constant(values):
    """Wrap raw values as a leaf node."""
    return TensorNode(values)


# ---------------------------------------------------------------------------
# core operations


def tensor_matmul(a, b):
    """Matrix product of two 2-D nodes ([m x k] @ [k x n])."""
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {av.shape} @ {bv.shape}")
    out = TensorNode(av @ bv, op="matmul", parents=(a, b))

    def _bw(g):
        a.accumulate(g @ bv.T)
        b.accumulate(av.T @ g)

    out._backward = _bw
    return out


def _is_scalar_operand(x):
    return not isinstance(x, TensorNode)


def tensor_elementwise(a, b, kind):
    """Elementwise op; b may be a TensorNode of equal shape or a plain scalar.

    div raises if any denominator magnitude falls below the 1e-12 guard.
    max2 routes the gradient to the larger operand per slot (ties to a).
    """
    av = a.values
    if _is_scalar_operand(b):
        bv = float(b)
        b_node = None
    else:
        b_node = b
        bv = b.values
        if bv.shape != av.shape and bv.size != 1 and av.size != 1:
            raise DimensionError(
                f"elementwise shapes incompatible: {av.shape} vs {bv.shape}")

    if kind == "add":
        res = av + bv
    elif kind == "sub":
        res = av - bv
    elif kind == "mul":
        res = av * bv
    elif kind == "div":
        if np.min(np.abs(bv)) < DIV_GUARD:
            raise GuardError(f"division denominator magnitude below {DIV_GUARD}")
        res = av / bv
    elif kind == "max2":
        res = np.maximum(av, bv)
    else:
        raise ContractError(f"unknown elementwise kind {kind!r}")

    parents = (a,) if b_node is None else (a, b_node)
    out = TensorNode(res, op=f"ew_{kind}", parents=parents)

    def _reduce_to(shape, g):
        # only scalar-vs-tensor broadcasting is supported
        return g if g.shape == shape else np.sum(g).reshape(shape)

    def _bw(g):
        if kind == "add":
            ga, gb = g, g
        elif kind == "sub":
            ga, gb = g, -g
        elif kind == "mul":
            ga, gb = g * bv, g * av
        elif kind == "div":
            ga = g / bv
            gb = -g * av / (bv * bv)
        else:  # max2
            mask = av >= bv
            ga = g * mask
            gb = g * (~mask)
        a.accumulate(_reduce_to(av.shape, np.broadcast_to(ga, out.values.shape)))
        if b_node is not None:
            b_node.accumulate(_reduce_to(bv.shape, np.broadcast_to(gb, out.values.shape)))

    out._backward = _bw
    return out


def add(a, b):
    return tensor_elementwise(a, b, "add")


def sub(a, b):
    return tensor_elementwise(a, b, "sub")


def mul(a, b):
    return tensor_elementwise(a, b, "mul")


def div(a, b):
    return tensor_elementwise(a, b, "div")


def max2(a, b):
    return tensor_elementwise(a, b, "max2")


def tensor_relu(a):
    """max(0, x); subgradient at exactly 0 is 0."""
    av = a.values
    out = TensorNode(np.maximum(av, 0.0), op="relu", parents=(a,))

    def _bw(g):
        a.accumulate(g * (av > 0))

    out._backward = _bw
    return out


def tensor_reduce_max(a):
    """Maximum over the last axis; [d x K] -> [d].

    Backward routes each row's incoming gradient entirely to the argmax
    column; ties go to the first (lowest-index) maximizer.
    """
    av = a.values
    if av.ndim == 0 or av.shape[-1] == 0:
        raise DimensionError(f"reduce_max needs a non-empty last axis, got shape {av.shape}")
    out = TensorNode(av.max(axis=-1), op="reduce_max", parents=(a,))
    idx = av.argmax(axis=-1)

    def _bw(g):
        contrib = np.zeros_like(av)
        np.put_along_axis(contrib, np.expand_dims(idx, -1), np.expand_dims(g, -1), axis=-1)
        a.accumulate(contrib)

    out._backward = _bw
    return out


def softmax_cross_entropy(logits, target):
    """-log softmax(logits)[target] with max-subtraction stabilization."""
    z = logits.values.reshape(-1)
    c = z.shape[0]
    target = int(target)
    if not 0 <= target < c:
        raise IndexError(f"target {target} out of range for {c} classes")
    m = z.max()
    e = np.exp(z - m)
    s = e.sum()
    loss = (m + np.log(s)) - z[target]
    out = TensorNode(loss, op="softmax_ce", parents=(logits,))
    p = e / s

    def _bw(g):
        contrib = p.copy()
        contrib[target] -= 1.0
        logits.accumulate((contrib * float(g)).reshape(logits.values.shape))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# structural operations (gather / reshape / concat / reductions)


def _scatter_rows(shape, idx, g):
    out = np.zeros(shape)
    if g.ndim == 2:
        n = shape[0]
        for c in range(g.shape[1]):
            out[:, c] = np.bincount(idx, weights=g[:, c], minlength=n)
    else:
        np.add.at(out, idx, g)
    return out


def gather_rows(a, idx):
    """Select rows a[idx]; duplicate indices are allowed, backward sums."""
    idx = np.asarray(idx, dtype=np.intp)
    av = a.values
    out = TensorNode(av[idx], op="gather_rows", parents=(a,))

    def _bw(g):
        a.accumulate(_scatter_rows(av.shape, idx, g))

    out._backward = _bw
    return out


def gather_cols(a, idx):
    """Select columns a[:, idx] of a 2-D node."""
    idx = np.asarray(idx, dtype=np.intp)
    av = a.values
    if av.ndim != 2:
        raise DimensionError(f"gather_cols needs a 2-D node, got shape {av.shape}")
    out = TensorNode(av[:, idx], op="gather_cols", parents=(a,))

    def _bw(g):
        contrib = np.zeros_like(av)
        for r in range(av.shape[0]):
            contrib[r] = np.bincount(idx, weights=g[r], minlength=av.shape[1])
        a.accumulate(contrib)

    out._backward = _bw
    return out


def transpose2d(a):
    av = a.values
    if av.ndim != 2:
        raise DimensionError(f"transpose2d needs a 2-D node, got shape {av.shape}")
    out = TensorNode(av.T, op="transpose", parents=(a,))

    def _bw(g):
        a.accumulate(g.T)

    out._backward = _bw
    return out


def reshape(a, shape):
    av = a.values
    out = TensorNode(av.reshape(shape), op="reshape", parents=(a,))

    def _bw(g):
        a.accumulate(g.reshape(av.shape))

    out._backward = _bw
    return out


def concat_rows(parts):
    """Concatenate nodes along axis 0."""
    vals = [p.values for p in parts]
    out = TensorNode(np.concatenate(vals, axis=0), op="concat", parents=tuple(parts))
    sizes = [v.shape[0] for v in vals]

    def _bw(g):
        off = 0
        for p, s in zip(parts, sizes):
            p.accumulate(g[off:off + s])
            off += s

    out._backward = _bw
    return out


def reduce_sum(a, axis=None):
    """Sum over all elements (axis=None, scalar output) or the last axis."""
    av = a.values
    if axis is None:
        out = TensorNode(av.sum(), op="sum", parents=(a,))

        def _bw(g):
            a.accumulate(np.full_like(av, float(g)))

    elif axis == -1:
        out = TensorNode(av.sum(axis=-1), op="sum_last", parents=(a,))

        def _bw(g):
            a.accumulate(np.broadcast_to(np.expand_dims(g, -1), av.shape).copy())

    else:
        raise ContractError("reduce_sum supports axis=None or axis=-1")
    out._backward = _bw
    return out


def exp_op(a):
    ev = np.exp(a.values)
    out = TensorNode(ev, op="exp", parents=(a,))

    def _bw(g):
        a.accumulate(g * ev)

    out._backward = _bw
    return out


def log_op(a):
    av = a.values
    if np.min(av) <= 0.0:
        raise GuardError("log of a non-positive value")
    out = TensorNode(np.log(av), op="log", parents=(a,))

    def _bw(g):
        a.accumulate(g / av)

    out._backward = _bw
    return out


def scale_cols(f, row):
    """Multiply every row of f [d x N] by a per-column gate row [1 x N]."""
    fv, rv = f.values, row.values
    if fv.ndim != 2 or rv.shape != (1, fv.shape[1]):
        raise DimensionError(f"gate row must be 1 x {fv.shape[1]}, got {rv.shape}")
    out = TensorNode(fv * rv, op="scale_cols", parents=(f, row))

    def _bw(g):
        f.accumulate(g * rv)
        row.accumulate((g * fv).sum(axis=0, keepdims=True))

    out._backward = _bw
    return out


def scale_rows(f, col):
    """Multiply every column of f [d x N] by a per-row column col [d x 1]."""
    fv, cv = f.values, col.values
    if fv.ndim != 2 or cv.shape != (fv.shape[0], 1):
        raise DimensionError(f"scale column must be {fv.shape[0]} x 1, got {cv.shape}")
    out = TensorNode(fv * cv, op="scale_rows", parents=(f, col))

    def _bw(g):
        f.accumulate(g * cv)
        col.accumulate((g * fv).sum(axis=1, keepdims=True))

    out._backward = _bw
    return out


def linear(w, b, x, relu=False):
    """One dense layer y = w @ x + b (bias broadcast over columns), with an
    optional fused ReLU. A composite op so each layer costs one graph node
    instead of four large intermediates."""
    wv, xv, bv = w.values, x.values, b.values
    if wv.ndim != 2 or xv.ndim != 2 or wv.shape[1] != xv.shape[0]:
        raise DimensionError(f"linear shapes incompatible: {wv.shape} @ {xv.shape}")
    if bv.shape != (wv.shape[0], 1):
        raise DimensionError(f"bias must be {(wv.shape[0], 1)}, got {bv.shape}")
    y = wv @ xv
    y += bv
    if relu:
        np.maximum(y, 0.0, out=y)
    out = TensorNode(y, op="linear", parents=(w, b, x))

    def _bw(g):
        gy = g * (out.values > 0) if relu else g
        w.accumulate(gy @ xv.T)
        b.accumulate(gy.sum(axis=1, keepdims=True))
        x.accumulate(wv.T @ gy)

    out._backward = _bw
    return out


def group_weight_matmul(f, w, groups, k):
    """Per-group product F_i @ W_i^T for features stored side by side.

    f is [d x groups*k], w is [m x groups*k]; both are split into `groups`
    blocks of k columns, and block i contributes F_i W_i^T of shape [d x m].
    Returns [d x groups*m].
    """
    fv, wv = f.values, w.values
    if fv.shape[1] != groups * k or wv.shape[1] != groups * k:
        raise DimensionError(
            f"group_weight_matmul expects {groups}*{k} columns, got {fv.shape} and {wv.shape}")
    d, m = fv.shape[0], wv.shape[0]
    f3 = np.ascontiguousarray(fv.reshape(d, groups, k).transpose(1, 0, 2))  # [g,d,k]
    w3 = np.ascontiguousarray(wv.reshape(m, groups, k).transpose(1, 2, 0))  # [g,k,m]
    prod = f3 @ w3                                                          # [g,d,m]
    out = TensorNode(prod.transpose(1, 0, 2).reshape(d, groups * m),
                     op="group_matmul", parents=(f, w))

    def _bw(g):
        g3 = np.ascontiguousarray(g.reshape(d, groups, m).transpose(1, 0, 2))
        df = g3 @ w3.transpose(0, 2, 1)                    # [g,d,k]
        dw = f3.transpose(0, 2, 1) @ g3                    # [g,k,m]
        f.accumulate(df.transpose(1, 0, 2).reshape(d, groups * k))
        w.accumulate(dw.transpose(2, 0, 1).reshape(m, groups * k))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# backward sweep


def backward(loss):
    """Reverse topological sweep from a scalar loss.

    Gradients accumulate (+=) into every node reachable from the loss, so
    repeated sweeps (e.g. over a mini-batch) sum their contributions.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.values.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        nid = id(node)
        if nid in seen:
            continue
        seen.add(nid)
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.accumulate(np.ones_like(loss.values))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# parameters and optimizers


class ParameterSet:
    """Named map from dot-separated paths to trainable nodes.

    Iteration is lexicographic by path so updates and serialization are
    order-deterministic.
    """

    def __init__(self):
        self._params = {}

    def add(self, path, node):
        if path in self._params:
            raise ContractError(f"duplicate parameter path {path!r}")
        self._params[path] = node
        return node

    def __contains__(self, path):
        return path in self._params

    def __getitem__(self, path):
        return self._params[path]

    def __len__(self):
        return len(self._params)

    def paths(self):
        return sorted(self._params)

    def items(self):
        return [(p, self._params[p]) for p in sorted(self._params)]

    def clear_grads(self):
        for _, node in self.items():
            node.grad = None


class OptimizerState:
    """SGD or Adam state; Adam uses beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, kind, learning_rate):
        if kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer kind {kind!r}")
        if not learning_rate > 0 and learning_rate != 0.0:
            raise ContractError("learning rate must be >= 0")
        self.kind = kind
        self.learning_rate = float(learning_rate)
        self.step_count = 0
        self.beta1 = 0.9
        self.beta2 = 0.999
        self.eps = 1e-8
        self.m = {}
        self.v = {}


def optimizer_step(params, state):
    """Apply one update to every parameter, then clear gradients.

    A parameter whose gradient was never populated by a backward sweep is a
    contract violation and is reported by path.
    """
    for path, p in params.items():
        if p.grad is None:
            raise ContractError(f"missing gradient for parameter {path!r}")

    state.step_count += 1
    t = state.step_count
    lr = state.learning_rate
    for path, p in params.items():
        g = p.grad
        if state.kind == "sgd":
            p.values -= lr * g
        else:
            m = state.m.setdefault(path, np.zeros_like(p.values))
            v = state.v.setdefault(path, np.zeros_like(p.values))
            if m.shape != p.values.shape:
                raise ContractError(f"moment buffer shape mismatch for {path!r}")
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            p.values -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(function, x, h=1e-5):
    """Compare backward gradients against central finite differences.

    function maps a TensorNode to a scalar TensorNode and must be
    deterministic and piecewise-smooth at x. Returns the max over input
    coordinates of |analytic - numeric| / max(1e-8, |numeric|).
    """
    base = x.values.copy()
    node = TensorNode(base.copy())
    out = function(node)
    if out.values.size != 1:
        raise ContractError("finite_difference_check needs a scalar-valued function")
    backward(out)
    analytic = node.grad_or_zeros()

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        xp = base.copy()
        xp.flat[i] += h
        fp = float(function(TensorNode(xp)).values)
        xm = base.copy()
        xm.flat[i] -= h
        fm = float(function(TensorNode(xm)).values)
        flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1e-8, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
