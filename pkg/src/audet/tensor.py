"""Reverse-mode automatic differentiation on numpy arrays.

Every operation returns a graph node carrying the forward value and a
closure that routes an incoming gradient to the node's parents.  Calling
:func:`backward` on a scalar node seeds it with 1 and walks the graph
once in reverse topological order.  :class:`Parameter` leaves keep a
persistent ``grad`` buffer that accumulates additively; the caller
resets it between optimisation steps (see :func:`zero_grads`).

There is no broadcasting anywhere: primitives demand exact shapes and
raise ``ContractViolation`` otherwise.  Arithmetic runs in whatever
dtype the inputs carry, so the same graph code serves float32 training
and float64 gradient checking.

Build one graph per step and call :func:`backward` on it once; reusing
a graph for a second backward pass double-counts interior gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NumericError


class Tensor:
    """One node of the computation graph."""

    __slots__ = ("value", "grad", "parents", "_push")

    def __init__(self, value, parents=()):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value)
        self.grad = None
        self.parents = parents
        self._push = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype})"


class Parameter(Tensor):
    """Named trainable leaf with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(np.asarray(value))
        self.name = name
        self.grad = np.zeros_like(self.value)

    def reset_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


def _accum(node: Tensor, g: np.ndarray):
    if node.grad is None:
        node.grad = np.array(g)
    else:
        node.grad += g


def _require(cond: bool, message: str):
    if not cond:
        raise ContractViolation(message)


def _same_shape(op: str, a: Tensor, b: Tensor):
    _require(
        a.value.shape == b.value.shape,
        f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}",
    )


# ---------------------------------------------------------------------------
# elementwise and shape primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    out = Tensor(a.value + b.value, (a, b))

    def push(g):
        _accum(a, g)
        _accum(b, g)

    out._push = push
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    out = Tensor(a.value * b.value, (a, b))

    def push(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    out._push = push
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python constant (not a graph node)."""
    f = float(factor)
    out = Tensor(a.value * f, (a,))

    def push(g):
        _accum(a, g * f)

    out._push = push
    return out


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar node."""
    out = Tensor(np.asarray(a.value.sum(), dtype=a.value.dtype), (a,))

    def push(g):
        _accum(a, np.full_like(a.value, g))

    out._push = push
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.value, 0), (a,))

    def push(g):
        _accum(a, g * (a.value > 0))

    out._push = push
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    out = Tensor(y, (a,))

    def push(g):
        _accum(a, g * (1.0 - y * y))

    out._push = push
    return out


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # piecewise form stays finite for large |v|
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.value)
    out = Tensor(y, (a,))

    def push(g):
        _accum(a, g * y * (1.0 - y))

    out._push = push
    return out


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along one axis; other extents must agree."""
    _require(len(parts) > 0, "concat: no parts")
    ndim = parts[0].value.ndim
    _require(-ndim <= axis < ndim, f"concat: axis {axis} out of range for ndim {ndim}")
    axis %= ndim
    lead = parts[0].value.shape
    for p in parts:
        shape = p.value.shape
        ok = len(shape) == ndim and all(
            shape[d] == lead[d] for d in range(ndim) if d != axis
        )
        _require(ok, f"concat: shape {shape} incompatible with {lead} along axis {axis}")
    out = Tensor(np.concatenate([p.value for p in parts], axis=axis), tuple(parts))
    sizes = [p.value.shape[axis] for p in parts]

    def push(g):
        ofs = 0
        index = [slice(None)] * ndim
        for p, n in zip(parts, sizes):
            index[axis] = slice(ofs, ofs + n)
            _accum(p, g[tuple(index)])
            ofs += n

    out._push = push
    return out


def flatten(a: Tensor) -> Tensor:
    shape = a.value.shape
    out = Tensor(a.value.reshape(-1), (a,))

    def push(g):
        _accum(a, g.reshape(shape))

    out._push = push
    return out


def row(a: Tensor, index: int) -> Tensor:
    """Select one row of a matrix as a vector."""
    _require(a.value.ndim == 2, f"row: expected matrix, got shape {a.value.shape}")
    _require(0 <= index < a.value.shape[0], f"row: index {index} out of range for {a.value.shape}")
    out = Tensor(a.value[index].copy(), (a,))

    def push(g):
        full = np.zeros_like(a.value)
        full[index] = g
        _accum(a, full)

    out._push = push
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix @ matrix or matrix @ vector."""
    _require(a.value.ndim == 2, f"matmul: left operand must be a matrix, got {a.value.shape}")
    _require(b.value.ndim in (1, 2), f"matmul: right operand must be 1-d or 2-d, got {b.value.shape}")
    _require(
        a.value.shape[1] == b.value.shape[0],
        f"matmul: inner dims differ, {a.value.shape} @ {b.value.shape}",
    )
    out = Tensor(a.value @ b.value, (a, b))

    def push(g):
        if b.value.ndim == 1:
            _accum(a, np.outer(g, b.value))
            _accum(b, a.value.T @ g)
        else:
            _accum(a, g @ b.value.T)
            _accum(b, a.value.T @ g)

    out._push = push
    return out


def linear(weights: Tensor, bias: Tensor, x: Tensor) -> Tensor:
    """Affine map ``weights @ x + bias`` for a vector input."""
    _require(x.value.ndim == 1, f"linear: input must be a vector, got {x.value.shape}")
    _require(weights.value.ndim == 2, f"linear: weights must be a matrix, got {weights.value.shape}")
    _require(
        weights.value.shape[1] == x.value.shape[0],
        f"linear: weights {weights.value.shape} do not accept input {x.value.shape}",
    )
    _require(
        bias.value.shape == (weights.value.shape[0],),
        f"linear: bias {bias.value.shape} does not match output dim {weights.value.shape[0]}",
    )
    out = Tensor(weights.value @ x.value + bias.value, (weights, bias, x))

    def push(g):
        _accum(weights, np.outer(g, x.value))
        _accum(bias, g)
        _accum(x, weights.value.T @ g)

    out._push = push
    return out


def spatial_sequence(a: Tensor) -> Tensor:
    """Read a C x H x W map as H*W feature vectors in raster order."""
    _require(a.value.ndim == 3, f"spatial_sequence: expected C,H,W map, got {a.value.shape}")
    c, h, w = a.value.shape
    out = Tensor(a.value.reshape(c, h * w).T.copy(), (a,))

    def push(g):
        _accum(a, g.T.reshape(c, h, w))

    out._push = push
    return out


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    """Spatial extent after a valid-padding convolution."""
    _require(kernel >= 1 and stride >= 1, f"conv: bad kernel {kernel} or stride {stride}")
    _require(size >= kernel, f"conv: input extent {size} smaller than kernel {kernel}")
    return (size - kernel) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int) -> Tensor:
    """2-d cross-correlation, valid padding.

    ``x`` is C x H x W, ``kernels`` is F x C x k x k, ``bias`` is F.
    Output is F x H' x W' with H' = (H - k) // stride + 1.
    """
    _require(x.value.ndim == 3, f"conv2d: input must be C,H,W, got {x.value.shape}")
    _require(kernels.value.ndim == 4, f"conv2d: kernels must be F,C,k,k, got {kernels.value.shape}")
    f, kc, kh, kw = kernels.value.shape
    c, h, w = x.value.shape
    _require(kh == kw, f"conv2d: kernels must be square, got {kh}x{kw}")
    _require(kc == c, f"conv2d: kernel channels {kc} != input channels {c}")
    _require(bias.value.shape == (f,), f"conv2d: bias {bias.value.shape} != filter count {f}")
    ho = conv_output_size(h, kh, stride)
    wo = conv_output_size(w, kh, stride)

    xs = x.value
    sc, sh, sw = xs.strides
    patches = np.lib.stride_tricks.as_strided(
        xs,
        shape=(c, kh, kh, ho, wo),
        strides=(sc, sh, sw, sh * stride, sw * stride),
    )
    col = patches.reshape(c * kh * kh, ho * wo)  # copies; safe to keep
    km = kernels.value.reshape(f, c * kh * kh)
    out_val = (km @ col + bias.value[:, None]).reshape(f, ho, wo)
    out = Tensor(out_val, (x, kernels, bias))

    def push(g):
        gm = g.reshape(f, ho * wo)
        _accum(kernels, (gm @ col.T).reshape(f, c, kh, kh))
        _accum(bias, gm.sum(axis=1))
        dcol = (km.T @ gm).reshape(c, kh, kh, ho, wo)
        dx = np.zeros_like(xs)
        for u in range(kh):
            for v in range(kh):
                dx[:, u : u + (ho - 1) * stride + 1 : stride,
                      v : v + (wo - 1) * stride + 1 : stride] += dcol[:, u, v]
        _accum(x, dx)

    out._push = push
    return out


# ---------------------------------------------------------------------------
# gated recurrent cell


@dataclass
class GruCellParams:
    """Weights of one gated recurrent cell.

    The three gate blocks are stacked row-wise in the order update,
    reset, candidate: ``input_weights`` is 3h x d, ``hidden_weights``
    is 3h x h and ``biases`` is 3h.
    """

    input_weights: Parameter
    hidden_weights: Parameter
    biases: Parameter

    def __post_init__(self):
        wi, wh, b = self.input_weights.value, self.hidden_weights.value, self.biases.value
        _require(wi.ndim == 2 and wi.shape[0] % 3 == 0,
                 f"gru: input weights must be 3h x d, got {wi.shape}")
        h = wi.shape[0] // 3
        _require(wh.shape == (3 * h, h),
                 f"gru: hidden weights must be {(3 * h, h)}, got {wh.shape}")
        _require(b.shape == (3 * h,), f"gru: biases must be ({3 * h},), got {b.shape}")

    @property
    def input_dim(self) -> int:
        return self.input_weights.value.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.input_weights.value.shape[0] // 3

    def parameters(self) -> list[Parameter]:
        return [self.input_weights, self.hidden_weights, self.biases]

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int, dtype=np.float32, prefix="gru"):
        return cls(
            Parameter(np.zeros((3 * hidden_dim, input_dim), dtype), f"{prefix}.input_weights"),
            Parameter(np.zeros((3 * hidden_dim, hidden_dim), dtype), f"{prefix}.hidden_weights"),
            Parameter(np.zeros(3 * hidden_dim, dtype), f"{prefix}.biases"),
        )


def gru_cell(x: Tensor, h: Tensor, cell: GruCellParams) -> Tensor:
    """One step of a gated recurrent cell, as a single fused node.

    update   z = sigmoid(Wz x + Uz h + bz)
    reset    r = sigmoid(Wr x + Ur h + br)
    cand     c = tanh(Wc x + Uc (r*h) + bc)
    output   h' = (1 - z) * h + z * c
    """
    hd = cell.hidden_dim
    _require(x.value.shape == (cell.input_dim,),
             f"gru_cell: input {x.value.shape} != ({cell.input_dim},)")
    _require(h.value.shape == (hd,), f"gru_cell: state {h.value.shape} != ({hd},)")

    wi, wh, b = cell.input_weights, cell.hidden_weights, cell.biases
    xv, hv = x.value, h.value
    gi = wi.value @ xv + b.value
    rec_zr = wh.value[: 2 * hd] @ hv
    z = _sigmoid(gi[:hd] + rec_zr[:hd])
    r = _sigmoid(gi[hd : 2 * hd] + rec_zr[hd:])
    rh = r * hv
    c = np.tanh(gi[2 * hd :] + wh.value[2 * hd :] @ rh)
    out = Tensor((1.0 - z) * hv + z * c, (x, h, wi, wh, b))

    def push(g):
        dz = g * (c - hv)
        dh = g * (1.0 - z)
        dci = (g * z) * (1.0 - c * c)
        drh = wh.value[2 * hd :].T @ dci
        dr = drh * hv
        dh += drh * r
        dri = dr * r * (1.0 - r)
        dzi = dz * z * (1.0 - z)
        dpre = np.concatenate([dzi, dri, dci])
        _accum(wi, np.outer(dpre, xv))
        _accum(b, dpre)
        dwh = np.empty_like(wh.value)
        dwh[:hd] = np.outer(dzi, hv)
        dwh[hd : 2 * hd] = np.outer(dri, hv)
        dwh[2 * hd :] = np.outer(dci, rh)
        _accum(wh, dwh)
        dh += wh.value[: 2 * hd].T @ np.concatenate([dzi, dri])
        _accum(h, dh)
        _accum(x, wi.value.T @ dpre)

    out._push = push
    return out


# ---------------------------------------------------------------------------
# classification head


def softmax_cross_entropy(logits: Tensor, label: int) -> tuple[Tensor, Tensor]:
    """Softmax probabilities and cross entropy against an integer label.

    Stable under large logits (max subtraction).  Returns the
    probability vector node and the scalar loss node.
    """
    v = logits.value
    _require(v.ndim == 1, f"softmax_cross_entropy: logits must be a vector, got {v.shape}")
    _require(isinstance(label, (int, np.integer)) and 0 <= label < v.shape[0],
             f"softmax_cross_entropy: label {label} out of range for {v.shape[0]} classes")
    m = v.max()
    e = np.exp(v - m)
    se = e.sum()
    p = e / se
    probs = Tensor(p, (logits,))

    def push_probs(g):
        _accum(logits, p * (g - float(g @ p)))

    probs._push = push_probs

    # grouped so an exact common shift of the logits cancels before the log
    loss = Tensor(np.asarray(np.log(se) - (v[label] - m), dtype=v.dtype), (logits,))

    def push_loss(g):
        d = p.copy()
        d[label] -= 1.0
        _accum(logits, d * g)

    loss._push = push_loss
    return probs, loss


# ---------------------------------------------------------------------------
# backward pass and gradient utilities


def _topo_order(root: Tensor) -> list[Tensor]:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents precede consumers


def backward(root: Tensor):
    """Seed a scalar node with gradient 1 and propagate to all leaves."""
    _require(root.value.size == 1, f"backward: root must be scalar, got shape {root.value.shape}")
    if root.grad is None:
        root.grad = np.ones_like(root.value)
    for node in reversed(_topo_order(root)):
        if node._push is not None and node.grad is not None:
            node._push(node.grad)


def zero_grads(params):
    for p in params:
        p.reset_grad()


def global_grad_norm(params) -> float:
    acc = 0.0
    for p in params:
        g = p.grad
        if g is not None:
            acc += float((g.astype(np.float64) ** 2).sum())
    return float(np.sqrt(acc))


def finite_difference_check(loss_fn, params, step: float = 1e-3) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn`` rebuilds the loss graph from the current parameter
    values and returns the scalar node.  Every component of every
    parameter is perturbed by +/-step.  Returns the worst relative
    error ``|a - e| / max(1e-8, |a| + |e|)``.  Demands float64
    parameters and a deterministic loss.
    """
    params = list(params)
    _require(len(params) > 0, "finite_difference_check: no parameters")
    for p in params:
        _require(
            p.value.dtype == np.float64,
            f"finite_difference_check: {p.name} is {p.value.dtype}, needs float64",
        )

    first = float(loss_fn().value)
    again = float(loss_fn().value)
    if first != again:
        raise NumericError(
            f"loss function is not deterministic ({first!r} vs {again!r}); "
            "finite differences would be meaningless"
        )

    zero_grads(params)
    backward(loss_fn())
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, grads in zip(params, analytic):
        for idx in np.ndindex(p.value.shape):
            orig = p.value[idx]
            p.value[idx] = orig + step
            up = float(loss_fn().value)
            p.value[idx] = orig - step
            down = float(loss_fn().value)
            p.value[idx] = orig
            estimate = (up - down) / (2.0 * step)
            a = float(grads[idx])
            rel = abs(a - estimate) / max(1e-8, abs(a) + abs(estimate))
            if rel > worst:
                worst = rel
    return worst
