"""Dense float64 tensors with reverse-mode gradient accumulation.

The engine is deliberately small: values are row-major numpy arrays, a
``Node`` wraps one value together with its accumulated gradient, and every
operation that participates in differentiation builds the graph through
closures.  ``backward`` walks the graph once in reverse topological order
and *adds* this pass's gradient into each node, so calling it twice without
zeroing doubles every gradient exactly.

Only the broadcasting actually needed is supported: elementwise ops accept
equal shapes or a scalar paired with an array, nothing more.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DataDomainError, NumericalError, ShapeError

# An Array is any C-contiguous float64 ndarray; ops normalize inputs with
# as_array so downstream code can rely on dtype and layout.
Array = np.ndarray


def as_array(x) -> Array:
    """Coerce ``x`` to a C-contiguous float64 ndarray, preserving 0-d shape."""
    a = np.asarray(x, dtype=np.float64)
    if not a.flags["C_CONTIGUOUS"]:
        a = np.ascontiguousarray(a)
    return a


class Node:
    """One value in the computation graph.

    Attributes:
        value: the forward result, a float64 ndarray.
        grad: accumulated gradient of the same shape, allocated lazily.
        requires_grad: whether gradients flow to (or through) this node.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad=False, parents=(), vjp=None):
        self.value = as_array(value)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def detach(self) -> Array:
        """A copy of the value with no graph attached."""
        return self.value.copy()

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars and arrays are lifted to constant nodes.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def constant(x) -> Node:
    """A graph leaf that never receives gradients."""
    return Node(x, requires_grad=False)


def parameter(x) -> Node:
    """A graph leaf that accumulates gradients (a trainable tensor)."""
    return Node(x, requires_grad=True)


def zero_grads(nodes):
    for n in nodes:
        n.zero_grad()


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents, vjp) -> Node:
    requires = any(p.requires_grad for p in parents)
    return Node(value, requires_grad=requires, parents=parents if requires else (),
                vjp=vjp if requires else None)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _check_elementwise(a: Node, b: Node, op: str):
    if a.value.shape != b.value.shape and a.value.size != 1 and b.value.size != 1:
        raise ShapeError(
            f"{op}: incompatible shapes {a.value.shape} and {b.value.shape} "
            "(only equal shapes or scalar-with-array are supported)")


def _unbroadcast(g: Array, shape) -> Array:
    """Reduce an upstream gradient back to a scalar operand's shape."""
    if g.shape == tuple(shape):
        return g
    return as_array(g.sum()).reshape(shape)


def add(a: Node, b: Node) -> Node:
    _check_elementwise(a, b, "add")
    out = a.value + b.value

    def vjp(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))

    return _make(out, (a, b), vjp)


def sub(a: Node, b: Node) -> Node:
    _check_elementwise(a, b, "sub")
    out = a.value - b.value

    def vjp(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))

    return _make(out, (a, b), vjp)


def mul(a: Node, b: Node) -> Node:
    _check_elementwise(a, b, "mul")
    out = a.value * b.value

    def vjp(g):
        return (_unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape))

    return _make(out, (a, b), vjp)


def div(a: Node, b: Node) -> Node:
    _check_elementwise(a, b, "div")
    if np.any(b.value == 0.0):
        raise DataDomainError("div: zero denominator")
    out = a.value / b.value

    def vjp(g):
        return (_unbroadcast(g / b.value, a.value.shape),
                _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return _make(out, (a, b), vjp)


def scalar_mul(a: Node, c: float) -> Node:
    c = float(c)
    out = a.value * c

    def vjp(g):
        return (g * c,)

    return _make(out, (a,), vjp)


def relu(a: Node) -> Node:
    out = np.maximum(a.value, 0.0)
    mask = a.value > 0.0

    def vjp(g):
        return (g * mask,)

    return _make(out, (a,), vjp)


def log(a: Node) -> Node:
    if np.any(a.value <= 0.0):
        raise DataDomainError("log: input must be strictly positive")
    out = np.log(a.value)

    def vjp(g):
        return (g / a.value,)

    return _make(out, (a,), vjp)


def sqrt(a: Node) -> Node:
    if np.any(a.value < 0.0):
        raise DataDomainError("sqrt: input must be nonnegative")
    out = np.sqrt(a.value)

    def vjp(g):
        # Derivative is unbounded at exactly zero; callers keep inputs away
        # from the kink or accept the resulting inf.
        return (g * (0.5 / out),)

    return _make(out, (a,), vjp)


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    axis = tuple(int(ax) % ndim for ax in axis)
    if len(set(axis)) != len(axis):
        raise ShapeError(f"sum/mean: repeated axis in {axis}")
    return tuple(sorted(axis))


def _expand_reduced(g: Array, in_shape, axis) -> Array:
    if axis is None:
        return np.broadcast_to(g, in_shape)
    expanded = np.expand_dims(g, axis)
    return np.broadcast_to(expanded, in_shape)


def sum(a: Node, axis=None) -> Node:  # noqa: A001 - mirrors numpy's name
    axis = _normalize_axis(axis, a.value.ndim)
    out = a.value.sum(axis=axis)

    def vjp(g):
        return (as_array(_expand_reduced(g, a.value.shape, axis)),)

    return _make(out, (a,), vjp)


def mean(a: Node, axis=None) -> Node:
    axis = _normalize_axis(axis, a.value.ndim)
    if axis is None:
        count = a.value.size
    else:
        count = 1
        for ax in axis:
            count *= a.value.shape[ax]
    out = a.value.sum(axis=axis) / count

    def vjp(g):
        return (as_array(_expand_reduced(g / count, a.value.shape, axis)),)

    return _make(out, (a,), vjp)


def reshape(a: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.value.size:
        raise ShapeError(f"reshape: cannot view size {a.value.size} as {shape}")
    out = a.value.reshape(shape)

    def vjp(g):
        return (g.reshape(a.value.shape),)

    return _make(out, (a,), vjp)


def select(a: Node, index: int) -> Node:
    """Pick one slice along axis 0 (``a[index]``), differentiable."""
    index = int(index)
    if not 0 <= index < a.value.shape[0]:
        raise ShapeError(f"select: index {index} out of range for {a.value.shape}")
    out = a.value[index].copy()

    def vjp(g):
        full = np.zeros_like(a.value)
        full[index] = g
        return (full,)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# matmul / convolution / upsampling
# ---------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError("matmul: both operands must be 2-D")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul: inner extents differ ({a.value.shape} @ {b.value.shape})")
    out = a.value @ b.value

    def vjp(g):
        return (g @ b.value.T, a.value.T @ g)

    return _make(out, (a, b), vjp)


def _im2col(x4: Array, k: int, stride: int, padding: int):
    """Unfold [N,C,H,W] into [N, C*k*k, Hout*Wout] patch columns."""
    n, c, h, w = x4.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(
            f"conv2d: kernel {k} exceeds padded input extent "
            f"{h}x{w} with padding {padding}")
    hout = (h + 2 * padding - k) // stride + 1
    wout = (w + 2 * padding - k) // stride + 1
    if padding:
        x4 = np.pad(x4, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x4, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]       # [N,C,Hout,Wout,k,k]
    cols = windows.transpose(0, 1, 4, 5, 2, 3)              # [N,C,k,k,Hout,Wout]
    cols = as_array(cols).reshape(n, c * k * k, hout * wout)
    return cols, hout, wout, x4.shape


def _col2im(dcols: Array, x4_padded_shape, k: int, stride: int, padding: int,
            hout: int, wout: int) -> Array:
    n, c = x4_padded_shape[0], x4_padded_shape[1]
    dxp = np.zeros(x4_padded_shape, dtype=np.float64)
    dcols = dcols.reshape(n, c, k, k, hout, wout)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * hout:stride, j:j + stride * wout:stride] \
                += dcols[:, :, i, j]
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv2d(x: Node, kernels: Node, bias: Node | None = None,
           stride: int = 1, padding: int = 0) -> Node:
    """2-D cross-correlation.

    ``x`` is [C,H,W] or batched [N,C,H,W]; ``kernels`` is [F,C,k,k] with odd
    square k; ``bias`` is an optional [F] vector added per output channel.
    Gradients flow to the input, the kernels, and the bias.
    """
    stride = int(stride)
    padding = int(padding)
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    if kernels.value.ndim != 4 or kernels.value.shape[2] != kernels.value.shape[3]:
        raise ShapeError("conv2d: kernels must be [F,C,k,k] with square k")
    k = kernels.value.shape[2]
    if k % 2 == 0:
        raise ShapeError("conv2d: kernel extent must be odd")
    single = x.value.ndim == 3
    if single:
        x4 = x.value[None]
    elif x.value.ndim == 4:
        x4 = x.value
    else:
        raise ShapeError("conv2d: input must be [C,H,W] or [N,C,H,W]")
    f, cin = kernels.value.shape[0], kernels.value.shape[1]
    if x4.shape[1] != cin:
        raise ShapeError(
            f"conv2d: input has {x4.shape[1]} channels, kernels expect {cin}")
    if bias is not None and bias.value.shape != (f,):
        raise ShapeError(f"conv2d: bias must have shape ({f},)")

    cols, hout, wout, padded_shape = _im2col(x4, k, stride, padding)
    w2d = kernels.value.reshape(f, cin * k * k)
    out = np.matmul(w2d[None], cols)                        # [N,F,L]
    out = out.reshape(x4.shape[0], f, hout, wout)
    if bias is not None:
        out = out + bias.value[None, :, None, None]
    if single:
        out = out[0]

    def vjp(g):
        g4 = g[None] if single else g
        g2 = g4.reshape(x4.shape[0], f, hout * wout)
        dw = np.einsum("nfl,ncl->fc", g2, cols).reshape(kernels.value.shape)
        dcols = np.matmul(w2d.T[None], g2)                  # [N,Ckk,L]
        dx4 = _col2im(dcols, padded_shape, k, stride, padding, hout, wout)
        dx = dx4[0] if single else dx4
        if bias is None:
            return (dx, dw)
        return (dx, dw, g4.sum(axis=(0, 2, 3)))

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(out, parents, vjp)


_INTERP_CACHE: dict[tuple[int, int], Array] = {}


def _interp_matrix(n_in: int, n_out: int) -> Array:
    """Dense [n_out, n_in] bilinear interpolation matrix (half-pixel centers)."""
    key = (n_in, n_out)
    m = _INTERP_CACHE.get(key)
    if m is None:
        m = np.zeros((n_out, n_in), dtype=np.float64)
        scale = n_in / n_out
        for i in range(n_out):
            src = (i + 0.5) * scale - 0.5
            src = min(max(src, 0.0), float(n_in - 1))
            i0 = int(np.floor(src))
            i1 = min(i0 + 1, n_in - 1)
            frac = src - i0
            m[i, i0] += 1.0 - frac
            m[i, i1] += frac
        _INTERP_CACHE[key] = m
    return m


def bilinear_upsample(a: Node, out_hw) -> Node:
    """Bilinearly resize the last two axes of [C,h,w] or [N,C,h,w] to ``out_hw``.

    Interpolation uses half-pixel sample centers with edge clamping, so a
    constant map stays constant at any size.
    """
    hout, wout = (int(out_hw[0]), int(out_hw[1]))
    if hout < 1 or wout < 1:
        raise ShapeError("bilinear_upsample: output extents must be positive")
    if a.value.ndim not in (3, 4):
        raise ShapeError("bilinear_upsample: input must be [C,h,w] or [N,C,h,w]")
    h, w = a.value.shape[-2], a.value.shape[-1]
    my = _interp_matrix(h, hout)
    mx = _interp_matrix(w, wout)
    out = np.matmul(np.matmul(my, a.value), mx.T)

    def vjp(g):
        return (np.matmul(np.matmul(my.T, g), mx),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# SPD linear solves (value-level, not differentiable)
# ---------------------------------------------------------------------------

def spd_cholesky(a: Array) -> Array:
    """Lower-triangular Cholesky factor of a symmetric positive-definite matrix."""
    a = as_array(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"spd_cholesky: matrix must be square, got {a.shape}")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-10 * max(scale, 1.0)):
        raise NumericalError("spd_cholesky: matrix is not symmetric")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        cond = float(np.linalg.cond(a))
        raise NumericalError(
            f"spd_cholesky: factorization failed; matrix is not positive "
            f"definite (condition estimate {cond:.3e})") from exc


def solve_triangular_lower(l: Array, b: Array) -> Array:
    """Solve L x = b for lower-triangular L; b may be a vector or matrix."""
    n = l.shape[0]
    x = np.zeros_like(as_array(b))
    for i in range(n):
        x[i] = (b[i] - l[i, :i] @ x[:i]) / l[i, i]
    return x


def solve_triangular_upper(u: Array, b: Array) -> Array:
    """Solve U x = b for upper-triangular U; b may be a vector or matrix."""
    n = u.shape[0]
    x = np.zeros_like(as_array(b))
    for i in range(n - 1, -1, -1):
        x[i] = (b[i] - u[i, i + 1:] @ x[i + 1:]) / u[i, i]
    return x


def cholesky_solve(l: Array, b: Array) -> Array:
    """Solve A x = b given the lower Cholesky factor L of A."""
    return solve_triangular_upper(l.T, solve_triangular_lower(l, b))


def solve_spd(a: Array, b: Array) -> Array:
    """Solve A X = B for symmetric positive-definite A via Cholesky.

    ``b`` may be a vector [n] or a matrix [n,m].  Raises NumericalError with
    a condition diagnostic when the factorization fails.
    """
    a = as_array(a)
    b = as_array(b)
    if b.shape[0] != a.shape[0]:
        raise ShapeError(
            f"solve_spd: right-hand side rows {b.shape} do not match {a.shape}")
    return cholesky_solve(spd_cholesky(a), b)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(root: Node):
    """Accumulate d(root)/d(node) into ``grad`` for every requires_grad ancestor.

    ``root`` must hold a single scalar.  Each call computes one full fresh
    pass and adds it into the persistent ``grad`` buffers, so two calls on
    the same graph double every gradient exactly.
    """
    if root.value.size != 1:
        raise ContractError(
            f"backward: root must be scalar, got shape {root.value.shape}")
    if not root.requires_grad:
        return

    topo: list[Node] = []
    visited = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    local: dict[int, Array] = {id(root): np.ones_like(root.value)}
    for node in reversed(topo):
        g = local.get(id(node))
        if g is None or node._vjp is None:
            continue
        contributions = node._vjp(g)
        for parent, contrib in zip(node._parents, contributions):
            if not parent.requires_grad or contrib is None:
                continue
            acc = local.get(id(parent))
            if acc is None:
                local[id(parent)] = as_array(contrib).copy()
            else:
                acc += contrib

    for node in topo:
        g = local.get(id(node))
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
        node.grad += g
