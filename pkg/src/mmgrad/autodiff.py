"""Dense float64 tensors with taped reverse-mode differentiation.

Every primitive records a node on the active :class:`Tape` together with a
backward rule that is itself written in terms of these primitives.  A
backward pass run with ``retain_graph=True`` therefore appends new,
differentiable gradient nodes to the tape instead of producing detached
arrays, which is what makes losses defined on gradients trainable
(double backward).

Conventions baked in here:

* all values are 64-bit floats;
* the ReLU subgradient at exactly 0 is 0, and its second derivative is 0
  everywhere (piecewise linear);
* ``clip_min`` passes gradient only strictly above the clamp value;
* a tape and its tensors belong to one unit of execution; distinct tapes
  may run concurrently but must not share tensors mid-graph.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager

import numpy as np

__all__ = [
    "GradientWarning",
    "Node",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "bmm",
    "broadcast_to",
    "clip_min",
    "concat",
    "cosine_similarity",
    "div",
    "dot",
    "embed",
    "is_reachable",
    "l2_norm",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "narrow",
    "neg",
    "no_grad",
    "permute",
    "relu",
    "reshape",
    "scatter_rows",
    "softmax",
    "sqrt",
    "sub",
    "tensor_sum",
    "transpose",
]

# Subgradient floor used when differentiating norms at the origin.
_NORM_FLOOR = 1e-30


class GradientWarning(UserWarning):
    """Emitted when a requested gradient is unreachable from the output."""


class Node:
    """One taped operation: kind, parent handles, backward rule.

    ``parents`` holds tape indices, with ``None`` for inputs that do not
    require gradient.  ``vjp`` maps the incoming gradient tensor to one
    gradient per input (leaves carry ``vjp=None``).  Forward values needed
    by the rule are captured in the ``vjp`` closure.
    """

    __slots__ = ("op", "parents", "vjp", "generation")

    def __init__(self, op, parents, vjp, generation):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.generation = generation


class Tape:
    """Append-only record of operations, in topological order by construction.

    ``generation`` starts at 0 for forward nodes and is bumped by every
    retained backward pass, so first-order and higher-order graph segments
    can be told apart.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _ensure_leaf(self, t: "Tensor") -> int:
        """Return this tensor's node handle, registering a leaf if needed.

        A tensor carrying a handle into an older tape is re-registered as a
        leaf here; per-step tapes are rebuilt, so the old handle is stale.
        """
        if t.node is not None and t.node[0] is self:
            return t.node[1]
        idx = self._append(Node("leaf", (), None, self.generation))
        t.node = (self, idx)
        return idx


_TAPE_STACK: list[Tape] = []
_GRAD_ENABLED: list[bool] = [True]


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def no_grad():
    """Disable recording; ops executed inside return constant tensors."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


@contextmanager
def _push_tape(tape):
    _TAPE_STACK.append(tape)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


class Tensor:
    """N-dimensional float64 array, optionally attached to a tape node.

    ``data`` must be treated as read-only once the tensor has been consumed
    by an operation; only leaf parameters may be updated in place, between
    tapes.
    """

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node = None  # (Tape, index) once attached

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # Operator sugar; python scalars are wrapped as constants.
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axes=None, keepdims=False):
        return tensor_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return mean(self, axes, keepdims)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(op, data, inputs, vjp):
    """Wrap a forward result, recording a node when a tape is active."""
    tape = _active_tape()
    track = (
        _GRAD_ENABLED[-1]
        and tape is not None
        and any(t.requires_grad for t in inputs)
    )
    out = Tensor(data, requires_grad=track)
    if track:
        parents = tuple(
            tape._ensure_leaf(t) if t.requires_grad else None for t in inputs
        )
        out.node = (tape, tape._append(Node(op, parents, vjp, tape.generation)))
    return out


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


def _keepdim_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Sum a gradient back down to the shape of a broadcast input."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and g.shape[lead + i] != 1
    )
    if axes:
        g = tensor_sum(g, axes, keepdims=True)
    return reshape(g, shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _record("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _record("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0.0):
        raise ValueError("div: division by zero")

    def vjp(g):
        ga = _unbroadcast(div(g, b), a.shape)
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _record("div", a.data / b.data, (a, b), vjp)


def neg(x) -> Tensor:
    x = _as_tensor(x)

    def vjp(g):
        return (neg(g),)

    return _record("neg", -x.data, (x,), vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = Tensor((x.data > 0.0).astype(np.float64))

    def vjp(g):
        return (mul(g, mask),)

    return _record("relu", np.maximum(x.data, 0.0), (x,), vjp)


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data < 0.0):
        raise ValueError("sqrt: negative input")
    holder = []

    def vjp(g):
        return (div(g, mul(holder[0], 2.0)),)

    out = _record("sqrt", np.sqrt(x.data), (x,), vjp)
    holder.append(out)
    return out


def clip_min(x, floor: float) -> Tensor:
    """max(x, floor) with gradient passing only strictly above the floor."""
    x = _as_tensor(x)
    mask = Tensor((x.data > floor).astype(np.float64))

    def vjp(g):
        return (mul(g, mask),)

    return _record("clip_min", np.maximum(x.data, floor), (x,), vjp)


# ---------------------------------------------------------------------------
# shape movement


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ValueError(f"reshape: cannot view shape {x.shape} as {shape}")

    def vjp(g):
        return (reshape(g, x.shape),)

    return _record("reshape", x.data.reshape(shape), (x,), vjp)


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ValueError(
            f"broadcast_to: shape {x.shape} does not broadcast to {shape}"
        ) from None

    def vjp(g):
        return (_unbroadcast(g, x.shape),)

    return _record("broadcast_to", data, (x,), vjp)


def permute(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def vjp(g):
        return (permute(g, inverse),)

    return _record("permute", np.transpose(x.data, axes), (x,), vjp)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"transpose: expected a matrix, got shape {x.shape}")
    return permute(x, (1, 0))


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    x = _as_tensor(x)
    axis = axis % x.ndim
    dim = x.shape[axis]
    if not (0 <= start and length > 0 and start + length <= dim):
        raise ValueError(
            f"narrow: slice [{start}:{start + length}] out of bounds for axis "
            f"{axis} of shape {x.shape}"
        )
    index = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(x.ndim)
    )

    def vjp(g):
        pieces = []
        if start > 0:
            before = list(x.shape)
            before[axis] = start
            pieces.append(Tensor(np.zeros(before)))
        pieces.append(g)
        if start + length < dim:
            after = list(x.shape)
            after[axis] = dim - start - length
            pieces.append(Tensor(np.zeros(after)))
        if len(pieces) == 1:
            return (g,)
        return (concat(pieces, axis),)

    return _record("narrow", x.data[index], (x,), vjp)


def concat(xs, axis: int) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat: need at least one tensor")
    ndim = xs[0].ndim
    axis = axis % ndim
    for t in xs[1:]:
        if t.ndim != ndim or any(
            i != axis and t.shape[i] != xs[0].shape[i] for i in range(ndim)
        ):
            raise ValueError(
                f"concat: shapes {xs[0].shape} and {t.shape} differ off axis {axis}"
            )
    sizes = [t.shape[axis] for t in xs]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        return tuple(
            narrow(g, axis, int(offsets[i]), sizes[i]) for i in range(len(xs))
        )

    return _record("concat", np.concatenate([t.data for t in xs], axis), tuple(xs), vjp)


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(x, axes=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    axes = _normalize_axes(axes, x.ndim)
    kshape = _keepdim_shape(x.shape, axes)

    def vjp(g):
        if not keepdims:
            g = reshape(g, kshape)
        return (broadcast_to(g, x.shape),)

    data = np.sum(x.data, axis=axes, keepdims=keepdims)
    return _record("sum", data, (x,), vjp)


def mean(x, axes=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    naxes = _normalize_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in naxes])) if x.ndim else 1
    return mul(tensor_sum(x, axes, keepdims), 1.0 / count)


def l2_norm(x, axes=None, keepdims=False) -> Tensor:
    """Euclidean norm over the given axes (all axes by default).

    The backward rule uses x / max(norm, floor), so the subgradient at the
    origin is 0 rather than NaN.
    """
    x = _as_tensor(x)
    naxes = _normalize_axes(axes, x.ndim)
    kshape = _keepdim_shape(x.shape, naxes)
    data = np.sqrt(np.sum(x.data * x.data, axis=naxes, keepdims=keepdims))
    holder = []

    def vjp(g):
        out = holder[0]
        if not keepdims:
            g = reshape(g, kshape)
            out = reshape(out, kshape)
        return (mul(g, div(x, clip_min(out, _NORM_FLOOR))),)

    out = _record("l2_norm", data, (x,), vjp)
    holder.append(out)
    return out


# ---------------------------------------------------------------------------
# contractions


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _record("matmul", a.data @ b.data, (a, b), vjp)


def bmm(a, b) -> Tensor:
    """Batched matrix product: (N, r, k) @ (N, k, c) -> (N, r, c)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if (
        a.ndim != 3
        or b.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise ValueError(f"bmm: shapes {a.shape} and {b.shape} do not conform")

    def vjp(g):
        return bmm(g, permute(b, (0, 2, 1))), bmm(permute(a, (0, 2, 1)), g)

    return _record("bmm", a.data @ b.data, (a, b), vjp)


def dot(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dot: shapes {a.shape} and {b.shape} do not conform")
    return tensor_sum(mul(a, b))


# ---------------------------------------------------------------------------
# table lookup


def embed(table, ids) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)
    if table.ndim != 2:
        raise ValueError(f"embed: table must be 2-d, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embed: id out of range")

    def vjp(g):
        return (scatter_rows(g, ids, table.shape[0]),)

    return _record("embed", table.data[ids], (table,), vjp)


def scatter_rows(src, ids, num_rows: int) -> Tensor:
    """Adjoint of :func:`embed`: scatter-add rows of src at the given ids."""
    src = _as_tensor(src)
    ids = np.asarray(ids, dtype=np.intp)
    if src.shape[: ids.ndim] != ids.shape:
        raise ValueError(
            f"scatter_rows: ids shape {ids.shape} does not prefix src shape {src.shape}"
        )
    width = src.shape[ids.ndim :]
    data = np.zeros((num_rows,) + width)
    np.add.at(data, ids.reshape(-1), src.data.reshape((-1,) + width))

    def vjp(g):
        return (embed(g, ids),)

    return _record("scatter_rows", data, (src,), vjp)


# ---------------------------------------------------------------------------
# composites used throughout the model


def softmax(x, axis=-1) -> Tensor:
    x = _as_tensor(x)
    axis = axis % x.ndim
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)
    holder = []

    def vjp(g):
        s = holder[0]
        inner = tensor_sum(mul(g, s), (axis,), keepdims=True)
        return (mul(s, sub(g, inner)),)

    out = _record("softmax", data, (x,), vjp)
    holder.append(out)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ValueError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match "
            f"input width {width}"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    centered = sub(x, mean(x, -1, keepdims=True))
    variance = mean(mul(centered, centered), -1, keepdims=True)
    normed = div(centered, sqrt(add(variance, eps)))
    return add(mul(normed, gain), bias)


def cosine_similarity(a, b, eps: float = 1e-12) -> Tensor:
    """a.b / max(|a||b|, eps) for two vectors of equal length."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(
            f"cosine_similarity: shapes {a.shape} and {b.shape} do not conform"
        )
    if a.size == 0:
        raise ValueError("cosine_similarity: zero-length vectors")
    if eps <= 0:
        raise ValueError("cosine_similarity: eps must be positive")
    denom = clip_min(mul(l2_norm(a), l2_norm(b)), eps)
    return div(dot(a, b), denom)


# ---------------------------------------------------------------------------
# backward


def is_reachable(output: Tensor, source: Tensor) -> bool:
    """True when ``source`` is an ancestor of ``output`` on the same tape."""
    if output.node is None or source.node is None:
        return False
    tape, out_idx = output.node
    if source.node[0] is not tape:
        return False
    src_idx = source.node[1]
    if src_idx > out_idx:
        return False
    nodes = tape.nodes
    marked = np.zeros(out_idx + 1, dtype=bool)
    marked[out_idx] = True
    for i in range(out_idx, src_idx - 1, -1):
        if not marked[i]:
            continue
        for p in nodes[i].parents:
            if p is not None:
                marked[p] = True
    return bool(marked[src_idx])


def backward(output: Tensor, wrt, retain_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar output with respect to each tensor in ``wrt``.

    With ``retain_graph=True`` the vector-Jacobian products are recorded on
    the same tape (under a bumped generation number), so the returned
    gradients can themselves be differentiated.  Unreachable targets produce
    zeros and a :class:`GradientWarning`.

    Only the subgraph between ``wrt`` and ``output`` is traversed, so
    requesting the gradient at an intermediate does not pay for (or record)
    the rest of the graph below it.
    """
    wrt = list(wrt)
    if output.data.size != 1:
        raise ValueError(f"backward: output must be scalar, got shape {output.shape}")
    if output.node is None:
        raise ValueError("backward: output is not attached to a tape")
    tape, out_idx = output.node
    nodes = tape.nodes

    wrt_idx = [
        t.node[1] if (t.node is not None and t.node[0] is tape) else None
        for t in wrt
    ]

    # ancestors of the output
    ancestor = np.zeros(out_idx + 1, dtype=bool)
    ancestor[out_idx] = True
    for i in range(out_idx, -1, -1):
        if not ancestor[i]:
            continue
        for p in nodes[i].parents:
            if p is not None:
                ancestor[p] = True

    # descendants of the requested tensors
    descendant = np.zeros(out_idx + 1, dtype=bool)
    for idx in wrt_idx:
        if idx is not None and idx <= out_idx:
            descendant[idx] = True
    for i in range(out_idx + 1):
        if descendant[i]:
            continue
        for p in nodes[i].parents:
            if p is not None and p <= out_idx and descendant[p]:
                descendant[i] = True
                break

    needed = ancestor & descendant

    if retain_graph:
        tape.generation += 1
        ctx = _push_tape(tape)
    else:
        ctx = no_grad()

    wanted = {idx for idx in wrt_idx if idx is not None}
    collected: dict[int, Tensor] = {}
    grads: dict[int, Tensor] = {out_idx: Tensor(np.ones_like(output.data))}
    with ctx:
        for i in range(out_idx, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            if i in wanted:
                collected[i] = g
            node = nodes[i]
            if node.vjp is None:
                continue
            if not any(p is not None and needed[p] for p in node.parents):
                continue
            parent_grads = node.vjp(g)
            for p, pg in zip(node.parents, parent_grads):
                if p is None or pg is None or not needed[p]:
                    continue
                held = grads.get(p)
                grads[p] = pg if held is None else add(held, pg)

    results = []
    for t, idx in zip(wrt, wrt_idx):
        got = collected.get(idx) if idx is not None else None
        if got is None:
            warnings.warn(
                "backward: target is unreachable from the output; returning zeros",
                GradientWarning,
                stacklevel=2,
            )
            got = Tensor(np.zeros_like(t.data))
        results.append(got)
    return results
