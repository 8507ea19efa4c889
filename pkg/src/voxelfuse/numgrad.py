"""Reverse-mode autodiff over dense float64 numpy arrays.

Exactly the tensor operations the fusion pipeline needs, nothing more.
Shapes are explicit: the only broadcast anywhere is the row-wise bias add.
Gradients accumulate with += so shared parameters work; callers zero grads
between steps. Graph evaluation is deterministic, so identical inputs and
seeds produce bit-identical outputs. `grad_check` (central finite
differences) is the verification oracle for every differentiable op.

Graphs are single-thread-confined: a Value must not be shared across
threads while a backward pass may run.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateVectorError, NumericError, ShapeError

Array = np.ndarray

NORM_EPS = 1e-12


class Node:
    """Backward rule: parent Values plus a closure that adds into their grads."""

    __slots__ = ("parents", "backward")

    def __init__(self, parents: tuple["Value", ...], backward: Callable[[Array], None]):
        self.parents = parents
        self.backward = backward


class Value:
    """A dense f64 tensor tracked in an acyclic computation graph.

    Leaf Values (node is None) are inputs or parameters. `grad` stays None
    until a backward pass reaches the Value, then holds an accumulated
    same-shape array.
    """

    __slots__ = ("data", "grad", "node")

    def __init__(self, data, node: Node | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar output; grads accumulate into parents."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _topo_order(self)
        self.accumulate(np.ones_like(self.data))
        for v in reversed(order):
            if v.node is not None:
                for p in v.node.parents:
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                v.node.backward(v.grad)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar Value of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, leaf={self.node is None})"

    # Operator sugar. Scalars and same-shape ndarrays act as constants.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Value) else add_const(self, other)

    def __radd__(self, other):
        return add_const(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Value) else add_const(self, -np.asarray(other))

    def __rsub__(self, other):
        return add_const(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Value) else mul_const(self, other)

    def __rmul__(self, other):
        return mul_const(self, other)

    def __truediv__(self, other):
        if isinstance(other, Value):
            raise ContractError("Value/Value division is not provided; divide by a constant")
        return mul_const(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _topo_order(root: Value) -> list[Value]:
    # Iterative post-order: parents appear before dependents.
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        v, expanded = stack.pop()
        if expanded:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        if v.node is not None:
            for p in v.node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def _require_same_shape(a: Value, b: Value, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _const_like(x: Value, c) -> Array:
    arr = np.asarray(c, dtype=np.float64)
    if arr.shape not in ((), x.shape):
        raise ShapeError(f"constant of shape {arr.shape} does not match Value of shape {x.shape}")
    return arr


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Value, b: Value) -> Value:
    _require_same_shape(a, b, "add")
    out = Value(a.data + b.data)

    def backward(g: Array) -> None:
        a.accumulate(g)
        b.accumulate(g)

    out.node = Node((a, b), backward)
    return out


def add_const(x: Value, c) -> Value:
    carr = _const_like(x, c)
    out = Value(x.data + carr)
    out.node = Node((x,), lambda g: x.accumulate(g))
    return out


def sub(a: Value, b: Value) -> Value:
    _require_same_shape(a, b, "sub")
    out = Value(a.data - b.data)

    def backward(g: Array) -> None:
        a.accumulate(g)
        b.accumulate(-g)

    out.node = Node((a, b), backward)
    return out


def neg(x: Value) -> Value:
    out = Value(-x.data)
    out.node = Node((x,), lambda g: x.accumulate(-g))
    return out


def mul(a: Value, b: Value) -> Value:
    _require_same_shape(a, b, "mul")
    out = Value(a.data * b.data)

    def backward(g: Array) -> None:
        a.accumulate(g * b.data)
        b.accumulate(g * a.data)

    out.node = Node((a, b), backward)
    return out


def mul_const(x: Value, c) -> Value:
    carr = _const_like(x, c)
    out = Value(x.data * carr)
    out.node = Node((x,), lambda g: x.accumulate(g * carr))
    return out


def relu(x: Value) -> Value:
    out = Value(np.maximum(x.data, 0.0))
    mask = x.data > 0.0
    out.node = Node((x,), lambda g: x.accumulate(g * mask))
    return out


def vlog(x: Value) -> Value:
    if np.any(x.data <= 0.0):
        raise NumericError("log of a non-positive value")
    out = Value(np.log(x.data))
    out.node = Node((x,), lambda g: x.accumulate(g / x.data))
    return out


def sigmoid(x: Value) -> Value:
    d = x.data
    s = np.where(d >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Value(s)
    out.node = Node((x,), lambda g: x.accumulate(g * s * (1.0 - s)))
    return out


def pow_const(x: Value, p: float) -> Value:
    p = float(p)
    if p == 0.0:
        out = Value(np.ones_like(x.data))
        out.node = Node((x,), lambda g: x.accumulate(np.zeros_like(x.data)))
        return out
    out = Value(x.data ** p)

    def backward(g: Array) -> None:
        x.accumulate(g * p * x.data ** (p - 1.0))

    out.node = Node((x,), backward)
    return out


def vabs(x: Value) -> Value:
    out = Value(np.abs(x.data))
    out.node = Node((x,), lambda g: x.accumulate(g * np.sign(x.data)))
    return out


def clip(x: Value, lo: float, hi: float) -> Value:
    """Clamp elementwise; gradient passes only through unclamped entries."""
    out = Value(np.clip(x.data, lo, hi))
    mask = (x.data > lo) & (x.data < hi)
    out.node = Node((x,), lambda g: x.accumulate(g * mask))
    return out


def where_mask(mask: Array, a: Value, b: Value) -> Value:
    """Select a where mask else b; mask is a constant boolean array."""
    _require_same_shape(a, b, "where_mask")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"where_mask: mask shape {mask.shape} vs operand shape {a.shape}")
    out = Value(np.where(mask, a.data, b.data))

    def backward(g: Array) -> None:
        a.accumulate(g * mask)
        b.accumulate(g * ~mask)

    out.node = Node((a, b), backward)
    return out


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def vsum(x: Value) -> Value:
    # np.sum uses pairwise summation, so the reduction order is fixed.
    out = Value(np.sum(x.data))

    def backward(g: Array) -> None:
        x.accumulate(np.full_like(x.data, float(g)))

    out.node = Node((x,), backward)
    return out


def vmean(x: Value) -> Value:
    if x.data.size == 0:
        raise ContractError("mean of an empty Value")
    n = x.data.size
    out = Value(np.sum(x.data) / n)

    def backward(g: Array) -> None:
        x.accumulate(np.full_like(x.data, float(g) / n))

    out.node = Node((x,), backward)
    return out


def sum_rows(x: Value) -> Value:
    """Row sums of a 2-D Value: (m, n) -> (m,)."""
    if x.ndim != 2:
        raise ShapeError(f"sum_rows needs a 2-D Value, got shape {x.shape}")
    out = Value(x.data.sum(axis=1))

    def backward(g: Array) -> None:
        x.accumulate(np.repeat(g[:, None], x.shape[1], axis=1))

    out.node = Node((x,), backward)
    return out


def reshape(x: Value, shape: Sequence[int]) -> Value:
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    out = Value(data)
    out.node = Node((x,), lambda g: x.accumulate(g.reshape(x.shape)))
    return out


def concat_cols(values: Sequence[Value]) -> Value:
    """Concatenate 2-D Values along columns."""
    if not values:
        raise ContractError("concat_cols of an empty sequence")
    rows = values[0].shape[0] if values[0].ndim == 2 else None
    for v in values:
        if v.ndim != 2 or v.shape[0] != rows:
            raise ShapeError(f"concat_cols: incompatible shapes {[v.shape for v in values]}")
    out = Value(np.concatenate([v.data for v in values], axis=1))
    offsets = np.cumsum([0] + [v.shape[1] for v in values])

    def backward(g: Array) -> None:
        for v, lo, hi in zip(values, offsets[:-1], offsets[1:]):
            v.accumulate(g[:, lo:hi])

    out.node = Node(tuple(values), backward)
    return out


def stack_rows(values: Sequence[Value]) -> Value:
    """Stack equal-length 1-D Values into a (k, n) matrix."""
    if not values:
        raise ContractError("stack_rows of an empty sequence")
    n = values[0].shape[0] if values[0].ndim == 1 else None
    for v in values:
        if v.ndim != 1 or v.shape[0] != n:
            raise ShapeError(f"stack_rows: incompatible shapes {[v.shape for v in values]}")
    out = Value(np.stack([v.data for v in values], axis=0))

    def backward(g: Array) -> None:
        for i, v in enumerate(values):
            v.accumulate(g[i])

    out.node = Node(tuple(values), backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Value, b: Value) -> Value:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = Value(a.data @ b.data)

    def backward(g: Array) -> None:
        a.accumulate(g @ b.data.T)
        b.accumulate(a.data.T @ g)

    out.node = Node((a, b), backward)
    return out


def transpose(x: Value) -> Value:
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D Value, got shape {x.shape}")
    out = Value(x.data.T.copy())
    out.node = Node((x,), lambda g: x.accumulate(g.T))
    return out


def add_bias(x: Value, b: Value) -> Value:
    """Row-broadcast bias add, the one permitted broadcast: (m, n) + (n,)."""
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.shape} and {b.shape} are incompatible")
    out = Value(x.data + b.data[None, :])

    def backward(g: Array) -> None:
        x.accumulate(g)
        b.accumulate(g.sum(axis=0))

    out.node = Node((x, b), backward)
    return out


def outer(u: Value, v: Value) -> Value:
    """Outer product with the depth index first: out[i, j] = v[i] * u[j]."""
    if u.ndim != 1 or v.ndim != 1:
        raise ShapeError(f"outer needs 1-D operands, got {u.shape} and {v.shape}")
    out = Value(np.outer(v.data, u.data))

    def backward(g: Array) -> None:
        u.accumulate(g.T @ v.data)
        v.accumulate(g @ u.data)

    out.node = Node((u, v), backward)
    return out


def pixelwise_outer(feat: Value, depth: Array) -> Value:
    """Batched outer product over a pixel grid.

    feat is (W, H, C), depth a constant (W, H, R) field; the result
    (W, H, R, C) holds outer(feat[m, n], depth[m, n]) at every pixel.
    """
    if feat.ndim != 3:
        raise ShapeError(f"pixelwise_outer: feature map must be 3-D, got {feat.shape}")
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 3 or depth.shape[:2] != feat.shape[:2]:
        raise ShapeError(
            f"pixelwise_outer: pixel grids differ, features {feat.shape} vs depth {depth.shape}"
        )
    out = Value(np.einsum("whr,whc->whrc", depth, feat.data))

    def backward(g: Array) -> None:
        feat.accumulate(np.einsum("whrc,whr->whc", g, depth))

    out.node = Node((feat,), backward)
    return out


def softmax_rows(x: Value) -> Value:
    """Row-wise softmax of a 2-D Value; rows sum to 1."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D Value, got shape {x.shape}")
    if x.shape[1] == 0:
        raise ContractError("softmax_rows over zero columns")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows requires finite entries")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True, initial=-np.inf))
    s = e / e.sum(axis=1, keepdims=True)
    out = Value(s)

    def backward(g: Array) -> None:
        x.accumulate(s * (g - (g * s).sum(axis=1, keepdims=True)))

    out.node = Node((x,), backward)
    return out


def l2_normalize(x: Value) -> Value:
    """Normalize a 1-D Value to unit Euclidean length."""
    if x.ndim != 1:
        raise ShapeError(f"l2_normalize needs a 1-D Value, got shape {x.shape}")
    n = float(np.linalg.norm(x.data))
    if n <= NORM_EPS:
        raise DegenerateVectorError(f"cannot normalize vector with norm {n:.3e}")
    y = x.data / n
    out = Value(y)

    def backward(g: Array) -> None:
        x.accumulate((g - np.dot(g, y) * y) / n)

    out.node = Node((x,), backward)
    return out


def l2_normalize_rows(x: Value) -> Value:
    """Row-wise unit normalization of a 2-D Value."""
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize_rows needs a 2-D Value, got shape {x.shape}")
    norms = np.linalg.norm(x.data, axis=1)
    if np.any(norms <= NORM_EPS):
        bad = int(np.argmin(norms))
        raise DegenerateVectorError(f"row {bad} has norm {norms[bad]:.3e}, cannot normalize")
    y = x.data / norms[:, None]
    out = Value(y)

    def backward(g: Array) -> None:
        x.accumulate((g - (g * y).sum(axis=1, keepdims=True) * y) / norms[:, None])

    out.node = Node((x,), backward)
    return out


def stop_grad(x: Value) -> Value:
    """Forward identity that detaches the graph: no gradient flows upstream."""
    return Value(x.data.copy())


# ---------------------------------------------------------------------------
# gather / scatter / pooling


def gather_rows(x: Value, idx) -> Value:
    """Select rows of a 2-D Value: out[i] = x[idx[i]]."""
    if x.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D Value, got shape {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractError(f"gather_rows: index out of range for {x.shape[0]} rows")
    out = Value(x.data[idx])

    def backward(g: Array) -> None:
        np.add.at(x.grad, idx, g)

    out.node = Node((x,), backward)
    return out


def weighted_gather(x: Value, idx, weights) -> Value:
    """Weighted row gather: out[i] = sum_k weights[i, k] * x[idx[i, k]].

    idx and weights are constant (m, k) arrays; corners a caller wants to
    drop carry weight 0 (their index must still be in range).
    """
    if x.ndim != 2:
        raise ShapeError(f"weighted_gather needs a 2-D Value, got shape {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if idx.ndim != 2 or idx.shape != weights.shape:
        raise ShapeError(f"weighted_gather: index {idx.shape} vs weights {weights.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractError(f"weighted_gather: index out of range for {x.shape[0]} rows")
    out = Value(np.einsum("mkc,mk->mc", x.data[idx], weights))
    ncols = x.shape[1]

    def backward(g: Array) -> None:
        contrib = g[:, None, :] * weights[:, :, None]
        np.add.at(x.grad, idx.ravel(), contrib.reshape(-1, ncols))

    out.node = Node((x,), backward)
    return out


def scatter_rows(rows: Value, idx, n_rows: int) -> Value:
    """Place rows into a zero matrix: out[idx[i]] = rows[i]; indices unique."""
    if rows.ndim != 2:
        raise ShapeError(f"scatter_rows needs 2-D rows, got shape {rows.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != rows.shape[0]:
        raise ShapeError(f"scatter_rows: {rows.shape[0]} rows but {idx.shape} indices")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ContractError(f"scatter_rows: index out of range for {n_rows} rows")
    if np.unique(idx).size != idx.size:
        raise ContractError("scatter_rows: duplicate destination indices")
    data = np.zeros((int(n_rows), rows.shape[1]), dtype=np.float64)
    data[idx] = rows.data
    out = Value(data)
    out.node = Node((rows,), lambda g: rows.accumulate(g[idx]))
    return out


def block_max_pool(x: Value, block: tuple[int, int, int]) -> Value:
    """Max-pool a (X, Y, Z, C) Value over block-aligned cells.

    Partial edge blocks ignore the missing cells (pad acts as -inf), so a
    constant grid pools to the same constant even when negative. Gradient
    routes to the argmax cell; ties go to the lexicographically first cell.
    """
    if x.ndim != 4:
        raise ShapeError(f"block_max_pool needs a 4-D Value, got shape {x.shape}")
    bx, by, bz = (int(b) for b in block)
    if min(bx, by, bz) < 1:
        raise ContractError(f"block dimensions must be >= 1, got {block}")
    X, Y, Z, C = x.shape
    gx, gy, gz = -(-X // bx), -(-Y // by), -(-Z // bz)
    px, py, pz = gx * bx, gy * by, gz * bz
    if (px, py, pz) == (X, Y, Z):
        buf = x.data
        pos = np.arange(X * Y * Z, dtype=np.int64).reshape(X, Y, Z)
    else:
        buf = np.full((px, py, pz, C), -np.inf)
        buf[:X, :Y, :Z, :] = x.data
        pos = np.full((px, py, pz), -1, dtype=np.int64)
        pos[:X, :Y, :Z] = np.arange(X * Y * Z, dtype=np.int64).reshape(X, Y, Z)
    blocks = (
        buf.reshape(gx, bx, gy, by, gz, bz, C)
        .transpose(0, 2, 4, 1, 3, 5, 6)
        .reshape(gx, gy, gz, bx * by * bz, C)
    )
    cells = (
        pos.reshape(gx, bx, gy, by, gz, bz)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(gx, gy, gz, bx * by * bz)
    )
    arg = blocks.argmax(axis=3)
    out = Value(np.take_along_axis(blocks, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :])
    chosen = np.take_along_axis(cells, arg, axis=3)  # (gx, gy, gz, C) flat cell ids

    def backward(g: Array) -> None:
        flat = chosen.ravel() * C + np.tile(np.arange(C, dtype=np.int64), chosen.size // C)
        np.add.at(x.grad.reshape(-1), flat, g.ravel())

    out.node = Node((x,), backward)
    return out


# ---------------------------------------------------------------------------
# parameters and optimization


@dataclass
class LinearMap:
    """An affine map applied to row matrices: y = x @ weight (+ bias)."""

    weight: Value
    bias: Value | None = None

    def __post_init__(self) -> None:
        if self.weight.ndim != 2:
            raise ShapeError(f"LinearMap weight must be 2-D, got shape {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"LinearMap bias shape {self.bias.shape} does not match "
                f"weight columns {self.weight.shape[1]}"
            )

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True) -> "LinearMap":
        # Biases are nonzero (all-zero inputs must not map to the zero
        # vector downstream) but an order of magnitude below the weights,
        # so they cannot dominate the output direction at init.
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        weight = Value(rng.uniform(-bound, bound, size=(in_dim, out_dim)))
        b = Value(rng.uniform(-0.1 * bound, 0.1 * bound, size=out_dim)) if bias else None
        return cls(weight, b)

    @classmethod
    def identity(cls, dim: int) -> "LinearMap":
        return cls(Value(np.eye(dim)))

    def __call__(self, x: Value) -> Value:
        y = matmul(x, self.weight)
        return add_bias(y, self.bias) if self.bias is not None else y

    def params(self) -> list[Value]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


def sgd_step(params: Iterable[Value], lr: float) -> None:
    """Plain gradient descent; parameters with no grad are left untouched."""
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad


def zero_grads(params: Iterable[Value]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# verification oracle


def grad_check(f: Callable[[Value], Value], x: Value, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |a - n| / max(1, |a|, |n|). f must
    return a scalar Value and must be deterministic; x.data is perturbed in
    place and restored.
    """
    x.zero_grad()
    out = f(x)
    if not isinstance(out, Value) or out.data.size != 1:
        raise ContractError("grad_check: f must return a scalar Value")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0
