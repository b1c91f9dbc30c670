"""Small reverse-mode differentiation engine over float64 numpy arrays.

A :class:`Graph` is a static, append-only list of operation records.  It holds
no numeric state; evaluating it produces a :class:`Trace` that owns the cached
forward values, so one graph can be evaluated on many binding sets (also from
several threads).

Example::

    g = Graph()
    x = g.input("x")
    w = g.input("w")
    loss = g.mean(g.square(g.matmul(x, w)))
    tr = g.forward({"x": X, "w": W})
    grads = tr.backward(loss, wrt=[w])
    grads[w.id]
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

import numpy as np
from scipy.special import erf

from .errors import ShapeError, StateError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Node:
    """Handle to one operation record inside a :class:`Graph`."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", id: int):
        self.graph = graph
        self.id = id

    @property
    def kind(self) -> str:
        return self.graph._records[self.id].kind

    def __repr__(self) -> str:
        rec = self.graph._records[self.id]
        label = f" {rec.name!r}" if rec.name else ""
        return f"Node({self.id}, {rec.kind}{label})"

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __neg__(self):
        return self.graph.neg(self)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)


@dataclass(frozen=True)
class _Record:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# primitive forward / vector-Jacobian products
#
# Each entry is (forward(values, attrs) -> array,
#                vjp(g, values, out, attrs) -> tuple of input grads or None).
# ---------------------------------------------------------------------------


def _matmul_fwd(v, a):
    x, w = v
    if x.shape[-1] != w.shape[0 if w.ndim == 1 else -2]:
        raise ValueError(f"inner dimensions differ: {x.shape} @ {w.shape}")
    return np.matmul(x, w)


def _matmul_vjp(g, v, out, a):
    x, w = v
    x2 = x[None, :] if x.ndim == 1 else x
    w2 = w[:, None] if w.ndim == 1 else w
    g2 = g.reshape(np.matmul(x2, w2).shape)
    if w2.ndim == 2 and x2.ndim > 2:
        k, m = w2.shape
        gx = g2 @ w2.T
        gw = x2.reshape(-1, k).T @ g2.reshape(-1, m)
    else:
        gx = _unbroadcast(g2 @ np.swapaxes(w2, -1, -2), x2.shape)
        gw = _unbroadcast(np.swapaxes(x2, -1, -2) @ g2, w2.shape)
    return gx.reshape(x.shape), gw.reshape(w.shape)


def _reduce_axes(a):
    return a.get("axis"), a.get("keepdims", False)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def _sum_fwd(v, a):
    axis, keepdims = _reduce_axes(a)
    return np.sum(v[0], axis=axis, keepdims=keepdims)


def _sum_vjp(g, v, out, a):
    axis, keepdims = _reduce_axes(a)
    return (np.array(_expand_reduced(g, v[0].shape, axis, keepdims)),)


def _mean_fwd(v, a):
    axis, keepdims = _reduce_axes(a)
    return np.mean(v[0], axis=axis, keepdims=keepdims)


def _mean_vjp(g, v, out, a):
    axis, keepdims = _reduce_axes(a)
    count = v[0].size / max(np.size(out), 1)
    return (np.array(_expand_reduced(g, v[0].shape, axis, keepdims)) / count,)


def _pool_fwd(v, a):
    x, mask = v
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ValueError(f"masked_mean_pool wants (N,T,H) and (N,T), got {x.shape}, {mask.shape}")
    denom = np.maximum(mask.sum(axis=1), 1.0)
    return np.einsum("nt,nth->nh", mask, x) / denom[:, None]


def _pool_vjp(g, v, out, a):
    x, mask = v
    denom = np.maximum(mask.sum(axis=1), 1.0)
    gx = (g / denom[:, None])[:, None, :] * mask[:, :, None]
    return gx, None


def _bce_fwd(v, a):
    z, y = v
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} and targets {y.shape} differ")
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def _bce_vjp(g, v, out, a):
    z, y = v
    return g * (_sigmoid(z) - y), None


# kernel tails beyond this many bandwidths are below 1e-18 and are dropped
_KERNEL_REACH = 9.0


def _softhist_window(values, edges, h):
    """Edge indices within kernel reach of every value, or None for the dense path.

    Returns ``(j, valid)`` where ``j`` (rows, features, 2K) indexes the edges
    whose CDF is evaluated; edges left of the window count as CDF 0 and edges
    right of it as 1.
    """
    n_edges = edges.shape[1]
    finite = np.where(np.isfinite(edges), edges, np.nan)
    spacing = np.nanmin(np.diff(finite, axis=1), axis=1)
    if not np.all(np.isfinite(spacing)):
        return None
    k = int(np.ceil(np.max(_KERNEL_REACH * h / spacing))) + 1
    if 2 * k + 2 >= n_edges:
        return None
    b = np.empty(values.shape, dtype=np.intp)
    for f in range(values.shape[1]):
        b[:, f] = np.searchsorted(edges[f], values[:, f], side="right") - 1
    np.clip(b, 0, n_edges - 2, out=b)
    j = b[:, :, None] + np.arange(-k + 1, k + 1)
    return j, k


def _window_terms(values, edges, h, j):
    """Standardized distances to the window edges; out-of-range edges map to -inf/+inf."""
    n_edges = edges.shape[1]
    flat = np.clip(j, 0, n_edges - 1) + (np.arange(values.shape[1]) * n_edges)[None, :, None]
    e = np.take(edges, flat)
    if not (np.all(edges[:, 0] == -np.inf) and np.all(edges[:, -1] == np.inf)):
        e = np.where(j < 0, -np.inf, np.where(j >= n_edges, np.inf, e))
    return (e - values[:, :, None]) / h[None, :, None]


def _scatter_bins(mass, j, n_bins, weights):
    """Sum window bin masses (rows, features, 2K+1) into (features, n_bins)."""
    rows, d, width = mass.shape
    bins = j[:, :, :1] - 1 + np.arange(width)  # bin i of the window lies between window edges i-1 and i
    ok = (bins >= 0) & (bins < n_bins)
    w = mass if weights is None else mass * weights[:, None, None]
    flat = (np.arange(d)[None, :, None] * n_bins + bins)[ok]
    return np.bincount(flat, weights=w[ok], minlength=d * n_bins).reshape(d, n_bins)


def _softhist_rows(values, a):
    """Rows with non-zero weight and their weights; padding rows never contribute."""
    edges, weights = a["edges"], a.get("weights")
    if values.ndim != 2 or values.shape[1] != edges.shape[0]:
        raise ValueError(f"values {values.shape} do not match edges {edges.shape}")
    if weights is None:
        return values, None
    if len(weights) != len(values):
        raise ValueError(f"{len(weights)} weights for {len(values)} rows")
    active = a["active"]
    return (values, weights) if active is None else (values[active], weights[active])


def _softhist_fwd(v, a):
    values, weights = _softhist_rows(v[0], a)
    edges, h = a["edges"], a["bandwidth"]
    win = _softhist_window(values, edges, h)
    if win is None:
        u = (edges[None, :, :] - values[:, :, None]) / h[None, :, None]
        mass = np.diff(0.5 * (1.0 + erf(u / _SQRT2)), axis=2)
        if weights is not None:
            return np.einsum("j,jdk->dk", weights, mass)
        return mass.sum(axis=0)
    j, _ = win
    cdf = 0.5 * (1.0 + erf(_window_terms(values, edges, h, j) / _SQRT2))
    pad = np.zeros(cdf.shape[:2] + (1,))
    mass = np.diff(np.concatenate([pad, cdf, pad + 1.0], axis=2), axis=2)
    return _scatter_bins(mass, j, edges.shape[1] - 1, weights)


def _softhist_vjp(g, v, out, a):
    values, weights = _softhist_rows(v[0], a)
    edges, h = a["edges"], a["bandwidth"]
    win = _softhist_window(values, edges, h)
    if win is None:
        u = (edges[None, :, :] - values[:, :, None]) / h[None, :, None]
        with np.errstate(invalid="ignore"):
            pdf = np.where(np.isfinite(u), _INV_SQRT_2PI * np.exp(-0.5 * u * u), 0.0)
        # d mass_k / d v = -(pdf_{k+1} - pdf_k) / h
        dmass = -np.diff(pdf, axis=2) / h[None, :, None]
        gv = np.einsum("dk,jdk->jd", g, dmass)
    else:
        j, _ = win
        u = _window_terms(values, edges, h, j)
        with np.errstate(invalid="ignore"):
            pdf = np.where(np.isfinite(u) | np.isnan(u), _INV_SQRT_2PI * np.exp(-0.5 * u * u), 0.0)
        # summation by parts: sum_k g_k (pdf_k - pdf_{k+1}) = sum_j pdf_j (g_j - g_{j-1})
        gpad = np.pad(g, ((0, 0), (1, 1)))
        dg = np.diff(gpad, axis=1)  # dg[:, j] = g_j - g_{j-1} for edge j
        flat = np.clip(j, 0, dg.shape[1] - 1) + (np.arange(values.shape[1]) * dg.shape[1])[None, :, None]
        gv = np.einsum("ndk,ndk->nd", pdf, np.take(dg, flat)) / h[None, :]
    if weights is not None:
        gv = gv * weights[:, None]
        if a["active"] is not None:
            full = np.zeros_like(v[0])
            full[a["active"]] = gv
            gv = full
    return (gv,)


_PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_vjp),
    "add": (lambda v, a: v[0] + v[1],
            lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape))),
    "sub": (lambda v, a: v[0] - v[1],
            lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape))),
    "mul": (lambda v, a: v[0] * v[1],
            lambda g, v, o, a: (_unbroadcast(g * v[1], v[0].shape),
                                _unbroadcast(g * v[0], v[1].shape))),
    "neg": (lambda v, a: -v[0], lambda g, v, o, a: (-g,)),
    "relu": (lambda v, a: np.maximum(v[0], 0.0), lambda g, v, o, a: (g * (v[0] > 0),)),
    "sigmoid": (lambda v, a: _sigmoid(v[0]), lambda g, v, o, a: (g * o * (1.0 - o),)),
    "tanh": (lambda v, a: np.tanh(v[0]), lambda g, v, o, a: (g * (1.0 - o * o),)),
    "exp": (lambda v, a: np.exp(v[0]), lambda g, v, o, a: (g * o,)),
    "square": (lambda v, a: v[0] * v[0], lambda g, v, o, a: (2.0 * g * v[0],)),
    "sum": (_sum_fwd, _sum_vjp),
    "mean": (_mean_fwd, _mean_vjp),
    "reshape": (lambda v, a: v[0].reshape(a["shape"]),
                lambda g, v, o, a: (g.reshape(v[0].shape),)),
    "masked_mean_pool": (_pool_fwd, _pool_vjp),
    "bce_with_logits": (_bce_fwd, _bce_vjp),
    "soft_histogram": (_softhist_fwd, _softhist_vjp),
}


class Graph:
    """Append-only operation graph.  Nodes are created through the methods
    below; inputs of a node always precede it, so construction order is a
    topological order."""

    def __init__(self):
        self._records: list[_Record] = []
        self._inputs: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._records)

    def _add(self, kind: str, inputs: Iterable[Any] = (), attrs=None, name=None) -> Node:
        ids = tuple(self._as_node(x).id for x in inputs)
        self._records.append(_Record(kind, ids, attrs or {}, name))
        return Node(self, len(self._records) - 1)

    def _as_node(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise ShapeError(f"{x!r} belongs to a different graph")
            return x
        return self.constant(x)

    def node(self, name: str) -> Node:
        return Node(self, self._inputs[name])

    @property
    def input_names(self) -> list[str]:
        return list(self._inputs)

    # leaves
    def input(self, name: str) -> Node:
        if name in self._inputs:
            raise ShapeError(f"input {name!r} declared twice")
        node = self._add("input", name=name)
        self._inputs[name] = node.id
        return node

    def constant(self, value) -> Node:
        return self._add("const", attrs={"value": np.asarray(value, dtype=np.float64)})

    # primitives
    def matmul(self, a, b) -> Node:
        return self._add("matmul", (a, b))

    def add(self, a, b) -> Node:
        return self._add("add", (a, b))

    def sub(self, a, b) -> Node:
        return self._add("sub", (a, b))

    def mul(self, a, b) -> Node:
        return self._add("mul", (a, b))

    def neg(self, a) -> Node:
        return self._add("neg", (a,))

    def relu(self, a) -> Node:
        return self._add("relu", (a,))

    def sigmoid(self, a) -> Node:
        return self._add("sigmoid", (a,))

    def tanh(self, a) -> Node:
        return self._add("tanh", (a,))

    def exp(self, a) -> Node:
        return self._add("exp", (a,))

    def square(self, a) -> Node:
        return self._add("square", (a,))

    def sum(self, a, axis=None, keepdims=False) -> Node:
        return self._add("sum", (a,), {"axis": axis, "keepdims": keepdims})

    def mean(self, a, axis=None, keepdims=False) -> Node:
        return self._add("mean", (a,), {"axis": axis, "keepdims": keepdims})

    def reshape(self, a, shape) -> Node:
        return self._add("reshape", (a,), {"shape": tuple(shape)})

    def masked_mean_pool(self, x, mask) -> Node:
        """Mean over valid rows of ``x`` (N, T, H); the divisor is floored at 1."""
        return self._add("masked_mean_pool", (x, mask))

    def bce_with_logits(self, logits, targets) -> Node:
        """Elementwise binary cross-entropy of ``sigmoid(logits)`` vs ``targets``."""
        return self._add("bce_with_logits", (logits, targets))

    def soft_histogram(self, values, edges, bandwidth, weights=None) -> Node:
        """Gaussian-kernel bin masses of ``values`` (rows, features).

        ``edges`` is (features, bins + 1) and may start/end with -inf/+inf;
        ``bandwidth`` is per feature; optional ``weights`` weight the rows.
        """
        edges = np.asarray(edges, dtype=np.float64)
        if edges.ndim != 2 or edges.shape[1] < 2:
            raise ShapeError("soft_histogram needs at least two edges per feature")
        if np.any(np.diff(edges, axis=1) <= 0):
            raise ShapeError("soft_histogram edges must be strictly increasing")
        bandwidth = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), edges.shape[:1]).copy()
        if np.any(bandwidth <= 0):
            raise ShapeError("soft_histogram bandwidth must be positive")
        attrs = {"edges": edges, "bandwidth": bandwidth}
        if weights is not None:
            w = np.asarray(weights, dtype=np.float64)
            active = np.flatnonzero(w)
            attrs["weights"] = w
            attrs["active"] = None if len(active) == len(w) else active
        return self._add("soft_histogram", (values,), attrs)

    # evaluation
    def forward(self, bindings: Mapping[str, Any], root: Node | None = None) -> "Trace":
        trace = Trace(self)
        trace.forward(bindings, root)
        return trace


class Trace:
    """Cached forward values of one graph evaluation."""

    def __init__(self, graph: Graph):
        self.graph = graph
        self._values: list[np.ndarray | None] | None = None
        self._root: int | None = None

    def forward(self, bindings: Mapping[str, Any], root: Node | None = None) -> np.ndarray:
        records = self.graph._records
        if not records:
            raise StateError("graph is empty")
        last = len(records) - 1 if root is None else root.id
        missing = [n for n in self.graph._inputs if n not in bindings and self.graph._inputs[n] <= last]
        if missing:
            raise ShapeError(f"unbound inputs: {missing}")
        values: list[np.ndarray | None] = [None] * (last + 1)
        for i in range(last + 1):
            rec = records[i]
            if rec.kind == "input":
                values[i] = np.asarray(bindings[rec.name], dtype=np.float64)
                continue
            if rec.kind == "const":
                values[i] = rec.attrs["value"]
                continue
            fwd = _PRIMITIVES[rec.kind][0]
            args = [values[j] for j in rec.inputs]
            try:
                with np.errstate(over="ignore"):
                    values[i] = np.asarray(fwd(args, rec.attrs), dtype=np.float64)
            except ValueError as exc:
                label = f" {rec.name!r}" if rec.name else ""
                shapes = [a.shape for a in args]
                raise ShapeError(f"node {i} ({rec.kind}{label}) with operand shapes {shapes}: {exc}") from exc
        self._values = values
        self._root = last
        return values[last]

    @property
    def value(self) -> np.ndarray:
        if self._values is None:
            raise StateError("forward has not been run")
        return self._values[self._root]

    def __getitem__(self, node: Node | int) -> np.ndarray:
        if self._values is None:
            raise StateError("forward has not been run")
        return self._values[node if isinstance(node, int) else node.id]

    def backward(self, root: Node | None = None, wrt: Iterable[Node | str] | None = None) -> dict[int, np.ndarray]:
        """Gradient of the scalar ``root`` w.r.t. ``wrt`` (default: every input leaf).

        Returns a mapping node id -> gradient array.  Inputs that do not
        influence the root get a zero gradient.
        """
        if self._values is None:
            raise StateError("backward called before forward")
        records = self.graph._records
        rid = self._root if root is None else root.id
        if rid > self._root:
            raise StateError(f"node {rid} was not evaluated by the last forward pass")
        out = self._values[rid]
        if out.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {out.shape}")
        if wrt is None:
            targets = [i for i in self.graph._inputs.values() if i <= rid]
        else:
            targets = [self.graph._inputs[w] if isinstance(w, str) else w.id for w in wrt]

        # only propagate into subgraphs that reach a requested leaf
        wanted = set(targets)
        live = [False] * (rid + 1)
        for i in range(rid + 1):
            live[i] = i in wanted or any(live[j] for j in records[i].inputs)

        grads: dict[int, np.ndarray] = {rid: np.ones_like(out)}
        for i in range(rid, -1, -1):
            g = grads.get(i)
            rec = records[i]
            if g is None or not rec.inputs or not live[i]:
                continue
            vjp = _PRIMITIVES[rec.kind][1]
            args = [self._values[j] for j in rec.inputs]
            parts = vjp(g, args, self._values[i], rec.attrs)
            for j, gj in zip(rec.inputs, parts):
                if gj is None or not live[j]:
                    continue
                grads[j] = grads[j] + gj if j in grads else gj
            if i not in wanted:
                del grads[i]
        return {t: grads.get(t, np.zeros_like(self._values[t])) for t in targets}


def forward(graph: Graph, bindings: Mapping[str, Any], root: Node | None = None) -> Trace:
    return graph.forward(bindings, root)


def backward(trace: Trace, root: Node | None = None, wrt=None) -> dict[int, np.ndarray]:
    return trace.backward(root, wrt)
