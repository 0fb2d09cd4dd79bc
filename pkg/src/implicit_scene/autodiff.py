"""Minimal dense-tensor computation graph with reverse-mode differentiation.

Graphs are built once (define-then-run), evaluated against named input
tensors, and differentiated from a scalar output back to every input leaf.
The op set is deliberately small; larger constructs (bias broadcast, column
selection, means over column groups) are composed from it or provided as
dedicated ops with exact, order-stable accumulation so that column
permutations of the inputs permute outputs bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


class GraphError(ValueError):
    """Raised for malformed graphs, shape mismatches, or non-finite values."""


class Tensor:
    """Dense row-major float64 array with a fixed shape.

    All values must be finite; the element count always equals the product
    of the shape.
    """

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise GraphError("tensor contains non-finite values")
        self.values = arr

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape})"


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.values
    return np.ascontiguousarray(x, dtype=np.float64)


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    name: str
    # op-specific payload: const value, concat axis, column indices, custom fns
    meta: dict = field(default_factory=dict)


class Graph:
    """Computation graph; nodes reference strictly earlier nodes.

    Build with the op methods below (each returns the new node's index),
    then call :func:`evaluate_graph` / :func:`backward`. Graphs are
    immutable once built and safe to evaluate concurrently; per-call state
    lives in the returned :class:`Execution`.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.input_shapes: dict[str, tuple[int, ...]] = {}
        self.outputs: dict[str, int] = {}

    # -- construction -----------------------------------------------------

    def _add(self, kind, inputs, name=None, **meta) -> int:
        idx = len(self.nodes)
        for i in inputs:
            if not (0 <= i < idx):
                raise GraphError(f"node {kind}#{idx} references invalid node {i}")
        self.nodes.append(Node(kind, tuple(inputs), name or f"{kind}#{idx}", meta))
        return idx

    def input(self, name: str, shape) -> int:
        if name in self.inputs:
            raise GraphError(f"duplicate input name {name!r}")
        idx = self._add("input", (), name)
        self.inputs[name] = idx
        self.input_shapes[name] = tuple(int(s) for s in shape)
        return idx

    def const(self, values, name=None) -> int:
        return self._add("const", (), name, value=_as_array(values))

    def matmul(self, a: int, b: int, name=None) -> int:
        return self._add("matmul", (a, b), name)

    def add(self, a: int, b: int, name=None) -> int:
        return self._add("add", (a, b), name)

    def mul(self, a: int, b: int, name=None) -> int:
        return self._add("mul", (a, b), name)

    def scale(self, a: int, k: float, name=None) -> int:
        return self._add("scale", (a,), name, k=float(k))

    def relu(self, a: int, name=None) -> int:
        return self._add("relu", (a,), name)

    def sigmoid(self, a: int, name=None) -> int:
        return self._add("sigmoid", (a,), name)

    def concat(self, parts: Sequence[int], axis: int = 0, name=None) -> int:
        if not parts:
            raise GraphError("concat needs at least one input")
        return self._add("concat", tuple(parts), name, axis=int(axis))

    def reduce_sum(self, a: int, name=None) -> int:
        return self._add("reduce_sum", (a,), name)

    def squared_error(self, a: int, b: int, name=None) -> int:
        return self._add("squared_error", (a, b), name)

    def wrap_angle(self, a: int, name=None) -> int:
        return self._add("wrap_angle", (a,), name)

    def gather_cols(self, a: int, cols, name=None) -> int:
        return self._add("gather_cols", (a,), name,
                         cols=tuple(int(c) for c in cols))

    def mean_cols(self, a: int, groups, name=None) -> int:
        """Per output column k, the mean of input columns groups[k].

        Accumulation is order-stable (values sorted per row before summing)
        so relabeling the grouped columns cannot change the result bitwise.
        Empty groups yield a zero column.
        """
        groups = tuple(tuple(int(c) for c in g) for g in groups)
        return self._add("mean_cols", (a,), name, groups=groups)

    def custom(self, fn: Callable, vjp: Callable, inputs: Sequence[int],
               name=None) -> int:
        """Opaque differentiable op.

        ``fn(*arrays) -> array`` computes the forward value;
        ``vjp(arrays, out_value, out_grad) -> list of arrays`` returns the
        gradient for each input.
        """
        return self._add("custom", tuple(inputs), name, fn=fn, vjp=vjp)

    def output(self, name: str, node: int) -> int:
        if not (0 <= node < len(self.nodes)):
            raise GraphError(f"output {name!r} references invalid node {node}")
        self.outputs[name] = node
        return node


@dataclass
class Execution:
    """Per-call evaluation state: one value array per node."""

    graph: Graph
    values: list[np.ndarray]
    outputs: dict[str, Tensor]

    def value(self, node: int) -> np.ndarray:
        return self.values[node]


def _sorted_group_mean(arr: np.ndarray, groups) -> np.ndarray:
    out = np.zeros((arr.shape[0], len(groups)))
    for k, group in enumerate(groups):
        if not group:
            continue
        cols = np.sort(arr[:, list(group)], axis=1)
        out[:, k] = cols.sum(axis=1) / len(group)
    return out


def _forward_node(node: Node, vals: list[np.ndarray], bound) -> np.ndarray:
    kind = node.kind
    ins = [vals[i] for i in node.inputs]
    if kind == "input":
        return bound[node.name]
    if kind == "const":
        return node.meta["value"]
    if kind == "matmul":
        a, b = ins
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise GraphError(
                f"matmul shape mismatch at {node.name}: {a.shape} @ {b.shape}")
        return a @ b
    if kind == "add" or kind == "mul":
        a, b = ins
        if a.shape != b.shape:
            raise GraphError(
                f"{kind} shape mismatch at {node.name}: {a.shape} vs {b.shape}")
        return a + b if kind == "add" else a * b
    if kind == "scale":
        return ins[0] * node.meta["k"]
    if kind == "relu":
        return np.maximum(ins[0], 0.0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-ins[0]))
    if kind == "concat":
        axis = node.meta["axis"]
        ndim = ins[0].ndim
        if not all(x.ndim == ndim for x in ins):
            raise GraphError(f"concat rank mismatch at {node.name}")
        for d in range(ndim):
            if d != axis and len({x.shape[d] for x in ins}) > 1:
                raise GraphError(f"concat shape mismatch at {node.name}")
        return np.concatenate(ins, axis=axis)
    if kind == "reduce_sum":
        return np.asarray(ins[0].sum())
    if kind == "squared_error":
        a, b = ins
        if a.shape != b.shape:
            raise GraphError(
                f"squared_error shape mismatch at {node.name}: {a.shape} vs {b.shape}")
        d = a - b
        return np.asarray((d * d).sum())
    if kind == "wrap_angle":
        x = ins[0]
        return x - TWO_PI * np.floor((x + math.pi) / TWO_PI)
    if kind == "gather_cols":
        a = ins[0]
        cols = node.meta["cols"]
        if a.ndim != 2 or (cols and max(cols) >= a.shape[1]):
            raise GraphError(f"gather_cols out of range at {node.name}")
        return a[:, list(cols)]
    if kind == "mean_cols":
        a = ins[0]
        if a.ndim != 2:
            raise GraphError(f"mean_cols expects a matrix at {node.name}")
        return _sorted_group_mean(a, node.meta["groups"])
    if kind == "custom":
        return np.asarray(node.meta["fn"](*ins), dtype=np.float64)
    raise GraphError(f"unknown op kind {kind!r}")


def evaluate_graph(graph: Graph, inputs: dict, check_finite: bool = True) -> Execution:
    """Run the graph forward against named input tensors.

    Deterministic: identical inputs produce bit-identical outputs. Raises
    :class:`GraphError` naming the offending node on shape mismatch or any
    non-finite intermediate. Input arrays are referenced, not copied; do not
    mutate them while holding on to the returned Execution.
    """
    bound = {}
    for name, idx in graph.inputs.items():
        if name not in inputs:
            raise GraphError(f"missing input {name!r}")
        arr = _as_array(inputs[name])
        want = graph.input_shapes[name]
        if arr.shape != want:
            raise GraphError(
                f"input {name!r} has shape {arr.shape}, expected {want}")
        bound[name] = arr

    vals: list[np.ndarray] = []
    for node in graph.nodes:
        out = _forward_node(node, vals, bound)
        if check_finite and not np.all(np.isfinite(out)):
            raise GraphError(f"non-finite intermediate at node {node.name}")
        vals.append(out)

    outs = {name: Tensor(vals[idx]) for name, idx in graph.outputs.items()}
    return Execution(graph, vals, outs)


def _backward_node(node: Node, ins: list[np.ndarray], out: np.ndarray,
                   g: np.ndarray) -> list:
    kind = node.kind
    if kind in ("input", "const"):
        return []
    if kind == "matmul":
        a, b = ins
        return [g @ b.T, a.T @ g]
    if kind == "add":
        return [g, g]
    if kind == "mul":
        a, b = ins
        return [g * b, g * a]
    if kind == "scale":
        return [g * node.meta["k"]]
    if kind == "relu":
        # subgradient 0 at the kink
        return [g * (ins[0] > 0.0)]
    if kind == "sigmoid":
        return [g * out * (1.0 - out)]
    if kind == "concat":
        axis = node.meta["axis"]
        sizes = [x.shape[axis] for x in ins]
        splits = np.cumsum(sizes)[:-1]
        return list(np.split(g, splits, axis=axis))
    if kind == "reduce_sum":
        return [np.full_like(ins[0], float(g))]
    if kind == "squared_error":
        a, b = ins
        d = 2.0 * float(g) * (a - b)
        return [d, -d]
    if kind == "wrap_angle":
        return [g]
    if kind == "gather_cols":
        ga = np.zeros_like(ins[0])
        np.add.at(ga, (slice(None), list(node.meta["cols"])), g)
        return [ga]
    if kind == "mean_cols":
        ga = np.zeros_like(ins[0])
        for k, group in enumerate(node.meta["groups"]):
            if group:
                ga[:, list(group)] += (g[:, k] / len(group))[:, None]
        return [ga]
    if kind == "custom":
        return list(node.meta["vjp"](ins, out, g))
    raise GraphError(f"unknown op kind {kind!r}")


def backward(graph: Graph, execution: Execution, seed: str) -> dict:
    """Gradient of the scalar output ``seed`` with respect to every input.

    Returns a dict mapping input names to gradient arrays (zeros for inputs
    the seed does not depend on).
    """
    if seed not in graph.outputs:
        raise GraphError(f"unknown output {seed!r}")
    root = graph.outputs[seed]
    if execution.values[root].size != 1:
        raise GraphError(f"backward seed {seed!r} is not scalar-valued")

    grads: list = [None] * len(graph.nodes)
    grads[root] = np.ones_like(execution.values[root])
    for idx in range(root, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = graph.nodes[idx]
        ins = [execution.values[i] for i in node.inputs]
        for src, gin in zip(node.inputs, _backward_node(node, ins, execution.values[idx], g)):
            if grads[src] is None:
                grads[src] = np.array(gin, dtype=np.float64)
            else:
                grads[src] = grads[src] + gin

    out = {}
    for name, idx in graph.inputs.items():
        g = grads[idx]
        if g is None:
            g = np.zeros(graph.input_shapes[name])
        out[name] = g
    return out


@dataclass
class FiniteDiffReport:
    passed: bool
    max_err: float
    worst_index: tuple | None
    n_checked: int
    skipped: list
    failures: list  # (index, analytic, numeric, err)

    def __str__(self):
        state = "pass" if self.passed else "FAIL"
        return (f"finite-diff {state}: max_err={self.max_err:.3e} "
                f"checked={self.n_checked} skipped={len(self.skipped)}")


def _kink_signature(graph: Graph, execution: Execution):
    sig = []
    for idx, node in enumerate(graph.nodes):
        if node.kind == "relu":
            sig.append(execution.values[node.inputs[0]] > 0.0)
        elif node.kind == "wrap_angle":
            x = execution.values[node.inputs[0]]
            sig.append(np.floor((x + math.pi) / TWO_PI))
    return sig


def _same_signature(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(graph: Graph, inputs: dict, leaf: str, seed: str,
                      step: float = 1e-4, tol: float = 1e-4) -> FiniteDiffReport:
    """Compare analytic gradients against central finite differences.

    Componentwise relative error with an absolute fallback when both values
    are below 1e-8 in magnitude. Components whose perturbation crosses a
    ReLU kink or an angle-wrap branch are excluded and reported as skipped.
    """
    if step <= 0.0:
        raise GraphError("finite-diff step must be positive")
    base = {k: _as_array(v).copy() for k, v in inputs.items()}
    ex = evaluate_graph(graph, base)
    if ex.values[graph.outputs[seed]].size != 1:
        raise GraphError(f"finite_diff_check output {seed!r} is not scalar")
    analytic = backward(graph, ex, seed)[leaf]

    x = base[leaf]
    max_err, worst, n_checked = 0.0, None, 0
    skipped, failures = [], []
    for i in range(x.size):
        hi_x, lo_x = x.copy(), x.copy()
        hi_x.reshape(-1)[i] += step
        lo_x.reshape(-1)[i] -= step
        ex_hi = evaluate_graph(graph, {**base, leaf: hi_x})
        ex_lo = evaluate_graph(graph, {**base, leaf: lo_x})
        if not _same_signature(_kink_signature(graph, ex_hi),
                               _kink_signature(graph, ex_lo)):
            skipped.append(np.unravel_index(i, x.shape))
            continue
        hi = float(ex_hi.values[graph.outputs[seed]])
        lo = float(ex_lo.values[graph.outputs[seed]])
        numeric = (hi - lo) / (2.0 * step)
        a = float(analytic.reshape(-1)[i])
        denom = max(abs(a), abs(numeric))
        err = abs(a - numeric) if denom < 1e-8 else abs(a - numeric) / denom
        n_checked += 1
        if err > max_err:
            max_err, worst = err, np.unravel_index(i, x.shape)
        if err > tol:
            failures.append((np.unravel_index(i, x.shape), a, numeric, err))

    return FiniteDiffReport(passed=not failures, max_err=max_err,
                            worst_index=worst, n_checked=n_checked,
                            skipped=skipped, failures=failures)
