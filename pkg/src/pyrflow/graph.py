"""Minimal reverse-mode differentiation over the primitive ops.

A forward pass builds a DAG of :class:`Node` objects; ``backward`` walks it
in reverse topological order and hands each node's accumulated output
gradient to the closure that knows the analytic input gradients.  Leaf
parameters accumulate into their :class:`~pyrflow.tensor.GradPair`, which the
optimizer consumes.

Values inside the graph are plain ndarrays (rank 4 for maps, 0-d for loss
scalars).  Nodes are immutable once created; a fresh graph is built per step.
"""
from __future__ import annotations

import numpy as np

from . import flowops, tensor
from .tensor import ConvParams, GradPair


class Node:
    __slots__ = ("value", "parents", "vjp", "grad")

    def __init__(self, value, parents=(), vjp=None):
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.grad = None

    @property
    def shape(self):
        return np.shape(self.value)

    def accumulate(self, g):
        # First contribution is kept by reference: vjps never mutate their
        # outputs, and later contributions allocate a fresh sum.
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g


class Param(Node):
    """Leaf node bound to a persistent GradPair parameter."""

    __slots__ = ("name", "pair")

    def __init__(self, name: str, pair: GradPair):
        super().__init__(pair.value)
        self.name = name
        self.pair = pair

    def accumulate(self, g):
        self.pair.grad += g


def constant(value) -> Node:
    return Node(np.asarray(value))


def topo_order(root: Node) -> list[Node]:
    """Iterative post-order DFS; safe for deep stage-chained graphs."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, seed=None, needed_params=None) -> None:
    """Propagate d(root)/d(everything) into node grads and parameter pairs.

    ``needed_params`` restricts propagation to subgraphs that can reach one
    of the named parameters; everything else (frozen branches, constants) is
    skipped entirely.
    """
    order = topo_order(root)
    needs: dict[int, bool] = {}
    for node in order:  # post-order: parents precede their consumers
        if isinstance(node, Param):
            needs[id(node)] = needed_params is None or node.name in needed_params
        elif node.vjp is None:
            needs[id(node)] = False
        else:
            needs[id(node)] = any(needs[id(p)] for p in node.parents)
    if seed is None:
        seed = np.ones_like(root.value)
    root.grad = seed
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        need = tuple(needs[id(p)] for p in node.parents)
        if not any(need):
            node.grad = None
            continue
        grads = node.vjp(node.grad, need)
        for parent, g, wanted in zip(node.parents, grads, need):
            if wanted and g is not None:
                parent.accumulate(g)
        node.grad = None  # free intermediates as we go


# ---------------------------------------------------------------------------
# op wrappers


ALL = (True, True, True, True)  # default need mask for direct vjp calls


def conv2d(x: Node, kernel: Node, bias: Node, stride=1, dilation=1, padding=0) -> Node:
    p = ConvParams(kernel.value, bias.value, stride, dilation, padding)
    out, patches = tensor.conv2d_cached(x.value, p)

    def vjp(g, need=ALL):
        gx, gk, gb = tensor.conv2d_backward(x.value, p, g, patches=patches,
                                            need_x=need[0], need_kernel=need[1])
        return gx, gk, gb

    return Node(out, (x, kernel, bias), vjp)


def conv_transpose2d(x: Node, kernel: Node, bias: Node, stride=2, dilation=1,
                     padding=1) -> Node:
    p = ConvParams(kernel.value, bias.value, stride, dilation, padding)
    out = tensor.conv_transpose2d(x.value, p)

    def vjp(g, need=ALL):
        return tensor.conv_transpose2d_backward(x.value, p, g, need_x=need[0],
                                                need_kernel=need[1])

    return Node(out, (x, kernel, bias), vjp)


def avg_pool2(x: Node) -> Node:
    out = tensor.avg_pool2(x.value)
    return Node(out, (x,),
                lambda g, need=ALL: (tensor.avg_pool2_backward(x.value, g),))


def leaky_relu(x: Node, slope: float = 0.1) -> Node:
    out = tensor.leaky_relu(x.value, slope)
    return Node(out, (x,),
                lambda g, need=ALL: (tensor.leaky_relu_backward(x.value, g, slope),))


def concat(xs) -> Node:
    xs = list(xs)
    values = [x.value for x in xs]
    out = tensor.concat_channels(values)
    return Node(out, tuple(xs),
                lambda g, need=None: tensor.concat_channels_backward(values, g))


def add(a: Node, b: Node) -> Node:
    if np.shape(a.value) != np.shape(b.value):
        raise tensor.ShapeError(
            f"add: shapes {np.shape(a.value)} and {np.shape(b.value)} differ"
        )
    return Node(a.value + b.value, (a, b), lambda g, need=ALL: (g, g))


def scale(x: Node, s: float) -> Node:
    return Node(x.value * s, (x,), lambda g, need=ALL: (g * s,))


def correlate(f1: Node, f2: Node, radius: int, patch_radius: int = 0,
              parallel: bool = False) -> Node:
    out = flowops.correlate(f1.value, f2.value, radius, patch_radius, parallel)

    def vjp(g, need=ALL):
        return flowops.correlate_backward(f1.value, f2.value, radius, g,
                                          patch_radius, parallel)

    return Node(out, (f1, f2), vjp)


def downsample_cost(v: Node) -> Node:
    out = flowops.downsample_cost_values(v.value)
    return Node(out, (v,), lambda g, need=ALL: (
        flowops.downsample_cost_values_backward(v.value, g),))


def warp(f: Node, flow: Node) -> Node:
    out = flowops.warp_bilinear(f.value, flow.value)

    def vjp(g, need=ALL):
        return flowops.warp_bilinear_backward(f.value, flow.value, g,
                                              need_f=need[0], need_flow=need[1])

    return Node(out, (f, flow), vjp)


def upsample_flow(flow: Node, mode: str = "bicubic") -> Node:
    out = flowops.upsample_flow(flow.value, mode)
    return Node(out, (flow,), lambda g, need=ALL: (
        flowops.upsample_flow_backward(flow.value, g, mode),))


def channel_normalize(v: Node, alpha: float = 0.99, beta: float = 0.5,
                      eps: float = 0.01) -> Node:
    out = flowops.channel_normalize(v.value, alpha, beta, eps)
    return Node(out, (v,), lambda g, need=ALL: (
        flowops.channel_normalize_backward(v.value, g, alpha, beta, eps),))


def weighted_sum(nodes, weights) -> Node:
    """Scalar combination sum_i w_i * node_i for loss stacking."""
    nodes = list(nodes)
    weights = [float(w) for w in weights]
    if len(nodes) != len(weights):
        raise ValueError(f"{len(nodes)} nodes but {len(weights)} weights")
    out = sum(w * n.value for n, w in zip(nodes, weights))
    return Node(out, tuple(nodes),
                lambda g, need=None: tuple(g * w for w in weights))
