"""Reverse-mode tape covering exactly the recovery computation graph.

Nodes are created in evaluation order, so the node list is already a
topological order and backward() is a single reverse sweep. Forward values
are produced by the same kernels the inference engine uses, which keeps the
adapted forward bit-compatible with the plain one. Only the operators the
recovery loss needs exist: matmul (plain and transposed-right), elementwise
add/mul/scale, silu, rms_norm, causal softmax, rotary rotation, column
slicing/concat, and mean next-token cross-entropy.
"""

from __future__ import annotations

import numpy as np

from . import tensor
from .errors import InputError
from .model import rotate_half
from .tensor import F64


class Node:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.grad = None


class Tape:
    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def leaf(self, value: np.ndarray, requires_grad: bool = False) -> Node:
        node = Node(np.asarray(value), (), None, requires_grad)
        self.nodes.append(node)
        return node

    def _push(self, value, parents, vjp) -> Node:
        requires = any(p.requires_grad for p in parents)
        node = Node(value, tuple(parents) if requires else (),
                    vjp if requires else None, requires)
        self.nodes.append(node)
        return node

    # -- operators ---------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        c = tensor.matmul(a.value, b.value)

        def vjp(g):
            ga = tensor.matmul(g, b.value.T) if a.requires_grad else None
            gb = tensor.matmul(a.value.T, g) if b.requires_grad else None
            return ga, gb

        return self._push(c, (a, b), vjp)

    def matmul_nt(self, a: Node, b: Node) -> Node:
        """c = a @ b.T, the x @ W.T pattern of every projection."""
        c = tensor.matmul(a.value, b.value.T)

        def vjp(g):
            ga = tensor.matmul(g, b.value) if a.requires_grad else None
            gb = tensor.matmul(g.T, a.value) if b.requires_grad else None
            return ga, gb

        return self._push(c, (a, b), vjp)

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise InputError(f"add shapes differ: {a.value.shape} vs {b.value.shape}")
        return self._push(a.value + b.value, (a, b), lambda g: (g, g))

    def mul(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise InputError(f"mul shapes differ: {a.value.shape} vs {b.value.shape}")
        return self._push(a.value * b.value, (a, b),
                          lambda g: (g * b.value, g * a.value))

    def scale(self, a: Node, c: float) -> Node:
        return self._push(a.value * c, (a,), lambda g: (g * c,))

    def silu(self, a: Node) -> Node:
        sig = tensor.sigmoid(a.value)
        y = (a.value * sig).astype(a.value.dtype, copy=False)

        def vjp(g):
            return (g * (sig * (1.0 + a.value * (1.0 - sig))).astype(g.dtype, copy=False),)

        return self._push(y, (a,), vjp)

    def rms_norm(self, x: Node, gain: np.ndarray, eps: float) -> Node:
        y = tensor.rms_norm(x.value, gain, eps)

        def vjp(g):
            x64 = x.value.astype(F64, copy=False)
            g64 = g.astype(F64, copy=False)
            gain64 = gain.astype(F64, copy=False)
            d = x64.shape[1]
            inv = 1.0 / np.sqrt(np.mean(x64 * x64, axis=1, keepdims=True) + eps)
            gg = g64 * gain64
            dot = np.sum(gg * x64, axis=1, keepdims=True)
            dx = inv * gg - (inv ** 3 / d) * dot * x64
            return (dx.astype(g.dtype, copy=False),)

        return self._push(y, (x,), vjp)

    def causal_softmax(self, scores: Node) -> Node:
        y = tensor.causal_softmax_rows(scores.value)

        def vjp(g):
            y64 = y.astype(F64, copy=False)
            g64 = g.astype(F64, copy=False)
            inner = np.sum(g64 * y64, axis=1, keepdims=True)
            return ((y64 * (g64 - inner)).astype(g.dtype, copy=False),)

        return self._push(y, (scores,), vjp)

    def rope(self, x: Node, cos: np.ndarray, sin: np.ndarray) -> Node:
        y = x.value * cos + rotate_half(x.value) * sin

        def vjp(g):
            gs = g * sin
            h = gs.shape[1] // 2
            # transpose of rotate_half: cat(z2, -z1)
            rot_t = np.concatenate([gs[:, h:], -gs[:, :h]], axis=1)
            return (g * cos + rot_t,)

        return self._push(y, (x,), vjp)

    def slice_cols(self, x: Node, start: int, stop: int) -> Node:
        val = x.value[:, start:stop]

        def vjp(g):
            out = np.zeros_like(x.value)
            out[:, start:stop] = g
            return (out,)

        return self._push(val, (x,), vjp)

    def concat_cols(self, parts: list[Node]) -> Node:
        widths = [p.value.shape[1] for p in parts]
        val = np.concatenate([p.value for p in parts], axis=1)

        def vjp(g):
            grads = []
            off = 0
            for w in widths:
                grads.append(g[:, off:off + w])
                off += w
            return tuple(grads)

        return self._push(val, tuple(parts), vjp)

    def cross_entropy_next_token(self, logits: Node, tokens: np.ndarray) -> Node:
        """Mean cross-entropy, position p predicting token p+1, in nats."""
        t = logits.value.shape[0]
        if t < 2:
            raise InputError("need at least 2 tokens for a next-token loss")
        targets = np.asarray(tokens[1:], dtype=np.int64)
        z = logits.value[:-1].astype(F64, copy=False)
        zmax = np.max(z, axis=1, keepdims=True)
        ez = np.exp(z - zmax)
        sez = np.sum(ez, axis=1, keepdims=True)
        lse = (zmax + np.log(sez)).ravel()
        picked = z[np.arange(t - 1), targets]
        loss = np.float64(np.mean(lse - picked))

        def vjp(g):
            soft = ez / sez
            soft[np.arange(t - 1), targets] -= 1.0
            d = np.zeros(logits.value.shape, dtype=F64)
            d[:-1] = soft / (t - 1)
            return ((d * float(g)).astype(logits.value.dtype, copy=False),)

        return self._push(loss, (logits,), vjp)

    # -- reverse sweep -----------------------------------------------------

    def backward(self, loss: Node) -> None:
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            grads = node.vjp(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
