"""Reverse-mode differentiation over a small, fixed set of tensor primitives.

Only the operations the affordance network needs are supported. Values are
plain numpy arrays; a :class:`Tape` records every primitive in creation order
so that :meth:`Tape.backward` can sweep it in reverse.

Compute dtype follows the inputs: training uses float32 arrays, gradient
checks use float64. Scalar reductions (the losses) always accumulate in
float64.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(name={self.name!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def exact_mean_rows(x: np.ndarray) -> np.ndarray:
    """Row mean that does not depend on row order: sort each column, sum in float64."""
    return (np.sort(x, axis=0).sum(axis=0, dtype=np.float64) / x.shape[0]).astype(x.dtype)


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x))


class Tape:
    """Records primitive applications; one tape per evaluation.

    With ``enabled=False`` nothing is recorded and no backward closures are
    built, which is what inference paths use.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.nodes: list[Node] = []

    # -- bookkeeping -------------------------------------------------------
    def leaf(self, value, requires_grad: bool = False, name: str | None = None) -> Node:
        node = Node(np.asarray(value), requires_grad=requires_grad and self.enabled, name=name)
        if node.requires_grad:
            self.nodes.append(node)
        return node

    def _record(self, value, parents: Sequence[Node], backward_fn: Callable) -> Node:
        needs = self.enabled and any(p.requires_grad for p in parents)
        if not needs:
            return Node(value)
        node = Node(value, tuple(parents), backward_fn, requires_grad=True)
        self.nodes.append(node)
        return node

    # -- primitives --------------------------------------------------------
    def dense(self, x, weights, bias) -> Node:
        """Affine map ``x @ W + b`` for ``x`` of shape [n] or [rows, n]."""
        x, weights, bias = _as_node(x), _as_node(weights), _as_node(bias)
        xv, wv, bv = x.value, weights.value, bias.value
        if wv.ndim != 2 or xv.shape[-1] != wv.shape[0] or bv.shape != (wv.shape[1],):
            raise ShapeError(
                f"dense: input {xv.shape}, weights {wv.shape}, bias {bv.shape} do not conform"
            )
        out = xv @ wv + bv

        def backward(g):
            x2 = xv.reshape(-1, xv.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gx = (g @ wv.T) if x.requires_grad else None
            gw = (x2.T @ g2) if weights.requires_grad else None
            gb = g2.sum(axis=0) if bias.requires_grad else None
            return gx, gw, gb

        return self._record(out, (x, weights, bias), backward)

    def leaky_relu(self, x, alpha: float = DEFAULT_LEAKY_SLOPE) -> Node:
        x = _as_node(x)
        xv = x.value
        slope = np.where(xv >= 0, 1.0, alpha).astype(xv.dtype)
        out = xv * slope
        return self._record(out, (x,), lambda g: (g * slope,))

    def softplus(self, x) -> Node:
        """Elementwise ``log(1 + e^x)``; strictly positive for finite input."""
        x = _as_node(x)
        xv = x.value
        out = np.logaddexp(0.0, xv).astype(xv.dtype, copy=False)
        # guard against underflow to exactly zero far in the negative tail
        out = np.maximum(out, np.finfo(out.dtype).tiny)
        sig = (0.5 * (1.0 + np.tanh(0.5 * xv))).astype(xv.dtype, copy=False)
        return self._record(out, (x,), lambda g: (g * sig,))

    def conv3x3_pool(self, x, kernels, bias, alpha: float = DEFAULT_LEAKY_SLOPE) -> Node:
        """3x3 conv (stride 1, zero pad 1) -> LeakyReLU -> 2x2 max-pool, floor division.

        ``x`` is [H, W, Cin], ``kernels`` is [3, 3, Cin, Cout]; output is
        [H // 2, W // 2, Cout].
        """
        x, kernels, bias = _as_node(x), _as_node(kernels), _as_node(bias)
        xv, kv, bv = x.value, kernels.value, bias.value
        if xv.ndim != 3 or kv.ndim != 4 or kv.shape[:2] != (3, 3):
            raise ShapeError(f"conv3x3_pool: input {xv.shape}, kernels {kv.shape}")
        H, W, cin = xv.shape
        if kv.shape[2] != cin:
            raise ShapeError(f"conv3x3_pool: input has {cin} channels, kernels expect {kv.shape[2]}")
        cout = kv.shape[3]
        if bv.shape != (cout,):
            raise ShapeError(f"conv3x3_pool: bias {bv.shape} for {cout} output channels")
        if H < 2 or W < 2:
            raise ShapeError(f"conv3x3_pool: spatial extent {H}x{W} is below 2x2")

        xp = np.pad(xv, ((1, 1), (1, 1), (0, 0)))
        # cols[h, w, cin, dy, dx] -> [H*W, 9*cin] ordered (dy, dx, cin)
        cols = sliding_window_view(xp, (3, 3), axis=(0, 1)).transpose(0, 1, 3, 4, 2).reshape(H * W, 9 * cin)
        kmat = kv.reshape(9 * cin, cout)
        pre = (cols @ kmat + bv).reshape(H, W, cout)
        slope = np.where(pre >= 0, 1.0, alpha).astype(pre.dtype)
        act = pre * slope

        Ho, Wo = H // 2, W // 2
        blocks = act[: 2 * Ho, : 2 * Wo].reshape(Ho, 2, Wo, 2, cout).transpose(0, 2, 4, 1, 3).reshape(Ho, Wo, cout, 4)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

        def backward(g):
            gblocks = np.zeros((Ho, Wo, cout, 4), dtype=g.dtype)
            np.put_along_axis(gblocks, arg[..., None], g[..., None], axis=-1)
            gact = np.zeros((H, W, cout), dtype=g.dtype)
            gact[: 2 * Ho, : 2 * Wo] = (
                gblocks.reshape(Ho, Wo, cout, 2, 2).transpose(0, 3, 1, 4, 2).reshape(2 * Ho, 2 * Wo, cout)
            )
            gpre = (gact * slope).reshape(H * W, cout)
            gk = (cols.T @ gpre).reshape(kv.shape) if kernels.requires_grad else None
            gb = gpre.sum(axis=0) if bias.requires_grad else None
            gx = None
            if x.requires_grad:
                gcols = (gpre @ kmat.T).reshape(H, W, 3, 3, cin)
                gxp = np.zeros((H + 2, W + 2, cin), dtype=g.dtype)
                for dy in range(3):
                    for dx in range(3):
                        gxp[dy : dy + H, dx : dx + W] += gcols[:, :, dy, dx]
                gx = gxp[1:-1, 1:-1]
            return gx, gk, gb

        return self._record(out, (x, kernels, bias), backward)

    def add(self, a, b) -> Node:
        a, b = _as_node(a), _as_node(b)
        if a.value.shape != b.value.shape:
            raise ShapeError(f"add: {a.value.shape} vs {b.value.shape}")
        return self._record(a.value + b.value, (a, b), lambda g: (g, g))

    def scale(self, x, c: float) -> Node:
        x = _as_node(x)
        c = x.value.dtype.type(c)
        return self._record(x.value * c, (x,), lambda g: (g * c,))

    def affine_const(self, x, mul, add) -> Node:
        """``x * mul + add`` with constant arrays (used for (de)normalisation)."""
        x = _as_node(x)
        mul = np.asarray(mul, dtype=x.value.dtype)
        add = np.asarray(add, dtype=x.value.dtype)
        return self._record(x.value * mul + add, (x,), lambda g: (g * mul,))

    def mean_rows(self, x) -> Node:
        """Average over the leading axis: [k, d] -> [d]."""
        x = _as_node(x)
        xv = x.value
        if xv.ndim != 2 or xv.shape[0] == 0:
            raise ShapeError(f"mean_rows: need a non-empty [k, d] array, got {xv.shape}")
        k = xv.shape[0]
        out = exact_mean_rows(xv)
        return self._record(out, (x,), lambda g: (np.broadcast_to(g / k, xv.shape).copy(),))

    def tile_rows(self, x, n: int) -> Node:
        """Repeat a vector [d] into [n, d]."""
        x = _as_node(x)
        xv = x.value
        if xv.ndim != 1:
            raise ShapeError(f"tile_rows: expected a vector, got {xv.shape}")
        out = np.broadcast_to(xv, (n, xv.shape[0])).copy()
        return self._record(out, (x,), lambda g: (g.sum(axis=0),))

    def concat(self, parts: Sequence, axis: int = -1) -> Node:
        parts = [_as_node(p) for p in parts]
        vals = [p.value for p in parts]
        out = np.concatenate(vals, axis=axis)
        sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

        def backward(g):
            return tuple(np.split(g, sizes, axis=axis))

        return self._record(out, tuple(parts), backward)

    def slice_last(self, x, start: int, stop: int) -> Node:
        x = _as_node(x)
        xv = x.value
        out = xv[..., start:stop]

        def backward(g):
            full = np.zeros_like(xv)
            full[..., start:stop] = g
            return (full,)

        return self._record(out, (x,), backward)

    def reshape(self, x, shape) -> Node:
        x = _as_node(x)
        old = x.value.shape
        return self._record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))

    def gaussian_nll(self, target, mean, std) -> Node:
        """Sum over elements of ``0.5*log(2*pi*std^2) + (target-mean)^2 / (2*std^2)``."""
        target, mean, std = _as_node(target), _as_node(mean), _as_node(std)
        tv, mv, sv = target.value, mean.value, std.value
        if not (tv.shape == mv.shape == sv.shape):
            raise ShapeError(f"gaussian_nll: target {tv.shape}, mean {mv.shape}, std {sv.shape}")
        if np.any(~(sv > 0)):
            raise ValueError("gaussian_nll: std must be strictly positive")
        t64, m64, s64 = (np.asarray(a, dtype=np.float64) for a in (tv, mv, sv))
        resid = t64 - m64
        var = s64 * s64
        val = np.sum(0.5 * np.log(2.0 * np.pi * var) + resid * resid / (2.0 * var))
        out = np.asarray(val, dtype=np.float64)

        def backward(g):
            g = float(g)
            gm = (-g * resid / var).astype(mv.dtype)
            gs = (g * (1.0 / s64 - resid * resid / (var * s64))).astype(sv.dtype)
            gt = (g * resid / var).astype(tv.dtype)
            return gt, gm, gs

        return self._record(out, (target, mean, std), backward)

    def mse(self, pred, target) -> Node:
        """Mean of squared differences, accumulated in float64."""
        pred, target = _as_node(pred), _as_node(target)
        pv, tv = pred.value, target.value
        if pv.shape != tv.shape:
            raise ShapeError(f"mse: {pv.shape} vs {tv.shape}")
        diff = np.asarray(pv, dtype=np.float64) - np.asarray(tv, dtype=np.float64)
        n = diff.size
        out = np.asarray(np.mean(diff * diff), dtype=np.float64)

        def backward(g):
            gp = (2.0 * float(g) / n) * diff
            return gp.astype(pv.dtype), (-gp).astype(tv.dtype)

        return self._record(out, (pred, target), backward)

    def sum_nodes(self, nodes: Sequence[Node]) -> Node:
        nodes = [_as_node(n) for n in nodes]
        out = np.asarray(sum(float(n.value) for n in nodes), dtype=np.float64)
        return self._record(out, tuple(nodes), lambda g: tuple(g for _ in nodes))

    # -- reverse sweep -----------------------------------------------------
    def backward(self, loss: Node) -> None:
        """Fill ``.grad`` on every node reachable from ``loss``."""
        if loss.value.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
        if not self.enabled:
            raise RuntimeError("backward: tape was created with recording disabled")
        for node in self.nodes:
            node.grad = None
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            pgrads = node.backward_fn(node.grad)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pg, copy=True)
                else:
                    parent.grad = parent.grad + pg
