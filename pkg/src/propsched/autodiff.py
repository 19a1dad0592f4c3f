"""Minimal record-and-replay reverse-mode differentiation on numpy arrays.

A ``Tape`` records a DAG of primitive operations during a forward pass; each
node stores its value and a vector-Jacobian closure.  ``Tape.backward`` seeds
gradients at named outputs and accumulates exact 64-bit gradients for every
registered parameter leaf.  The op vocabulary is exactly what the attention
network and its heads need: dense algebra, gathers/scatters over edges,
segment softmax, and the usual nonlinearities.

Tapes are single use: the value buffers may be freed after backward, so a
second backward raises ``TapeConsumed``.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np


class TapeConsumed(RuntimeError):
    """A tape supports exactly one backward pass."""


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    def __init__(self) -> None:
        self._values: list = []
        self._parents: list = []
        self._vjps: list = []
        self.param_refs: dict = {}    # name -> node id
        self.outputs: dict = {}       # name -> node id
        self.consumed = False

    # -- node management ----------------------------------------------------

    def _push(self, value, parents: tuple = (), vjp: Optional[Callable] = None) -> int:
        self._values.append(np.asarray(value, dtype=np.float64))
        self._parents.append(parents)
        self._vjps.append(vjp)
        return len(self._values) - 1

    def value(self, ref: int) -> np.ndarray:
        return self._values[ref]

    def const(self, value) -> int:
        return self._push(value)

    def param(self, name: str, value) -> int:
        if name in self.param_refs:
            return self.param_refs[name]
        ref = self._push(value)
        self.param_refs[name] = ref
        return ref

    def mark_output(self, name: str, ref: int) -> None:
        self.outputs[name] = ref

    # -- dense algebra -------------------------------------------------------

    def matmul(self, a: int, b: int) -> int:
        va, vb = self._values[a], self._values[b]
        return self._push(va @ vb, (a, b),
                          lambda g: (g @ vb.T, va.T @ g))

    def matvec(self, a: int, v: int) -> int:
        va, vv = self._values[a], self._values[v]
        return self._push(va @ vv, (a, v),
                          lambda g: (np.outer(g, vv), va.T @ g))

    def dot(self, u: int, v: int) -> int:
        vu, vv = self._values[u], self._values[v]
        return self._push(vu @ vv, (u, v),
                          lambda g: (g * vv, g * vu))

    def add(self, a: int, b: int) -> int:
        va, vb = self._values[a], self._values[b]
        return self._push(va + vb, (a, b),
                          lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))

    def sub(self, a: int, b: int) -> int:
        va, vb = self._values[a], self._values[b]
        return self._push(va - vb, (a, b),
                          lambda g: (_unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)))

    def mul(self, a: int, b: int) -> int:
        va, vb = self._values[a], self._values[b]
        return self._push(va * vb, (a, b),
                          lambda g: (_unbroadcast(g * vb, va.shape),
                                     _unbroadcast(g * va, vb.shape)))

    def scale(self, a: int, c: float) -> int:
        va = self._values[a]
        return self._push(va * c, (a,), lambda g: (g * c,))

    def neg(self, a: int) -> int:
        return self.scale(a, -1.0)

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self, a: int) -> int:
        out = np.exp(self._values[a])
        return self._push(out, (a,), lambda g: (g * out,))

    def log(self, a: int) -> int:
        va = self._values[a]
        return self._push(np.log(va), (a,), lambda g: (g / va,))

    def leaky_relu(self, a: int, slope: float = 0.2) -> int:
        va = self._values[a]
        grad_mask = np.where(va > 0, 1.0, slope)
        return self._push(np.where(va > 0, va, slope * va), (a,),
                          lambda g: (g * grad_mask,))

    def elu(self, a: int) -> int:
        va = self._values[a]
        out = np.where(va > 0, va, np.exp(np.minimum(va, 0.0)) - 1.0)
        grad_mask = np.where(va > 0, 1.0, out + 1.0)
        return self._push(out, (a,), lambda g: (g * grad_mask,))

    # -- reductions ------------------------------------------------------------

    def sum(self, a: int) -> int:
        va = self._values[a]
        return self._push(va.sum(), (a,), lambda g: (np.full(va.shape, float(g)),))

    def mean_rows(self, a: int) -> int:
        va = self._values[a]
        n = va.shape[0]
        return self._push(va.mean(axis=0), (a,),
                          lambda g: (np.tile(g / n, (n, 1)),))

    # -- structure ops ----------------------------------------------------------

    def gather_rows(self, a: int, idx: np.ndarray) -> int:
        va = self._values[a]
        idx = np.asarray(idx, dtype=np.int64)

        def vjp(g):
            out = np.zeros_like(va)
            np.add.at(out, idx, g)
            return (out,)

        return self._push(va[idx], (a,), vjp)

    def gather1d(self, a: int, idx: np.ndarray) -> int:
        va = self._values[a]
        idx = np.asarray(idx, dtype=np.int64)

        def vjp(g):
            out = np.zeros_like(va)
            np.add.at(out, idx, g)
            return (out,)

        return self._push(va[idx], (a,), vjp)

    def segment_sum(self, a: int, seg: np.ndarray, n: int) -> int:
        va = self._values[a]
        seg = np.asarray(seg, dtype=np.int64)
        out = np.zeros((n,) + va.shape[1:])
        np.add.at(out, seg, va)
        return self._push(out, (a,), lambda g: (g[seg],))

    def segment_softmax(self, a: int, seg: np.ndarray, n: int) -> int:
        """Softmax of a over entries sharing a segment id (per edge-destination)."""
        va = self._values[a]
        seg = np.asarray(seg, dtype=np.int64)
        m = np.full(n, -np.inf)
        np.maximum.at(m, seg, va)
        ex = np.exp(va - m[seg])
        denom = np.zeros(n)
        np.add.at(denom, seg, ex)
        alpha = ex / denom[seg]

        def vjp(g):
            t = np.zeros(n)
            np.add.at(t, seg, alpha * g)
            return (alpha * (g - t[seg]),)

        return self._push(alpha, (a,), vjp)

    def scale_rows(self, a: int, w: int) -> int:
        """Rows of matrix ``a`` scaled by vector ``w``."""
        va, vw = self._values[a], self._values[w]
        return self._push(va * vw[:, None], (a, w),
                          lambda g: (g * vw[:, None], (g * va).sum(axis=1)))

    def concat_rows(self, a: int, b: int) -> int:
        va, vb = self._values[a], self._values[b]
        na = va.shape[0]
        return self._push(np.concatenate([va, vb], axis=0), (a, b),
                          lambda g: (g[:na], g[na:]))

    def concat_cols(self, refs: list) -> int:
        vals = [self._values[r] for r in refs]
        widths = [v.shape[1] for v in vals]
        offs = np.cumsum([0] + widths)

        def vjp(g):
            return tuple(g[:, offs[i]:offs[i + 1]] for i in range(len(vals)))

        return self._push(np.concatenate(vals, axis=1), tuple(refs), vjp)

    def slice1d(self, a: int, lo: int, hi: int) -> int:
        va = self._values[a]

        def vjp(g):
            out = np.zeros_like(va)
            out[lo:hi] = g
            return (out,)

        return self._push(va[lo:hi], (a,), vjp)

    def broadcast_row(self, v: int, n: int) -> int:
        vv = self._values[v]
        return self._push(np.tile(vv, (n, 1)), (v,), lambda g: (g.sum(axis=0),))

    def dropout(self, a: int, rate: float, rng: np.random.Generator) -> int:
        va = self._values[a]
        mask = (rng.random(va.shape) >= rate) / (1.0 - rate)
        return self._push(va * mask, (a,), lambda g: (g * mask,))

    # -- backward ------------------------------------------------------------

    def backward(self, seeds: dict) -> dict:
        """Accumulate gradients from named output seeds back to parameters.

        ``seeds`` maps output names (from ``mark_output``) to gradient arrays
        of matching shape.  Returns {param name: gradient}, with zeros for
        parameters the seeded outputs do not reach.
        """
        if self.consumed:
            raise TapeConsumed("tape already consumed by a backward pass")
        self.consumed = True
        grads: dict = {}
        for name, g in seeds.items():
            ref = self.outputs[name]
            g = np.asarray(g, dtype=np.float64)
            if ref in grads:
                grads[ref] = grads[ref] + g
            else:
                grads[ref] = np.broadcast_to(g, self._values[ref].shape).astype(np.float64)
        for ref in range(len(self._values) - 1, -1, -1):
            if ref not in grads or self._vjps[ref] is None:
                continue
            parent_grads = self._vjps[ref](grads[ref])
            for pid, pg in zip(self._parents[ref], parent_grads):
                if pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        out = {}
        for name, ref in self.param_refs.items():
            g = grads.get(ref)
            out[name] = np.zeros_like(self._values[ref]) if g is None else np.asarray(g)
        return out
