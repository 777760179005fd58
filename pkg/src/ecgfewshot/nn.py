"""Minimal convolutional embedding network with hand-written backprop.

Architecture: a stack of (3x3 conv, stride 1, pad 1 -> ReLU -> 2x2 max pool)
blocks followed by flatten and a linear head. Activations are channels-last
(N, H, W, C); convolutions run as im2col + GEMM with preallocated scratch
buffers, which is what keeps episode steps fast on CPU.

Everything is deterministic given the init seed: pooling ties route the
gradient to the first tied element (only exact zeros tie after ReLU, where
the ReLU derivative kills the gradient anyway), and all reductions are
single-threaded numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch


class _ConvScratch:
    """Per-(layer, batch-size) scratch buffers reused across steps."""

    def __init__(self, n, h, w, ci, co, dtype, need_dx):
        self.xp = np.zeros((n, h + 2, w + 2, ci), dtype)
        self.col = np.empty((n, h, w, 3, 3, ci), dtype)
        self.y = np.empty((n * h * w, co), dtype)
        self.dxp = np.zeros((n, h + 2, w + 2, ci), dtype) if need_dx else None
        self.dcol = np.empty((n * h * w, 9 * ci), dtype) if need_dx else None


class ConvBlock:
    """3x3 same conv + ReLU + 2x2 max pool."""

    def __init__(self, c_in, c_out, h, w, dtype, first=False):
        self.c_in, self.c_out = c_in, c_out
        self.h, self.w = h, w
        self.dtype = dtype
        self.first = first  # input gradient not needed for the first block
        self.weight = np.zeros((3, 3, c_in, c_out), dtype)
        self.bias = np.zeros(c_out, dtype)
        self._scratch = {}
        # set in forward, consumed by backward
        self._x2 = None
        self._relu = None
        self._pooled = None

    def _get_scratch(self, n):
        key = n
        if key not in self._scratch:
            if len(self._scratch) > 4:
                self._scratch.clear()
            self._scratch[key] = _ConvScratch(
                n, self.h, self.w, self.c_in, self.c_out, self.dtype, not self.first
            )
        return self._scratch[key]

    def forward(self, x):
        n, h, w, ci = x.shape
        if (h, w, ci) != (self.h, self.w, self.c_in):
            raise ShapeMismatch(
                f"conv block expected (*, {self.h}, {self.w}, {self.c_in}), got {x.shape}"
            )
        s = self._get_scratch(n)
        s.xp[:, 1:-1, 1:-1, :] = x
        for a in range(3):
            for b in range(3):
                s.col[:, :, :, a, b, :] = s.xp[:, a : a + h, b : b + w, :]
        x2 = s.col.reshape(n * h * w, 9 * ci)
        np.matmul(x2, self.weight.reshape(9 * ci, self.c_out), out=s.y)
        s.y += self.bias
        y = s.y.reshape(n, h, w, self.c_out)
        np.maximum(y, 0, out=y)
        q = (
            y[:, 0::2, 0::2, :],
            y[:, 0::2, 1::2, :],
            y[:, 1::2, 0::2, :],
            y[:, 1::2, 1::2, :],
        )
        pooled = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
        self._x2, self._relu, self._pooled = x2, y, pooled
        return pooled

    def backward(self, d_pooled):
        """Gradient through pool, ReLU and conv; returns (dW, db, dx)."""
        y, pooled = self._relu, self._pooled
        n = y.shape[0]
        h, w = self.h, self.w
        s = self._get_scratch(n)
        dr = np.empty_like(y)
        quads = (
            (y[:, 0::2, 0::2, :], dr[:, 0::2, 0::2, :]),
            (y[:, 0::2, 1::2, :], dr[:, 0::2, 1::2, :]),
            (y[:, 1::2, 0::2, :], dr[:, 1::2, 0::2, :]),
            (y[:, 1::2, 1::2, :], dr[:, 1::2, 1::2, :]),
        )
        # route to the first quadrant matching the max; require src > 0 so the
        # ReLU derivative (0 at clipped activations) is folded in for free
        remaining = np.ones(d_pooled.shape, dtype=bool)
        for src, dst in quads:
            at_max = src == pooled
            m = at_max & remaining
            m &= src > 0
            np.multiply(d_pooled, m, out=dst)
            remaining &= ~at_max
        dy2 = dr.reshape(n * h * w, self.c_out)
        dw = (self._x2.T @ dy2).reshape(self.weight.shape)
        db = dy2.sum(axis=0)
        if self.first:
            return dw, db, None
        wm = self.weight.reshape(9 * self.c_in, self.c_out)
        np.matmul(dy2, wm.T, out=s.dcol)
        dcol = s.dcol.reshape(n, h, w, 3, 3, self.c_in)
        s.dxp[:] = 0
        for a in range(3):
            for b in range(3):
                s.dxp[:, a : a + h, b : b + w, :] += dcol[:, :, :, a, b, :]
        return dw, db, s.dxp[:, 1:-1, 1:-1, :]


class EmbeddingNet:
    """Conv-block stack + linear head producing fixed-size embeddings.

    Input images are (N, H, W, 3) floats in [0, 1]; output embeddings are
    (N, embed_dim). dtype float32 is the standard mode; float64 is the
    high-precision mode used for gradient checks.
    """

    def __init__(self, input_hw, channels=(32, 32, 64, 64), embed_dim=64,
                 seed=0, dtype=np.float32):
        h, w = input_hw
        if h % (2 ** len(channels)) or w % (2 ** len(channels)):
            raise ShapeMismatch(
                f"input {input_hw} not divisible by 2^{len(channels)} pooling"
            )
        self.input_hw = (h, w)
        self.channels = tuple(channels)
        self.embed_dim = embed_dim
        self.dtype = np.dtype(dtype)
        self.blocks = []
        c_in = 3
        for i, c_out in enumerate(channels):
            self.blocks.append(ConvBlock(c_in, c_out, h, w, self.dtype, first=(i == 0)))
            c_in = c_out
            h //= 2
            w //= 2
        self.head_in = h * w * c_in
        self.head_w = np.zeros((self.head_in, embed_dim), self.dtype)
        self.head_b = np.zeros(embed_dim, self.dtype)
        self._head_x = None
        self.init_params(seed)

    def init_params(self, seed):
        rng = np.random.default_rng(seed)
        for blk in self.blocks:
            fan_in = 9 * blk.c_in
            blk.weight[:] = (rng.standard_normal(blk.weight.shape) * np.sqrt(2.0 / fan_in)).astype(self.dtype)
            blk.bias[:] = 0
        self.head_w[:] = (rng.standard_normal(self.head_w.shape) * np.sqrt(1.0 / self.head_in)).astype(self.dtype)
        self.head_b[:] = 0

    # --- parameter plumbing ---

    def param_items(self):
        for i, blk in enumerate(self.blocks):
            yield f"block{i}.weight", blk.weight
            yield f"block{i}.bias", blk.bias
        yield "head.weight", self.head_w
        yield "head.bias", self.head_b

    def params(self) -> dict:
        return dict(self.param_items())

    def set_params(self, params: dict):
        for name, arr in self.param_items():
            arr[:] = params[name].astype(self.dtype)

    @property
    def n_params(self) -> int:
        return sum(a.size for _, a in self.param_items())

    # --- forward/backward ---

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, self.dtype)
        if x.ndim != 4 or x.shape[1:3] != self.input_hw or x.shape[3] != 3:
            raise ShapeMismatch(
                f"expected (N, {self.input_hw[0]}, {self.input_hw[1]}, 3), got {x.shape}"
            )
        for blk in self.blocks:
            x = blk.forward(x)
        flat = x.reshape(x.shape[0], self.head_in)
        self._head_x = flat
        return flat @ self.head_w + self.head_b

    def backward(self, d_emb) -> dict:
        """Gradients of a scalar loss wrt all parameters, given dL/d(embeddings).

        Must follow a forward() call on the same batch.
        """
        d_emb = np.asarray(d_emb, self.dtype)
        grads = {
            "head.weight": self._head_x.T @ d_emb,
            "head.bias": d_emb.sum(axis=0),
        }
        dx = (d_emb @ self.head_w.T).reshape(
            (d_emb.shape[0],) + self._shape_after_blocks()
        )
        for i in reversed(range(len(self.blocks))):
            dw, db, dx = self.blocks[i].backward(dx)
            grads[f"block{i}.weight"] = dw
            grads[f"block{i}.bias"] = db
        return grads

    def _shape_after_blocks(self):
        f = 2 ** len(self.blocks)
        return (self.input_hw[0] // f, self.input_hw[1] // f, self.channels[-1])


class Adam:
    """Adam optimizer over a named parameter dict."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
