"""Graph-building helpers for the layer types the substrate supports."""

from __future__ import annotations

import numpy as np

from acmesim.nn import tensor as T
from acmesim.nn.tensor import Tensor


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else y + b


def attention_heads(x: Tensor, wq, bq, wk, bk, wv, bv) -> tuple[Tensor, Tensor]:
    """Per-head attention outputs.

    x: (B, T, D); w*: (h, D, hd); b*: (h, 1, hd).
    Returns (head outputs (B, h, T, hd), attention probabilities (B, h, T, T)).
    """
    b, t, d = x.shape
    xh = T.reshape(x, (b, 1, t, d))
    q = T.matmul(xh, wq) + bq
    k = T.matmul(xh, wk) + bk
    v = T.matmul(xh, wv) + bv
    hd = wq.shape[-1]
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(hd))
    probs = T.softmax(scores, axis=-1)
    return T.matmul(probs, v), probs


def merge_heads(heads: Tensor, wo: Tensor, bo: Tensor) -> Tensor:
    """(B, h, T, hd) x (h, hd, D) -> (B, T, D), summing head contributions."""
    return T.tsum(T.matmul(heads, wo), axis=1) + bo


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor, b: Tensor
              ) -> tuple[Tensor, Tensor]:
    """Standard LSTM update with gate order (input, forget, cell, output)."""
    n = h.shape[-1]
    z = T.matmul(x, wx) + T.matmul(h, wh) + b
    i = T.sigmoid(z[:, 0:n])
    f = T.sigmoid(z[:, n:2 * n])
    g = T.tanh(z[:, 2 * n:3 * n])
    o = T.sigmoid(z[:, 3 * n:4 * n])
    c_new = f * c + i * g
    h_new = o * T.tanh(c_new)
    return h_new, c_new


def one_hot(idx, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros(idx.shape + (n,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out
