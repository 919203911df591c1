"""Brute-force reference implementations for tests.

Nothing here imports from the rest of the package: these are plain numpy
loops written to be obviously correct, never fast. Keep inputs tiny.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


def _src_index(i: int, n: int, mode: str) -> int | None:
    if 0 <= i < n:
        return i
    if mode == "zeros":
        return None
    if mode == "reflect":
        if n == 1:
            return 0
        # bounce off the edges until inside
        while i < 0 or i >= n:
            if i < 0:
                i = -i
            if i >= n:
                i = 2 * (n - 1) - i
        return i
    raise ValueError(f"unknown padding mode {mode!r}")


def conv2d_reference(x, kernel, padding_mode: str = "zeros", bias=None) -> np.ndarray:
    """Same-size 2-D cross-correlation by explicit loops.

    ``x`` is (C_in, H, W); ``kernel`` is (C_out, C_in, kh, kw) with odd sizes.
    A 2-D ``kernel`` with a 2-D ``x`` is treated as single channel in and out.
    """
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    squeeze = False
    if x.ndim == 2 and k.ndim == 2:
        x, k, squeeze = x[None], k[None, None], True
    if x.ndim != 3 or k.ndim != 4 or k.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: input {x.shape}, kernel {k.shape}")
    c_out, c_in, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel sizes must be odd")
    _, h, w = x.shape
    rh, rw = kh // 2, kw // 2
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for r in range(h):
            for c in range(w):
                acc = 0.0 if bias is None else float(bias[o])
                for ci in range(c_in):
                    for dy in range(kh):
                        sy = _src_index(r + dy - rh, h, padding_mode)
                        if sy is None:
                            continue
                        for dx in range(kw):
                            sx = _src_index(c + dx - rw, w, padding_mode)
                            if sx is None:
                                continue
                            acc += k[o, ci, dy, dx] * x[ci, sy, sx]
                out[o, r, c] = acc
    return out[0] if squeeze else out


def gaussian_weights_reference(sigma: float, radius: int) -> np.ndarray:
    w = np.empty((2 * radius + 1, 2 * radius + 1))
    for i in range(-radius, radius + 1):
        for j in range(-radius, radius + 1):
            w[i + radius, j + radius] = math.exp(-(i * i + j * j) / (2.0 * sigma * sigma))
    return w / w.sum()


def dog_reference(x, sigma_lo: float, sigma_hi: float) -> np.ndarray:
    """Channel-wise DoG via the loop convolution with reflect padding."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    k_lo = gaussian_weights_reference(sigma_lo, max(1, math.ceil(3 * sigma_lo)))
    k_hi = gaussian_weights_reference(sigma_hi, max(1, math.ceil(3 * sigma_hi)))
    for m in range(x.shape[0]):
        out[m] = conv2d_reference(x[m], k_hi, "reflect") - conv2d_reference(x[m], k_lo, "reflect")
    return out


def masked_average_pool_reference(features, mask) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    m, h, w = features.shape
    out = np.zeros(m)
    count = 0
    for r in range(h):
        for c in range(w):
            if mask[r][c]:
                count += 1
                for ch in range(m):
                    out[ch] += features[ch, r, c]
    if count == 0:
        raise ValueError("empty foreground")
    return out / count


def bce_reference(probs, truth, eps: float = 1e-7) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    total = 0.0
    n = 0
    for p, t in zip(probs.ravel(), np.asarray(truth).ravel()):
        p = min(max(float(p), eps), 1.0 - eps)
        total += -(t * math.log(p) + (1 - t) * math.log(1.0 - p))
        n += 1
    return total / n


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def convlstm_step_reference(x, h_prev, c_prev, wx, wh, wc, b):
    """Gate-by-gate ConvLSTM step with peepholes.

    ``wx``/``wh``/``b`` are dicts keyed by gate name (i, f, o, c) holding
    (D, C_in, k, k) / (D, D, k, k) / (D,) arrays; ``wc`` holds (D,) peephole
    vectors for i, f, o. Convolutions use zero padding.
    """
    def pre(g):
        return (conv2d_reference(x, wx[g], "zeros") + conv2d_reference(h_prev, wh[g], "zeros")
                + np.asarray(b[g])[:, None, None])

    c_prev = np.asarray(c_prev, dtype=np.float64)
    i = _sigmoid(pre("i") + np.asarray(wc["i"])[:, None, None] * c_prev)
    f = _sigmoid(pre("f") + np.asarray(wc["f"])[:, None, None] * c_prev)
    o = _sigmoid(pre("o") + np.asarray(wc["o"])[:, None, None] * c_prev)
    cand = np.tanh(pre("c"))
    c = f * c_prev + i * cand
    h = o * np.tanh(c)
    return h, c


@dataclass(frozen=True)
class FiniteDiffSpec:
    epsilon: float = 1e-5
    scheme: str = "central"
    tolerance: float = 1e-4

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.scheme != "central":
            raise ValueError("only central differences are supported")


def finite_diff_gradient(function: Callable[[np.ndarray], float], params, spec: FiniteDiffSpec = FiniteDiffSpec()) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat parameter vector."""
    x = np.array(params, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    eps = spec.epsilon
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        fp = float(function(x))
        flat[j] = orig - eps
        fm = float(function(x))
        flat[j] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {j}: f+={fp}, f-={fm}")
        grad[j] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def relative_error(a, b) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||, tiny)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)
