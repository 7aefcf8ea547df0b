"""Minimal MLP kernel with two interchangeable arithmetic modes.

Float mode is plain numpy float64.  Fixed mode runs every operation on the
integer grid from fixedpoint.py, which is the arithmetic the two-party
protocol performs; a centralized trainer using fixed mode is therefore a
bit-exact reference for protocol training, not an approximation of it.

Both modes share the same seeded initialization (fixed mode quantizes the
float init), so a float run and a fixed run of the same configuration start
from the same weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from .errors import ConfigError, CryptoError
from .fixedpoint import (
    GridMat,
    GridVec,
    dequantize,
    fx_matvec,
    fx_matvec_t,
    fx_outer,
    fx_rate_step_mat,
    fx_sub_mat,
    quantize,
    quantize_mat,
    quantize_vec,
    rescale_vec,
    rescale_mat,
)

LOG_CLAMP = 1e-12

FLOAT_MODE = "float"
FIXED_MODE = "fixed"


@dataclass
class Hyperparams:
    learning_rate: float = 0.125
    batch_size: int = 1
    epochs: int = 1
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.learning_rate < 0:
            problems.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if problems:
            raise ConfigError("; ".join(problems))


# ---------------------------------------------------------------------------
# Float kernels
# ---------------------------------------------------------------------------


def init_dense(n_out: int, n_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = 1.0 / np.sqrt(n_in)
    return rng.uniform(-limit, limit, size=(n_out, n_in))


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(p: np.ndarray, t: np.ndarray) -> float:
    return float(-np.sum(t * np.log(np.maximum(p, LOG_CLAMP))))


def grad_logits(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    # d(cross_entropy(softmax(z), t))/dz for one-hot t.
    return p - t


# ---------------------------------------------------------------------------
# Feature extractor (the input-owner's private stack)
# ---------------------------------------------------------------------------


class FeatureExtractor:
    """Dense+ReLU stack over either float64 or grid-integer weights.

    Weights are W_i with shape (out, in); the forward map is
    a_0 = x, a_{i+1} = relu(W_i a_i).  No biases: the final hidden vector
    feeds a bias-free linear head, and keeping the same convention in every
    layer keeps the fixed path small.
    """

    def __init__(self, weights, mode: str, frac_bits: int):
        if mode not in (FLOAT_MODE, FIXED_MODE):
            raise ConfigError(f"unknown arithmetic mode {mode!r}")
        self.mode = mode
        self.frac_bits = frac_bits
        self.weights = weights  # list of np.ndarray or GridMat

    @classmethod
    def build(
        cls, dims: Sequence[int], seed: int, mode: str = FLOAT_MODE, frac_bits: int = 32
    ) -> "FeatureExtractor":
        """dims = (d_in, h1, ..., hk); weights drawn uniform +-1/sqrt(fan_in)."""
        if len(dims) < 2:
            raise ConfigError("extractor needs at least input and one hidden width")
        rng = np.random.default_rng(seed)
        float_weights = [init_dense(dims[i + 1], dims[i], rng) for i in range(len(dims) - 1)]
        if mode == FIXED_MODE:
            return cls([quantize_mat(w, frac_bits) for w in float_weights], mode, frac_bits)
        return cls(float_weights, mode, frac_bits)

    @property
    def out_dim(self) -> int:
        last = self.weights[-1]
        return len(last) if self.mode == FIXED_MODE else last.shape[0]

    @property
    def in_dim(self) -> int:
        first = self.weights[0]
        return len(first[0]) if self.mode == FIXED_MODE else first.shape[1]

    def forward(self, x: np.ndarray):
        """Returns (activation, cache); activation is float vec or GridVec."""
        if self.mode == FLOAT_MODE:
            pre = []
            a = np.asarray(x, dtype=np.float64)
            inputs = []
            for w in self.weights:
                inputs.append(a)
                z = w @ a
                pre.append(z)
                a = relu(z)
            return a, (inputs, pre)
        f = self.frac_bits
        a_int = quantize_vec(x, f)
        inputs = []
        pre = []
        for w in self.weights:
            inputs.append(a_int)
            z_int = rescale_vec(fx_matvec(w, a_int), f)
            pre.append(z_int)
            a_int = [v if v > 0 else 0 for v in z_int]
        return a_int, (inputs, pre)

    def backward(self, cache, upstream):
        """Gradients of the loss w.r.t. each weight matrix.

        ``upstream`` is dLoss/d(activation) at the extractor output: a float
        vector in float mode, a scale-f GridVec in fixed mode.
        """
        inputs, pre = cache
        grads = [None] * len(self.weights)
        u = upstream
        for i in reversed(range(len(self.weights))):
            if self.mode == FLOAT_MODE:
                u = np.where(pre[i] > 0, u, 0.0)
                grads[i] = np.outer(u, inputs[i])
                if i:
                    u = self.weights[i].T @ u
            else:
                f = self.frac_bits
                u = [uv if zv > 0 else 0 for uv, zv in zip(u, pre[i], strict=True)]
                grads[i] = rescale_mat(fx_outer(u, inputs[i]), f)
                if i:
                    u = rescale_vec(fx_matvec_t(self.weights[i], u), f)
        return grads

    def zero_grads(self):
        if self.mode == FLOAT_MODE:
            return [np.zeros_like(w) for w in self.weights]
        return [[[0] * len(w[0]) for _ in range(len(w))] for w in self.weights]

    def add_grads(self, acc, grads):
        if self.mode == FLOAT_MODE:
            return [a + g for a, g in zip(acc, grads, strict=True)]
        return [
            [[av + gv for av, gv in zip(arow, grow)] for arow, grow in zip(am, gm)]
            for am, gm in zip(acc, grads, strict=True)
        ]

    def apply_update(self, grads, learning_rate: float) -> None:
        if self.mode == FLOAT_MODE:
            for w, g in zip(self.weights, grads, strict=True):
                w -= learning_rate * g
            return
        rate_int = quantize(learning_rate, self.frac_bits)
        self.weights = [
            fx_sub_mat(w, fx_rate_step_mat(rate_int, g, self.frac_bits))
            for w, g in zip(self.weights, grads, strict=True)
        ]

    def snapshot(self):
        if self.mode == FLOAT_MODE:
            return [w.copy() for w in self.weights]
        return [[row[:] for row in w] for w in self.weights]

    def restore(self, state) -> None:
        self.weights = state if self.mode == FIXED_MODE else [w.copy() for w in state]

    def weights_float(self) -> list[np.ndarray]:
        """Weights as float64 regardless of mode (fixed mode dequantizes)."""
        if self.mode == FLOAT_MODE:
            return [w.copy() for w in self.weights]
        f = self.frac_bits
        return [
            np.array([[dequantize(v, f) for v in row] for row in w], dtype=np.float64)
            for w in self.weights
        ]


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    d_in: int, d_hidden: int, n_classes: int, seed: int, eps: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Builds a random float-mode net (one hidden layer plus linear head),
    one random sample, and compares every parameter gradient.  Draws are
    retried when a pre-activation sits within 1e-3 of the ReLU kink, where
    finite differences are meaningless.
    """
    for attempt in range(64):
        rng = np.random.default_rng(seed + 1009 * attempt)
        ex = FeatureExtractor.build((d_in, d_hidden), seed=seed + 1009 * attempt)
        w2 = init_dense(n_classes, d_hidden, rng)
        x = rng.normal(size=d_in)
        t = np.zeros(n_classes)
        t[int(rng.integers(n_classes))] = 1.0
        a, cache = ex.forward(x)
        (_, pre) = cache
        if min(float(np.min(np.abs(z))) for z in pre) > 1e-3:
            break
    else:  # pragma: no cover - vanishing probability
        raise ConfigError("could not draw a configuration clear of ReLU kinks")

    def loss_at(w1_mat: np.ndarray, w2_mat: np.ndarray) -> float:
        probe = FeatureExtractor([w1_mat], FLOAT_MODE, ex.frac_bits)
        a_h, _ = probe.forward(x)
        return cross_entropy(softmax(w2_mat @ a_h), t)

    p = softmax(w2 @ a)
    g = grad_logits(p, t)
    analytic_w2 = np.outer(g, a)
    analytic_w1 = ex.backward(cache, w2.T @ g)[0]

    worst = 0.0
    for mat, analytic in ((ex.weights[0], analytic_w1), (w2, analytic_w2)):
        numeric = np.zeros_like(mat)
        it = np.nditer(mat, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = mat[idx]
            mat[idx] = orig + eps
            hi = loss_at(ex.weights[0], w2)
            mat[idx] = orig - eps
            lo = loss_at(ex.weights[0], w2)
            mat[idx] = orig
            numeric[idx] = (hi - lo) / (2 * eps)
        denom = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric))) / denom)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 0x01


def save_weights(path, mats, mode: str, frac_bits: int) -> None:
    """Version-tagged binary container: shapes, then row-major elements."""
    with open(path, "wb") as out:
        out.write(struct.pack(">BBH", CHECKPOINT_VERSION, 1 if mode == FIXED_MODE else 0, frac_bits))
        out.write(struct.pack(">B", len(mats)))
        for mat in mats:
            _write_matrix(out, mat, mode)


def load_weights(path):
    """Returns (mats, mode, frac_bits); mats match the mode they were saved in."""
    with open(path, "rb") as src:
        version, mode_flag, frac_bits = struct.unpack(">BBH", _read_exact(src, 4))
        if version != CHECKPOINT_VERSION:
            raise CryptoError(f"unsupported checkpoint version {version:#x}")
        mode = FIXED_MODE if mode_flag else FLOAT_MODE
        (count,) = struct.unpack(">B", _read_exact(src, 1))
        mats = [_read_matrix(src, mode) for _ in range(count)]
    return mats, mode, frac_bits


def _write_matrix(out: BinaryIO, mat, mode: str) -> None:
    if mode == FIXED_MODE:
        rows, cols = len(mat), len(mat[0]) if mat else 0
        out.write(struct.pack(">II", rows, cols))
        for row in mat:
            for v in row:
                out.write(b"\x01" if v < 0 else b"\x00")
                raw = abs(v).to_bytes((abs(v).bit_length() + 7) // 8, "big")
                out.write(struct.pack(">I", len(raw)))
                out.write(raw)
    else:
        arr = np.asarray(mat, dtype=np.float64)
        out.write(struct.pack(">II", *arr.shape))
        out.write(struct.pack(f">{arr.size}d", *arr.reshape(-1)))


def _read_matrix(src: BinaryIO, mode: str):
    rows, cols = struct.unpack(">II", _read_exact(src, 8))
    if rows * cols > (1 << 24):
        raise CryptoError("checkpoint matrix exceeds sanity cap")
    if mode == FIXED_MODE:
        mat: GridMat = []
        for _ in range(rows):
            row: GridVec = []
            for _ in range(cols):
                sign = _read_exact(src, 1)[0]
                (length,) = struct.unpack(">I", _read_exact(src, 4))
                v = int.from_bytes(_read_exact(src, length), "big")
                row.append(-v if sign else v)
            mat.append(row)
        return mat
    flat = struct.unpack(f">{rows * cols}d", _read_exact(src, 8 * rows * cols))
    return np.array(flat, dtype=np.float64).reshape(rows, cols)


def _read_exact(src: BinaryIO, count: int) -> bytes:
    data = src.read(count)
    if len(data) != count:
        raise CryptoError(f"truncated checkpoint: wanted {count} bytes, got {len(data)}")
    return data
