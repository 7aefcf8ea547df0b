"""Fixed-point codec: reals on a dyadic grid, embedded in Z_n for encryption.

A value x is stored as the integer v = round(x * 2^f) at scale f, or at
scale 2f after exactly one multiplication.  Negative values embed into the
upper half of Z_n (v mod n), so every encoded integer must stay strictly
below n/2 in magnitude; the codec checks this instead of letting values
wrap silently.

Two rounding rules coexist on purpose:

* ``quantize`` (float -> grid) rounds half away from zero.
* ``rescale`` (scale 2f -> f) rounds half up, i.e. floor((v + 2^(f-1)) / 2^f).

Rescaling must satisfy rescale(v + k * 2^f) == rescale(v) + k for every v
and k, because blinding noise added at scale 2f is later removed at scale f
and has to pass through the division without disturbing the payload's own
rounding.  Half-away rounding breaks that identity at exact midpoints;
half-up keeps it, so rescale uses half-up.

The fx_* helpers are the plaintext integer kernels.  The protocol parties,
the encrypted-tensor ops, and the centralized reference trainer all share
them, which is what makes bit-exact cross-checks meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import MagnitudeError, ScaleError

DEFAULT_FRAC_BITS = 32

GridVec = list[int]
GridMat = list[list[int]]


@dataclass(frozen=True)
class FixedScale:
    """Grid geometry: fraction bits f and the modulus n values embed into."""

    frac_bits: int
    n: int

    @property
    def factor(self) -> int:
        return 1 << self.frac_bits

    @property
    def double_factor(self) -> int:
        return 1 << (2 * self.frac_bits)

    @property
    def bound(self) -> float:
        """Largest representable magnitude at scale f: n / 2^(f+1)."""
        return self.n / (1 << (self.frac_bits + 1))

    def scale_factor(self, scale: int) -> int:
        if scale == self.frac_bits:
            return self.factor
        if scale == 2 * self.frac_bits:
            return self.double_factor
        raise ScaleError(f"scale {scale} is neither f={self.frac_bits} nor 2f")


# ---------------------------------------------------------------------------
# Scalar codec
# ---------------------------------------------------------------------------


def quantize(x: float, frac_bits: int) -> int:
    """Round x * 2^frac_bits to an integer, halves away from zero."""
    m = float(x) * float(1 << frac_bits)
    if not math.isfinite(m):
        raise MagnitudeError(f"cannot quantize non-finite value {x!r}")
    if m >= 0:
        return math.floor(m + 0.5)
    return -math.floor(-m + 0.5)


def dequantize(v: int, scale: int) -> float:
    return v / (1 << scale)


def to_modular(v: int, n: int) -> int:
    """Embed a signed grid integer into Z_n (upper half holds negatives)."""
    if 2 * abs(v) >= n:
        raise MagnitudeError(f"|{v}| >= n/2 cannot embed without sign ambiguity")
    return v % n

def to_signed(v: int, n: int) -> int:
    """Inverse of to_modular: values above n/2 are negative."""
    if not 0 <= v < n:
        raise MagnitudeError(f"{v} outside [0, n)")
    return v - n if 2 * v > n else v


def encode(x: float, fs: FixedScale, scale: int | None = None) -> int:
    """Quantize a real at the given scale (default f) and embed into Z_n."""
    scale = fs.frac_bits if scale is None else scale
    fs.scale_factor(scale)
    v = quantize(x, scale)
    return to_modular(v, fs.n)


def decode(v: int, fs: FixedScale, scale: int | None = None) -> float:
    """Map a Z_n element back to the real it encodes at the given scale."""
    scale = fs.frac_bits if scale is None else scale
    fs.scale_factor(scale)
    return dequantize(to_signed(v, fs.n), scale)


def rescale(v: int, frac_bits: int) -> int:
    """Drop one factor of 2^f from a scale-2f integer, rounding half up.

    Additive in whole grid steps: rescale(v + k * 2^f) == rescale(v) + k.
    """
    return (v + (1 << (frac_bits - 1))) >> frac_bits


def fixed_mul(a: int, b: int, frac_bits: int) -> int:
    """Product of two scale-f integers, brought back to scale f."""
    return rescale(a * b, frac_bits)


def blinding_step(rate_int: int, frac_bits: int) -> int:
    """Smallest grid stride s with rate_int * s divisible by 2^frac_bits.

    Gradient blinding noise is drawn as a multiple of this stride so that
    rate_int * noise / 2^f is exact: the noise's effect on a weight update
    then lands on the grid with no rounding, and the ledger of issued noise
    stays bit-consistent with the update the other party actually applies.
    A dyadic rate 2^-k gives stride 2^k (noise granularity 2^(k-f), still
    fine-grained in real terms); odd grid rates coarsen it all the way to
    2^f, i.e. whole-integer noise only.
    """
    if rate_int < 0:
        raise MagnitudeError(f"learning-rate grid value must be >= 0, got {rate_int}")
    return (1 << frac_bits) // math.gcd(rate_int, 1 << frac_bits)


# ---------------------------------------------------------------------------
# Grid vectors and matrices (plain Python ints, overflow-free)
# ---------------------------------------------------------------------------


def quantize_vec(xs, frac_bits: int) -> GridVec:
    return [quantize(x, frac_bits) for x in xs]


def quantize_mat(rows, frac_bits: int) -> GridMat:
    return [[quantize(x, frac_bits) for x in row] for row in rows]


def dequantize_vec(vs: GridVec, scale: int) -> list[float]:
    return [dequantize(v, scale) for v in vs]


def dequantize_mat(m: GridMat, scale: int) -> list[list[float]]:
    return [[dequantize(v, scale) for v in row] for row in m]


def rescale_vec(vs: GridVec, frac_bits: int) -> GridVec:
    return [rescale(v, frac_bits) for v in vs]


def rescale_mat(m: GridMat, frac_bits: int) -> GridMat:
    return [[rescale(v, frac_bits) for v in row] for row in m]


def fx_matvec(w: GridMat, x: GridVec) -> GridVec:
    """Integer W @ x; inputs at scale f, output at scale 2f (no rescale)."""
    if w and len(w[0]) != len(x):
        raise MagnitudeError(f"matvec shape mismatch: {len(w[0])} columns vs {len(x)}")
    return [sum(wk * xk for wk, xk in zip(row, x)) for row in w]


def fx_matvec_t(w: GridMat, y: GridVec) -> GridVec:
    """Integer W^T @ y; inputs at scale f, output at scale 2f."""
    if len(w) != len(y):
        raise MagnitudeError(f"matvec_t shape mismatch: {len(w)} rows vs {len(y)}")
    cols = len(w[0]) if w else 0
    return [sum(w[j][k] * y[j] for j in range(len(w))) for k in range(cols)]


def fx_outer(g: GridVec, a: GridVec) -> GridMat:
    """Integer outer product g a^T; inputs at scale f, output at scale 2f."""
    return [[gj * ak for ak in a] for gj in g]


def fx_add_vec(a: GridVec, b: GridVec) -> GridVec:
    return [x + y for x, y in zip(a, b, strict=True)]


def fx_sub_vec(a: GridVec, b: GridVec) -> GridVec:
    return [x - y for x, y in zip(a, b, strict=True)]


def fx_add_mat(a: GridMat, b: GridMat) -> GridMat:
    return [fx_add_vec(ra, rb) for ra, rb in zip(a, b, strict=True)]


def fx_sub_mat(a: GridMat, b: GridMat) -> GridMat:
    return [fx_sub_vec(ra, rb) for ra, rb in zip(a, b, strict=True)]


def fx_rate_step_mat(rate_int: int, grad: GridMat, frac_bits: int) -> GridMat:
    """Learning-rate times gradient, elementwise, staying at scale f."""
    return [[fixed_mul(rate_int, v, frac_bits) for v in row] for row in grad]


def fx_max_abs(rows: GridMat | GridVec) -> int:
    if rows and isinstance(rows[0], list):
        return max((abs(v) for row in rows for v in row), default=0)
    return max((abs(v) for v in rows), default=0)
