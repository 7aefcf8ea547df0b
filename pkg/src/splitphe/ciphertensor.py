"""Scale-aware encrypted vectors and matrices built on the Paillier core.

Every element of a tensor shares one public key and one fixed-point scale.
Plaintext multiplication is the only scale-raising operation and each
ciphertext admits at most one of them (f -> 2f); the ops here enforce that
discipline, so a ciphertext can never silently accumulate a 3f or 4f scale
that the decoder would misread.

Two API layers:

* real-valued ops (encrypt_vector, ct_matvec, ...) quantize their plaintext
  arguments internally; convenient for callers that live in float land.
* grid ops (encrypt_grid_vector, matvec_grid, ...) take already-quantized
  signed integers; the training protocol uses these so that its arithmetic
  is bit-identical to the plaintext fx_* kernels.

Wire form of a tensor: u8 rank, rank x u32 dims, s16 scale, then each
element.  Cipher elements are length-prefixed big-endian magnitudes;
plaintext grid elements carry one extra leading sign byte.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from io import BytesIO
from typing import BinaryIO, Sequence

from . import paillier
from .errors import CryptoError, MagnitudeError, ScaleError
from .fixedpoint import FixedScale, GridMat, GridVec, fx_max_abs, quantize, to_modular, to_signed
from .paillier import PrivateKey, PublicKey

MAX_TENSOR_ELEMENTS = 1 << 24


@dataclass
class Ciphertext:
    """One encrypted scalar: raw Z_{n^2} value plus its fixed-point scale."""

    pk: PublicKey
    value: int
    scale: int


@dataclass
class CipherVector:
    pk: PublicKey
    scale: int
    values: list[int]

    def __len__(self) -> int:
        return len(self.values)

    def element(self, i: int) -> Ciphertext:
        return Ciphertext(self.pk, self.values[i], self.scale)


@dataclass
class CipherMatrix:
    pk: PublicKey
    scale: int
    rows: list[list[int]]

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.rows), len(self.rows[0]) if self.rows else 0)

    def element(self, j: int, k: int) -> Ciphertext:
        return Ciphertext(self.pk, self.rows[j][k], self.scale)


def _require_same_key(pk: PublicKey, other: PublicKey) -> None:
    if pk.n != other.n:
        raise CryptoError("key mismatch: tensors were encrypted under different keys")


def _require_scale(fs: FixedScale, scale: int) -> None:
    fs.scale_factor(scale)  # raises ScaleError on anything but f / 2f


def _require_mul_input(cv_scale: int, fs: FixedScale) -> None:
    if cv_scale != fs.frac_bits:
        raise ScaleError(
            f"ciphertext at scale {cv_scale} already carries a multiplication; "
            f"only scale-{fs.frac_bits} tensors may be multiplied"
        )


def _check_product_bound(max_mult: int, max_input: int, terms: int, fs: FixedScale) -> None:
    # Worst-case |sum of products| must stay decodable (strictly under n/2).
    if 2 * max_mult * max_input * max(terms, 1) >= fs.n:
        raise MagnitudeError(
            "homomorphic product could exceed n/2: "
            f"|mult|<={max_mult}, |input|<={max_input}, {terms} terms"
        )


# ---------------------------------------------------------------------------
# Encrypt / decrypt
# ---------------------------------------------------------------------------


def encrypt_grid_vector(
    pk: PublicKey,
    values: GridVec,
    fs: FixedScale,
    scale: int | None = None,
    rng: random.Random | None = None,
) -> CipherVector:
    scale = fs.frac_bits if scale is None else scale
    _require_scale(fs, scale)
    raw = [paillier.encrypt(pk, to_modular(v, fs.n), rng) for v in values]
    return CipherVector(pk, scale, raw)


def encrypt_grid_matrix(
    pk: PublicKey,
    rows: GridMat,
    fs: FixedScale,
    scale: int | None = None,
    rng: random.Random | None = None,
) -> CipherMatrix:
    scale = fs.frac_bits if scale is None else scale
    _require_scale(fs, scale)
    raw = [[paillier.encrypt(pk, to_modular(v, fs.n), rng) for v in row] for row in rows]
    return CipherMatrix(pk, scale, raw)


def encrypt_vector(
    pk: PublicKey,
    values: Sequence[float],
    fs: FixedScale,
    scale: int | None = None,
    rng: random.Random | None = None,
) -> CipherVector:
    """Quantize reals at the given scale (default f) and encrypt each."""
    scale = fs.frac_bits if scale is None else scale
    return encrypt_grid_vector(pk, [quantize(x, scale) for x in values], fs, scale, rng)


def decrypt_grid_vector(sk: PrivateKey, cv: CipherVector, fs: FixedScale) -> GridVec:
    _require_same_key(sk.public, cv.pk)
    return [to_signed(paillier.decrypt(sk, c), fs.n) for c in cv.values]


def decrypt_grid_matrix(sk: PrivateKey, cm: CipherMatrix, fs: FixedScale) -> GridMat:
    _require_same_key(sk.public, cm.pk)
    return [[to_signed(paillier.decrypt(sk, c), fs.n) for c in row] for row in cm.rows]


def decrypt_vector(sk: PrivateKey, cv: CipherVector, fs: FixedScale) -> list[float]:
    factor = fs.scale_factor(cv.scale)
    return [v / factor for v in decrypt_grid_vector(sk, cv, fs)]


# ---------------------------------------------------------------------------
# Homomorphic linear algebra
# ---------------------------------------------------------------------------


def matvec_grid(pk: PublicKey, w: GridMat, cv: CipherVector, fs: FixedScale) -> CipherVector:
    """W @ [v]: out_j = sum_k [v_k] * w_jk.  Input scale f, output scale 2f."""
    _require_same_key(pk, cv.pk)
    _require_mul_input(cv.scale, fs)
    if w and len(w[0]) != len(cv.values):
        raise MagnitudeError(f"matvec shape mismatch: {len(w[0])} columns vs {len(cv.values)}")
    _check_product_bound(fx_max_abs(w), fs.factor * _assumed_bound(fs), len(cv.values), fs)
    out: list[int] = []
    for row in w:
        acc: int | None = None
        for wk, ck in zip(row, cv.values):
            term = paillier.mul_plain(pk, ck, to_modular(wk, fs.n))
            acc = term if acc is None else paillier.add_cipher(pk, acc, term)
        if acc is None:
            acc = paillier.encrypt(pk, 0)
        out.append(acc)
    return CipherVector(pk, cv.scale * 2, out)


def outer_grid(pk: PublicKey, g: GridVec, cv: CipherVector, fs: FixedScale) -> CipherMatrix:
    """Outer product g [a]^T: M_jk = [a_k] * g_j.  Output scale 2f."""
    _require_same_key(pk, cv.pk)
    _require_mul_input(cv.scale, fs)
    _check_product_bound(fx_max_abs(g), fs.factor * _assumed_bound(fs), 1, fs)
    rows = [
        [paillier.mul_plain(pk, ck, to_modular(gj, fs.n)) for ck in cv.values] for gj in g
    ]
    return CipherMatrix(pk, cv.scale * 2, rows)


def transpose_matvec_grid(
    pk: PublicKey, cm: CipherMatrix, g: GridVec, fs: FixedScale
) -> CipherVector:
    """[M]^T @ g: out_k = sum_j [M_jk] * g_j.  Input scale f, output scale 2f."""
    _require_same_key(pk, cm.pk)
    _require_mul_input(cm.scale, fs)
    if len(cm.rows) != len(g):
        raise MagnitudeError(f"shape mismatch: {len(cm.rows)} rows vs {len(g)} multipliers")
    _check_product_bound(fx_max_abs(g), fs.factor * _assumed_bound(fs), len(g), fs)
    n_rows, n_cols = cm.shape
    out: list[int] = []
    for k in range(n_cols):
        acc: int | None = None
        for j in range(n_rows):
            term = paillier.mul_plain(pk, cm.rows[j][k], to_modular(g[j], fs.n))
            acc = term if acc is None else paillier.add_cipher(pk, acc, term)
        if acc is None:
            acc = paillier.encrypt(pk, 0)
        out.append(acc)
    return CipherVector(pk, cm.scale * 2, out)


def add_grid_vector(cv: CipherVector, plain: GridVec, fs: FixedScale) -> CipherVector:
    """Add a plaintext grid vector already expressed at the tensor's scale."""
    values = [
        paillier.add_plain(cv.pk, c, to_modular(v, fs.n))
        for c, v in zip(cv.values, plain, strict=True)
    ]
    return CipherVector(cv.pk, cv.scale, values)


def add_grid_matrix(cm: CipherMatrix, plain: GridMat, fs: FixedScale) -> CipherMatrix:
    rows = [
        [paillier.add_plain(cm.pk, c, to_modular(v, fs.n)) for c, v in zip(crow, prow, strict=True)]
        for crow, prow in zip(cm.rows, plain, strict=True)
    ]
    return CipherMatrix(cm.pk, cm.scale, rows)


def ct_add_cipher(a: CipherVector, b: CipherVector) -> CipherVector:
    """Elementwise ciphertext addition; scales and keys must agree."""
    _require_same_key(a.pk, b.pk)
    if a.scale != b.scale:
        raise ScaleError(f"cannot add tensors at scales {a.scale} and {b.scale}")
    values = [paillier.add_cipher(a.pk, x, y) for x, y in zip(a.values, b.values, strict=True)]
    return CipherVector(a.pk, a.scale, values)


def ct_matvec(pk: PublicKey, w: Sequence[Sequence[float]], cv: CipherVector, fs: FixedScale) -> CipherVector:
    """Real-valued convenience wrapper: quantizes W at scale f first."""
    return matvec_grid(pk, [[quantize(x, fs.frac_bits) for x in row] for row in w], cv, fs)


def ct_outer(pk: PublicKey, g: Sequence[float], cv: CipherVector, fs: FixedScale) -> CipherMatrix:
    return outer_grid(pk, [quantize(x, fs.frac_bits) for x in g], cv, fs)


def ct_add_plain_tensor(ct, plain, fs: FixedScale):
    """Scale-aligned plaintext addition: quantizes ``plain`` at ct's scale."""
    if isinstance(ct, CipherVector):
        return add_grid_vector(ct, [quantize(x, ct.scale) for x in plain], fs)
    if isinstance(ct, CipherMatrix):
        return add_grid_matrix(ct, [[quantize(x, ct.scale) for x in row] for row in plain], fs)
    raise TypeError(f"expected CipherVector or CipherMatrix, got {type(ct).__name__}")


def _assumed_bound(fs: FixedScale) -> int:
    # Declared ceiling on |encrypted values| used in overflow pre-checks.
    # Generous relative to real activations/noise, minuscule relative to n.
    return 1 << 24


# ---------------------------------------------------------------------------
# Wire forms
# ---------------------------------------------------------------------------


def _write_header(out: BinaryIO, dims: tuple[int, ...], scale: int) -> None:
    out.write(struct.pack(">B", len(dims)))
    for d in dims:
        out.write(struct.pack(">I", d))
    out.write(struct.pack(">h", scale))


def _read_header(src: BinaryIO, rank: int) -> tuple[tuple[int, ...], int]:
    (got_rank,) = struct.unpack(">B", _read_exact(src, 1))
    if got_rank != rank:
        raise CryptoError(f"expected rank-{rank} tensor, got rank {got_rank}")
    dims = tuple(struct.unpack(">I", _read_exact(src, 4))[0] for _ in range(rank))
    total = 1
    for d in dims:
        total *= d
    if total > MAX_TENSOR_ELEMENTS:
        raise CryptoError(f"tensor with {total} elements exceeds sanity cap")
    (scale,) = struct.unpack(">h", _read_exact(src, 2))
    return dims, scale


def write_cipher_vector(out: BinaryIO, cv: CipherVector) -> None:
    _write_header(out, (len(cv.values),), cv.scale)
    for value in cv.values:
        paillier.write_bigint(out, value)


def read_cipher_vector(src: BinaryIO, pk: PublicKey) -> CipherVector:
    (count,), scale = _read_header(src, 1)
    return CipherVector(pk, scale, [paillier.read_bigint(src) for _ in range(count)])


def write_cipher_matrix(out: BinaryIO, cm: CipherMatrix) -> None:
    _write_header(out, cm.shape, cm.scale)
    for row in cm.rows:
        for value in row:
            paillier.write_bigint(out, value)


def read_cipher_matrix(src: BinaryIO, pk: PublicKey) -> CipherMatrix:
    (n_rows, n_cols), scale = _read_header(src, 2)
    rows = [[paillier.read_bigint(src) for _ in range(n_cols)] for _ in range(n_rows)]
    return CipherMatrix(pk, scale, rows)


def _write_signed(out: BinaryIO, value: int) -> None:
    out.write(b"\x01" if value < 0 else b"\x00")
    paillier.write_bigint(out, abs(value))


def _read_signed(src: BinaryIO) -> int:
    sign = _read_exact(src, 1)[0]
    if sign not in (0, 1):
        raise CryptoError(f"bad sign byte {sign:#x} in grid tensor")
    magnitude = paillier.read_bigint(src)
    return -magnitude if sign else magnitude


def write_grid_vector(out: BinaryIO, values: GridVec, scale: int) -> None:
    _write_header(out, (len(values),), scale)
    for v in values:
        _write_signed(out, v)


def read_grid_vector(src: BinaryIO) -> tuple[GridVec, int]:
    (count,), scale = _read_header(src, 1)
    return [_read_signed(src) for _ in range(count)], scale


def write_grid_matrix(out: BinaryIO, rows: GridMat, scale: int) -> None:
    dims = (len(rows), len(rows[0]) if rows else 0)
    _write_header(out, dims, scale)
    for row in rows:
        for v in row:
            _write_signed(out, v)


def read_grid_matrix(src: BinaryIO) -> tuple[GridMat, int]:
    (n_rows, n_cols), scale = _read_header(src, 2)
    rows = [[_read_signed(src) for _ in range(n_cols)] for _ in range(n_rows)]
    return rows, scale


def read_cipher_tensor(src: BinaryIO, pk: PublicKey) -> "CipherVector | CipherMatrix":
    """Rank-dispatched read: returns a vector or matrix as the bytes declare."""
    rank = _peek_rank(src)
    return read_cipher_vector(src, pk) if rank == 1 else read_cipher_matrix(src, pk)


def read_grid_tensor(src: BinaryIO) -> tuple[GridVec | GridMat, int]:
    rank = _peek_rank(src)
    return read_grid_vector(src) if rank == 1 else read_grid_matrix(src)


def _peek_rank(src: BinaryIO) -> int:
    pos = src.tell()
    (rank,) = struct.unpack(">B", _read_exact(src, 1))
    src.seek(pos)
    if rank not in (1, 2):
        raise CryptoError(f"unsupported tensor rank {rank}")
    return rank


def _read_exact(src: BinaryIO, count: int) -> bytes:
    data = src.read(count)
    if len(data) != count:
        raise CryptoError(f"truncated tensor: wanted {count} bytes, got {len(data)}")
    return data


def tensor_bytes(writer, *args) -> bytes:
    buf = BytesIO()
    writer(buf, *args)
    return buf.getvalue()
