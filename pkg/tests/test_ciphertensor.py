import io
import random

import numpy as np
import pytest

from splitphe.ciphertensor import (
    CipherMatrix,
    CipherVector,
    add_grid_matrix,
    add_grid_vector,
    ct_add_cipher,
    ct_matvec,
    decrypt_grid_matrix,
    decrypt_grid_vector,
    decrypt_vector,
    encrypt_grid_matrix,
    encrypt_grid_vector,
    encrypt_vector,
    matvec_grid,
    outer_grid,
    read_cipher_tensor,
    read_cipher_vector,
    read_grid_matrix,
    read_grid_tensor,
    read_grid_vector,
    tensor_bytes,
    transpose_matvec_grid,
    write_cipher_matrix,
    write_cipher_vector,
    write_grid_matrix,
    write_grid_vector,
)
from splitphe.errors import CryptoError, MagnitudeError, ScaleError
from splitphe.fixedpoint import (
    FixedScale,
    fx_matvec,
    fx_matvec_t,
    fx_outer,
    quantize_mat,
    quantize_vec,
)
from splitphe.paillier import from_primes

F = 32


@pytest.fixture(scope="module")
def fs512(keys512):
    return FixedScale(F, keys512.public.n)


def test_grid_vector_roundtrip(keys512, fs512):
    pk, sk = keys512
    values = [0, 1, -1, 12345678901, -987654321]
    ct = encrypt_grid_vector(pk, values, fs512, rng=random.Random(0))
    assert ct.scale == F
    assert decrypt_grid_vector(sk, ct, fs512) == values


def test_grid_matrix_roundtrip(keys512, fs512):
    pk, sk = keys512
    rows = [[3, -4], [0, 2**40], [-(2**40), 7]]
    ct = encrypt_grid_matrix(pk, rows, fs512, rng=random.Random(1))
    assert ct.shape == (3, 2)
    assert decrypt_grid_matrix(sk, ct, fs512) == rows


def test_real_vector_roundtrip(keys512, fs512):
    pk, sk = keys512
    xs = [0.5, -2.25, 3.0, 0.0]
    ct = encrypt_vector(pk, xs, fs512, rng=random.Random(2))
    assert decrypt_vector(sk, ct, fs512) == pytest.approx(xs, abs=2.0**-F)


def test_matvec_grid_matches_plain_kernel(keys512, fs512):
    pk, sk = keys512
    rng = np.random.default_rng(7)
    w = quantize_mat(rng.standard_normal((3, 5)), F)
    x = quantize_vec(rng.standard_normal(5), F)
    ct = matvec_grid(pk, w, encrypt_grid_vector(pk, x, fs512, rng=random.Random(3)), fs512)
    assert ct.scale == 2 * F
    assert decrypt_grid_vector(sk, ct, fs512) == fx_matvec(w, x)


def test_outer_grid_matches_plain_kernel(keys512, fs512):
    pk, sk = keys512
    rng = np.random.default_rng(8)
    g = quantize_vec(rng.standard_normal(3), F)
    a = quantize_vec(rng.standard_normal(4), F)
    ct = outer_grid(pk, g, encrypt_grid_vector(pk, a, fs512, rng=random.Random(4)), fs512)
    assert ct.scale == 2 * F
    assert decrypt_grid_matrix(sk, ct, fs512) == fx_outer(g, a)


def test_transpose_matvec_grid_matches_plain_kernel(keys512, fs512):
    pk, sk = keys512
    rng = np.random.default_rng(9)
    m = quantize_mat(rng.standard_normal((3, 4)), F)
    g = quantize_vec(rng.standard_normal(3), F)
    enc_m = encrypt_grid_matrix(pk, m, fs512, rng=random.Random(5))
    ct = transpose_matvec_grid(pk, enc_m, g, fs512)
    assert decrypt_grid_vector(sk, ct, fs512) == fx_matvec_t(m, g)


def test_add_grid_tensors(keys512, fs512):
    pk, sk = keys512
    base = [10, -20, 30]
    plain = [1, 2, -3]
    ct = encrypt_grid_vector(pk, base, fs512, rng=random.Random(6))
    total = add_grid_vector(ct, plain, fs512)
    assert decrypt_grid_vector(sk, total, fs512) == [11, -18, 27]

    rows = [[1, 2], [3, 4]]
    cm = encrypt_grid_matrix(pk, rows, fs512, rng=random.Random(7))
    cm2 = add_grid_matrix(cm, [[10, 10], [10, 10]], fs512)
    assert decrypt_grid_matrix(sk, cm2, fs512) == [[11, 12], [13, 14]]


def test_ct_add_cipher_requires_matching_scale(keys512, fs512):
    pk, sk = keys512
    a = encrypt_grid_vector(pk, [1, 2], fs512, rng=random.Random(8))
    b = encrypt_grid_vector(pk, [3, 4], fs512, rng=random.Random(9))
    assert decrypt_grid_vector(sk, ct_add_cipher(a, b), fs512) == [4, 6]
    b2f = encrypt_grid_vector(pk, [3, 4], fs512, scale=2 * F, rng=random.Random(10))
    with pytest.raises(ScaleError):
        ct_add_cipher(a, b2f)


def test_single_product_per_ciphertext_enforced(keys512, fs512):
    pk, _ = keys512
    x = encrypt_grid_vector(pk, [1, 2], fs512, rng=random.Random(11))
    doubled = matvec_grid(pk, [[1, 0], [0, 1]], x, fs512)
    # a second multiplication would need scale 4f, which does not exist
    with pytest.raises(ScaleError):
        matvec_grid(pk, [[1, 0], [0, 1]], doubled, fs512)


def test_key_mismatch_detected(keys512, fs512):
    pk, _ = keys512
    other = from_primes(11, 13)
    a = encrypt_grid_vector(pk, [1], fs512, rng=random.Random(12))
    b = CipherVector(other.public, F, [5])
    with pytest.raises(CryptoError):
        ct_add_cipher(a, b)


def test_magnitude_guard_on_tiny_modulus():
    keys = from_primes(11, 13)
    fs = FixedScale(2, keys.public.n)
    ct = encrypt_grid_vector(keys.public, [3], fs, rng=random.Random(0))
    with pytest.raises(MagnitudeError):
        matvec_grid(keys.public, [[3]], ct, fs)


def test_matvec_shape_check(keys512, fs512):
    pk, _ = keys512
    ct = encrypt_grid_vector(pk, [1, 2, 3], fs512, rng=random.Random(13))
    with pytest.raises(MagnitudeError):
        matvec_grid(pk, [[1, 2]], ct, fs512)


def test_float_surface_wrapper(keys512, fs512):
    pk, sk = keys512
    rng = np.random.default_rng(10)
    w = rng.standard_normal((2, 3))
    x = rng.standard_normal(3)
    ct = ct_matvec(pk, w, encrypt_vector(pk, x, fs512, rng=random.Random(14)), fs512)
    got = [v / fs512.double_factor for v in decrypt_grid_vector(sk, ct, fs512)]
    assert np.allclose(got, w @ x, atol=1e-6)


# -- wire format ---------------------------------------------------------------


def test_cipher_vector_wire_roundtrip(keys512, fs512):
    pk, sk = keys512
    ct = encrypt_grid_vector(pk, [5, -6, 7], fs512, rng=random.Random(15))
    data = tensor_bytes(write_cipher_vector, ct)
    back = read_cipher_vector(io.BytesIO(data), pk)
    assert back.scale == ct.scale
    assert decrypt_grid_vector(sk, back, fs512) == [5, -6, 7]


def test_cipher_matrix_wire_roundtrip(keys512, fs512):
    pk, sk = keys512
    ct = encrypt_grid_matrix(pk, [[1, -2, 3], [4, 5, -6]], fs512, rng=random.Random(16))
    data = tensor_bytes(write_cipher_matrix, ct)
    back = read_cipher_tensor(io.BytesIO(data), pk)
    assert isinstance(back, CipherMatrix)
    assert decrypt_grid_matrix(sk, back, fs512) == [[1, -2, 3], [4, 5, -6]]


def test_grid_tensor_wire_roundtrips():
    data = tensor_bytes(write_grid_vector, [7, -8, 2**100], 32)
    values, scale = read_grid_vector(io.BytesIO(data))
    assert (values, scale) == ([7, -8, 2**100], 32)

    data = tensor_bytes(write_grid_matrix, [[1, -1], [0, 42]], 64)
    rows, scale = read_grid_matrix(io.BytesIO(data))
    assert (rows, scale) == ([[1, -1], [0, 42]], 64)


def test_rank_dispatch(keys512, fs512):
    pk, _ = keys512
    vec_bytes = tensor_bytes(write_grid_vector, [1, 2], 32)
    mat_bytes = tensor_bytes(write_grid_matrix, [[1], [2]], 32)
    v, _ = read_grid_tensor(io.BytesIO(vec_bytes))
    m, _ = read_grid_tensor(io.BytesIO(mat_bytes))
    assert v == [1, 2]
    assert m == [[1], [2]]


def test_wrong_rank_rejected(keys512):
    pk, _ = keys512
    mat_bytes = tensor_bytes(write_grid_matrix, [[1], [2]], 32)
    with pytest.raises(CryptoError):
        read_grid_vector(io.BytesIO(mat_bytes))


def test_truncated_tensor_detected(keys512, fs512):
    pk, _ = keys512
    ct = encrypt_grid_vector(pk, [5, 6], fs512, rng=random.Random(17))
    data = tensor_bytes(write_cipher_vector, ct)
    with pytest.raises(CryptoError):
        read_cipher_vector(io.BytesIO(data[: len(data) - 3]), pk)


def test_bad_sign_byte_detected():
    data = bytearray(tensor_bytes(write_grid_vector, [3], 8))
    # header: rank u8 + dim u32 + scale s16; sign byte follows
    data[7] = 9
    with pytest.raises(CryptoError):
        read_grid_vector(io.BytesIO(bytes(data)))
