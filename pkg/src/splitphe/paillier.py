"""Additively homomorphic Paillier cryptosystem over arbitrary-precision ints.

This is the g = n + 1 variant: lambda = lcm(p - 1, q - 1), and since
(n + 1)^lambda = 1 + lambda * n (mod n^2), the decryption constant collapses
to mu = lambda^-1 mod n.  Key generation enforces gcd(n, phi(n)) = 1, which
makes that inverse exist.

The operation surface is deliberately small:

* ``encrypt`` / ``decrypt``
* ``add_cipher``  -- ciphertext + ciphertext
* ``add_plain``   -- ciphertext + plaintext
* ``mul_plain``   -- ciphertext * plaintext scalar

There is no ciphertext * ciphertext; callers that need products of two
hidden values must restructure so one factor is plaintext at the party
performing the multiplication.

Raw ciphertexts are bare ints in Z_{n^2}.  Scale-aware tensor wrappers live
in ciphertensor.py.  Every ciphertext is obfuscated with a fresh random
r^n factor, so re-encrypting the same plaintext yields a different value.
"""

from __future__ import annotations

import math
import os
import random
import struct
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from io import BytesIO
from typing import BinaryIO, Iterator, NamedTuple

from .errors import CryptoError

try:  # gmpy2 is roughly 8x faster here; the stdlib path keeps the package portable
    import gmpy2

    def powmod(base: int, exp: int, mod: int) -> int:
        return int(gmpy2.powmod(base, exp, mod))

    def invert(value: int, mod: int) -> int:
        try:
            return int(gmpy2.invert(value, mod))
        except ZeroDivisionError as exc:
            raise CryptoError(f"{value} is not invertible modulo {mod}") from exc

except ImportError:  # pragma: no cover - only hit on installs without gmpy2

    def powmod(base: int, exp: int, mod: int) -> int:
        return pow(base, exp, mod)

    def invert(value: int, mod: int) -> int:
        try:
            return pow(value, -1, mod)
        except ValueError as exc:
            raise CryptoError(f"{value} is not invertible modulo {mod}") from exc


MILLER_RABIN_ROUNDS = 64
DEFAULT_KEY_BITS = 2048
MIN_KEY_BITS = 512
KEY_FILE_VERSION = 0x01

_SMALL_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47)

_default_rng = random.SystemRandom()


# ---------------------------------------------------------------------------
# Keys
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PublicKey:
    """Encryption key: modulus n, generator g = n + 1, cached n^2."""

    n: int
    g: int
    n_squared: int

    @classmethod
    def from_n(cls, n: int) -> "PublicKey":
        return cls(n=n, g=n + 1, n_squared=n * n)

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    def __repr__(self) -> str:
        return f"PublicKey(bits={self.bits})"


@dataclass(frozen=True)
class PrivateKey:
    """Decryption key: lambda = lcm(p-1, q-1) and mu = lambda^-1 mod n."""

    public: PublicKey
    lam: int
    mu: int

    def __repr__(self) -> str:  # never print secret material
        return f"PrivateKey(bits={self.public.bits})"


class KeyPair(NamedTuple):
    public: PublicKey
    private: PrivateKey


def is_probable_prime(
    n: int, rng: random.Random | None = None, rounds: int = MILLER_RABIN_ROUNDS
) -> bool:
    """Miller-Rabin with ``rounds`` random bases (error prob <= 4^-rounds)."""
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    rng = rng or _default_rng
    d = n - 1
    s = 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = powmod(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(s - 1):
            x = (x * x) % n
            if x == n - 1:
                break
        else:
            return False
    return True


def _random_prime(bits: int, rng: random.Random) -> int:
    # Top bit forced so p*q lands on the requested modulus size.
    while True:
        candidate = rng.getrandbits(bits) | (1 << (bits - 1)) | 1
        if is_probable_prime(candidate, rng):
            return candidate


def keygen(bits: int = DEFAULT_KEY_BITS, rng: random.Random | None = None) -> KeyPair:
    """Generate a fresh keypair with an exactly ``bits``-long modulus.

    ``rng`` must provide ``getrandbits``/``randrange``; it defaults to the
    OS entropy source.  Pass a seeded ``random.Random`` only in tests.
    """
    if bits < MIN_KEY_BITS:
        raise CryptoError(f"key size {bits} below minimum {MIN_KEY_BITS}")
    if bits % 2:
        raise CryptoError(f"key size must be even, got {bits}")
    rng = rng or _default_rng
    half = bits // 2
    while True:
        p = _random_prime(half, rng)
        q = _random_prime(half, rng)
        if p == q:
            continue
        n = p * q
        if n.bit_length() != bits:
            continue
        if math.gcd(n, (p - 1) * (q - 1)) != 1:
            continue
        return from_primes(p, q)


def from_primes(p: int, q: int) -> KeyPair:
    """Deterministic key construction from known primes.

    This is the test path: it skips the size floor so tiny textbook keys
    (say p=11, q=13) can exercise the full arithmetic exhaustively.
    """
    if p == q:
        raise CryptoError("p and q must be distinct primes")
    for value in (p, q):
        if not is_probable_prime(value):
            raise CryptoError(f"{value} is not prime")
    n = p * q
    if math.gcd(n, (p - 1) * (q - 1)) != 1:
        raise CryptoError("n shares a factor with phi(n); choose other primes")
    lam = math.lcm(p - 1, q - 1)
    public = PublicKey.from_n(n)
    # g = n + 1 gives g^lam = 1 + lam*n (mod n^2), so L(g^lam) = lam mod n.
    mu = invert(lam % n, n)
    return KeyPair(public, PrivateKey(public, lam, mu))


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------


def _random_unit(n: int, rng: random.Random) -> int:
    while True:
        r = rng.randrange(1, n)
        if math.gcd(r, n) == 1:
            return r


def encrypt(pk: PublicKey, m: int, rng: random.Random | None = None) -> int:
    """Encrypt plaintext m in [0, n) to a raw ciphertext in Z_{n^2}."""
    if not 0 <= m < pk.n:
        raise CryptoError(f"plaintext {m} outside [0, n)")
    rng = rng or _default_rng
    r = _random_unit(pk.n, rng)
    # g^m collapses to one multiplication because g = n + 1.
    g_m = (1 + m * pk.n) % pk.n_squared
    c = (g_m * powmod(r, pk.n, pk.n_squared)) % pk.n_squared
    _bump("encrypt")
    return c


def decrypt(sk: PrivateKey, c: int) -> int:
    """Decrypt a raw ciphertext to its plaintext in [0, n).

    Ciphertexts produced under a different key decrypt to garbage, not an
    error: the scheme carries no authentication.
    """
    pk = sk.public
    if not 0 < c < pk.n_squared:
        raise CryptoError("ciphertext outside (0, n^2)")
    u = powmod(c, sk.lam, pk.n_squared)
    m = ((u - 1) // pk.n * sk.mu) % pk.n
    _bump("decrypt")
    return m


def add_cipher(pk: PublicKey, c1: int, c2: int) -> int:
    """Homomorphic add: Dec(add_cipher(c1, c2)) = m1 + m2 mod n."""
    _check_cipher(pk, c1)
    _check_cipher(pk, c2)
    _bump("add_cipher")
    return (c1 * c2) % pk.n_squared


def add_plain(pk: PublicKey, c: int, m: int) -> int:
    """Homomorphic add of a plaintext: Dec(add_plain(c, m)) = m0 + m mod n."""
    _check_cipher(pk, c)
    if not 0 <= m < pk.n:
        raise CryptoError(f"plaintext {m} outside [0, n)")
    _bump("add_plain")
    return (c * ((1 + m * pk.n) % pk.n_squared)) % pk.n_squared


def mul_plain(pk: PublicKey, c: int, k: int) -> int:
    """Homomorphic scalar multiply: Dec(mul_plain(c, k)) = k * m mod n."""
    _check_cipher(pk, c)
    if not 0 <= k < pk.n:
        raise CryptoError(f"multiplier {k} outside [0, n)")
    _bump("mul_plain")
    return powmod(c, k, pk.n_squared)


def rerandomize(pk: PublicKey, c: int, rng: random.Random | None = None) -> int:
    """Refresh the obfuscation of c without changing its plaintext."""
    return add_cipher(pk, c, encrypt(pk, 0, rng))


def _check_cipher(pk: PublicKey, c: int) -> None:
    if not 0 < c < pk.n_squared:
        raise CryptoError("ciphertext outside (0, n^2)")


# ---------------------------------------------------------------------------
# Operation counting
# ---------------------------------------------------------------------------


@dataclass
class OpCounter:
    """Tally of primitive operations, used for phase accounting."""

    encrypt: int = 0
    decrypt: int = 0
    add_cipher: int = 0
    add_plain: int = 0
    mul_plain: int = 0

    def total(self) -> int:
        return self.encrypt + self.decrypt + self.add_cipher + self.add_plain + self.mul_plain

    def as_dict(self) -> dict[str, int]:
        return {
            "encrypt": self.encrypt,
            "decrypt": self.decrypt,
            "add_cipher": self.add_cipher,
            "add_plain": self.add_plain,
            "mul_plain": self.mul_plain,
        }


_ACTIVE_COUNTER: ContextVar[OpCounter | None] = ContextVar("paillier_ops", default=None)


@contextmanager
def count_ops(counter: OpCounter) -> Iterator[OpCounter]:
    """Count primitive operations performed inside the with-block."""
    token = _ACTIVE_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER.reset(token)


def _bump(op: str) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        setattr(counter, op, getattr(counter, op) + 1)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def write_bigint(out: BinaryIO, value: int) -> None:
    """4-byte big-endian length prefix, then big-endian magnitude bytes."""
    if value < 0:
        raise ValueError("write_bigint takes non-negative integers")
    raw = value.to_bytes((value.bit_length() + 7) // 8, "big")
    out.write(struct.pack(">I", len(raw)))
    out.write(raw)


def read_bigint(src: BinaryIO) -> int:
    (length,) = struct.unpack(">I", _read_exact(src, 4))
    return int.from_bytes(_read_exact(src, length), "big")


def bigint_bytes(value: int) -> bytes:
    buf = BytesIO()
    write_bigint(buf, value)
    return buf.getvalue()


def _read_exact(src: BinaryIO, count: int) -> bytes:
    data = src.read(count)
    if len(data) != count:
        raise CryptoError(f"truncated stream: wanted {count} bytes, got {len(data)}")
    return data


def save_public_key(path: str | os.PathLike, pk: PublicKey) -> None:
    with open(path, "wb") as out:
        out.write(bytes([KEY_FILE_VERSION]))
        write_bigint(out, pk.n)
        write_bigint(out, pk.g)


def load_public_key(path: str | os.PathLike) -> PublicKey:
    with open(path, "rb") as src:
        _check_key_version(src)
        n = read_bigint(src)
        g = read_bigint(src)
    if n < 3 or g != n + 1:
        raise CryptoError("public key file is inconsistent (g != n + 1)")
    return PublicKey.from_n(n)


def save_private_key(path: str | os.PathLike, sk: PrivateKey) -> None:
    """Write the private key with owner-only permissions.

    Private key files must never cross the wire; the transport layer has no
    message kind that could carry one.
    """
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as out:
        out.write(bytes([KEY_FILE_VERSION]))
        write_bigint(out, sk.public.n)
        write_bigint(out, sk.public.g)
        write_bigint(out, sk.lam)
        write_bigint(out, sk.mu)


def load_private_key(path: str | os.PathLike) -> PrivateKey:
    with open(path, "rb") as src:
        _check_key_version(src)
        n = read_bigint(src)
        g = read_bigint(src)
        lam = read_bigint(src)
        mu = read_bigint(src)
    if n < 3 or g != n + 1:
        raise CryptoError("private key file is inconsistent (g != n + 1)")
    public = PublicKey.from_n(n)
    if (lam * mu) % n != 1:
        raise CryptoError("private key file is inconsistent (mu is not lambda^-1)")
    return PrivateKey(public, lam, mu)


def _check_key_version(src: BinaryIO) -> None:
    tag = _read_exact(src, 1)[0]
    if tag != KEY_FILE_VERSION:
        raise CryptoError(f"unsupported key file version {tag:#x}, expected {KEY_FILE_VERSION:#x}")
