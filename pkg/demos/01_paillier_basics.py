"""
Additively homomorphic encryption in five minutes
=================================================

Generate a key pair, encrypt a couple of numbers, and compute on the
ciphertexts without ever decrypting the inputs.
"""

import random

from splitphe import paillier

# A deterministic RNG keeps the demo reproducible.  512-bit keys are far
# too small for production (use 2048) but keep every step instant here.
rng = random.Random(7)
keys = paillier.keygen(512, rng)
pk, sk = keys.public, keys.private

print(f"modulus n has {pk.bits} bits")

# Round trip: encrypt, decrypt, get the same number back.
c5 = paillier.encrypt(pk, 5, rng)
print("Dec(Enc(5)) =", paillier.decrypt(sk, c5))

# The whole point: addition happens on ciphertexts.
c12 = paillier.add_cipher(pk, c5, paillier.encrypt(pk, 7, rng))
print("Dec(Enc(5) + Enc(7)) =", paillier.decrypt(sk, c12))

# Plaintext operands work too, and so does scaling by a known constant.
print("Dec(Enc(5) + 10)     =", paillier.decrypt(sk, paillier.add_plain(pk, c5, 10)))
print("Dec(Enc(5) * 6)      =", paillier.decrypt(sk, paillier.mul_plain(pk, c5, 6)))

# Encryption is randomized: the same plaintext gives different bytes every
# time, so an observer cannot match repeated values across messages.
again = paillier.encrypt(pk, 5, rng)
print("two encryptions of 5 identical?", c5 == again)
print("rerandomized copy identical?   ", paillier.rerandomize(pk, c5, rng) == c5)

# Everything is mod n, so subtraction rides on top of addition: adding
# n - m is the same as subtracting m.
c_diff = paillier.add_plain(pk, c12, pk.n - 4)
print("Dec(Enc(12) - 4)     =", paillier.decrypt(sk, c_diff))
