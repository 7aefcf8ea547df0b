"""
Real-valued linear algebra on ciphertexts
=========================================

Paillier only adds integers mod n, so real numbers ride on a fixed-point
grid: x is stored as round(x * 2^f).  Multiplying an encrypted vector by
a plaintext matrix doubles that scale, and one explicit rescale brings
results back down.  This demo walks the whole scale discipline.
"""

import random

import numpy as np

from splitphe import paillier
from splitphe.ciphertensor import (
    decrypt_grid_vector,
    decrypt_vector,
    encrypt_vector,
    matvec_grid,
    outer_grid,
)
from splitphe.fixedpoint import (
    FixedScale,
    dequantize,
    quantize,
    quantize_mat,
    quantize_vec,
    rescale,
)

rng = random.Random(7)
keys = paillier.keygen(512, rng)
f = 32
fs = FixedScale(f, keys.public.n)

# Quantization: reals to grid integers and back.
x = 3.14159
gx = quantize(x, f)
print(f"quantize({x}) = {gx}; back to float: {dequantize(gx, f):.6f}")

# Encrypt a small activation vector at scale f.
a = np.array([0.5, -1.25, 2.0])
enc_a = encrypt_vector(keys.public, a, fs, rng=rng)
print("ciphertext scale after encryption:", enc_a.scale)

# A plaintext weight matrix multiplies the encrypted vector.  Each product
# of two scale-f numbers lands at scale 2f.
w = np.array([[1.0, 0.5, -0.5], [0.25, -1.0, 2.0]])
enc_z = matvec_grid(keys.public, quantize_mat(w, f), enc_a, fs)
print("ciphertext scale after matvec:    ", enc_z.scale)

# The key holder decrypts at 2f, rescales to f, and recovers W @ a.
z_grid = [rescale(v, f) for v in decrypt_grid_vector(keys.private, enc_z, fs)]
print("decrypted W @ a:", [round(dequantize(v, f), 6) for v in z_grid])
print("numpy     W @ a:", (w @ a).round(6).tolist())

# Outer products build encrypted gradient matrices the same way.
g = np.array([0.1, -0.2])
enc_outer = outer_grid(keys.public, quantize_vec(g, f), enc_a, fs)
print("outer product shape:", enc_outer.shape, "at scale", enc_outer.scale)

# Convenience wrapper: decrypt_vector divides the scale factor out itself.
print("decrypt_vector(enc_a):", [round(v, 6) for v in decrypt_vector(keys.private, enc_a, fs)])
