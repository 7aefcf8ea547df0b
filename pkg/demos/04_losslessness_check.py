"""
The protocol changes nothing about the model
============================================

Claim: with fixed-point arithmetic, the two-party protocol computes the
exact same weight sequence as an ordinary single-process trainer.  Not
approximately -- the same integers.  The blinding noise that protects
each message cancels perfectly, every step.

This script trains both ways for 30 steps and diffs the weights.
"""

import random
from pathlib import Path

from splitphe.datasets import load_csv, standardize, train_test_split
from splitphe.fixedpoint import fx_sub_mat
from splitphe.paillier import keygen
from splitphe.protocol import SessionConfig
from splitphe.training import run_local_protocol, train_centralized

DATA = Path(__file__).resolve().parent.parent / "data" / "iris.csv"
SEED = 1312
STEPS = 30

ds = load_csv(DATA, name="iris")
train, _ = train_test_split(ds, 0.2, seed=SEED)
(train,) = standardize(train)

config = SessionConfig(d_hidden=16, n_classes=3, batch_size=1, arithmetic="fixed")
keys = keygen(512, random.Random(7))

active, passive, _ = run_local_protocol(
    train, [16], config, seed=SEED, epochs=1, keys=keys, max_steps=STEPS
)

model, _ = train_centralized(
    train, [16], seed=SEED, epochs=1, batch_size=1, mode="fixed", max_steps=STEPS
)

# The extractor lives with the feature side in plaintext; compare directly.
same_extractor = active.extractor.weights == model.extractor.weights
print(f"extractor weights identical after {STEPS} steps:", same_extractor)

# The label side holds head + mask; subtract the feature side's ledger to
# reveal the true head, then compare against the centralized trainer.
true_head = fx_sub_mat(passive.w_noisy, active.eps_acc)
print("unmasked head identical:                       ", true_head == model.head)

# The mask itself is anything but zero.
nonzero = sum(1 for row in active.eps_acc for v in row if v)
print(f"ledger entries that are nonzero: {nonzero} of "
      f"{len(active.eps_acc) * len(active.eps_acc[0])}")

print()
print("first head row, as the label side sees it:", passive.w_noisy[0][:3])
print("first head row, actual model:             ", true_head[0][:3])
