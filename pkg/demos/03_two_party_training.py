"""
Two-party training on the Iris data
===================================

One side holds the flowers (features) and the decryption key; the other
holds the species labels and the classifier head.  They train a shared
model without the feature side ever revealing an example and without the
label side ever seeing a plaintext activation.

Here both parties live in one process and exchange real serialized
frames.  Swap in the CLI's --role active / --role passive to put them on
different machines.
"""

import random
from pathlib import Path

from splitphe.datasets import load_csv, standardize, train_test_split
from splitphe.paillier import keygen
from splitphe.protocol import SessionConfig
from splitphe.training import run_local_protocol

DATA = Path(__file__).resolve().parent.parent / "data" / "iris.csv"

ds = load_csv(DATA, name="iris")
train, test = train_test_split(ds, 0.2, seed=7)
train, test = standardize(train, test)
print(f"{train.n} training / {test.n} held-out samples, {train.d_in} features")

config = SessionConfig(
    d_hidden=16,
    n_classes=train.n_classes,
    batch_size=8,
    arithmetic="float",
)

# 512-bit keys for demo speed; drop the keys= argument (or pass key_bits=2048)
# for a realistic modulus.
keys = keygen(512, random.Random(7))

active, passive, report = run_local_protocol(
    train,
    [16],
    config,
    seed=7,
    epochs=25,
    keys=keys,
    test_ds=test,
    log=print,
)

print()
print(f"finished {report.steps} protocol steps in {report.wall_seconds:.1f}s")
print(f"held-out accuracy: {report.eval['accuracy']:.3f}")

# The label side only ever held a noise-masked head.  The feature side
# kept the exact mask on its ledger; the two cancel.
print("head the label side observed (first weights):", passive.w_noisy[0][:2])
print("mask on the feature side's ledger:            ", active.eps_acc[0][:2])

# Homomorphic work per phase, straight from the run report.
for phase, counts in sorted(report.active_stats["ops"].items()):
    total = sum(counts.values())
    if total:
        print(f"active-side phase {phase:>20}: {total} ops")
