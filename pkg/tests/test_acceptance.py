"""Release acceptance gate.

Eight end-to-end criteria, one test each, every tolerance stated inline.
Each test emits a single ``criterion N [name]: PASS/FAIL (detail)`` line,
echoed in the terminal summary after the run.  These tests exercise full
protocol runs with 512-bit keys and dominate the suite's runtime; deselect
them during development with ``-m "not acceptance"``.
"""

import os
import random
import time
from pathlib import Path

import numpy as np
import pytest

from splitphe import paillier
from splitphe.audit import leakage_audit
from splitphe.bench import dimension_sweep
from splitphe.datasets import (
    Dataset,
    load_csv,
    load_idx,
    one_hot,
    standardize,
    train_test_split,
)
from splitphe.fixedpoint import fx_sub_mat
from splitphe.nn import grad_check
from splitphe.protocol import NoiseConfig, Session, SessionConfig, serve_pending
from splitphe.training import (
    build_parties,
    derive_seed,
    drive_training,
    run_local_protocol,
    train_centralized,
)
from splitphe.transport import in_process_pair

from conftest import acceptance_verdicts

pytestmark = pytest.mark.acceptance

DATA_DIR = Path(__file__).resolve().parent.parent / "data"

# Pinned run seeds.  Accuracy thresholds sit on a 30-sample Iris test set
# (granularity 0.033), so the parity check below effectively requires the
# protocol and the centralized baseline to get the same samples right.
IRIS_ACC_SEED = 0
DIGITS_SEED = 31
DIGITS_PER_CLASS = 80
DIGITS_EPOCHS = 2
DIGITS_BATCH = 16


def verdict(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {num} [{name}]: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    acceptance_verdicts.append(line)
    assert ok, line


def iris_case(seed: int):
    ds = load_csv(DATA_DIR / "iris.csv", name="iris")
    train, test = train_test_split(ds, 0.2, seed=derive_seed(seed, "split"))
    return standardize(train, test)


# -- criterion 1: protocol == centralized fixed-point trainer, bit for bit ----


def test_criterion_1_losslessness(keys512):
    train, _ = iris_case(1312)
    config = SessionConfig(d_hidden=16, n_classes=3, batch_size=1, arithmetic="fixed")
    active, passive = build_parties(train, [16], config, seed=1312, keys=keys512)

    proto = []

    def snap_protocol(_step, _session):
        proto.append(
            (
                [[row[:] for row in mat] for mat in active.extractor.weights],
                fx_sub_mat(passive.w_noisy, active.eps_acc),
            )
        )

    chan_a, chan_p = in_process_pair()
    session = Session(chan_a, active, pump=lambda: serve_pending(passive, chan_p))
    start = time.perf_counter()
    try:
        drive_training(
            session, train, seed=1312, epochs=1, batch_size=1, max_steps=50,
            on_step=snap_protocol,
        )
    finally:
        chan_a.close()
        chan_p.close()
    wall = time.perf_counter() - start

    mirror = []

    def snap_centralized(_step, model):
        mirror.append(
            (
                [[row[:] for row in mat] for mat in model.extractor.weights],
                [row[:] for row in model.head],
            )
        )

    train_centralized(
        train, [16], seed=1312, epochs=1, batch_size=1, mode="fixed", max_steps=50,
        on_step=snap_centralized,
    )

    exact = proto == mirror and len(proto) == 50
    verdict(
        1,
        "losslessness",
        exact and wall < 300,
        f"50 steps bit-identical={exact}, protocol wall {wall:.1f}s (< 300s)",
    )


# -- criterion 2: desk-scale accuracy parity ----------------------------------


def test_criterion_2_iris_accuracy(keys512):
    train, test = iris_case(IRIS_ACC_SEED)
    config = SessionConfig(d_hidden=16, n_classes=3, batch_size=8, arithmetic="float")
    _, _, report = run_local_protocol(
        train, [16], config, seed=IRIS_ACC_SEED, epochs=200, keys=keys512, test_ds=test
    )
    _, baseline = train_centralized(
        train, [16], seed=IRIS_ACC_SEED, epochs=200, batch_size=8, test_ds=test
    )
    acc = report.eval["accuracy"]
    diff = abs(acc - baseline.eval["accuracy"])
    verdict(
        2,
        "iris accuracy",
        acc >= 0.95 and diff <= 0.02,
        f"protocol {acc:.3f} (>= 0.95), |protocol - centralized| {diff:.3f} (<= 0.02)",
    )


def stratified_subset(ds: Dataset, per_class: int, name: str) -> Dataset:
    classes = np.argmax(ds.labels, axis=1)
    keep = np.concatenate(
        [np.where(classes == c)[0][:per_class] for c in range(ds.n_classes)]
    )
    return ds.subset(np.sort(keep), name=name)


def image_case():
    """MNIST subset when IDX files are available, 8x8 digits otherwise."""
    names = (
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    )
    for root in (os.environ.get("MNIST_DIR"), DATA_DIR / "mnist"):
        if root and all((Path(root) / n).exists() for n in names):
            root = Path(root)
            train = load_idx(root / names[0], root / names[1], limit=5000, name="mnist-5000")
            test = load_idx(root / names[2], root / names[3], limit=1000, name="mnist-1000")
            train, test = standardize(train, test)
            return train, test, 32, 1
    try:
        from sklearn.datasets import load_digits
    except ImportError:
        pytest.fail(
            "image-corpus criterion needs MNIST IDX files (data/mnist/ or $MNIST_DIR) "
            "or scikit-learn's bundled digits"
        )
    raw = load_digits()
    ds = Dataset(raw.data.astype(float), one_hot(raw.target, 10), name="digits")
    train, test = train_test_split(ds, 0.2, seed=derive_seed(DIGITS_SEED, "split"))
    train = stratified_subset(train, DIGITS_PER_CLASS, "digits-train")
    train, test = standardize(train, test)
    return train, test, DIGITS_BATCH, DIGITS_EPOCHS


def test_criterion_2_image_accuracy(keys512):
    train, test, batch, epochs = image_case()
    config = SessionConfig(d_hidden=84, n_classes=10, batch_size=batch, arithmetic="float")
    _, _, report = run_local_protocol(
        train, [84], config, seed=DIGITS_SEED, epochs=epochs, keys=keys512, test_ds=test
    )
    _, baseline = train_centralized(
        train, [84], seed=DIGITS_SEED, epochs=epochs, batch_size=batch, test_ds=test
    )
    acc = report.eval["accuracy"]
    diff = abs(acc - baseline.eval["accuracy"])
    verdict(
        2,
        f"{train.name} accuracy",
        acc >= 0.90 and diff <= 0.02,
        f"protocol {acc:.3f} (>= 0.90) on {train.n}/{test.n}, "
        f"|protocol - centralized| {diff:.3f} (<= 0.02)",
    )


# -- criterion 3: step cost flat in d_in, unlike raw-feature encryption -------


def test_criterion_3_dimension_insensitivity(keys512):
    start = time.perf_counter()
    report = dimension_sweep(
        keys512, input_dims=(32, 320, 3072), d_hidden=84, n_classes=10, steps=3
    )
    wall = time.perf_counter() - start
    spread = report.protocol_spread
    growth = report.baseline_growth
    verdict(
        3,
        "dimension insensitivity",
        spread < 0.20 and growth >= 5.0 and wall < 600,
        f"protocol spread {spread * 100:.1f}% (< 20%), encrypted-input baseline "
        f"growth {growth:.1f}x (>= 5x), wall {wall:.0f}s (< 600s)",
    )


# -- criterion 4: homomorphic work per step matches the closed form -----------


def expected_ops(d_h: int, c: int, batch: int, steps: int) -> tuple[dict, dict]:
    active = {
        "encrypt_activation": {"encrypt": steps * batch * d_h},
        "decrypt_sum": {"decrypt": steps * batch * c},
        "decrypt_wgrad": {"decrypt": steps * c * d_h},
        "encrypt_ledger": {"encrypt": steps * c * d_h},
        "decrypt_input_grad": {"decrypt": steps * batch * d_h},
    }
    passive = {
        "matvec": {
            "mul_plain": steps * batch * c * d_h,
            "add_cipher": steps * batch * c * (d_h - 1),
        },
        "sum_blind": {"add_plain": steps * batch * c},
        "outer": {"mul_plain": steps * batch * c * d_h},
        "grad_blind": {"add_plain": steps * c * d_h},
        "correction": {
            "mul_plain": steps * batch * c * d_h,
            "add_cipher": steps * batch * (c - 1) * d_h,
        },
        "regrad_encrypt": {"encrypt": steps * batch * d_h, "add_cipher": steps * batch * d_h},
    }
    if batch > 1:
        passive["grad_acc"] = {"add_cipher": steps * (batch - 1) * c * d_h}
    return active, passive


def nonzero_ops(stats: dict) -> dict:
    return {
        name: {op: n for op, n in counts.items() if n}
        for name, counts in stats["ops"].items()
        if any(counts.values())
    }


def measured_ops(keys, d_in, d_h, c, batch, steps):
    from splitphe.datasets import synthetic_blobs

    ds = synthetic_blobs(batch * steps, d_in, c, seed=3)
    config = SessionConfig(d_hidden=d_h, n_classes=c, arithmetic="fixed", batch_size=batch)
    active, passive, _ = run_local_protocol(
        ds, [d_h], config, seed=7, epochs=1, keys=keys, max_steps=steps
    )
    return nonzero_ops(active.stats.as_dict()), nonzero_ops(passive.stats.as_dict())


def test_criterion_4_op_counts(keys512):
    d_h, c, steps = 5, 3, 2
    results = {}
    for d_in in (7, 29):
        results[d_in] = measured_ops(keys512, d_in, d_h, c, batch=1, steps=steps)
    want_active, want_passive = expected_ops(d_h, c, batch=1, steps=steps)
    exact = all(results[d_in] == (want_active, want_passive) for d_in in results)
    flat = results[7] == results[29]

    # per-step single-sample counts in closed form: c*d_h multiplications
    # each for the weighted sum, the head-gradient outer product, and the
    # ledger correction, plus c blinding additions on the sum.
    per_step = want_passive
    closed_form = (
        per_step["matvec"]["mul_plain"] == steps * c * d_h
        and per_step["outer"]["mul_plain"] == steps * c * d_h
        and per_step["correction"]["mul_plain"] == steps * c * d_h
        and per_step["sum_blind"]["add_plain"] == steps * c
    )

    batched_active, batched_passive = measured_ops(keys512, 7, 4, 3, batch=3, steps=2)
    want_ba, want_bp = expected_ops(4, 3, batch=3, steps=2)
    batched_ok = (batched_active, batched_passive) == (want_ba, want_bp)

    verdict(
        4,
        "op accounting",
        exact and flat and closed_form and batched_ok,
        f"measured == analytic (exact={exact}, batched={batched_ok}), "
        f"independent of d_in={flat}",
    )


# -- criterion 5: randomized crypto property suite -----------------------------


def test_criterion_5_crypto_suite(keys512):
    pk, sk = keys512.public, keys512.private
    rng = random.Random(20260817)
    failures = []
    for trial in range(1000):
        a = rng.randrange(pk.n)
        b = rng.randrange(pk.n)
        k = rng.randrange(pk.n)
        ca = paillier.encrypt(pk, a, rng)
        cb = paillier.encrypt(pk, b, rng)
        checks = {
            "roundtrip": paillier.decrypt(sk, ca) == a,
            "add_cipher": paillier.decrypt(sk, paillier.add_cipher(pk, ca, cb))
            == (a + b) % pk.n,
            "add_plain": paillier.decrypt(sk, paillier.add_plain(pk, ca, b))
            == (a + b) % pk.n,
            "mul_plain": paillier.decrypt(sk, paillier.mul_plain(pk, ca, k))
            == (a * k) % pk.n,
            "rerandomize": paillier.rerandomize(pk, ca, rng) != ca
            and paillier.decrypt(sk, paillier.rerandomize(pk, ca, rng)) == a,
        }
        failures.extend(f"trial {trial}: {name}" for name, ok in checks.items() if not ok)
    verdict(5, "crypto properties", not failures, f"1000 trials, {len(failures)} failures")


# -- criterion 6: analytic gradients vs finite differences ---------------------


def test_criterion_6_gradient_checks():
    configs = [
        (d_in, d_h, c)
        for d_in in (2, 3, 5, 9)
        for d_h in (4, 7)
        for c in (2, 3, 6)
    ][:20]
    worst = max(
        grad_check(d_in, d_h, c, seed=100 + i) for i, (d_in, d_h, c) in enumerate(configs)
    )
    verdict(
        6,
        "gradient checks",
        len(configs) == 20 and worst < 1e-4,
        f"20 configurations, worst relative error {worst:.2e} (< 1e-4)",
    )


# -- criterion 7: blinding never changes what the model predicts ---------------


def test_criterion_7_noise_cancellation(keys512):
    train, _ = iris_case(99)
    train = train.subset(np.arange(24), name="iris-24")
    mismatches = []
    for seed in range(10):
        streams = []
        for noise in (NoiseConfig(), NoiseConfig(sum_bound=0, grad_bound=0)):
            config = SessionConfig(
                d_hidden=8, n_classes=3, batch_size=4, arithmetic="fixed", noise=noise
            )
            _, passive, _ = run_local_protocol(
                train, [8], config, seed=seed, epochs=1, keys=keys512, record=True
            )
            streams.append([e["data"] for e in passive.recorder.find("sum_clean")])
        if streams[0] != streams[1]:
            mismatches.append(seed)
    verdict(
        7,
        "noise cancellation",
        not mismatches,
        f"10 seeds, prediction streams identical with blinding on/off "
        f"(mismatched seeds: {mismatches or 'none'})",
    )


# -- criterion 8: leakage audit discriminates blinded from unblinded runs ------


def run_audited(tmp_path, keys, label: str, noise: NoiseConfig):
    train, test = iris_case(1312)
    config = SessionConfig(
        d_hidden=16, n_classes=3, batch_size=8, arithmetic="fixed", noise=noise
    )
    transcript = tmp_path / f"{label}.transcript"
    active, passive, _ = run_local_protocol(
        train,
        [16],
        config,
        seed=1312,
        epochs=1,
        keys=keys,
        test_ds=test,
        transcript_path=transcript,
        record=True,
        eval_passes=2,
    )
    return leakage_audit(transcript, active.recorder, passive.recorder, keys.private)


def test_criterion_8_leakage_audit(tmp_path, keys512):
    blinded = run_audited(tmp_path, keys512, "blinded", NoiseConfig())
    unblinded = run_audited(
        tmp_path, keys512, "unblinded", NoiseConfig(sum_bound=0, grad_bound=0)
    )
    names_ok = [c.name for c in blinded.checks] == [
        "sum-blinding",
        "gradient-blinding",
        "ciphertext-randomization",
        "key-secrecy",
    ]
    verdict(
        8,
        "leakage audit",
        blinded.passed and not unblinded.passed and names_ok,
        f"blinded run passes all 4 checks={blinded.passed}, "
        f"unblinded run flagged={not unblinded.passed}",
    )
