"""Training harness: centralized reference trainers and the two-party driver.

The centralized fixed-point trainer below is the ground truth the protocol
is measured against: it performs the same grid arithmetic in the same
order, just without encryption or blinding.  A protocol run with the noise
ledger subtracted must match it bit for bit, step for step.  The float
trainer is the conventional baseline used for accuracy comparisons.

Seeding discipline: every stochastic component (extractor init, head init,
epoch shuffling, blinding draws, encryption randomness) gets its own
stream derived from one run seed, so protocol and centralized runs can
share exactly the streams they should share and no others.
"""

from __future__ import annotations

import hashlib
import json
import random
import time
from dataclasses import dataclass, field

import numpy as np

from .datasets import Dataset
from .errors import ConfigError
from .fixedpoint import (
    dequantize_vec,
    fx_matvec,
    fx_matvec_t,
    fx_outer,
    fx_rate_step_mat,
    fx_sub_mat,
    quantize,
    quantize_mat,
    quantize_vec,
    rescale_mat,
    rescale_vec,
)
from .nn import FIXED_MODE, FLOAT_MODE, FeatureExtractor, cross_entropy, grad_logits, init_dense, softmax
from .paillier import KeyPair, keygen
from .protocol import (
    ActiveParty,
    AuditRecorder,
    PassiveParty,
    Session,
    SessionConfig,
    serve_forever,
    serve_pending,
)
from .transport import (
    ROLE_ACTIVE,
    ROLE_PASSIVE,
    TcpListener,
    TranscriptWriter,
    in_process_pair,
    tcp_connect,
)


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from any printable parts; order matters."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """The sample visit order for one epoch; shared by all trainers."""
    return np.random.default_rng(derive_seed(seed, "epoch", epoch)).permutation(n)


def batched(order, batch_size: int):
    for lo in range(0, len(order), batch_size):
        yield [int(i) for i in order[lo : lo + batch_size]]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    """Per-run record; the JSONL form keeps metric lines free of timings so
    two equivalent runs produce byte-identical metric sections."""

    config: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)
    eval: dict | None = None
    active_stats: dict | None = None
    passive_stats: dict | None = None
    predictions: list = field(default_factory=list)
    wall_seconds: float = 0.0
    steps: int = 0
    transcript_sha256: str | None = None

    def metric_lines(self) -> list[str]:
        lines = [json.dumps({"kind": "config", **self.config}, sort_keys=True)]
        for ep in self.epochs:
            lines.append(json.dumps({"kind": "epoch", **ep}, sort_keys=True))
        if self.eval is not None:
            lines.append(json.dumps({"kind": "eval", **self.eval}, sort_keys=True))
        return lines

    def to_jsonl(self, path) -> None:
        with open(path, "w") as out:
            for line in self.metric_lines():
                out.write(line + "\n")
            out.write(
                json.dumps(
                    {"kind": "timing", "wall_seconds": self.wall_seconds, "steps": self.steps},
                    sort_keys=True,
                )
                + "\n"
            )
            for label, stats in (("active", self.active_stats), ("passive", self.passive_stats)):
                if stats:
                    out.write(json.dumps({"kind": "stats", "party": label, **stats}, sort_keys=True) + "\n")
            if self.transcript_sha256:
                out.write(
                    json.dumps({"kind": "transcript", "sha256": self.transcript_sha256}) + "\n"
                )


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as src:
        for chunk in iter(lambda: src.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Centralized reference trainers
# ---------------------------------------------------------------------------


@dataclass
class CentralizedModel:
    extractor: FeatureExtractor
    head: object  # GridMat in fixed mode, np.ndarray in float mode
    mode: str
    frac_bits: int

    def logits(self, x: np.ndarray) -> np.ndarray:
        a, _ = self.extractor.forward(x)
        if self.mode == FIXED_MODE:
            f = self.frac_bits
            z_f = rescale_vec(fx_matvec(self.head, a), f)
            return np.array(dequantize_vec(z_f, f))
        return np.asarray(self.head) @ a

    def predict(self, x: np.ndarray) -> int:
        return int(np.argmax(self.logits(x)))

    def evaluate(self, ds: Dataset) -> dict:
        loss_sum, correct = 0.0, 0
        for x, t in zip(ds.features, ds.labels):
            p = softmax(self.logits(x))
            loss_sum += cross_entropy(p, t)
            correct += int(np.argmax(p) == np.argmax(t))
        return {
            "loss_mean": loss_sum / max(ds.n, 1),
            "accuracy": correct / max(ds.n, 1),
            "count": ds.n,
        }


def build_model(
    d_in: int,
    hidden: list[int],
    n_classes: int,
    seed: int,
    mode: str = FLOAT_MODE,
    frac_bits: int = 32,
) -> CentralizedModel:
    """Extractor + head with the same derived seeds the protocol uses."""
    extractor = FeatureExtractor.build(
        [d_in, *hidden], seed=derive_seed(seed, "extractor"), mode=mode, frac_bits=frac_bits
    )
    head_float = init_dense(n_classes, hidden[-1], np.random.default_rng(derive_seed(seed, "head")))
    head = quantize_mat(head_float, frac_bits) if mode == FIXED_MODE else head_float
    return CentralizedModel(extractor, head, mode, frac_bits)


def _centralized_step_fixed(model: CentralizedModel, xs, ts, rate_int: int, lr: float, f: int) -> dict:
    batch = len(xs)
    stats = {"loss_sum": 0.0, "correct": 0, "count": batch, "preds": []}
    g_ints, a_ints, caches = [], [], []
    for x, t in zip(xs, ts):
        a_int, cache = model.extractor.forward(x)
        z_f = rescale_vec(fx_matvec(model.head, a_int), f)
        p = softmax(np.array(dequantize_vec(z_f, f)))
        stats["loss_sum"] += cross_entropy(p, t)
        stats["correct"] += int(np.argmax(p) == np.argmax(t))
        stats["preds"].append(int(np.argmax(p)))
        g_ints.append(quantize_vec(grad_logits(p, t) / batch, f))
        a_ints.append(a_int)
        caches.append(cache)

    # Head gradient: per-sample outer products summed at double scale, one rescale.
    grad_2f = fx_outer(g_ints[0], a_ints[0])
    for g_int, a_int in zip(g_ints[1:], a_ints[1:]):
        prod = fx_outer(g_int, a_int)
        grad_2f = [[a + b for a, b in zip(ra, rb)] for ra, rb in zip(grad_2f, prod)]
    grad_f = rescale_mat(grad_2f, f)

    # Activation gradients use the pre-update head, exactly as the protocol does.
    ex_grads = None
    for g_int, cache in zip(g_ints, caches):
        u_f = rescale_vec(fx_matvec_t(model.head, g_int), f)
        sample = model.extractor.backward(cache, u_f)
        ex_grads = sample if ex_grads is None else model.extractor.add_grads(ex_grads, sample)
    model.extractor.apply_update(ex_grads, lr)
    model.head = fx_sub_mat(model.head, fx_rate_step_mat(rate_int, grad_f, f))
    return stats


def _centralized_step_float(model: CentralizedModel, xs, ts, lr: float) -> dict:
    batch = len(xs)
    stats = {"loss_sum": 0.0, "correct": 0, "count": batch, "preds": []}
    head = np.asarray(model.head)
    grad_head = np.zeros_like(head)
    ex_grads = None
    for x, t in zip(xs, ts):
        a, cache = model.extractor.forward(x)
        p = softmax(head @ a)
        stats["loss_sum"] += cross_entropy(p, t)
        stats["correct"] += int(np.argmax(p) == np.argmax(t))
        stats["preds"].append(int(np.argmax(p)))
        g = grad_logits(p, t) / batch
        grad_head += np.outer(g, a)
        sample = model.extractor.backward(cache, head.T @ g)
        ex_grads = sample if ex_grads is None else model.extractor.add_grads(ex_grads, sample)
    model.extractor.apply_update(ex_grads, lr)
    model.head = head - lr * grad_head
    return stats


def train_centralized(
    train_ds: Dataset,
    hidden: list[int],
    *,
    seed: int,
    epochs: int = 1,
    batch_size: int = 1,
    learning_rate: float = 0.125,
    mode: str = FLOAT_MODE,
    frac_bits: int = 32,
    test_ds: Dataset | None = None,
    max_steps: int | None = None,
    on_step=None,
) -> tuple[CentralizedModel, RunReport]:
    """Single-process trainer, the reference both for accuracy and for bits."""
    model = build_model(train_ds.d_in, hidden, train_ds.n_classes, seed, mode, frac_bits)
    rate_int = quantize(learning_rate, frac_bits)
    report = RunReport(
        config={
            "trainer": "centralized",
            "mode": mode,
            "hidden": hidden,
            "epochs": epochs,
            "batch_size": batch_size,
            "learning_rate": learning_rate,
            "frac_bits": frac_bits,
            "seed": seed,
        }
    )
    start = time.perf_counter()
    steps = 0
    done = False
    for epoch in range(epochs):
        agg = {"loss_sum": 0.0, "correct": 0, "count": 0}
        for batch_ids in batched(epoch_order(seed, epoch, train_ds.n), batch_size):
            xs = [train_ds.features[i] for i in batch_ids]
            ts = [train_ds.labels[i] for i in batch_ids]
            if mode == FIXED_MODE:
                stats = _centralized_step_fixed(model, xs, ts, rate_int, learning_rate, frac_bits)
            else:
                stats = _centralized_step_float(model, xs, ts, learning_rate)
            for key in ("loss_sum", "correct", "count"):
                agg[key] += stats[key]
            report.predictions.extend(zip(batch_ids, stats["preds"]))
            steps += 1
            if on_step is not None:
                on_step(steps, model)
            if max_steps is not None and steps >= max_steps:
                done = True
                break
        report.epochs.append(
            {
                "epoch": epoch,
                "loss_mean": agg["loss_sum"] / max(agg["count"], 1),
                "train_accuracy": agg["correct"] / max(agg["count"], 1),
                "count": agg["count"],
            }
        )
        if done:
            break
    if test_ds is not None:
        report.eval = model.evaluate(test_ds)
    report.steps = steps
    report.wall_seconds = time.perf_counter() - start
    return model, report


# ---------------------------------------------------------------------------
# Two-party runs
# ---------------------------------------------------------------------------


def build_parties(
    train_ds: Dataset,
    hidden: list[int],
    config: SessionConfig,
    seed: int,
    keys: KeyPair | None = None,
    key_bits: int = 2048,
    test_ds: Dataset | None = None,
    record: bool = False,
) -> tuple[ActiveParty, PassiveParty]:
    """Construct both parties with streams derived from one seed.

    Extractor and head seeds match ``build_model`` so that centralized and
    protocol runs start from identical weights.  When ``test_ds`` is given
    its labels are appended to the passive table; eval row ids are offset
    by the training set size.
    """
    if config.d_hidden != hidden[-1]:
        raise ConfigError(f"config.d_hidden={config.d_hidden} but hidden dims end in {hidden[-1]}")
    if keys is None:
        keys = keygen(key_bits, random.Random(derive_seed(seed, "keygen")))
    extractor = FeatureExtractor.build(
        [train_ds.d_in, *hidden],
        seed=derive_seed(seed, "extractor"),
        mode=config.arithmetic,
        frac_bits=config.frac_bits,
    )
    labels = train_ds.labels if test_ds is None else np.vstack([train_ds.labels, test_ds.labels])
    active = ActiveParty(
        keys,
        extractor,
        config,
        noise_rng=random.Random(derive_seed(seed, "active-noise")),
        crypto_rng=random.Random(derive_seed(seed, "active-crypto")),
        recorder=AuditRecorder() if record else None,
    )
    passive = PassiveParty(
        config,
        labels,
        head_seed=derive_seed(seed, "head"),
        noise_rng=random.Random(derive_seed(seed, "passive-noise")),
        crypto_rng=random.Random(derive_seed(seed, "passive-crypto")),
        recorder=AuditRecorder() if record else None,
    )
    return active, passive


def drive_training(
    session: Session,
    train_ds: Dataset,
    *,
    seed: int,
    epochs: int = 1,
    batch_size: int = 1,
    test_ds: Dataset | None = None,
    max_steps: int | None = None,
    eval_passes: int = 1,
    on_step=None,
    log=None,
) -> RunReport:
    """Run the full training loop through an already-connected session.

    The active side drives; ``train_ds`` supplies features and row ids (its
    labels never cross the wire -- the passive party has its own copy).
    ``eval_passes > 1`` repeats the final evaluation; a second pass gives a
    leakage audit the duplicate plaintexts its re-randomization check needs.
    """
    active = session.active
    report = RunReport(
        config={
            "trainer": "protocol",
            "mode": active.config.arithmetic,
            "epochs": epochs,
            "batch_size": batch_size,
            "learning_rate": active.config.learning_rate,
            "frac_bits": active.config.frac_bits,
            "seed": seed,
            "noise": {
                "sum_bound": active.config.noise.sum_bound,
                "grad_bound": active.config.noise.grad_bound,
            },
        }
    )
    start = time.perf_counter()
    session.handshake()
    steps = 0
    done = False
    for epoch in range(epochs):
        session.begin_train_phase()
        for batch_ids in batched(epoch_order(seed, epoch, train_ds.n), batch_size):
            xs = [train_ds.features[i] for i in batch_ids]
            session.train_batch(xs, batch_ids)
            steps += 1
            if on_step is not None:
                on_step(steps, session)
            if max_steps is not None and steps >= max_steps:
                done = True
                break
        metrics = session.epoch_metrics(epoch)
        report.epochs.append(
            {
                "epoch": epoch,
                "loss_mean": metrics.get("loss_mean"),
                "train_accuracy": metrics.get("train_accuracy"),
                "count": metrics.get("count"),
            }
        )
        if log is not None:
            ep = report.epochs[-1]
            log(
                f"epoch {epoch}: loss {ep['loss_mean']:.4f} "
                f"acc {ep['train_accuracy']:.4f} ({ep['count']} samples)"
            )
        if done:
            break
    if test_ds is not None:
        for _ in range(max(eval_passes, 1)):
            report.eval = evaluate_via_session(
                session, test_ds, row_offset=train_ds.n, batch_size=batch_size
            )
        if log is not None:
            log(f"eval: loss {report.eval['loss_mean']:.4f} acc {report.eval['accuracy']:.4f}")
    report.steps = steps
    report.wall_seconds = time.perf_counter() - start
    report.active_stats = active.stats.as_dict()
    return report


def evaluate_via_session(
    session: Session, test_ds: Dataset, row_offset: int, batch_size: int = 1
) -> dict:
    session.begin_eval_phase()
    for lo in range(0, test_ds.n, batch_size):
        ids = list(range(lo, min(lo + batch_size, test_ds.n)))
        xs = [test_ds.features[i] for i in ids]
        session.eval_batch(xs, [row_offset + i for i in ids])
    result = session.end_eval_phase()
    count = max(result.get("count", 0), 1)
    return {
        "loss_mean": result.get("loss_sum", 0.0) / count,
        "accuracy": result.get("correct", 0) / count,
        "count": result.get("count", 0),
    }


def run_local_protocol(
    train_ds: Dataset,
    hidden: list[int],
    config: SessionConfig,
    *,
    seed: int,
    epochs: int = 1,
    keys: KeyPair | None = None,
    key_bits: int = 2048,
    test_ds: Dataset | None = None,
    transcript_path=None,
    record: bool = False,
    max_steps: int | None = None,
    eval_passes: int = 1,
    on_step=None,
    log=None,
) -> tuple[ActiveParty, PassiveParty, RunReport]:
    """Both parties in one process, exchanging real serialized frames."""
    active, passive = build_parties(
        train_ds, hidden, config, seed, keys=keys, key_bits=key_bits, test_ds=test_ds, record=record
    )
    transcript = TranscriptWriter.to_path(transcript_path) if transcript_path else None
    chan_a, chan_p = in_process_pair(transcript)
    session = Session(chan_a, active, pump=lambda: serve_pending(passive, chan_p))
    try:
        report = drive_training(
            session,
            train_ds,
            seed=seed,
            epochs=epochs,
            batch_size=config.batch_size,
            test_ds=test_ds,
            max_steps=max_steps,
            eval_passes=eval_passes,
            on_step=on_step,
            log=log,
        )
        session.shutdown()
    finally:
        chan_a.close()
        chan_p.close()
        if transcript is not None:
            transcript.close()
    if transcript_path:
        report.transcript_sha256 = file_sha256(transcript_path)
    report.passive_stats = passive.stats.as_dict()
    return active, passive, report


def run_passive_server(
    host: str,
    port: int,
    config: SessionConfig,
    labels: np.ndarray,
    head_seed: int,
    *,
    seed: int,
    transcript_path=None,
    log=None,
) -> PassiveParty:
    """Label-owner role process: accept one session, serve it to completion."""
    passive = PassiveParty(
        config,
        labels,
        head_seed=head_seed,
        noise_rng=random.Random(derive_seed(seed, "passive-noise")),
        crypto_rng=random.Random(derive_seed(seed, "passive-crypto")),
    )
    transcript = TranscriptWriter.to_path(transcript_path) if transcript_path else None
    listener = TcpListener(host, port)
    if log is not None:
        log(f"listening on {listener.host}:{listener.port}")
    try:
        channel = listener.accept(ROLE_PASSIVE, transcript=transcript, record_inbound=True)
        try:
            serve_forever(passive, channel)
        finally:
            channel.close()
    finally:
        listener.close()
        if transcript is not None:
            transcript.close()
    return passive


def connect_active_session(
    host: str,
    port: int,
    active: ActiveParty,
    transcript_path=None,
) -> tuple[Session, object]:
    """Feature-owner side of a TCP deployment; caller drives and closes."""
    transcript = TranscriptWriter.to_path(transcript_path) if transcript_path else None
    channel = tcp_connect(host, port, ROLE_ACTIVE, transcript=transcript, record_inbound=True)
    return Session(channel, active), channel
