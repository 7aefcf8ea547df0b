"""Two-party split training over additively homomorphic encryption.

Roles
-----
The *active* party owns the raw features, a private feature extractor, and
the only decryption key.  The *passive* party owns the labels and a linear
classification head -- but never the true head weights: it holds a noisy
copy ``W~ = W + acc`` where ``acc`` is the running sum of blinding noise the
active party has injected into every update.  The active party keeps that
ledger; neither party alone knows the clean head.

Per training step the parties exchange six data-bearing messages, in tag
order (0x07 CONTROL carries handshake, phase markers, and metrics):

  0x01 ENC_ACTIVATION   active  -> passive   encrypted hidden activations
  0x02 NOISY_WSUM       passive -> active    encrypted W~ @ a, + sum noise
  0x03 DENOISED_WSUM    active  -> passive   plaintext logits, noise-ledger
                                             contribution removed, still
                                             blinded by the passive's own
                                             sum noise
  0x04 ENC_WGRAD        passive -> active    encrypted head gradient + noise
  0x05 BLINDED_WGRAD    active  -> passive   plaintext gradient minus fresh
                                             update noise, plus the ledger
                                             encrypted under the active key
  0x06 ENC_ACT_GRAD     passive -> active    encrypted activation gradient,
                                             homomorphically corrected for
                                             the ledger inside W~

Exactness discipline
--------------------
Every cross-party quantity lives on the fixed-point grid, update noise is
drawn so that rate * noise is exactly representable (see
``fixedpoint.blinding_step``), and the one rescaling division is additive in
whole grid steps.  Consequence: with the noise ledger subtracted, a
protocol run is bit-identical to a centralized fixed-point trainer -- the
blinding changes what each party sees, never what the model learns.

No party ever multiplies two ciphertexts; wherever a product of two hidden
values is needed, the protocol reroutes so that one factor is plaintext at
the party doing the multiplication.
"""

from __future__ import annotations

import json
import random
import struct
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from io import BytesIO
from typing import Callable, Sequence

import numpy as np

from . import paillier
from .ciphertensor import (
    CipherMatrix,
    CipherVector,
    add_grid_matrix,
    add_grid_vector,
    ct_add_cipher,
    decrypt_grid_matrix,
    decrypt_grid_vector,
    encrypt_grid_matrix,
    encrypt_grid_vector,
    matvec_grid,
    outer_grid,
    read_cipher_tensor,
    read_grid_tensor,
    tensor_bytes,
    transpose_matvec_grid,
    write_cipher_matrix,
    write_cipher_vector,
    write_grid_matrix,
    write_grid_vector,
)
from .errors import ConfigError, ProtocolError, TransportError
from .fixedpoint import (
    FixedScale,
    GridMat,
    GridVec,
    blinding_step,
    dequantize_vec,
    fx_matvec,
    fx_matvec_t,
    fx_max_abs,
    fx_outer,
    fx_rate_step_mat,
    fx_sub_mat,
    quantize,
    quantize_mat,
    quantize_vec,
    rescale,
    rescale_vec,
)
from .nn import FIXED_MODE, FLOAT_MODE, FeatureExtractor, cross_entropy, grad_logits, init_dense, softmax
from .paillier import KeyPair, OpCounter, PublicKey
from .transport import (
    TAG_BLINDED_WGRAD,
    TAG_CONTROL,
    TAG_DENOISED_WSUM,
    TAG_ENC_ACT_GRAD,
    TAG_ENC_ACTIVATION,
    TAG_ENC_WGRAD,
    TAG_NOISY_WSUM,
    Frame,
)

PROTOCOL_VERSION = 1

CTRL_HELLO = "hello"
CTRL_HELLO_ACK = "hello_ack"
CTRL_PHASE = "phase"
CTRL_OK = "ok"
CTRL_METRICS = "metrics"
CTRL_EVAL_ACK = "eval_ack"
CTRL_EVAL_RESULT = "eval_result"
CTRL_ERROR = "error"
CTRL_SHUTDOWN = "shutdown"

_ENVELOPE = struct.Struct(">QI")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class NoiseConfig:
    """Blinding amplitudes, as real magnitudes on the fixed-point grid.

    ``sum_bound`` blinds the weighted sums the key owner decrypts;
    ``grad_bound`` bounds the update noise folded into the passive head.
    Zero bounds disable blinding (useful for equivalence tests and for the
    audit's expected-failure fixture).  ``ledger_bound`` caps the
    accumulated head noise; crossing it is a hard error, since past that
    point overflow checks could no longer be guaranteed.
    """

    sum_bound: float = 2.0**10
    grad_bound: float = 2.0**6
    ledger_bound: float = 2.0**16

    def validate(self) -> None:
        problems = []
        if self.sum_bound < 0:
            problems.append(f"sum_bound must be >= 0, got {self.sum_bound}")
        if self.grad_bound < 0:
            problems.append(f"grad_bound must be >= 0, got {self.grad_bound}")
        if self.ledger_bound <= 0:
            problems.append(f"ledger_bound must be > 0, got {self.ledger_bound}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class SessionConfig:
    """Everything both parties must agree on before training."""

    d_hidden: int
    n_classes: int
    frac_bits: int = 32
    learning_rate: float = 0.125
    batch_size: int = 1
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    arithmetic: str = FLOAT_MODE  # extractor-side arithmetic; head side is always grid

    def validate(self) -> None:
        problems = []
        if self.d_hidden < 1:
            problems.append(f"d_hidden must be >= 1, got {self.d_hidden}")
        if self.n_classes < 2:
            problems.append(f"n_classes must be >= 2, got {self.n_classes}")
        if not 8 <= self.frac_bits <= 64:
            problems.append(f"frac_bits must be in [8, 64], got {self.frac_bits}")
        if self.learning_rate < 0:
            problems.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.arithmetic not in (FLOAT_MODE, FIXED_MODE):
            problems.append(f"arithmetic must be float or fixed, got {self.arithmetic!r}")
        if problems:
            raise ConfigError("; ".join(problems))
        self.noise.validate()

    @property
    def rate_int(self) -> int:
        return quantize(self.learning_rate, self.frac_bits)

    def shared_fields(self) -> dict:
        return {
            "version": PROTOCOL_VERSION,
            "frac_bits": self.frac_bits,
            "rate_int": self.rate_int,
            "d_hidden": self.d_hidden,
            "n_classes": self.n_classes,
            "batch_size": self.batch_size,
            "sum_bound_int": quantize(self.noise.sum_bound, self.frac_bits),
            "grad_bound_int": quantize(self.noise.grad_bound, self.frac_bits),
        }

    def mismatches(self, theirs: dict) -> list[str]:
        """All disagreements between this config and a peer's hello, not just the first."""
        mine = self.shared_fields()
        problems = []
        for key in sorted(set(mine) | set(theirs)):
            a, b = mine.get(key), theirs.get(key)
            if a != b:
                problems.append(f"{key}: ours={a!r} theirs={b!r}")
        return problems


# ---------------------------------------------------------------------------
# Envelope: common message header
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Envelope:
    """Tagged message with an 8-byte batch id and a 4-byte step counter."""

    tag: int
    batch_id: int
    step: int
    body: bytes

    def to_frame(self) -> Frame:
        return Frame(self.tag, _ENVELOPE.pack(self.batch_id, self.step) + self.body)

    @classmethod
    def from_frame(cls, frame: Frame) -> "Envelope":
        if len(frame.payload) < _ENVELOPE.size:
            raise ProtocolError(f"message 0x{frame.tag:02x} shorter than its header")
        batch_id, step = _ENVELOPE.unpack_from(frame.payload)
        return cls(frame.tag, batch_id, step, frame.payload[_ENVELOPE.size :])


def control_envelope(step: int, kind: str, **fields) -> Envelope:
    body = json.dumps({"kind": kind, **fields}, sort_keys=True).encode()
    return Envelope(TAG_CONTROL, 0, step, body)


def parse_control(env: Envelope) -> dict:
    if env.tag != TAG_CONTROL:
        raise ProtocolError(f"expected a control message, got tag 0x{env.tag:02x}")
    try:
        obj = json.loads(env.body.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed control payload: {exc}") from exc
    if "kind" not in obj:
        raise ProtocolError("control payload missing 'kind'")
    return obj


# ---------------------------------------------------------------------------
# Phase accounting
# ---------------------------------------------------------------------------


class PhaseStats:
    """Wall-clock and primitive-operation tallies, keyed by phase name."""

    def __init__(self):
        self.times: dict[str, float] = {}
        self.counters: dict[str, OpCounter] = {}

    @contextmanager
    def phase(self, name: str):
        counter = self.counters.setdefault(name, OpCounter())
        start = time.perf_counter()
        with paillier.count_ops(counter):
            yield
        self.times[name] = self.times.get(name, 0.0) + (time.perf_counter() - start)

    def reset(self) -> None:
        self.times.clear()
        self.counters.clear()

    def as_dict(self) -> dict:
        return {
            "times": dict(sorted(self.times.items())),
            "ops": {name: c.as_dict() for name, c in sorted(self.counters.items())},
        }


class AuditRecorder:
    """Test-mode capture of the noise both parties drew and what they saw.

    The leakage audit reconstructs unblinded tensors from these records and
    checks them against the transcript.  Never enable outside tests: the
    records deliberately contain exactly the values the blinding hides.
    """

    def __init__(self):
        self.entries: list[dict] = []

    def record(self, step: int, batch_id: int, party: str, name: str, data) -> None:
        self.entries.append(
            {"step": step, "batch": batch_id, "party": party, "name": name, "data": data}
        )

    def find(self, name: str, batch_id: int | None = None) -> list[dict]:
        return [
            e
            for e in self.entries
            if e["name"] == name and (batch_id is None or e["batch"] == batch_id)
        ]

    def save(self, path) -> None:
        with open(path, "w") as out:
            for entry in self.entries:
                out.write(json.dumps(entry) + "\n")

    @classmethod
    def load(cls, path) -> "AuditRecorder":
        rec = cls()
        with open(path) as src:
            for line in src:
                line = line.strip()
                if line:
                    rec.entries.append(json.loads(line))
        return rec


# ---------------------------------------------------------------------------
# Active party
# ---------------------------------------------------------------------------


class ActiveParty:
    """Feature owner: private extractor, decryption key, noise ledger."""

    def __init__(
        self,
        keys: KeyPair,
        extractor: FeatureExtractor,
        config: SessionConfig,
        noise_rng: random.Random,
        crypto_rng: random.Random | None = None,
        recorder: AuditRecorder | None = None,
    ):
        config.validate()
        if extractor.out_dim != config.d_hidden:
            raise ConfigError(
                f"extractor emits {extractor.out_dim} features, config says {config.d_hidden}"
            )
        if extractor.mode != config.arithmetic:
            raise ConfigError(
                f"extractor mode {extractor.mode!r} != configured arithmetic {config.arithmetic!r}"
            )
        self.keys = keys
        self.extractor = extractor
        self.config = config
        self.fs = FixedScale(config.frac_bits, keys.public.n)
        self.noise_rng = noise_rng
        self.crypto_rng = crypto_rng or noise_rng
        self.recorder = recorder
        self.stats = PhaseStats()

        f = config.frac_bits
        self.rate_int = config.rate_int
        self.delta_step = blinding_step(self.rate_int, f)
        # Largest multiple count so that |delta| <= grad_bound on the grid.
        self.delta_limit = int(config.noise.grad_bound * (1 << f)) // self.delta_step
        self.ledger_limit = int(config.noise.ledger_bound * (1 << f))

        self.eps_acc: GridMat = [[0] * config.d_hidden for _ in range(config.n_classes)]
        self.step = 0
        self._caches: dict[int, dict] = {}

    # -- forward ------------------------------------------------------------

    def forward(self, xs: Sequence[np.ndarray], row_ids: Sequence[int], batch_id: int) -> Envelope:
        """Encrypt per-sample hidden activations (message 0x01)."""
        if len(xs) != len(row_ids) or not xs:
            raise ProtocolError("forward needs one row id per sample")
        a_rows: list[GridVec] = []
        caches = []
        with self.stats.phase("extract"):
            for x in xs:
                a, cache = self.extractor.forward(x)
                a_int = a if self.extractor.mode == FIXED_MODE else quantize_vec(a, self.config.frac_bits)
                a_rows.append(a_int)
                caches.append(cache)
        with self.stats.phase("encrypt_activation"):
            if len(a_rows) == 1:
                ct = encrypt_grid_vector(self.keys.public, a_rows[0], self.fs, rng=self.crypto_rng)
                body = tensor_bytes(write_cipher_vector, ct)
            else:
                ct = encrypt_grid_matrix(self.keys.public, a_rows, self.fs, rng=self.crypto_rng)
                body = tensor_bytes(write_cipher_matrix, ct)
        if self.recorder:
            self.recorder.record(self.step, batch_id, "active", "activation_int", a_rows)
        self._caches[batch_id] = {"a_rows": a_rows, "caches": caches}
        header = struct.pack(">I", len(row_ids)) + b"".join(
            struct.pack(">Q", rid) for rid in row_ids
        )
        return Envelope(TAG_ENC_ACTIVATION, batch_id, self.step, header + body)

    # -- message 0x02 -> 0x03 -------------------------------------------------

    def denoise_sum(self, env: Envelope) -> Envelope:
        """Decrypt the noisy weighted sum, cancel the ledger's contribution.

        The passive party computed W~ @ a where W~ carries the accumulated
        noise; subtracting eps_acc @ a in the very same integer arithmetic
        removes it exactly.  The result is rescaled to scale f and sent back
        still blinded by the passive's own sum noise.
        """
        self._expect(env, TAG_NOISY_WSUM)
        cache = self._cache_for(env.batch_id)
        f = self.config.frac_bits
        tensor = read_cipher_tensor(BytesIO(env.body), self.keys.public)
        rows = [tensor.values] if isinstance(tensor, CipherVector) else tensor.rows
        if len(rows) != len(cache["a_rows"]):
            raise ProtocolError(
                f"weighted sum carries {len(rows)} rows for a batch of {len(cache['a_rows'])}"
            )
        out_rows: list[GridVec] = []
        for raw_row, a_int in zip(rows, cache["a_rows"]):
            with self.stats.phase("decrypt_sum"):
                noisy = decrypt_grid_vector(
                    self.keys.private, CipherVector(self.keys.public, 2 * f, list(raw_row)), self.fs
                )
            ledger_part = fx_matvec(self.eps_acc, a_int)
            out_rows.append([rescale(nv - lv, f) for nv, lv in zip(noisy, ledger_part, strict=True)])
        if self.recorder:
            self.recorder.record(self.step, env.batch_id, "active", "sum_sent", out_rows)
        if len(out_rows) == 1:
            body = tensor_bytes(write_grid_vector, out_rows[0], f)
        else:
            body = tensor_bytes(write_grid_matrix, out_rows, f)
        return Envelope(TAG_DENOISED_WSUM, env.batch_id, self.step, body)

    # -- message 0x04 -> 0x05 -------------------------------------------------

    def grad_rewrap(self, env: Envelope) -> Envelope:
        """Re-blind the head gradient with fresh update noise and ship the ledger.

        The decrypted gradient still carries the passive party's additive
        noise, so nothing clean is visible here either.  Fresh noise delta
        is drawn on the stride where rate * delta is exact; its effect on
        the update (eps_w) joins the plaintext ledger, and the
        *pre-accumulation* ledger is encrypted and sent along so the peer
        can correct the activation gradient it is about to compute.
        """
        self._expect(env, TAG_ENC_WGRAD)
        self._cache_for(env.batch_id)
        f = self.config.frac_bits
        factor = 1 << f
        tensor = read_cipher_tensor(BytesIO(env.body), self.keys.public)
        if not isinstance(tensor, CipherMatrix):
            raise ProtocolError("head gradient must be a matrix")
        with self.stats.phase("decrypt_wgrad"):
            noisy_2f = decrypt_grid_matrix(self.keys.private, tensor, self.fs)
        shape = (self.config.n_classes, self.config.d_hidden)
        if (len(noisy_2f), len(noisy_2f[0])) != shape:
            raise ProtocolError(f"head gradient shape {len(noisy_2f)}x{len(noisy_2f[0])}, expected {shape}")

        delta = [
            [self.noise_rng.randint(-self.delta_limit, self.delta_limit) * self.delta_step
             for _ in range(shape[1])]
            for _ in range(shape[0])
        ]
        # rate_int * delta is divisible by 2^f by construction: exact, no rounding.
        eps_w = [[(self.rate_int * dv) >> f for dv in row] for row in delta]
        blinded = [
            [nv - dv * factor for nv, dv in zip(nrow, drow)]
            for nrow, drow in zip(noisy_2f, delta)
        ]
        with self.stats.phase("encrypt_ledger"):
            ledger_ct = encrypt_grid_matrix(
                self.keys.public, self.eps_acc, self.fs, rng=self.crypto_rng
            )
        if self.recorder:
            self.recorder.record(self.step, env.batch_id, "active", "wgrad_decrypted", noisy_2f)
            self.recorder.record(self.step, env.batch_id, "active", "delta", delta)
            self.recorder.record(self.step, env.batch_id, "active", "eps_w", eps_w)
        # Ledger accumulates only after the pre-accumulation copy was encrypted.
        self.eps_acc = [
            [av + wv for av, wv in zip(arow, wrow)] for arow, wrow in zip(self.eps_acc, eps_w)
        ]
        worst = fx_max_abs(self.eps_acc)
        if worst > self.ledger_limit:
            raise ProtocolError(
                f"accumulated head noise reached {worst} (cap {self.ledger_limit}); "
                "re-key and restart rather than risk overflow"
            )
        body = tensor_bytes(write_grid_matrix, blinded, 2 * f) + tensor_bytes(
            write_cipher_matrix, ledger_ct
        )
        return Envelope(TAG_BLINDED_WGRAD, env.batch_id, self.step, body)

    # -- message 0x06: finish the step locally --------------------------------

    def apply_input_grad(self, env: Envelope) -> None:
        """Decrypt per-sample activation gradients and update the extractor."""
        self._expect(env, TAG_ENC_ACT_GRAD)
        cache = self._cache_for(env.batch_id)
        f = self.config.frac_bits
        tensor = read_cipher_tensor(BytesIO(env.body), self.keys.public)
        rows = [tensor.values] if isinstance(tensor, CipherVector) else tensor.rows
        if len(rows) != len(cache["caches"]):
            raise ProtocolError("activation gradient row count does not match the batch")
        grads = None
        with self.stats.phase("local_backward"):
            for raw_row, ex_cache in zip(rows, cache["caches"]):
                with self.stats.phase("decrypt_input_grad"):
                    u_2f = decrypt_grid_vector(
                        self.keys.private,
                        CipherVector(self.keys.public, 2 * f, list(raw_row)),
                        self.fs,
                    )
                u_f = rescale_vec(u_2f, f)
                if self.extractor.mode == FIXED_MODE:
                    upstream = u_f
                else:
                    upstream = np.array(dequantize_vec(u_f, f))
                sample_grads = self.extractor.backward(ex_cache, upstream)
                grads = sample_grads if grads is None else self.extractor.add_grads(grads, sample_grads)
            self.extractor.apply_update(grads, self.config.learning_rate)
        del self._caches[env.batch_id]
        self.step += 1

    # -- bookkeeping ----------------------------------------------------------

    def drop_cache(self, batch_id: int) -> None:
        self._caches.pop(batch_id, None)

    def snapshot(self):
        return (
            self.extractor.snapshot(),
            [row[:] for row in self.eps_acc],
            self.step,
            self.noise_rng.getstate(),
            dict(self._caches),
        )

    def restore(self, snap) -> None:
        ex_state, eps_acc, step, rng_state, caches = snap
        self.extractor.restore(ex_state)
        self.eps_acc = [row[:] for row in eps_acc]
        self.step = step
        self.noise_rng.setstate(rng_state)
        self._caches = dict(caches)

    def _expect(self, env: Envelope, tag: int) -> None:
        if env.tag != tag:
            raise ProtocolError(f"expected tag 0x{tag:02x}, got 0x{env.tag:02x}")

    def _cache_for(self, batch_id: int) -> dict:
        if batch_id not in self._caches:
            raise ProtocolError(f"no pending forward for batch {batch_id} (out-of-order message?)")
        return self._caches[batch_id]


# ---------------------------------------------------------------------------
# Passive party
# ---------------------------------------------------------------------------


class PassiveParty:
    """Label owner: noisy head weights, per-message noise caches, no key."""

    def __init__(
        self,
        config: SessionConfig,
        labels: np.ndarray,
        head_seed: int,
        noise_rng: random.Random,
        crypto_rng: random.Random | None = None,
        recorder: AuditRecorder | None = None,
    ):
        config.validate()
        labels = np.asarray(labels, dtype=np.float64)
        if labels.ndim != 2 or labels.shape[1] != config.n_classes:
            raise ConfigError(
                f"labels must be one-hot with {config.n_classes} columns, got shape {labels.shape}"
            )
        self.config = config
        self.labels = labels
        self.noise_rng = noise_rng
        self.crypto_rng = crypto_rng or noise_rng
        self.recorder = recorder
        self.stats = PhaseStats()

        f = config.frac_bits
        head_float = init_dense(config.n_classes, config.d_hidden, np.random.default_rng(head_seed))
        self.w_noisy: GridMat = quantize_mat(head_float, f)
        self.rate_int = config.rate_int
        self.sum_noise_limit = int(config.noise.sum_bound * (1 << f))

        self.pk: PublicKey | None = None
        self.fs: FixedScale | None = None
        self.eval_mode = False
        self.last_step = 0
        self._caches: dict[int, dict] = {}
        self._step_snapshot = None
        self._train_stats = {"loss_sum": 0.0, "correct": 0, "count": 0}
        self._eval_stats = {"loss_sum": 0.0, "correct": 0, "count": 0}

    # -- handshake ------------------------------------------------------------

    def handle_control(self, env: Envelope) -> list[Envelope]:
        msg = parse_control(env)
        kind = msg["kind"]
        if kind == CTRL_HELLO:
            if self.pk is not None:
                raise ProtocolError("handshake replay on a live session")
            problems = self.config.mismatches(msg["config"])
            if problems:
                raise ProtocolError("config mismatch: " + "; ".join(problems))
            n = int(msg["n"])
            if int(msg["g"]) != n + 1:
                raise ProtocolError("peer sent an inconsistent public key")
            self.pk = PublicKey.from_n(n)
            self.fs = FixedScale(self.config.frac_bits, n)
            return [control_envelope(env.step, CTRL_HELLO_ACK, version=PROTOCOL_VERSION)]
        if kind == CTRL_PHASE:
            return self._handle_phase(env, msg)
        if kind == CTRL_SHUTDOWN:
            return []
        raise ProtocolError(f"unexpected control kind {kind!r}")

    def _handle_phase(self, env: Envelope, msg: dict) -> list[Envelope]:
        phase = msg.get("phase")
        if phase == "train":
            self.eval_mode = False
            return [control_envelope(env.step, CTRL_OK)]
        if phase == "eval":
            self.eval_mode = True
            self._eval_stats = {"loss_sum": 0.0, "correct": 0, "count": 0}
            return [control_envelope(env.step, CTRL_OK)]
        if phase == "eval_end":
            self.eval_mode = False
            return [control_envelope(env.step, CTRL_EVAL_RESULT, **self._eval_stats)]
        if phase == "epoch_end":
            out = control_envelope(
                env.step,
                CTRL_METRICS,
                epoch=msg.get("epoch"),
                loss_mean=(
                    self._train_stats["loss_sum"] / max(self._train_stats["count"], 1)
                ),
                train_accuracy=(
                    self._train_stats["correct"] / max(self._train_stats["count"], 1)
                ),
                count=self._train_stats["count"],
            )
            self._train_stats = {"loss_sum": 0.0, "correct": 0, "count": 0}
            return [out]
        raise ProtocolError(f"unknown phase {phase!r}")

    # -- message 0x01 -> 0x02 ---------------------------------------------------

    def weighted_sum(self, env: Envelope) -> Envelope:
        """Apply the noisy head to encrypted activations, add fresh sum noise."""
        self._require_session()
        self._check_step(env)
        src = BytesIO(env.body)
        (count,) = struct.unpack(">I", src.read(4))
        row_ids = [struct.unpack(">Q", src.read(8))[0] for _ in range(count)]
        tensor = read_cipher_tensor(src, self.pk)
        enc_rows = (
            [CipherVector(self.pk, tensor.scale, tensor.values)]
            if isinstance(tensor, CipherVector)
            else [CipherVector(self.pk, tensor.scale, row) for row in tensor.rows]
        )
        if len(enc_rows) != count:
            raise ProtocolError(f"{count} row ids but {len(enc_rows)} activation rows")
        for rid in row_ids:
            if not 0 <= rid < len(self.labels):
                raise ProtocolError(f"row id {rid} outside the label table")
        self._step_snapshot = ([row[:] for row in self.w_noisy], self.noise_rng.getstate())

        f = self.config.frac_bits
        factor = 1 << f
        sum_rows: list[list[int]] = []
        eps_rows: list[GridVec] = []
        for enc_a in enc_rows:
            with self.stats.phase("matvec"):
                z_ct = matvec_grid(self.pk, self.w_noisy, enc_a, self.fs)
            eps = [
                self.noise_rng.randint(-self.sum_noise_limit, self.sum_noise_limit)
                for _ in range(self.config.n_classes)
            ]
            with self.stats.phase("sum_blind"):
                z_ct = add_grid_vector(z_ct, [e * factor for e in eps], self.fs)
            sum_rows.append(z_ct.values)
            eps_rows.append(eps)
        self._caches[env.batch_id] = {
            "row_ids": row_ids,
            "enc_rows": enc_rows,
            "eps_sum": eps_rows,
        }
        if self.recorder:
            self.recorder.record(env.step, env.batch_id, "passive", "eps_sum", eps_rows)
        if len(sum_rows) == 1:
            body = tensor_bytes(write_cipher_vector, CipherVector(self.pk, 2 * f, sum_rows[0]))
        else:
            body = tensor_bytes(write_cipher_matrix, CipherMatrix(self.pk, 2 * f, sum_rows))
        return Envelope(TAG_NOISY_WSUM, env.batch_id, env.step, body)

    # -- message 0x03 -> 0x04 (train) or scoring (eval) --------------------------

    def unblind_and_predict(self, env: Envelope) -> tuple[dict, list[GridVec], list[np.ndarray]]:
        cache = self._cache_for(env.batch_id)
        f = self.config.frac_bits
        tensor, scale = read_grid_tensor(BytesIO(env.body))
        if scale != f:
            raise ProtocolError(f"weighted sum arrived at scale {scale}, expected {f}")
        rows = [tensor] if tensor and isinstance(tensor[0], int) else tensor
        if len(rows) != len(cache["eps_sum"]):
            raise ProtocolError("denoised sum row count does not match the batch")
        z_rows: list[GridVec] = []
        p_rows: list[np.ndarray] = []
        for payload, eps in zip(rows, cache["eps_sum"]):
            z_f = [pv - ev for pv, ev in zip(payload, eps, strict=True)]
            z_rows.append(z_f)
            p_rows.append(softmax(np.array(dequantize_vec(z_f, f))))
        if self.recorder:
            self.recorder.record(env.step, env.batch_id, "passive", "sum_clean", z_rows)
        return cache, z_rows, p_rows

    def backward_init(self, env: Envelope) -> Envelope:
        """Score the batch, build the encrypted head gradient (message 0x04).

        Also caches the noisy plaintext activation gradient computed from
        the *pre-update* head; its ledger contamination is corrected
        homomorphically in update_and_grad.
        """
        cache, z_rows, p_rows = self.unblind_and_predict(env)
        f = self.config.frac_bits
        factor = 1 << f
        batch = len(z_rows)
        g_ints: list[GridVec] = []
        agrads_2f: list[GridVec] = []
        grad_ct: CipherMatrix | None = None
        # Loss is summed per batch first so epoch aggregates reproduce a
        # centralized trainer's float rounding exactly, not just closely.
        batch_loss = 0.0
        for row_id, enc_a, p in zip(cache["row_ids"], cache["enc_rows"], p_rows):
            t = self.labels[row_id]
            batch_loss += cross_entropy(p, t)
            self._train_stats["correct"] += int(np.argmax(p) == np.argmax(t))
            self._train_stats["count"] += 1
            g = grad_logits(p, t) / batch
            g_int = quantize_vec(g, f)
            g_ints.append(g_int)
            with self.stats.phase("plain_agrad"):
                agrads_2f.append(fx_matvec_t(self.w_noisy, g_int))
            with self.stats.phase("outer"):
                sample_ct = outer_grid(self.pk, g_int, enc_a, self.fs)
            if grad_ct is None:
                grad_ct = sample_ct
            else:
                with self.stats.phase("grad_acc"):
                    grad_ct = CipherMatrix(
                        self.pk,
                        sample_ct.scale,
                        [
                            [paillier.add_cipher(self.pk, a, b) for a, b in zip(ra, rb)]
                            for ra, rb in zip(grad_ct.rows, sample_ct.rows)
                        ],
                    )
        self._train_stats["loss_sum"] += batch_loss
        eps_grad = [
            [
                self.noise_rng.randint(-self.sum_noise_limit, self.sum_noise_limit)
                for _ in range(self.config.d_hidden)
            ]
            for _ in range(self.config.n_classes)
        ]
        with self.stats.phase("grad_blind"):
            grad_ct = add_grid_matrix(grad_ct, [[e * factor for e in row] for row in eps_grad], self.fs)
        cache["g_ints"] = g_ints
        cache["agrads_2f"] = agrads_2f
        cache["eps_grad"] = eps_grad
        cache["enc_rows"] = None  # the encrypted activations are no longer needed
        if self.recorder:
            self.recorder.record(env.step, env.batch_id, "passive", "eps_grad", eps_grad)
            self.recorder.record(env.step, env.batch_id, "passive", "g_int", g_ints)
        return Envelope(TAG_ENC_WGRAD, env.batch_id, env.step, tensor_bytes(write_cipher_matrix, grad_ct))

    def score_eval(self, env: Envelope) -> Envelope:
        """Eval phase: score predictions against labels, acknowledge."""
        cache, _, p_rows = self.unblind_and_predict(env)
        for row_id, p in zip(cache["row_ids"], p_rows):
            t = self.labels[row_id]
            self._eval_stats["loss_sum"] += cross_entropy(p, t)
            self._eval_stats["correct"] += int(np.argmax(p) == np.argmax(t))
            self._eval_stats["count"] += 1
        del self._caches[env.batch_id]
        return control_envelope(env.step, CTRL_EVAL_ACK, batch=env.batch_id, count=len(p_rows))

    # -- message 0x05 -> 0x06 -----------------------------------------------------

    def update_and_grad(self, env: Envelope) -> Envelope:
        """Apply the blinded update, emit corrected activation gradients.

        The received gradient equals truth + own_noise - delta (all at scale
        2f).  Removing own_noise and rescaling leaves truth_f - delta, which
        updates the noisy head; the ledger absorbs exactly rate * delta on
        the other side.  The cached activation gradient is corrected with
        the encrypted pre-accumulation ledger: Enc(agrad~) - [acc]^T g
        decrypts to the gradient a clean head would have produced.
        """
        self._expect(env, TAG_BLINDED_WGRAD)
        cache = self._cache_for(env.batch_id)
        if "eps_grad" not in cache:
            raise ProtocolError(f"batch {env.batch_id} has no pending gradient (out-of-order message?)")
        f = self.config.frac_bits
        factor = 1 << f
        src = BytesIO(env.body)
        blinded, scale = read_grid_tensor(src)
        if scale != 2 * f:
            raise ProtocolError(f"blinded gradient at scale {scale}, expected {2 * f}")
        ledger_ct = read_cipher_tensor(src, self.pk)
        if not isinstance(ledger_ct, CipherMatrix) or ledger_ct.scale != f:
            raise ProtocolError("ledger ciphertext missing or at the wrong scale")

        grad_f = [
            [rescale(bv - ev * factor, f) for bv, ev in zip(brow, erow, strict=True)]
            for brow, erow in zip(blinded, cache["eps_grad"], strict=True)
        ]
        with self.stats.phase("head_update"):
            new_w = fx_sub_mat(self.w_noisy, fx_rate_step_mat(self.rate_int, grad_f, f))
        self.w_noisy = new_w

        out_rows: list[list[int]] = []
        for g_int, agrad_2f in zip(cache["g_ints"], cache["agrads_2f"]):
            neg_g = [-v for v in g_int]
            with self.stats.phase("correction"):
                corr = transpose_matvec_grid(self.pk, ledger_ct, neg_g, self.fs)
            with self.stats.phase("regrad_encrypt"):
                enc_agrad = encrypt_grid_vector(
                    self.pk, agrad_2f, self.fs, scale=2 * f, rng=self.crypto_rng
                )
                corrected = ct_add_cipher(enc_agrad, corr)
            out_rows.append(corrected.values)
        del self._caches[env.batch_id]
        self._step_snapshot = None
        self.last_step = max(self.last_step, env.step)
        if len(out_rows) == 1:
            body = tensor_bytes(write_cipher_vector, CipherVector(self.pk, 2 * f, out_rows[0]))
        else:
            body = tensor_bytes(write_cipher_matrix, CipherMatrix(self.pk, 2 * f, out_rows))
        return Envelope(TAG_ENC_ACT_GRAD, env.batch_id, env.step, body)

    # -- bookkeeping ----------------------------------------------------------

    def restore_step(self) -> None:
        """Roll back to the state captured when the current step began."""
        if self._step_snapshot is not None:
            w, rng_state = self._step_snapshot
            self.w_noisy = [row[:] for row in w]
            self.noise_rng.setstate(rng_state)
            self._step_snapshot = None
        self._caches.clear()

    def _require_session(self) -> None:
        if self.pk is None or self.fs is None:
            raise ProtocolError("no handshake yet: data message before hello")

    def _check_step(self, env: Envelope) -> None:
        if env.step < self.last_step:
            raise ProtocolError(f"step counter regressed: {env.step} after {self.last_step}")

    def _expect(self, env: Envelope, tag: int) -> None:
        if env.tag != tag:
            raise ProtocolError(f"expected tag 0x{tag:02x}, got 0x{env.tag:02x}")

    def _cache_for(self, batch_id: int) -> dict:
        if batch_id not in self._caches:
            raise ProtocolError(f"no cached state for batch {batch_id} (out-of-order message?)")
        return self._caches[batch_id]


# ---------------------------------------------------------------------------
# Dispatch and session driving
# ---------------------------------------------------------------------------


def passive_dispatch(passive: PassiveParty, frame: Frame) -> list[Frame]:
    """Route one inbound frame to the passive party; returns reply frames."""
    env = Envelope.from_frame(frame)
    try:
        if env.tag == TAG_CONTROL:
            replies = passive.handle_control(env)
        elif env.tag == TAG_ENC_ACTIVATION:
            passive._require_session()
            replies = [passive.weighted_sum(env)]
        elif env.tag == TAG_DENOISED_WSUM:
            passive._require_session()
            replies = [passive.score_eval(env) if passive.eval_mode else passive.backward_init(env)]
        elif env.tag == TAG_BLINDED_WGRAD:
            passive._require_session()
            replies = [passive.update_and_grad(env)]
        else:
            raise ProtocolError(f"tag 0x{env.tag:02x} is not addressed to the passive party")
    except Exception:
        passive.restore_step()
        raise
    return [r.to_frame() for r in replies]


def serve_pending(passive: PassiveParty, channel) -> None:
    """Drain and answer everything queued on an in-process channel."""
    while True:
        frame = channel.try_recv()
        if frame is None:
            return
        for reply in passive_dispatch(passive, frame):
            channel.send(reply)


def serve_forever(passive: PassiveParty, channel) -> None:
    """Blocking dispatch loop for a role deployment (one session, then done).

    A protocol failure rolls the passive party back to its pre-step state,
    reports the error to the peer, and ends the session: continuing after a
    divergence could silently corrupt the shared trajectory.
    """
    while True:
        frame = channel.recv()
        if frame is None:
            return
        if frame.tag == TAG_CONTROL:
            env = Envelope.from_frame(frame)
            if parse_control(env).get("kind") == CTRL_SHUTDOWN:
                return
        try:
            replies = passive_dispatch(passive, frame)
        except Exception as exc:
            try:
                channel.send(control_envelope(0, CTRL_ERROR, message=str(exc)).to_frame())
            except TransportError:
                pass  # peer already gone; the raise below still surfaces it locally
            raise
        for reply in replies:
            channel.send(reply)


class Session:
    """Active-side driver: sequences one batch's messages over a channel."""

    def __init__(
        self,
        channel,
        active: ActiveParty,
        pump: Callable[[], None] | None = None,
    ):
        self.channel = channel
        self.active = active
        self.pump = pump
        self.next_batch_id = 0
        self._shut_down = False

    # -- plumbing -------------------------------------------------------------

    def _exchange(self, env: Envelope, expect_tag: int) -> Envelope:
        self.channel.send(env.to_frame())
        if self.pump is not None:
            self.pump()
        frame = self.channel.recv()
        if frame is None:
            raise ProtocolError("peer closed the connection mid-step")
        reply = Envelope.from_frame(frame)
        if reply.tag == TAG_CONTROL:
            msg = parse_control(reply)
            if msg.get("kind") == CTRL_ERROR:
                raise ProtocolError(f"peer reported: {msg.get('message')}")
            if expect_tag == TAG_CONTROL:
                return reply
            raise ProtocolError(f"expected tag 0x{expect_tag:02x}, got control {msg.get('kind')!r}")
        if reply.tag != expect_tag:
            raise ProtocolError(f"expected tag 0x{expect_tag:02x}, got 0x{reply.tag:02x}")
        return reply

    def _control_roundtrip(self, kind_out: str, expect_kind: str, **fields) -> dict:
        reply = self._exchange(
            control_envelope(self.active.step, kind_out, **fields), TAG_CONTROL
        )
        msg = parse_control(reply)
        if msg.get("kind") != expect_kind:
            raise ProtocolError(f"expected control {expect_kind!r}, got {msg.get('kind')!r}")
        return msg

    # -- session lifecycle ------------------------------------------------------

    def handshake(self) -> None:
        pk = self.active.keys.public
        self._control_roundtrip(
            CTRL_HELLO,
            CTRL_HELLO_ACK,
            n=pk.n,
            g=pk.g,
            config=self.active.config.shared_fields(),
        )

    def train_batch(self, xs: Sequence[np.ndarray], row_ids: Sequence[int]) -> None:
        """One optimizer step; rolls the active party back on any failure."""
        batch_id = self.next_batch_id
        self.next_batch_id += 1
        snap = self.active.snapshot()
        try:
            env1 = self.active.forward(xs, row_ids, batch_id)
            env2 = self._exchange(env1, TAG_NOISY_WSUM)
            env3 = self.active.denoise_sum(env2)
            env4 = self._exchange(env3, TAG_ENC_WGRAD)
            env5 = self.active.grad_rewrap(env4)
            env6 = self._exchange(env5, TAG_ENC_ACT_GRAD)
            self.active.apply_input_grad(env6)
        except Exception:
            self.active.restore(snap)
            raise

    def begin_train_phase(self) -> None:
        self._control_roundtrip(CTRL_PHASE, CTRL_OK, phase="train")

    def epoch_metrics(self, epoch: int) -> dict:
        return self._control_roundtrip(CTRL_PHASE, CTRL_METRICS, phase="epoch_end", epoch=epoch)

    def begin_eval_phase(self) -> None:
        self._control_roundtrip(CTRL_PHASE, CTRL_OK, phase="eval")

    def eval_batch(self, xs: Sequence[np.ndarray], row_ids: Sequence[int]) -> None:
        batch_id = self.next_batch_id
        self.next_batch_id += 1
        try:
            env1 = self.active.forward(xs, row_ids, batch_id)
            env2 = self._exchange(env1, TAG_NOISY_WSUM)
            env3 = self.active.denoise_sum(env2)
            reply = self._exchange(env3, TAG_CONTROL)
            msg = parse_control(reply)
            if msg.get("kind") != CTRL_EVAL_ACK:
                raise ProtocolError(f"expected eval acknowledgement, got {msg.get('kind')!r}")
        finally:
            self.active.drop_cache(batch_id)

    def end_eval_phase(self) -> dict:
        return self._control_roundtrip(CTRL_PHASE, CTRL_EVAL_RESULT, phase="eval_end")

    def shutdown(self) -> None:
        if not self._shut_down:
            self.channel.send(control_envelope(self.active.step, CTRL_SHUTDOWN).to_frame())
            if self.pump is not None:
                self.pump()
            self._shut_down = True
