"""Post-hoc leakage audit over a recorded session transcript.

Given the raw frames both parties exchanged, the noise records each party
kept for itself, and the active party's private key, the audit verifies
that the blinding actually did its job on the wire:

  1. every plaintext weighted sum differs from its unblinded value,
  2. every plaintext head gradient differs from the true gradient,
  3. repeated activations encrypt to distinct ciphertexts, and
  4. no private key material appears in any frame.

Checks 1 and 2 reconstruct the clean values from the parties' own records,
so the audit sees exactly what a party colluding with a wire tap could
compare.  Running it on a noise-free transcript fails checks 1 and 2 by
design; that is the audit catching a misconfigured session.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from io import BytesIO

from .ciphertensor import (
    CipherVector,
    decrypt_grid_vector,
    read_cipher_tensor,
    read_grid_tensor,
)
from .errors import ProtocolError
from .fixedpoint import FixedScale, GridMat
from .paillier import PrivateKey
from .protocol import AuditRecorder, Envelope
from .transport import (
    TAG_BLINDED_WGRAD,
    TAG_DENOISED_WSUM,
    TAG_ENC_ACTIVATION,
    read_transcript,
)


@dataclass
class AuditCheck:
    name: str
    passed: bool
    detail: str


@dataclass
class AuditReport:
    transcript_path: str
    checks: list[AuditCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary(self) -> str:
        lines = [f"leakage audit: {self.transcript_path}"]
        for c in self.checks:
            lines.append(f"  [{'pass' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _as_rows(tensor) -> list[list[int]]:
    if tensor and isinstance(tensor[0], int):
        return [tensor]
    return list(tensor)


def _records_by_batch(recorder: AuditRecorder, name: str) -> dict[int, list]:
    out: dict[int, list] = {}
    for entry in recorder.find(name):
        out[entry["batch"]] = entry["data"]
    return out


def leakage_audit(
    transcript_path,
    active_records: AuditRecorder,
    passive_records: AuditRecorder,
    private_key: PrivateKey,
) -> AuditReport:
    report = AuditReport(str(transcript_path))
    pk = private_key.public
    frames = read_transcript(transcript_path)
    envelopes = [(role, Envelope.from_frame(frame), frame) for role, frame in frames]

    # Scale is read off the first encrypted activation tensor.
    frac_bits = None
    for _, env, _ in envelopes:
        if env.tag == TAG_ENC_ACTIVATION:
            src = BytesIO(env.body)
            count = int.from_bytes(src.read(4), "big")
            src.read(8 * count)
            tensor = read_cipher_tensor(src, pk)
            frac_bits = tensor.scale
            break
    if frac_bits is None:
        raise ProtocolError(f"{transcript_path}: no encrypted activations in transcript")
    fs = FixedScale(frac_bits, pk.n)
    factor = 1 << frac_bits

    clean_sums = _records_by_batch(passive_records, "sum_clean")
    eps_sums = _records_by_batch(passive_records, "eps_sum")
    eps_grads = _records_by_batch(passive_records, "eps_grad")
    noisy_grads = _records_by_batch(active_records, "wgrad_decrypted")
    activations = _records_by_batch(active_records, "activation_int")

    # -- check 1: weighted sums on the wire are blinded -----------------------
    checked = blinded = mismatched = 0
    for _, env, _ in envelopes:
        if env.tag != TAG_DENOISED_WSUM:
            continue
        payload = _as_rows(read_grid_tensor(BytesIO(env.body))[0])
        clean = clean_sums.get(env.batch_id)
        eps = eps_sums.get(env.batch_id)
        if clean is None or eps is None:
            continue
        checked += 1
        recon = [[c + e for c, e in zip(crow, erow)] for crow, erow in zip(clean, eps)]
        if recon != payload:
            mismatched += 1
        if payload != clean:
            blinded += 1
    report.checks.append(
        AuditCheck(
            "sum-blinding",
            checked > 0 and blinded == checked and mismatched == 0,
            f"{blinded}/{checked} weighted-sum frames differ from their clean values"
            + (f"; {mismatched} records inconsistent with the wire" if mismatched else ""),
        )
    )

    # -- check 2: head gradients on the wire are blinded -----------------------
    checked = blinded = 0
    for _, env, _ in envelopes:
        if env.tag != TAG_BLINDED_WGRAD:
            continue
        src = BytesIO(env.body)
        wire, _scale = read_grid_tensor(src)
        wire_rows = _as_rows(wire)
        noisy = noisy_grads.get(env.batch_id)
        eps = eps_grads.get(env.batch_id)
        if noisy is None or eps is None:
            continue
        checked += 1
        true_grad: GridMat = [
            [nv - ev * factor for nv, ev in zip(nrow, erow)] for nrow, erow in zip(noisy, eps)
        ]
        if wire_rows != true_grad:
            blinded += 1
    report.checks.append(
        AuditCheck(
            "gradient-blinding",
            checked > 0 and blinded == checked,
            f"{blinded}/{checked} gradient frames differ from the true head gradient",
        )
    )

    # -- check 3: equal activations encrypt to distinct frames -----------------
    by_plaintext: dict[tuple, list[bytes]] = {}
    recorded_mismatch = 0
    for _, env, frame in envelopes:
        if env.tag != TAG_ENC_ACTIVATION:
            continue
        src = BytesIO(env.body)
        count = int.from_bytes(src.read(4), "big")
        src.read(8 * count)
        tensor = read_cipher_tensor(src, pk)
        raw_rows = [tensor.values] if isinstance(tensor, CipherVector) else tensor.rows
        plain_rows = [
            decrypt_grid_vector(private_key, CipherVector(pk, tensor.scale, list(row)), fs)
            for row in raw_rows
        ]
        recorded = activations.get(env.batch_id)
        if recorded is not None and [list(r) for r in plain_rows] != [list(r) for r in recorded]:
            recorded_mismatch += 1
        key = tuple(tuple(row) for row in plain_rows)
        by_plaintext.setdefault(key, []).append(frame.payload)
    duplicate_groups = {k: v for k, v in by_plaintext.items() if len(v) > 1}
    if not duplicate_groups:
        report.checks.append(
            AuditCheck(
                "ciphertext-randomization",
                False,
                "no repeated activation plaintexts in transcript; "
                "record a session that evaluates the same inputs twice",
            )
        )
    else:
        repeats = sum(len(v) for v in duplicate_groups.values())
        distinct = all(
            len(set(payloads)) == len(payloads) for payloads in duplicate_groups.values()
        )
        report.checks.append(
            AuditCheck(
                "ciphertext-randomization",
                distinct and recorded_mismatch == 0,
                f"{repeats} frames over {len(duplicate_groups)} repeated plaintexts, "
                + ("all ciphertexts distinct" if distinct else "identical ciphertexts found")
                + (f"; {recorded_mismatch} frames disagree with records" if recorded_mismatch else ""),
            )
        )

    # -- check 4: no private key bytes in any frame ----------------------------
    needles = []
    for name, value in (("lam", private_key.lam), ("mu", private_key.mu)):
        needles.append((name, value.to_bytes((value.bit_length() + 7) // 8, "big")))
    hits = []
    for role, env, frame in envelopes:
        for name, needle in needles:
            if needle and needle in frame.payload:
                hits.append(f"{name} bytes in tag 0x{env.tag:02x} frame (role {role})")
    report.checks.append(
        AuditCheck(
            "key-secrecy",
            not hits,
            "no private key material found in any frame" if not hits else "; ".join(hits),
        )
    )
    return report
