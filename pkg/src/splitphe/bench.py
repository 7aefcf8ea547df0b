"""Input-dimension sweep: protocol step cost vs an encrypted-input baseline.

The design claim under test: because only hidden activations are ever
encrypted, the per-step cost of the protocol is set by the hidden width
and class count, not by the raw input dimension.  The baseline is the
straightforward alternative, a one-layer classifier over *encrypted raw
features*, whose homomorphic work grows linearly with the input width.

Both sides use the same key, the same fixed-point scale, and median-of-N
timing with a warmup step discarded.
"""

from __future__ import annotations

import json
import random
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .ciphertensor import (
    add_grid_vector,
    decrypt_grid_matrix,
    decrypt_grid_vector,
    encrypt_grid_vector,
    matvec_grid,
    outer_grid,
)
from .datasets import synthetic_blobs
from .fixedpoint import (
    FixedScale,
    fx_rate_step_mat,
    fx_sub_mat,
    quantize,
    quantize_vec,
    rescale_mat,
    rescale_vec,
)
from .nn import grad_logits, init_dense, softmax
from .paillier import KeyPair
from .protocol import NoiseConfig, SessionConfig
from .training import derive_seed, run_local_protocol

DEFAULT_INPUT_DIMS = (32, 320, 3072)


@dataclass
class SweepPoint:
    d_in: int
    protocol_step_seconds: float
    baseline_step_seconds: float


@dataclass
class SweepReport:
    d_hidden: int
    n_classes: int
    key_bits: int
    steps_timed: int
    points: list[SweepPoint] = field(default_factory=list)

    @property
    def protocol_spread(self) -> float:
        """(max - min) / min over protocol step times; flat is the goal."""
        times = [p.protocol_step_seconds for p in self.points]
        return (max(times) - min(times)) / min(times)

    @property
    def baseline_growth(self) -> float:
        times = [p.baseline_step_seconds for p in self.points]
        return max(times) / min(times)

    def as_table(self) -> str:
        lines = [
            f"dimension sweep (d_hidden={self.d_hidden}, classes={self.n_classes}, "
            f"{self.key_bits}-bit key, median of {self.steps_timed} steps)",
            f"{'d_in':>8}  {'protocol s/step':>16}  {'encrypted-input s/step':>23}",
        ]
        for p in self.points:
            lines.append(
                f"{p.d_in:>8}  {p.protocol_step_seconds:>16.4f}  {p.baseline_step_seconds:>23.4f}"
            )
        lines.append(
            f"protocol spread: {self.protocol_spread * 100:.1f}%   "
            f"baseline growth: {self.baseline_growth:.1f}x"
        )
        return "\n".join(lines)

    def save_json(self, path) -> None:
        with open(path, "w") as out:
            json.dump(
                {
                    "d_hidden": self.d_hidden,
                    "n_classes": self.n_classes,
                    "key_bits": self.key_bits,
                    "steps_timed": self.steps_timed,
                    "points": [
                        {
                            "d_in": p.d_in,
                            "protocol_step_seconds": p.protocol_step_seconds,
                            "baseline_step_seconds": p.baseline_step_seconds,
                        }
                        for p in self.points
                    ],
                    "protocol_spread": self.protocol_spread,
                    "baseline_growth": self.baseline_growth,
                },
                out,
                indent=2,
            )


def protocol_step_seconds(
    d_in: int,
    d_hidden: int,
    n_classes: int,
    keys: KeyPair,
    steps: int = 3,
    seed: int = 0,
    frac_bits: int = 32,
) -> float:
    """Median wall time of a full protocol training step at the given width."""
    ds = synthetic_blobs(steps + 1, d_in, n_classes, seed=derive_seed(seed, "bench", d_in))
    config = SessionConfig(
        d_hidden=d_hidden,
        n_classes=n_classes,
        frac_bits=frac_bits,
        noise=NoiseConfig(),
    )
    marks: list[float] = [time.perf_counter()]
    run_local_protocol(
        ds,
        [d_hidden],
        config,
        seed=seed,
        keys=keys,
        max_steps=steps + 1,
        on_step=lambda _step, _session: marks.append(time.perf_counter()),
    )
    durations = [b - a for a, b in zip(marks, marks[1:])]
    return statistics.median(durations[1:])  # first step pays warmup costs


def baseline_step_seconds(
    d_in: int,
    n_classes: int,
    keys: KeyPair,
    steps: int = 3,
    seed: int = 0,
    frac_bits: int = 32,
) -> float:
    """Median step time of a linear classifier over encrypted raw features.

    One party holds features, the other the weights; the features cross the
    wire encrypted, so every step pays d_in encryptions, a (classes x d_in)
    ciphertext matvec, and a (classes x d_in) encrypted gradient outer
    product.  This is the cost profile the split design avoids.
    """
    pk, sk = keys
    fs = FixedScale(frac_bits, pk.n)
    factor = 1 << frac_bits
    rng = np.random.default_rng(derive_seed(seed, "baseline", d_in))
    ds = synthetic_blobs(steps + 1, d_in, n_classes, seed=derive_seed(seed, "bench", d_in))
    w = [[quantize(v, frac_bits) for v in row] for row in init_dense(n_classes, d_in, rng)]
    rate_int = quantize(0.125, frac_bits)
    noise_limit = int(NoiseConfig().sum_bound * factor)
    noise_rng = random.Random(derive_seed(seed, "baseline-noise", d_in))
    durations: list[float] = []
    for step in range(steps + 1):
        x = ds.features[step]
        t = ds.labels[step]
        begin = time.perf_counter()
        x_int = quantize_vec(x, frac_bits)
        enc_x = encrypt_grid_vector(pk, x_int, fs)
        z_ct = matvec_grid(pk, w, enc_x, fs)
        eps = [noise_rng.randint(-noise_limit, noise_limit) for _ in range(n_classes)]
        z_ct = add_grid_vector(z_ct, [e * factor for e in eps], fs)
        z_2f = decrypt_grid_vector(sk, z_ct, fs)
        z_f = rescale_vec(z_2f, frac_bits)
        z_f = [v - e for v, e in zip(z_f, eps)]
        p = softmax(np.array(z_f, dtype=np.float64) / factor)
        g_int = quantize_vec(grad_logits(p, t), frac_bits)
        grad_ct = outer_grid(pk, g_int, enc_x, fs)
        grad_f = rescale_mat(decrypt_grid_matrix(sk, grad_ct, fs), frac_bits)
        w = fx_sub_mat(w, fx_rate_step_mat(rate_int, grad_f, frac_bits))
        durations.append(time.perf_counter() - begin)
    return statistics.median(durations[1:])


def dimension_sweep(
    keys: KeyPair,
    input_dims=DEFAULT_INPUT_DIMS,
    d_hidden: int = 84,
    n_classes: int = 10,
    steps: int = 3,
    seed: int = 0,
    log=None,
) -> SweepReport:
    report = SweepReport(
        d_hidden=d_hidden,
        n_classes=n_classes,
        key_bits=keys.public.bits,
        steps_timed=steps,
    )
    for d_in in input_dims:
        proto = protocol_step_seconds(d_in, d_hidden, n_classes, keys, steps=steps, seed=seed)
        base = baseline_step_seconds(d_in, n_classes, keys, steps=steps, seed=seed)
        report.points.append(SweepPoint(d_in, proto, base))
        if log is not None:
            log(f"d_in={d_in}: protocol {proto:.4f} s/step, encrypted-input {base:.4f} s/step")
    return report
