"""Command-line interface.

Subcommands: keygen, train, eval, bench, audit.  ``train --role`` selects
single-process mode (``local``) or one side of a TCP deployment
(``active`` holds features and the key, ``passive`` holds labels and
serves).  Exit codes: 0 success, 1 usage, 2 configuration, 3 crypto,
4 protocol/transport, 5 data or file I/O.
"""

from __future__ import annotations

import argparse
import random
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audit import leakage_audit
from .bench import DEFAULT_INPUT_DIMS, dimension_sweep
from .datasets import Dataset, load_csv, load_idx, standardize, train_test_split
from .errors import ConfigError, CryptoError, DataError, ProtocolError
from .fixedpoint import fx_sub_mat
from .nn import FIXED_MODE, FLOAT_MODE, FeatureExtractor, load_weights, save_weights
from .paillier import (
    KeyPair,
    keygen,
    load_private_key,
    load_public_key,
    save_private_key,
    save_public_key,
)
from .protocol import AuditRecorder, NoiseConfig, SessionConfig
from .training import (
    CentralizedModel,
    build_parties,
    connect_active_session,
    derive_seed,
    drive_training,
    run_local_protocol,
    run_passive_server,
)


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="splitphe", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"splitphe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("keygen", help="generate a key pair into a directory")
    p.add_argument("--bits", type=int, default=2048, help="modulus size (default 2048)")
    p.add_argument("--out", required=True, help="directory for public.key / private.key")
    p.add_argument("--seed", type=int, default=None, help="deterministic keygen (tests only)")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("train", help="train a split model")
    _add_data_args(p)
    p.add_argument("--role", choices=["local", "active", "passive"], default="local")
    p.add_argument("--hidden", default="16", help="comma list of extractor layer widths")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--learning-rate", type=float, default=0.125)
    p.add_argument("--frac-bits", type=int, default=32)
    p.add_argument("--arithmetic", choices=[FLOAT_MODE, FIXED_MODE], default=FLOAT_MODE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sum-bound", type=float, default=NoiseConfig.sum_bound)
    p.add_argument("--grad-bound", type=float, default=NoiseConfig.grad_bound)
    p.add_argument("--ledger-bound", type=float, default=NoiseConfig.ledger_bound)
    p.add_argument("--key", help="key directory from keygen (local/active; default: fresh keys)")
    p.add_argument("--key-bits", type=int, default=2048, help="size when generating fresh keys")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7714)
    p.add_argument("--checkpoint-out", help="path prefix for .extractor/.ledger/.head files")
    p.add_argument("--transcript", help="record every frame to this file")
    p.add_argument("--report", help="write a JSONL run report here")
    p.add_argument("--record-dir", help="save audit noise records here (local role only)")
    p.add_argument(
        "--eval-passes",
        type=int,
        default=None,
        help="repeat the final evaluation; defaults to 2 when --record-dir is set, else 1 "
        "(the audit's re-randomization check needs repeated plaintexts)",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved checkpoints on a dataset")
    _add_data_args(p)
    p.add_argument("--extractor", required=True, help=".extractor checkpoint")
    p.add_argument("--head", required=True, help=".head checkpoint (noisy)")
    p.add_argument("--ledger", help=".ledger checkpoint; subtracts the noise if given")
    p.add_argument("--standardize-with", help="CSV whose statistics standardize the features")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="input-dimension sweep vs encrypted-input baseline")
    p.add_argument("--key", help="key directory (needs private.key)")
    p.add_argument("--bits", type=int, default=2048, help="key size when generating")
    p.add_argument("--dims", default=",".join(str(d) for d in DEFAULT_INPUT_DIMS))
    p.add_argument("--hidden", type=int, default=84)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("audit", help="leakage audit over a recorded transcript")
    p.add_argument("--transcript", required=True)
    p.add_argument("--active-records", required=True)
    p.add_argument("--passive-records", required=True)
    p.add_argument("--key", required=True, help="key directory (needs private.key)")
    p.set_defaults(func=cmd_audit)
    return parser


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="CSV file with features and a label column")
    p.add_argument("--label-column", type=int, default=-1)
    p.add_argument("--idx-images", help="IDX image file (alternative to --data)")
    p.add_argument("--idx-labels", help="IDX label file")
    p.add_argument("--limit", type=int, default=None, help="cap the number of samples")
    p.add_argument("--test", help="held-out CSV (or IDX pair via --test-idx-*)")
    p.add_argument("--test-idx-images")
    p.add_argument("--test-idx-labels")
    p.add_argument("--test-fraction", type=float, default=None, help="split --data instead")
    p.add_argument(
        "--no-standardize",
        action="store_true",
        help="skip z-scoring features with training-set statistics",
    )


def _load_main_dataset(args) -> Dataset:
    if args.idx_images:
        if not args.idx_labels:
            raise ConfigError("--idx-images requires --idx-labels")
        return load_idx(args.idx_images, args.idx_labels, limit=args.limit)
    if not args.data:
        raise ConfigError("provide --data or --idx-images/--idx-labels")
    ds = load_csv(args.data, label_column=args.label_column)
    if args.limit is not None:
        ds = ds.subset(np.arange(min(args.limit, ds.n)))
    return ds


def _load_datasets(args, seed: int) -> tuple[Dataset, Dataset | None]:
    ds = _load_main_dataset(args)
    test = None
    if args.test_fraction is not None:
        ds, test = train_test_split(ds, args.test_fraction, seed=derive_seed(seed, "split"))
    elif args.test:
        test = load_csv(args.test, label_column=args.label_column)
    elif args.test_idx_images:
        if not args.test_idx_labels:
            raise ConfigError("--test-idx-images requires --test-idx-labels")
        test = load_idx(args.test_idx_images, args.test_idx_labels, limit=args.limit)
    if not args.no_standardize:
        if test is not None:
            ds, test = standardize(ds, test)
        else:
            (ds,) = standardize(ds)
    return ds, test


def _session_config(args, d_hidden: int, n_classes: int) -> SessionConfig:
    config = SessionConfig(
        d_hidden=d_hidden,
        n_classes=n_classes,
        frac_bits=args.frac_bits,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        noise=NoiseConfig(args.sum_bound, args.grad_bound, args.ledger_bound),
        arithmetic=args.arithmetic,
    )
    config.validate()
    return config


def _load_keys(key_dir: str) -> KeyPair:
    private = load_private_key(Path(key_dir) / "private.key")
    return KeyPair(private.public, private)


def _hidden_dims(text: str) -> list[int]:
    try:
        dims = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--hidden must be a comma list of widths, got {text!r}") from None
    if not dims or any(d < 1 for d in dims):
        raise ConfigError(f"--hidden widths must be positive, got {text!r}")
    return dims


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_keygen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed) if args.seed is not None else None
    keys = keygen(args.bits, rng)
    save_public_key(out / "public.key", keys.public)
    save_private_key(out / "private.key", keys.private)
    print(f"{args.bits}-bit key pair written to {out}/public.key and {out}/private.key")
    return 0


def cmd_train(args) -> int:
    hidden = _hidden_dims(args.hidden)
    train_ds, test_ds = _load_datasets(args, args.seed)
    config = _session_config(args, hidden[-1], train_ds.n_classes)
    if args.role == "passive":
        return _train_passive(args, config, train_ds, test_ds)
    keys = _load_keys(args.key) if args.key else None
    eval_passes = args.eval_passes if args.eval_passes else (2 if args.record_dir else 1)
    if args.role == "local":
        active, passive, report = run_local_protocol(
            train_ds,
            hidden,
            config,
            seed=args.seed,
            epochs=args.epochs,
            keys=keys,
            key_bits=args.key_bits,
            test_ds=test_ds,
            transcript_path=args.transcript,
            record=bool(args.record_dir),
            eval_passes=eval_passes,
            log=print,
        )
        if args.record_dir:
            rec_dir = Path(args.record_dir)
            rec_dir.mkdir(parents=True, exist_ok=True)
            active.recorder.save(rec_dir / "active_records.jsonl")
            passive.recorder.save(rec_dir / "passive_records.jsonl")
            print(f"audit records saved under {rec_dir}")
        if args.checkpoint_out:
            _save_active_checkpoint(args.checkpoint_out, active)
            save_weights(
                f"{args.checkpoint_out}.head", [passive.w_noisy], FIXED_MODE, config.frac_bits
            )
            print(f"checkpoints written with prefix {args.checkpoint_out}")
        if args.report:
            report.to_jsonl(args.report)
        print(f"trained {report.steps} steps in {report.wall_seconds:.1f}s")
        return 0
    return _train_active(args, config, hidden, train_ds, test_ds, keys, eval_passes)


def _train_active(args, config, hidden, train_ds, test_ds, keys, eval_passes: int = 1) -> int:
    if keys is None:
        keys = keygen(args.key_bits, random.Random(derive_seed(args.seed, "keygen")))
    active, _unused_passive = build_parties(
        train_ds, hidden, config, args.seed, keys=keys, test_ds=test_ds
    )
    session, channel = connect_active_session(
        args.host, args.port, active, transcript_path=args.transcript
    )
    try:
        report = drive_training(
            session,
            train_ds,
            seed=args.seed,
            epochs=args.epochs,
            batch_size=config.batch_size,
            test_ds=test_ds,
            eval_passes=eval_passes,
            log=print,
        )
        session.shutdown()
    finally:
        channel.close()
    if args.checkpoint_out:
        _save_active_checkpoint(args.checkpoint_out, active)
    if args.report:
        report.to_jsonl(args.report)
    print(f"trained {report.steps} steps in {report.wall_seconds:.1f}s")
    return 0


def _train_passive(args, config, train_ds, test_ds) -> int:
    labels = (
        train_ds.labels if test_ds is None else np.vstack([train_ds.labels, test_ds.labels])
    )
    passive = run_passive_server(
        args.host,
        args.port,
        config,
        labels,
        head_seed=derive_seed(args.seed, "head"),
        seed=args.seed,
        transcript_path=args.transcript,
        log=print,
    )
    if args.checkpoint_out:
        save_weights(
            f"{args.checkpoint_out}.head", [passive.w_noisy], FIXED_MODE, config.frac_bits
        )
        print(f"noisy head written to {args.checkpoint_out}.head")
    print("session served to completion")
    return 0


def _save_active_checkpoint(prefix: str, active) -> int:
    save_weights(
        f"{prefix}.extractor",
        active.extractor.weights,
        active.extractor.mode,
        active.config.frac_bits,
    )
    save_weights(f"{prefix}.ledger", [active.eps_acc], FIXED_MODE, active.config.frac_bits)
    return 0


def cmd_eval(args) -> int:
    ds = _load_main_dataset(args)
    if args.standardize_with:
        stats_ds = load_csv(args.standardize_with, label_column=args.label_column)
        _, ds = standardize(stats_ds, ds)
    ex_mats, ex_mode, frac_bits = load_weights(args.extractor)
    head_mats, head_mode, head_bits = load_weights(args.head)
    if head_mode != FIXED_MODE or head_bits != frac_bits:
        raise ConfigError(
            f"head checkpoint ({head_mode}, {head_bits} frac bits) does not match "
            f"extractor ({ex_mode}, {frac_bits})"
        )
    head = head_mats[0]
    if args.ledger:
        ledger_mats, _, ledger_bits = load_weights(args.ledger)
        if ledger_bits != frac_bits:
            raise ConfigError("ledger frac bits do not match the checkpoints")
        head = fx_sub_mat(head, ledger_mats[0])
    extractor = FeatureExtractor(ex_mats, ex_mode, frac_bits)
    if ex_mode == FLOAT_MODE:
        head_model = np.array(head, dtype=np.float64) / (1 << frac_bits)
        model = CentralizedModel(extractor, head_model, FLOAT_MODE, frac_bits)
    else:
        model = CentralizedModel(extractor, head, FIXED_MODE, frac_bits)
    result = model.evaluate(ds)
    suffix = "" if args.ledger else " (noisy head: pass --ledger for the clean model)"
    print(
        f"eval on {ds.name}: loss {result['loss_mean']:.4f} "
        f"accuracy {result['accuracy']:.4f} over {result['count']} samples{suffix}"
    )
    return 0


def cmd_bench(args) -> int:
    if args.key:
        keys = _load_keys(args.key)
    else:
        keys = keygen(args.bits, random.Random(derive_seed(args.seed, "bench-key")))
    dims = [int(d) for d in args.dims.split(",") if d.strip()]
    report = dimension_sweep(
        keys,
        input_dims=dims,
        d_hidden=args.hidden,
        n_classes=args.classes,
        steps=args.steps,
        seed=args.seed,
        log=print,
    )
    print(report.as_table())
    if args.out:
        report.save_json(args.out)
    return 0


def cmd_audit(args) -> int:
    private = load_private_key(Path(args.key) / "private.key")
    report = leakage_audit(
        args.transcript,
        AuditRecorder.load(args.active_records),
        AuditRecorder.load(args.passive_records),
        private,
    )
    print(report.summary())
    return 0 if report.passed else 4


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"splitphe: configuration error: {exc}", file=sys.stderr)
        return 2
    except CryptoError as exc:
        print(f"splitphe: crypto error: {exc}", file=sys.stderr)
        return 3
    except ProtocolError as exc:
        print(f"splitphe: protocol error: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"splitphe: data error: {exc}", file=sys.stderr)
        return 5
    except OSError as exc:
        print(f"splitphe: i/o error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
