import json
import stat

import numpy as np
import pytest

from splitphe.cli import main
from splitphe.datasets import synthetic_blobs


@pytest.fixture()
def blob_csv(tmp_path):
    ds = synthetic_blobs(18, 3, 3, seed=11, spread=0.3)
    path = tmp_path / "blobs.csv"
    classes = np.argmax(ds.labels, axis=1)
    with open(path, "w") as out:
        for row, label in zip(ds.features, classes):
            out.write(",".join(f"{v:.4f}" for v in row) + f",{label}\n")
    return path


@pytest.fixture()
def key_dir(tmp_path):
    out = tmp_path / "keys"
    assert main(["keygen", "--bits", "512", "--out", str(out), "--seed", "7"]) == 0
    return out


def test_keygen_files_and_permissions(key_dir):
    public = key_dir / "public.key"
    private = key_dir / "private.key"
    assert public.exists() and private.exists()
    assert stat.S_IMODE(private.stat().st_mode) == 0o600


def test_local_train_eval_audit_loop(tmp_path, blob_csv, key_dir, capsys):
    prefix = tmp_path / "model"
    transcript = tmp_path / "transcript.bin"
    records = tmp_path / "records"
    report = tmp_path / "report.jsonl"
    rc = main(
        [
            "train",
            "--data", str(blob_csv),
            "--hidden", "4",
            "--epochs", "2",
            "--batch-size", "3",
            "--seed", "5",
            "--test-fraction", "0.25",
            "--key", str(key_dir),
            "--checkpoint-out", str(prefix),
            "--transcript", str(transcript),
            "--record-dir", str(records),
            "--report", str(report),
        ]
    )
    assert rc == 0
    for suffix in (".extractor", ".ledger", ".head"):
        assert (tmp_path / f"model{suffix}").exists()
    lines = [json.loads(line) for line in report.read_text().splitlines()]
    assert lines[0]["kind"] == "config"
    capsys.readouterr()

    rc = main(
        [
            "eval",
            "--data", str(blob_csv),
            "--extractor", f"{prefix}.extractor",
            "--head", f"{prefix}.head",
            "--ledger", f"{prefix}.ledger",
            "--standardize-with", str(blob_csv),
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "accuracy" in out
    assert "noisy head" not in out

    rc = main(
        [
            "audit",
            "--transcript", str(transcript),
            "--active-records", str(records / "active_records.jsonl"),
            "--passive-records", str(records / "passive_records.jsonl"),
            "--key", str(key_dir),
        ]
    )
    assert rc == 0
    assert "overall: pass" in capsys.readouterr().out


def test_audit_flags_unblinded_run(tmp_path, blob_csv, key_dir, capsys):
    transcript = tmp_path / "transcript.bin"
    records = tmp_path / "records"
    rc = main(
        [
            "train",
            "--data", str(blob_csv),
            "--hidden", "4",
            "--seed", "5",
            "--key", str(key_dir),
            "--sum-bound", "0",
            "--grad-bound", "0",
            "--transcript", str(transcript),
            "--record-dir", str(records),
        ]
    )
    assert rc == 0
    capsys.readouterr()
    rc = main(
        [
            "audit",
            "--transcript", str(transcript),
            "--active-records", str(records / "active_records.jsonl"),
            "--passive-records", str(records / "passive_records.jsonl"),
            "--key", str(key_dir),
        ]
    )
    assert rc == 4
    assert "FAIL" in capsys.readouterr().out


def test_bench_writes_json(tmp_path, key_dir, capsys):
    out = tmp_path / "sweep.json"
    rc = main(
        [
            "bench",
            "--key", str(key_dir),
            "--dims", "3,6",
            "--hidden", "4",
            "--classes", "3",
            "--steps", "2",
            "--out", str(out),
        ]
    )
    assert rc == 0
    data = json.loads(out.read_text())
    assert [p["d_in"] for p in data["points"]] == [3, 6]
    assert "spread" in capsys.readouterr().out


def test_usage_error_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["keygen"])  # --out is required
    assert exc.value.code == 1
    capsys.readouterr()


def test_config_error_exits_2(blob_csv, capsys):
    rc = main(["train", "--data", str(blob_csv), "--frac-bits", "4"])
    assert rc == 2
    assert "frac_bits" in capsys.readouterr().err


def test_missing_data_exits_5(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "nope.csv")])
    assert rc == 5
    capsys.readouterr()


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "splitphe" in capsys.readouterr().out
