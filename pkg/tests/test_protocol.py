import json
import random

import numpy as np
import pytest

from splitphe.datasets import synthetic_blobs
from splitphe.errors import ConfigError, ProtocolError
from splitphe.protocol import (
    CTRL_ERROR,
    CTRL_HELLO,
    Envelope,
    NoiseConfig,
    PassiveParty,
    SessionConfig,
    control_envelope,
    parse_control,
    passive_dispatch,
    serve_pending,
)
from splitphe.training import (
    build_parties,
    run_local_protocol,
    train_centralized,
)
from splitphe.transport import TAG_CONTROL, TAG_ENC_ACTIVATION, Frame, in_process_pair


def small_config(**kw) -> SessionConfig:
    base = dict(d_hidden=5, n_classes=3, arithmetic="fixed", batch_size=1)
    base.update(kw)
    return SessionConfig(**base)


def clean_head(active, passive):
    return [
        [w - e for w, e in zip(wrow, erow)]
        for wrow, erow in zip(passive.w_noisy, active.eps_acc)
    ]


# -- configuration ---------------------------------------------------------------


def test_config_validation_collects_everything():
    cfg = SessionConfig(d_hidden=0, n_classes=1, frac_bits=4, learning_rate=-1, batch_size=0)
    with pytest.raises(ConfigError) as err:
        cfg.validate()
    text = str(err.value)
    for needle in ("d_hidden", "n_classes", "frac_bits", "learning_rate", "batch_size"):
        assert needle in text


def test_config_mismatch_lists_all_fields():
    a = small_config()
    b = small_config(batch_size=4, learning_rate=0.25)
    problems = a.mismatches(b.shared_fields())
    assert len(problems) == 2
    joined = " ".join(problems)
    assert "batch_size" in joined and "rate_int" in joined


def test_envelope_roundtrip():
    env = Envelope(TAG_ENC_ACTIVATION, batch_id=7, step=3, body=b"payload")
    back = Envelope.from_frame(env.to_frame())
    assert back == env


def test_control_roundtrip():
    env = control_envelope(4, "phase", phase="train")
    msg = parse_control(Envelope.from_frame(env.to_frame()))
    assert msg == {"kind": "phase", "phase": "train"}
    with pytest.raises(ProtocolError):
        parse_control(Envelope(TAG_CONTROL, 0, 0, b"\xff not json"))
    with pytest.raises(ProtocolError):
        parse_control(Envelope(TAG_CONTROL, 0, 0, json.dumps({"no": "kind"}).encode()))


# -- exactness against the centralized trainer -------------------------------------


@pytest.mark.parametrize("batch_size", [1, 3])
def test_protocol_matches_centralized_fixed(keys512, batch_size):
    ds = synthetic_blobs(9, 6, 3, seed=21)
    config = small_config(batch_size=batch_size)
    active, passive, report = run_local_protocol(
        ds, [5], config, seed=77, epochs=2, keys=keys512
    )
    model, ref = train_centralized(
        ds, [5], seed=77, epochs=2, batch_size=batch_size, mode="fixed"
    )
    assert clean_head(active, passive) == model.head
    assert active.extractor.weights == model.extractor.weights
    assert [e["loss_mean"] for e in report.epochs] == [e["loss_mean"] for e in ref.epochs]


def test_float_extractor_protocol_matches_centralized_head(keys512):
    # float extractor arithmetic: the head/ledger algebra stays exact
    ds = synthetic_blobs(8, 6, 3, seed=22)
    config = small_config(arithmetic="float", batch_size=2)
    active, passive, _ = run_local_protocol(ds, [5], config, seed=11, epochs=1, keys=keys512)
    assert all(isinstance(v, int) for row in clean_head(active, passive) for v in row)


def test_noise_off_and_on_agree_after_cleanup(keys512):
    ds = synthetic_blobs(6, 4, 3, seed=30)
    noisy_cfg = small_config()
    plain_cfg = small_config(noise=NoiseConfig(sum_bound=0, grad_bound=0))
    a1, p1, _ = run_local_protocol(ds, [5], noisy_cfg, seed=5, epochs=1, keys=keys512)
    a2, p2, _ = run_local_protocol(ds, [5], plain_cfg, seed=5, epochs=1, keys=keys512)
    assert clean_head(a1, p1) == clean_head(a2, p2)
    assert a1.extractor.weights == a2.extractor.weights
    # with noise off the ledger never moves
    assert all(v == 0 for row in a2.eps_acc for v in row)
    assert any(v != 0 for row in a1.eps_acc for v in row)


def test_zero_learning_rate_leaves_weights_fixed(keys512):
    ds = synthetic_blobs(4, 4, 3, seed=31)
    config = small_config(learning_rate=0.0)
    active, passive, _ = run_local_protocol(ds, [5], config, seed=6, epochs=1, keys=keys512)
    fresh_active, fresh_passive = build_parties(ds, [5], config, 6, keys=keys512)
    assert active.extractor.weights == fresh_active.extractor.weights
    assert passive.w_noisy == fresh_passive.w_noisy
    assert all(v == 0 for row in active.eps_acc for v in row)


def test_eval_matches_centralized_fixed_model(keys512):
    ds = synthetic_blobs(10, 5, 3, seed=33)
    test = synthetic_blobs(6, 5, 3, seed=34)
    config = small_config()
    active, passive, report = run_local_protocol(
        ds, [5], config, seed=8, epochs=1, keys=keys512, test_ds=test
    )
    model, _ = train_centralized(ds, [5], seed=8, epochs=1, mode="fixed")
    ref = model.evaluate(test)
    assert report.eval["accuracy"] == ref["accuracy"]
    assert report.eval["loss_mean"] == pytest.approx(ref["loss_mean"], rel=1e-12)


def test_determinism_across_runs(keys512):
    ds = synthetic_blobs(6, 4, 3, seed=40)
    config = small_config()
    a1, p1, r1 = run_local_protocol(ds, [5], config, seed=9, epochs=2, keys=keys512)
    a2, p2, r2 = run_local_protocol(ds, [5], config, seed=9, epochs=2, keys=keys512)
    assert p1.w_noisy == p2.w_noisy
    assert a1.eps_acc == a2.eps_acc
    assert r1.metric_lines() == r2.metric_lines()


# -- adversarial message handling ----------------------------------------------------


def fresh_pair(keys512, **cfg):
    ds = synthetic_blobs(4, 4, 3, seed=50)
    config = small_config(**cfg)
    active, passive = build_parties(ds, [5], config, 13, keys=keys512)
    return ds, active, passive


def hello_frame(active) -> Frame:
    pk = active.keys.public
    return control_envelope(
        0, CTRL_HELLO, n=pk.n, g=pk.g, config=active.config.shared_fields()
    ).to_frame()


def test_data_before_handshake_rejected(keys512):
    ds, active, passive = fresh_pair(keys512)
    env1 = active.forward([ds.features[0]], [0], batch_id=0)
    with pytest.raises(ProtocolError, match="before hello"):
        passive_dispatch(passive, env1.to_frame())


def test_handshake_replay_rejected(keys512):
    ds, active, passive = fresh_pair(keys512)
    frame = hello_frame(active)
    replies = passive_dispatch(passive, frame)
    assert parse_control(Envelope.from_frame(replies[0]))["kind"] == "hello_ack"
    with pytest.raises(ProtocolError, match="replay"):
        passive_dispatch(passive, frame)


def test_config_mismatch_refused(keys512):
    ds, active, passive = fresh_pair(keys512)
    pk = active.keys.public
    wrong = dict(active.config.shared_fields())
    wrong["batch_size"] = 99
    wrong["frac_bits"] = 16
    frame = control_envelope(0, CTRL_HELLO, n=pk.n, g=pk.g, config=wrong).to_frame()
    with pytest.raises(ProtocolError) as err:
        passive_dispatch(passive, frame)
    assert "batch_size" in str(err.value) and "frac_bits" in str(err.value)


def test_out_of_order_message_rejected(keys512):
    ds, active, passive = fresh_pair(keys512)
    passive_dispatch(passive, hello_frame(active))
    env1 = active.forward([ds.features[0]], [0], batch_id=0)
    [reply2] = passive_dispatch(passive, env1.to_frame())
    env3 = active.denoise_sum(Envelope.from_frame(reply2))
    [reply4] = passive_dispatch(passive, env3.to_frame())
    env5 = active.grad_rewrap(Envelope.from_frame(reply4))
    # replay message 3 for a batch whose gradient state was already consumed...
    bogus = Envelope(env3.tag, 999, env3.step, env3.body)
    with pytest.raises(ProtocolError, match="batch 999"):
        passive_dispatch(passive, bogus.to_frame())
    # ...the failure rolled the passive party back and dropped the batch cache
    with pytest.raises(ProtocolError, match="no cached state"):
        passive_dispatch(passive, env5.to_frame())


def test_unexpected_tag_for_passive_rejected(keys512):
    ds, active, passive = fresh_pair(keys512)
    passive_dispatch(passive, hello_frame(active))
    bogus = Envelope(0x02, 0, 0, b"")
    with pytest.raises(ProtocolError, match="not addressed"):
        passive_dispatch(passive, bogus.to_frame())


def test_step_regression_rejected(keys512):
    ds, active, passive = fresh_pair(keys512)
    passive_dispatch(passive, hello_frame(active))
    passive.last_step = 10
    env1 = active.forward([ds.features[0]], [0], batch_id=0)
    assert env1.step == 0
    with pytest.raises(ProtocolError, match="regressed"):
        passive_dispatch(passive, env1.to_frame())


def test_wire_error_rolls_passive_back(keys512):
    ds, active, passive = fresh_pair(keys512)
    passive_dispatch(passive, hello_frame(active))
    env1 = active.forward([ds.features[0]], [0], batch_id=0)
    [reply2] = passive_dispatch(passive, env1.to_frame())
    head_before = [row[:] for row in passive.w_noisy]
    env3 = active.denoise_sum(Envelope.from_frame(reply2))
    [reply4] = passive_dispatch(passive, env3.to_frame())
    env5 = active.grad_rewrap(Envelope.from_frame(reply4))
    corrupted = Envelope(env5.tag, env5.batch_id, env5.step, env5.body[: len(env5.body) - 10])
    with pytest.raises(Exception):
        passive_dispatch(passive, corrupted.to_frame())
    assert passive.w_noisy == head_before
    assert not passive._caches


def test_ledger_breach_aborts_and_rolls_back(keys512):
    ds = synthetic_blobs(6, 4, 3, seed=51)
    # ledger cap below one typical update: the very first accumulation trips it
    config = small_config(noise=NoiseConfig(ledger_bound=2.0**-30))
    with pytest.raises(ProtocolError, match="accumulated head noise"):
        run_local_protocol(ds, [5], config, seed=3, epochs=1, keys=keys512)


def test_active_rolls_back_on_failure(keys512):
    ds = synthetic_blobs(6, 4, 3, seed=52)
    config = small_config(noise=NoiseConfig(ledger_bound=2.0**-30))
    active, passive = build_parties(ds, [5], config, 3, keys=keys512)
    weights_before = [
        [row[:] for row in w] if isinstance(w, list) else np.asarray(w).copy()
        for w in active.extractor.weights
    ]
    from splitphe.protocol import Session

    chan_a, chan_p = in_process_pair()
    session = Session(chan_a, active, pump=lambda: serve_pending(passive, chan_p))
    session.handshake()
    session.begin_train_phase()
    with pytest.raises(ProtocolError):
        session.train_batch([ds.features[0]], [0])
    assert active.step == 0
    assert all(v == 0 for row in active.eps_acc for v in row)
    assert active.extractor.weights == weights_before
    assert not active._caches


def test_error_control_frame_surfaces_as_protocol_error(keys512):
    ds, active, passive = fresh_pair(keys512)
    from splitphe.protocol import Session

    chan_a, chan_p = in_process_pair()

    def evil_pump():
        # discard whatever the passive party would say, reply with an error
        while chan_p.try_recv() is not None:
            pass
        chan_p.send(control_envelope(0, CTRL_ERROR, message="synthetic failure").to_frame())

    session = Session(chan_a, active, pump=evil_pump)
    with pytest.raises(ProtocolError, match="synthetic failure"):
        session.handshake()


def test_labels_shape_validated(keys512):
    config = small_config()
    with pytest.raises(ConfigError, match="one-hot"):
        PassiveParty(
            config,
            labels=np.zeros((4, 7)),
            head_seed=1,
            noise_rng=random.Random(0),
        )


def test_row_id_outside_label_table_rejected(keys512):
    ds, active, passive = fresh_pair(keys512)
    passive_dispatch(passive, hello_frame(active))
    env1 = active.forward([ds.features[0]], [999], batch_id=0)
    with pytest.raises(ProtocolError, match="label table"):
        passive_dispatch(passive, env1.to_frame())


def test_phase_stats_structure(keys512):
    ds = synthetic_blobs(4, 4, 3, seed=53)
    config = small_config()
    active, passive, _ = run_local_protocol(ds, [5], config, seed=2, epochs=1, keys=keys512)
    stats = passive.stats.as_dict()
    assert set(stats) == {"times", "ops"}
    assert stats["ops"]["matvec"]["mul_plain"] > 0
    assert stats["times"]["matvec"] > 0
