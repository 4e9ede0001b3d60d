import os
import struct
from importlib import resources

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from redecode import checkpoint as ckpt
from redecode.corpus import PAD, build_vocab, load_pairs_tsv, make_pair, pair_sentences, prepare_pairs
from redecode.model import ModelConfig, build_model, forward_train
from redecode.tensor import ContractError, Rng, Tensor
from redecode.trainer import (
    AdamState,
    TrainConfig,
    TrainingError,
    adam_step,
    clip_gradients,
    global_grad_norm,
    kl_anneal_weight,
    load_checkpoint,
    save_checkpoint,
    train,
)


def test_adam_default_lr():
    assert TrainConfig().learning_rate == 5e-4


def test_adam_zero_grad_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    p["w"].grad = np.zeros(2)
    adam_step(p, AdamState(), 0.1)
    assert p["w"].data.tolist() == [1.0, -2.0]


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-3])
def test_adam_first_step_magnitude(g):
    lr = 5e-4
    p = {"w": Tensor(np.array([0.5]), requires_grad=True)}
    p["w"].grad = np.array([g])
    adam_step(p, AdamState(), lr)
    # bias-corrected m / sqrt(v) is g / |g| on step one
    expected = 0.5 - lr * g / (abs(g) + 1e-8)
    assert abs(p["w"].data[0] - expected) < 1e-6
    assert abs(abs(p["w"].data[0] - 0.5) - lr) < 1e-6


def test_adam_missing_grad():
    p = {"w": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(ContractError, match="'w'"):
        adam_step(p, AdamState(), 0.1)
    with pytest.raises(ContractError):
        adam_step(p, AdamState(), 0.1, grads={})


def test_clipping_bounds_norm(rng):
    for _ in range(20):
        grads = {"a": rng.normal(0, 10, (3, 4)), "b": rng.normal(0, 10, 5)}
        before = clip_gradients(grads, 5.0)
        after = global_grad_norm(list(grads.values()))
        assert after <= 5.0 + 1e-9
        if before <= 5.0:
            assert after == pytest.approx(before)
    small = {"a": np.array([0.1, 0.2])}
    clip_gradients(small, 0.0)
    assert small["a"].tolist() == [0.1, 0.2]


def test_kl_anneal_values():
    assert kl_anneal_weight(0, 5000) == 0.0
    assert kl_anneal_weight(2500, 5000) == 0.5
    assert kl_anneal_weight(5000, 5000) == 1.0
    assert kl_anneal_weight(9000, 5000) == 1.0
    assert kl_anneal_weight(0, 0) == 1.0
    assert kl_anneal_weight(0, 100, "sigmoid") == pytest.approx(0.0, abs=1e-12)
    assert kl_anneal_weight(50, 100, "sigmoid") == pytest.approx(0.5)


@given(st.integers(0, 20_000), st.integers(0, 20_000), st.integers(0, 8000), st.sampled_from(["linear", "sigmoid"]))
def test_kl_anneal_monotone_bounded(a, b, n, schedule):
    lo, hi = sorted((a, b))
    wa, wb = kl_anneal_weight(lo, n, schedule), kl_anneal_weight(hi, n, schedule)
    assert 0.0 <= wa <= wb <= 1.0


def test_train_config_validation():
    from redecode.model import ConfigError

    for bad in ({"learning_rate": 0}, {"batch_size": 0}, {"kl_schedule": "cubic"}, {"gradient_clip_norm": -1}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    cfg = TrainConfig(learning_rate=1e-3, max_steps=7, kl_schedule="sigmoid")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def toy_setup(variant="vae-iterdec2", n_pairs=8, seed=0):
    raw = load_pairs_tsv(resources.files("redecode") / "data" / "toy_pairs.tsv")[:n_pairs]
    tokens, _ = prepare_pairs(raw)
    vocab = build_vocab(pair_sentences(tokens))
    pairs = [make_pair(a, b, vocab) for a, b in tokens]
    cfg = ModelConfig.for_variant(variant, vocab_size=len(vocab), embedding_dim=6, hidden_units=8, latent_dim=5)
    emb = Rng([seed, 1]).normal((len(vocab), 6)) * 0.3
    emb[PAD] = 0.0
    return build_model(cfg, emb, Rng([seed, 2])), pairs, vocab


def test_train_steps_and_empty():
    model, pairs, _ = toy_setup()
    res = train(model, pairs, TrainConfig(batch_size=3, epochs=2, learning_rate=1e-2))
    assert [r.step for r in res.records] == list(range(6))
    assert res.optimizer.step == 6
    with pytest.raises(ContractError):
        train(model, [], TrainConfig())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_reports_non_finite_loss():
    model, pairs, _ = toy_setup()
    model.f_logvar.bias.data[...] = 1e6
    with pytest.raises(TrainingError, match="step 0.*batch 0"):
        train(model, pairs, TrainConfig(batch_size=4, max_steps=2, kl_anneal_steps=0))


def test_train_log_lines(tmp_path):
    model, pairs, _ = toy_setup("vae-itervar")
    log = tmp_path / "train.log"
    res = train(model, pairs, TrainConfig(batch_size=4, max_steps=3), log_path=log)
    lines = log.read_text().splitlines()
    assert len(lines) == 3
    cols = lines[2].split("\t")
    assert cols[0] == "2" and len(cols) == 1 + 2 + 3
    assert float(cols[-1]) == res.records[2].total


def test_checkpoint_every(tmp_path):
    model, pairs, vocab = toy_setup()
    train(model, pairs, TrainConfig(batch_size=4, max_steps=4, checkpoint_every=2), checkpoint_dir=tmp_path, vocab=vocab)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["step_00000002.rdec", "step_00000004.rdec"]
    loaded = load_checkpoint(tmp_path / "step_00000004.rdec")
    assert loaded.step == 4 and loaded.optimizer.step == 4 and loaded.vocab == vocab


def test_checkpoint_round_trip_forward(tmp_path):
    model, pairs, vocab = toy_setup("vae-itervar")
    res = train(model, pairs, TrainConfig(batch_size=4, max_steps=2))
    path = tmp_path / "m.rdec"
    save_checkpoint(path, model, res.optimizer, 2, TrainConfig(batch_size=4), vocab, {"note": "x\ty"})
    back = load_checkpoint(path)
    src = np.stack([p.original for p in pairs[:3]])
    tgt = np.stack([p.paraphrase for p in pairs[:3]])
    eps = np.zeros((3, 5))
    a = forward_train(model, (src, tgt), None, 0.4, epsilon=eps).loss.item()
    b = forward_train(back.model, (src, tgt), None, 0.4, epsilon=eps).loss.item()
    assert a == b
    assert back.extra == {"note": "x\ty"}
    assert back.train_config == TrainConfig(batch_size=4)
    for name in res.optimizer.m:
        np.testing.assert_array_equal(back.optimizer.m[name], res.optimizer.m[name])
    # re-encoding is byte-stable
    assert ckpt.encode_checkpoint(ckpt.read_raw(path)) == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    model, _, _ = toy_setup()
    path = tmp_path / "m.rdec"
    save_checkpoint(path, model, None, 0)
    data = path.read_bytes()

    bad = tmp_path / "bad.rdec"
    bad.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ckpt.NotACheckpointError, match="not a checkpoint"):
        load_checkpoint(bad)

    bad.write_bytes(data[:4] + struct.pack("<H", 9) + data[6:])
    with pytest.raises(ckpt.CheckpointVersionError):
        load_checkpoint(bad)

    bad.write_bytes(data[: len(data) // 2])
    with pytest.raises(ckpt.TruncatedCheckpointError):
        load_checkpoint(bad)

    three = ModelConfig(**{**model.config.__dict__, "num_decoders": 3})
    with pytest.raises(ckpt.ShapeMismatchError):
        load_checkpoint(path, expected=three)
    wider = ModelConfig(**{**model.config.__dict__, "hidden_units": 9})
    with pytest.raises(ckpt.ShapeMismatchError):
        load_checkpoint(path, expected=wider)

    errors = {ckpt.NotACheckpointError, ckpt.CheckpointVersionError, ckpt.TruncatedCheckpointError, ckpt.ShapeMismatchError}
    assert len(errors) == 4 and all(issubclass(e, ckpt.CheckpointError) for e in errors)


def test_atomic_write_leaves_no_temp(tmp_path):
    ckpt.atomic_write_text(tmp_path / "a" / "f.txt", "hello")
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["f.txt"]


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("REDECODE_SLOW"), reason="set REDECODE_SLOW=1 for the 10^4-step run")
def test_adam_accumulators_finite_long_run():
    model, pairs, _ = toy_setup(n_pairs=32)
    res = train(model, pairs, TrainConfig(batch_size=32, max_steps=10_000, learning_rate=5e-3))
    assert res.optimizer.step == 10_000
    for name in res.optimizer.m:
        assert np.isfinite(res.optimizer.m[name]).all() and np.isfinite(res.optimizer.v[name]).all()
    assert all(np.isfinite(p.data).all() for p in model.parameters().values())
