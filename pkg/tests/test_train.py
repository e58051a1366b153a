import dataclasses
import io
import struct

import numpy as np
import pytest

from trajconv import ndmath as nm
from trajconv.models import ModelSpec, build_model, init_params
from trajconv.social import SocialConfig
from trajconv.train import (FORMAT_VERSION, MAGIC, CheckpointVersionError, CorruptCheckpointError, NumericError,
                            TrainConfig, batch_loss, checkpoint_bytes, load_checkpoint, prepare_batch,
                            save_checkpoint, train_run, write_loss_log)


def small(walker_arrays, family="lstm", epochs=2, **kw):
    spec = ModelSpec(family, kernel_size=3 if family == "conv1d" else 5, **kw.pop("spec", {}))
    return TrainConfig.from_preset("eth_ucy", epochs=epochs, batch_size=16, model=spec, **kw)


def test_presets():
    e = TrainConfig.from_preset("eth_ucy")
    t = TrainConfig.from_preset("trajnet")
    assert (e.epochs, e.base_lr, e.gamma, e.step_size) == (60, 0.005, 0.5, 17)
    assert (t.epochs, t.base_lr, t.gamma, t.step_size) == (250, 0.005, 0.75, 35)
    assert nm.lr_schedule(17, e.base_lr, e.gamma, e.step_size) == 0.0025
    with pytest.raises(ValueError):
        TrainConfig.from_preset("sdd")


def test_zero_epochs_returns_initialization(walker_arrays):
    cfg = small(walker_arrays, "conv2d", epochs=0)
    ckpt, log = train_run(cfg, walker_arrays)
    assert log == [] and ckpt.params.equals(init_params(cfg.model, cfg.seed))


def test_loss_log_lr_sequence(walker_arrays, tmp_path):
    cfg = small(walker_arrays, epochs=4, step_size=2, gamma=0.5)
    _, log = train_run(cfg, walker_arrays)
    assert [r["lr"] for r in log] == [nm.lr_schedule(e, 0.005, 0.5, 2) for e in range(4)]
    assert all(np.isfinite(r["train_loss"]) for r in log)
    write_loss_log(log, tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "epoch,lr,train_loss"


@pytest.mark.parametrize("family,batch", [("lstm", 16), ("conv1d", 16), ("conv2d", 6)])
def test_single_batch_overfit(walker_arrays, family, batch):
    cfg = small(walker_arrays, family, base_lr=0.001)
    params, _ = build_model(cfg.model, 0)
    state = nm.AdamState()
    obs, target, social = prepare_batch(walker_arrays, np.arange(batch), cfg)
    losses = []
    for _ in range(200):
        params.zero_grad()
        loss = batch_loss(cfg.model, params, obs, target, social, cfg.norm_mode)
        losses.append(float(loss.data))
        nm.backward(loss, list(params.params.values()))
        nm.adam_step(params.arrays(), params.grads(), state, 0.001)
    assert losses[-1] < 0.1 * losses[0]


def test_runs_are_bit_identical(walker_arrays):
    cfg = small(walker_arrays, "conv1d", augment=("rotate", "mirror", "noise"))
    a, log_a = train_run(cfg, walker_arrays)
    b, log_b = train_run(cfg, walker_arrays)
    assert checkpoint_bytes(a) == checkpoint_bytes(b) and log_a == log_b


@pytest.mark.parametrize("family", ["lstm", "conv2d"])
def test_resume_matches_uninterrupted(walker_arrays, family):
    cfg = small(walker_arrays, family, epochs=3, augment=("rotate", "noise"),
                spec={"social": SocialConfig("square_grid")})
    full, log_full = train_run(cfg, walker_arrays)
    first = dataclasses.replace(cfg, epochs=1)
    part, _ = train_run(first, walker_arrays)
    part = load_checkpoint(checkpoint_bytes(part))
    resumed, log_rest = train_run(cfg, walker_arrays, resume=part)
    assert checkpoint_bytes(resumed) == checkpoint_bytes(full)
    assert log_rest == log_full[1:]


def test_conv2d_drops_trailing_singleton_batch(walker_arrays):
    sub = walker_arrays.subset(np.arange(17))
    cfg = small(sub, "conv2d", epochs=1)
    _, log = train_run(cfg, sub)
    assert np.isfinite(log[0]["train_loss"])


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_non_finite_loss_is_reported(walker_arrays):
    bad = walker_arrays.subset(np.arange(len(walker_arrays)))
    bad.obs[3, 0, 0] = np.inf
    cfg = small(bad, "lstm", epochs=1, norm_mode="abs")
    with pytest.raises(NumericError, match="epoch 0, batch"):
        train_run(cfg, bad)


def test_rejects_empty_and_unlabeled(walker_arrays):
    cfg = small(walker_arrays)
    with pytest.raises(ValueError):
        train_run(cfg, walker_arrays.subset(np.arange(0)))
    unl = walker_arrays.subset(np.arange(4))
    unl.future[:] = np.nan
    with pytest.raises(ValueError, match="labeled"):
        train_run(cfg, unl)


# checkpoint format --------------------------------------------------------------------

@pytest.fixture
def trained(walker_arrays):
    return train_run(small(walker_arrays, "conv2d", epochs=1), walker_arrays)[0]


def test_round_trip_bytes(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    buf = io.BytesIO()
    save_checkpoint(back, buf)
    assert buf.getvalue() == (tmp_path / "a.ckpt").read_bytes()
    assert back.params.equals(trained.params) and back.adam.t == trained.adam.t
    assert back.config == trained.config and back.epoch == 1
    assert back.fingerprint == trained.fingerprint


def test_layout_header(trained):
    data = checkpoint_bytes(trained)
    assert data.startswith(MAGIC)
    assert struct.unpack_from("<I", data, len(MAGIC))[0] == FORMAT_VERSION


def test_flipped_payload_byte_detected(trained):
    data = bytearray(checkpoint_bytes(trained))
    data[len(data) // 2] ^= 0x01
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(bytes(data))


def test_truncation_reports_offset(trained):
    data = checkpoint_bytes(trained)
    with pytest.raises(CorruptCheckpointError, match="offset"):
        load_checkpoint(data[:len(data) - 100])
    with pytest.raises(CorruptCheckpointError, match="offset"):
        load_checkpoint(data[:10])


def test_newer_version_is_explicit(trained):
    data = bytearray(checkpoint_bytes(trained))
    struct.pack_into("<I", data, len(MAGIC), FORMAT_VERSION + 1)
    with pytest.raises(CheckpointVersionError, match="newer"):
        load_checkpoint(bytes(data))


def test_bad_magic(trained):
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(b"NOTACKPT" + checkpoint_bytes(trained)[8:])


def test_config_dict_round_trip():
    cfg = TrainConfig.from_preset("trajnet", augment=("noise", "rotate"),
                                  model=ModelSpec("conv1d", kernel_size=3, social=SocialConfig("angular_grid")))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.augment == ("noise", "rotate")
