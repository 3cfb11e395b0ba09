import dataclasses

import numpy as np
import pytest

from lstn import dataio, tnsr
from lstn.dataio import SynthConfig
from lstn.errors import CheckpointError, ConfigError, UsageError
from lstn.tensor import Tensor
from lstn.trainer import (TrainConfig, load_checkpoint, new_model, prepare, save_checkpoint, total_loss,
                          train, train_epoch)

SMALL = dict(channels=(4, 4, 1), batch_size=2, pretrain_epochs=1, finetune_epochs=1)


@pytest.fixture(scope="module")
def videos():
    return dataio.synth_dataset(2, SynthConfig(frames=4, height=16, width=24), seed=3, head_range=(3, 6))


def snapshot(model):
    return {k: p.data.copy() for k, p in model.params.items()}


def test_total_loss():
    assert total_loss(Tensor(2.0), Tensor(10.0), 0.1).item() == pytest.approx(3.0)
    assert total_loss(Tensor(2.0), Tensor(10.0), 0.0).item() == 2.0
    with pytest.raises(ConfigError):
        total_loss(Tensor(2.0), Tensor(1.0), -1.0)


@pytest.mark.parametrize("kwargs", [{"lam": -1}, {"beta": 0}, {"batch_size": 0}, {"similarity": "x"},
                                    {"freeze_layers": 9}, {"downsample": 3}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs).validate()


def test_prepare_builds_density_targets(videos):
    clips = prepare(videos, TrainConfig())
    assert clips[0].frames.shape == (4, 1, 16, 24)
    assert clips[0].gts.shape == (4, 8, 12)
    np.testing.assert_allclose(clips[0].gts.sum(axis=(1, 2)), videos[0].annotation.counts(), atol=1e-5)


def test_pretrain_updates_regressor_only(videos):
    cfg = TrainConfig(**SMALL)
    model = new_model(cfg)
    before = snapshot(model)
    stats = train_epoch(model, videos, cfg, "pretrain", 1)
    assert stats.lst == 0.0 and stats.reg > 0
    for k in model.loc_keys():
        np.testing.assert_array_equal(model.params[k].data, before[k])
    assert any(not np.array_equal(model.params[k].data, before[k]) for k in model.reg_keys())


def test_finetune_respects_frozen_layers(videos):
    cfg = TrainConfig(**SMALL, freeze_layers=2)
    model = new_model(cfg)
    before = snapshot(model)
    stats = train_epoch(model, videos, cfg, "finetune", 1)
    assert stats.lst > 0
    assert stats.total == pytest.approx(stats.reg + cfg.lam * stats.lst, rel=1e-6)
    for k in model.layer_keys(0) + model.layer_keys(1):
        np.testing.assert_array_equal(model.params[k].data, before[k])
    assert not np.array_equal(model.params["reg.2.weight"].data, before["reg.2.weight"])
    assert not np.array_equal(model.params["loc.head.bias"].data, before["loc.head.bias"])


def test_zero_lambda_leaves_localizer_untouched(videos):
    cfg = TrainConfig(**SMALL, lam=0.0)
    model = new_model(cfg)
    before = snapshot(model)
    stats = train_epoch(model, videos, cfg, "finetune", 1)
    assert stats.total == stats.reg
    for k in model.loc_keys():
        np.testing.assert_array_equal(model.params[k].data, before[k])


def test_bad_phase_and_empty_dataset(videos):
    model = new_model(TrainConfig(**SMALL))
    with pytest.raises(UsageError):
        train_epoch(model, videos, TrainConfig(**SMALL), "warmup", 1)
    with pytest.raises(UsageError):
        train_epoch(model, [], TrainConfig(**SMALL), "pretrain", 1)


def test_training_is_deterministic(videos):
    cfg = TrainConfig(**SMALL)
    runs = []
    for _ in range(2):
        model = new_model(cfg)
        hist = train(model, videos, cfg)
        runs.append((snapshot(model), [h.line() for h in hist]))
    assert runs[0][1] == runs[1][1]
    for k in runs[0][0]:
        assert runs[0][0][k].tobytes() == runs[1][0][k].tobytes()


def test_epoch_line_format(videos):
    cfg = TrainConfig(**SMALL)
    hist = train(new_model(cfg), videos, cfg)
    assert [h.phase for h in hist] == ["pretrain", "finetune"]
    parts = hist[1].line().split()
    assert parts[0::2] == ["epoch", "reg", "lst", "total"]
    assert parts[1] == "2"


def test_checkpoint_round_trip(tmp_path, videos):
    cfg = TrainConfig(**SMALL, use_batch_norm=True)
    model = new_model(cfg)
    train(model, videos, cfg)
    save_checkpoint(model, cfg, tmp_path / "a")
    loaded, cfg2 = load_checkpoint(tmp_path / "a")
    assert cfg2 == cfg
    assert list(loaded.params) == list(model.params)
    for k, p in model.params.items():
        assert loaded.params[k].data.tobytes() == p.data.tobytes()
    for k, st in model.optim.items():
        assert loaded.optim[k].step == st.step
        np.testing.assert_array_equal(loaded.optim[k].v, st.v)
    save_checkpoint(loaded, cfg2, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_loaded_checkpoint_resumes_identically(tmp_path, videos):
    cfg = TrainConfig(**SMALL)
    model = new_model(cfg)
    train_epoch(model, videos, cfg, "pretrain", 1)
    save_checkpoint(model, cfg, tmp_path)
    resumed, _ = load_checkpoint(tmp_path)
    train_epoch(model, videos, cfg, "finetune", 2)
    train_epoch(resumed, videos, cfg, "finetune", 2)
    for k in model.params:
        assert model.params[k].data.tobytes() == resumed.params[k].data.tobytes()


def test_checkpoint_errors_name_identifier(tmp_path, videos):
    cfg = TrainConfig(**SMALL)
    model = new_model(cfg)
    save_checkpoint(model, cfg, tmp_path)
    tnsr.save(np.zeros((2, 2), dtype=np.float32), tmp_path / "reg.0.weight.tnsr")
    with pytest.raises(CheckpointError, match="reg.0.weight"):
        load_checkpoint(tmp_path)
    save_checkpoint(model, cfg, tmp_path)
    (tmp_path / "loc.0.bias.tnsr").unlink()
    with pytest.raises(CheckpointError, match="loc.0.bias"):
        load_checkpoint(tmp_path)
    save_checkpoint(model, cfg, tmp_path)
    manifest = (tmp_path / "manifest.txt").read_text().splitlines()
    (tmp_path / "manifest.txt").write_text("\n".join(manifest[1:]) + "\n")
    with pytest.raises(CheckpointError, match="reg.0.weight"):
        load_checkpoint(tmp_path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


def test_replace_keeps_config_valid():
    cfg = dataclasses.replace(TrainConfig(), similarity="ones")
    cfg.validate()
    assert cfg.blocks.rows == 1 and cfg.blocks.cols == 2


def test_total_loss_arithmetic():
    assert total_loss(Tensor(1.0, dtype=np.float64), Tensor(2.0, dtype=np.float64), 0.001).item() \
        == pytest.approx(1.002, abs=1e-12)


def test_zero_lambda_trajectory_ignores_beta_and_blocks(videos):
    runs = []
    for beta, cols in ((30.0, 2), (5.0, 3)):
        cfg = TrainConfig(**SMALL, lam=0.0, beta=beta, block_cols=cols)
        model = new_model(cfg)
        train(model, videos, cfg)
        runs.append(snapshot(model))
    for k in runs[0]:
        assert runs[0][k].tobytes() == runs[1][k].tobytes()


def test_loaded_forward_is_bit_exact(tmp_path, videos):
    from lstn.regressor import forward_batch
    cfg = TrainConfig(**SMALL)
    model = new_model(cfg)
    train(model, videos, cfg)
    save_checkpoint(model, cfg, tmp_path)
    loaded, _ = load_checkpoint(tmp_path)
    probe = videos[0].frames[0]
    assert forward_batch(model, probe).data.tobytes() == forward_batch(loaded, probe).data.tobytes()


def test_pretrain_descends_on_synthetic_task(videos):
    cfg = TrainConfig(**SMALL)
    model = new_model(cfg)
    clips = prepare(videos, cfg)
    losses = [train_epoch(model, clips, cfg, "pretrain", e).reg for e in range(1, 21)]
    assert losses[-1] < losses[0]


def test_finetune_needs_two_frames():
    one = dataio.synth_dataset(1, SynthConfig(frames=2, height=16, width=24), seed=0)
    one[0].frames = one[0].frames[:1]
    one[0].annotation.frames = one[0].annotation.frames[:1]
    cfg = TrainConfig(**SMALL)
    with pytest.raises(UsageError):
        train_epoch(new_model(cfg), one, cfg, "finetune", 1)


def test_batch_records_recompute_total(videos):
    cfg = TrainConfig(**SMALL)
    stats = train_epoch(new_model(cfg), videos, cfg, "finetune", 1)
    for r in stats.batches:
        assert r.total == pytest.approx(r.reg + r.lam * r.lst, rel=1e-6)
