import copy
import csv

import numpy as np
import pytest
import torch

from fundus2video.data import sample_training_frames
from fundus2video.errors import CheckpointError, ConfigurationError
from fundus2video.mask import compute_mask
from fundus2video.trainer import (
    TrainConfig,
    fit,
    init_train_state,
    load_train_state,
    save_train_state,
    scheduled_input_select,
    scheduled_lr,
    sequence_mask,
    train_step,
)


def _seq(sample, seed=0):
    return sample_training_frames(sample, np.random.default_rng(seed), 2)


def _params(module):
    return [p.detach().clone() for p in module.parameters()]


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


# ---------------------------------------------------------------- config


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"epochz": 3})
    for bad in ({"batch_size": 2}, {"frames_per_sequence": 7}, {"image_size": 30}, {"lr": 0},
                {"teacher_forcing_prob": 1.5}):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)
    assert TrainConfig.from_dict({"weights": {"lambda_att": 1.0}}).weights.lambda_att == 1.0


def test_lr_schedule():
    cfg = TrainConfig()
    assert scheduled_lr(cfg, 0) == 2e-3
    assert scheduled_lr(cfg, 49) == 2e-3
    assert scheduled_lr(cfg, 50) == pytest.approx(2e-3 * 0.9)
    assert scheduled_lr(cfg, 120) == pytest.approx(2e-3 * 0.81)
    per_epoch = TrainConfig(lr_step_unit="epoch", lr_step_iters=2)
    assert scheduled_lr(per_epoch, 999, epoch=3) == pytest.approx(2e-3 * 0.9)


def test_scheduled_input_select_extremes_and_rate():
    rng = np.random.default_rng(0)
    assert all(scheduled_input_select("gt", "gen", 0.0, rng) == "gt" for _ in range(100))
    assert all(scheduled_input_select("gt", "gen", 1.0, rng) == "gen" for _ in range(100))
    picks = sum(scheduled_input_select(0, 1, 0.5, rng) for _ in range(10_000))
    # binomial(10000, 0.5) has sd 50
    assert abs(picks - 5000) < 200


# ---------------------------------------------------------------- steps


def test_train_step_is_deterministic(tiny_config, small_pairs):
    seq = _seq(small_pairs[0])
    a, b = init_train_state(tiny_config), init_train_state(tiny_config)
    for _ in range(2):
        la, lb = train_step(seq, a, tiny_config), train_step(seq, b, tiny_config)
        assert la == lb
    assert _same(_params(a.generator), _params(b.generator))


def test_init_does_not_touch_global_rng(tiny_config):
    torch.manual_seed(5)
    expected = torch.rand(3)
    torch.manual_seed(5)
    init_train_state(tiny_config)
    assert torch.equal(torch.rand(3), expected)


def test_discriminator_update_leaves_generator_alone(tiny_config, small_pairs):
    state = init_train_state(tiny_config)
    g0, p0, d0 = _params(state.generator), _params(state.projector), _params(state.discriminator)
    train_step(_seq(small_pairs[0]), state, tiny_config, update_generator=False)
    assert _same(g0, _params(state.generator)) and _same(p0, _params(state.projector))
    assert not _same(d0, _params(state.discriminator))


def test_generator_update_leaves_discriminator_alone(tiny_config, small_pairs):
    state = init_train_state(tiny_config)
    g0, d0 = _params(state.generator), _params(state.discriminator)
    train_step(_seq(small_pairs[0]), state, tiny_config, update_discriminator=False)
    assert _same(d0, _params(state.discriminator))
    assert not _same(g0, _params(state.generator))


def test_frozen_generator_teacher_forced_losses_repeat(small_pairs):
    cfg = TrainConfig(image_size=32, frames_per_sequence=6, ngf=4, n_blocks=1, ndf=4, n_patches=16, proj_dim=8,
                      augment=False, teacher_forcing_prob=0.0)
    state = init_train_state(cfg)
    seq = _seq(small_pairs[2])
    rng_state = copy.deepcopy(state.rng.bit_generator.state)
    first = train_step(seq, state, cfg, update_generator=False)
    state.rng.bit_generator.state = rng_state
    second = train_step(seq, state, cfg, update_generator=False)
    assert (first.up, first.sp, first.att) == (second.up, second.sp, second.att)
    assert first.gan_g != second.gan_g  # the discriminator did move


def test_step_uses_the_frame_difference_mask(tiny_config, small_pairs):
    seq = _seq(small_pairs[0])
    expected = compute_mask(seq.frames[0], seq.frames[-1], 45)
    np.testing.assert_array_equal(sequence_mask(seq, tiny_config).values, expected.values)


def test_ablation_zeroes_attention(small_pairs, tiny_config):
    cfg = TrainConfig(**{**tiny_config.to_dict(), "use_knowledge_mask": False})
    b = train_step(_seq(small_pairs[0]), init_train_state(cfg), cfg)
    assert b.att == 0.0 and b.up > 0


def test_pixel_mask_mode_runs(small_pairs, tiny_config):
    cfg = TrainConfig(**{**tiny_config.to_dict(), "nce_mask_mode": "pixel"})
    assert train_step(_seq(small_pairs[0]), init_train_state(cfg), cfg).is_finite()


def test_lr_decays_inside_loop(tiny_config, small_pairs):
    cfg = TrainConfig(**{**tiny_config.to_dict(), "lr_step_iters": 2})
    state = init_train_state(cfg)
    seq = _seq(small_pairs[0])
    for _ in range(4):
        train_step(seq, state, cfg)
    assert state.current_lr == pytest.approx(2e-3 * 0.81)
    assert state.opt_g.param_groups[0]["lr"] == state.current_lr == state.opt_d.param_groups[0]["lr"]


def test_lr_after_fifty_iterations(tiny_config, small_pairs):
    cfg = TrainConfig(**{**tiny_config.to_dict(), "image_size": 16, "frames_per_sequence": 3, "n_patches": 4})
    small = [sample_training_frames(p, np.random.default_rng(0), 1) for p in small_pairs[:1]]
    from fundus2video.data import TrainingSequence

    seq = TrainingSequence(small[0].cf_image[::2, ::2], [f[::2, ::2] for f in small[0].frames], small[0].source_indices)
    state = init_train_state(cfg)
    for _ in range(50):
        train_step(seq, state, cfg)
    assert state.opt_g.param_groups[0]["lr"] == pytest.approx(2e-3 * 0.9)


# ---------------------------------------------------------------- checkpoints and fit


def test_checkpoint_roundtrip(tmp_path, tiny_config, small_pairs):
    state = init_train_state(tiny_config)
    train_step(_seq(small_pairs[0]), state, tiny_config)
    path = save_train_state(tmp_path / "s.ckpt", state, tiny_config)
    back = load_train_state(path, tiny_config)
    assert back.step == 1
    assert _same(_params(state.generator), _params(back.generator))
    seq = _seq(small_pairs[1])
    assert train_step(seq, state, tiny_config) == train_step(seq, back, tiny_config)


def test_checkpoint_architecture_mismatch(tmp_path, tiny_config):
    path = save_train_state(tmp_path / "s.ckpt", init_train_state(tiny_config), tiny_config)
    with pytest.raises(CheckpointError):
        load_train_state(path, TrainConfig(**{**tiny_config.to_dict(), "ngf": 8}))


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_fit_counts_steps_and_checkpoints(tmp_path, tiny_config, small_pairs):
    cfg = TrainConfig(**{**tiny_config.to_dict(), "epochs": 2})
    final = fit(small_pairs[:2], cfg, tmp_path)
    rows = _rows(tmp_path / "losses.csv")
    assert rows[0] == ["step", "up", "sp", "att", "gan_g", "gan_d", "total"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]
    assert (tmp_path / "checkpoint_epoch_001.ckpt").exists() and (tmp_path / "checkpoint_epoch_002.ckpt").exists()
    assert final.name == "final.ckpt"


def test_fit_is_byte_reproducible(tmp_path, tiny_config, small_pairs):
    cfg = TrainConfig(**{**tiny_config.to_dict(), "augment": True, "max_steps": 2})
    fit(small_pairs[:2], cfg, tmp_path / "a")
    fit(small_pairs[:2], cfg, tmp_path / "b")
    for name in ("losses.csv", "final.ckpt", "checkpoint_epoch_001.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path, tiny_config, small_pairs):
    cfg2 = TrainConfig(**{**tiny_config.to_dict(), "epochs": 2})
    fit(small_pairs[:2], cfg2, tmp_path / "full")
    cfg1 = TrainConfig(**{**tiny_config.to_dict(), "epochs": 1})
    first = fit(small_pairs[:2], cfg1, tmp_path / "part")
    fit(small_pairs[:2], cfg2, tmp_path / "part", resume=first)
    assert _rows(tmp_path / "part" / "losses.csv") == _rows(tmp_path / "full" / "losses.csv")
    assert (tmp_path / "part" / "final.ckpt").read_bytes() == (tmp_path / "full" / "final.ckpt").read_bytes()


def test_fit_rejects_empty_split(tmp_path, tiny_config):
    with pytest.raises(ConfigurationError):
        fit([], tiny_config, tmp_path)
