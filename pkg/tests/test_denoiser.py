import copy

import numpy as np
import pytest
import torch

from modules.attention import (AttentionControl, AttentionMap, AttentionRecorder, apply_control,
                               apply_control_to_logits, export_attention_maps, load_attention_maps, reweight_attention)
from modules.denoiser import (Denoiser, DenoiserConfig, add_noise, make_schedule, predict_noise, predict_x0, sample,
                              sampling_timesteps, train_denoiser)
from modules.errors import ConfigError
from modules.scene import Camera, camera_embedding, orbit_cameras
from modules.text_embed import assemble_prompt


def test_schedule_constants():
    schedule = make_schedule(0.00085, 0.012, 1000)
    assert schedule.T == 1000
    assert schedule.beta[0] == 0.00085 and schedule.beta[-1] == 0.012
    assert np.all(np.diff(schedule.alpha_bar) < 0)
    oracle = 1.0
    for b in schedule.beta:
        oracle *= 1.0 - b
    assert abs(schedule.alpha_bar[-1] - oracle) < 1e-12
    assert schedule.alpha_bar_at(1) == 1.0 - 0.00085
    assert schedule.alpha_bar_at(1000) == pytest.approx(1.579e-3, rel=0.05)


def test_scaled_linear_endpoints():
    schedule = make_schedule(0.00085, 0.012, 1000, kind="scaled_linear")
    assert schedule.beta[0] == 0.00085 and schedule.beta[-1] == 0.012
    assert np.all(np.diff(schedule.beta) > 0)


def test_schedule_rejects_bad_input():
    schedule = make_schedule()
    for t in (0, 1001):
        with pytest.raises(ConfigError):
            schedule.check_timestep(t)
    with pytest.raises(ConfigError):
        make_schedule(0.02, 0.01)
    with pytest.raises(ConfigError):
        make_schedule(kind="cosine")


def test_noising_and_one_step_estimate():
    schedule = make_schedule()
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(3, 4, 2, 2, generator=gen, dtype=torch.float64)
    eps = torch.randn(3, 4, 2, 2, generator=gen, dtype=torch.float64)
    t = [1, 500, 1000]
    x_t = add_noise(x0, eps, t, schedule)
    assert torch.allclose(x_t[1], np.sqrt(schedule.alpha_bar[499]) * x0[1] + np.sqrt(1 - schedule.alpha_bar[499]) * eps[1])
    assert torch.allclose(predict_x0(x_t, eps, t, schedule), x0, atol=1e-10)
    with pytest.raises(ConfigError):
        add_noise(x0, eps[:1], 5, schedule)


def test_noising_variance_follows_the_schedule():
    schedule = make_schedule(0.00085, 0.012, 1000)
    gen = torch.Generator().manual_seed(3)
    for t in (1, 100, 500, 1000):
        eps = torch.randn(10_000, 1, 1, 1, generator=gen, dtype=torch.float64)
        x_t = add_noise(torch.zeros_like(eps), eps, t, schedule)
        expected = 1.0 - schedule.alpha_bar_at(t)
        assert abs(float(x_t.var()) - expected) < 0.05 * expected


def test_sampling_timesteps():
    steps = sampling_timesteps(1000, 50)
    assert len(steps) == 50
    assert steps[0] == 1000 and steps[-1] == 1
    assert all(a > b for a, b in zip(steps, steps[1:]))
    assert sampling_timesteps(10, 10) == list(range(10, 0, -1))
    assert sampling_timesteps(1000, 1) == [1000]
    for n in range(1, 51):
        grid = sampling_timesteps(50, n)
        assert grid[0] == 50 and len(grid) == n
        assert n == 1 or grid[-1] == 1
    with pytest.raises(ConfigError):
        sampling_timesteps(10, 11)


def test_control_identity_and_locality():
    gen = torch.Generator().manual_seed(0)
    weights = torch.rand(2, 2, 6, 5, generator=gen).softmax(dim=-1)
    assert apply_control(weights, AttentionControl(frozenset({1}), 1.0)) is weights
    assert apply_control(weights, None) is weights
    scaled = apply_control(weights, AttentionControl(frozenset({1, 3}), 2.5))
    assert torch.equal(scaled[..., [0, 2, 4]], weights[..., [0, 2, 4]])
    assert torch.equal(scaled[..., [1, 3]], weights[..., [1, 3]] * 2.5)
    # no renormalization: rows no longer sum to one
    assert not torch.allclose(scaled.sum(-1), torch.ones(2, 2, 6))
    reweighted = reweight_attention(AttentionMap(0, 10, weights), AttentionControl(frozenset({0}), 0.0))
    assert torch.equal(reweighted.weights[..., 0], torch.zeros(2, 2, 6))


def test_pre_softmax_control_adds_log_factor():
    logits = torch.zeros(1, 1, 2, 4)
    shifted = apply_control_to_logits(logits, AttentionControl(frozenset({2}), 2.0, mode="pre_softmax"))
    assert torch.allclose(shifted[..., 2], torch.full((1, 1, 2), np.log(2.0)))
    assert torch.equal(shifted[..., [0, 1, 3]], logits[..., [0, 1, 3]])


def test_control_validation():
    with pytest.raises(ConfigError):
        AttentionControl(frozenset({0}), -1.0)
    with pytest.raises(ConfigError):
        AttentionControl(frozenset({0}), 1.0, mode="sideways")
    with pytest.raises(ConfigError):
        AttentionControl(frozenset({7}), 2.0).validate(5)


def _inputs(toy, views=2):
    cameras = orbit_cameras(views, resolution=toy.config.resolution)
    shape = toy.codec.latent_shape(toy.config.resolution)
    gen = torch.Generator().manual_seed(1)
    x_t = torch.randn(views, *shape, generator=gen)
    prompt = assemble_prompt(["a", "photo", "of", "red", "object"], None, toy.vocab)
    return x_t, prompt, [camera_embedding(c) for c in cameras]


def test_unit_factor_is_bit_identical(toy):
    x_t, prompt, cams = _inputs(toy)
    plain, _ = predict_noise(toy.denoiser, x_t, 400, prompt, cams)
    unit, _ = predict_noise(toy.denoiser, x_t, 400, prompt, cams, control=AttentionControl(frozenset({3}), 1.0))
    assert torch.equal(plain, unit)


def test_control_only_touches_controlled_columns(toy):
    x_t, prompt, cams = _inputs(toy)
    control = AttentionControl(frozenset({3}), 3.0)
    _, maps = predict_noise(toy.denoiser, x_t, 400, prompt, cams, control=control, recorder=AttentionRecorder())
    assert len(maps) == toy.denoiser.network.num_attention_layers
    for m in maps:
        assert m.controlled is not None
        other = [i for i in range(len(prompt)) if i != 3]
        assert torch.equal(m.controlled[..., other], m.weights[..., other])
        assert torch.allclose(m.controlled[..., 3], 3.0 * m.weights[..., 3])
        assert torch.allclose(m.row_sums(), torch.ones_like(m.row_sums()), atol=1e-5)


def test_attention_export_round_trip(tmp_path, toy):
    x_t, prompt, cams = _inputs(toy)
    control = AttentionControl(frozenset({0}), 2.0)
    _, maps = predict_noise(toy.denoiser, x_t, 250, prompt, cams, control=control, recorder=AttentionRecorder())
    paths = export_attention_maps(maps, tmp_path / "attention")
    assert len(paths) == 2 * len(maps)
    assert (tmp_path / "attention" / "layer00_t0250.npy").exists()
    loaded = load_attention_maps(tmp_path / "attention")
    assert [(m.layer, m.timestep) for m in loaded] == [(m.layer, m.timestep) for m in maps]
    assert all(torch.equal(a.weights, b.weights) and torch.equal(a.controlled, b.controlled)
               for a, b in zip(loaded, maps))


def test_predict_checks_shapes(toy):
    x_t, prompt, cams = _inputs(toy)
    with pytest.raises(ConfigError):
        predict_noise(toy.denoiser, x_t[:, :5], 10, prompt, cams)
    with pytest.raises(ConfigError):
        predict_noise(toy.denoiser, x_t, 10, prompt, cams[:1] * 3)
    with pytest.raises(ConfigError):
        predict_noise(toy.denoiser, x_t, 0, prompt, cams)
    with pytest.raises(ConfigError):
        predict_noise(toy.denoiser, x_t, 10, prompt, cams, control=AttentionControl(frozenset({40}), 2.0))


def test_joint_views_couple_the_batch(toy):
    x_t, prompt, cams = _inputs(toy)
    other = x_t.clone()
    other[1] += 1.0
    a, _ = predict_noise(toy.denoiser, x_t, 300, prompt, cams)
    b, _ = predict_noise(toy.denoiser, other, 300, prompt, cams)
    assert not torch.allclose(a[0], b[0])

    separate = replace_config(toy.denoiser, joint_views=False)
    a, _ = predict_noise(separate, x_t, 300, prompt, cams)
    b, _ = predict_noise(separate, other, 300, prompt, cams)
    assert torch.allclose(a[0], b[0], atol=1e-6)


def replace_config(denoiser, **changes):
    config = DenoiserConfig(**{**denoiser.config.__dict__, **changes})
    return Denoiser.initialize(config, denoiser.schedule, seed=0).freeze()


def test_concat_camera_injection_runs(toy):
    x_t, prompt, cams = _inputs(toy)
    concat = replace_config(toy.denoiser, camera_injection="concat")
    eps, _ = predict_noise(concat, x_t, 300, prompt, cams)
    assert eps.shape == x_t.shape
    turned = [camera_embedding(Camera(azimuth=90.0))] * 2
    moved, _ = predict_noise(concat, x_t, 300, prompt, turned)
    assert not torch.allclose(eps, moved)


def test_sampling_is_deterministic_and_tagged(toy):
    _, prompt, cams = _inputs(toy, views=3)
    shape = toy.codec.latent_shape(toy.config.resolution)
    a = sample(toy.denoiser, prompt, cams, toy.denoiser.schedule, 5, seed=11, latent_shape=shape)
    b = sample(toy.denoiser, prompt, cams, toy.denoiser.schedule, 5, seed=11, latent_shape=shape)
    assert len(a) == 3 and not a.untrained
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    assert a.timesteps == sampling_timesteps(1000, 5)

    fresh = Denoiser.initialize(toy.denoiser.config, toy.denoiser.schedule, seed=0).freeze()
    with pytest.warns(RuntimeWarning):
        untrained = sample(fresh, prompt, cams, fresh.schedule, 2, seed=0, latent_shape=shape)
    assert untrained.untrained


def test_checkpoint_round_trip(tmp_path, toy):
    toy.denoiser.save(tmp_path / "denoiser")
    loaded = Denoiser.load(tmp_path / "denoiser")
    assert loaded.state_hash() == toy.denoiser.state_hash()
    assert loaded.trained and loaded.corpus_hash == toy.denoiser.corpus_hash
    assert loaded.schedule.to_dict() == toy.denoiser.schedule.to_dict()


def test_training_is_deterministic(toy):
    cfg = toy.config
    again = train_denoiser(toy.scenes, toy.captions, cfg.denoiser_config(), cfg.schedule_obj(), cfg.training.steps,
                           cfg.seeds()["denoiser"], toy.vocab, toy.codec, training=cfg.training_config())
    assert again.state_hash() == toy.denoiser.state_hash()
    assert again.losses == toy.denoiser.losses
    assert len(again.losses) == cfg.training.steps


def test_training_rejects_unknown_caption_words(toy):
    cfg = toy.config
    with pytest.raises(ConfigError):
        train_denoiser(toy.scenes[:1], [["a", "zebra"]], cfg.denoiser_config(), cfg.schedule_obj(), 1, 0, toy.vocab,
                       toy.codec, training=cfg.training_config())


def test_float64_copy_runs(toy):
    double = copy.deepcopy(toy.denoiser)
    double.network.double()
    x_t, prompt, cams = _inputs(toy)
    eps, _ = predict_noise(double, x_t.double(), 100, prompt, cams)
    assert eps.dtype == torch.float64


@pytest.mark.slow
def test_training_loss_decreases(toy):
    cfg = toy.config
    denoiser = train_denoiser(toy.scenes, toy.captions, cfg.denoiser_config(), cfg.schedule_obj(), 600,
                              cfg.seeds()["denoiser"], toy.vocab, toy.codec, training=cfg.training_config())
    assert np.mean(denoiser.losses[-100:]) < np.mean(denoiser.losses[:100])


def test_full_scale_config():
    config = DenoiserConfig.full_scale(text_dim=32)
    assert config.base_channels == 320 and config.attention_heads == 8
    assert config.text_dim == 32


@pytest.mark.parametrize("side", [5, 9, 7])
def test_odd_latent_sides(toy, side):
    _, prompt, cams = _inputs(toy)
    deep = replace_config(toy.denoiser, levels=3)
    for denoiser in (toy.denoiser, deep):
        x_t = torch.randn(2, denoiser.config.latent_channels, side, side, generator=torch.Generator().manual_seed(2))
        eps, _ = predict_noise(denoiser, x_t, 200, prompt, cams)
        assert eps.shape == x_t.shape
        assert torch.isfinite(eps).all()


def test_one_step_sampling_starts_from_the_last_timestep(toy):
    _, prompt, cams = _inputs(toy, views=1)
    shape = toy.codec.latent_shape(toy.config.resolution)
    result = sample(toy.denoiser, prompt, cams, toy.denoiser.schedule, 1, seed=3, latent_shape=shape)
    assert result.timesteps == [toy.denoiser.schedule.T]
