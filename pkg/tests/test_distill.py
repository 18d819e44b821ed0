from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import torch

from modules.distill import (SDSConfig, generate_views, project_params, reconstruct, residual_trend, sds_draws,
                             sds_gradient)
from modules.errors import ConfigError, NonFiniteError
from modules.inversion import invert3d
from modules.renderer import render_params
from modules.scene import Camera, SplatParams, orbit_cameras, random_splat_cloud


class ReplayOracle:
    """Predicts exactly the noise that `reconstruct` draws, so every residual is zero."""

    def __init__(self, config, schedule, latent_shape):
        self.schedule = schedule
        self.draws = sds_draws(config, schedule.T, latent_shape, torch.float64)
        self.calls = 0

    def predict(self, x_t, t, prompt, cams, control=None, recorder=None):
        _, expected_t, eps = next(self.draws)
        assert t == expected_t
        self.calls += 1
        return eps.clone(), []


class ShiftOracle:
    """eps_hat = eps + residual for a fixed residual."""

    def __init__(self, schedule, eps, residual):
        self.schedule, self.eps, self.residual = schedule, eps, residual

    def predict(self, x_t, t, prompt, cams, control=None, recorder=None):
        return self.eps + self.residual, []


class NaNOracle:
    def __init__(self, schedule):
        self.schedule = schedule

    def predict(self, x_t, t, prompt, cams, control=None, recorder=None):
        return torch.full_like(x_t, float("nan")), []


def _sds(toy, **changes):
    return toy.config.sds_config(**changes)


def _initial(toy, config):
    return random_splat_cloud(config.initial_splats, 5, background=toy.scene.background)


def test_timestep_range_defaults():
    assert SDSConfig().resolved_timesteps(1000) == (20, 980)
    assert SDSConfig(timestep_range=(100, 200)).resolved_timesteps(1000) == (100, 200)
    for bad in ((0, 10), (300, 200), (10, 1001)):
        with pytest.raises(ConfigError):
            SDSConfig(timestep_range=bad).resolved_timesteps(1000)


def test_config_validation():
    with pytest.raises(ConfigError):
        SDSConfig(weight_fn="sigmoid")
    with pytest.raises(ConfigError):
        SDSConfig(guidance_space="pixel")
    with pytest.raises(ConfigError):
        SDSConfig(iterations=-1)


def test_weight_functions(toy):
    schedule = toy.denoiser.schedule
    assert SDSConfig(weight_fn="constant").weight(500, schedule) == 1.0
    assert SDSConfig().weight(500, schedule) == 1.0 - schedule.alpha_bar_at(500)
    assert SDSConfig().weight(1, schedule) < SDSConfig().weight(1000, schedule)


def test_draws_are_seeded(toy):
    config = _sds(toy)
    shape = toy.codec.latent_shape(config.resolution)
    a, b = sds_draws(config, 1000, shape), sds_draws(config, 1000, shape)
    for _ in range(3):
        (cam_a, t_a, eps_a), (cam_b, t_b, eps_b) = next(a), next(b)
        assert cam_a == cam_b and t_a == t_b and torch.equal(eps_a, eps_b)
        assert 20 <= t_a <= 980
        assert eps_a.shape == shape


def test_oracle_denoiser_causes_no_drift(toy, toy_token):
    config = _sds(toy, iterations=100, snapshot_every=0)
    initial = _initial(toy, config)
    oracle = ReplayOracle(config, toy.denoiser.schedule, toy.codec.latent_shape(config.resolution))
    final, trace = reconstruct(toy_token, initial, config, oracle, toy.codec, toy.vocab)
    assert oracle.calls == 100
    assert final == initial
    assert (trace["loss"] == 0.0).all()


def test_zero_weight_gives_zero_gradients(toy, toy_token, three_splats):
    camera = Camera(30.0, 10.0, resolution=(16, 16))
    shape = toy.codec.latent_shape((16, 16))
    eps = torch.randn(shape, dtype=torch.float64)
    grads = sds_gradient(three_splats, camera, toy_token, 400, eps, 0.0, toy.denoiser, toy.codec, toy.vocab)
    assert all(torch.equal(g, torch.zeros_like(g)) for g in grads.tensors())


def test_gradient_is_linear_in_weight(toy, toy_token, three_splats):
    camera = Camera(30.0, 10.0, resolution=(16, 16))
    eps = torch.randn(toy.codec.latent_shape((16, 16)), dtype=torch.float64)
    one = sds_gradient(three_splats, camera, toy_token, 400, eps, 0.5, toy.denoiser, toy.codec, toy.vocab)
    two = sds_gradient(three_splats, camera, toy_token, 400, eps, 1.0, toy.denoiser, toy.codec, toy.vocab)
    assert all(torch.equal(2 * a, b) for a, b in zip(one.tensors(), two.tensors()))


def test_gradient_is_the_residual_chained_through_codec_and_renderer(toy, toy_token, three_splats):
    camera = Camera(30.0, 10.0, resolution=(16, 16))
    shape = toy.codec.latent_shape((16, 16))
    gen = torch.Generator().manual_seed(2)
    eps = torch.randn(shape, generator=gen, dtype=torch.float64)
    residual = torch.randn(shape, generator=gen, dtype=torch.float64)
    weight = 0.7
    oracle = ShiftOracle(toy.denoiser.schedule, eps, residual)
    analytic = sds_gradient(three_splats, camera, toy_token, 400, eps, weight, oracle, toy.codec, toy.vocab)

    def objective(params):
        image = render_params(params, three_splats.background, camera)
        return weight * float((toy.codec.encode(image) * residual).sum())

    base = three_splats.to_params()
    h = 1e-5
    for name in ("position", "color", "opacity"):
        tensor = getattr(base, name)
        numeric = torch.zeros_like(tensor)
        for idx in np.ndindex(*tensor.shape):
            plus, minus = base.detach(), base.detach()
            getattr(plus, name)[idx] += h
            getattr(minus, name)[idx] -= h
            numeric[idx] = (objective(plus) - objective(minus)) / (2 * h)
        got = getattr(analytic, name)
        rel = float((got - numeric).abs().max() / numeric.abs().max().clamp(min=1e-8))
        assert rel < 1e-4, f"{name}: relative error {rel:.2e}"


def test_denoiser_receives_no_gradient(toy, toy_token):
    before = toy.denoiser.state_hash()
    config = _sds(toy)
    reconstruct(toy_token, _initial(toy, config), config, toy.denoiser, toy.codec, toy.vocab)
    assert toy.denoiser.state_hash() == before
    assert all(p.grad is None for p in toy.denoiser.network.parameters())


def test_projection_restores_scene_invariants():
    params = SplatParams(
        position=torch.zeros(3, 3, dtype=torch.float64),
        scale=torch.tensor([[0.1, -0.2, 0.0]] * 3, dtype=torch.float64),
        rotation=torch.tensor([[2.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]],
                              dtype=torch.float64),
        color=torch.tensor([[1.5, -0.1, 0.5]] * 3, dtype=torch.float64),
        opacity=torch.tensor([1.2, -0.3, 0.5], dtype=torch.float64),
    )
    project_params(params)
    assert torch.allclose(params.rotation.norm(dim=-1), torch.ones(3, dtype=torch.float64))
    assert float(params.scale.min()) == 1e-4
    assert float(params.color.min()) == 0.0 and float(params.color.max()) == 1.0
    assert params.opacity.tolist() == [1.0, 0.0, 0.5]
    # valid values pass through untouched
    again = params.detach()
    project_params(again)
    assert all(torch.equal(a, b) for a, b in zip(again.tensors(), params.tensors()))
    params.to_scene((0.0, 0.0, 0.0))


def test_scene_stays_valid_while_reconstructing(toy, toy_token):
    config = _sds(toy, scene_learning_rate=0.05)
    snapshots = []
    final, trace = reconstruct(toy_token, _initial(toy, config), config, toy.denoiser, toy.codec, toy.vocab,
                               on_snapshot=lambda step, scene: snapshots.append((step, scene)))
    # the Scene constructor re-validates every splat
    assert [step for step, _ in snapshots] == [3, 6]
    assert len(final) == config.initial_splats
    assert list(trace.columns) == ["step", "loss", "timestep", "azimuth", "elevation"]
    assert len(trace) == config.iterations


def test_reconstruction_is_reproducible(toy, toy_token):
    config = _sds(toy)
    initial = _initial(toy, config)
    a, trace_a = reconstruct(toy_token, initial, config, toy.denoiser, toy.codec, toy.vocab)
    b, trace_b = reconstruct(toy_token, initial, config, toy.denoiser, toy.codec, toy.vocab)
    assert a == b
    assert trace_a.equals(trace_b)


def test_no_op_configurations(toy, toy_token):
    initial = _initial(toy, _sds(toy))
    frozen, _ = reconstruct(toy_token, initial, _sds(toy, scene_learning_rate=0.0), toy.denoiser, toy.codec,
                            toy.vocab)
    assert frozen == initial
    untouched, trace = reconstruct(toy_token, initial, _sds(toy, iterations=0), toy.denoiser, toy.codec, toy.vocab)
    assert untouched is initial and trace.empty


def test_non_finite_gradient_raises(toy, toy_token):
    config = _sds(toy)
    with pytest.raises(NonFiniteError) as info:
        reconstruct(toy_token, _initial(toy, config), config, NaNOracle(toy.denoiser.schedule), toy.codec,
                    toy.vocab)
    assert info.value.details["iteration"] == 1


def test_generate_views_shapes_and_errors(toy, toy_token):
    cameras = orbit_cameras(3, resolution=toy.config.resolution)
    images = generate_views(toy_token, cameras, toy.denoiser, toy.codec, toy.vocab, steps=3, seed=0)
    assert len(images) == 3
    assert all(img.shape == (16, 16, 3) for img in images)
    assert all(float(img.min()) >= 0.0 and float(img.max()) <= 1.0 for img in images)
    again = generate_views(toy_token, cameras, toy.denoiser, toy.codec, toy.vocab, steps=3, seed=0)
    assert all(torch.equal(a, b) for a, b in zip(images, again))
    with pytest.raises(ConfigError):
        generate_views(toy_token, [], toy.denoiser, toy.codec, toy.vocab, steps=3, seed=0)
    mixed = [cameras[0], cameras[1].with_resolution((8, 8))]
    with pytest.raises(ConfigError):
        generate_views(toy_token, mixed, toy.denoiser, toy.codec, toy.vocab, steps=3, seed=0)


def test_residual_trend():
    trace = pd.DataFrame({"step": range(1, 21), "loss": np.linspace(2.0, 0.1, 20)})
    first, last = residual_trend(trace)
    assert first == pytest.approx(2.0) and last == pytest.approx(0.1)


@pytest.mark.slow
def test_reference_reconstruction_residual_trends_down(reference):
    setup = reference
    z_star, _ = invert3d(setup.scene, setup.denoiser, setup.codec, setup.vocab, setup.config.inversion_config())
    config = setup.config.sds_config()
    initial = random_splat_cloud(config.initial_splats, config.seed, background=setup.scene.background)
    _, trace = reconstruct(z_star, initial, replace(config, snapshot_every=0), setup.denoiser, setup.codec,
                           setup.vocab)
    first, last = residual_trend(trace)
    assert last < first
