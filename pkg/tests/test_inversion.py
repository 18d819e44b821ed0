import copy
from dataclasses import replace

import numpy as np
import pytest
import torch

from modules.distill import generate_views
from modules.errors import ConfigError
from modules.inversion import InversionConfig, _camera_batch, evaluate_embedding, inversion_loss, invert2d, invert3d
from modules.metrics import psnr
from modules.renderer import render
from modules.scene import CAMERA_DIM, camera_embedding, orbit_cameras, stack_embeddings
from modules.text_embed import Vocabulary, assemble_prompt, init_pseudo_token


def _config(toy, **changes):
    return replace(toy.config.inversion_config(), **changes)


def test_zero_learning_rate_keeps_the_initialization(toy, toy_token):
    z_star, trace = invert3d(toy.scene, toy.denoiser, toy.codec, toy.vocab, _config(toy, learning_rate=0.0))
    assert torch.equal(z_star.vectors, toy_token.vectors)
    assert z_star.state_hash() == toy_token.state_hash()
    assert len(trace) == toy.config.inversion.steps


def test_only_the_token_is_trained(toy):
    denoiser_hash, codec_hash, vocab_hash = toy.denoiser.state_hash(), toy.codec.state_hash(), toy.vocab.state_hash()
    z_star, _ = invert3d(toy.scene, toy.denoiser, toy.codec, toy.vocab, _config(toy))
    assert toy.denoiser.state_hash() == denoiser_hash
    assert toy.codec.state_hash() == codec_hash
    assert toy.vocab.state_hash() == vocab_hash
    init = init_pseudo_token("object", z_star.num_vectors, toy.vocab)
    assert not torch.equal(z_star.vectors, init.vectors)
    assert z_star.metadata["loss_mode"] == "epsilon_prediction"


def test_each_step_uses_fresh_cameras_and_timesteps(toy):
    config = _config(toy, views_per_iteration=4, steps=5)
    _, trace = invert3d(toy.scene, toy.denoiser, toy.codec, toy.vocab, config)
    assert all(len(cams) == 4 for cams in trace.cameras)
    assert all(1 <= t <= 1000 for ts in trace.timesteps for t in ts)
    azimuths = [c.azimuth for cams in trace.cameras for c in cams]
    assert len(set(azimuths)) == len(azimuths)
    frame = trace.to_frame()
    assert list(frame.columns) == ["step", "loss", "azimuth", "elevation", "timestep"]
    assert len(frame["azimuth"].iloc[0].split(";")) == 4


def test_inversion_is_reproducible(toy):
    a, trace_a = invert3d(toy.scene, toy.denoiser, toy.codec, toy.vocab, _config(toy))
    b, trace_b = invert3d(toy.scene, toy.denoiser, toy.codec, toy.vocab, _config(toy))
    assert torch.equal(a.vectors, b.vectors)
    assert trace_a.losses == trace_b.losses
    c, _ = invert3d(toy.scene, toy.denoiser, toy.codec, toy.vocab, _config(toy, seed=99))
    assert not torch.equal(a.vectors, c.vectors)


def test_init_token_is_not_mutated(toy, toy_token):
    before = toy_token.vectors.clone()
    invert3d(toy.scene, toy.denoiser, toy.codec, toy.vocab, _config(toy), init=toy_token)
    assert torch.equal(toy_token.vectors, before)


def test_latent_reconstruction_mode(toy):
    z_star, trace = invert3d(toy.scene, toy.denoiser, toy.codec, toy.vocab,
                             _config(toy, loss_mode="latent_reconstruction"))
    assert all(np.isfinite(trace.losses))
    assert z_star.metadata["loss_mode"] == "latent_reconstruction"


def test_config_validation():
    with pytest.raises(ConfigError):
        InversionConfig(loss_mode="l1")
    with pytest.raises(ConfigError):
        InversionConfig(learning_rate=-1.0)
    with pytest.raises(ConfigError):
        InversionConfig(steps=0)
    assert InversionConfig().prompt_template() == ("S*",)
    assert InversionConfig().num_vectors == 32


def test_pseudo_vector_gradient_matches_finite_differences(toy):
    denoiser = copy.deepcopy(toy.denoiser)
    denoiser.network.double()
    vocab = Vocabulary(toy.vocab.words, toy.vocab.table.double())
    token = init_pseudo_token("object", 2, vocab)
    gen = torch.Generator().manual_seed(0)
    token.vectors += 0.1 * torch.randn(token.vectors.shape, generator=gen, dtype=torch.float64)

    cameras = orbit_cameras(2, resolution=toy.config.resolution)
    x0 = toy.codec.encode(torch.stack([render(toy.scene, c) for c in cameras]))
    cams = stack_embeddings([camera_embedding(c) for c in cameras], dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    t = torch.tensor([200, 700])

    def loss_at(vectors):
        token.vectors = vectors
        return inversion_loss(denoiser, assemble_prompt(["a", "S*"], token, vocab), x0, cams, t, eps)

    base = token.vectors.detach().clone()
    leaf = base.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(loss_at(leaf), [leaf])
    h = 1e-5
    picks = [(0, 0), (0, 3), (1, 5), (1, 7), (0, 11), (1, 15)]
    numeric = torch.zeros(len(picks), dtype=torch.float64)
    for k, idx in enumerate(picks):
        plus, minus = base.clone(), base.clone()
        plus[idx] += h
        minus[idx] -= h
        numeric[k] = (float(loss_at(plus)) - float(loss_at(minus))) / (2 * h)
    analytic = torch.stack([grad[idx] for idx in picks])
    rel = float((analytic - numeric).abs().max() / numeric.abs().max().clamp(min=1e-12))
    assert rel < 1e-3, f"relative error {rel:.2e}"


def test_camera_ablation_zeroes_the_cameras(toy):
    cameras = orbit_cameras(3, resolution=toy.config.resolution)
    assert torch.equal(_camera_batch(cameras, False), torch.zeros(3, CAMERA_DIM))
    assert torch.equal(_camera_batch(cameras, True), stack_embeddings([camera_embedding(c) for c in cameras]))


def test_single_image_inversion(toy):
    image = render(toy.scene, toy.eval_cameras[0])
    z_star, trace = invert2d(image, toy.denoiser, toy.codec, toy.vocab, _config(toy, steps=4))
    assert z_star.vectors.shape == (toy.config.inversion.num_vectors, toy.config.denoiser.text_dim)
    assert all(len(cams) == 1 and cams[0].azimuth == 0.0 for cams in trace.cameras)
    assert len(trace) == 4


def test_heldout_evaluation_is_deterministic(toy, toy_token):
    a = evaluate_embedding(toy_token, toy.scene, toy.eval_cameras, toy.denoiser, toy.codec, toy.vocab, seed=3)
    b = evaluate_embedding(toy_token, toy.scene, toy.eval_cameras, toy.denoiser, toy.codec, toy.vocab, seed=3)
    assert a == b and np.isfinite(a) and a > 0


@pytest.mark.slow
def test_reference_inversion_loss_trends_down(reference):
    setup = reference
    improved = 0
    for seed in (0, 1, 2):
        config = replace(setup.config.inversion_config(), seed=seed)
        _, trace = invert3d(setup.scene, setup.denoiser, setup.codec, setup.vocab, config)
        improved += np.mean(trace.losses[-50:]) < np.mean(trace.losses[:50])
    assert improved >= 2


@pytest.mark.slow
def test_reference_camera_conditioning_helps_heldout_views(reference):
    setup = reference
    wins = 0
    for seed in (0, 1, 2):
        losses = {}
        for conditioning in (True, False):
            config = replace(setup.config.inversion_config(), seed=seed, camera_conditioning=conditioning)
            z_star, _ = invert3d(setup.scene, setup.denoiser, setup.codec, setup.vocab, config)
            losses[conditioning] = evaluate_embedding(z_star, setup.scene, setup.eval_cameras, setup.denoiser,
                                                      setup.codec, setup.vocab, seed=seed,
                                                      camera_conditioning=conditioning)
        wins += losses[True] <= losses[False]
    assert wins >= 2


@pytest.mark.slow
def test_reference_embedding_beats_a_fresh_token(reference):
    setup = reference
    config = setup.config.inversion_config()
    z_star, _ = invert3d(setup.scene, setup.denoiser, setup.codec, setup.vocab, config)
    fresh = init_pseudo_token(config.init_word, config.num_vectors, setup.vocab, name=config.token_name)
    cameras = setup.eval_cameras
    targets = [render(setup.scene, cam) for cam in cameras]
    steps = setup.config.schedule.sampling_steps
    scores = {}
    for label, token in (("inverted", z_star), ("fresh", fresh)):
        views = generate_views(token, cameras, setup.denoiser, setup.codec, setup.vocab, steps, seed=0,
                               template=config.template)
        scores[label] = np.mean([psnr(v, t) for v, t in zip(views, targets)])
    assert scores["inverted"] >= scores["fresh"] + 3.0


@pytest.mark.slow
def test_reference_single_view_embedding_misses_the_other_views(reference):
    setup = reference
    source, heldout = setup.eval_cameras[0], setup.eval_cameras[1:]
    image = render(setup.scene, source)
    wins = 0
    for seed in (0, 1, 2):
        config = replace(setup.config.inversion_config(), seed=seed)
        z_3d, _ = invert3d(setup.scene, setup.denoiser, setup.codec, setup.vocab, config)
        z_2d, _ = invert2d(image, setup.denoiser, setup.codec, setup.vocab, config)
        loss_3d = evaluate_embedding(z_3d, setup.scene, heldout, setup.denoiser, setup.codec, setup.vocab,
                                     template=config.template, seed=seed)
        loss_2d = evaluate_embedding(z_2d, setup.scene, heldout, setup.denoiser, setup.codec, setup.vocab,
                                     template=config.template, seed=seed)
        wins += loss_3d < loss_2d
    assert wins >= 2
