import math

import numpy as np
import pytest
import torch

from novelgs.data import make_scene
from novelgs.denoiser import Denoiser, DenoiserConfig
from novelgs.diffusion import (
    DiffusionSchedule,
    cosine_alpha_bar,
    inference_timesteps,
    make_schedule,
    q_sample,
    sample,
)


def test_first_alpha_bar_value():
    # cos^2((0.008 / 1.008) * pi / 2)
    expected = math.cos(0.008 / 1.008 * math.pi / 2) ** 2
    assert make_schedule().alpha_bar[0] == pytest.approx(expected, abs=1e-12)
    assert abs(make_schedule().alpha_bar[0] - 0.99985) < 1e-4


def test_schedule_monotone_and_consistent():
    s = make_schedule(1000)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all(s.betas <= 0.999) and np.all(s.betas > 0)
    np.testing.assert_allclose(np.cumprod(1 - s.betas), s.alpha_bar, atol=1e-6)


def test_schedule_follows_closed_form_until_cap():
    s = make_schedule(1000)
    np.testing.assert_allclose(s.alpha_bar[:900], cosine_alpha_bar(np.arange(900), 1000), rtol=1e-9)


def test_schedule_dict_roundtrip():
    s = make_schedule(50)
    back = DiffusionSchedule.from_dict(s.to_dict())
    assert back.step_count == 50
    np.testing.assert_array_equal(back.alpha_bar, s.alpha_bar)


def test_q_sample_identity_when_noise_free():
    s = DiffusionSchedule(1, np.array([1.0]), np.array([0.0]))
    x0 = torch.randn(4, 4)
    assert torch.equal(q_sample(x0, 0, torch.randn(4, 4), s), x0)


@pytest.mark.parametrize("t", [0, 250, 999])
def test_q_sample_moments(t):
    s = make_schedule()
    rng = np.random.default_rng(t)
    x0 = np.full(20000, 0.3)
    xt = q_sample(x0, t, rng.standard_normal(20000), s)
    assert np.mean(xt) == pytest.approx(math.sqrt(s.alpha_bar[t]) * 0.3, abs=4 * math.sqrt(1 - s.alpha_bar[t]) / 141)
    assert np.var(xt) == pytest.approx(1 - s.alpha_bar[t], rel=0.05)


def test_q_sample_validates():
    s = make_schedule()
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 1000, np.zeros(3), s)
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 10, np.zeros(4), s)


@pytest.mark.parametrize("steps", [1, 2, 10, 50, 1000])
def test_inference_timesteps(steps):
    ts = inference_timesteps(make_schedule(), steps)
    assert len(ts) == steps
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert ts[0] == 999
    if steps > 1:
        assert ts[-1] == 0


@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(0)
    model = Denoiser(DenoiserConfig(width=32, layer_count=2, head_count=2, patch_size=4, base_resolution=16,
                                    zero_init_heads=False)).eval()
    return model, make_scene(1, 6, 16)


def test_sampler_is_seed_deterministic(tiny):
    model, scene = tiny
    run = lambda seed: sample(model, scene.images[:2], scene.cameras[:3], [2], 4, seed)  # noqa: E731
    a, b, c = run(3), run(3), run(4)
    for x, y in zip(a.fields(), b.fields()):
        assert torch.equal(x, y)
    assert not torch.equal(a.colors, c.colors)


def test_sampler_without_noisy_views_is_single_pass(tiny):
    model, scene = tiny
    g = sample(model, scene.images[:2], scene.cameras[:2], [], 50, 0)
    assert g.count == 2 * 16 * 16


def test_sampler_trace_length(tiny):
    model, scene = tiny
    trace = []
    sample(model, scene.images[:2], scene.cameras[:3], [2], 5, 0, trace=trace)
    assert len(trace) == 4 and trace[0].shape == (1, 16, 16, 3)


def test_sampler_fixed_noise_changes_result(tiny):
    model, scene = tiny
    a = sample(model, scene.images[:2], scene.cameras[:3], [2], 5, 0)
    b = sample(model, scene.images[:2], scene.cameras[:3], [2], 5, 0, fixed_noise=True)
    assert a.count == b.count
    assert not torch.equal(a.colors, b.colors)


def test_sampler_argument_checks(tiny):
    model, scene = tiny
    with pytest.raises(ValueError):
        sample(model, scene.images[:3], scene.cameras[:3], [2], 5, 0)
    with pytest.raises(ValueError):
        sample(model, scene.images[:0], scene.cameras[:1], [0], 5, 0)
    with pytest.raises(ValueError):
        sample(model, scene.images[:2], scene.cameras[:3], [2], 5, 0, schedule=make_schedule(10))
