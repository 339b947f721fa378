import json
import math
import warnings

import numpy as np
import pytest
import torch

import novelgs.training as training
from novelgs.data import make_scene, make_view_batch
from novelgs.denoiser import Denoiser, DenoiserConfig, load_checkpoint
from novelgs.training import (
    StageConfig,
    TrainConfig,
    Trainer,
    cosine_after,
    load_perceptual_plugin,
    loss_image,
    loss_mask,
    loss_total,
    train,
)

TINY = DenoiserConfig(width=32, layer_count=2, head_count=2, patch_size=4, base_resolution=16)


@pytest.fixture(scope="module")
def scenes():
    return [make_scene(s, 10, 16) for s in range(2)]


def _config(**kw):
    base = dict(stages=[StageConfig(16, 4, 1e-3, 100)], perceptual_weight=0.0, model=TINY)
    base.update(kw)
    return TrainConfig(**base)


def test_losses_zero_for_perfect_views():
    img = torch.rand(4, 4, 3)
    mask = (torch.rand(4, 4) > 0.5).double()
    total = loss_total([img], [mask], [img], [mask], perceptual_weight=0.0)
    assert float(total) == 0.0


def test_loss_image_mse_value():
    pred = torch.zeros(2, 2, 3)
    target = torch.full((2, 2, 3), 0.5)
    assert float(loss_image(pred, target, perceptual_weight=0.0)) == pytest.approx(0.25)


def test_loss_mask_shape_checked():
    with pytest.raises(ValueError):
        loss_mask(torch.zeros(2, 2), torch.zeros(3, 2))


def test_perceptual_plugin_added_with_weight():
    pred, target = torch.zeros(2, 2, 3), torch.ones(2, 2, 3)
    loss = loss_image(pred, target, 0.5, perceptual=lambda a, b: torch.tensor(2.0))
    assert float(loss) == pytest.approx(1.0 + 0.5 * 2.0)


def test_missing_perceptual_backend_warns_once(monkeypatch):
    monkeypatch.setattr(training, "_warned_missing_backend", False)
    x = torch.zeros(2, 2, 3)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        loss_image(x, x, 1.0)
        loss_image(x, x, 1.0)
    assert sum(issubclass(w.category, RuntimeWarning) for w in caught) == 1


def test_load_perceptual_plugin_from_spec(monkeypatch):
    assert load_perceptual_plugin("math:hypot") is math.hypot
    monkeypatch.delenv("NOVELGS_PERCEPTUAL_PLUGIN", raising=False)
    assert load_perceptual_plugin() is None
    monkeypatch.setenv("NOVELGS_PERCEPTUAL_PLUGIN", "math:sqrt")
    assert load_perceptual_plugin() is math.sqrt


def test_cosine_after_schedule():
    f = cosine_after(10, 20, 0.0)
    assert f(0) == 1.0 and f(10) == 1.0
    assert f(15) == pytest.approx(0.5)
    assert f(20) == pytest.approx(0.0, abs=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(clean_count=0)
    with pytest.raises(ValueError):
        TrainConfig(noisy_count=0, extra_supervision_count=0)
    with pytest.raises(ValueError):
        TrainConfig(stages=[StageConfig(30, 1, 1e-3, 0)])


def test_config_file_roundtrip(tmp_path):
    cfg = _config()
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    back = TrainConfig.from_file(tmp_path / "c.json")
    assert back == cfg


def test_supervised_views_are_noisy_plus_extra(scenes):
    trainer = Trainer(Denoiser(TINY), _config())
    batch = make_view_batch(scenes[0], [0, 1, 2, 3], [4], [5, 6, 7])
    out = trainer.forward_batch(batch, 10)
    assert len(out["renders"]) == 4
    assert out["gaussians"].count == 5 * 16 * 16
    torch.testing.assert_close(out["targets"][0], torch.as_tensor(scenes[0].images[4], dtype=torch.float32))


def test_train_step_updates_and_reports(scenes):
    trainer = Trainer(Denoiser(TINY), _config())
    before = [p.detach().clone() for p in trainer.model.parameters()]
    m = trainer.train_step(trainer.draw_batch(scenes))
    assert set(m) >= {"step", "loss", "loss_img", "loss_mask", "psnr", "t", "lr"}
    assert trainer.step == 1
    changed = sum(not torch.equal(a, b) for a, b in zip(before, trainer.model.parameters()))
    assert changed > 0


def test_non_finite_loss_skips_update(scenes):
    trainer = Trainer(Denoiser(TINY), _config())
    bad = make_view_batch(scenes[0], [0, 1, 2, 3], [4], [5, 6, 7])
    bad.images = bad.images.copy()
    bad.images[5] = np.nan
    before = [p.detach().clone() for p in trainer.model.parameters()]
    m = trainer.train_step([bad])
    assert m.get("aborted") and trainer.step == 0
    assert all(torch.equal(a, b) for a, b in zip(before, trainer.model.parameters()))


def test_grad_accumulation_steps_every_k_calls(scenes):
    trainer = Trainer(Denoiser(TINY), _config(grad_accum=2))
    trainer.train_step(trainer.draw_batch(scenes))
    assert trainer.step == 0
    trainer.train_step(trainer.draw_batch(scenes))
    assert trainer.step == 1


def test_training_is_seed_deterministic(scenes):
    cfg = _config(stages=[StageConfig(16, 3, 1e-3, 100)])
    _, h1 = train(cfg, scenes)
    _, h2 = train(cfg, scenes)
    assert [m["loss"] for m in h1] == [m["loss"] for m in h2]


def test_train_writes_metrics_and_checkpoint(tmp_path, scenes):
    cfg = _config(stages=[StageConfig(16, 2, 1e-3, 100), StageConfig(32, 1, 1e-4, 0)], checkpoint_every=0)
    model, history = train(cfg, scenes, out_dir=tmp_path)
    assert [m["stage"] for m in history] == [0, 0, 1]
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3
    loaded, payload = load_checkpoint(tmp_path / "checkpoint.pt")
    assert payload["extra"]["train_config"]["stages"][1]["resolution"] == 32


def test_every_parameter_gets_gradient(scenes):
    cfg = DenoiserConfig(width=32, layer_count=2, head_count=2, patch_size=4, base_resolution=16,
                         register_token_count=1, zero_init_heads=False)
    model = Denoiser(cfg)
    for block in model.blocks:
        torch.nn.init.normal_(block.ada_ln[1].weight, std=0.02)
    trainer = Trainer(model, _config(model=cfg))
    out = trainer.forward_batch(make_view_batch(scenes[0], [0, 1, 2, 3], [4], [5]), 300)
    loss_total(out["renders"], out["alphas"], out["targets"], out["masks"], 0.0).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and float(p.grad.abs().sum()) > 0, name
