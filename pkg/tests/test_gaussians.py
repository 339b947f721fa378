import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from novelgs.gaussians import (
    GaussianSet,
    activate_attributes,
    depth_from_raw,
    load_nvgs,
    merge_views,
    save_nvgs,
    scale_from_raw,
)
from novelgs.geometry import make_camera, normalization_transform
from novelgs.render import render_reference


def _raw(h=1, w=1, **channels):
    raw = torch.zeros(h, w, 12, dtype=torch.float64)
    raw[..., 1] = 1.0
    layout = {"depth": slice(0, 1), "rotation": slice(1, 5), "scale": slice(5, 8),
              "opacity": slice(8, 9), "color": slice(9, 12)}
    for name, value in channels.items():
        raw[..., layout[name]] = torch.as_tensor(value, dtype=torch.float64)
    return raw


def _rays(direction, h=1, w=1):
    d = torch.tensor(direction, dtype=torch.float64)
    d = d / d.norm()
    rays = torch.zeros(h, w, 6, dtype=torch.float64)
    rays[..., 3:] = d
    return rays


def _random_set(n, seed=0):
    rng = np.random.default_rng(seed)
    return GaussianSet.from_numpy(
        rng.uniform(-0.5, 0.5, (n, 3)), rng.uniform(0.005, 0.02, (n, 3)), rng.normal(size=(n, 4)),
        rng.uniform(0.1, 0.9, n), rng.uniform(0.1, 0.9, (n, 3)),
    )


def test_zero_depth_logit_places_center_at_midrange():
    origin = torch.tensor([0.0, 0.0, -2.0], dtype=torch.float64)
    g = activate_attributes(_raw(depth=0.0), _rays([0, 0, 1]), origin)
    # w = 0.5 -> t = 0.5 * 0.1 + 0.5 * 4.5 = 2.3
    np.testing.assert_allclose(g.centers[0].numpy(), [0.0, 0.0, 0.3], atol=1e-12)


def test_zero_scale_logit():
    g = activate_attributes(_raw(scale=[0.0, 0.0, 0.0]), _rays([0, 0, 1]), torch.zeros(3))
    np.testing.assert_allclose(g.scales[0].numpy(), 0.0125, atol=1e-12)


def test_quaternion_normalized():
    g = activate_attributes(_raw(rotation=[2.0, 0, 0, 0]), _rays([0, 0, 1]), torch.zeros(3))
    np.testing.assert_allclose(g.rotations[0].numpy(), [1, 0, 0, 0])


def test_zero_quaternion_becomes_identity():
    g = activate_attributes(_raw(rotation=[0.0, 0, 0, 0]), _rays([0, 0, 1]), torch.zeros(3))
    np.testing.assert_allclose(g.rotations[0].numpy(), [1, 0, 0, 0])


def test_depth_limit_is_near_plane():
    assert float(depth_from_raw(torch.tensor(-1e3, dtype=torch.float64))) == pytest.approx(0.1, abs=1e-12)
    assert float(depth_from_raw(torch.tensor(1e3, dtype=torch.float64))) == pytest.approx(4.5, abs=1e-12)


def test_centers_clipped_to_unit_cube():
    origin = torch.tensor([0.0, 0.0, -0.5], dtype=torch.float64)
    g = activate_attributes(_raw(depth=5.0), _rays([0, 0, 1]), origin)
    assert float(g.centers[0, 2]) == 1.0


def test_channel_count_and_size_checked():
    with pytest.raises(ValueError):
        activate_attributes(torch.zeros(2, 2, 11), torch.zeros(2, 2, 6), torch.zeros(3))
    with pytest.raises(ValueError):
        activate_attributes(torch.zeros(2, 2, 12), torch.zeros(2, 3, 6), torch.zeros(3))


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30), st.floats(-30, 30))
def test_depth_strictly_monotone_and_bounded(a, b):
    ta, tb = (float(depth_from_raw(torch.tensor(v, dtype=torch.float64))) for v in (a, b))
    assert 0.1 < ta < 4.5
    if b - a > 1e-6:
        assert ta < tb
    elif a <= b:
        assert ta <= tb


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=12, max_size=12))
def test_activation_bounds_property(values):
    raw = torch.tensor(values, dtype=torch.float64).reshape(1, 1, 12)
    g = activate_attributes(raw, _rays([0.3, -0.2, 1.0]), torch.tensor([0.0, 0.0, -2.0], dtype=torch.float64))
    s = g.scales.numpy()
    assert np.all((s > 0.005) & (s < 0.02))
    assert 0 < float(g.opacities[0]) < 1
    assert np.all((g.colors.numpy() > 0) & (g.colors.numpy() < 1))
    if torch.tensor(values[1:5]).norm() > 0:
        assert abs(float(g.rotations[0].norm()) - 1) < 1e-6


def test_merge_counts():
    sets = [activate_attributes(torch.randn(32, 32, 12, dtype=torch.float64), _rays([0, 0, 1], 32, 32),
                                torch.zeros(3)) for _ in range(5)]
    assert merge_views(sets).count == 5 * 32 * 32


def test_merge_single_is_identity():
    g = _random_set(4)
    assert merge_views([g]) is g


def test_merge_two_singletons_in_order():
    a, b = _random_set(1, 0), _random_set(1, 1)
    m = merge_views([a, b])
    assert m.count == 2
    np.testing.assert_array_equal(m.centers[0].numpy(), a.centers[0].numpy())
    np.testing.assert_array_equal(m.colors[1].numpy(), b.colors[1 - 1].numpy())


def test_merge_empty_rejected():
    with pytest.raises(ValueError):
        merge_views([])


def test_nvgs_roundtrip(tmp_path):
    g = _random_set(17)
    save_nvgs(tmp_path / "g.nvgs", g)
    back = load_nvgs(tmp_path / "g.nvgs")
    for x, y in zip(g.fields(), back.fields()):
        np.testing.assert_allclose(x.numpy(), y.numpy(), rtol=1e-6, atol=1e-7)
    raw = (tmp_path / "g.nvgs").read_bytes()
    assert raw[:4] == b"NVGS" and len(raw) == 12 + 17 * 14 * 4


def test_nvgs_rejects_bad_header(tmp_path):
    save_nvgs(tmp_path / "g.nvgs", _random_set(2))
    data = bytearray((tmp_path / "g.nvgs").read_bytes())
    bad_magic = bytes(b"XXXX" + data[4:])
    (tmp_path / "a.nvgs").write_bytes(bad_magic)
    with pytest.raises(ValueError, match="magic"):
        load_nvgs(tmp_path / "a.nvgs")
    data[4] = 9
    (tmp_path / "b.nvgs").write_bytes(bytes(data))
    with pytest.raises(ValueError, match="version"):
        load_nvgs(tmp_path / "b.nvgs")


def test_check_invariants_flags_bad_sets():
    g = _random_set(3)
    with pytest.raises(ValueError, match="unit"):
        g.check_invariants()
    unit = g.rotations / g.rotations.norm(dim=-1, keepdim=True)
    GaussianSet(g.centers, g.scales, unit, g.opacities, g.colors).check_invariants()
    bad = GaussianSet(g.centers, g.scales * 10, unit, g.opacities, g.colors)
    with pytest.raises(ValueError, match="scale"):
        bad.check_invariants()


def test_transformed_set_renders_like_transformed_camera():
    g = _random_set(30, seed=4)
    cams = [make_camera([2.0, 1.0, 0.8], (24, 24), 28.0), make_camera([-1.0, 2.0, -0.3], (24, 24), 28.0)]
    tf = normalization_transform(cams, 0)
    a, _ = render_reference(g, cams[1])
    b, _ = render_reference(g.transformed(tf), tf.apply_camera(cams[1]))
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_scale_activation_midpoint():
    assert float(scale_from_raw(torch.tensor(0.0, dtype=torch.float64))) == pytest.approx(0.0125)
