import numpy as np
import pytest
import torch

from conftest import make_random_gaussians
from novelgs.gaussians import GaussianSet, merge_views
from novelgs.geometry import Camera, make_camera
from novelgs.render import (
    ALPHA_MAX,
    Splat2D,
    available_backends,
    composite_reference,
    project_gaussian,
    project_splats,
    render,
    render_reference,
)

BACKENDS = available_backends()


def _single(center=(0.0, 0.0, 0.0), scale=0.01, opacity=0.8, color=(0.2, 0.4, 0.6)):
    return GaussianSet.from_numpy(np.array([center]), np.full((1, 3), scale), np.array([[1.0, 0, 0, 0]]),
                                  np.array([opacity]), np.array([color]))


def _front_camera(size=17, focal=20.0):
    return make_camera([0.0, -2.0, 0.0], (size, size), focal)


def test_project_center_lands_on_principal_point():
    s = project_gaussian([0, 0, 0], [0.01] * 3, [1, 0, 0, 0], 0.5, [1, 1, 1], _front_camera())
    np.testing.assert_allclose(s.mean2d, [8.5, 8.5], atol=1e-12)
    assert s.depth == pytest.approx(2.0)


def test_project_isotropic_covariance_closed_form():
    # on the optical axis the Jacobian is diag(f/z, f/z)
    s = project_gaussian([0, 0, 0], [0.01] * 3, [0.3, 0.1, -0.7, 0.2], 0.5, [1, 1, 1], _front_camera())
    expected = (20.0 / 2.0 * 0.01) ** 2 + 0.3
    np.testing.assert_allclose(s.cov2d, expected * np.eye(2), atol=1e-12)


@pytest.mark.parametrize("y", [-2.0, -1.995, 0.5])
def test_project_culls_near_and_behind(y):
    # camera at y=-2 looking along +y; depth = y + 2
    assert project_gaussian([0, y, 0], [0.01] * 3, [1, 0, 0, 0], 0.5, [1, 1, 1], _front_camera()) is None \
        or y + 2.0 > 0.01


def test_empty_set_renders_background():
    g = GaussianSet.empty()
    cam = _front_camera(8)
    for backend in BACKENDS:
        img, alpha = render(g, cam, background=[0.1, 0.2, 0.3], backend=backend)
        np.testing.assert_allclose(img.numpy(), np.broadcast_to([0.1, 0.2, 0.3], (8, 8, 3)))
        assert float(alpha.abs().max()) == 0.0


def test_reference_single_splat_peak():
    splat = Splat2D(np.array([1.5, 1.5]), np.eye(2), 1.0, 0.6, np.array([1.0, 0.5, 0.0]))
    img, alpha = composite_reference([splat], 3, 3)
    np.testing.assert_allclose(img[1, 1], [0.6, 0.3, 0.0], atol=1e-15)
    np.testing.assert_allclose(alpha[1, 0], 0.6 * np.exp(-0.5), atol=1e-15)


def test_reference_alpha_cap_and_occlusion():
    front = Splat2D(np.array([0.5, 0.5]), np.eye(2), 1.0, 1.0, np.array([1.0, 0.0, 0.0]))
    back = Splat2D(np.array([0.5, 0.5]), np.eye(2), 2.0, 1.0, np.array([0.0, 1.0, 0.0]))
    img, alpha = composite_reference([front, back], 1, 1)
    np.testing.assert_allclose(img[0, 0], [ALPHA_MAX, (1 - ALPHA_MAX) * ALPHA_MAX, 0.0], atol=1e-15)
    assert alpha[0, 0] == pytest.approx(1 - (1 - ALPHA_MAX) ** 2)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backend_matches_reference(backend, seed):
    g = make_random_gaussians(200, seed, scale_mult=3.0)
    cam = make_camera([1.8, -1.2, 0.9], (32, 40), 36.0)
    ref_img, ref_alpha = render_reference(g, cam, background=[0.5, 0.5, 0.5])
    img, alpha = render(g, cam, background=[0.5, 0.5, 0.5], backend=backend)
    np.testing.assert_allclose(img.numpy(), ref_img, atol=1e-6)
    np.testing.assert_allclose(alpha.numpy(), ref_alpha, atol=1e-6)


@pytest.mark.parametrize("backend", BACKENDS)
def test_eps_zero_matches_reference_tightly(backend):
    g = make_random_gaussians(100, 5, scale_mult=4.0)
    cam = make_camera([0.0, 2.0, 1.0], (20, 20), 24.0)
    ref_img, _ = render_reference(g, cam)
    img, _ = render(g, cam, eps_w=0.0, backend=backend)
    np.testing.assert_allclose(img.numpy(), ref_img, atol=1e-12)


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled rasterizer not built")
@pytest.mark.parametrize("seed", [0, 7])
def test_compiled_kernel_bitwise_at_eps_zero(bitwise_check, seed):
    result = bitwise_check(seed=seed)
    assert result["splats"] > 0
    assert result["image_equal"] and result["alpha_equal"], result


@pytest.mark.parametrize("backend", BACKENDS)
def test_render_is_deterministic(backend):
    g = make_random_gaussians(150, 3, scale_mult=3.0)
    cam = _front_camera(24, 28.0)
    a, _ = render(g, cam, backend=backend)
    b, _ = render(g, cam, backend=backend)
    assert torch.equal(a, b)


@pytest.mark.parametrize("backend", BACKENDS)
def test_alpha_in_unit_interval_and_monotone_in_opacity(backend):
    g = make_random_gaussians(80, 11, scale_mult=4.0, opacity=(0.1, 0.5))
    cam = _front_camera(20, 24.0)
    _, a_lo = render(g, cam, backend=backend)
    boosted = GaussianSet(g.centers, g.scales, g.rotations, g.opacities * 1.5, g.colors)
    _, a_hi = render(boosted, cam, backend=backend)
    assert float(a_lo.min()) >= 0 and float(a_hi.max()) <= 1
    assert bool(torch.all(a_hi >= a_lo - 1e-12))


def test_render_only_depends_on_merged_set():
    a, b = make_random_gaussians(30, 1), make_random_gaussians(30, 2)
    merged = merge_views([a, b])
    resplit = merge_views([a.subset(torch.arange(10)), merge_views([a.subset(torch.arange(10, 30)), b])])
    cam = _front_camera(16, 20.0)
    assert torch.equal(render(merged, cam)[0], render(resplit, cam)[0])


def test_depth_ties_keep_index_order():
    cam = _front_camera(5, 6.0)
    red = _single(color=(1.0, 0.0, 0.0), opacity=0.9)
    blue = _single(color=(0.0, 0.0, 1.0), opacity=0.9)
    img_rb, _ = render(merge_views([red, blue]), cam, eps_w=0.0)
    img_br, _ = render(merge_views([blue, red]), cam, eps_w=0.0)
    assert img_rb[2, 2, 0] > img_rb[2, 2, 2]
    assert img_br[2, 2, 2] > img_br[2, 2, 0]


@pytest.mark.skipif(len(BACKENDS) < 2, reason="only one backend available")
def test_backends_agree_on_gradients():
    g = make_random_gaussians(60, 4, scale_mult=3.0)
    cam = make_camera([1.0, -1.5, 0.5], (16, 16), 20.0)
    weights = torch.from_numpy(np.random.default_rng(0).normal(size=(16, 16, 3)))
    grads = []
    for backend in BACKENDS:
        leaves = [t.clone().requires_grad_(True) for t in g.fields()]
        img, alpha = render(GaussianSet(*leaves), cam, backend=backend)
        ((img * weights).sum() + alpha.sum()).backward()
        grads.append([t.grad for t in leaves])
    for x, y in zip(*grads):
        torch.testing.assert_close(x, y, atol=1e-9, rtol=1e-7)


def test_gradient_matches_finite_differences():
    g = make_random_gaussians(6, 9, spread=0.3, scale_mult=5.0, opacity=(0.3, 0.8))
    cam = make_camera([0.2, -2.2, 0.3], (24, 24), 30.0)
    weights = torch.from_numpy(np.random.default_rng(1).uniform(0.5, 1.5, size=(24, 24, 3)))

    def loss(fields):
        img, alpha = render(GaussianSet(*fields), cam, eps_w=0.0)
        return (img * weights).sum() + alpha.sum()

    leaves = [t.clone().requires_grad_(True) for t in g.fields()]
    loss(leaves).backward()
    h = 1e-6
    for k, leaf in enumerate(leaves):
        flat = leaf.detach().reshape(-1)
        for j in range(0, flat.numel(), max(1, flat.numel() // 5)):
            plus = [t.detach().clone() for t in leaves]
            minus = [t.detach().clone() for t in leaves]
            plus[k].view(-1)[j] += h
            minus[k].view(-1)[j] -= h
            fd = (loss(plus) - loss(minus)).item() / (2 * h)
            an = leaf.grad.reshape(-1)[j].item()
            assert an == pytest.approx(fd, rel=1e-4, abs=1e-6), (k, j)


def test_projection_gradients_flow_to_all_fields():
    g = make_random_gaussians(10, 2, scale_mult=3.0)
    leaves = [t.clone().requires_grad_(True) for t in g.fields()]
    img, _ = render(GaussianSet(*leaves), _front_camera(16, 20.0))
    img.sum().backward()
    for t in leaves:
        assert t.grad is not None and torch.isfinite(t.grad).all()


def test_project_splats_matches_reference_projection():
    g = make_random_gaussians(20, 6)
    cam = make_camera([1.0, 2.0, -0.5], (12, 12), 15.0)
    index, means, conics, z = project_splats(g, cam)
    arr = g.numpy()
    for row, i in enumerate(index.tolist()):
        s = project_gaussian(arr["centers"][i], arr["scales"][i], arr["rotations"][i], arr["opacities"][i],
                             arr["colors"][i], cam)
        np.testing.assert_allclose(means[row].numpy(), s.mean2d, atol=1e-10)
        np.testing.assert_allclose(conics[row].numpy(), s.conic, rtol=1e-9)
        assert float(z[row]) == pytest.approx(s.depth)


def test_camera_type_is_required():
    with pytest.raises(AttributeError):
        render(make_random_gaussians(2), object())  # type: ignore[arg-type]
    assert isinstance(_front_camera(), Camera)
