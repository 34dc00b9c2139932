import math

import numpy as np
import pytest

from reportgen import tensor as T
from reportgen.gradcheck import check_gradients, max_rel_error, numerical_grad
from reportgen.tensor import ShapeError, Tensor, backward
from reportgen.vision import (VISION_PRESETS, VisionConfig, VisualExtractor, _final_geometry, classify_topic,
                              kmve_loss, maps_to_nchw, read_sgff, write_sgff)


@pytest.fixture(scope="module")
def desk():
    return VisualExtractor(VisionConfig(), np.random.default_rng(0))


def _images(n, seed=0, size=(3, 64, 64)):
    return np.random.default_rng(seed).random((n,) + size).astype(np.float32)


def test_desk_shapes(desk):
    f = desk.encode_pair(_images(2), _images(2, 1))
    assert f.v_a.shape == (2, 32, 7, 7) and f.v_l.shape == (2, 32, 7, 7)
    assert f.v_prime_a.shape == (2, 32)
    assert f.v_avg.shape == (2, 64)
    assert f.logits.shape == (2, 8)


@pytest.mark.parametrize("side", [224, 244, 64, 96])
def test_backbone_lands_on_seven_by_seven(side):
    cfg = VisionConfig(image_size=(3, side, side), channels=4, num_topics=2)
    f = VisualExtractor(cfg, np.random.default_rng(0)).encode_pair(_images(1, size=cfg.image_size),
                                                                   _images(1, 1, size=cfg.image_size))
    assert f.v_a.shape == (1, 4, 7, 7)


def test_paper_preset_widths():
    # building the full 2048-channel model is too heavy here, so check the pooling chain on its sizes
    cfg = VISION_PRESETS["paper"]
    assert 2 * cfg.channels == 4096 and cfg.mid_width == 512
    v = Tensor(np.random.default_rng(0).random((1, 4096)))
    mid = T.bucketed_avg_pool1d(v, cfg.mid_width)
    assert mid.shape == (1, 512)
    assert T.bucketed_avg_pool1d(mid, 73).shape == (1, 73)
    for name in ("paper", "paper244"):
        side = VISION_PRESETS[name].image_size[1]
        for _ in range(3):
            side = (side - 1) // 2 + 1
        stride, kernel = _final_geometry(side, 7)
        assert (side - kernel) // stride + 1 == 7


def test_identical_views_give_identical_vectors(desk):
    img = _images(3, 5)
    f = desk.encode_pair(img, img.copy())
    assert np.array_equal(f.v_prime_a.data, f.v_prime_l.data)


def test_swapping_views_swaps_halves(desk):
    a, b = _images(2, 1), _images(2, 2)
    f, g = desk.encode_pair(a, b), desk.encode_pair(b, a)
    assert np.array_equal(f.v_prime_a.data, g.v_prime_l.data)
    assert np.array_equal(f.v_avg.data[:, :32], g.v_avg.data[:, 32:])


def test_single_parameter_set_gets_both_view_gradients():
    cfg = VisionConfig(image_size=(3, 64, 64), channels=4, num_topics=2)
    model = VisualExtractor(cfg, np.random.default_rng(1))
    a, b = _images(1, 3, cfg.image_size), _images(1, 4, cfg.image_size)
    ids = {id(p) for p in model.parameters()}
    assert len(ids) == len(model.parameters())

    def grads(fn):
        model.zero_grad()
        f = model.encode_pair(a, b)
        backward(T.tsum(fn(f)))
        return [p.grad.copy() for p in model.backbone_parameters()]

    ga = grads(lambda f: f.v_prime_a)
    gl = grads(lambda f: f.v_prime_l)
    both = grads(lambda f: f.v_avg)
    assert any(np.abs(g).max() > 0 for g in ga) and any(np.abs(g).max() > 0 for g in gl)
    for x, y, z in zip(ga, gl, both):
        np.testing.assert_allclose(z, x + y, rtol=1e-4, atol=1e-6)


def test_frozen_backbone_has_no_gradient():
    cfg = VisionConfig(image_size=(3, 64, 64), channels=4, num_topics=2, freeze_backbone=True)
    model = VisualExtractor(cfg, np.random.default_rng(1))
    f = model.encode_pair(_images(1, size=cfg.image_size), _images(1, 1, size=cfg.image_size))
    backward(T.tsum(f.logits))
    assert all(p.grad is None or not p.grad.any() for p in model.backbone_parameters())
    assert np.abs(model.spatial.weight.grad).max() > 0


def test_precomputed_maps_match_images(desk):
    a, b = _images(2, 7), _images(2, 8)
    f = desk.encode_pair(a, b)
    g = desk.features_from_maps(f.v_a.data, f.v_l.data)
    assert np.array_equal(f.logits.data, g.logits.data)


def test_shape_errors(desk):
    with pytest.raises(ShapeError, match="encode_pair"):
        desk.encode_pair(_images(1, size=(3, 32, 32)), _images(1, size=(3, 32, 32)))
    with pytest.raises(ShapeError):
        desk.features_from_maps(np.zeros((1, 32, 6, 6)), np.zeros((1, 32, 6, 6)))


def test_config_validation():
    with pytest.raises(ValueError):
        VisionConfig(image_size=(3, 64, 48)).validate()
    with pytest.raises(ValueError):
        VisionConfig(channels=2, num_topics=8).validate()
    with pytest.raises(ValueError):
        VisionConfig(image_size=(3, 16, 16)).validate()


def test_uniform_logits_loss_is_log_k():
    with T.default_dtype(np.float64):
        loss = kmve_loss(np.zeros((4, 73)), [0, 10, 40, 72])
    assert abs(float(loss.data) - math.log(73)) <= 1e-6
    assert abs(math.log(73) - 4.29046) < 1e-5


@pytest.mark.parametrize("k", [2, 5])
def test_confident_logit_loss_is_tiny(k):
    z = np.zeros((1, k))
    z[0, 1] = 20.0
    with T.default_dtype(np.float64):
        assert float(kmve_loss(z, [1]).data) < 1e-8


def test_loss_decreases_with_true_logit():
    with T.default_dtype(np.float64):
        vals = [float(kmve_loss(np.array([[x, 0.0, 0.0]]), [0]).data) for x in np.linspace(-5, 20, 26)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_noise_samples_excluded():
    z = np.random.default_rng(0).normal(size=(4, 3))
    with T.default_dtype(np.float64):
        full = float(kmve_loss(z, [-1, 2, -1, 0]).data)
        kept = float(kmve_loss(z[[1, 3]], [2, 0]).data)
        none = kmve_loss(z, [-1, -1, -1, -1])
    assert full == pytest.approx(kept, abs=1e-15)
    assert float(none.data) == 0.0


def test_label_out_of_range():
    with pytest.raises(ValueError):
        kmve_loss(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValueError):
        kmve_loss(np.zeros((2, 3)), [0, -2])


def test_shift_invariance():
    z = np.random.default_rng(3).normal(size=(5, 6))
    labels = [0, 1, 2, 3, 4]
    with T.default_dtype(np.float64):
        a = float(kmve_loss(z, labels).data)
        b = float(kmve_loss(z + 37.0, labels).data)
    assert a == pytest.approx(b, abs=1e-6)
    assert np.array_equal(classify_topic(z)[0], classify_topic(z + 37.0)[0])


def test_kmve_gradient():
    z = np.random.default_rng(4).normal(size=(4, 5))
    err = check_gradients(lambda t: kmve_loss(t, [0, -1, 4, 2]), [z])
    assert err <= 1e-4


def test_vision_parameter_gradients():
    cfg = VisionConfig(image_size=(3, 16, 16), channels=2, grid=2, num_topics=2)
    with T.default_dtype(np.float64):
        model = VisualExtractor(cfg, np.random.default_rng(2))
        for p in model.parameters():
            p.data = p.data.astype(np.float64)
        a = np.random.default_rng(5).random((2, 3, 16, 16))
        b = np.random.default_rng(6).random((2, 3, 16, 16))

        def loss():
            f = model.encode_pair(a, b)
            return kmve_loss(f.logits, [0, 1])

        model.zero_grad()
        backward(loss())
        for p in (model.spatial.weight, model.backbone.head.weight, model.backbone.blocks[0].bias):
            num = numerical_grad(lambda: float(loss().data), p.data, h=1e-6)
            assert max_rel_error(p.grad, num) <= 1e-4


def test_classify_ties_go_to_first():
    labels, probs = classify_topic(np.zeros((2, 4)))
    assert labels.tolist() == [0, 0]
    np.testing.assert_allclose(probs, 0.25)
    labels, probs = classify_topic(np.array([[0.0, 9.0, 1.0]]))
    assert labels[0] == 1 and probs[0] > 0.99


def test_sgff_round_trip(tmp_path):
    maps = np.random.default_rng(0).random((3, 7, 7, 5)).astype(np.float32)
    write_sgff(tmp_path / "f.sgff", ["a", "b", "c"], maps)
    ids, back = read_sgff(tmp_path / "f.sgff")
    assert ids == ["a", "b", "c"] and np.array_equal(back, maps)
    assert maps_to_nchw(back).shape == (3, 5, 7, 7)
    (tmp_path / "bad.sgff").write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(ValueError):
        read_sgff(tmp_path / "bad.sgff")
