import math
import os

import numpy as np
import pytest

import usnprune as up


def small_net(seed=0):
    net = up.Network.cnn_small(16, 16, 4, width_multiplier=2)
    net.initialize(seed)
    return net


def test_network_shapes_and_prediction():
    net = small_net()
    assert net.input_shape == (1, 16, 16)
    assert net.output_size == 8
    assert net.num_linear == 5
    image, keypoints = up.generate_scene(3, 16, 16, 4)
    assert image.shape == (16, 16)
    assert keypoints.shape == (8,)
    y = net.predict(image)
    assert y.shape == (8,)
    assert np.all(np.isfinite(y))
    np.testing.assert_array_equal(y, net.predict(image))
    pre = net.pre_activations(image)
    assert len(pre) == net.num_linear


def test_bad_image_shape_raises_config_error():
    with pytest.raises(up.ConfigError):
        small_net().predict(np.zeros((5, 5)))


def test_lipschitz_constant_is_product_of_norms():
    net = small_net()
    norms = net.spectral_norms()
    c1 = net.lipschitz_to_output(1)
    c2 = net.lipschitz_to_output(2)
    assert c1 == pytest.approx(c2 * norms[1], rel=1e-9)


def test_perturbation_apply_and_sample():
    image, _ = up.generate_scene(1, 16, 16, 4)
    spec = up.PerturbationSpec(up.PerturbationKind.brightness, 0.01)
    shifted = up.apply(spec, image, 0.005)
    np.testing.assert_allclose(shifted, image + 0.005)
    params, images = up.sample(spec, image, 10, seed=1)
    assert len(images) == 10
    assert np.all(np.abs(params) <= 0.01)
    with pytest.raises(up.ContractError):
        up.PerturbationSpec(up.PerturbationKind.contrast, -1.0)


def test_zero_radius_holds_and_falsify_agrees():
    net = small_net()
    image, _ = up.generate_scene(2, 16, 16, 4)
    crit = up.KeypointCriterion(1.0)
    zero = up.PerturbationSpec(up.PerturbationKind.brightness, 0.0)
    r = up.certify_grid(net, image, zero, crit)
    assert r["verdict"] == "Holds"
    assert r["margin"] == pytest.approx(1.0)
    spec = up.PerturbationSpec(up.PerturbationKind.contrast, 0.02)
    g = up.certify_grid(net, image, spec, crit, n_cells=16, max_cells=64)
    f = up.falsify(net, image, spec, crit, m=200, seed=4)
    assert g["verdict"] in ("Holds", "Unknown")
    if g["verdict"] == "Holds":
        assert f["verdict"] != "Violated"
    p = up.certify_probabilistic(net, image, spec, crit, alpha=0.01, m=64, seed=5)
    assert p["verdict"] in ("Holds", "Unknown")


def test_usn_stats_decomposition():
    net = small_net()
    image, _ = up.generate_scene(5, 16, 16, 4)
    spec = up.PerturbationSpec(up.PerturbationKind.brightness, 0.02)
    _, images = up.sample(spec, image, 16, seed=2)
    s = up.usn_stats(net, image, images, 1)
    total = np.sum(s["per_neuron_variance"] + s["per_neuron_unbiased"] ** 2)
    assert total == pytest.approx(s["smooth"], rel=1e-9, abs=1e-15)
    assert np.sum(s["per_neuron_unbiased"]) <= s["unbiased"] + 1e-12
    assert np.all(s["importance"] >= 0)


def test_wasserstein_and_schedule():
    assert up.w2_discrete([0.0], [1.0], [1.0], [1.0]) == pytest.approx(1.0)
    assert up.w2_discrete([0.0, 1.0], [0.5, 0.5], [0.0, 1.0], [0.5, 0.5]) == pytest.approx(0.0)
    assert up.rho_at(0, 0.4, 4, 2, 10, 2) == 0.0
    assert up.rho_at(6, 0.4, 4, 2, 10, 2) == pytest.approx(0.2)
    assert up.rho_at(11, 0.4, 4, 2, 10, 2) == pytest.approx(0.4)


def test_random_prune_and_checkpoint_round_trip(tmp_path):
    net = small_net()
    pruned = net.prune_random(0.5, seed=3)
    assert pruned.active_channels[:4] == [1, 1, 2, 2]
    assert pruned.compact().parameter_count < net.parameter_count
    path = tmp_path / "model.json"
    pruned.save(path)
    loaded = up.Network.load(path)
    image, _ = up.generate_scene(7, 16, 16, 4)
    np.testing.assert_array_equal(loaded.predict(image), pruned.predict(image))
    assert math.isfinite(loaded.lipschitz_to_output(0))
