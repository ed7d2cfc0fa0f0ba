from __future__ import annotations

import math

import numpy as np
import pytest

from autodiff import RngStream
from data import Dataset
from errors import ConfigError, ShapeMismatchError
from models import (
    accuracy,
    analytic_eval,
    analytic_loss,
    build_model,
    evaluate,
    f1_macro,
    parse_arch,
    recompute_bn_stats,
)


def test_parse_arch() -> None:
    spec = parse_arch("mlp[2-16-16-2]")
    assert spec.name == "mlp"
    assert spec.dims == (2, 16, 16, 2)
    assert str(spec) == "mlp[2-16-16-2]"


@pytest.mark.parametrize("spec", ["resnet[2-2]", "mlp[2-0-2]", "mlp(2)", "linear[2-3-4]"])
def test_bad_arch_specs_are_config_errors(spec) -> None:
    with pytest.raises(ConfigError):
        build_model(spec, RngStream(0))


def test_layouts_name_segments_by_layer() -> None:
    model, params = build_model("tinyconv[4-3]", RngStream(0), image_side=6)
    assert model.layout.names == [
        "conv1.weight", "conv1.bias", "bn1.gamma", "bn1.beta", "fc.weight", "fc.bias",
    ]
    assert model.layout.segment("conv1.weight").shape == (4, 1, 3, 3)
    np.testing.assert_array_equal(params.view("bn1.gamma"), np.ones(4))
    np.testing.assert_array_equal(params.view("fc.bias"), np.zeros(3))
    assert model.bn_layers == ["bn1"]


def test_initialization_is_seeded() -> None:
    _, first = build_model("mlp[2-8-2]", RngStream(3))
    _, again = build_model("mlp[2-8-2]", RngStream(3))
    _, other = build_model("mlp[2-8-2]", RngStream(4))
    np.testing.assert_array_equal(first.values, again.values)
    assert not np.array_equal(first.values, other.values)
    bound = math.sqrt(6.0 / 2)
    assert np.all(np.abs(first.view("fc1.weight")) <= bound)


def test_quadratic_value_and_gradient() -> None:
    value, grad = analytic_eval(analytic_loss("quadratic", dim=2, curvature=3.0), [1.0, -2.0])
    assert value == pytest.approx(7.5)
    np.testing.assert_allclose(grad, [3.0, -6.0])


def test_asymmetric_valley_is_sharp_on_the_left() -> None:
    loss = analytic_loss("asymmetric-valley-1d")
    assert analytic_eval(loss, [-0.1])[0] == pytest.approx(0.5)
    assert analytic_eval(loss, [0.1])[0] == pytest.approx(0.005)
    np.testing.assert_allclose(analytic_eval(loss, [-0.1])[1], [-10.0])


@pytest.mark.parametrize("center", [-1.0, 1.0])
def test_bimodal_minima_are_exact_critical_points(center) -> None:
    value, grad = analytic_eval(analytic_loss("sharp-flat-bimodal-1d"), [center])
    assert value == 0.0
    assert grad[0] == 0.0


def test_bimodal_gradient_matches_central_differences() -> None:
    loss = analytic_loss("sharp-flat-bimodal-1d")
    for theta in (-1.2, -0.95, -0.5, 0.3, 1.7):
        numeric = (analytic_eval(loss, [theta + 1e-6])[0] - analytic_eval(loss, [theta - 1e-6])[0]) / 2e-6
        assert analytic_eval(loss, [theta])[1][0] == pytest.approx(numeric, rel=1e-6, abs=1e-9)


def test_rosenbrock_minimum() -> None:
    value, grad = analytic_eval(analytic_loss("rosenbrock-2d"), [1.0, 1.0])
    assert value == 0.0
    np.testing.assert_array_equal(grad, [0.0, 0.0])


def test_analytic_loss_rejects_unknown_shape_and_dimension() -> None:
    with pytest.raises(ConfigError):
        analytic_loss("quadratic", width=2.0)
    with pytest.raises(ShapeMismatchError):
        analytic_eval(analytic_loss("rosenbrock-2d"), [1.0])


def test_metrics() -> None:
    predictions = np.array([0, 1, 1, 2])
    labels = np.array([0, 1, 2, 2])
    assert accuracy(predictions, labels) == 0.75
    # per-class F1: 1, 2/3, 2/3
    assert f1_macro(predictions, labels) == pytest.approx((1 + 2 / 3 + 2 / 3) / 3)


def test_recompute_bn_stats_uses_the_full_train_split(moons, mlpbn) -> None:
    model, params = mlpbn
    state = recompute_bn_stats(model, params, moons)
    assert len(state) == 1
    assert state.count == moons.split_indices("train").size
    train = moons.inputs[moons.split_indices("train")]
    hidden = train @ params.view("fc1.weight").T + params.view("fc1.bias")
    mean, var = state["bn1"]
    np.testing.assert_allclose(mean, hidden.mean(axis=0), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(var, hidden.var(axis=0), rtol=1e-12, atol=1e-14)


def test_recompute_bn_stats_is_idempotent(moons, mlpbn) -> None:
    model, params = mlpbn
    first = recompute_bn_stats(model, params, moons)
    second = recompute_bn_stats(model, params, moons)
    assert first.count == second.count
    for name in model.bn_layers:
        np.testing.assert_array_equal(first[name][0], second[name][0])
        np.testing.assert_array_equal(first[name][1], second[name][1])


def test_recompute_bn_stats_on_constant_inputs(mlpbn) -> None:
    model, params = mlpbn
    data = Dataset(np.tile([0.3, -1.2], (10, 1)), np.zeros(10, dtype=np.int64),
                   {"train": range(8), "val": [8], "test": [9]}, provenance="constant")
    mean, var = recompute_bn_stats(model, params, data)["bn1"]
    constant = params.view("fc1.weight") @ np.array([0.3, -1.2]) + params.view("fc1.bias")
    np.testing.assert_allclose(mean, constant, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(var, 0.0, atol=1e-24)
    assert evaluate(model, params, data, "test").nonfinite is False


def test_recompute_bn_stats_is_empty_without_batch_norm(moons, mlp) -> None:
    model, params = mlp
    assert recompute_bn_stats(model, params, moons).is_empty


def test_evaluate_is_pure_and_deterministic(moons, mlpbn) -> None:
    model, params = mlpbn
    first = evaluate(model, params, moons, "test")
    second = evaluate(model, params, moons, "test")
    assert first == second
    assert 0.0 <= first.metric <= 1.0
    assert not first.nonfinite


def test_evaluate_flags_non_finite_losses(make_analytic, unit_data) -> None:
    model, _ = make_analytic("quadratic", [0.0])
    result = evaluate(model, model.params([1e200]), unit_data, "val")
    assert result.nonfinite
    assert math.isnan(result.loss)


def test_evaluate_rejects_unknown_split(moons, mlpbn) -> None:
    model, params = mlpbn
    with pytest.raises(ConfigError):
        evaluate(model, params, moons, "holdout")
