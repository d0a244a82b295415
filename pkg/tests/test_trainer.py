import math

import numpy as np
import pytest

from einconv.datasets import synthetic_separable
from einconv.errors import ConfigError, DivergenceError
from einconv.trainer import (
    PRESETS,
    SGD,
    Adam,
    MomentumSGD,
    NetworkSpec,
    TrainConfig,
    evaluate,
    grad_network,
    load_network,
    make_optimizer,
    param_count,
    predict,
    save_network,
    train,
)


@pytest.fixture
def tiny_net():
    return NetworkSpec.from_recipe("Einconv(2,cp)-GAP-FC(2)-Softmax", (4, 4, 1), 2)


def test_recipe_shapes():
    net = NetworkSpec.from_recipe("Einconv(8)-MaxPool-Einconv(16)-MaxPool-FC(10)-Softmax", (28, 28, 1), 10)
    assert net.shapes() == [(28, 28, 1), (28, 28, 8), (14, 14, 8), (14, 14, 16), (7, 7, 16), (10,), (10,)]
    assert net.recipe == "Einconv(8)-MaxPool-Einconv(16)-MaxPool-FC(10)-Softmax"
    assert net.einconv_blocks() == [0, 2]


@pytest.mark.parametrize(
    "recipe",
    ["Einconv(8)-Dropout-FC(2)-Softmax", "Einconv(x)-FC(2)-Softmax", "FC-Softmax", "Einconv(4)-FC(2)"],
)
def test_bad_recipes(recipe):
    with pytest.raises(ConfigError):
        NetworkSpec.from_recipe(recipe, (8, 8, 1), 2)


def test_class_count_must_match_last_layer():
    with pytest.raises(ConfigError, match="classes"):
        NetworkSpec.from_recipe("Einconv(4)-GAP-FC(3)-Softmax", (8, 8, 1), 2)


def test_maxpool_too_deep():
    with pytest.raises(ConfigError):
        NetworkSpec.from_recipe("MaxPool-MaxPool-FC(2)-Softmax", (2, 2, 1), 2)


@pytest.mark.parametrize("name", list(PRESETS))
def test_presets_build(name):
    preset = PRESETS[name]
    spatial = (8,) * preset.ndim
    n_classes = 2 if name == "separable-mini" else 10
    net = NetworkSpec.from_preset(name, spatial + (1,), n_classes)
    assert net.shapes()[-1] == (n_classes,)
    assert param_count(net.init_params()) > 0


def test_unknown_preset():
    with pytest.raises(ConfigError, match="Unknown preset"):
        NetworkSpec.from_preset("vgg", (8, 8, 1), 10)


def test_init_params_is_deterministic(tiny_net):
    first, second = tiny_net.init_params(3), tiny_net.init_params(3)
    for a, b in zip(first, second):
        for key in a:
            np.testing.assert_array_equal(a[key], b[key])
    assert tiny_net.conv_param_count(first) == 4 * (3 + 3 + 1 + 2)


def test_train_config_validation():
    with pytest.raises(ConfigError, match="Invalid optimizer"):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)


def test_train_config_load(tmp_path):
    path = tmp_path / "train.toml"
    path.write_text('[train]\noptimizer = "sgd"\nlearning_rate = 0.1\nepochs = 3\n')
    cfg = TrainConfig.load(path)
    assert (cfg.optimizer, cfg.learning_rate, cfg.epochs) == ("sgd", 0.1, 3)
    assert isinstance(make_optimizer(cfg), SGD)


def test_train_config_load_errors(tmp_path):
    path = tmp_path / "train.toml"
    path.write_text("epochs = 3\nlayers = 2\n")
    with pytest.raises(ConfigError, match="unknown keys"):
        TrainConfig.load(path)
    path.write_text("epochs = [")
    with pytest.raises(ConfigError):
        TrainConfig.load(path)


def test_learning_rate_halving():
    cfg = TrainConfig(learning_rate=1.0, halve_every=2)
    assert [cfg.lr_at(e) for e in range(5)] == [1.0, 1.0, 0.5, 0.5, 0.25]
    assert TrainConfig(learning_rate=1.0).lr_at(100) == 1.0


def test_sgd_step_with_weight_decay():
    params = [{"w": np.array([1.0, -2.0])}]
    grads = [{"w": np.array([0.5, 0.5])}]
    (updated,) = SGD(0.1, weight_decay=0.1).step(params, grads)
    np.testing.assert_allclose(updated["w"], [1.0 - 0.1 * 0.6, -2.0 - 0.1 * 0.3])


def test_momentum_accumulates():
    opt = MomentumSGD(1.0, momentum=0.5)
    params = [{"w": np.zeros(1)}]
    grads = [{"w": np.ones(1)}]
    params = opt.step(params, grads)
    params = opt.step(params, grads)
    np.testing.assert_allclose(params[0]["w"], [-(1.0 + 1.5)])


def test_adam_first_step_moves_by_learning_rate():
    params = [{"w": np.array([0.0, 0.0])}]
    grads = [{"w": np.array([3.0, -0.01])}]
    (updated,) = Adam(0.1).step(params, grads)
    np.testing.assert_allclose(updated["w"], [-0.1, 0.1], rtol=1e-5)


def test_grad_network_matches_finite_differences(tiny_net):
    rng = np.random.default_rng(0)
    params = tiny_net.init_params(1)
    x = rng.random((3, 4, 4, 1))
    y = np.array([0, 1, 1])
    loss, grads, probs = grad_network(tiny_net, params, (x, y))
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0)

    eps = 1e-6
    for n, block in enumerate(params):
        for name, array in block.items():
            for idx in list(np.ndindex(array.shape))[:4]:
                bumped = [dict(b) for b in params]
                bumped[n][name] = array.copy()
                bumped[n][name][idx] += eps
                plus = grad_network(tiny_net, bumped, (x, y))[0]
                bumped[n][name][idx] -= 2 * eps
                minus = grad_network(tiny_net, bumped, (x, y))[0]
                assert grads[n][name][idx] == pytest.approx((plus - minus) / (2 * eps), rel=1e-4, abs=1e-8)


@pytest.mark.parametrize("optimizer", ["sgd", "momentum-sgd", "adam"])
def test_zero_learning_rate_keeps_params(tiny_net, optimizer):
    data = synthetic_separable(8, size=4)
    cfg = TrainConfig(optimizer=optimizer, learning_rate=0.0, weight_decay=0.0, epochs=2, batch_size=4)
    start = tiny_net.init_params(cfg.seed)
    result = train(tiny_net, data, cfg)
    for before, after in zip(start, result.params):
        for key in before:
            np.testing.assert_array_equal(before[key], after[key])


def test_training_lowers_the_loss(tiny_net):
    data = synthetic_separable(32, size=4, seed=0)
    test = synthetic_separable(16, size=4, seed=1)
    cfg = TrainConfig(learning_rate=0.05, epochs=10, batch_size=8)
    result = train(tiny_net, data, cfg, test=test)
    history = result.history_frame()
    assert list(history.columns) == ["epoch", "loss", "train_acc", "test_acc", "seconds"]
    assert len(history) == 10
    assert history["loss"].iloc[-1] < history["loss"].iloc[0]
    assert 0.0 <= result.final_test_acc <= 1.0

    again = train(tiny_net, data, cfg, test=test)
    np.testing.assert_array_equal(again.history_frame()["loss"], history["loss"])


def test_zero_epochs_gives_empty_history(tiny_net):
    result = train(tiny_net, synthetic_separable(4, size=4), TrainConfig(epochs=0))
    assert result.history_frame().empty
    assert math.isnan(result.final_test_acc)


def test_non_finite_loss_raises_divergence(tiny_net):
    params = tiny_net.init_params(0)
    params[-2]["weight"] = np.full_like(params[-2]["weight"], np.nan)
    with pytest.raises(DivergenceError) as info:
        train(tiny_net, synthetic_separable(4, size=4), TrainConfig(epochs=1), params=params)
    assert (info.value.epoch, info.value.step) == (0, 0)


def test_train_rejects_mismatched_data(tiny_net):
    with pytest.raises(ConfigError):
        train(tiny_net, synthetic_separable(4, size=6), TrainConfig(epochs=1))


def test_evaluate_empty_dataset(tiny_net):
    data = synthetic_separable(4, size=4)
    empty, _ = data.split(0)
    assert evaluate(tiny_net, tiny_net.init_params(), empty) == 0.0


def test_save_and_load_network(tiny_net, tmp_path):
    params = tiny_net.init_params(5)
    save_network(tiny_net, params, tmp_path / "ckpt")
    net, loaded = load_network(tmp_path / "ckpt")
    assert net.recipe == tiny_net.recipe
    x = synthetic_separable(4, size=4).images
    np.testing.assert_array_equal(predict(net, loaded, x), predict(tiny_net, params, x))


@pytest.mark.slow
def test_separable_preset_fits_its_training_set():
    net = NetworkSpec.from_preset("separable-mini", (8, 8, 1), 2)
    data = synthetic_separable(64, size=8, seed=0)
    cfg = TrainConfig(optimizer="adam", learning_rate=1e-2, weight_decay=0.0, epochs=50, batch_size=16)
    result = train(net, data, cfg)
    assert evaluate(net, result.params, data) == 1.0


def test_loss_does_not_rise_over_the_first_epochs():
    net = NetworkSpec.from_preset("separable-mini", (8, 8, 1), 2)
    data = synthetic_separable(32, size=8, seed=0)
    rising = 0
    for seed in range(5):
        cfg = TrainConfig(epochs=5, batch_size=16, seed=seed)
        losses = train(net, data, cfg).history_frame()["loss"]
        assert np.isfinite(losses).all()
        rising += int((losses.diff().dropna() > 0).any())
    assert rising <= 1
