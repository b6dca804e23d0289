import numpy as np
import pytest

from brfl.dataset import DatasetShard
from brfl.nn import (
    Hyperparams,
    LayerShape,
    ModelArch,
    ParamVector,
    TrainingDivergedError,
    evaluate_accuracy,
    evaluate_loss,
    flatten,
    init_model,
    local_train,
    unflatten,
    value_and_grad,
)

SMALL_ARCH = ModelArch((20, 8, 5))


def _random_shard(rng, n, dim=20, classes=5):
    return DatasetShard(
        rng.random((n, dim)).astype(np.float32),
        rng.integers(0, classes, n).astype(np.int64),
    )


def _fd_gradient(params, images, labels, h=1e-6):
    """Central finite differences of the loss; the independent oracle."""
    base = params.values.astype(np.float64)
    grad = np.zeros_like(base)
    for i in range(len(base)):
        bumped = base.copy()
        bumped[i] = base[i] + h
        up, _ = value_and_grad(ParamVector(bumped, params.shapes), images, labels)
        bumped[i] = base[i] - h
        down, _ = value_and_grad(ParamVector(bumped, params.shapes), images, labels)
        grad[i] = (up - down) / (2 * h)
    return grad


class TestInitModel:
    def test_deterministic_for_fixed_seed(self):
        arch = ModelArch((784, 16, 10))
        a = init_model(arch, 7)
        b = init_model(arch, 7)
        assert np.array_equal(a.values, b.values)

    def test_param_count(self):
        arch = ModelArch((784, 16, 10))
        assert arch.param_count == 784 * 16 + 16 + 16 * 10 + 10 == 12730
        assert len(init_model(arch, 3)) == 12730

    def test_different_seeds_differ(self):
        arch = ModelArch((784, 16, 10))
        a = init_model(arch, 1)
        b = init_model(arch, 2)
        assert not np.array_equal(a.values, b.values)

    def test_biases_zero_and_float32(self):
        pv = init_model(SMALL_ARCH, 0)
        assert pv.values.dtype == np.float32
        w_size = 20 * 8
        assert np.all(pv.values[w_size : w_size + 8] == 0.0)

    def test_rejects_bad_arch(self):
        with pytest.raises(ValueError):
            ModelArch((784,))
        with pytest.raises(ValueError):
            ModelArch((784, 0, 10))


class TestFlatten:
    def test_concatenation_order(self):
        shapes = (LayerShape(1, 2, has_bias=False), LayerShape(1, 1, has_bias=False))
        pv = ParamVector(np.array([1.0, 2.0, 3.0]), shapes)
        assert flatten(pv).tolist() == [1.0, 2.0, 3.0]

    def test_round_trip(self):
        pv = init_model(SMALL_ARCH, 11)
        again = unflatten(flatten(pv), pv.shapes)
        assert np.array_equal(again.values, pv.values)
        assert again.shapes == pv.shapes

    def test_equal_flatten_means_equal_params(self):
        a = init_model(SMALL_ARCH, 5)
        b = unflatten(flatten(a).copy(), a.shapes)
        assert np.array_equal(a.values, b.values)

    def test_length_validation(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(3), (LayerShape(2, 2),))

    def test_rejects_non_finite(self):
        values = np.zeros(5, dtype=np.float32)
        values[2] = np.nan
        with pytest.raises(ValueError):
            ParamVector(values, (LayerShape(1, 5, has_bias=False),))


class TestGradients:
    def test_matches_finite_differences_on_random_probes(self):
        # 100 (param, sample) probes in float64 against the central-difference oracle
        rng = np.random.default_rng(123)
        arch = ModelArch((6, 4, 3))
        checked = 0
        for trial in range(10):
            values = rng.normal(0, 0.5, arch.param_count)
            pv = ParamVector(values, arch.layer_shapes)
            images = rng.random((1, 6))
            labels = rng.integers(0, 3, 1)
            _, grad = value_and_grad(pv, images, labels)
            fd = _fd_gradient(pv, images, labels)
            idx = rng.choice(arch.param_count, 10, replace=False)
            for i in idx:
                denom = max(abs(fd[i]), 1e-4)
                assert abs(grad[i] - fd[i]) / denom < 1e-4
                checked += 1
        assert checked >= 100

    def test_loss_decreases_with_sgd_step(self):
        rng = np.random.default_rng(5)
        pv = init_model(SMALL_ARCH, 9)
        shard = _random_shard(rng, 30)
        loss0, grad = value_and_grad(pv, shard.images, shard.labels)
        stepped = ParamVector(pv.values - 0.1 * grad, pv.shapes)
        loss1, _ = value_and_grad(stepped, shard.images, shard.labels)
        assert loss1 < loss0


class TestLocalTrain:
    def test_zero_learning_rate_is_identity(self):
        rng = np.random.default_rng(2)
        pv = init_model(SMALL_ARCH, 1)
        shard = _random_shard(rng, 25)
        hp = Hyperparams(learning_rate=0.0, local_epochs=2)
        out = local_train(pv, shard, hp, seed=4)
        assert np.array_equal(out.values, pv.values)

    def test_single_sample_single_step_matches_fd_gradient(self):
        rng = np.random.default_rng(8)
        pv = init_model(SMALL_ARCH, 3)
        shard = _random_shard(rng, 1)
        hp = Hyperparams(batch_size=1, local_epochs=1, learning_rate=0.01)
        out = local_train(pv, shard, hp, seed=0)
        recovered = (pv.values.astype(np.float64) - out.values.astype(np.float64)) / 0.01
        fd = _fd_gradient(
            ParamVector(pv.values.astype(np.float64), pv.shapes), shard.images, shard.labels
        )
        assert np.linalg.norm(recovered - fd) / np.linalg.norm(fd) < 1e-4

    def test_loss_decreases_monotonically_over_epochs(self, synth_root):
        from brfl.sim import load_dataset_dir

        train, _ = load_dataset_dir(synth_root, "mnist")
        shard = DatasetShard(train.images[:600], train.labels[:600])
        pv = init_model(ModelArch((784, 32, 10)), 17)
        losses = [evaluate_loss(pv, shard)]
        for epochs in range(1, 6):
            hp = Hyperparams(local_epochs=epochs)
            out = local_train(pv, shard, hp, seed=99)
            losses.append(evaluate_loss(out, shard))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        pv = init_model(SMALL_ARCH, 6)
        shard = _random_shard(rng, 40)
        hp = Hyperparams(local_epochs=2)
        a = local_train(pv, shard, hp, seed=5)
        b = local_train(pv, shard, hp, seed=5)
        assert np.array_equal(a.values, b.values)

    def test_empty_shard_rejected(self):
        pv = init_model(SMALL_ARCH, 6)
        empty = DatasetShard(np.zeros((0, 20), dtype=np.float32), np.zeros(0, dtype=np.int64))
        with pytest.raises(ValueError):
            local_train(pv, empty, Hyperparams(), seed=0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_detected(self):
        rng = np.random.default_rng(4)
        shard = _random_shard(rng, 10)
        huge = np.full(SMALL_ARCH.param_count, 1e20, dtype=np.float32)
        pv = ParamVector(huge, SMALL_ARCH.layer_shapes)
        with pytest.raises(TrainingDivergedError):
            local_train(pv, shard, Hyperparams(learning_rate=10.0), seed=0)


class TestEvaluateAccuracy:
    def test_constant_logits_tie_break_to_lowest_class(self):
        shapes = (LayerShape(4, 10),)
        pv = ParamVector(np.zeros(4 * 10 + 10, dtype=np.float32), shapes)
        images = np.random.default_rng(0).random((50, 4)).astype(np.float32)
        labels = np.repeat(np.arange(10), 5)
        shard = DatasetShard(images, labels)
        assert evaluate_accuracy(pv, shard) == pytest.approx(0.1)

    def test_perfect_predictor(self):
        # identity-ish map: logit i reads feature i, so label == argmax by construction
        shapes = (LayerShape(5, 5, has_bias=False),)
        pv = ParamVector(np.eye(5, dtype=np.float32).ravel(), shapes)
        images = np.eye(5, dtype=np.float32)
        shard = DatasetShard(images, np.arange(5))
        assert evaluate_accuracy(pv, shard) == 1.0

    def test_counting(self):
        shapes = (LayerShape(2, 2, has_bias=False),)
        pv = ParamVector(np.array([1.0, 0.0, 0.0, 1.0], dtype=np.float32), shapes)
        images = np.array([[1, 0]] * 8, dtype=np.float32)
        labels = np.array([0, 0, 0, 1, 1, 1, 1, 1])
        assert evaluate_accuracy(pv, DatasetShard(images, labels)) == pytest.approx(3 / 8)

    def test_bounds(self):
        rng = np.random.default_rng(10)
        for seed in range(5):
            pv = init_model(SMALL_ARCH, seed)
            shard = _random_shard(rng, 17)
            acc = evaluate_accuracy(pv, shard)
            assert 0.0 <= acc <= 1.0

    def test_empty_rejected(self):
        pv = init_model(SMALL_ARCH, 0)
        empty = DatasetShard(np.zeros((0, 20), dtype=np.float32), np.zeros(0, dtype=np.int64))
        with pytest.raises(ValueError):
            evaluate_accuracy(pv, empty)
