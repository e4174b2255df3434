"""Losses, SGD and the two training phases."""

import numpy as np
import pytest

from crffusion.frontend import ToyFrontEnd
from crffusion.fusion import FusionConfig, fuse
from crffusion.gradcheck import central_difference, relative_error, run_gradcheck
from crffusion.synth import synthesize_dataset
from crffusion.train import (
    Sgd,
    SgdConfig,
    TrainingFailure,
    finetune_loss,
    pretrain_loss,
    train_finetune,
    train_pretrain,
)


class TestLosses:
    def test_perfect_sides(self):
        d = np.random.default_rng(0).uniform(1, 3, (3, 3))
        assert pretrain_loss([d, d.copy()], d)[0] == 0.0

    def test_hand_values(self):
        assert pretrain_loss([np.ones((1, 2))], np.zeros((1, 2)))[0] == 2.0
        assert pretrain_loss([np.array([[2.0]]), np.array([[0.0]])], np.array([[1.0]]))[0] == 2.0
        assert finetune_loss(np.array([[3.0]]), np.array([[1.0]]))[0] == 4.0
        assert finetune_loss(np.full((2, 2), 1.5), np.full((2, 2), 1.5))[0] == 0.0

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        p, d = rng.normal(size=(7, 9)), rng.normal(size=(7, 9))
        total = 0.0
        for i in range(7):
            for j in range(9):
                total += (p[i, j] - d[i, j]) ** 2
        assert abs(finetune_loss(p, d)[0] - total) <= 1e-12 * total

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pretrain_loss([np.zeros((2, 2))], np.zeros((2, 3)))


class TestSgd:
    def test_plain_gradient_descent(self):
        p = np.array([1.0, -2.0, 0.5])
        g = np.array([0.3, 0.1, -0.7])
        params = {"w": p.copy()}
        Sgd(0.1, momentum=0.0, weight_decay=0.0).step(params, {"w": g})
        assert params["w"].tobytes() == (p - 0.1 * g).tobytes()

    def test_momentum_and_decay(self):
        params = {"w": np.array([2.0])}
        opt = Sgd(0.5, momentum=0.9, weight_decay=0.1)
        opt.step(params, {"w": np.array([1.0])})
        v1 = 1.0 + 0.1 * 2.0
        p1 = 2.0 - 0.5 * v1
        np.testing.assert_allclose(params["w"], [p1])
        opt.step(params, {"w": np.array([1.0])})
        v2 = 0.9 * v1 + 1.0 + 0.1 * p1
        np.testing.assert_allclose(params["w"], [p1 - 0.5 * v2])

    def test_bad_config(self):
        for kwargs in ({"momentum": 1.0}, {"weight_decay": -1}, {"learning_rate": -1}, {"batch_size": 0}):
            with pytest.raises(ValueError):
                SgdConfig(**({"learning_rate": 0.1} | kwargs))


@pytest.fixture(scope="module")
def small_data():
    return synthesize_dataset(2, 4, 16, 16, 2)


class TestPretrain:
    def test_zero_learning_rate(self, small_data):
        fe = ToyFrontEnd(2, seed=0, depth_offset=3.0)
        out, _ = train_pretrain(small_data, fe, SgdConfig(0.0, epochs=2))
        assert all(out.params[k].tobytes() == fe.params[k].tobytes() for k in fe.params)

    def test_loss_decreases_first_ten_epochs(self, small_data):
        fe = ToyFrontEnd(2, seed=0, depth_offset=3.0)
        # one sample means one momentum step per epoch; 1e-5 overshoots around epoch 9
        _, curve = train_pretrain(small_data[:1], fe, SgdConfig(5e-6, epochs=10, batch_size=1))
        assert all(b < a for a, b in zip(curve, curve[1:]))
        np.testing.assert_allclose(curve[0], 303.99, atol=0.01)

    def test_gradients(self, small_data):
        sample = small_data[0]
        fe = ToyFrontEnd(2, seed=3, depth_offset=3.0)
        sides, cache = fe.forward(sample.image)
        grads = fe.backward(cache, pretrain_loss(sides, sample.depth)[1])

        def loss():
            return pretrain_loss(fe.forward(sample.image)[0], sample.depth)[0]

        for name, value in fe.params.items():
            numeric = central_difference(loss, value)
            assert relative_error(grads[name], numeric, 1e-6 * np.abs(numeric).max()).max() <= 1e-4, name

    def test_divergence_names_epoch(self, small_data):
        fe = ToyFrontEnd(2, seed=0, depth_offset=3.0)
        with pytest.raises(TrainingFailure) as info:
            with np.errstate(all="ignore"):
                train_pretrain(small_data, fe, SgdConfig(10.0, epochs=50))
        assert info.value.phase == "pretrain" and info.value.epoch >= 1

    def test_log_file(self, small_data, tmp_path):
        train_pretrain(small_data, ToyFrontEnd(2), SgdConfig(1e-6, epochs=3), log_path=tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,phase,mean_loss,learning_rate"
        assert len(lines) == 4 and lines[1].startswith("1,pretrain,")


class TestFinetune:
    def test_zero_learning_rate_keeps_beta(self, small_data):
        config = FusionConfig(mode="cascade", scales=2, iterations=2)
        _, out, _ = train_finetune(small_data, ToyFrontEnd(2, depth_offset=3.0), config, SgdConfig(0.0, epochs=1))
        assert np.array_equal(out.beta, config.beta)

    @pytest.mark.parametrize("mode", ["multiscale", "cascade"])
    def test_beta_only_training_reduces_loss(self, small_data, mode):
        fe, _ = train_pretrain(small_data, ToyFrontEnd(2, depth_offset=3.0), SgdConfig(1e-5, epochs=20))
        config = FusionConfig(mode=mode, scales=2, iterations=3)

        def total(cfg):
            return sum(finetune_loss(fuse(fe.forward(s.image)[0], s.image, cfg).prediction, s.depth)[0]
                       for s in small_data)

        fe_out, tuned, _ = train_finetune(small_data, fe, config, SgdConfig(1e-6, epochs=5),
                                          freeze_frontend=True)
        assert all(np.array_equal(fe.params[k], fe_out.params[k]) for k in fe.params)
        assert total(tuned) < total(config)
        assert np.all(tuned.beta >= 0)

    def test_end_to_end_gradcheck_small(self):
        report = run_gradcheck(seed=3, size=12, scales=2, mode="cascade")
        assert report.passed, report.errors
