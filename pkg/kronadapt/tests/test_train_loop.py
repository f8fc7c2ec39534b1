import dataclasses
import logging
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from kronadapt import training
from kronadapt.exceptions import DivergenceDetected, InvalidSpec


def setup_run(config):
    model = training.ToyAttentionModel.random(config.dim, template=config.adapter_spec(), seed=config.seed)
    task = training.TeacherStudentTask(model, target_std=config.target_std, seed=config.seed)
    return model, task.batches(config.batch_size)


def run(config):
    model, batches = setup_run(config)
    return model, training.train(model, batches, config)


# python -m unittest kronadapt.tests.test_train_loop
class TestTrainConfig(unittest.TestCase):

    def test_defaults(self):
        config = training.TrainConfig()
        self.assertEqual(config.learning_rate, 5e-4)
        self.assertEqual(config.steps, 1000)
        self.assertEqual(config.optimizer, 'adam')

    def test_bad_values(self):
        for kwargs in (
            {'learning_rate': 0},
            {'learning_rate': -1e-3},
            {'steps': -1},
            {'steps': 1.5},
            {'optimizer': 'lbfgs'},
            {'batch_size': 0},
            {'target_std': 0.0},
            {'seed': -3},
            {'seed': True},
            {'seed': 2.5},
            {'adapter': {'family': 'lora', 'rank': 2, 'seed': 3}},
        ):
            with self.subTest(**{k: repr(v) for k, v in kwargs.items()}):
                with self.assertRaises(InvalidSpec):
                    training.TrainConfig(**kwargs)

    def test_round_trip(self):
        config = training.TrainConfig(steps=5, optimizer='sgd', adapter={'family': 'lora', 'rank': 2})
        self.assertEqual(training.TrainConfig.from_dict(config.to_dict()), config)

    def test_unknown_field(self):
        with self.assertRaises(InvalidSpec):
            training.TrainConfig.from_dict({'steps': 3, 'momentum': 0.9})

    def test_adapter_spec(self):
        spec = training.TrainConfig(seed=4).adapter_spec()
        self.assertEqual(spec.family.value, 'krona')
        self.assertEqual((spec.a1, spec.a2, spec.seed), (2, 2, 4))


class TestOptimizers(unittest.TestCase):

    def test_sgd(self):
        opt = training.SGD(0.5)
        params = {'w': np.array([1.0, -2.0])}
        out = opt.step(params, {'w': np.array([2.0, 4.0])})
        assert_array_equal(out['w'], [0.0, -4.0])
        # inputs untouched
        assert_array_equal(params['w'], [1.0, -2.0])

    def test_adam_first_step(self):
        opt = training.Adam(0.01)
        out = opt.step({'w': np.array([1.0, 1.0])}, {'w': np.array([3.0, -0.5])})
        assert_allclose(out['w'], [0.99, 1.01], rtol=0, atol=1e-8)
        self.assertEqual(opt.t, 1)

    def test_adam_zero_gradient(self):
        opt = training.Adam(0.01)
        out = opt.step({'w': np.ones(2)}, {'w': np.zeros(2)})
        assert_array_equal(out['w'], np.ones(2))

    def test_bad_settings(self):
        with self.assertRaises(InvalidSpec):
            training.SGD(0.0)
        with self.assertRaises(InvalidSpec):
            training.Adam(0.1, beta1=1.0)
        with self.assertRaises(InvalidSpec):
            training.Adam(0.1, eps=0.0)

    def test_make_optimizer(self):
        self.assertIsInstance(training.make_optimizer(training.TrainConfig(optimizer='sgd')), training.SGD)
        adam = training.make_optimizer(training.TrainConfig(beta1=0.8))
        self.assertIsInstance(adam, training.Adam)
        self.assertEqual(adam.beta1, 0.8)


class TestHistory(unittest.TestCase):

    def test_moving_means(self):
        history = training.TrainHistory(losses=[1.0, 3.0, 2.0, 2.0, 9.0])
        assert_array_equal(history.moving_means(2), [2.0, 2.5, 2.0, 5.5])
        assert_array_equal(history.moving_means(5), [3.4])
        self.assertEqual(history.moving_means(6).shape, (0,))
        self.assertEqual(len(history), 5)
        with self.assertRaises(InvalidSpec):
            history.moving_means(0)

    def test_csv(self):
        history = training.TrainHistory(losses=[1.5, 0.25])
        self.assertEqual(history.to_csv(), 'step,loss\n0,1.5\n1,0.25\n')
        self.assertEqual(training.TrainHistory().to_csv(), 'step,loss\n')


class TestTask(unittest.TestCase):

    def setUp(self):
        config = training.TrainConfig(steps=0)
        self.model, _ = setup_run(config)
        self.task = training.TeacherStudentTask(self.model, seed=0)

    def test_hidden_shares_down_factors(self):
        for group in training.GROUPS:
            student = self.model.adapters[group]
            hidden = self.task.hidden.adapters[group]
            assert_array_equal(hidden.A, student.A)
            self.assertTrue(np.any(hidden.B != 0))
            assert_array_equal(student.B, np.zeros_like(student.B))

    def test_reproducible(self):
        first = next(self.task.batches(4))
        again = next(self.task.batches(4))
        assert_array_equal(first.z_t, again.z_t)
        assert_array_equal(first.eps, again.eps)
        self.assertEqual(first.z_t.shape, (4, 8))
        self.assertTrue(np.all((first.t >= 0) & (first.t < training.NUM_TIMESTEPS)))

    def test_realizable(self):
        batch = next(self.task.batches(4))
        self.assertEqual(training.denoise_loss(self.task.hidden, batch), 0.0)


class TestTrain(unittest.TestCase):

    def test_zero_steps(self):
        config = training.TrainConfig(steps=0)
        model, batches = setup_run(config)
        before = dict(model.adapters)
        history = training.train(model, batches, config)
        self.assertEqual(history.losses, [])
        for group in training.GROUPS:
            self.assertIs(model.adapters[group], before[group])
            self.assertEqual(history.module_deltas[group], 0.0)

    def test_converges(self):
        config = training.TrainConfig()
        _, history = run(config)
        self.assertEqual(len(history), 1000)
        self.assertLess(history.losses[-1], 0.1 * history.losses[0])
        means = history.moving_means(100)
        self.assertEqual(len(means), 901)
        slack = 0.01 * means[0]
        for earlier, later in zip(means, means[100:]):
            self.assertLessEqual(later, earlier + slack)
        self.assertLess(means[-1], means[0])
        for group in training.GROUPS:
            self.assertGreater(history.module_deltas[group], 0.0)

    def test_replay(self):
        config = training.TrainConfig(steps=200, seed=3)
        model_a, first = run(config)
        model_b, second = run(config)
        self.assertEqual(first.losses, second.losses)
        for group in training.GROUPS:
            assert_array_equal(model_a.adapters[group].A, model_b.adapters[group].A)
            assert_array_equal(model_a.adapters[group].B, model_b.adapters[group].B)

    def test_base_frozen(self):
        config = training.TrainConfig(steps=50)
        model, batches = setup_run(config)
        weights = {g: w.copy() for g, w in model.weights.items()}
        biases = {g: b.copy() for g, b in model.biases.items()}
        training.train(model, batches, config)
        for group in training.GROUPS:
            assert_array_equal(model.weights[group], weights[group])
            assert_array_equal(model.biases[group], biases[group])

    def test_equal_budget(self):
        # 2x2 ⊗ 4x4 and rank one on 8 x 8 both hold 16 parameters per layer
        for adapter in ({'family': 'krona', 'a1': 2, 'a2': 4}, {'family': 'lora', 'rank': 1}):
            config = training.TrainConfig(steps=300, adapter=adapter)
            with self.subTest(family=adapter['family']):
                _, history = run(config)
                self.assertEqual(len(history), 300)
                self.assertTrue(np.all(np.isfinite(history.losses)))
                self.assertLess(history.losses[-1], history.losses[0])

    def test_sgd(self):
        config = training.TrainConfig(steps=20, optimizer='sgd', learning_rate=0.05)
        _, history = run(config)
        self.assertEqual(len(history), 20)

    def test_divergence(self):
        config = training.TrainConfig(steps=100, learning_rate=1e9)
        model, batches = setup_run(config)
        with self.assertLogs('kronadapt.training.loop', logging.ERROR):
            with self.assertRaises(DivergenceDetected) as cm:
                training.train(model, batches, config)
        history = cm.exception.history
        self.assertLess(len(history), 100)
        self.assertEqual(cm.exception.params['step'], len(history))

    def test_logs_progress(self):
        config = training.TrainConfig(steps=3, log_every=1)
        model, batches = setup_run(config)
        with self.assertLogs('kronadapt.training.loop', logging.INFO) as cm:
            training.train(model, batches, config)
        self.assertTrue(any('step 2' in line for line in cm.output))

    def test_continue_history(self):
        config = training.TrainConfig(steps=4)
        model, batches = setup_run(config)
        history = training.train(model, batches, config)
        more = training.train(model, batches, dataclasses.replace(config, steps=2), history)
        self.assertIs(more, history)
        self.assertEqual(len(history), 6)
