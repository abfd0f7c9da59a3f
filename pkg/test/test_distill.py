import dataclasses
import unittest

import numpy as np

from kd_tsasr.library import corpus
from kd_tsasr.library import diffcore as dc
from kd_tsasr.library import distill
from kd_tsasr.library import speaker
from kd_tsasr.library import transducer
from kd_tsasr.library.config import ModelConfig, TrainConfig
from kd_tsasr.library.transducer import PosteriorLattice
from tiny_models import FEATURES, MODEL, VOCAB, random_log_probs, tiny_experiment


def naive_kd_loss(p, q):
    total = 0.0
    T, U1, K = p.shape
    for t in range(T):
        for u in range(U1):
            for k in range(K):
                total -= p[t, u, k] * np.log(q[t, u, k])
    return total


class TestKDLoss(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(11)

    def test_matches_triple_loop(self):
        for _ in range(50):
            shape = tuple(int(n) for n in self.rng.integers(1, 5, size=3))
            shape = shape[:2] + (max(shape[2], 2),)
            p = PosteriorLattice.from_log_probs(random_log_probs(self.rng, *shape))
            q = PosteriorLattice.from_log_probs(random_log_probs(self.rng, *shape))
            loss, _ = distill.kd_loss(p, q)
            self.assertAlmostEqual(loss, naive_kd_loss(p.probs, q.probs), delta=1e-12)

    def test_self_distillation_is_entropy(self):
        p = PosteriorLattice.from_log_probs(random_log_probs(self.rng, 3, 2, 4))
        self.assertAlmostEqual(distill.kd_loss(p, p)[0], distill.lattice_entropy(p), places=12)

    def test_gibbs_inequality(self):
        for _ in range(1000):
            p = PosteriorLattice.from_log_probs(random_log_probs(self.rng, 2, 2, 3))
            q = PosteriorLattice.from_log_probs(random_log_probs(self.rng, 2, 2, 3))
            self.assertGreaterEqual(distill.kd_loss(p, q)[0], distill.kd_loss(p, p)[0] - 1e-12)

    def test_gradients(self):
        p = PosteriorLattice.from_log_probs(random_log_probs(self.rng, 2, 3, 3))
        log_q = random_log_probs(self.rng, 2, 3, 3)
        _, grad_q = distill.kd_loss(p, PosteriorLattice.from_log_probs(log_q))
        np.testing.assert_allclose(grad_q, -p.probs / np.exp(log_q))

        leaf = dc.leaf(log_q)
        dc.backward(distill.kd_loss_node(p, PosteriorLattice(leaf)))

        def f(x):
            return distill.kd_loss(p, PosteriorLattice.from_log_probs(x))[0]
        numeric = dc.numeric_gradient(f, log_q)
        self.assertLess(dc.relative_error(leaf.grad, numeric), 1e-6)

    def test_shape_mismatch_rejected(self):
        p = PosteriorLattice.from_log_probs(random_log_probs(self.rng, 2, 2, 3))
        q = PosteriorLattice.from_log_probs(random_log_probs(self.rng, 3, 2, 3))
        with self.assertRaises(ValueError):
            distill.kd_loss(p, q)


class TestMultitaskObjective(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.config = tiny_experiment()
        cls.records = corpus.records_in_split(corpus.build_dataset(cls.config.corpus, 0),
                                              'train')

    def setUp(self):
        self.teacher = transducer.init_transducer(3, FEATURES, MODEL, VOCAB)
        self.teacher.store.freeze()
        self.student = speaker.init_target_speaker_model(4, FEATURES, MODEL, VOCAB)

    def test_lambda_zero_is_rnnt(self):
        record = self.records[0]
        terms = distill.multitask_objective(record, self.student, self.teacher, 0.0)
        rnnt = transducer.rnnt_loss(speaker.ts_lattice(record, self.student), record.transcript)
        self.assertEqual(float(terms.total.data), rnnt[0])
        self.assertGreater(terms.kd, 0.0)

    def test_total_combines_terms(self):
        record = self.records[1]
        terms = distill.multitask_objective(record, self.student, self.teacher, 0.1)
        self.assertAlmostEqual(float(terms.total.data), terms.rnnt + 0.1 * terms.kd, places=12)
        self.assertAlmostEqual(distill.multitask_loss(record, self.student, self.teacher, 0.1),
                               terms.rnnt + 0.1 * terms.kd, places=12)

    def test_teacher_gets_no_gradient(self):
        record = self.records[0]
        before = {n: v.copy() for n, v in self.teacher.store.params.items()}
        params = self.student.store.bind()
        dc.backward(distill.multitask_objective(record, self.student, self.teacher, 1.0,
                                                params).total)
        self.assertTrue(all(n.startswith(('asr_enc', 'pred', 'joint', 'spk_enc'))
                            for n in params.grads()))
        for name, grad in self.teacher.store.grads.items():
            self.assertEqual(float(np.abs(grad).sum()), 0.0, name)
            np.testing.assert_array_equal(self.teacher.store.params[name], before[name])

    def test_student_gradient(self):
        record = self.records[2]
        store = self.student.store
        params = store.bind()
        dc.backward(distill.multitask_objective(record, self.student, self.teacher, 0.5,
                                                params).total)
        grads = params.grads()
        for name in ('joint.out.W', 'spk_enc.out.b'):
            original = store.params[name].copy()

            def f(x, name=name):
                store.params[name][...] = x
                return distill.multitask_loss(record, self.student, self.teacher, 0.5)
            numeric = dc.numeric_gradient(f, original)
            store.params[name][...] = original
            self.assertLess(dc.relative_error(grads[name], numeric), 1e-4, name)

    def test_unfrozen_teacher_rejected(self):
        teacher = transducer.init_transducer(3, FEATURES, MODEL, VOCAB)
        with self.assertRaises(ValueError):
            distill.multitask_objective(self.records[0], self.student, teacher, 0.1)

    def test_negative_lambda_rejected(self):
        with self.assertRaises(ValueError):
            distill.multitask_objective(self.records[0], self.student, self.teacher, -0.1)
        with self.assertRaises(ValueError):
            distill.KDConfig(lam=-1.0)


class TestTrainers(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.config = tiny_experiment()
        cls.train = corpus.records_in_split(corpus.build_dataset(cls.config.corpus, 0), 'train')

    def _teacher(self):
        teacher = transducer.init_transducer(9, FEATURES, MODEL, VOCAB)
        teacher.store.freeze()
        return teacher

    def test_lambda_zero_matches_baseline_trainer(self):
        kd = distill.KDConfig.from_experiment(self.config, 0.0, seed=3, epochs=1)
        _, student_history = distill.train_student(self.train, self._teacher(), kd, self.config)
        _, baseline_history = distill.train_ts_baseline(self.train, kd, self.config)
        self.assertEqual(len(student_history.step_losses), len(baseline_history.step_losses))
        np.testing.assert_allclose(student_history.step_losses, baseline_history.step_losses,
                                   rtol=0, atol=1e-12)

    def test_teacher_training_uses_single_talker_views(self):
        model, history = distill.train_teacher(self.train, self.config, seed=0, epochs=1)
        self.assertEqual(len(history.epochs), 1)
        self.assertEqual(history.epochs[0].kd_loss, 0.0)
        self.assertFalse(model.conditioned)
        with self.assertRaises(ValueError):
            distill.train_teacher([], self.config, seed=0)

    def test_same_seed_gives_identical_teacher(self):
        a, _ = distill.train_teacher(self.train, self.config, seed=4, epochs=2)
        b, _ = distill.train_teacher(self.train, self.config, seed=4, epochs=2)
        self.assertEqual(a.store.names(), b.store.names())
        for name in a.store.names():
            np.testing.assert_array_equal(a.store.params[name], b.store.params[name], name)

    def test_student_requires_frozen_teacher(self):
        kd = distill.KDConfig.from_experiment(self.config, 0.1, seed=0, epochs=1)
        with self.assertRaises(ValueError):
            distill.train_student(self.train, transducer.init_transducer(0, FEATURES, MODEL, VOCAB),
                                  kd, self.config)


class TestTeacherLearning(unittest.TestCase):

    def test_dev_ter_drops_below_initial(self):
        config = tiny_experiment()
        config = dataclasses.replace(
            config,
            corpus=dataclasses.replace(config.corpus, segment_length=16, train_utterances=48,
                                       dev_utterances=12, token_length=(2, 3),
                                       snr_range=(20.0, 30.0)),
            model=ModelConfig(enc_dim=8, enc_blocks=1, pred_dim=8, joint_dim=8, spk_blocks=1),
            train=TrainConfig(epochs=20, learning_rate=0.05, batch_size=4, lambdas=(0.1,)))
        records = corpus.build_dataset(config.corpus, 0)
        train = corpus.records_in_split(records, 'train')
        dev = corpus.records_in_split(records, 'dev')
        initial = transducer.init_transducer(0, config.features, config.model, VOCAB)
        initial_ter = distill.ter_of(distill.transcribe_single_talker(dev, initial), dev)
        _, history = distill.train_teacher(train, config, seed=0, dev_records=dev)
        self.assertEqual(len(history.epochs), 20)
        self.assertLess(history.epochs[-1].ter, initial_ter)


class TestLambdaSelection(unittest.TestCase):

    def test_lowest_dev_ter_wins(self):
        self.assertEqual(distill.select_best_lambda({1.0: 20.0, 0.1: 15.0, 0.01: 18.0}), 0.1)

    def test_tie_goes_to_larger_lambda(self):
        self.assertEqual(distill.select_best_lambda({0.5: 10.0, 0.1: 10.0, 0.01: 12.0}), 0.5)

    def test_empty_rejected(self):
        with self.assertRaises(ValueError):
            distill.select_best_lambda({})

    def test_kd_config_from_experiment(self):
        config = tiny_experiment()
        kd = distill.KDConfig.from_experiment(config, 0.1, seed=7)
        self.assertEqual(kd.epochs, config.train.epochs)
        self.assertEqual(kd.batch_size, config.train.batch_size)
        self.assertEqual(kd.seed, 7)
        self.assertEqual(distill.KDConfig.from_experiment(config, 0.1, 7, epochs=1).epochs, 1)


if __name__ == "__main__":
    unittest.main()
