import contextlib
import dataclasses
import io
import os
import tempfile
import unittest
from unittest import mock

import yaml

from kd_tsasr import implementation
from kd_tsasr.main import main as run_cli
from kd_tsasr.library import corpus
from kd_tsasr.library import distill
from kd_tsasr.library import speaker
from kd_tsasr.library import tse
from kd_tsasr.library.config import config_hash
from kd_tsasr.library.errors import EXIT_CONFIG, EXIT_ERRORS, EXIT_OK, ConfigHashMismatch
from kd_tsasr.library.errors import MissingArtifactError
from tiny_models import STREAMING, tiny_experiment

SMALL_CORPUS = ['corpus.train_utterances=4', 'corpus.dev_utterances=2',
                'corpus.test_utterances_per_snr=2', 'corpus.test_snrs=[0, 10]']


class TestHypothesisFiles(unittest.TestCase):

    def test_round_trip_with_header(self):
        hyps = {'b': (2, 1), 'a': (), 'c': (1,)}
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'hyps', 'test_BO2.tsv')
            implementation.write_hypotheses(path, hyps, 'abc123', seed=3)
            with open(path) as f:
                lines = f.read().splitlines()
            self.assertEqual(lines, ['# config_hash=abc123 seed=3', 'a\t', 'b\t2 1', 'c\t1'])
            self.assertEqual(implementation.read_hypotheses(path, 'abc123'), hyps)
            self.assertEqual(implementation.read_hypotheses(path), hyps)
            with self.assertRaises(ConfigHashMismatch):
                implementation.read_hypotheses(path, 'other')

    def test_require(self):
        with self.assertRaises(MissingArtifactError) as ctx:
            implementation.require('/nonexistent/teacher.ckpt', 'train-student')
        self.assertEqual(ctx.exception.step, 'train-student')


class TestSystems(unittest.TestCase):

    def test_report_order(self):
        specs = implementation.system_specs((0.5, 0.1))
        self.assertEqual([s.system for s in specs],
                         ['BO1', 'BO2', 'PO1', 'PO2', 'BS1', 'BS2', 'PS1', 'PS2'])
        self.assertTrue(specs[0].is_cascade)
        self.assertEqual(specs[1].lam, 0.0)
        self.assertEqual(specs[7], implementation.SystemSpec('PS2', 'streaming', 'TS-RNNT + KD',
                                                             0.1))

    def test_student_name(self):
        self.assertEqual(implementation.student_name('offline', 0.1), 'student_offline_lam0.1')
        self.assertEqual(implementation.student_name('streaming', 0.0), 'student_streaming_lam0')


class TestPipeline(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.config = tiny_experiment(output_dir=cls.tmp.name)
        cls.paths = implementation.ArtifactPaths(cls.tmp.name)
        cls.errors = implementation.run_pipeline(cls.config)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def _read(self, path, mode='r'):
        with open(path, mode) as f:
            return f.read()

    def test_artifacts(self):
        self.assertIsInstance(self.errors, list)
        for name in ('teacher', 'teacher_streaming', 'extractor', 'extractor_causal',
                     'student_offline_lam0', 'student_offline_lam0.5', 'student_streaming_lam0.1'):
            self.assertTrue(os.path.exists(self.paths.model(0, name)), name)
            self.assertTrue(os.path.exists(self.paths.training_log(0, name)), name)
        for spec in implementation.system_specs(self.config.train.lambdas):
            self.assertTrue(os.path.exists(self.paths.hyps(0, spec.system)), spec.system)
        self.assertTrue(os.path.exists(self.paths.hyps(0, 'PS1', 'dev')))

    def test_report(self):
        lines = self._read(self.paths.report_csv).splitlines()
        self.assertEqual(len(lines), 1 + 8 + 2)
        self.assertTrue(lines[0].startswith('system,mode,description,lambda,snr0,snr10'))
        self.assertEqual([line.split(',')[0] for line in lines[1:]],
                         ['BO1', 'BO2', 'PO1', 'PO2', 'PO*', 'BS1', 'BS2', 'PS1', 'PS2', 'PS*'])
        meta = yaml.safe_load(self._read(self.paths.run_meta))
        self.assertEqual(meta['config_hash'], config_hash(self.config))
        for mode in implementation.MODES:
            self.assertIn(meta['best_lambda'][mode][0], self.config.train.lambdas)
        self.assertEqual(meta['per_seed'][0]['streaming_latency_ms'], 12.0)
        self.assertEqual(sorted(meta['per_seed'][0]['speaker_cosine']), ['BO2', 'PO1', 'PO2'])
        self.assertIn('streaming cascade vs TS-RNNT', meta['comparisons'])
        improvement = meta['per_seed'][0]['extractor_si_snr_improvement_db']
        self.assertEqual(meta['causal_extractor_at_most_offline'],
                         int(improvement['streaming'] <= improvement['offline']))
        echo = yaml.safe_load(self._read(self.paths.config_echo))
        self.assertEqual(echo['train']['lambdas'], [0.5, 0.1])
        self.assertEqual(echo['seeds'], [0])

    def test_checkpoints_reload_as_their_kind(self):
        stamp = config_hash(self.config)
        model, metadata = implementation.load_model(
            self.paths.model(0, 'student_streaming_lam0.5'), self.config, stamp)
        self.assertIsInstance(model, speaker.TargetSpeakerModel)
        self.assertEqual(metadata['lambda'], 0.5)
        self.assertEqual(model.asr.streaming, STREAMING)
        self.assertFalse(model.store.fully_frozen)
        teacher, metadata = implementation.load_model(self.paths.model(0, 'teacher'),
                                                      self.config, stamp)
        self.assertTrue(teacher.store.fully_frozen)
        self.assertIsNone(teacher.streaming)
        extractor, metadata = implementation.load_model(self.paths.model(0, 'extractor_causal'),
                                                        self.config, stamp)
        self.assertTrue(extractor.causal)

    def test_rerun_trains_nothing_and_rewrites_same_report(self):
        before = {name: self._read(self.paths.model(0, name), 'rb')
                  for name in ('teacher', 'student_offline_lam0.1')}
        report = self._read(self.paths.report_txt)
        fail = mock.Mock(side_effect=AssertionError('retrained'))
        with mock.patch.object(distill, 'train_teacher', fail), \
                mock.patch.object(distill, 'train_student', fail), \
                mock.patch.object(tse, 'train_extractor', fail):
            implementation.run_pipeline(self.config)
        fail.assert_not_called()
        for name, data in before.items():
            self.assertEqual(self._read(self.paths.model(0, name), 'rb'), data)
        self.assertEqual(self._read(self.paths.report_txt), report)
        rows = implementation.build_report(self.config)
        self.assertEqual(len(rows), 10)

    def test_changed_config_refuses_stale_artifacts(self):
        changed = dataclasses.replace(self.config, decode=dataclasses.replace(
            self.config.decode, beam=3))
        with self.assertRaises(ConfigHashMismatch):
            implementation.run_pipeline(changed)
        other_corpus = dataclasses.replace(self.config, corpus=dataclasses.replace(
            self.config.corpus, seed=9))
        with self.assertRaises(ConfigHashMismatch):
            implementation.prepare_corpus(other_corpus, self.paths.corpus_dir)


class TestCommandLine(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.base = ['--set', f'output_dir={self.tmp.name}']
        for override in SMALL_CORPUS:
            self.base += ['--set', override]

    def test_corpus_then_score(self):
        self.assertEqual(run_cli(self.base + ['corpus']), EXIT_OK)
        corpus_dir = implementation.ArtifactPaths(self.tmp.name).corpus_dir
        split = os.path.join(corpus_dir, 'test_snr10.bin')
        _, records = corpus.read_split(split)
        hyps = {r.utt_id: r.transcript for r in records}
        hyps[records[0].utt_id] = records[0].transcript + (1,)
        hyp_path = os.path.join(self.tmp.name, 'hyps.tsv')
        with open(hyp_path, 'w') as f:
            f.write(implementation.format_hypotheses(hyps))
        out = io.StringIO()
        with contextlib.redirect_stdout(out):
            code = run_cli(self.base + ['score', '--hyps', hyp_path, '--input', split])
        self.assertEqual(code, EXIT_OK)
        lines = out.getvalue().splitlines()
        self.assertTrue(lines[0].startswith('10dB\t'))
        self.assertIn('I=1', lines[-1])

    def test_config_error_exit_code(self):
        self.assertEqual(run_cli(self.base + ['--set', 'train.lambdas=[0]', 'report']),
                         EXIT_CONFIG)
        self.assertEqual(run_cli(self.base + ['--set', 'nope.key=1', 'report']), EXIT_CONFIG)

    def test_missing_artifact_exit_code(self):
        self.assertEqual(run_cli(self.base + ['report']), EXIT_ERRORS)
        self.assertEqual(run_cli(self.base + ['train-student', '--lambda', '0.1']), EXIT_ERRORS)


if __name__ == "__main__":
    unittest.main()
