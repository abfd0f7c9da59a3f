import dataclasses
import unittest

import numpy as np

from kd_tsasr.library import corpus
from kd_tsasr.library import distill
from kd_tsasr.library import diffcore as dc
from kd_tsasr.library import speaker
from kd_tsasr.library import transducer
from kd_tsasr.library.config import StreamingConfig
from tiny_models import FEATURES, MODEL, VOCAB, tiny_experiment


class TestSpeakerEncoder(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        config = tiny_experiment()
        cls.records = corpus.build_dataset(config.corpus, 0)

    def setUp(self):
        self.model = speaker.init_target_speaker_model(0, FEATURES, MODEL, VOCAB)

    def _embedding(self, signal):
        return speaker.embed_speaker(transducer.extract_features(signal, FEATURES), self.model)

    def _embed_frames(self, frames):
        features = transducer.FeatureSequence(frames, FEATURES.window, FEATURES.hop)
        return speaker.embed_speaker(features, self.model).values

    def test_parameter_groups(self):
        self.assertEqual(self.model.store.groups(), ['asr_enc', 'joint', 'pred', 'spk_enc'])
        self.assertTrue(self.model.asr.conditioned)

    def test_embedding_shape_and_determinism(self):
        a = self._embedding(self.records[0].enrollment)
        b = self._embedding(self.records[0].enrollment)
        self.assertEqual(a.values.shape, (MODEL.enc_dim,))
        np.testing.assert_array_equal(a.values, b.values)

    def test_distinct_enrollments_differ(self):
        a = self._embedding(self.records[0].enrollment).values
        b = self._embedding(self.records[0].enrollment[::-1].copy()).values
        self.assertFalse(np.allclose(a, b))

    def test_repeated_frame_embeds_like_single_frame(self):
        frame = transducer.extract_features(self.records[0].enrollment, FEATURES).frames[:1]
        single = self._embed_frames(frame)
        np.testing.assert_allclose(self._embed_frames(np.repeat(frame, 5, axis=0)), single,
                                   rtol=0, atol=1e-12)

    def test_self_concatenated_enrollment_embeds_the_same(self):
        frames = transducer.extract_features(self.records[1].enrollment, FEATURES).frames
        np.testing.assert_allclose(self._embed_frames(np.concatenate([frames, frames])),
                                   self._embed_frames(frames), rtol=0, atol=1e-12)

    def test_empty_enrollment_rejected(self):
        with self.assertRaises(ValueError):
            speaker.speaker_encoder_graph(np.zeros((0, FEATURES.num_features)),
                                          self.model.store.bind(), 'spk_enc', MODEL.spk_blocks)

    def test_unconditioned_transducer_rejected(self):
        with self.assertRaises(ValueError):
            speaker.TargetSpeakerModel(transducer.init_transducer(0, FEATURES, MODEL, VOCAB))

    def test_cosine_similarity(self):
        v = np.array([1.0, 2.0, -1.0])
        self.assertAlmostEqual(speaker.cosine_similarity(v, 3.0 * v), 1.0)
        self.assertAlmostEqual(speaker.cosine_similarity(v, -v), -1.0)
        self.assertEqual(speaker.cosine_similarity(v, np.zeros(3)), 0.0)

    def test_separation_groups_pairs_by_speaker(self):
        records = corpus.records_in_split(self.records, 'train')
        separation = speaker.speaker_separation(records[:1] * 2, self.model)
        self.assertAlmostEqual(separation.same, 1.0)
        self.assertTrue(np.isnan(separation.different))
        mixed = speaker.speaker_separation(self.records, self.model)
        self.assertTrue(-1.0 <= mixed.different <= 1.0)
        self.assertAlmostEqual(mixed.margin, mixed.same - mixed.different)


class TestTrainedSpeakerEncoder(unittest.TestCase):

    def test_same_speaker_enrollments_are_closer(self):
        config = tiny_experiment()
        config = dataclasses.replace(
            config, corpus=dataclasses.replace(config.corpus, train_utterances=12))
        records = corpus.records_in_split(corpus.build_dataset(config.corpus, 0), 'train')
        kd = distill.KDConfig.from_experiment(config, 0.0, seed=0, epochs=2)
        model, _ = distill.train_ts_baseline(records, kd, config)
        separation = speaker.speaker_separation(records, model)
        self.assertGreater(separation.same, separation.different)


class TestTargetSpeakerLattice(unittest.TestCase):

    def setUp(self):
        config = tiny_experiment()
        self.records = corpus.build_dataset(config.corpus, 1)
        self.record = corpus.records_in_split(self.records, 'train')[0]
        self.model = speaker.init_target_speaker_model(2, FEATURES, MODEL, VOCAB)

    def test_lattice_matches_single_talker_shape(self):
        lattice = speaker.ts_lattice(self.record, self.model)
        teacher = transducer.init_transducer(0, FEATURES, MODEL, VOCAB)
        single = transducer.transducer_lattice(self.record.target_plus_noise,
                                               self.record.transcript, teacher)
        self.assertEqual(lattice.shape, single.shape)
        np.testing.assert_allclose(lattice.probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_enrollment_changes_lattice(self):
        other = next(r for r in self.records if r.target_speaker != self.record.target_speaker)
        swapped = dataclasses.replace(self.record, enrollment=other.enrollment)
        a = speaker.ts_lattice(self.record, self.model)
        b = speaker.ts_lattice(swapped, self.model)
        self.assertEqual(a.shape, b.shape)
        self.assertFalse(np.allclose(a.log_probs, b.log_probs))

    def test_all_ones_embedding_gives_unconditioned_lattice(self):
        features = transducer.extract_features(self.record.mixture, FEATURES)
        enc = transducer.encode(features, self.model.asr, conditioning=np.ones(MODEL.enc_dim))
        pred = transducer.predict(self.record.transcript, self.model.asr)
        conditioned = transducer.joint_lattice(enc, pred, self.model.asr)
        plain = transducer.TransducerModel(self.model.store, FEATURES, MODEL, VOCAB)
        unconditioned = transducer.transducer_lattice(self.record.mixture,
                                                      self.record.transcript, plain)
        np.testing.assert_array_equal(conditioned.log_probs, unconditioned.log_probs)

    def test_gradient_reaches_speaker_encoder(self):
        store = self.model.store
        transcript = self.record.transcript
        params = store.bind()
        dc.backward(transducer.rnnt_loss_node(speaker.ts_lattice(self.record, self.model, params),
                                              transcript))
        grads = params.grads()
        for name in ('spk_enc.out.W', 'spk_enc.input.b', 'asr_enc.input.W'):
            original = store.params[name].copy()

            def f(x, name=name):
                store.params[name][...] = x
                return transducer.rnnt_loss(speaker.ts_lattice(self.record, self.model),
                                            transcript)[0]
            numeric = dc.numeric_gradient(f, original)
            store.params[name][...] = original
            self.assertGreater(np.abs(grads[name]).max(), 0.0, name)
            self.assertLess(dc.relative_error(grads[name], numeric), 1e-4, name)

    def test_with_streaming_shares_parameters(self):
        streaming = self.model.with_streaming(StreamingConfig(chunk=1, history=0))
        self.assertIs(streaming.store, self.model.store)
        self.assertIsNotNone(streaming.asr.streaming)


if __name__ == "__main__":
    unittest.main()
