import os
import tempfile
import unittest

import numpy as np

from kd_tsasr.library import checkpoint
from kd_tsasr.library import transducer
from kd_tsasr.library.diffcore import ParamStore
from kd_tsasr.library.errors import ConfigError, ConfigHashMismatch
from tiny_models import FEATURES, MODEL, VOCAB


class TestContainer(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_arrays_and_metadata_round_trip(self):
        path = os.path.join(self.tmp.name, 'nested', 'a.ckpt')
        arrays = {'b.vec': np.arange(3.0), 'a.mat': np.array([[1.5, -2.0], [0.25, 1e-300]]),
                  'c.scalar': np.array(7.0)}
        checkpoint.save_container(path, arrays, {'config_hash': 'abc', 'seed': 2})
        loaded, metadata = checkpoint.load_container(path)
        self.assertEqual(sorted(loaded), sorted(arrays))
        for name, value in arrays.items():
            self.assertEqual(loaded[name].shape, value.shape)
            np.testing.assert_array_equal(loaded[name], value)
        self.assertEqual(metadata, {'config_hash': 'abc', 'seed': 2})
        self.assertEqual(os.listdir(os.path.dirname(path)), ['a.ckpt'])

    def test_foreign_and_truncated_files(self):
        path = os.path.join(self.tmp.name, 'x.ckpt')
        with open(path, 'wb') as f:
            f.write(b'something else')
        with self.assertRaises(ValueError):
            checkpoint.load_container(path)

        checkpoint.save_container(path, {'w': np.ones(16)}, {})
        with open(path, 'rb') as f:
            data = f.read()
        with open(path, 'wb') as f:
            f.write(data[:-8])
        with self.assertRaises(ValueError):
            checkpoint.load_container(path)


class TestStore(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = os.path.join(self.tmp.name, 'teacher.ckpt')

    def test_model_round_trip_keeps_frozen_groups(self):
        model = transducer.init_transducer(0, FEATURES, MODEL, VOCAB)
        model.store.freeze(['pred'])
        checkpoint.save_store(self.path, model.store, {'config_hash': 'h1', 'seed': 0})
        store, metadata = checkpoint.load_store(self.path, expected_hash='h1')
        self.assertEqual(store.names(), model.store.names())
        self.assertEqual(store.frozen_groups, {'pred'})
        self.assertEqual(metadata['frozen_groups'], ['pred'])
        for name in store.names():
            np.testing.assert_array_equal(store.params[name], model.store.params[name])

    def test_hash_mismatch_refuses_to_load(self):
        store = ParamStore()
        store.add('w.x', np.ones(2))
        checkpoint.save_store(self.path, store, {'config_hash': 'old', 'seed': 0})
        with self.assertRaises(ConfigHashMismatch) as ctx:
            checkpoint.load_store(self.path, expected_hash='new')
        self.assertIsInstance(ctx.exception, ConfigError)
        self.assertEqual((ctx.exception.expected, ctx.exception.found), ('new', 'old'))
        # No expectation means no check.
        checkpoint.load_store(self.path)


if __name__ == "__main__":
    unittest.main()
