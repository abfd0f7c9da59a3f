import functools
import unittest

import numpy as np

from kd_tsasr.library import scoring


def recursive_distance(a, b):
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
    return d(len(a), len(b))


def report(seed, average, system='x'):
    return scoring.ScoreReport(system=system, seed=seed, condition_ter={0.0: average},
                               average=average)


class TestEditDistance(unittest.TestCase):

    def test_identical(self):
        self.assertEqual(scoring.edit_distance([1, 2, 3], [1, 2, 3]), (0, 0, 0, 0))
        self.assertEqual(scoring.edit_distance([], []), (0, 0, 0, 0))

    def test_single_substitution(self):
        self.assertEqual(scoring.edit_distance([1, 9, 3], [1, 2, 3]), (1, 1, 0, 0))

    def test_insertions_and_deletions(self):
        self.assertEqual(scoring.edit_distance([1, 2, 3, 4], [1, 2, 3]), (1, 0, 1, 0))
        self.assertEqual(scoring.edit_distance([1, 3], [1, 2, 3]), (1, 0, 0, 1))
        self.assertEqual(scoring.edit_distance([], [4, 5]), (2, 0, 0, 2))

    def test_matches_recursive_definition(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            a = tuple(int(t) for t in rng.integers(1, 4, size=int(rng.integers(0, 7))))
            b = tuple(int(t) for t in rng.integers(1, 4, size=int(rng.integers(0, 7))))
            counts = scoring.edit_distance(a, b)
            self.assertEqual(counts.distance, recursive_distance(a, b))
            self.assertEqual(counts.distance,
                             counts.substitutions + counts.insertions + counts.deletions)
            self.assertEqual(len(a), len(b) - counts.deletions + counts.insertions)

    def test_metric_properties(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b, c = (tuple(int(t) for t in rng.integers(1, 3, size=int(rng.integers(0, 5))))
                       for _ in range(3))
            ab = scoring.edit_distance(a, b).distance
            self.assertEqual(ab, scoring.edit_distance(b, a).distance)
            self.assertEqual(ab == 0, a == b)
            self.assertLessEqual(scoring.edit_distance(a, c).distance,
                                 ab + scoring.edit_distance(b, c).distance)


class TestScoreSplit(unittest.TestCase):

    def test_pooled_and_per_condition(self):
        refs = {'a': (1, 2, 3, 4, 5), 'b': (1, 2, 3, 4, 5), 'c': (1, 1)}
        hyps = {'a': (1, 2, 3, 4, 6), 'b': (1, 2, 3, 4, 5), 'c': (2,)}
        conditions = {'a': 0.0, 'b': 0.0, 'c': 10.0}
        result = scoring.score_split(hyps, refs, conditions, system='BO2', seed=4)
        self.assertAlmostEqual(result.condition_ter[0.0], 10.0)
        self.assertAlmostEqual(result.condition_ter[10.0], 100.0)
        self.assertAlmostEqual(result.average, 100.0 * 3 / 12)
        self.assertEqual(list(result.condition_ter), [0.0, 10.0])
        self.assertEqual(result.utterances, {0.0: 2, 10.0: 1})
        self.assertEqual((result.substitutions, result.insertions, result.deletions), (2, 0, 1))
        self.assertEqual(result.edits, 3)
        self.assertEqual((result.system, result.seed), ('BO2', 4))

    def test_twenty_percent(self):
        refs = {'u': (1, 2, 3, 4, 5)}
        result = scoring.score_split({'u': (1, 2, 3, 4)}, refs, {'u': None})
        self.assertAlmostEqual(result.average, 20.0)
        self.assertEqual(list(result.condition_ter), [None])

    def test_mismatched_ids_rejected(self):
        with self.assertRaisesRegex(ValueError, 'missing'):
            scoring.score_split({'a': (1,)}, {'a': (1,), 'b': (2,)}, {})
        with self.assertRaises(ValueError):
            scoring.score_split({'a': (1,), 'z': (1,)}, {'a': (1,)}, {})

    def test_empty_references_rejected(self):
        with self.assertRaises(ValueError):
            scoring.score_split({'a': ()}, {'a': ()}, {})


class TestComparison(unittest.TestCase):

    def test_relative_reduction(self):
        self.assertAlmostEqual(round(scoring.relative_reduction(21.2, 19.2), 1), 9.4)
        self.assertAlmostEqual(round(scoring.relative_reduction(15.8, 15.0), 1), 5.1)
        self.assertEqual(scoring.relative_reduction(0.0, 3.0), 0.0)

    def test_compare_systems(self):
        a = [report(0, 20.0), report(1, 10.0), report(2, 12.0)]
        b = [report(2, 12.0), report(0, 15.0), report(1, 11.0)]
        c = scoring.compare_systems(a, b)
        self.assertEqual(c.seeds, (0, 1, 2))
        self.assertEqual((c.wins_a, c.wins_b, c.ties), (1, 1, 1))
        self.assertAlmostEqual(c.mean_a, 14.0)
        self.assertAlmostEqual(c.mean_b, 38.0 / 3.0)
        self.assertAlmostEqual(c.relative_reduction, (14.0 - 38.0 / 3.0) / 14.0 * 100.0)

    def test_seed_sets_must_match(self):
        with self.assertRaises(ValueError):
            scoring.compare_systems([report(0, 1.0)], [report(1, 1.0)])
        with self.assertRaises(ValueError):
            scoring.compare_systems([], [])


class TestTables(unittest.TestCase):

    def setUp(self):
        reports = [scoring.ScoreReport('BO2', s, {0.0: 30.0 + s, 10.0: 20.0}, 25.0 + s)
                   for s in (0, 1)]
        self.rows = [
            scoring.table_row('BS2', 'streaming', 'TS-RNNT', 0.0, reports),
            scoring.table_row('BO2', 'offline', 'TS-RNNT', 0.0, reports),
            scoring.table_row('PO*', 'offline', 'KD (dev lambda)', None, reports, best_lambda=0.1),
        ]

    def test_row_means(self):
        row = self.rows[1]
        self.assertEqual(row.condition_ter, {0.0: 30.5, 10.0: 20.0})
        self.assertEqual(row.average, 25.5)
        self.assertEqual(row.seeds, 2)
        with self.assertRaises(ValueError):
            scoring.table_row('X', 'offline', '', None, [])

    def test_csv(self):
        lines = scoring.format_csv(self.rows).splitlines()
        self.assertEqual(lines[0],
                         'system,mode,description,lambda,snr0,snr10,avg,seeds,best_lambda')
        self.assertEqual(lines[2], 'BO2,offline,TS-RNNT,0,30.50,20.00,25.50,2,-')
        self.assertEqual(lines[3], 'PO*,offline,KD (dev lambda),-,30.50,20.00,25.50,2,0.1')

    def test_table_orders_offline_first(self):
        comparison = scoring.compare_systems(
            [report(0, 20.0), report(1, 10.0)], [report(0, 15.0), report(1, 10.0)])
        text = scoring.format_table(self.rows, {'offline TS-RNNT vs KD (dev lambda)': comparison})
        lines = text.splitlines()
        self.assertTrue(lines[0].startswith('ID'))
        self.assertIn('0dB', lines[0])
        self.assertLess(text.index('[offline]'), text.index('[streaming]'))
        self.assertLess(text.index('PO*'), text.index('BS2'))
        self.assertEqual(lines[-1], 'offline TS-RNNT vs KD (dev lambda): 15.00 -> 12.50 '
                                    '(16.7% relative, wins 1/2)')
        self.assertEqual(scoring.format_table([]), '')


if __name__ == "__main__":
    unittest.main()
