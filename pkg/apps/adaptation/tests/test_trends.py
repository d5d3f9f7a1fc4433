import csv
import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from apps.adaptation.exceptions import PreconditionError
from apps.adaptation.trends import (
    SeedResult, domain_gap_check, generator_check, median_dsc, render_summary, self_training_check,
    summary_rows, trend_checks, write_summary_csv,
)

NAMES = {
    'raw-source': 'Raw source w/o translation',
    'unet-iter0': 'U-net w/o ST',
    'resnet-iter0': 'ResNet w/o ST',
    'resnet-iter1': 'ResNet w/ ST iter1',
    'resnet-iter2': 'ResNet w/ ST iter2',
    'resnet-iter3': 'ResNet w/ ST iter3',
}


def seed_result(seed, **scores):
    keys = {key.replace('_', '-'): value for key, value in scores.items()}
    return SeedResult(seed, {key: NAMES[key] for key in keys}, keys)


# три сида: разрыв закрыт в сидах 0 и 1, медианы iter0..3 = 0.65, 0.66, 0.64, 0.68
RESULTS = [
    seed_result(0, raw_source=0.30, unet_iter0=0.60, resnet_iter0=0.70,
                resnet_iter1=0.72, resnet_iter2=0.73, resnet_iter3=0.75),
    seed_result(1, raw_source=0.40, unet_iter0=0.66, resnet_iter0=0.65,
                resnet_iter1=0.66, resnet_iter2=0.64, resnet_iter3=0.68),
    seed_result(2, raw_source=0.60, unet_iter0=0.45, resnet_iter0=0.50,
                resnet_iter1=0.55, resnet_iter2=0.56, resnet_iter3=0.58),
]


class MedianTests(SimpleTestCase):
    def test_median_over_seeds(self):
        self.assertEqual(median_dsc(RESULTS, 'resnet-iter0'), 0.65)
        self.assertEqual(median_dsc(RESULTS, 'unet-iter0'), 0.60)

    def test_variant_missing_in_one_run(self):
        partial = RESULTS[:2] + [seed_result(2, raw_source=0.6, resnet_iter0=0.5)]
        self.assertIsNone(median_dsc(partial, 'resnet-iter3'))
        self.assertIsNone(median_dsc([], 'resnet-iter0'))


class DomainGapTests(SimpleTestCase):
    def test_two_of_three_seeds_suffice(self):
        check = domain_gap_check(RESULTS, 'resnet')
        self.assertTrue(check.holds)
        self.assertIn('2 of 3 seeds (0, 1)', check.line)
        self.assertTrue(check.line.endswith(': holds'))

    def test_one_of_three_is_a_warning(self):
        results = [RESULTS[0], RESULTS[2], seed_result(3, raw_source=0.55, resnet_iter0=0.7)]
        check = domain_gap_check(results, 'resnet')
        self.assertFalse(check.holds)
        self.assertTrue(check.line.endswith('WARNING, violated'))

    def test_requires_both_variants(self):
        self.assertIsNone(domain_gap_check([seed_result(0, resnet_iter0=0.7)], 'resnet'))


class SelfTrainingTrendTests(SimpleTestCase):
    def test_last_iteration_gains_and_none_drop(self):
        check = self_training_check(RESULTS, 'resnet')
        self.assertTrue(check.holds)
        self.assertIn('iter3 0.6800 vs iter0 0.6500, lowest iter2 0.6400', check.line)

    def test_gain_below_threshold(self):
        results = [seed_result(k, resnet_iter0=0.70, resnet_iter1=0.705) for k in range(3)]
        self.assertFalse(self_training_check(results, 'resnet').holds)

    def test_intermediate_drop(self):
        results = [seed_result(k, resnet_iter0=0.70, resnet_iter1=0.60, resnet_iter2=0.80) for k in range(3)]
        check = self_training_check(results, 'resnet')
        self.assertFalse(check.holds)
        self.assertIn('lowest iter1 0.6000', check.line)

    def test_needs_two_iterations(self):
        self.assertIsNone(self_training_check([seed_result(0, resnet_iter0=0.7)], 'resnet'))


class GeneratorTrendTests(SimpleTestCase):
    def test_median_comparison(self):
        check = generator_check(RESULTS)
        self.assertTrue(check.holds)
        self.assertEqual(
            check.line,
            'Generator check (ResNet >= U-net w/o ST, median mean DSC over 3 seeds): 0.6500 vs 0.6000: holds',
        )

    def test_single_run_wording(self):
        check = generator_check([seed_result(0, unet_iter0=0.8, resnet_iter0=0.7)])
        self.assertEqual(check.line,
                         'Generator check (ResNet >= U-net w/o ST, mean DSC): 0.7000 vs 0.8000: WARNING, violated')

    def test_without_unet_runs(self):
        self.assertIsNone(generator_check([seed_result(0, resnet_iter0=0.7)]))
        self.assertEqual(len(trend_checks([seed_result(0, resnet_iter0=0.7)], 'resnet')), 0)


class SummaryTableTests(SimpleTestCase):
    def test_rows_and_medians(self):
        header, rows = summary_rows(RESULTS)
        self.assertEqual(header, ['Method', 'seed 0', 'seed 1', 'seed 2', 'median'])
        self.assertEqual(rows[0], ['Raw source w/o translation', '0.3000', '0.4000', '0.6000', '0.4000'])
        self.assertEqual([row[0] for row in rows], list(NAMES.values()))

    def test_missing_cell(self):
        _, rows = summary_rows([seed_result(0, resnet_iter0=0.7), seed_result(1, raw_source=0.3)])
        self.assertEqual(rows[0], ['ResNet w/o ST', '0.7000', '-', '-'])

    def test_render_and_csv(self):
        text = render_summary(RESULTS, trend_checks(RESULTS, 'resnet'))
        self.assertTrue(text.startswith('Method'))
        self.assertEqual(sum(1 for line in text.splitlines() if line.endswith(': holds')), 3)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_summary_csv(Path(tmp) / 'summary.csv', RESULTS)
            with open(path, newline='', encoding='utf-8') as fh:
                rows = list(csv.reader(fh))
        self.assertEqual(len(rows), 1 + len(NAMES))
        self.assertEqual(rows[-1], ['ResNet w/ ST iter3', '0.7500', '0.6800', '0.5800', '0.6800'])

    def test_empty(self):
        with self.assertRaises(PreconditionError):
            summary_rows([])
