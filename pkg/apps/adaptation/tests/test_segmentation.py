import csv
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase

from apps.adaptation.exceptions import (
    DimensionMismatchError, IncompatibleModelError, MissingInputError, PreconditionError,
)
from apps.adaptation.networks import build_patchgan_discriminator, build_segmenter_3d
from apps.adaptation.segmentation import (
    SegTrainConfig, load_segmenter, logits_to_labels, predict, save_segmenter, train_segmenter,
)
from apps.adaptation.tests.factories import make_cases
from apps.adaptation.volumes import LabelVolume, Volume3D

TINY = SegTrainConfig(epochs=3, lr=1e-2, batch_size=2, patch_size=(8, 8, 8), base_width=2, depth=2, seed=1)


class LogitsToLabelsTests(SimpleTestCase):
    def test_argmax(self):
        logits = np.array([0.1, 0.9, 0.3]).reshape(3, 1, 1, 1)
        self.assertEqual(int(logits_to_labels(logits)[0, 0, 0]), 1)

    def test_tie_goes_to_lowest_class(self):
        logits = np.array([0.7, 0.2, 0.7]).reshape(3, 1, 1, 1)
        self.assertEqual(int(logits_to_labels(logits)[0, 0, 0]), 0)


class TrainSegmenterTests(SimpleTestCase):
    def test_history_length_and_determinism(self):
        cases = make_cases(3)
        first = train_segmenter(cases, TINY)
        second = train_segmenter(cases, TINY)
        self.assertEqual(len(first.history), TINY.epochs)
        self.assertEqual(first.history, second.history)
        for p, q in zip(first.model.parameters(), second.model.parameters()):
            self.assertTrue(torch.equal(p, q))
        self.assertEqual(first.optim_state.t, TINY.epochs * 2)

    def test_loss_decreases(self):
        result = train_segmenter(make_cases(4, seed=2), replace(TINY, epochs=15, flips=False))
        self.assertLess(result.history[-1], result.history[0])

    def test_larger_and_smaller_volumes_fit_patch(self):
        cases = make_cases(1, shape=(12, 6, 9)) + make_cases(1, shape=(8, 8, 8))
        self.assertEqual(len(train_segmenter(cases, replace(TINY, epochs=1)).history), 1)

    def test_fine_tune_keeps_initial_model(self):
        base = train_segmenter(make_cases(2), replace(TINY, epochs=1))
        before = [p.clone() for p in base.model.parameters()]
        tuned = train_segmenter(make_cases(2, seed=5), replace(TINY, epochs=1),
                                init_model=base.model, init_state=base.optim_state)
        self.assertIsNot(tuned.model, base.model)
        self.assertEqual(tuned.optim_state.t, base.optim_state.t + 1)
        for p, q in zip(before, base.model.parameters()):
            self.assertTrue(torch.equal(p, q))

    def test_errors(self):
        with self.assertRaises(PreconditionError):
            train_segmenter([], TINY)
        image, _ = make_cases(1)[0]
        with self.assertRaises(DimensionMismatchError):
            train_segmenter([(image, LabelVolume(np.zeros((8, 8, 4))))], TINY)
        with self.assertRaises(PreconditionError):
            train_segmenter(make_cases(1), replace(TINY, n_classes=2))
        with self.assertRaises(IncompatibleModelError):
            train_segmenter(make_cases(1), TINY, init_model=build_segmenter_3d(2, 2, patch_size=(16, 16, 8)))

    def test_config_validation(self):
        with self.assertRaises(PreconditionError):
            SegTrainConfig(patch_size=(64, 64, 12))
        with self.assertRaises(PreconditionError):
            SegTrainConfig(epochs=-1)

    def test_patch_equal_to_downsampling_factor_is_rejected(self):
        with self.assertRaises(PreconditionError):
            SegTrainConfig(epochs=1, patch_size=(8, 8, 8), depth=3, base_width=2)
        with self.assertRaises(PreconditionError):
            replace(TINY, patch_size=(8, 8, 4))
        self.assertEqual(SegTrainConfig(patch_size=(16, 16, 16), depth=3).patch_size, (16, 16, 16))


class PredictTests(SimpleTestCase):
    model = build_segmenter_3d(2, 2, patch_size=(8, 8, 8), seed=3)

    def test_output_dims_equal_input(self):
        vol = Volume3D(np.random.default_rng(0).normal(size=(10, 9, 5)), (0.5, 0.5, 2.0), (1.0, 1.0, 1.0))
        labels = predict(vol, self.model)
        self.assertEqual(labels.shape, vol.shape)
        self.assertEqual(labels.spacing, vol.spacing)
        self.assertTrue(set(np.unique(labels.labels)) <= {0, 1, 2})

    def test_forced_padding_is_invisible(self):
        vol = Volume3D(np.random.default_rng(1).normal(size=(16, 8, 8)))
        self.assertEqual(predict(vol, self.model), predict(vol, self.model, force_padding=True))

    def test_pure_function(self):
        vol = Volume3D(np.random.default_rng(2).normal(size=(8, 8, 8)))
        self.assertEqual(predict(vol, self.model), predict(vol, self.model))

    def test_incompatible_model(self):
        with self.assertRaises(IncompatibleModelError):
            predict(Volume3D(np.zeros((8, 8, 8))), build_patchgan_discriminator(2, 1))


class SegmenterFilesTests(SimpleTestCase):
    def test_save_and_load(self):
        result = train_segmenter(make_cases(2), replace(TINY, epochs=2))
        with tempfile.TemporaryDirectory() as tmp:
            save_segmenter(Path(tmp) / 'seg', result)
            with open(Path(tmp) / 'seg' / 'history.csv', encoding='utf-8') as fh:
                rows = list(csv.reader(fh))
            model, state = load_segmenter(Path(tmp) / 'seg' / 'checkpoint')
            with self.assertRaises(MissingInputError):
                load_segmenter(Path(tmp) / 'nothing')
        self.assertEqual(rows[0], ['epoch', 'loss'])
        self.assertEqual(len(rows), 3)
        self.assertEqual(state.t, result.optim_state.t)
        vol = make_cases(1, seed=9)[0][0]
        self.assertEqual(predict(vol, model), predict(vol, result.model))
