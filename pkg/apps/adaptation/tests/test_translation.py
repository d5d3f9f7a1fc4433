import csv
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase

from apps.adaptation.exceptions import (
    IncompatibleModelError, MissingInputError, PreconditionError, ShapeMismatchError,
)
from apps.adaptation.networks import GENERATOR, ParamsModule, build_patchgan_discriminator
from apps.adaptation.translation import (
    HISTORY_COLUMNS, CycleGANModels, CycleGANOptimizers, ImagePool, ImagePools, TranslationConfig,
    build_cyclegan, build_generator, cyclegan_step, generator_objective, is_finite_history,
    load_generator, lr_schedule, pool_query,
    save_cyclegan, train_translation, translate_volume, volumes_to_slices, write_history,
)
from apps.adaptation.volumes import Volume3D

TINY = TranslationConfig(
    epochs_const=1, epochs_decay=1, batch_size=2, pool_size=2, slice_size=32,
    base_width=4, n_res_blocks=1, unet_down=3, disc_width=4, disc_layers=2, seed=3,
)


class IdentityGenerator(ParamsModule):
    arch = 'identity'
    role = GENERATOR

    def __init__(self):
        super().__init__(0, in_channels=1, out_channels=1)

    def forward(self, x):
        return x


def random_slices(seed, n, size=32):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, size, size)).astype(np.float32)


class LrScheduleTests(SimpleTestCase):
    cfg = TranslationConfig()

    def test_full_scale_defaults(self):
        self.assertEqual(lr_schedule(1, self.cfg), 1.5e-4)
        self.assertEqual(lr_schedule(100, self.cfg), 1.5e-4)
        # точное значение формулы; 1.5e-4 * 1 / 100 == 1.4999999999999998e-06 в float64
        self.assertEqual(lr_schedule(150, self.cfg), 1.5e-4 * 50 / 100)
        self.assertEqual(lr_schedule(199, self.cfg), 1.5e-4 * 1 / 100)
        self.assertEqual(lr_schedule(200, self.cfg), 1.5e-4 * 1 / 100)
        self.assertAlmostEqual(lr_schedule(150, self.cfg), 7.5e-5, places=15)
        self.assertAlmostEqual(lr_schedule(200, self.cfg), 1.5e-6, places=15)

    def test_monotone_decay(self):
        values = [lr_schedule(e, self.cfg) for e in range(1, 201)]
        self.assertTrue(all(a >= b for a, b in zip(values, values[1:])))
        self.assertTrue(all(a > b for a, b in zip(values[99:198], values[100:199])))
        self.assertGreater(values[-1], 0.0)

    def test_out_of_range(self):
        for epoch in (0, 201, -3):
            with self.assertRaises(PreconditionError):
                lr_schedule(epoch, self.cfg)


class ConfigTests(SimpleTestCase):
    def test_defaults(self):
        cfg = TranslationConfig()
        self.assertEqual((cfg.lambda_adv, cfg.lambda_cyc, cfg.lambda_id), (1.0, 10.0, 5.0))
        self.assertEqual((cfg.batch_size, cfg.pool_size, cfg.total_epochs), (10, 50, 200))

    def test_invalid_values(self):
        for changes in ({'lambda_cyc': -1.0}, {'batch_size': 0}, {'slice_size': 30}, {'generator': 'vit'}):
            with self.assertRaises(PreconditionError):
                TranslationConfig(**changes)

    def test_sizes_that_collapse_the_bottleneck(self):
        for changes in ({'slice_size': 4}, {'slice_size': 32, 'disc_layers': 3},
                        {'generator': 'unet', 'slice_size': 64, 'unet_down': 7}):
            with self.subTest(**changes):
                with self.assertRaises(PreconditionError):
                    TranslationConfig(**changes)
        self.assertEqual(TranslationConfig(slice_size=12, disc_layers=1).slice_size, 12)


class ImagePoolTests(SimpleTestCase):
    def test_never_exceeds_capacity(self):
        pool = ImagePool(capacity=3, seed=0)
        for i in range(10):
            out = pool_query(pool, torch.full((2, 1, 4, 4), float(i)))
            self.assertEqual(tuple(out.shape), (2, 1, 4, 4))
            self.assertLessEqual(len(pool), 3)
        self.assertEqual(len(pool), 3)

    def test_fill_phase_returns_fresh(self):
        pool = ImagePool(capacity=4, seed=0)
        fresh = torch.randn(4, 1, 4, 4)
        self.assertTrue(torch.equal(pool.query(fresh), fresh))

    def test_zero_capacity_passthrough(self):
        pool = ImagePool(capacity=0)
        fresh = torch.randn(3, 1, 4, 4)
        self.assertTrue(torch.equal(pool.query(fresh), fresh))
        self.assertEqual(len(pool), 0)

    def test_returns_stored_images_after_fill(self):
        pool = ImagePool(capacity=2, seed=1)
        pool.query(torch.zeros(2, 1, 2, 2))
        seen = torch.cat([pool.query(torch.ones(1, 1, 2, 2)) for _ in range(20)])
        self.assertTrue(bool(seen.flatten(1).eq(0).all(dim=1).any()))


class CycleGANStepTests(SimpleTestCase):
    def models(self, generator_factory):
        return CycleGANModels(
            g_ab=generator_factory(), g_ba=generator_factory(),
            d_a=build_patchgan_discriminator(4, 2, seed=1), d_b=build_patchgan_discriminator(4, 2, seed=2),
        )

    def test_objective_weights(self):
        self.assertAlmostEqual(generator_objective(0.5, 0.2, 0.1, TranslationConfig()), 3.0, places=12)

    def test_identity_generators_on_identical_domains(self):
        models = self.models(IdentityGenerator)
        batch = torch.from_numpy(random_slices(0, 2)).unsqueeze(1)
        losses = cyclegan_step(batch, batch.clone(), models, ImagePools(ImagePool(2), ImagePool(2)),
                               CycleGANOptimizers.for_models(models), TINY, 1e-3)
        self.assertEqual(losses.gen_cyc, 0.0)
        self.assertEqual(losses.gen_id, 0.0)
        self.assertAlmostEqual(losses.gen_total, losses.gen_adv, places=6)

    def test_total_decomposes(self):
        models = build_cyclegan(TINY)
        a = torch.from_numpy(random_slices(1, 2)).unsqueeze(1)
        b = torch.from_numpy(random_slices(2, 2)).unsqueeze(1)
        losses = cyclegan_step(a, b, models, ImagePools(ImagePool(2), ImagePool(2)),
                               CycleGANOptimizers.for_models(models), TINY, 1e-3)
        expected = generator_objective(losses.gen_adv, losses.gen_cyc, losses.gen_id, TINY)
        self.assertEqual(losses.gen_total, expected)
        self.assertGreater(losses.disc_a, 0.0)

    def test_shape_mismatch(self):
        models = self.models(IdentityGenerator)
        with self.assertRaises(ShapeMismatchError):
            cyclegan_step(torch.zeros(1, 1, 32, 32), torch.zeros(1, 1, 24, 24), models,
                          ImagePools(ImagePool(2), ImagePool(2)), CycleGANOptimizers.for_models(models), TINY, 1e-3)


class TrainTranslationTests(SimpleTestCase):
    def test_history_and_determinism(self):
        source, target = random_slices(3, 5), random_slices(4, 3)
        first = train_translation(source, target, TINY)
        second = train_translation(source, target, TINY)
        self.assertEqual(len(first.history), TINY.total_epochs)
        self.assertEqual([h.lr for h in first.history], [lr_schedule(e, TINY) for e in (1, 2)])
        self.assertEqual(first.history, second.history)
        self.assertTrue(is_finite_history(first.history))
        for p, q in zip(first.g_ab.parameters(), second.g_ab.parameters()):
            self.assertTrue(torch.equal(p, q))

    def test_unet_generator(self):
        result = train_translation(random_slices(5, 2), random_slices(6, 2), replace(TINY, generator='unet'))
        self.assertEqual(result.g_ab.arch, 'unet_generator')

    def test_empty_domain(self):
        with self.assertRaises(PreconditionError):
            train_translation(np.zeros((0, 32, 32)), random_slices(0, 2), TINY)

    def test_history_file_and_checkpoints(self):
        result = train_translation(random_slices(7, 2), random_slices(8, 2), TINY)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_history(Path(tmp) / 'history.csv', result.history)
            with open(path, encoding='utf-8') as fh:
                rows = list(csv.reader(fh))
            self.assertEqual(rows[0], HISTORY_COLUMNS)
            self.assertEqual(len(rows), 1 + TINY.total_epochs)

            save_cyclegan(Path(tmp) / 'checkpoints', result.models)
            generator = load_generator(Path(tmp) / 'checkpoints')
            for p, q in zip(generator.parameters(), result.g_ab.parameters()):
                self.assertTrue(torch.equal(p, q))
            with self.assertRaises(IncompatibleModelError):
                load_generator(Path(tmp) / 'checkpoints', 'd_a')
            with self.assertRaises(MissingInputError):
                load_generator(Path(tmp) / 'missing')


class TranslateVolumeTests(SimpleTestCase):
    def test_preserves_geometry(self):
        vol = Volume3D(np.random.default_rng(0).normal(size=(20, 24, 3)), (0.5, 0.5, 1.5), (1.0, 2.0, 3.0))
        out = translate_volume(vol, IdentityGenerator(), TINY)
        self.assertEqual(out.shape, vol.shape)
        self.assertEqual(out.spacing, vol.spacing)
        self.assertEqual(out.origin, vol.origin)

    def test_generator_output_range(self):
        vol = Volume3D(np.random.default_rng(1).normal(size=(16, 16, 2)))
        out = translate_volume(vol, build_generator(TINY, seed=1), TINY)
        # бикубическое увеличение может чуть выйти за [-1, 1]
        self.assertLessEqual(float(np.abs(out.voxels).max()), 1.3)

    def test_rejects_discriminator(self):
        vol = Volume3D(np.zeros((8, 8, 1)))
        with self.assertRaises(IncompatibleModelError):
            translate_volume(vol, build_patchgan_discriminator(4, 1), TINY)

    def test_volumes_to_slices(self):
        vols = [Volume3D(np.random.default_rng(i).random((10, 12, n))) for i, n in enumerate((3, 2))]
        slices = volumes_to_slices(vols, 32)
        self.assertEqual(slices.shape, (5, 32, 32))
        self.assertEqual(slices.dtype, np.float32)
