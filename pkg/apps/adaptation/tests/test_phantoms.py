import tempfile
from dataclasses import replace
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from apps.adaptation import phantoms
from apps.adaptation.exceptions import PhantomGenerationError, PreconditionError
from apps.adaptation.phantoms import DOMAIN_A, PhantomSpec, cohort_seeds, gen_case, gen_dataset
from apps.adaptation.volumes import DatasetManifest, load_labels


class GenCaseTests(SimpleTestCase):
    spec = PhantomSpec()

    def test_deterministic(self):
        first = gen_case(self.spec, 42, 'source')
        second = gen_case(self.spec, 42, 'source')
        self.assertEqual(first.image, second.image)
        self.assertEqual(first.labels, second.labels)

    def test_structures_present(self):
        for seed in range(5):
            case = gen_case(self.spec, seed, 'target')
            counts = np.bincount(case.labels.labels.ravel(), minlength=3)
            self.assertGreater(counts[0], 0)
            self.assertGreaterEqual(counts[1], 8)
            self.assertGreaterEqual(counts[2], 8)

    def test_geometry_shared_between_domains(self):
        source = gen_case(self.spec, 7, 'source')
        target = gen_case(self.spec, 7, 'target')
        self.assertEqual(source.labels, target.labels)
        self.assertFalse(np.array_equal(source.image.voxels, target.image.voxels))

    def test_geometry_independent_of_modality_map(self):
        brighter = replace(self.spec, source_map=replace(DOMAIN_A, tissue=0.2))
        self.assertEqual(gen_case(self.spec, 3, 'source').labels, gen_case(brighter, 3, 'source').labels)

    def test_tumor_contrast_gap(self):
        source = gen_case(self.spec, 11, 'source')
        target = gen_case(self.spec, 11, 'target')
        tumor = source.labels.mask(1)
        gap = abs(source.image.voxels[tumor].mean() - target.image.voxels[tumor].mean())
        self.assertGreaterEqual(gap, self.spec.contrast_gap)

    def test_intensities_within_bounds(self):
        low, high = self.spec.intensity_bounds
        for domain in ('source', 'target'):
            voxels = gen_case(self.spec, 5, domain).image.voxels
            self.assertTrue(np.all(np.isfinite(voxels)))
            self.assertGreaterEqual(voxels.min(), low)
            self.assertLessEqual(voxels.max(), high)

    def test_anisotropic_spacing(self):
        case = gen_case(self.spec, 0, 'source')
        self.assertEqual(case.image.shape, (64, 64, 16))
        self.assertEqual(case.image.spacing, (1.0, 1.0, 1.5))

    def test_placement_failure(self):
        empty = lambda coords, center, radius: np.zeros(coords[0].shape, dtype=bool)
        with mock.patch.object(phantoms, '_ball', side_effect=empty):
            with self.assertRaises(PhantomGenerationError):
                gen_case(replace(self.spec, max_retries=3), 0, 'source')


class PhantomSpecTests(SimpleTestCase):
    def test_contrast_gap_enforced(self):
        with self.assertRaises(PreconditionError):
            PhantomSpec(contrast_gap=0.9)

    def test_radii_must_fit(self):
        with self.assertRaises(PreconditionError):
            PhantomSpec(head_radii=(40.0, 24.0, 7.0))
        with self.assertRaises(PreconditionError):
            PhantomSpec(cochlea_radius=(0.5, 3.0))

    def test_unknown_domain(self):
        with self.assertRaises(PreconditionError):
            PhantomSpec().modality('other')


class GenDatasetTests(SimpleTestCase):
    def test_cohort_seeds_are_disjoint(self):
        source, target = cohort_seeds(7, 30, 40)
        self.assertEqual(len(source), 30)
        self.assertEqual(len(target), 40)
        self.assertFalse(set(source) & set(target))

    def test_layout_and_quarantine(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            manifest = gen_dataset(PhantomSpec(), 3, 2, 2, master_seed=7, out_dir=root, threads=2)
            self.assertEqual(len(manifest.entries), 7)
            self.assertEqual(len(manifest.select('source')), 3)
            self.assertEqual(len(manifest.select('target')), 4)
            self.assertTrue(all(e.label for e in manifest.select('source')))
            self.assertTrue(all(e.label is None for e in manifest.select('target')))
            self.assertFalse((root / 'labels' / 'target-train-000.nii').exists())

            stored = DatasetManifest.read(root / 'manifest.tsv')
            self.assertEqual(stored.entries, manifest.entries)
            sealed = DatasetManifest.read(root / 'quarantine' / 'manifest.tsv')
            self.assertEqual([e.case_id for e in sealed.entries],
                             ['target-train-000', 'target-train-001', 'target-eval-000', 'target-eval-001'])
            labels = load_labels(sealed.label_path(sealed.entries[0]))
            self.assertEqual(labels.shape, (64, 64, 16))
            self.assertTrue(sealed.image_path(sealed.entries[0]).exists())

    def test_same_seed_same_files(self):
        with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
            gen_dataset(PhantomSpec(), 1, 1, 1, master_seed=3, out_dir=Path(a))
            gen_dataset(PhantomSpec(), 1, 1, 1, master_seed=3, out_dir=Path(b), threads=3)
            files = sorted(p.relative_to(a) for p in Path(a).rglob('*') if p.is_file())
            self.assertTrue(files)
            for rel in files:
                self.assertEqual((Path(a) / rel).read_bytes(), (Path(b) / rel).read_bytes())

    def test_counts_must_be_positive(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(PreconditionError):
                gen_dataset(PhantomSpec(), 0, 1, 1, master_seed=0, out_dir=Path(tmp))
