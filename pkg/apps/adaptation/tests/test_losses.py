import torch
from django.test import SimpleTestCase

from apps.adaptation.exceptions import ShapeMismatchError
from apps.adaptation.losses import dice_ce, l1_loss, lsgan_loss, soft_dice


class AdversarialLossTests(SimpleTestCase):
    def test_lsgan_quarter(self):
        scores = torch.full((2, 1, 4, 4), 0.5)
        self.assertAlmostEqual(float(lsgan_loss(scores, 1)), 0.25, places=7)
        self.assertAlmostEqual(float(lsgan_loss(scores, 0)), 0.25, places=7)

    def test_lsgan_perfect(self):
        self.assertEqual(float(lsgan_loss(torch.ones(3, 1, 2, 2), 1)), 0.0)

    def test_lsgan_target(self):
        with self.assertRaises(ValueError):
            lsgan_loss(torch.zeros(1), 0.5)

    def test_l1(self):
        a = torch.tensor([0.0, 1.0, -1.0, 2.0])
        b = torch.tensor([1.0, 1.0, 1.0, 0.0])
        self.assertAlmostEqual(float(l1_loss(a, b)), 1.25, places=7)
        with self.assertRaises(ShapeMismatchError):
            l1_loss(a, torch.zeros(3))


class DiceCeTests(SimpleTestCase):
    def labels(self):
        labels = torch.zeros(2, 4, 4, 4, dtype=torch.long)
        labels[:, 1:3, 1:3, 1:3] = 1
        labels[:, 0, 0, 0] = 2
        return labels

    def test_optimum_near_zero(self):
        labels = self.labels()
        logits = torch.nn.functional.one_hot(labels, 3).movedim(-1, 1).float() * 50.0
        self.assertLess(float(dice_ce(logits, labels)), 1e-4)

    def test_wrong_prediction_is_worse(self):
        labels = self.labels()
        good = torch.nn.functional.one_hot(labels, 3).movedim(-1, 1).float() * 5.0
        bad = torch.nn.functional.one_hot((labels + 1) % 3, 3).movedim(-1, 1).float() * 5.0
        self.assertGreater(float(dice_ce(bad, labels)), float(dice_ce(good, labels)) + 1.0)

    def test_soft_dice_per_class(self):
        one_hot = torch.nn.functional.one_hot(self.labels(), 3).movedim(-1, 1).float()
        dice = soft_dice(one_hot, one_hot)
        self.assertEqual(tuple(dice.shape), (3,))
        self.assertTrue(torch.allclose(dice, torch.ones(3)))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            dice_ce(torch.zeros(1, 3, 4, 4, 4), torch.zeros(1, 4, 4, 2, dtype=torch.long))

    def test_gradients_against_finite_differences(self):
        torch.manual_seed(0)
        model = torch.nn.Conv3d(1, 3, kernel_size=3, padding=1).double()
        self.assertLessEqual(sum(p.numel() for p in model.parameters()), 200)
        x = torch.randn(1, 1, 4, 4, 4, dtype=torch.float64)
        labels = self.labels()[:1]

        loss = dice_ce(model(x), labels)
        model.zero_grad()
        loss.backward()
        analytic = torch.cat([p.grad.ravel() for p in model.parameters()])

        h = 1e-6
        numeric = []
        with torch.no_grad():
            for p in model.parameters():
                flat = p.view(-1)
                for i in range(flat.numel()):
                    saved = float(flat[i])
                    flat[i] = saved + h
                    up = float(dice_ce(model(x), labels))
                    flat[i] = saved - h
                    down = float(dice_ce(model(x), labels))
                    flat[i] = saved
                    numeric.append((up - down) / (2 * h))
        self.assertTrue(torch.allclose(analytic, torch.tensor(numeric, dtype=torch.float64), rtol=1e-4, atol=1e-6))

    def test_gradcheck_on_logits(self):
        logits = torch.randn(1, 3, 2, 2, 2, dtype=torch.float64, requires_grad=True)
        labels = self.labels()[:1, :2, :2, :2]
        self.assertTrue(torch.autograd.gradcheck(lambda z: dice_ce(z, labels), (logits,)))
        a = torch.randn(6, dtype=torch.float64, requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(lambda z: lsgan_loss(z, 1), (a,)))
