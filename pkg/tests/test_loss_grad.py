import math
import unittest

import numpy as np
from scipy import linalg, special

from bup.errors import InputError, InvariantViolation
from bup.loss_grad import (
  PairwiseGaussianDiff,
  batch_cross_entropy,
  batch_loss_and_grad,
  cross_entropy_loss,
  finite_diff_check,
  log_half_erfc,
  loss_and_grad,
  loss_diag_approx,
  mvn_orthant_mc,
)


class DiagonalLikelihoodTestCase(unittest.TestCase):
  def test_symmetric_case_is_log_two(self) -> None:
    nll, likelihood = loss_diag_approx(np.zeros(2), np.ones(2), 0)
    self.assertAlmostEqual(likelihood, 0.5, places=14)
    self.assertAlmostEqual(nll, math.log(2.0), places=14)

  def test_three_sigma_gap(self) -> None:
    _, likelihood = loss_diag_approx(np.array([3.0, 0.0]), np.ones(2), 0)
    self.assertAlmostEqual(likelihood, 0.5 * (1.0 + math.erf(1.5)), places=12)

  def test_larger_variance_lowers_likelihood_of_correct_lead(self) -> None:
    rng = np.random.default_rng(12)
    for _ in range(200):
      classes = int(rng.integers(2, 8))
      label = int(rng.integers(classes))
      m = rng.normal(size=classes)
      m[label] = m.max() + rng.uniform(0.1, 3.0)
      var = rng.uniform(0.1, 2.0, classes)
      nll, _ = loss_diag_approx(m, var, label)
      doubled, _ = loss_diag_approx(m, 2.0 * var, label)
      self.assertGreater(doubled, nll)

  def test_log_half_erfc_matches_log_ndtr(self) -> None:
    x = np.linspace(-30.0, 8.0, 381)
    np.testing.assert_allclose(log_half_erfc(x), special.log_ndtr(math.sqrt(2.0) * x), rtol=1e-10, atol=1e-14)

  def test_saturated_scores_stay_finite(self) -> None:
    for m in ([60.0, 0.0, -5.0], [-60.0, 0.0, 4.0]):
      nll, grad_m, grad_v = loss_and_grad(np.array(m), np.array([1.0, 1.0, 0.5]), 0)
      self.assertTrue(math.isfinite(nll))
      self.assertTrue(np.all(np.isfinite(grad_m)))
      self.assertTrue(np.all(np.isfinite(grad_v)))
    far_ahead, _, _ = loss_and_grad(np.array([60.0, 0.0, -5.0]), np.ones(3), 0)
    self.assertLess(far_ahead, 1e-12)

  def test_monotone_in_true_class_mean_and_variance_sums(self) -> None:
    rng = np.random.default_rng(31)
    for classes in (3, 7):
      for _ in range(100):
        label = int(rng.integers(classes))
        m = np.zeros(classes)
        m[label] = rng.normal()
        others = [c for c in range(classes) if c != label]
        m[others] = m[label] - rng.uniform(0.1, 1.5, classes - 1)
        var = rng.uniform(0.5, 2.0, classes)
        nll, _ = loss_diag_approx(m, var, label)

        raised = m.copy()
        raised[label] += 0.1
        self.assertLess(loss_diag_approx(raised, var, label)[0], nll)

        for c in others:
          wider = var.copy()
          wider[c] *= 1.2
          self.assertGreater(loss_diag_approx(m, wider, label)[0], nll)
        wider = var.copy()
        wider[label] *= 1.2
        self.assertGreater(loss_diag_approx(m, wider, label)[0], nll)

  def test_gradients_vanish_at_twenty_sigma_gap(self) -> None:
    rng = np.random.default_rng(13)
    for classes in (2, 3, 7):
      label = int(rng.integers(classes))
      var = rng.uniform(0.2, 2.0, classes)
      m = np.zeros(classes)
      spread = np.sqrt(var[label] + var)
      m[label] = 20.0 * spread.max()
      _, grad_m, grad_v = loss_and_grad(m, var, label)
      self.assertTrue(np.all(np.abs(grad_m) < 1e-6), grad_m)
      self.assertTrue(np.all(np.abs(grad_v) < 1e-6), grad_v)

  def test_extreme_gaps_with_tiny_variance_stay_finite(self) -> None:
    var = np.full(3, 1e-6)
    for gap in (100.0, -100.0):
      m = np.array([gap, 0.0, 0.0])
      nll, likelihood = loss_diag_approx(m, var, 0)
      self.assertTrue(math.isfinite(nll), gap)
      self.assertGreaterEqual(likelihood, 0.0)
      _, grad_m, grad_v = loss_and_grad(m, var, 0)
      self.assertTrue(np.all(np.isfinite(grad_m)))
      self.assertTrue(np.all(np.isfinite(grad_v)))
    far_behind, _ = loss_diag_approx(np.array([-100.0, 0.0, 0.0]), var, 0)
    self.assertGreater(far_behind, 1e6)

  def test_non_positive_variance_is_invariant_violation(self) -> None:
    with self.assertRaises(InvariantViolation):
      loss_and_grad(np.zeros(3), np.array([1.0, 0.0, 1.0]), 1)

  def test_label_out_of_range(self) -> None:
    with self.assertRaises(InputError):
      loss_and_grad(np.zeros(3), np.ones(3), 3)


class GradientTestCase(unittest.TestCase):
  def test_mean_gradient_sums_to_zero(self) -> None:
    rng = np.random.default_rng(4)
    M = rng.normal(0.0, 2.0, (50, 6))
    V = rng.uniform(0.05, 3.0, (50, 6))
    labels = rng.integers(0, 6, 50)
    _, grad_m, _ = batch_loss_and_grad(M, V, labels)
    np.testing.assert_allclose(grad_m.sum(axis=1), 0.0, atol=1e-12)

  def test_analytic_gradients_match_finite_differences(self) -> None:
    rng = np.random.default_rng(8)
    for trial in range(200):
      classes = (2, 3, 7)[trial % 3]
      label = int(rng.integers(classes))
      m = rng.normal(0.0, 1.5, classes)
      var = rng.uniform(0.2, 2.0, classes)

      def on_means(x: np.ndarray):
        value, grad, _ = loss_and_grad(x, var, label)
        return value, grad

      def on_variances(x: np.ndarray):
        value, _, grad = loss_and_grad(m, x, label)
        return value, grad

      self.assertTrue(finite_diff_check(on_means, m).passed)
      self.assertTrue(finite_diff_check(on_variances, var).passed)

  def test_batch_rows_are_independent(self) -> None:
    rng = np.random.default_rng(1)
    M = rng.normal(size=(4, 3))
    V = rng.uniform(0.5, 1.5, (4, 3))
    labels = np.array([0, 2, 1, 1])
    nll, grad_m, grad_v = batch_loss_and_grad(M, V, labels)
    for row in range(4):
      single, gm, gv = loss_and_grad(M[row], V[row], int(labels[row]))
      self.assertAlmostEqual(nll[row], single, places=14)
      np.testing.assert_allclose(grad_m[row], gm)
      np.testing.assert_allclose(grad_v[row], gv)


class OrthantTestCase(unittest.TestCase):
  def test_centered_one_dimensional_case(self) -> None:
    diff = PairwiseGaussianDiff(mu=np.zeros(1), Lambda=np.array([[2.0]]), label=0)
    estimate = mvn_orthant_mc(diff, 20_000, seed=0)
    self.assertLessEqual(abs(estimate.probability - 0.5), 3.0 * estimate.std_error)

  def test_two_classes_agree_with_diagonal_form(self) -> None:
    rng = np.random.default_rng(17)
    z_scores = []
    for trial in range(50):
      m = rng.normal(size=2)
      var = rng.uniform(0.3, 2.0, 2)
      label = trial % 2
      _, likelihood = loss_diag_approx(m, var, label)
      estimate = mvn_orthant_mc(PairwiseGaussianDiff.from_prediction(m, var, label), 1_000_000, seed=trial)
      exact_se = math.sqrt(likelihood * (1.0 - likelihood) / estimate.num_samples)
      z_scores.append(abs(estimate.probability - likelihood) / exact_se)
    # at most one of 50 past 3 standard errors, none past 4
    self.assertLessEqual(sum(z > 3.0 for z in z_scores), 1, z_scores)
    self.assertLess(max(z_scores), 4.0, z_scores)

  def test_signed_gap_for_more_classes(self) -> None:
    rng = np.random.default_rng(23)
    for classes in (3, 7):
      gaps = []
      for trial in range(10):
        label = int(rng.integers(classes))
        m = rng.normal(0.0, 0.5, classes)
        m[label] = m.max() + rng.uniform(0.2, 1.5)
        var = rng.uniform(0.3, 2.0, classes)
        _, likelihood = loss_diag_approx(m, var, label)
        estimate = mvn_orthant_mc(PairwiseGaussianDiff.from_prediction(m, var, label), 1_000_000, seed=trial)
        gap = estimate.probability - likelihood
        with self.subTest(classes=classes, trial=trial, gap=gap):
          # positively correlated pairs: the product of marginals is a lower bound
          self.assertGreater(gap, -4.0 * estimate.std_error)
        gaps.append(gap)
      self.assertGreater(float(np.mean(gaps)), 0.0)

  def test_diagonal_form_underestimates_positively_correlated_orthant(self) -> None:
    m = np.array([0.8, 0.0, 0.2, -0.1])
    var = np.array([1.5, 0.5, 0.7, 0.4])
    _, likelihood = loss_diag_approx(m, var, 0)
    estimate = mvn_orthant_mc(PairwiseGaussianDiff.from_prediction(m, var, 0), 200_000, seed=3)
    self.assertGreater(estimate.probability + 4.0 * estimate.std_error, likelihood)

  def test_pairwise_covariance_always_factorizes(self) -> None:
    rng = np.random.default_rng(2024)
    for _ in range(1000):
      classes = int(rng.integers(2, 9))
      diff = PairwiseGaussianDiff.from_prediction(
        rng.normal(size=classes),
        rng.uniform(1e-3, 5.0, classes),
        int(rng.integers(classes)),
      )
      lower = linalg.cholesky(diff.Lambda, lower=True)
      self.assertTrue(np.all(np.diag(lower) > 0.0))

  def test_indefinite_covariance_is_invariant_violation(self) -> None:
    diff = PairwiseGaussianDiff(mu=np.zeros(2), Lambda=np.array([[1.0, 2.0], [2.0, 1.0]]), label=0)
    with self.assertRaises(InvariantViolation):
      mvn_orthant_mc(diff, 1000, seed=0)

  def test_too_few_samples(self) -> None:
    diff = PairwiseGaussianDiff(mu=np.zeros(1), Lambda=np.eye(1), label=0)
    with self.assertRaises(InputError):
      mvn_orthant_mc(diff, 10, seed=0)


class CrossEntropyTestCase(unittest.TestCase):
  def test_uniform_logits(self) -> None:
    loss, _ = cross_entropy_loss(np.zeros(7), 3)
    self.assertAlmostEqual(loss, math.log(7.0), places=14)

  def test_confident_correct_logits(self) -> None:
    loss, _ = cross_entropy_loss(np.array([10.0, 0.0]), 0)
    self.assertLess(loss, 1e-4)

  def test_gradient_matches_finite_differences(self) -> None:
    logits = np.array([0.3, -1.2, 2.0, 0.0])
    report = finite_diff_check(lambda x: cross_entropy_loss(x, 2), logits)
    self.assertTrue(report.passed)

  def test_batch_shapes(self) -> None:
    loss, grad = batch_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
    np.testing.assert_allclose(loss, math.log(4.0))
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)


class FiniteDiffCheckTestCase(unittest.TestCase):
  def test_square_function(self) -> None:
    report = finite_diff_check(lambda x: (float(np.sum(x ** 2)), 2.0 * x), np.array([0.7, -1.3, 2.5]))
    self.assertLess(report.max_rel_error, 1e-8)
    self.assertTrue(report.passed)

  def test_wrong_gradient_fails(self) -> None:
    report = finite_diff_check(lambda x: (float(np.sum(x ** 2)), 3.0 * x), np.array([0.2, 2.5]))
    self.assertFalse(report.passed)
    self.assertEqual(report.worst_index, (1,))

  def test_external_analytic_gradient(self) -> None:
    point = np.array([1.0, 2.0])
    report = finite_diff_check(lambda x: (float(np.sum(x ** 2)), np.zeros(2)), point, analytic=2.0 * point)
    self.assertTrue(report.passed)

  def test_shape_mismatch(self) -> None:
    with self.assertRaises(InputError):
      finite_diff_check(lambda x: (0.0, np.zeros(3)), np.zeros(2))


if __name__ == "__main__":
  unittest.main()
