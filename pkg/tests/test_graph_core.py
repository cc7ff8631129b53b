import math
import unittest

import numpy as np

from bup.errors import InputError
from bup.graph_core import (
  adjacency_matrix,
  build_graph,
  build_kernel,
  propagate,
  shortest_path_lengths,
  subgraph_degrees,
)
from tests.fixtures import path_graph, random_graph, star_graph


class BuildGraphTestCase(unittest.TestCase):
  def test_single_edge(self) -> None:
    g = build_graph([(0, 1)], 2)
    self.assertEqual(g.neighbor_lists, ((1,), (0,)))
    np.testing.assert_array_equal(g.degree_hat, [2.0, 2.0])
    self.assertEqual(g.num_edges, 1)

  def test_duplicate_and_reversed_edges_merge(self) -> None:
    merged = build_graph([(0, 1), (1, 0), (0, 1)], 2)
    plain = build_graph([(0, 1)], 2)
    self.assertEqual(merged.edges, plain.edges)
    self.assertEqual(merged.neighbor_lists, plain.neighbor_lists)
    np.testing.assert_array_equal(merged.degree_hat, plain.degree_hat)

  def test_isolated_nodes_keep_self_loop_degree(self) -> None:
    g = build_graph([], 3)
    self.assertEqual(g.neighbor_lists, ((), (), ()))
    np.testing.assert_array_equal(g.degree_hat, [1.0, 1.0, 1.0])

  def test_self_pairs_are_dropped(self) -> None:
    g = build_graph([(0, 0), (0, 1), (1, 1)], 2)
    self.assertEqual(g.edges, ((0, 1),))
    np.testing.assert_array_equal(g.degree_hat, [2.0, 2.0])

  def test_out_of_range_pair_is_named(self) -> None:
    with self.assertRaises(InputError) as ctx:
      build_graph([(0, 1), (1, 5)], 3)
    self.assertIn("(1, 5)", str(ctx.exception))

  def test_non_positive_node_count_rejected(self) -> None:
    with self.assertRaises(InputError):
      build_graph([], 0)

  def test_symmetry_and_degree_match_adjacency(self) -> None:
    rng = np.random.Generator(np.random.PCG64(11))
    for _ in range(20):
      g = random_graph(rng, int(rng.integers(2, 30)), 0.25)
      for i, neighbors in enumerate(g.neighbor_lists):
        for j in neighbors:
          self.assertIn(i, g.neighbor_lists[j])
      a_hat_rows = np.asarray(adjacency_matrix(g).sum(axis=1)).ravel() + 1.0
      np.testing.assert_array_equal(g.degree_hat, a_hat_rows)
      self.assertTrue(np.all(g.degree_hat >= 1.0))

  def test_degree_hat_is_read_only(self) -> None:
    g = path_graph(3)
    with self.assertRaises(ValueError):
      g.degree_hat[0] = 10.0


class KernelTestCase(unittest.TestCase):
  def test_path_of_two(self) -> None:
    kernel = build_kernel(path_graph(2))
    np.testing.assert_allclose(kernel.to_dense(), [[0.5, 0.5], [0.5, 0.5]])

  def test_isolated_node(self) -> None:
    kernel = build_kernel(build_graph([], 1))
    np.testing.assert_allclose(kernel.to_dense(), [[1.0]])

  def test_star_entries(self) -> None:
    dense = build_kernel(star_graph(4)).to_dense()
    self.assertAlmostEqual(dense[0, 0], 1.0 / 5.0)
    for leaf in range(1, 5):
      self.assertAlmostEqual(dense[0, leaf], 1.0 / math.sqrt(10.0))
      self.assertAlmostEqual(dense[leaf, leaf], 0.5)
    self.assertEqual(dense[1, 2], 0.0)

  def test_symmetric_bounded_and_pattern_matches_a_hat(self) -> None:
    rng = np.random.Generator(np.random.PCG64(5))
    for _ in range(20):
      g = random_graph(rng, int(rng.integers(1, 25)), 0.3)
      kernel = build_kernel(g)
      dense = kernel.to_dense()
      self.assertEqual(np.max(np.abs(dense - dense.T)), 0.0)
      nonzero = dense[dense != 0.0]
      self.assertTrue(np.all((nonzero > 0.0) & (nonzero <= 1.0)))
      a_hat = adjacency_matrix(g).toarray() + np.eye(g.num_nodes)
      np.testing.assert_array_equal(dense != 0.0, a_hat != 0.0)
      self.assertTrue(kernel.matrix.has_sorted_indices)


class PropagateTestCase(unittest.TestCase):
  def test_identity_on_single_node(self) -> None:
    kernel = build_kernel(build_graph([], 1))
    np.testing.assert_allclose(propagate(kernel, np.array([[3.0, -1.0]])), [[3.0, -1.0]])

  def test_path_average(self) -> None:
    kernel = build_kernel(path_graph(2))
    np.testing.assert_allclose(propagate(kernel, np.array([[2.0], [4.0]])), [[3.0], [3.0]])

  def test_zero_in_zero_out(self) -> None:
    kernel = build_kernel(star_graph(3))
    np.testing.assert_array_equal(propagate(kernel, np.zeros((4, 2))), np.zeros((4, 2)))

  def test_row_mismatch_rejected(self) -> None:
    kernel = build_kernel(path_graph(3))
    with self.assertRaises(InputError):
      propagate(kernel, np.ones((2, 1)))

  def test_linearity(self) -> None:
    rng = np.random.Generator(np.random.PCG64(2))
    g = random_graph(rng, 15, 0.3)
    kernel = build_kernel(g)
    x = rng.normal(size=(15, 3))
    y = rng.normal(size=(15, 3))
    combined = propagate(kernel, 2.5 * x - 0.5 * y)
    separate = 2.5 * propagate(kernel, x) - 0.5 * propagate(kernel, y)
    np.testing.assert_allclose(combined, separate, rtol=1e-12, atol=1e-12)

  def test_ones_stay_positive_and_finite(self) -> None:
    rng = np.random.Generator(np.random.PCG64(8))
    g = random_graph(rng, 20, 0.2)
    out = propagate(build_kernel(g), np.ones(20))
    self.assertTrue(np.all(np.isfinite(out)))
    self.assertTrue(np.all(out > 0.0))


class DistanceTestCase(unittest.TestCase):
  def test_path_distances_and_unreachable(self) -> None:
    g = build_graph([(0, 1), (1, 2)], 4)
    lengths = shortest_path_lengths(g, [0])
    np.testing.assert_array_equal(lengths[0, :3], [0.0, 1.0, 2.0])
    self.assertTrue(math.isinf(lengths[0, 3]))

  def test_subgraph_degrees(self) -> None:
    g = star_graph(3)
    np.testing.assert_array_equal(subgraph_degrees(g), [3.0, 1.0, 1.0, 1.0])
    np.testing.assert_array_equal(subgraph_degrees(g, [0, 2]), [3.0, 1.0])


if __name__ == "__main__":
  unittest.main()
