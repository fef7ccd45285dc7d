import numpy as np
from django.test import SimpleTestCase

from kinetics.rng import make_rng
from kinetics.spatial import Domain, SpatialHash, brute_force_pairs, detect_pairs


def as_set(pairs):
    return {tuple(int(k) for k in pair) for pair in pairs}


class DomainTests(SimpleTestCase):
    def test_wrap_and_minimum_image(self):
        torus = Domain("torus", 2.0)
        wrapped = torus.wrap(np.array([[-0.5, 2.5, 1.0]]))
        np.testing.assert_allclose(wrapped, [[1.5, 0.5, 1.0]])
        np.testing.assert_allclose(torus.displacement([0.1, 0.0], [1.9, 0.0]), [0.2, 0.0])

    def test_free_space_is_untouched(self):
        free = Domain()
        points = np.array([[-3.0, 7.0, 0.5]])
        self.assertIs(free.wrap(points), points)
        self.assertEqual(free.volume(3), float("inf"))

    def test_torus_needs_a_side(self):
        with self.assertRaises(ValueError):
            Domain("torus")


class PairDetectionTests(SimpleTestCase):
    def test_free_space_matches_brute_force(self):
        rng = make_rng(11)
        for cutoff in (0.02, 0.05, 0.2):
            points = rng.random((600, 3)) * 2.0 - 1.0
            found = detect_pairs(points, SpatialHash(cutoff).rebuild(points), cutoff)
            self.assertEqual(as_set(found), as_set(brute_force_pairs(points, cutoff)))
            self.assertEqual(len(found), len(as_set(found)))

    def test_torus_matches_brute_force(self):
        rng = make_rng(12)
        torus = Domain("torus", 1.0)
        for cutoff in (0.03, 0.1, 0.3, 0.45):
            points = rng.random((500, 3))
            found = detect_pairs(points, SpatialHash(cutoff, torus).rebuild(points), cutoff)
            self.assertEqual(as_set(found), as_set(brute_force_pairs(points, cutoff, torus)))

    def test_random_clouds_match_brute_force(self):
        rng = make_rng(13)
        for trial in range(40):
            dim = int(rng.integers(3, 5))
            count = int(rng.integers(2, 300))
            cutoff = float(rng.uniform(0.02, 0.3))
            domain = Domain("torus", 1.0) if trial % 2 else Domain()
            # clustered clouds put many particles in a handful of cells
            spread = 1.0 if trial % 4 < 2 else 0.1
            points = domain.wrap(rng.random((count, dim)) * spread)
            found = detect_pairs(points, SpatialHash(cutoff, domain).rebuild(points), cutoff)
            self.assertEqual(as_set(found), as_set(brute_force_pairs(points, cutoff, domain)), f"trial {trial}")
            self.assertEqual(len(found), len(as_set(found)))

    def test_pairs_across_the_seam(self):
        torus = Domain("torus", 1.0)
        points = np.array([[0.01, 0.5, 0.5], [0.99, 0.5, 0.5], [0.5, 0.5, 0.5]])
        found = detect_pairs(points, SpatialHash(0.05, torus).rebuild(points), 0.05)
        self.assertEqual(as_set(found), {(0, 1)})

    def test_pairs_are_ordered(self):
        points = make_rng(5).random((200, 4))
        found = detect_pairs(points, SpatialHash(0.2).rebuild(points), 0.2)
        self.assertTrue(np.all(found[:, 0] < found[:, 1]))

    def test_cells_smaller_than_cutoff_are_rejected(self):
        points = np.zeros((2, 3))
        with self.assertRaises(ValueError):
            detect_pairs(points, SpatialHash(0.1).rebuild(points), 0.2)

    def test_single_particle_has_no_pairs(self):
        points = np.zeros((1, 3))
        self.assertEqual(len(detect_pairs(points, SpatialHash(0.1).rebuild(points), 0.1)), 0)

    def test_occupancy_counts_every_particle(self):
        points = make_rng(9).random((300, 3))
        occupancy = SpatialHash(0.25).rebuild(points).occupancy()
        self.assertEqual(sum(occupancy.values()), 300)
