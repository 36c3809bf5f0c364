# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Video and physics metric tests."""

import unittest

import numpy as np

from physflow.exceptions import RejectedInput, ShapeMismatch
from physflow.metrics import (
    MetricsRecord,
    bounce_timing_error,
    ceiling_metrics,
    compare_runs,
    evaluate_sequence,
    first_contact,
    motion_mask,
    mse,
    perturbed_world,
    physics_iq_score,
    spatial_iou,
    spatiotemporal_iou,
    summarize,
    trajectory_rmse,
    video_metrics,
    weighted_spatial_iou,
)
from physflow.world import PhysStateSeq, WorldConfig, render, simulate

WORLD = WorldConfig(height=16, width=16, radius_range=(1.5, 3.0), velocity_range=(-8.0, 8.0))


def falling(ys, radius=2.0):
    """One active ball at x=8 with the given heights, plus an inactive slot."""
    balls = np.zeros((len(ys), 2, 6))
    balls[:, 0, 0] = 8.0
    balls[:, 0, 1] = ys
    balls[:, 0, 4] = radius
    balls[:, 0, 5] = 1.0
    return PhysStateSeq(balls=balls)


class MaskTest(unittest.TestCase):
    def test_motion_mask(self):
        frames = np.zeros((3, 2, 2))
        frames[1, 0, 0] = 0.5
        frames[2, 1, 1] = 0.01
        masks = motion_mask(frames, tau=0.05)
        self.assertEqual(masks.shape, (2, 2, 2))
        self.assertEqual(masks.sum(), 2)
        self.assertTrue(masks[0, 0, 0])
        self.assertTrue(masks[1, 0, 0])
        self.assertFalse(masks[1, 1, 1])

    def test_rejects(self):
        self.assertRaises(RejectedInput, motion_mask, np.zeros((1, 2, 2)))
        self.assertRaises(RejectedInput, motion_mask, np.zeros((3, 2)))
        self.assertRaises(RejectedInput, motion_mask, np.zeros((3, 2, 2)), 0.0)
        self.assertRaises(RejectedInput, motion_mask, np.zeros((3, 2, 2)), 1.0)


class VideoMetricTest(unittest.TestCase):
    def test_spatial_iou_by_hand(self):
        gen = np.zeros((2, 1, 3), dtype=bool)
        ref = np.zeros((2, 1, 3), dtype=bool)
        gen[0, 0, 0] = gen[1, 0, 1] = True
        ref[1, 0, 1] = ref[0, 0, 2] = True
        self.assertAlmostEqual(spatial_iou(gen, ref), 1.0 / 3.0)

    def test_empty_masks_agree(self):
        empty = np.zeros((2, 3, 3), dtype=bool)
        self.assertEqual(spatial_iou(empty, empty), 1.0)
        self.assertEqual(spatiotemporal_iou(empty, empty), 1.0)
        self.assertEqual(weighted_spatial_iou(empty, empty), 1.0)

    def test_spatiotemporal_iou_by_hand(self):
        gen = np.zeros((2, 1, 2), dtype=bool)
        ref = np.zeros((2, 1, 2), dtype=bool)
        gen[0, 0, :] = True
        ref[0, 0, 0] = True
        gen[1, 0, 1] = ref[1, 0, 1] = True
        self.assertAlmostEqual(spatiotemporal_iou(gen, ref), 0.75)

    def test_weighted_iou_by_hand(self):
        gen = np.zeros((2, 1, 2), dtype=bool)
        ref = np.zeros((2, 1, 2), dtype=bool)
        gen[:, 0, 0] = True
        ref[0, 0, 0] = True
        self.assertAlmostEqual(weighted_spatial_iou(gen, ref), 0.5)

    def test_iou_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            gen = rng.random((4, 5, 5)) < 0.3
            ref = rng.random((4, 5, 5)) < 0.3
            a, b = gen.any(axis=0), ref.any(axis=0)
            inter = union = 0
            for i in range(5):
                for j in range(5):
                    inter += a[i, j] and b[i, j]
                    union += a[i, j] or b[i, j]
            expected = inter / union if union else 1.0
            self.assertAlmostEqual(spatial_iou(gen, ref), expected)

    def test_iou_rises_while_morphing_toward_reference(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            gen = rng.random((4, 6, 6)) < 0.3
            ref = rng.random((4, 6, 6)) < 0.3
            missing = list(zip(*np.nonzero(ref & ~gen)))
            extra = list(zip(*np.nonzero(gen & ~ref)))
            scores = [(spatial_iou(gen, ref), spatiotemporal_iou(gen, ref))]
            for index in missing + extra:
                gen[index] = ref[index]
                scores.append((spatial_iou(gen, ref), spatiotemporal_iou(gen, ref)))
            for before, after in zip(scores, scores[1:]):
                self.assertGreaterEqual(after[0], before[0] - 1e-12)
                self.assertGreaterEqual(after[1], before[1] - 1e-12)
            self.assertEqual(scores[-1], (1.0, 1.0))

    def test_mse(self):
        self.assertAlmostEqual(mse(np.array([0.1, 0.5]), np.array([0.3, 0.1])), 0.1)
        self.assertRaises(ShapeMismatch, mse, np.zeros(2), np.zeros(3))

    def test_video_metrics_skip_conditioning(self):
        rng = np.random.default_rng(0)
        ref = rng.random((5, 4, 4))
        gen = ref.copy()
        gen[0] = 0.0
        record = video_metrics(gen, ref, cond_frames=2)
        self.assertEqual(record.mse, 0.0)
        self.assertEqual(record.spatial_iou, 1.0)
        self.assertEqual(record.spatiotemporal_iou, 1.0)
        self.assertGreater(video_metrics(gen, ref).mse, 0.0)


class PhysicsIQTest(unittest.TestCase):
    def test_components(self):
        m = MetricsRecord(spatial_iou=0.9, spatiotemporal_iou=0.25, weighted_spatial_iou=0.25, mse=0.005)
        ceiling = MetricsRecord(spatial_iou=0.8, spatiotemporal_iou=0.5, weighted_spatial_iou=0.5, mse=0.01)
        self.assertAlmostEqual(physics_iq_score(m, ceiling), 75.0)

    def test_ceiling_scores_full(self):
        ceiling = MetricsRecord(spatial_iou=0.7, spatiotemporal_iou=0.6, weighted_spatial_iou=0.5, mse=0.02)
        self.assertEqual(physics_iq_score(ceiling, ceiling), 100.0)

    def test_zero_ceiling(self):
        zero = MetricsRecord()
        self.assertEqual(physics_iq_score(zero, zero), 100.0)
        worse = MetricsRecord(mse=1.0)
        self.assertAlmostEqual(physics_iq_score(worse, zero), 75.0 + 25.0 * 1e-6)

    def test_worse_mse_lowers_score(self):
        ceiling = MetricsRecord(spatial_iou=1.0, spatiotemporal_iou=1.0, weighted_spatial_iou=1.0, mse=0.01)
        m = MetricsRecord(spatial_iou=1.0, spatiotemporal_iou=1.0, weighted_spatial_iou=1.0, mse=0.04)
        self.assertAlmostEqual(physics_iq_score(m, ceiling), 100.0 * (3.0 + 0.25) / 4.0)


class PhysicsMetricTest(unittest.TestCase):
    def test_first_contact(self):
        self.assertEqual(first_contact(falling([5.0, 10.0, 13.0, 12.0]), 16), 2)
        self.assertIsNone(first_contact(falling([5.0, 6.0, 7.0, 8.0]), 16))

    def test_inactive_ball_never_touches(self):
        states = falling([5.0, 6.0, 7.0, 8.0])
        states.balls[:, 1, 1] = 15.0
        states.balls[:, 1, 4] = 2.0
        self.assertIsNone(first_contact(states, 16))

    def test_bounce_timing(self):
        early = falling([5.0, 10.0, 13.0, 12.0])
        late = falling([5.0, 8.0, 11.0, 13.0])
        never = falling([5.0, 6.0, 7.0, 8.0])
        self.assertEqual(bounce_timing_error(early, late, 16), 1)
        self.assertEqual(bounce_timing_error(never, never, 16), 0)
        self.assertEqual(bounce_timing_error(early, never, 16), 4)
        self.assertEqual(bounce_timing_error(never, late, 16), 4)
        self.assertRaises(ShapeMismatch, bounce_timing_error, falling([1.0, 2.0]), late, 16)

    def test_trajectory_rmse(self):
        gt = falling([5.0, 6.0, 7.0])
        decoded = falling([5.0, 6.0, 7.0])
        decoded.balls[:, 0, 0] += 3.0
        decoded.balls[:, 1, 0] = 50.0
        self.assertAlmostEqual(trajectory_rmse(decoded, gt), 3.0)
        self.assertEqual(trajectory_rmse(gt, gt), 0.0)
        self.assertRaises(ShapeMismatch, trajectory_rmse, falling([1.0, 2.0]), gt)


class SequenceTest(unittest.TestCase):
    def test_unperturbed_ceiling_is_exact(self):
        record = ceiling_metrics(WORLD, None, 6, perturbation=0.0)
        self.assertEqual(record.mse, 0.0)
        self.assertEqual(record.spatial_iou, 1.0)
        self.assertEqual(record.trajectory_rmse, 0.0)
        self.assertEqual(record.physics_iq, 100.0)

    def test_perturbed_world_scales_velocity(self):
        base = simulate(WORLD, None, 2).balls[0, 0]
        pinned = perturbed_world(WORLD, 0.5).initial[0]
        self.assertAlmostEqual(pinned.vx, base[2] * 1.5)
        self.assertAlmostEqual(pinned.vy, base[3] * 1.5)
        self.assertEqual(pinned.x, base[0])

    def test_ground_truth_scores_at_ceiling(self):
        gt = simulate(WORLD, None, 8)
        record = evaluate_sequence(render(gt, 16, 16), gt, WORLD, None, cond_frames=2)
        self.assertEqual(record.mse, 0.0)
        self.assertEqual(record.spatial_iou, 1.0)
        self.assertEqual(record.physics_iq, 100.0)
        self.assertEqual(record.bounce_timing_error, 0)
        self.assertEqual(record.trajectory_rmse, 0.0)

    def test_blank_video_scores_lower(self):
        gt = simulate(WORLD, None, 8)
        record = evaluate_sequence(np.zeros((8, 16, 16)), gt, WORLD, None)
        self.assertLess(record.physics_iq, 100.0)
        self.assertGreater(record.mse, 0.0)


class SummaryTest(unittest.TestCase):
    def test_summarize(self):
        mean = summarize([MetricsRecord(mse=0.1, physics_iq=50.0), MetricsRecord(mse=0.3, physics_iq=70.0)])
        self.assertAlmostEqual(mean.mse, 0.2)
        self.assertAlmostEqual(mean.physics_iq, 60.0)
        self.assertRaises(RejectedInput, summarize, [])

    def test_compare_runs(self):
        runs = {
            "dual": [MetricsRecord(bounce_timing_error=b, trajectory_rmse=r) for b, r in ((1, 0.5), (3, 1.5), (2, 9.0))],
            "zero": [MetricsRecord(bounce_timing_error=4, trajectory_rmse=2.0)],
        }
        rows = compare_runs(runs)
        self.assertEqual([r["model"] for r in rows], ["dual", "zero"])
        self.assertEqual(rows[0]["median_bounce_timing_error"], 2.0)
        self.assertEqual(rows[0]["median_trajectory_rmse"], 1.5)
        self.assertEqual(rows[1]["median_bounce_timing_error"], 4.0)

    def test_as_row(self):
        row = MetricsRecord(mse=0.5).as_row(3, "multi")
        self.assertEqual(row["sequence"], 3)
        self.assertEqual(row["setting"], "multi")
        self.assertEqual(row["mse"], 0.5)


if __name__ == "__main__":
    unittest.main()
