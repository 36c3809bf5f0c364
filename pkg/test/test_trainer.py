# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Joint loss, schedule and training loop tests."""

import os
import tempfile
import unittest

import numpy as np

import physflow
from physflow.exceptions import (
    AllConditioningBatch,
    InvalidConfiguration,
    MissingGradients,
    NumericAbort,
    RejectedInput,
    ShapeMismatch,
)
from physflow.optim import OptimizerConfig
from physflow.trainer import (
    LossRecord,
    ScheduleState,
    TrainConfig,
    ablate,
    grad_norm_physics,
    joint_loss,
    physics_names,
    pretrain_then_freeze,
    schedule_step,
    schedule_trace,
    train_loop,
)

WORLD = physflow.WorldConfig(height=16, width=16, radius_range=(1.5, 3.0), velocity_range=(-8.0, 8.0))
MODEL = physflow.ModelConfig(d=8, depth=1, heads=2, patch=4, context_vocab=8, max_tokens=128)
FRAMES = 5


def make_records(count=3):
    out = [physflow.generate_record(WORLD, physflow.DatasetDistribution(), FRAMES, i, 0) for i in range(count)]
    return [r for r, _ in out], physflow.OracleEncoder(out[0][1])


def small_config(**kwargs):
    defaults = {
        "batch_size": 2,
        "steps": 3,
        "optimizer": OptimizerConfig(lr=1e-2, warmup_fraction=0.0),
        "ramp_steps": 2,
        "eval_every": 100,
        "log_every": 1,
    }
    defaults.update(kwargs)
    return TrainConfig(**defaults)


class ListWriter:
    def __init__(self):
        self.rows = []

    def write(self, record):
        self.rows.append(record)


class JointLossTest(unittest.TestCase):
    def setUp(self):
        self.cond_mask = np.zeros((1, 2), dtype=bool)
        self.u_v = np.zeros((1, 4, 3))
        self.u_z = np.zeros((1, 2, 2))

    def test_hand_values(self):
        total, loss_v, loss_z = joint_loss(
            self.u_v, self.u_z, np.ones((1, 4, 3)), np.full((1, 2, 2), np.sqrt(2.0)), self.cond_mask, 0.5
        )
        self.assertAlmostEqual(loss_v.item(), 1.0)
        self.assertAlmostEqual(loss_z.item(), 2.0)
        self.assertAlmostEqual(total.item(), 2.0)

    def test_zero_alpha_is_video_loss(self):
        rng = np.random.default_rng(0)
        total, loss_v, _ = joint_loss(
            rng.standard_normal((1, 4, 3)),
            rng.standard_normal((1, 2, 2)),
            rng.standard_normal((1, 4, 3)),
            rng.standard_normal((1, 2, 2)),
            self.cond_mask,
            0.0,
        )
        self.assertEqual(total.item(), loss_v.item())

    def test_conditioning_targets_are_ignored(self):
        rng = np.random.default_rng(1)
        pred_v, pred_z = rng.standard_normal((2, 6, 3)), rng.standard_normal((2, 3, 2))
        target_v, target_z = rng.standard_normal((2, 6, 3)), rng.standard_normal((2, 3, 2))
        cond_mask = np.array([[True, False, False], [True, True, False]])
        base = joint_loss(pred_v, pred_z, target_v, target_z, cond_mask, 1.0)
        corrupt_v, corrupt_z = target_v.copy(), target_z.copy()
        corrupt_v[0, :2] = 1e6
        corrupt_v[1, :4] = -1e6
        corrupt_z[0, 0] = np.nan
        corrupt_z[1, :2] = 1e6
        moved = joint_loss(pred_v, pred_z, corrupt_v, corrupt_z, cond_mask, 1.0)
        for a, b in zip(base, moved):
            self.assertEqual(a.item(), b.item())

    def test_only_free_tokens_count(self):
        cond_mask = np.array([[True, False]])
        target_v = np.zeros((1, 4, 3))
        target_v[0, 2:] = 2.0
        _, loss_v, _ = joint_loss(self.u_v, self.u_z, target_v, np.zeros((1, 2, 2)), cond_mask, 1.0)
        self.assertAlmostEqual(loss_v.item(), 4.0)

    def test_all_conditioning(self):
        with self.assertRaises(AllConditioningBatch):
            joint_loss(self.u_v, self.u_z, self.u_v, self.u_z, np.ones((1, 2), dtype=bool), 1.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatch):
            joint_loss(self.u_v, self.u_z, np.zeros((1, 4, 2)), self.u_z, self.cond_mask, 1.0)

    def test_gradient(self):
        pred = physflow.Tensor(np.zeros((1, 2, 1)), requires_grad=True)
        with physflow.Graph() as graph:
            total, _, _ = joint_loss(pred, np.zeros((1, 2, 1)), np.array([[[1.0], [3.0]]]), np.zeros((1, 2, 1)), self.cond_mask, 1.0)
        graph.backward(total)
        np.testing.assert_allclose(pred.grad, [[[-1.0], [-3.0]]])


class ScheduleTest(unittest.TestCase):
    def test_linear_ramp(self):
        trace = schedule_trace([0.0] * 6, ScheduleState(ramp_steps=4, alpha_max=2.0))
        self.assertEqual([s.alpha_z for s in trace], [0.5, 1.0, 1.5, 2.0, 2.0, 2.0])

    def test_reset(self):
        state = ScheduleState(alpha_z=0.8, ramp_steps=10, eta_z=1.0)
        tripped = schedule_step(state, 1.5, 7)
        self.assertEqual((tripped.alpha_z, tripped.last_reset_step, tripped.reset_count), (0.0, 7, 1))
        self.assertAlmostEqual(schedule_step(tripped, 0.1, 8).alpha_z, 0.1)
        self.assertEqual(schedule_step(state, 1.0, 7).reset_count, 0)

    def test_trips_at_known_steps(self):
        norms = [0.5] * 400
        norms[99] = norms[299] = 5.0
        trace = schedule_trace(norms, ScheduleState(ramp_steps=100, eta_z=1.0))
        self.assertEqual(trace[98].alpha_z, 0.99)
        self.assertEqual(trace[99].alpha_z, 0.0)
        self.assertEqual(trace[99].reset_count, 1)
        self.assertAlmostEqual(trace[149].alpha_z, 0.5)
        self.assertEqual(trace[299].alpha_z, 0.0)
        self.assertEqual(trace[399].alpha_z, 1.0)
        self.assertEqual(trace[-1].reset_count, 2)

        # the weight used at step k is the state left by step k - 1
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "loss.csv")
            writer = physflow.LossLogWriter(open(path, "w", newline=""))
            state = ScheduleState(ramp_steps=100, eta_z=1.0)
            for step, (norm, after) in enumerate(zip(norms, trace), start=1):
                writer.write(LossRecord(step, 0.0, 0.0, 0.0, state.alpha_z, norm, state.reset_count))
                state = after
            writer.close()
            rows = physflow.read_loss_log(path)
        self.assertEqual(rows[100]["alpha_z"], 0.0)
        self.assertEqual(rows[100]["reset_count"], 1)
        self.assertEqual(rows[101]["alpha_z"], 0.01)
        self.assertEqual(rows[300]["alpha_z"], 0.0)
        self.assertEqual([r["step"] for r in rows if r["grad_norm_z"] > 1.0], [100, 300])

    def test_invalid(self):
        self.assertRaises(InvalidConfiguration, ScheduleState, ramp_steps=0)
        self.assertRaises(InvalidConfiguration, ScheduleState, eta_z=0.0)


class GradNormTest(unittest.TestCase):
    def test_oracle(self):
        grads = {"physics.a": np.array([3.0]), "cross.b": np.array([[4.0]]), "video.c": np.array([100.0])}
        self.assertEqual(grad_norm_physics(grads, ["physics.a", "cross.b"]), 5.0)

    def test_missing(self):
        with self.assertRaises(MissingGradients):
            grad_norm_physics({"physics.a": None}, ["physics.a"])

    def test_physics_names(self):
        params = physflow.init_model(MODEL)
        names = physics_names(params)
        self.assertIn("physics.embed.w", names)
        self.assertIn("cross.0.vis.wq", names)
        self.assertFalse(any(n.startswith(("video.", "shared.")) for n in names))
        params.freeze("cross")
        self.assertFalse(any(n.startswith("cross.") for n in physics_names(params)))


class TrainLoopTest(unittest.TestCase):
    def setUp(self):
        self.records, self.encoder = make_records()

    def test_freeze_video(self):
        params = physflow.init_model(MODEL, seed=1)
        before = {n: params[n].data.copy() for n in params}
        result = train_loop(self.records, params, small_config(freeze_video=True), self.encoder)
        for name in params:
            if params.partition(name) in ("video", "shared"):
                np.testing.assert_array_equal(params[name].data, before[name], name)
        self.assertFalse(np.array_equal(params["physics.head.w"].data, before["physics.head.w"]))
        self.assertEqual(result.checkpoint.frozen_flags["video"], True)
        self.assertEqual(len(result.records), 3)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            params = physflow.init_model(MODEL, seed=2)
            result = train_loop(self.records, params, small_config(), self.encoder)
            runs.append((params, result.records))
        (a, ra), (b, rb) = runs
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)
        self.assertEqual(ra, rb)

    def test_log_rows(self):
        params = physflow.init_model(MODEL)
        writer = ListWriter()
        result = train_loop(self.records, params, small_config(), self.encoder, log_writer=writer, step_offset=10)
        self.assertEqual([r.step for r in writer.rows], [11, 12, 13])
        self.assertEqual(writer.rows, result.records)
        self.assertEqual(writer.rows[0].alpha_z, 0.0)
        for row in writer.rows:
            self.assertAlmostEqual(row.L_total, row.L_v + row.alpha_z * row.L_z)
            self.assertTrue(np.isfinite(row.grad_norm_z))

    def test_trip_appears_in_next_row(self):
        params = physflow.init_model(MODEL)
        result = train_loop(self.records, params, small_config(eta_z=1e-12), self.encoder)
        rows = result.records
        self.assertTrue(all(r.grad_norm_z > 1e-12 for r in rows))
        self.assertEqual([r.reset_count for r in rows], [0, 1, 2])
        self.assertEqual([r.alpha_z for r in rows], [0.0, 0.0, 0.0])
        self.assertEqual(result.checkpoint.schedule["reset_count"], 3)

        result = train_loop(self.records, physflow.init_model(MODEL), small_config(eta_z=1e300), self.encoder)
        self.assertEqual([r.alpha_z for r in result.records], [0.0, 0.5, 1.0])
        self.assertEqual([r.reset_count for r in result.records], [0, 0, 0])

    def test_fixed_alpha(self):
        params = physflow.init_model(MODEL)
        result = train_loop(self.records, params, small_config(), self.encoder, fixed_alpha=0.25)
        self.assertEqual({r.alpha_z for r in result.records}, {0.25})

    def test_checkpoints(self):
        params = physflow.init_model(MODEL)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.phck")
            result = train_loop(self.records, params, small_config(eval_every=1), self.encoder, checkpoint_path=path)
            loaded = physflow.load_checkpoint(path)
        self.assertEqual(loaded.step, 3)
        self.assertEqual(result.checkpoint.step, 3)
        np.testing.assert_array_equal(loaded.params["physics.head.w"], params["physics.head.w"].data)
        self.assertEqual(loaded.schedule["reset_count"], result.checkpoint.schedule["reset_count"])

    def test_numeric_abort(self):
        params = physflow.init_model(MODEL)
        params["video.embed.w"].data[:] = 1e308
        with np.errstate(all="ignore"), self.assertRaises(NumericAbort) as cm:
            train_loop(self.records, params, small_config(), self.encoder)
        self.assertEqual(cm.exception.step, 1)

    def test_pretrain_then_freeze(self):
        params = physflow.init_model(MODEL)
        physics_before = params["physics.embed.w"].data.copy()
        writer = ListWriter()
        result = pretrain_then_freeze(self.records, params, small_config(steps=2), self.encoder, 2, log_writer=writer)
        self.assertEqual([r.step for r in writer.rows], [1, 2, 3, 4])
        self.assertEqual([r.alpha_z for r in writer.rows[:2]], [0.0, 0.0])
        self.assertFalse(np.array_equal(params["physics.embed.w"].data, physics_before))
        self.assertEqual(
            result.checkpoint.frozen_flags, {"video": True, "physics": False, "cross": False, "shared": True}
        )

    def test_ablate(self):
        results = ablate(self.records, MODEL, small_config(steps=2), self.encoder, pretrain_steps=1)
        self.assertEqual(set(results), {"dual", "zero_coupling"})
        twin = results["zero_coupling"].checkpoint
        dual = results["dual"].checkpoint
        for name, value in twin.params.items():
            if name.startswith("cross."):
                np.testing.assert_array_equal(value, 0.0)
        self.assertTrue(any(dual.params[n].any() for n in dual.params if n.endswith(".wo") and n.startswith("cross.")))
        for name in twin.params:
            if name.startswith(("video.", "shared.")):
                np.testing.assert_array_equal(twin.params[name], dual.params[name])

    def test_pretraining_is_required(self):
        config = small_config(steps=1)
        with self.assertRaises(RejectedInput):
            ablate(self.records, MODEL, config, self.encoder, pretrain_steps=0)
        params = physflow.init_model(MODEL)
        with self.assertRaises(RejectedInput):
            pretrain_then_freeze(self.records, params, config, self.encoder, 0)

    def test_empty_records(self):
        with self.assertRaises(physflow.EmptyBatch):
            train_loop([], physflow.init_model(MODEL), small_config(), self.encoder)


@unittest.skipUnless(os.environ.get("PHYSFLOW_SLOW"), "set PHYSFLOW_SLOW=1 to run")
class OverfitTest(unittest.TestCase):
    def test_eight_records_loss_falls_tenfold(self):
        world = physflow.WorldConfig()
        generated = [
            physflow.generate_record(world, physflow.DatasetDistribution(), 33, i, 0) for i in range(8)
        ]
        records = [r for r, _ in generated]
        encoder = physflow.OracleEncoder(generated[0][1])
        params = physflow.init_model(physflow.ModelConfig(d=128, depth=2, heads=4, patch=8))
        config = TrainConfig(steps=2000)
        self.assertEqual(config.optimizer, OptimizerConfig())
        result = train_loop(records, params, config, encoder)
        self.assertEqual(len(result.records), 2000)
        self.assertLess(result.records[-1].L_v, 0.1 * result.records[0].L_v)


if __name__ == "__main__":
    unittest.main()
