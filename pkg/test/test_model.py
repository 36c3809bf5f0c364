# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Dual-branch model tests."""

import math
import unittest

import numpy as np

from physflow.exceptions import (
    InvalidModelConfig,
    PatchDivisibility,
    ShapeMismatch,
    TokenOverflow,
)
from physflow.gradcheck import MODEL_TOLERANCE, check_model
from physflow.header import ScenarioDescriptor
from physflow.model import (
    Checkpoint,
    ModelConfig,
    ModelParams,
    attention,
    forward,
    init_model,
    parameter_shapes,
    patchify,
    predict,
    unpatchify,
    vis_attention,
)
from physflow.tensor import Graph, Tensor
from physflow.trainer import joint_loss

SMALL = ModelConfig(d=8, depth=2, heads=2, patch=4, context_vocab=8, max_tokens=64)


def naive_attention(queries, sources, w, heads):
    d = w["wq"].shape[0]
    dh = d // heads
    q, k, v = queries @ w["wq"], sources @ w["wk"], sources @ w["wv"]
    out = np.zeros((queries.shape[0], d))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(queries.shape[0]):
            scores = [sum(q[i, cols] * k[j, cols]) / math.sqrt(dh) for j in range(sources.shape[0])]
            top = max(scores)
            weights = [math.exp(s - top) for s in scores]
            total = sum(weights)
            for j in range(sources.shape[0]):
                out[i, cols] += weights[j] / total * v[j, cols]
    return out @ w["wo"] + w["bo"]


def random_params(config, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    return ModelParams(
        config, {name: rng.normal(0.0, scale, shape) for name, shape, _ in parameter_shapes(config)}
    )


def inputs(config, frames=3, batch=1, seed=0, force=True):
    rng = np.random.default_rng(seed)
    per_frame = (16 // config.patch) ** 2
    video = rng.standard_normal((batch, frames * per_frame, config.video_dim))
    physics = rng.standard_normal((batch, frames, config.physics_dim))
    frame_time = np.full((batch, frames), 0.5)
    cond_mask = np.zeros((batch, frames), dtype=bool)
    contexts = [ScenarioDescriptor([1, 1, 3, 0, 0, 0, 0, 0])] * batch
    tokens = rng.standard_normal((batch, frames, 4)) if force else None
    return video, physics, frame_time, cond_mask, contexts, tokens


class AttentionTest(unittest.TestCase):
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            heads = int(rng.choice([1, 2, 4]))
            d = heads * int(rng.integers(1, 4))
            n, m = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            w = {key: rng.standard_normal((d, d)) for key in ("wq", "wk", "wv", "wo")}
            w["bo"] = rng.standard_normal(d)
            queries, sources = rng.standard_normal((n, d)), rng.standard_normal((m, d))
            out = attention(Tensor(queries), Tensor(sources), {k: Tensor(v) for k, v in w.items()}, heads)
            np.testing.assert_allclose(
                out.data, naive_attention(queries, sources, w, heads), rtol=1e-9, atol=1e-9
            )

    def test_vis_attention_ignores_source_order(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            w = {key: Tensor(rng.standard_normal((8, 8))) for key in ("wq", "wk", "wv", "wo")}
            w["bo"] = Tensor(rng.standard_normal(8))
            h_v = rng.standard_normal((1, 6, 8))
            h_z = rng.standard_normal((1, 5, 8))
            order = rng.permutation(5)
            out = vis_attention(Tensor(h_v), Tensor(h_z), w, 2)
            shuffled = vis_attention(Tensor(h_v), Tensor(h_z[:, order]), w, 2)
            np.testing.assert_allclose(shuffled.data, out.data, rtol=1e-12, atol=1e-12)

    def test_zero_output_projection(self):
        rng = np.random.default_rng(0)
        w = {key: Tensor(rng.standard_normal((4, 4))) for key in ("wq", "wk", "wv")}
        w["wo"], w["bo"] = Tensor(np.zeros((4, 4))), Tensor(np.zeros(4))
        out = attention(Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((2, 4))), w, 2)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_width_mismatch(self):
        w = {key: Tensor(np.eye(4)) for key in ("wq", "wk", "wv", "wo")}
        w["bo"] = Tensor(np.zeros(4))
        with self.assertRaises(ShapeMismatch):
            attention(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 3))), w, 2)


class PatchTest(unittest.TestCase):
    def test_inverse(self):
        frames = np.random.default_rng(0).random((3, 8, 12))
        tokens = patchify(frames, 4)
        self.assertEqual(tokens.shape, (3 * 2 * 3, 16))
        np.testing.assert_array_equal(unpatchify(tokens, 3, 8, 12, 4), frames)

    def test_row_major_order(self):
        frames = np.arange(16.0).reshape(1, 4, 4)
        tokens = patchify(frames, 2)
        np.testing.assert_array_equal(tokens[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(tokens[1], [2, 3, 6, 7])
        np.testing.assert_array_equal(tokens[2], [8, 9, 12, 13])

    def test_divisibility(self):
        self.assertRaises(PatchDivisibility, patchify, np.zeros((1, 6, 8)), 4)
        self.assertRaises(PatchDivisibility, SMALL.check_frame, 18, 16)


class ConfigTest(unittest.TestCase):
    def test_default_cross_depths(self):
        self.assertEqual(ModelConfig(depth=4).cross_depths, (1, 3))
        self.assertEqual(ModelConfig(depth=1).cross_depths, (0,))
        self.assertEqual(ModelConfig(depth=6, cross_depths=(5, 0, 5)).cross_depths, (0, 5))

    def test_invalid(self):
        self.assertRaises(InvalidModelConfig, ModelConfig, d=10, heads=4)
        self.assertRaises(InvalidModelConfig, ModelConfig, depth=2, cross_depths=(2,))
        self.assertRaises(InvalidModelConfig, ModelConfig, context_vocab=4)

    def test_dict_round_trip(self):
        self.assertEqual(ModelConfig.from_dict(SMALL.to_dict()), SMALL)


class ParamsTest(unittest.TestCase):
    def test_count(self):
        c = SMALL
        d, hidden = c.d, c.mlp_ratio * c.d

        def branch(dim):
            block = 4 * d * d + d + d * hidden + hidden + hidden * d + d + d * 4 * d + 4 * d
            return dim * d + d + c.max_tokens * d + c.depth * block + d * 2 * d + 2 * d + d * dim + dim

        params = init_model(c)
        self.assertEqual(params.count("video"), branch(16))
        self.assertEqual(params.count("physics"), branch(6) + 4 * d + d)
        self.assertEqual(params.count("cross"), len(c.cross_depths) * 2 * (4 * d * d + d))
        self.assertEqual(params.count("shared"), 2 * (d * d + d) + 8 * c.context_vocab * d)
        self.assertEqual(params.count(), sum(params.count(p) for p in ("video", "physics", "cross", "shared")))

    def test_init_is_seeded(self):
        a, b = init_model(SMALL, seed=1), init_model(SMALL, seed=1)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)
        self.assertFalse(np.array_equal(init_model(SMALL, seed=2)["video.embed.w"].data, a["video.embed.w"].data))

    def test_init_bounds(self):
        params = init_model(SMALL)
        self.assertLessEqual(np.abs(params["video.0.attn.wq"].data).max(), 0.04)
        np.testing.assert_array_equal(params["video.head.w"].data, 0.0)
        np.testing.assert_array_equal(params["cross.1.vis.wo"].data, 0.0)

    def test_freeze(self):
        params = init_model(SMALL)
        params.freeze("video", "shared")
        names = params.trainable_names()
        self.assertTrue(names)
        self.assertTrue(all(n.split(".")[0] in ("physics", "cross") for n in names))
        self.assertEqual(params.frozen_flags(), {"video": True, "physics": False, "cross": False, "shared": True})
        self.assertRaises(InvalidModelConfig, params.freeze, "decoder")
        params.unfreeze("video")
        self.assertIn("video.embed.w", params.trainable_names())

    def test_copy_is_independent(self):
        params = init_model(SMALL)
        other = params.copy()
        other.zero_cross()
        other["video.embed.w"].data[0, 0] = 9.0
        self.assertNotEqual(params["video.embed.w"].data[0, 0], 9.0)
        self.assertTrue(all(not other[n].data.any() for n in other.names("cross")))

    def test_checkpoint_params(self):
        params = init_model(SMALL)
        params.freeze("physics")
        restored = Checkpoint.from_params(params).to_params()
        self.assertEqual(restored.frozen, {"physics"})
        np.testing.assert_array_equal(restored["shared.context"].data, params["shared.context"].data)


class ForwardTest(unittest.TestCase):
    def test_shapes_and_zero_heads(self):
        params = init_model(SMALL)
        args = inputs(SMALL, batch=2)
        u_v, u_z = predict(params, *args)
        self.assertEqual(u_v.shape, args[0].shape)
        self.assertEqual(u_z.shape, args[1].shape)
        np.testing.assert_array_equal(u_v, 0.0)
        np.testing.assert_array_equal(u_z, 0.0)

    def test_without_force(self):
        params = random_params(SMALL)
        u_v, u_z = predict(params, *inputs(SMALL, force=False))
        self.assertEqual(u_z.shape, (1, 3, 6))

    def test_zero_coupling_isolates_branches(self):
        params = random_params(SMALL)
        params.zero_cross()
        video, physics, frame_time, cond_mask, contexts, force = inputs(SMALL)
        base_v, base_z = predict(params, video, physics, frame_time, cond_mask, contexts, force)
        moved_v, _ = predict(params, video, physics + 1.0, frame_time, cond_mask, contexts, force)
        _, moved_z = predict(params, video + 1.0, physics, frame_time, cond_mask, contexts, force)
        np.testing.assert_array_equal(moved_v, base_v)
        np.testing.assert_array_equal(moved_z, base_z)

    def test_coupling_mixes_branches(self):
        params = random_params(SMALL)
        video, physics, frame_time, cond_mask, contexts, force = inputs(SMALL)
        base_v, _ = predict(params, video, physics, frame_time, cond_mask, contexts, force)
        moved_v, _ = predict(params, video, physics + 1.0, frame_time, cond_mask, contexts, force)
        self.assertFalse(np.allclose(moved_v, base_v))

    def test_conditioning_frames_ignore_frame_time(self):
        params = random_params(SMALL)
        video, physics, _, _, contexts, force = inputs(SMALL)
        cond_mask = np.array([[True, False, False]])
        a = predict(params, video, physics, np.array([[0.3, 0.5, 0.5]]), cond_mask, contexts, force)
        b = predict(params, video, physics, np.array([[0.9, 0.5, 0.5]]), cond_mask, contexts, force)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_context_changes_output(self):
        params = random_params(SMALL)
        video, physics, frame_time, cond_mask, _, force = inputs(SMALL)
        a = predict(params, video, physics, frame_time, cond_mask, [ScenarioDescriptor([1] * 8)], force)
        b = predict(params, video, physics, frame_time, cond_mask, [ScenarioDescriptor([2] * 8)], force)
        self.assertFalse(np.allclose(a[0], b[0]))

    def test_token_overflow(self):
        config = ModelConfig(d=8, depth=1, heads=2, patch=4, context_vocab=8, max_tokens=40)
        params = init_model(config)
        with self.assertRaises(TokenOverflow):
            forward(params, *inputs(config, frames=3))

    def test_shape_mismatch(self):
        params = init_model(SMALL)
        video, physics, frame_time, cond_mask, contexts, force = inputs(SMALL)
        with self.assertRaises(ShapeMismatch):
            forward(params, video[..., :8], physics, frame_time, cond_mask, contexts, force)
        with self.assertRaises(ShapeMismatch):
            forward(params, video, physics[..., :4], frame_time, cond_mask, contexts, force)

    def test_gradients_match_finite_differences(self):
        result = check_model(0)
        self.assertTrue(result.passed)
        self.assertLess(result.error, MODEL_TOLERANCE)

    def test_gradient_check_subset(self):
        config = ModelConfig(d=8, depth=1, heads=2, patch=4, context_vocab=8, max_tokens=16, physics_dim=6)
        names = init_model(config).names("cross")
        self.assertTrue(names)
        self.assertTrue(check_model(1, names=names).passed)


class CouplingTest(unittest.TestCase):
    def test_video_gradients_ignore_alpha_without_coupling(self):
        params = random_params(SMALL, seed=5)
        params.zero_cross()
        params.freeze("cross")
        trainable = params.trainable_names()
        for name in params:
            params[name].requires_grad = name in trainable
        video_names = params.names("video")
        video, physics, frame_time, cond_mask, contexts, force = inputs(SMALL, seed=5)
        rng = np.random.default_rng(6)
        target_v = rng.standard_normal(video.shape)
        target_z = rng.standard_normal(physics.shape)

        grads = []
        for alpha in (0.3, 2.0):
            with Graph() as graph:
                u_v, u_z = forward(params, video, physics, frame_time, cond_mask, contexts, force)
                total, _, loss_z = joint_loss(u_v, u_z, target_v, target_z, cond_mask, alpha)
            graph.backward(total, leaves=[params[n] for n in trainable])
            self.assertGreater(loss_z.item(), 0.0)
            grads.append({n: params[n].grad.copy() for n in video_names})
        for name in video_names:
            np.testing.assert_allclose(grads[1][name], grads[0][name], rtol=1e-12, atol=0.0, err_msg=name)
        self.assertTrue(any(g.any() for g in grads[0].values()))


if __name__ == "__main__":
    unittest.main()
