# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Sampler tests."""

import unittest

import numpy as np

from physflow.dataset import DatasetDistribution, generate_record
from physflow.exceptions import EmptyBatch, InvalidConfiguration, RejectedInput
from physflow.model import ModelConfig, ModelParams, init_model, parameter_shapes
from physflow.sampler import SamplerConfig, sample
from physflow.world import OracleEncoder, WorldConfig

WORLD = WorldConfig(height=16, width=16, radius_range=(1.5, 3.0), velocity_range=(-8.0, 8.0))
CONFIG = ModelConfig(d=8, depth=1, heads=2, patch=4, context_vocab=8, max_tokens=128)
FRAMES = 4


def make_records(count=2):
    out = [generate_record(WORLD, DatasetDistribution(), FRAMES, i, 2) for i in range(count)]
    return [r for r, _ in out], OracleEncoder(out[0][1])


def random_params(seed=0):
    rng = np.random.default_rng(seed)
    return ModelParams(
        CONFIG, {name: rng.normal(0.0, 0.2, shape) for name, shape, _ in parameter_shapes(CONFIG)}
    )


class SampleTest(unittest.TestCase):
    def test_full_prefix_is_reproduced(self):
        records, encoder = make_records()
        results = sample(
            random_params(), records, encoder, np.random.default_rng(0), cond_frames=FRAMES - 1,
            config=SamplerConfig(steps=3),
        )
        for record, result in zip(records, results):
            np.testing.assert_array_equal(result.frames[: FRAMES - 1], record.frames[: FRAMES - 1])
            np.testing.assert_array_equal(
                result.latents[: FRAMES - 1], encoder.encode(record.states)[: FRAMES - 1]
            )
            self.assertEqual(result.cond_frames, FRAMES - 1)

    def test_untrained_model_returns_noise(self):
        records, encoder = make_records(1)
        (result,) = sample(init_model(CONFIG), records, encoder, np.random.default_rng(7), config=SamplerConfig(steps=2))
        rng = np.random.default_rng(7)
        noise_video = rng.standard_normal((FRAMES * 16, 16))
        noise_physics = rng.standard_normal((FRAMES, 6))
        np.testing.assert_array_equal(result.latents, noise_physics)
        self.assertEqual(result.frames.shape, (FRAMES, 16, 16))
        self.assertEqual(result.frames.max(), min(1.0, noise_video.max()))

    def test_outputs(self):
        records, encoder = make_records()
        results = sample(random_params(), records, encoder, np.random.default_rng(1), config=SamplerConfig(steps=2, method="heun"))
        self.assertEqual(len(results), 2)
        for result in results:
            self.assertTrue(np.all((result.frames >= 0) & (result.frames <= 1)))
            self.assertEqual(result.states.balls.shape, (FRAMES, 1, 6))

    def test_deterministic(self):
        records, encoder = make_records()
        a = sample(random_params(), records, encoder, np.random.default_rng(3), config=SamplerConfig(steps=2))
        b = sample(random_params(), records, encoder, np.random.default_rng(3), config=SamplerConfig(steps=2))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.frames, y.frames)
            np.testing.assert_array_equal(x.latents, y.latents)

    def test_rejects(self):
        records, encoder = make_records()
        rng = np.random.default_rng(0)
        params = init_model(CONFIG)
        self.assertRaises(EmptyBatch, sample, params, [], encoder, rng)
        self.assertRaises(RejectedInput, sample, params, records, encoder, rng, cond_frames=FRAMES)
        self.assertRaises(InvalidConfiguration, SamplerConfig, steps=0)
        self.assertRaises(InvalidConfiguration, SamplerConfig, method="rk4")


if __name__ == "__main__":
    unittest.main()
