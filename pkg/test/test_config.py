# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Run configuration tests."""

import json
import os
import tempfile
import unittest

from physflow.config import RunConfig, parse_config
from physflow.exceptions import InvalidConfiguration, PatchDivisibility


class ParseConfigTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def write(self, text):
        path = os.path.join(self.tmp.name, "run.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        return path

    def test_defaults(self):
        self.assertEqual(parse_config(), RunConfig())
        self.assertEqual(parse_config(self.write("")), RunConfig())
        self.assertEqual(parse_config(self.write("{}")), RunConfig())

    def test_file_values(self):
        config = parse_config(self.write('{"train": {"steps": 200}, "model": {"depth": 1}}'))
        self.assertEqual(config.train.steps, 200)
        self.assertEqual(config.model.depth, 1)
        self.assertEqual(config.model.d, RunConfig().model.d)

    def test_overrides(self):
        path = self.write('{"train": {"steps": 200}}')
        config = parse_config(
            path, ["train.steps=10", "sampler.method=heun", "world.radius_range=[1.5, 2.5]"]
        )
        self.assertEqual(config.train.steps, 10)
        self.assertEqual(config.sampler.method, "heun")
        self.assertEqual(config.world.radius_range, (1.5, 2.5))

    def test_unknown_key(self):
        with self.assertRaises(InvalidConfiguration) as cm:
            parse_config(overrides=["train.stpes=10"])
        self.assertEqual(cm.exception.key, "train.stpes")
        self.assertRaises(InvalidConfiguration, parse_config, self.write('{"decoder": {}}'))

    def test_bad_values(self):
        with self.assertRaises(InvalidConfiguration) as cm:
            parse_config(overrides=["train.steps=0"])
        self.assertEqual(cm.exception.key, "train.steps")
        self.assertRaises(InvalidConfiguration, parse_config, overrides=["sampler.method=rk4"])
        self.assertRaises(InvalidConfiguration, parse_config, overrides=["train.steps"])
        self.assertRaises(InvalidConfiguration, parse_config, overrides=["train=3", "train.steps=4"])

    def test_bad_files(self):
        self.assertRaises(InvalidConfiguration, parse_config, self.write("{not json"))
        self.assertRaises(InvalidConfiguration, parse_config, self.write("[1, 2]"))
        self.assertRaises(
            InvalidConfiguration, parse_config, os.path.join(self.tmp.name, "missing.json")
        )

    def test_dump_round_trip(self):
        config = parse_config(overrides=["train.steps=10", "eval.settings=[\"none\"]"])
        self.assertEqual(parse_config(self.write(config.dump())), config)
        self.assertEqual(json.loads(config.dump())["train"]["steps"], 10)


class ConversionTest(unittest.TestCase):
    def test_model_config(self):
        config = parse_config(
            overrides=["model.d=8", "model.depth=1", "model.heads=2", "data.ball_counts=[1, 2]"]
        )
        model = config.to_model_config()
        self.assertEqual(model.d, 8)
        self.assertEqual(model.cross_depths, (0,))
        self.assertEqual(model.physics_dim, 12)

    def test_patch_must_divide_frame(self):
        config = parse_config(overrides=["model.patch=5"])
        self.assertRaises(PatchDivisibility, config.to_model_config)

    def test_world_and_train(self):
        config = parse_config(
            overrides=["world.gravity=0", "data.seed=4", "schedule.ramp_steps=7", "optimizer.lr=0.01"]
        )
        world = config.to_world_config()
        self.assertEqual(world.gravity, 0.0)
        self.assertEqual(world.seed, 4)
        self.assertEqual(config.to_world_config(seed=9).seed, 9)
        train = config.to_train_config()
        self.assertEqual(train.ramp_steps, 7)
        self.assertEqual(train.optimizer.lr, 0.01)
        self.assertEqual(config.to_sampler_config().steps, config.sampler.steps)


if __name__ == "__main__":
    unittest.main()
