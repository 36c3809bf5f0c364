# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Command-line entry point.

.. code-block:: console

    physflow gen-data --config run.json
    physflow train --config run.json --set train.steps=200
    physflow sample --config run.json --set sampler.cond_frames=4
    physflow eval --config run.json
    physflow gradcheck
    physflow ablate --config run.json
"""

import argparse
import logging
import sys
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from physflow.config import RunConfig, parse_config
from physflow.constants import EXIT_CONFIG, EXIT_FAILURE, EXIT_NUMERIC, EXIT_OK
from physflow.dataset import SceneRecord, generate_record, make_dataset
from physflow.exceptions import (
    InvalidConfiguration,
    NumericAbort,
    PhysflowException,
    UnwritablePath,
)
from physflow.gradcheck import run_suite
from physflow.header import ContainerHeader
from physflow.metrics import MetricsRecord, compare_runs, evaluate_sequence, summarize
from physflow.model import ModelParams, init_model
from physflow.reader import load_checkpoint, read_dataset
from physflow.sampler import sample
from physflow.trainer import ablate, pretrain_then_freeze, train_loop
from physflow.world import OracleEncoder, WorldConfig
from physflow.writer import (
    AblationWriter,
    LossLogWriter,
    MetricsWriter,
    export_pgm,
    write_states_csv,
)

__all__ = ["main", "build_parser"]

logger = logging.getLogger("physflow")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON run configuration")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one configuration key, e.g. train.steps=10",
    )
    common.add_argument(
        "--print-config", action="store_true", help="print the resolved configuration and exit"
    )
    common.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )

    parser = argparse.ArgumentParser(
        prog="physflow", description="Joint video and physics flow matching on a 2D world"
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("gen-data", parents=[common], help="generate train and held-out datasets")
    commands.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    commands.add_parser("sample", parents=[common], help="generate clips from a checkpoint")
    commands.add_parser("eval", parents=[common], help="score generated clips against ground truth")
    commands.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    commands.add_parser("ablate", parents=[common], help="dual-branch versus zero-coupling")
    return parser


def _prepare(path: str) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
    except OSError as ex:
        raise UnwritablePath(target.parent) from ex
    return target


def _open(path: str):
    target = _prepare(path)
    try:
        return open(target, "w", newline="")
    except OSError as ex:
        raise UnwritablePath(target) from ex


def _dataset(config: RunConfig, key: str) -> tuple[ContainerHeader, list[SceneRecord]]:
    path = getattr(config.paths, key)
    try:
        header, records = read_dataset(path)
    except OSError as ex:
        raise InvalidConfiguration(f"paths.{key}", f"cannot read {path}") from ex
    world = config.world
    if (header.height, header.width) != (world.height, world.width):
        raise InvalidConfiguration(
            "world.height", f"{path} holds {header.height}x{header.width} frames"
        )
    return header, records


def _encoder_world(config: RunConfig, header: ContainerHeader) -> WorldConfig:
    return replace(config.to_world_config(), velocity_cap=header.velocity_cap)


def _load_params(config: RunConfig) -> ModelParams:
    try:
        checkpoint = load_checkpoint(config.paths.checkpoint)
    except OSError as ex:
        raise InvalidConfiguration("paths.checkpoint", f"cannot read {config.paths.checkpoint}") from ex
    return checkpoint.to_params()


def cmd_gen_data(config: RunConfig) -> int:
    world = config.to_world_config()
    distribution = config.to_distribution()
    data = config.data
    make_dataset(
        _prepare(config.paths.dataset),
        world,
        data.count,
        config.world.frames,
        distribution,
        seed=data.seed,
    )
    make_dataset(
        _prepare(config.paths.eval_dataset),
        world,
        data.eval_count,
        config.world.frames,
        distribution,
        seed=data.seed,
        start=data.count,
    )
    return EXIT_OK


def cmd_train(config: RunConfig) -> int:
    header, records = _dataset(config, "dataset")
    encoder = OracleEncoder(_encoder_world(config, header))
    params = init_model(config.to_model_config(), config.model.seed)
    train_config = config.to_train_config()
    writer = LossLogWriter(_open(config.paths.loss_log))
    checkpoint = _prepare(config.paths.checkpoint)
    try:
        if config.train.regime == "pretrain_then_freeze":
            _require_pretraining(config)
            result = pretrain_then_freeze(
                records,
                params,
                train_config,
                encoder,
                config.train.pretrain_steps,
                log_writer=writer,
                checkpoint_path=checkpoint,
            )
        else:
            result = train_loop(
                records, params, train_config, encoder, log_writer=writer, checkpoint_path=checkpoint
            )
    finally:
        writer.close()
    last = result.records[-1]
    logger.info("finished: L_v %.6f L_z %.6f after %d steps", last.L_v, last.L_z, last.step)
    return EXIT_OK


def cmd_sample(config: RunConfig) -> int:
    header, records = _dataset(config, "eval_dataset")
    encoder = OracleEncoder(_encoder_world(config, header))
    params = _load_params(config)
    if config.sampler.cond_frames >= header.frames:
        raise InvalidConfiguration(
            "sampler.cond_frames", f"must be below the clip length {header.frames}"
        )
    chosen = records[: config.sampler.count]
    results = sample(
        params,
        chosen,
        encoder,
        np.random.default_rng(config.sampler.seed),
        cond_frames=config.sampler.cond_frames,
        config=config.to_sampler_config(),
    )
    root = Path(config.paths.samples)
    for i, result in enumerate(results):
        directory = root / f"seq_{i:03d}"
        export_pgm(result.frames, directory)
        np.save(directory / "frames.npy", result.frames)
        write_states_csv(directory / "states.csv", result.states.balls)
    logger.info("wrote %d samples to %s", len(results), root)
    return EXIT_OK


def _setting_frames(setting: str, frames: int, k_max: Optional[int]) -> int:
    if setting == "none":
        return 0
    if setting == "single":
        return 1
    return min(frames - 1, k_max or max(1, frames // 3))


def _evaluate(
    config: RunConfig,
    params: ModelParams,
    records: Sequence[SceneRecord],
    encoder: OracleEncoder,
    setting: str,
) -> list[MetricsRecord]:
    """Sample and score the first ``eval.sequences`` held-out records."""
    world = config.to_world_config()
    distribution = config.to_distribution()
    count = min(config.eval.sequences, len(records))
    frames = records[0].length
    k = _setting_frames(setting, frames, config.eval.k_max)
    rng = np.random.default_rng(config.sampler.seed)
    scored = []
    chunk = config.sampler.count
    for start in range(0, count, chunk):
        batch = records[start : min(count, start + chunk)]
        results = sample(params, batch, encoder, rng, cond_frames=k, config=config.to_sampler_config())
        for offset, result in enumerate(results):
            index = config.data.count + start + offset
            _, truth = generate_record(world, distribution, frames, index, config.data.seed)
            record = batch[offset]
            scored.append(
                evaluate_sequence(
                    result.frames,
                    result.states,
                    truth,
                    record.force,
                    cond_frames=k,
                    tau=config.eval.tau,
                    perturbation=config.eval.perturbation,
                )
            )
    return scored


def cmd_eval(config: RunConfig) -> int:
    header, records = _dataset(config, "eval_dataset")
    encoder = OracleEncoder(_encoder_world(config, header))
    params = _load_params(config)
    writer = MetricsWriter(_open(config.paths.metrics))
    try:
        for setting in config.eval.settings:
            scored = _evaluate(config, params, records, encoder, setting)
            for i, record in enumerate(scored):
                writer.write(record.as_row(i, setting))
            mean = summarize(scored)
            writer.write(mean.as_row("mean", setting))
            logger.info(
                "%s: physics_iq %.2f, mse %.5f over %d sequences",
                setting,
                mean.physics_iq,
                mean.mse,
                len(scored),
            )
    finally:
        writer.close()
    return EXIT_OK


def cmd_gradcheck(config: RunConfig) -> int:
    results = run_suite(seed=config.train.seed)
    for result in results:
        status = "ok" if result.passed else "FAIL"
        print(f"{result.name:<20} {result.error:.3e}  (< {result.tolerance:g})  {status}")
    worst = max(r.error for r in results)
    if all(r.passed for r in results):
        logger.info("gradient checks passed, worst relative error %.3e", worst)
        return EXIT_OK
    logger.error("gradient checks failed, worst relative error %.3e", worst)
    return EXIT_FAILURE


def _require_pretraining(config: RunConfig) -> None:
    if config.train.pretrain_steps < 1:
        raise InvalidConfiguration(
            "train.pretrain_steps", "must be at least 1 when the video branch is frozen"
        )


def cmd_ablate(config: RunConfig) -> int:
    _require_pretraining(config)
    _, records = _dataset(config, "dataset")
    header, held_out = _dataset(config, "eval_dataset")
    encoder = OracleEncoder(_encoder_world(config, header))
    model_config = config.to_model_config()
    writer = AblationWriter(_open(str(Path(config.paths.run_dir) / "ablation.csv")))
    wins = 0
    try:
        for seed in config.eval.seeds:
            trained = ablate(
                records,
                model_config,
                replace(config.to_train_config(), seed=seed),
                encoder,
                config.train.pretrain_steps,
                seed=seed,
            )
            scored = {
                name: _evaluate(config, result.checkpoint.to_params(), held_out, encoder, "single")
                for name, result in trained.items()
            }
            rows = {row["model"]: row for row in compare_runs(scored)}
            for row in rows.values():
                writer.write({"seed": seed, **row})
                print(
                    f"seed {seed} {row['model']:<14} bounce {row['median_bounce_timing_error']:6.2f}"
                    f"  rmse {row['median_trajectory_rmse']:7.3f}  physics_iq {row['physics_iq']:6.2f}"
                )
            dual, twin = rows["dual"], rows["zero_coupling"]
            if (
                dual["median_bounce_timing_error"] < twin["median_bounce_timing_error"]
                and dual["median_trajectory_rmse"] < twin["median_trajectory_rmse"]
            ):
                wins += 1
    finally:
        writer.close()
    print(f"dual-branch ahead on both physics metrics in {wins} of {len(config.eval.seeds)} seeds")
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def _attach_run_log(config: RunConfig) -> logging.Handler:
    run_dir = Path(config.paths.run_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(run_dir / "run.log")
    except OSError as ex:
        raise UnwritablePath(run_dir) from ex
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    handler = None
    try:
        config = parse_config(args.config, args.overrides)
        if args.print_config:
            print(config.dump())
            return EXIT_OK
        handler = _attach_run_log(config)
        logger.info("physflow %s, resolved configuration:\n%s", args.command, config.dump())
        return HANDLERS[args.command](config)
    except InvalidConfiguration as ex:
        print(f"physflow: configuration error: {ex}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as ex:
        logger.error("%s", ex)
        print(f"physflow: numeric abort: {ex}", file=sys.stderr)
        return EXIT_NUMERIC
    except PhysflowException as ex:
        print(f"physflow: {ex}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()
