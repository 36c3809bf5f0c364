# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Constants for physflow."""

DATASET_MAGIC = b"PHNT"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"PHCK"
CHECKPOINT_VERSION = 1

# magic, version, N, T, H, W, K, D_z, flags, velocity cap, force cap
HEADER_FORMAT = "<4sHIHHHHHHff"
DESCRIPTOR_LEN = 8
DESCRIPTOR_FORMAT = "<8H"
# apply frame, duration, coordx, coordy, magnitude, angle
FORCE_FORMAT = "<6f"

FLAG_FORCE_CHANNEL = 0x0001

BALL_FIELDS = ("x", "y", "vx", "vy", "radius", "active")
BALL_FIELD_COUNT = len(BALL_FIELDS)
FORCE_TOKEN_DIM = 4
MAX_BALLS = 3

FORCE_SIGMA = 2.0
DEFAULT_VELOCITY_CAP = 50.0
CEILING_FLOOR = 1e-6

LOSS_LOG_COLUMNS = (
    "step",
    "L_v",
    "L_z",
    "L_total",
    "alpha_z",
    "grad_norm_z",
    "reset_count",
    "lr",
    "clipped",
)
METRICS_COLUMNS = (
    "sequence",
    "setting",
    "spatial_iou",
    "spatiotemporal_iou",
    "weighted_spatial_iou",
    "mse",
    "physics_iq",
    "bounce_timing_error",
    "trajectory_rmse",
)
ABLATION_COLUMNS = (
    "seed",
    "model",
    "median_bounce_timing_error",
    "median_trajectory_rmse",
    "physics_iq",
    "mse",
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
