# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""The dual-branch velocity model.

A video branch runs over patch tokens and a physics branch over per-frame
physics tokens (followed by per-frame force tokens). Both branches are
stacks of adaptive-norm transformer blocks conditioned on the per-token
flow time and the scenario descriptor. At the coupled depths the branches
exchange information through a pair of cross-attentions:

    h_v <- h_v + VisAttention(h_v, h_z)
    h_z <- h_z + PhyAttention(h_z, h_v)

Both attentions read the hidden states from before the update.

Parameter names start with their partition: ``video``, ``physics``,
``cross`` or ``shared`` (time MLP and context table).
"""

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any, Optional, Union

import numpy as np

from physflow.constants import DESCRIPTOR_LEN, FORCE_TOKEN_DIM
from physflow.exceptions import (
    InvalidModelConfig,
    PatchDivisibility,
    ShapeMismatch,
    TokenOverflow,
)
from physflow.header import ScenarioDescriptor
from physflow.optim import AdamState
from physflow.tensor import (
    Tensor,
    concat,
    gelu,
    layer_norm,
    matmul,
    reshape,
    silu,
    softmax_rows,
    take,
    transpose,
)

__all__ = [
    "PARTITIONS",
    "ModelConfig",
    "ModelParams",
    "Checkpoint",
    "patchify",
    "unpatchify",
    "init_model",
    "attention",
    "vis_attention",
    "phy_attention",
    "forward",
    "predict",
    "time_embedding",
]

logger = logging.getLogger("physflow")

PARTITIONS = ("video", "physics", "cross", "shared")
ATTENTION_WEIGHTS = ("wq", "wk", "wv", "wo", "bo")
INIT_STD = 0.02
TIME_SCALE = 1000.0


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the dual-branch model.

    `cross_depths` defaults to ``{depth/2 - 1, depth - 1}``.
    """

    d: int = 64
    depth: int = 2
    heads: int = 4
    patch: int = 8
    cross_depths: Optional[tuple[int, ...]] = None
    context_vocab: int = 32
    max_tokens: int = 1024
    physics_dim: int = 6
    mlp_ratio: int = 4
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise InvalidModelConfig("model.heads", f"width {self.d} is not divisible by {self.heads} heads")
        if self.depth < 1:
            raise InvalidModelConfig("model.depth", "must be at least 1")
        if self.patch < 1:
            raise InvalidModelConfig("model.patch", "must be at least 1")
        if self.context_vocab < 8:
            raise InvalidModelConfig("model.context_vocab", "must be at least 8")
        if self.max_tokens < 1:
            raise InvalidModelConfig("model.max_tokens", "must be positive")
        if self.physics_dim < 1:
            raise InvalidModelConfig("model.physics_dim", "must be positive")
        if self.mlp_ratio < 1:
            raise InvalidModelConfig("model.mlp_ratio", "must be positive")
        if self.cross_depths is None:
            default = sorted({max(0, self.depth // 2 - 1), self.depth - 1})
            object.__setattr__(self, "cross_depths", tuple(default))
        else:
            object.__setattr__(self, "cross_depths", tuple(sorted(set(self.cross_depths))))
        if any(not 0 <= i < self.depth for i in self.cross_depths):
            raise InvalidModelConfig("model.cross_depths", f"indices must lie in [0, {self.depth})")

    @property
    def video_dim(self) -> int:
        return self.patch * self.patch

    def to_dict(self) -> dict:
        out = asdict(self)
        out["cross_depths"] = list(self.cross_depths)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        data = dict(data)
        if data.get("cross_depths") is not None:
            data["cross_depths"] = tuple(data["cross_depths"])
        return cls(**data)

    def check_frame(self, height: int, width: int) -> None:
        if height % self.patch or width % self.patch:
            raise PatchDivisibility(height, width, self.patch)


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """``(T, H, W)`` frames to ``(T * H/p * W/p, p*p)`` tokens, row-major."""
    t, h, w = frames.shape
    if h % patch or w % patch:
        raise PatchDivisibility(h, w, patch)
    gh, gw = h // patch, w // patch
    blocks = frames.reshape(t, gh, patch, gw, patch).transpose(0, 1, 3, 2, 4)
    return blocks.reshape(t * gh * gw, patch * patch)


def unpatchify(tokens: np.ndarray, frames: int, height: int, width: int, patch: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    if height % patch or width % patch:
        raise PatchDivisibility(height, width, patch)
    gh, gw = height // patch, width // patch
    if tokens.shape != (frames * gh * gw, patch * patch):
        raise ShapeMismatch("unpatchify", tokens.shape, (frames * gh * gw, patch * patch))
    blocks = tokens.reshape(frames, gh, gw, patch, patch).transpose(0, 1, 3, 2, 4)
    return blocks.reshape(frames, height, width)


def _truncated_normal(rng: np.random.Generator, shape: tuple, std: float = INIT_STD) -> np.ndarray:
    values = rng.standard_normal(shape)
    outside = np.abs(values) > 2.0
    while np.any(outside):
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return values * std


class ModelParams:
    """Named parameter tensors plus per-partition freeze flags."""

    def __init__(self, config: ModelConfig, arrays: Mapping[str, np.ndarray]) -> None:
        self.config = config
        self.tensors: dict[str, Tensor] = {
            name: Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
            for name, value in arrays.items()
        }
        self.frozen: set[str] = set()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    @staticmethod
    def partition(name: str) -> str:
        return name.split(".", 1)[0]

    def names(self, partition: Optional[str] = None) -> list[str]:
        return [n for n in self.tensors if partition is None or self.partition(n) == partition]

    def freeze(self, *partitions: str) -> None:
        for p in partitions:
            if p not in PARTITIONS:
                raise InvalidModelConfig("train.freeze", f"unknown partition {p!r}")
            self.frozen.add(p)

    def unfreeze(self, *partitions: str) -> None:
        self.frozen.difference_update(partitions)

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if self.partition(n) not in self.frozen]

    def frozen_flags(self) -> dict[str, bool]:
        return {p: p in self.frozen for p in PARTITIONS}

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            tensor = self.tensors[name]
            if tensor.shape != value.shape:
                raise ShapeMismatch("load", tensor.shape, value.shape)
            tensor.data = np.array(value, dtype=np.float64)

    def copy(self) -> "ModelParams":
        other = ModelParams(self.config, self.arrays())
        other.frozen = set(self.frozen)
        return other

    def zero_cross(self) -> None:
        """Zero every cross-attention weight (the zero-coupling ablation)."""
        for name in self.names("cross"):
            self.tensors[name].data = np.zeros_like(self.tensors[name].data)

    def count(self, partition: Optional[str] = None) -> int:
        return int(sum(self.tensors[n].size for n in self.names(partition)))


def _branch_shapes(prefix: str, config: ModelConfig, in_dim: int, out_dim: int) -> list[tuple[str, tuple, str]]:
    d, hidden = config.d, config.mlp_ratio * config.d
    shapes = [
        (f"{prefix}.embed.w", (in_dim, d), "normal"),
        (f"{prefix}.embed.b", (d,), "zeros"),
        (f"{prefix}.pos", (config.max_tokens, d), "normal"),
    ]
    for i in range(config.depth):
        block = f"{prefix}.{i}"
        shapes += [(f"{block}.attn.{w}", (d, d), "normal") for w in ("wq", "wk", "wv", "wo")]
        shapes += [
            (f"{block}.attn.bo", (d,), "zeros"),
            (f"{block}.mlp.w1", (d, hidden), "normal"),
            (f"{block}.mlp.b1", (hidden,), "zeros"),
            (f"{block}.mlp.w2", (hidden, d), "normal"),
            (f"{block}.mlp.b2", (d,), "zeros"),
            (f"{block}.ada.w", (d, 4 * d), "normal"),
            (f"{block}.ada.b", (4 * d,), "zeros"),
        ]
    shapes += [
        (f"{prefix}.head.ada.w", (d, 2 * d), "normal"),
        (f"{prefix}.head.ada.b", (2 * d,), "zeros"),
        (f"{prefix}.head.w", (d, out_dim), "zeros"),
        (f"{prefix}.head.b", (out_dim,), "zeros"),
    ]
    return shapes


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """``(name, shape, init)`` for every parameter, in creation order."""
    d = config.d
    shapes = _branch_shapes("video", config, config.video_dim, config.video_dim)
    shapes += _branch_shapes("physics", config, config.physics_dim, config.physics_dim)
    shapes += [
        ("physics.force_embed.w", (FORCE_TOKEN_DIM, d), "normal"),
        ("physics.force_embed.b", (d,), "zeros"),
    ]
    for i in config.cross_depths:
        for side in ("vis", "phy"):
            prefix = f"cross.{i}.{side}"
            shapes += [(f"{prefix}.{w}", (d, d), "normal") for w in ("wq", "wk", "wv")]
            shapes += [(f"{prefix}.wo", (d, d), "zeros"), (f"{prefix}.bo", (d,), "zeros")]
    shapes += [
        ("shared.time.w1", (d, d), "normal"),
        ("shared.time.b1", (d,), "zeros"),
        ("shared.time.w2", (d, d), "normal"),
        ("shared.time.b2", (d,), "zeros"),
        ("shared.context", (DESCRIPTOR_LEN * config.context_vocab, d), "normal"),
    ]
    return shapes


def init_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Truncated-normal projections; zero heads, biases and cross outputs."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape, kind in parameter_shapes(config):
        arrays[name] = _truncated_normal(rng, shape) if kind == "normal" else np.zeros(shape)
    params = ModelParams(config, arrays)
    logger.debug("initialised %d parameters in %d tensors", params.count(), len(params))
    return params


@dataclass
class Checkpoint:
    """Everything needed to resume or sample."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    frozen_flags: dict[str, bool] = field(default_factory=dict)
    optimizer: AdamState = field(default_factory=AdamState)
    schedule: dict = field(default_factory=dict)
    step: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_params(cls, params: ModelParams, **kwargs) -> "Checkpoint":
        arrays = {k: v.copy() for k, v in params.arrays().items()}
        return cls(config=params.config, params=arrays, frozen_flags=params.frozen_flags(), **kwargs)

    def to_params(self) -> ModelParams:
        params = ModelParams(self.config, self.params)
        params.freeze(*[p for p, frozen in self.frozen_flags.items() if frozen])
        return params

    def meta(self) -> dict:
        return {
            "model": self.config.to_dict(),
            "schedule": self.schedule,
            "step": self.step,
            "extra": self.extra,
        }

    @classmethod
    def from_meta(cls, meta: Mapping[str, Any], params, frozen, optimizer) -> "Checkpoint":
        return cls(
            config=ModelConfig.from_dict(meta["model"]),
            params=params,
            frozen_flags=frozen,
            optimizer=optimizer,
            schedule=dict(meta.get("schedule", {})),
            step=int(meta.get("step", 0)),
            extra=dict(meta.get("extra", {})),
        )


# building blocks -----------------------------------------------------------


def _linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else out + b


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return transpose(reshape(x, (*lead, n, heads, d // heads)), (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, n, dh = x.shape
    k = len(lead)
    merged = transpose(x, (*range(k), k + 1, k, k + 2))
    return reshape(merged, (*lead, n, heads * dh))


def attention(
    queries: Tensor,
    sources: Tensor,
    weights: Mapping[str, Tensor],
    heads: int,
) -> Tensor:
    """Multi-head attention of `queries` over `sources`.

    Each head has width ``d / heads`` and logits are scaled by
    ``1 / sqrt(d / heads)``. Heads are concatenated and passed through the
    output projection ``wo``, ``bo``.
    """
    d = weights["wq"].shape[0]
    if queries.shape[-1] != d or sources.shape[-1] != d:
        raise ShapeMismatch("attention", queries.shape, sources.shape)
    q = _split_heads(matmul(queries, weights["wq"]), heads)
    k = _split_heads(matmul(sources, weights["wk"]), heads)
    v = _split_heads(matmul(sources, weights["wv"]), heads)
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(d // heads))
    mixed = matmul(softmax_rows(scores), v)
    return matmul(_merge_heads(mixed), weights["wo"]) + weights["bo"]


def _weights(params: Union[ModelParams, Mapping[str, Tensor]], prefix: str) -> dict[str, Tensor]:
    return {w: params[f"{prefix}.{w}"] for w in ATTENTION_WEIGHTS}


def vis_attention(h_v: Tensor, h_z: Tensor, weights: Mapping[str, Tensor], heads: int) -> Tensor:
    """Video tokens attend over physics tokens."""
    return attention(h_v, h_z, weights, heads)


def phy_attention(h_z: Tensor, h_v: Tensor, weights: Mapping[str, Tensor], heads: int) -> Tensor:
    """Physics tokens attend over video tokens."""
    return attention(h_z, h_v, weights, heads)


def time_embedding(times: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal features of flow time, ``(..., d)``."""
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(1, half))
    angles = TIME_SCALE * np.asarray(times, dtype=np.float64)[..., None] * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    if emb.shape[-1] < d:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (d - emb.shape[-1],))], axis=-1)
    return emb


def _conditioning(params: ModelParams, times: np.ndarray, context: Tensor) -> Tensor:
    """Per-token conditioning vector: time MLP output plus the context sum."""
    feats = Tensor(time_embedding(times, params.config.d))
    hidden = silu(_linear(feats, params["shared.time.w1"], params["shared.time.b1"]))
    emb = _linear(hidden, params["shared.time.w2"], params["shared.time.b2"])
    return emb + context


def _modulate(x: Tensor, ada: Tensor, index: int, d: int, eps: float) -> Tensor:
    ones, zeros = Tensor(np.ones(d)), Tensor(np.zeros(d))
    shift = ada[..., 2 * index * d : (2 * index + 1) * d]
    scale = ada[..., (2 * index + 1) * d : (2 * index + 2) * d]
    return layer_norm(x, ones, zeros, eps) * (scale + 1.0) + shift


def _block(params: ModelParams, prefix: str, h: Tensor, cond: Tensor) -> Tensor:
    config = params.config
    d = config.d
    ada = _linear(cond, params[f"{prefix}.ada.w"], params[f"{prefix}.ada.b"])
    x = _modulate(h, ada, 0, d, config.norm_eps)
    h = h + attention(x, x, _weights(params, f"{prefix}.attn"), config.heads)
    x = _modulate(h, ada, 1, d, config.norm_eps)
    hidden = gelu(_linear(x, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    return h + _linear(hidden, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])


def _head(params: ModelParams, prefix: str, h: Tensor, cond: Tensor) -> Tensor:
    config = params.config
    ada = _linear(cond, params[f"{prefix}.head.ada.w"], params[f"{prefix}.head.ada.b"])
    x = _modulate(h, ada, 0, config.d, config.norm_eps)
    return _linear(x, params[f"{prefix}.head.w"], params[f"{prefix}.head.b"])


def _context_indices(contexts, vocab: int) -> np.ndarray:
    if isinstance(contexts, np.ndarray):
        return contexts
    rows = []
    for c in contexts:
        descriptor = c if isinstance(c, ScenarioDescriptor) else ScenarioDescriptor(c)
        rows.append(descriptor.embedding_indices(vocab))
    return np.stack(rows)


def forward(
    params: ModelParams,
    video: np.ndarray,
    physics: np.ndarray,
    frame_time: np.ndarray,
    cond_mask: np.ndarray,
    contexts: Union[Sequence[ScenarioDescriptor], np.ndarray],
    force: Optional[np.ndarray] = None,
) -> tuple[Tensor, Tensor]:
    """Predict the video and physics velocities for a batch.

    Shapes: `video` ``(B, T*P, p*p)``, `physics` ``(B, T, D_z)``,
    `frame_time` and `cond_mask` ``(B, T)``, `force` ``(B, T, 4)``.
    Conditioning frames are evaluated at time 0. Returns tensors with the
    shapes of `video` and `physics`.
    """
    config = params.config
    video = np.asarray(video, dtype=np.float64)
    physics = np.asarray(physics, dtype=np.float64)
    batch, n_video, video_dim = video.shape
    _, frames, physics_dim = physics.shape
    if video_dim != config.video_dim:
        raise ShapeMismatch("forward", video.shape, (batch, n_video, config.video_dim))
    if physics_dim != config.physics_dim:
        raise ShapeMismatch("forward", physics.shape, (batch, frames, config.physics_dim))
    if n_video % frames:
        raise ShapeMismatch("forward", video.shape, physics.shape)
    n_physics = frames if force is None else 2 * frames
    if n_video > config.max_tokens:
        raise TokenOverflow("video", n_video, config.max_tokens)
    if n_physics > config.max_tokens:
        raise TokenOverflow("physics", n_physics, config.max_tokens)

    times = np.where(np.asarray(cond_mask, dtype=bool), 0.0, np.asarray(frame_time, dtype=np.float64))
    per_frame = n_video // frames
    indices = _context_indices(contexts, config.context_vocab)
    context = reshape(take(params["shared.context"], indices).sum(axis=1), (batch, 1, config.d))

    cond_v = silu(_conditioning(params, np.repeat(times, per_frame, axis=1), context))
    physics_times = times if force is None else np.concatenate([times, np.zeros_like(times)], axis=1)
    cond_z = silu(_conditioning(params, physics_times, context))

    h_v = _linear(Tensor(video), params["video.embed.w"], params["video.embed.b"])
    h_v = h_v + params["video.pos"][:n_video]
    h_z = _linear(Tensor(physics), params["physics.embed.w"], params["physics.embed.b"])
    if force is not None:
        f = _linear(Tensor(force), params["physics.force_embed.w"], params["physics.force_embed.b"])
        h_z = concat([h_z, f], axis=1)
    h_z = h_z + params["physics.pos"][:n_physics]

    cross = set(config.cross_depths)
    for i in range(config.depth):
        h_v = _block(params, f"video.{i}", h_v, cond_v)
        h_z = _block(params, f"physics.{i}", h_z, cond_z)
        if i in cross:
            dv = vis_attention(h_v, h_z, _weights(params, f"cross.{i}.vis"), config.heads)
            dz = phy_attention(h_z, h_v, _weights(params, f"cross.{i}.phy"), config.heads)
            h_v = h_v + dv
            h_z = h_z + dz

    u_v = _head(params, "video", h_v, cond_v)
    u_z = _head(params, "physics", h_z, cond_z)
    if force is not None:
        u_z = u_z[:, :frames, :]
    return u_v, u_z


def predict(params: ModelParams, *args, **kwargs) -> tuple[np.ndarray, np.ndarray]:
    """:func:`forward` returning plain arrays."""
    u_v, u_z = forward(params, *args, **kwargs)
    return u_v.data, u_z.data

