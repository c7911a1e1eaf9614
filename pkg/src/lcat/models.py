"""Embedding networks, the optional denoise block, and the few-shot heads.

A head turns base parameters plus one episode's support set into a
``TaskAdaptedModel``: class prototypes for ``proto``, or dual-form ridge
regression weights for ``ridge``. Adaptation is differentiable, so a query
loss backpropagates through the head into the embedding parameters.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import Episode
from .errors import ConfigError, DataFormatError, ShapeError
from .tensor import Tensor

HEADS = ("proto", "ridge")
CHECKPOINT_FORMAT = "lcat-ckpt-1"


@dataclass(frozen=True)
class EmbeddingNetConfig:
    in_channels: int = 1
    image_size: int = 16
    channels: tuple[int, ...] = (8, 16, 16)
    kernel_size: int = 3
    pool: int = 2
    denoise: bool = True
    head: str = "proto"
    ridge_lambda: float = 1.0
    learn_scale: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 1 or min(self.channels) < 1:
            raise ConfigError("need at least one conv block with >= 1 channel")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; valid: {', '.join(HEADS)}")
        if self.ridge_lambda <= 0:
            raise ConfigError(f"ridge_lambda must be > 0, got {self.ridge_lambda}")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd (same padding)")
        if self.feature_size < 1:
            raise ConfigError(f"image_size {self.image_size} too small for {len(self.channels)} pooled blocks")
        if self.embedding_dim < 2:
            raise ConfigError(f"embedding_dim {self.embedding_dim} < 2")

    @property
    def feature_size(self) -> int:
        size = self.image_size
        for _ in self.channels:
            size //= self.pool
        return size

    @property
    def embedding_dim(self) -> int:
        return self.channels[-1] * self.feature_size ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


class ModelParams:
    """Fixed, ordered collection of named parameter tensors."""

    def __init__(self, config: EmbeddingNetConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self._tensors = OrderedDict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def names(self) -> list[str]:
        return list(self._tensors)

    def detached(self) -> ModelParams:
        """Same arrays, no gradient tracking (for attacks and evaluation)."""
        return ModelParams(self.config, OrderedDict(
            (k, Tensor(v.data, requires_grad=False)) for k, v in self._tensors.items()))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._tensors.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        if set(snap) != set(self._tensors):
            raise ShapeError("snapshot names differ from parameter names")
        for k, v in self._tensors.items():
            if snap[k].shape != v.shape:
                raise ShapeError(f"snapshot {k}: shape {snap[k].shape} != {v.shape}")
            v.data = snap[k].astype(v.dtype, copy=True)

    def zero_grads(self) -> None:
        T.zero_grads(self.tensors())

    def astype(self, dtype) -> ModelParams:
        return ModelParams(self.config, OrderedDict(
            (k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad))
            for k, v in self._tensors.items()))


def init_params(config: EmbeddingNetConfig, rng: np.random.Generator, dtype=None) -> ModelParams:
    """He-normal conv kernels, zero biases, zero denoise projection.

    The denoise block, when enabled, follows the last conv block only.
    """
    dtype = dtype or T.default_dtype()
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    c_in, k = config.in_channels, config.kernel_size
    for b, c_out in enumerate(config.channels):
        std = np.sqrt(2.0 / (c_in * k * k))
        tensors[f"block{b}.conv.weight"] = rng.normal(0.0, std, size=(c_out, c_in, k, k))
        tensors[f"block{b}.conv.bias"] = np.zeros(c_out)
        if config.denoise and b == len(config.channels) - 1:
            tensors[f"block{b}.denoise.proj"] = np.zeros((c_out, c_out, 1, 1))
        c_in = c_out
    if config.learn_scale:
        tensors["head.scale"] = np.ones(1)
    return ModelParams(config, OrderedDict(
        (name, Tensor(np.asarray(v, dtype=dtype), requires_grad=True))
        for name, v in tensors.items()))


def denoise_forward(features: Tensor, projection: Tensor) -> Tensor:
    """Residual smoothing: ``features + conv1x1(projection, boxfilter3x3(features))``."""
    if projection.ndim != 4 or projection.shape[2:] != (1, 1) \
            or projection.shape[1] != features.shape[1]:
        raise ShapeError(f"denoise projection {projection.shape} incompatible with {features.shape}")
    return T.add(features, T.conv2d(T.box_filter3x3(features), projection))


def embed_forward(params: ModelParams, images) -> Tensor:
    cfg = params.config
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=params.tensors()[0].dtype))
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ShapeError(f"images {x.shape} do not match [B, {cfg.in_channels}, "
                         f"{cfg.image_size}, {cfg.image_size}]")
    pad = cfg.kernel_size // 2
    for b in range(len(cfg.channels)):
        x = T.conv2d(x, params[f"block{b}.conv.weight"], params[f"block{b}.conv.bias"], padding=pad)
        if cfg.denoise and b == len(cfg.channels) - 1:
            x = denoise_forward(x, params[f"block{b}.denoise.proj"])
        x = T.avg_pool2d(T.relu(x), cfg.pool)
    return T.flatten(x)


@dataclass
class TaskAdaptedModel:
    """Base parameters plus the head state fit on one support set."""

    params: ModelParams
    head: str
    way: int
    prototypes: Tensor | None = None
    weights: Tensor | None = None
    scale: Tensor | None = field(default=None)

    def __call__(self, images) -> Tensor:
        return head_logits(self, images)

    def detached(self) -> TaskAdaptedModel:
        def cut(t):
            return None if t is None else Tensor(t.data)
        return TaskAdaptedModel(self.params.detached(), self.head, self.way,
                                cut(self.prototypes), cut(self.weights), cut(self.scale))


def _one_hot(labels: np.ndarray, way: int, dtype) -> np.ndarray:
    out = np.zeros((len(labels), way), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def fine_tune(params: ModelParams, episode: Episode, support_images=None) -> TaskAdaptedModel:
    """Fit the head on the support set; ``params`` are read, never written.

    ``support_images`` replaces the episode's support images, e.g. after a
    support-set attack.
    """
    cfg = params.config
    images = episode.support_images if support_images is None else support_images
    emb = embed_forward(params, images)
    labels = np.asarray(episode.support_labels)
    if emb.shape[0] != len(labels):
        raise ShapeError(f"{emb.shape[0]} support images but {len(labels)} labels")
    onehot = _one_hot(labels, episode.way, emb.dtype)
    if cfg.head == "proto":
        return TaskAdaptedModel(params, "proto", episode.way, prototypes=prototypes(emb, onehot))
    scale = params["head.scale"] if "head.scale" in params else None
    return TaskAdaptedModel(params, "ridge", episode.way,
                            weights=ridge_weights(emb, onehot, cfg.ridge_lambda), scale=scale)


def prototypes(emb: Tensor, onehot: np.ndarray) -> Tensor:
    """Per-class mean embedding, ``[way, D]``."""
    counts = onehot.sum(axis=0)
    if np.any(counts == 0):
        raise ShapeError("every class needs at least one support example")
    return Tensor(onehot.T / counts[:, None]) @ emb


def ridge_weights(emb: Tensor, onehot: np.ndarray, lam: float) -> Tensor:
    """Dual-form ridge solution ``X^T (X X^T + lam I)^-1 Y``; the solve is only support-sized."""
    gram = T.add(emb @ emb.T, Tensor(lam * np.eye(emb.shape[0], dtype=emb.dtype)))
    return emb.T @ T.solve(gram, Tensor(onehot.astype(emb.dtype)))


def head_logits(adapted: TaskAdaptedModel, query_images) -> Tensor:
    """Proto: negative squared distances to prototypes. Ridge: ``scale * emb @ W``."""
    emb = embed_forward(adapted.params, query_images)
    if adapted.head == "proto":
        return T.scale(T.sq_distances(emb, adapted.prototypes), -1.0)
    logits = emb @ adapted.weights
    return logits if adapted.scale is None else T.mul(logits, adapted.scale)


def episode_loss(params: ModelParams, episode: Episode) -> Tensor:
    """Query cross-entropy of the model adapted on the episode's clean support set."""
    adapted = fine_tune(params, episode)
    return T.softmax_cross_entropy(head_logits(adapted, episode.query_images), episode.query_labels)


def save_checkpoint(path, params: ModelParams, epoch: int = 0, rng_state=None,
                    extra: dict | None = None) -> None:
    """JSON header line, then each tensor as little-endian float32 in header order."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": params.config.to_dict(),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "epoch": int(epoch),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(blob + b"\n")
        for _, v in params.items():
            fh.write(v.data.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl].decode("utf-8")) if nl > 0 else None
    except (UnicodeDecodeError, json.JSONDecodeError):
        header = None
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(f"{path}: not an {CHECKPOINT_FORMAT} checkpoint", code="E_CKPT")
    cfg = EmbeddingNetConfig(**header["config"])
    off = nl + 1
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        if off + 4 * count > len(raw):
            raise DataFormatError(f"{path}: truncated tensor {entry['name']}", code="E_TRUNCATED")
        arr = np.frombuffer(raw, "<f4", count, off).reshape(shape).astype(np.float32)
        tensors[entry["name"]] = Tensor(arr, requires_grad=True)
        off += 4 * count
    if off != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - off} trailing bytes", code="E_TRAILING")
    return ModelParams(cfg, tensors), header
