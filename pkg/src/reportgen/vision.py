"""Twin-view visual encoder and topic classifier.

One CNN with a single parameter set encodes both the frontal and the lateral
image into a grid x grid x C map.  Each map goes through a 7x7 convolution and
global average pooling; the two C-vectors are concatenated and reduced to k
topic logits by two parameter-free bucketed average pools.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor

SGFF_MAGIC = b"SGFF"


@dataclass(frozen=True)
class VisionConfig:
    image_size: tuple[int, int, int] = (3, 64, 64)
    channels: int = 32
    grid: int = 7
    num_topics: int = 8
    pool_width: int = 512
    freeze_backbone: bool = False
    input_mean: float = 0.5
    input_std: float = 0.25

    def validate(self) -> "VisionConfig":
        c, h, w = self.image_size
        if h != w:
            raise ValueError(f"images must be square, got {self.image_size}")
        if self.num_topics < 1:
            raise ValueError("num_topics must be at least 1")
        if self.input_std <= 0:
            raise ValueError("input_std must be positive")
        if self.channels < 1 or self.grid < 1:
            raise ValueError("channels and grid must be positive")
        if 2 * self.channels < self.num_topics:
            raise ValueError(f"cannot pool {2 * self.channels} features into {self.num_topics} topics")
        side = h
        for _ in range(3):
            side = (side + 2 - 3) // 2 + 1
        if side < self.grid:
            raise ValueError(f"image side {h} too small for a {self.grid}x{self.grid} grid")
        return self

    @property
    def mid_width(self) -> int:
        return min(self.pool_width, 2 * self.channels)


VISION_PRESETS = {
    "desk": VisionConfig(),
    "paper": VisionConfig(image_size=(3, 224, 224), channels=2048),
    "paper244": VisionConfig(image_size=(3, 244, 244), channels=2048),
}


@dataclass
class VisualFeatures:
    v_a: Tensor            # (N, C, grid, grid)
    v_l: Tensor
    v_prime_a: Tensor      # (N, C)
    v_prime_l: Tensor
    v_avg: Tensor          # (N, 2C)
    logits: Tensor         # (N, k)


def _final_geometry(side: int, grid: int) -> tuple[int, int]:
    """Stride and kernel that map ``side`` onto exactly ``grid`` outputs."""
    stride = max(1, side // grid)
    kernel = side - (grid - 1) * stride
    return stride, kernel


class Backbone(nn.Module):
    """Three stride-2 3x3 blocks, then one conv sized to land on the grid."""

    def __init__(self, cfg: VisionConfig, rng: np.random.Generator):
        c_in, side, _ = cfg.image_size
        widths = [max(1, cfg.channels // 2), cfg.channels, cfg.channels]
        self.blocks = []
        for w in widths:
            self.blocks.append(nn.Conv2d(c_in, w, 3, rng, stride=2, padding=1))
            c_in = w
            side = (side + 2 - 3) // 2 + 1
        stride, kernel = _final_geometry(side, cfg.grid)
        self.head = nn.Conv2d(c_in, cfg.channels, kernel, rng, stride=stride)
        self.shift, self.scale = cfg.input_mean, 1.0 / cfg.input_std

    def __call__(self, x):
        x = (x - self.shift) * self.scale
        for block in self.blocks:
            x = T.relu(block(x))
        return T.relu(self.head(x))


class VisualExtractor(nn.Module):
    def __init__(self, cfg: VisionConfig, rng: np.random.Generator):
        self.cfg = cfg.validate()
        self.backbone = Backbone(cfg, rng)
        self.spatial = nn.Conv2d(cfg.channels, cfg.channels, 7, rng, stride=1, padding=3)

    def _check_images(self, imgs: np.ndarray) -> np.ndarray:
        imgs = np.asarray(imgs)
        if imgs.ndim == 3:
            imgs = imgs[None]
        if tuple(imgs.shape[1:]) != tuple(self.cfg.image_size):
            raise ShapeError(f"encode_pair: image shape {imgs.shape[1:]} != configured {self.cfg.image_size}")
        return imgs

    def backbone_maps(self, imgs: np.ndarray) -> Tensor:
        out = self.backbone(Tensor(self._check_images(imgs)))
        if self.cfg.freeze_backbone:
            out = out.detach()
        return out

    def encode_pair(self, image_ap, image_lat) -> VisualFeatures:
        a = self.backbone_maps(image_ap)
        b = self.backbone_maps(image_lat)
        return self.features_from_maps(a, b)

    def features_from_maps(self, v_a, v_l) -> VisualFeatures:
        """Continue from grid maps (N, C, grid, grid), e.g. precomputed backbone output."""
        v_a, v_l = T.as_tensor(v_a), T.as_tensor(v_l)
        want = (self.cfg.channels, self.cfg.grid, self.cfg.grid)
        for v in (v_a, v_l):
            if v.ndim != 4 or tuple(v.shape[1:]) != want:
                raise ShapeError(f"visual maps must be (N, {want}), got {v.shape}")
        pa = T.mean(self.spatial(v_a), axis=(2, 3))
        pl = T.mean(self.spatial(v_l), axis=(2, 3))
        v_avg = T.concat([pa, pl], axis=1)
        mid = T.bucketed_avg_pool1d(v_avg, self.cfg.mid_width)
        logits = T.bucketed_avg_pool1d(mid, self.cfg.num_topics)
        return VisualFeatures(v_a, v_l, pa, pl, v_avg, logits)

    def backbone_parameters(self) -> list[Tensor]:
        return self.backbone.parameters()


def kmve_loss(logits, topics: Sequence[int]) -> Tensor:
    """Mean of -log softmax(logits)[topic] over samples whose topic is not -1.

    A batch made only of noise samples gives a constant zero.
    """
    logits = T.as_tensor(logits)
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, -1))
    topics = np.asarray(topics, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if len(topics) != n:
        raise ShapeError(f"kmve_loss: {n} logit rows but {len(topics)} topics")
    if np.any(topics < -1) or np.any(topics >= k):
        raise ValueError(f"kmve_loss: topic labels must lie in -1..{k - 1}")
    keep = np.flatnonzero(topics >= 0)
    if keep.size == 0:
        return Tensor(0.0, dtype=logits.data.dtype)
    logp = T.log_softmax(T.getitem(logits, keep), axis=-1)
    picked = T.getitem(logp, (np.arange(keep.size), topics[keep]))
    return -T.mean(picked)


def classify_topic(logits) -> tuple[np.ndarray, np.ndarray]:
    """Argmax label (ties go to the lowest index) and its softmax probability."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = np.atleast_2d(z)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    labels = np.argmax(p, axis=1)
    return labels, p[np.arange(len(z)), labels]


# Precomputed feature files ------------------------------------------------

def write_sgff(path, ids: Sequence[str], maps: np.ndarray) -> None:
    """Write (n, grid, grid, C) maps plus an id index.

    Layout: magic ``SGFF``, u32 n, grid, grid, C, little-endian f32 payload,
    then u32 index length and a UTF-8, newline-separated id list.
    """
    maps = np.asarray(maps, dtype="<f4")
    if maps.ndim != 4 or maps.shape[1] != maps.shape[2]:
        raise ShapeError(f"feature maps must be (n, grid, grid, C), got {maps.shape}")
    if len(ids) != maps.shape[0]:
        raise ValueError("one id per feature map required")
    index = "\n".join(ids).encode()
    with open(path, "wb") as fh:
        fh.write(SGFF_MAGIC)
        fh.write(struct.pack("<4I", *maps.shape))
        fh.write(maps.tobytes())
        fh.write(struct.pack("<I", len(index)))
        fh.write(index)


def read_sgff(path) -> tuple[list[str], np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != SGFF_MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic)")
    n, g1, g2, c = struct.unpack_from("<4I", raw, 4)
    off = 20
    count = n * g1 * g2 * c
    maps = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(n, g1, g2, c)
    off += 4 * count
    (length,) = struct.unpack_from("<I", raw, off)
    ids = raw[off + 4: off + 4 + length].decode().split("\n") if length else []
    if len(ids) != n:
        raise ValueError(f"{path}: index lists {len(ids)} ids for {n} maps")
    return ids, maps.astype(np.float32)


def maps_to_nchw(maps: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(maps).transpose(0, 3, 1, 2))
