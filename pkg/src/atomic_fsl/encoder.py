"""Sliding-window segmentation and the dilated temporal-convolution window encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class InputError(ValueError):
    """Malformed input sequence."""


class ConfigError(ValueError):
    """Inconsistent model or run configuration."""


@dataclass
class FrameFeatureSequence:
    frames: np.ndarray  # (T, D)
    video_id: int | str = 0
    class_id: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise InputError(f"frames must be a T x D matrix, got shape {self.frames.shape}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class WindowSpec:
    length: int = 16
    stride: int = 8

    def __post_init__(self):
        if not 1 <= self.stride <= self.length:
            raise ConfigError(f"window stride must satisfy 1 <= stride <= length, got {self.stride}/{self.length}")

    def count(self, num_frames: int) -> int:
        if num_frames < self.length:
            return 1
        return (num_frames - self.length) // self.stride + 1


@dataclass
class TCNBlock:
    weight: Tensor  # (C_in, C_out, k)
    bias: Tensor  # (C_out,)
    dilation: int

    @property
    def channels_in(self) -> int:
        return self.weight.shape[0]

    @property
    def channels_out(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


@dataclass
class EncoderParams:
    blocks: list[TCNBlock]
    proj_weight: Tensor  # (C, F)
    proj_bias: Tensor  # (F,)
    pool: str = "mean"

    def __post_init__(self):
        for i, blk in enumerate(self.blocks):
            if blk.dilation != 2 ** i:
                raise ConfigError(f"block {i} has dilation {blk.dilation}, expected {2 ** i}")
            if i and blk.channels_in != self.blocks[i - 1].channels_out:
                raise ConfigError(
                    f"block {i} expects {blk.channels_in} input channels, previous block emits {self.blocks[i - 1].channels_out}")
        last = self.blocks[-1].channels_out if self.blocks else None
        if last is not None and self.proj_weight.shape[0] != last:
            raise ConfigError(f"projection expects {self.proj_weight.shape[0]} channels, encoder emits {last}")
        if self.pool not in ("mean", "max"):
            raise ConfigError(f"unknown window pooling {self.pool!r}")

    @property
    def input_dim(self) -> int:
        return self.blocks[0].channels_in if self.blocks else self.proj_weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.proj_weight.shape[1]

    @property
    def receptive_field(self) -> int:
        return 1 + sum((b.kernel - 1) * b.dilation for b in self.blocks)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, blk in enumerate(self.blocks):
            out[f"block{i}.weight"] = blk.weight
            out[f"block{i}.bias"] = blk.bias
        out["proj.weight"] = self.proj_weight
        out["proj.bias"] = self.proj_bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def copy(self, requires_grad: bool | None = None) -> "EncoderParams":
        def dup(t: Tensor) -> Tensor:
            rg = t.requires_grad if requires_grad is None else requires_grad
            return Tensor(t.data.copy(), requires_grad=rg)
        blocks = [TCNBlock(dup(b.weight), dup(b.bias), b.dilation) for b in self.blocks]
        return EncoderParams(blocks, dup(self.proj_weight), dup(self.proj_bias), self.pool)


def init_encoder(input_dim: int, channels: int = 32, out_dim: int = 32, blocks: int = 2,
                 kernel: int = 3, pool: str = "mean", rng: np.random.Generator | None = None) -> EncoderParams:
    """He-style random initialization; dilations double per block."""
    if kernel % 2 != 1:
        raise ConfigError(f"encoder kernel must be odd for symmetric padding, got {kernel}")
    rng = np.random.default_rng(0) if rng is None else rng
    layers = []
    cin = input_dim
    for i in range(blocks):
        std = np.sqrt(2.0 / (cin * kernel))
        w = Tensor(rng.normal(0.0, std, size=(cin, channels, kernel)), requires_grad=True)
        b = Tensor(np.zeros(channels), requires_grad=True)
        layers.append(TCNBlock(w, b, 2 ** i))
        cin = channels
    pw = Tensor(rng.normal(0.0, np.sqrt(1.0 / cin), size=(cin, out_dim)), requires_grad=True)
    pb = Tensor(np.zeros(out_dim), requires_grad=True)
    return EncoderParams(layers, pw, pb, pool)


def segment(v: FrameFeatureSequence, spec: WindowSpec, dim: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Cut ``v`` into windows of ``spec.length`` frames.

    Returns ``(windows, starts)`` with ``windows`` shaped ``(n, L, D)``.
    Sequences shorter than one window are right-padded with their last frame.
    """
    frames = v.frames
    if frames.shape[0] == 0:
        raise InputError(f"video {v.video_id!r} has no frames")
    if dim is not None and frames.shape[1] != dim:
        raise InputError(f"video {v.video_id!r} has feature dim {frames.shape[1]}, expected {dim}")
    L = spec.length
    if frames.shape[0] < L:
        pad = np.repeat(frames[-1:], L - frames.shape[0], axis=0)
        return np.concatenate([frames, pad])[None], np.array([0])
    starts = np.arange(spec.count(frames.shape[0])) * spec.stride
    idx = starts[:, None] + np.arange(L)[None, :]
    return frames[idx], starts


def encode_windows(windows, p: EncoderParams) -> Tensor:
    """Embed a batch of windows ``(n, L, D)`` into unit-norm rows ``(n, F)``."""
    x = windows if isinstance(windows, Tensor) else Tensor(windows)
    if x.ndim != 3 or x.shape[2] != p.input_dim:
        raise ConfigError(f"windows {list(x.shape)} do not match encoder input dim {p.input_dim}")
    h = x
    for blk in p.blocks:
        z = T.relu(T.conv1d(h, blk.weight, blk.bias, blk.dilation))
        h = T.add(z, h) if blk.channels_in == blk.channels_out else z
    pooled = T.mean(h, axis=1) if p.pool == "mean" else T.reduce_max(h, axis=1)
    return T.normalize_rows(T.add_bias(T.matmul(pooled, p.proj_weight), p.proj_bias))


def encode_window(w, p: EncoderParams) -> Tensor:
    """Embed one ``L x D`` window into a unit-norm F-vector."""
    x = w if isinstance(w, Tensor) else Tensor(w)
    if x.ndim != 2:
        raise InputError(f"expected an L x D window, got {list(x.shape)}")
    return T.reshape(encode_windows(T.reshape(x, (1,) + x.shape), p), (p.out_dim,))


@dataclass
class WindowEmbeddingSet:
    embeddings: Tensor  # (n, F)
    window_starts: np.ndarray
    video_id: int | str = 0

    def __len__(self):
        return self.embeddings.shape[0]


def embed_video(v: FrameFeatureSequence, spec: WindowSpec, p: EncoderParams) -> WindowEmbeddingSet:
    windows, starts = segment(v, spec, p.input_dim)
    return WindowEmbeddingSet(encode_windows(windows, p), starts, v.video_id)


def embed_videos(videos, spec: WindowSpec, p: EncoderParams) -> list[WindowEmbeddingSet]:
    """Encode many videos through a single batched encoder pass."""
    cut = [segment(v, spec, p.input_dim) for v in videos]
    counts = [w.shape[0] for w, _ in cut]
    emb = encode_windows(np.concatenate([w for w, _ in cut]), p)
    out, start = [], 0
    for v, (_, starts), n in zip(videos, cut, counts):
        out.append(WindowEmbeddingSet(T.take_rows(emb, np.arange(start, start + n)), starts, v.video_id))
        start += n
    return out
