"""Momentum-contrast pretraining of the window encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import (ConfigError, EncoderParams, FrameFeatureSequence, InputError, WindowSpec,
                      encode_windows, segment)
from .optim import SGD
from .tensor import Tensor


@dataclass(frozen=True)
class AugmentationPolicy:
    noise_sigma: float = 0.1
    frame_dropout_p: float = 0.1
    temporal_crop_ratio: float = 0.7
    channel_scale_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        lo, hi = self.channel_scale_range
        if self.noise_sigma < 0 or not 0 <= self.frame_dropout_p < 1 or not 0 < self.temporal_crop_ratio <= 1 or lo > hi:
            raise ConfigError(f"invalid augmentation policy {self}")


IDENTITY_POLICY = AugmentationPolicy(0.0, 0.0, 1.0, (1.0, 1.0))


def augment(v: FrameFeatureSequence, pol: AugmentationPolicy, seed) -> FrameFeatureSequence:
    """Crop, frame dropout, additive noise, per-channel scaling, in that order."""
    rng = np.random.default_rng(seed)
    x = v.frames
    T_ = x.shape[0]
    if T_ == 0:
        raise InputError(f"video {v.video_id!r} has no frames")
    ratio = rng.uniform(pol.temporal_crop_ratio, 1.0) if pol.temporal_crop_ratio < 1 else 1.0
    keep = int(round(T_ * ratio))
    if keep < 1:
        raise InputError(f"crop ratio {ratio:.3f} empties a {T_}-frame video")
    start = int(rng.integers(0, T_ - keep + 1))
    x = x[start:start + keep].copy()
    if pol.frame_dropout_p > 0:
        drop = rng.random(keep) < pol.frame_dropout_p
        drop[0] = False
        for t in np.flatnonzero(drop):
            x[t] = x[t - 1]
    if pol.noise_sigma > 0:
        x = x + rng.normal(0.0, pol.noise_sigma, size=x.shape)
    lo, hi = pol.channel_scale_range
    if (lo, hi) != (1.0, 1.0):
        x = x * rng.uniform(lo, hi, size=x.shape[1])
    return FrameFeatureSequence(x, v.video_id, v.class_id)


def momentum_update(key: EncoderParams, query: EncoderParams, m: float) -> None:
    """In place: every key parameter becomes ``m * key + (1 - m) * query``."""
    for k, q in zip(key.parameters(), query.parameters()):
        if k.shape != q.shape:
            raise ConfigError(f"key/query parameter shapes differ: {k.shape} vs {q.shape}")
        k.data *= m
        k.data += (1.0 - m) * q.data


def info_nce(q: Tensor, k_pos, queue, tau: float) -> Tensor:
    """``-log softmax`` of the positive logit among positive + queued negatives.

    Keys are constants; only ``q`` carries gradient.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    k_pos = np.asarray(k_pos.data if isinstance(k_pos, Tensor) else k_pos, dtype=np.float64)
    queue = np.asarray(queue, dtype=np.float64).reshape(-1, q.shape[0])
    keys = Tensor(np.concatenate([k_pos[None], queue]).T)  # (F, 1 + Kq)
    logits = T.scale(T.matmul(T.reshape(q, (1, q.shape[0])), keys), 1.0 / tau)
    first = np.zeros((1, keys.shape[1]))
    first[0, 0] = 1.0
    return T.scale(T.reduce_sum(T.mul(T.log_softmax_rows(logits), Tensor(first))), -1.0)


def video_embedding(v: FrameFeatureSequence, spec: WindowSpec, p: EncoderParams) -> Tensor:
    """Mean of a video's window embeddings, renormalized to unit length."""
    windows, _ = segment(v, spec, p.input_dim)
    return T.normalize_rows(T.reshape(T.mean(encode_windows(windows, p), axis=0), (1, p.out_dim)))


def batch_embeddings(videos, spec: WindowSpec, p: EncoderParams) -> Tensor:
    """Video embeddings ``(B, F)`` through one batched encoder pass."""
    cut = [segment(v, spec, p.input_dim)[0] for v in videos]
    emb = encode_windows(np.concatenate(cut), p)
    rows, start = [], 0
    for w in cut:
        rows.append(T.mean(T.take_rows(emb, np.arange(start, start + w.shape[0])), axis=0))
        start += w.shape[0]
    return T.normalize_rows(T.stack(rows))


@dataclass
class MoCoState:
    query_params: EncoderParams
    key_params: EncoderParams
    queue: np.ndarray  # (Kq, F); rows beyond `filled` are unused
    queue_head: int = 0
    filled: int = 0
    m: float = 0.999
    tau: float = 0.07
    optimizer: SGD | None = None
    step: int = 0

    @classmethod
    def create(cls, encoder: EncoderParams, queue_size: int = 4096, m: float = 0.999, tau: float = 0.07,
               lr: float = 0.03, momentum: float = 0.9) -> "MoCoState":
        if not 0 <= m <= 1:
            raise ConfigError(f"momentum coefficient must be in [0, 1], got {m}")
        if tau <= 0:
            raise ConfigError(f"temperature must be > 0, got {tau}")
        key = encoder.copy(requires_grad=False)
        return cls(encoder, key, np.zeros((queue_size, encoder.out_dim)), m=m, tau=tau,
                   optimizer=SGD(encoder.parameters(), lr=lr, momentum=momentum))

    @property
    def negatives(self) -> np.ndarray:
        return self.queue[:self.filled]

    def enqueue(self, keys: np.ndarray) -> None:
        Kq = self.queue.shape[0]
        if Kq == 0:
            return
        norms = np.linalg.norm(keys, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("queue only accepts unit-norm keys")
        for k in keys:
            self.queue[self.queue_head] = k
            self.queue_head = (self.queue_head + 1) % Kq
            self.filled = min(self.filled + 1, Kq)


def contrastive_stats(q: np.ndarray, k: np.ndarray, negatives: np.ndarray) -> tuple[float, float]:
    """Mean positive cosine and the fraction of queries whose positive beats every negative."""
    pos = np.sum(q * k, axis=1)
    if negatives.shape[0] == 0:
        return float(pos.mean()), 1.0
    neg = q @ negatives.T
    return float(pos.mean()), float(np.mean(pos > neg.max(axis=1)))


def pretrain_step(state: MoCoState, batch, spec: WindowSpec, pol: AugmentationPolicy, seed) -> dict:
    """One MoCo update on ``batch``; returns loss and similarity metrics.

    Retrieval accuracy is measured against the queue as it stood before this
    batch was enqueued.
    """
    batch = list(batch)
    if not batch:
        raise InputError("pretraining batch is empty")
    rng = np.random.default_rng(seed)
    aug = [augment(v, pol, rng.integers(2 ** 63)) for v in batch]
    keys = batch_embeddings(batch, spec, state.key_params).data
    q = batch_embeddings(aug, spec, state.query_params)
    negatives = state.negatives.copy()
    losses = [info_nce(T.reshape(T.take_rows(q, [i]), (q.shape[1],)), keys[i], negatives, state.tau)
              for i in range(len(batch))]
    loss = T.scale(T.reduce_sum(T.stack(losses)), 1.0 / len(batch))
    pos_sim, retrieval = contrastive_stats(q.data, keys, negatives)
    state.optimizer.zero_grad()
    T.backward(loss)
    state.optimizer.step()
    momentum_update(state.key_params, state.query_params, state.m)
    state.enqueue(keys)
    state.step += 1
    return {"step": state.step, "loss": loss.item(), "pos_sim": pos_sim, "retrieval": retrieval,
            "queue_fill": state.filled}
