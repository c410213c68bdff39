"""Query-conditioned attention pooling of support windows and the two-head relation scorer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class EpisodeError(ValueError):
    """An episode has no classes or inconsistent shapes."""


@dataclass
class PoolingParams:
    """Affine score map ``f1`` (scalar scale/bias) and ``F x F`` map ``f2``, per direction."""

    f1_scale: Tensor
    f1_bias: Tensor
    f2_weight: Tensor
    f2_bias: Tensor
    swap_f1_scale: Tensor
    swap_f1_bias: Tensor
    swap_f2_weight: Tensor
    swap_f2_bias: Tensor
    normalize_weights: bool = True

    def named_tensors(self) -> dict[str, Tensor]:
        names = ["f1_scale", "f1_bias", "f2_weight", "f2_bias",
                 "swap_f1_scale", "swap_f1_bias", "swap_f2_weight", "swap_f2_bias"]
        return {n: getattr(self, n) for n in names}

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())


def init_pooling(dim: int, normalize_weights: bool = True, f1_scale: float = 10.0,
                 swap_gain: float = 0.0) -> PoolingParams:
    """Identity ``f2`` with a sharp ``f1``; the swapped direction starts at ``swap_gain * I``."""
    def p(x):
        return Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    return PoolingParams(
        p(f1_scale), p(0.0), p(np.eye(dim)), p(np.zeros(dim)),
        p(f1_scale), p(0.0), p(swap_gain * np.eye(dim)), p(np.zeros(dim)),
        normalize_weights=normalize_weights,
    )


def _pool(keys: Tensor, queries: Tensor, scale: Tensor, bias: Tensor, w2: Tensor, b2: Tensor,
          normalize: bool) -> Tensor:
    """``f2(f1(queries . keys^T) . keys)`` -> one row per query row."""
    if keys.ndim != 2 or queries.ndim != 2 or keys.shape[1] != queries.shape[1]:
        raise EpisodeError(f"cannot pool {list(keys.shape)} windows for {list(queries.shape)} queries")
    if keys.shape[0] < 1 or queries.shape[0] < 1:
        raise EpisodeError("attention pooling needs at least one support and one query window")
    scores = T.matmul(queries, T.transpose(keys))
    weights = T.add(T.mul(scores, scale), bias)
    if normalize:
        weights = T.softmax_rows(weights)
    return T.add_bias(T.matmul(T.matmul(weights, keys), w2), b2)


def attention_pool(S: Tensor, Q: Tensor, p: PoolingParams) -> Tensor:
    """Per-query-window class prototype: row ``i`` aggregates the support windows weighted by query window ``i``."""
    return _pool(S, Q, p.f1_scale, p.f1_bias, p.f2_weight, p.f2_bias, p.normalize_weights)


def mutual_refine(S: Tensor, Q: Tensor, p: PoolingParams) -> tuple[Tensor, Tensor]:
    """Refine support by query and query by support.

    The swapped direction yields one row per support window; its mean is a
    context vector added to every query window.
    """
    s_ref = attention_pool(S, Q, p)
    q_swap = _pool(Q, S, p.swap_f1_scale, p.swap_f1_bias, p.swap_f2_weight, p.swap_f2_bias,
                   p.normalize_weights)
    context = T.mean(q_swap, axis=0)
    q_ref = T.add(Q, T.repeat_row(context, Q.shape[0]))
    return s_ref, q_ref


def mean_prototype(S: Tensor, num_queries: int) -> Tensor:
    """Attention-free aggregation: the support mean repeated for every query window."""
    return T.repeat_row(T.mean(S, axis=0), num_queries)


@dataclass
class RelationParams:
    conv_weight: Tensor  # (2F, H), kernel-1 conv over the pair
    conv_bias: Tensor  # (H,)
    fc_weight: Tensor  # (H, 1)
    fc_bias: Tensor  # (1,)
    blank_logit: Tensor  # ()
    use_conv_head: bool = True
    use_dot_head: bool = True

    def named_tensors(self) -> dict[str, Tensor]:
        return {"conv_weight": self.conv_weight, "conv_bias": self.conv_bias,
                "fc_weight": self.fc_weight, "fc_bias": self.fc_bias, "blank_logit": self.blank_logit}

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())


def init_relation(dim: int, hidden: int = 64, rng: np.random.Generator | None = None,
                  use_conv_head: bool = True, use_dot_head: bool = True) -> RelationParams:
    rng = np.random.default_rng(0) if rng is None else rng
    return RelationParams(
        Tensor(rng.normal(0, np.sqrt(2.0 / (2 * dim)), size=(2 * dim, hidden)), requires_grad=True),
        Tensor(np.zeros(hidden), requires_grad=True),
        Tensor(rng.normal(0, np.sqrt(1.0 / hidden), size=(hidden, 1)), requires_grad=True),
        Tensor(np.zeros(1), requires_grad=True),
        Tensor(0.0, requires_grad=True),
        use_conv_head=use_conv_head,
        use_dot_head=use_dot_head,
    )


def _with_blank(class_logits: Tensor, blank_logit: Tensor) -> Tensor:
    """``(Tq, K)`` logits plus a shared blank column -> ``(Tq, K+1)`` probabilities."""
    blank = T.mul(Tensor(np.ones((class_logits.shape[0], 1))), blank_logit)
    return T.softmax_rows(T.concat([class_logits, blank], axis=1))


def relation_scores(q_ref, prototypes: list[Tensor], rp: RelationParams) -> Tensor:
    """Per-window distribution over the ``K`` episode classes plus blank.

    ``q_ref`` is either one ``Tq x F`` query matrix shared by all classes or a
    list with one refined query matrix per class; ``prototypes[k]`` is the
    ``Tq x F`` support prototype of class ``k`` aligned to the query windows.
    Each enabled head yields its own softmax over (class logits, blank); the
    result is their mean.
    """
    K = len(prototypes)
    if K == 0:
        raise EpisodeError("episode has no classes")
    if not rp.use_conv_head and not rp.use_dot_head:
        raise EpisodeError("at least one relation head must be enabled")
    queries = list(q_ref) if isinstance(q_ref, (list, tuple)) else [q_ref] * K
    if len(queries) != K:
        raise EpisodeError(f"{len(queries)} query matrices for {K} classes")
    tq = queries[0].shape[0]
    for q, s in zip(queries, prototypes):
        if q.shape != s.shape or q.shape[0] != tq:
            raise EpisodeError(f"query {list(q.shape)} and prototype {list(s.shape)} disagree")

    heads = []
    if rp.use_conv_head:
        # all (class, window) pairs through one GEMM, rows ordered class-major
        pairs = T.concat([T.concat([q, s], axis=1) for q, s in zip(queries, prototypes)], axis=0)
        hidden = T.relu(T.add_bias(T.matmul(pairs, rp.conv_weight), rp.conv_bias))
        logit = T.add_bias(T.matmul(hidden, rp.fc_weight), rp.fc_bias)  # (K*Tq, 1)
        logits = T.transpose(T.reshape(logit, (K, tq)))
        heads.append(_with_blank(logits, rp.blank_logit))
    if rp.use_dot_head:
        dots = [T.rowdot(T.normalize_rows(q), T.normalize_rows(s)) for q, s in zip(queries, prototypes)]
        logits = T.transpose(T.reshape(T.concat(dots, axis=0), (K, tq)))
        heads.append(_with_blank(logits, rp.blank_logit))
    if len(heads) == 1:
        return heads[0]
    return T.scale(T.add(heads[0], heads[1]), 0.5)
