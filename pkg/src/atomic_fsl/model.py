"""Episode-level model: encoder -> attention pooling -> relation heads -> per-window distributions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ctc import LossConfig, classify_by_likelihood, combined_loss
from .data import Episode
from .encoder import EncoderParams, WindowSpec, embed_videos
from .relation import (PoolingParams, RelationParams, mean_prototype, mutual_refine,
                       relation_scores)
from .tensor import Tensor


@dataclass
class FewShotModel:
    encoder: EncoderParams
    pooling: PoolingParams
    relation: RelationParams
    window: WindowSpec
    use_attention_pool: bool = True

    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.named_tensors().items()}
        out.update({f"pooling.{k}": v for k, v in self.pooling.named_tensors().items()})
        out.update({f"relation.{k}": v for k, v in self.relation.named_tensors().items()})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())


@dataclass
class EpisodeOutput:
    distributions: list[Tensor]  # one (T_q x (K+1)) per query video
    support: list[Tensor]  # per class, stacked window embeddings of its N support videos


def class_windows(model: FewShotModel, ep: Episode) -> tuple[list[Tensor], list[Tensor]]:
    """Embed every episode video in one pass; return per-class support windows and per-query windows."""
    videos = [v for vids in ep.support for v in vids] + list(ep.query)
    sets = embed_videos(videos, model.window, model.encoder)
    support, i = [], 0
    for vids in ep.support:
        support.append(T.concat([s.embeddings for s in sets[i:i + len(vids)]], axis=0))
        i += len(vids)
    return support, [s.embeddings for s in sets[i:]]


def query_distribution(model: FewShotModel, support: list[Tensor], Q: Tensor) -> Tensor:
    """Window-class distribution of one query against each class's support windows."""
    protos, queries = [], []
    for S in support:
        if model.use_attention_pool:
            s_ref, q_ref = mutual_refine(S, Q, model.pooling)
        else:
            s_ref, q_ref = mean_prototype(S, Q.shape[0]), Q
        protos.append(s_ref)
        queries.append(q_ref)
    return relation_scores(queries, protos, model.relation)


def forward_episode(model: FewShotModel, ep: Episode) -> EpisodeOutput:
    support, queries = class_windows(model, ep)
    return EpisodeOutput([query_distribution(model, support, Q) for Q in queries], support)


def episode_loss(model: FewShotModel, ep: Episode, cfg: LossConfig) -> tuple[Tensor, dict]:
    """Mean combined loss over the episode's queries, plus the per-term breakdown."""
    out = forward_episode(model, ep)
    terms, ctc_sum, mse_sum, correct = [], 0.0, 0.0, 0
    for dist, y in zip(out.distributions, ep.query_labels):
        total, ctc, mse = combined_loss(dist, [int(y)], cfg)
        terms.append(total)
        ctc_sum += ctc
        mse_sum += mse
        correct += int(classify_by_likelihood(dist.data)[0] == y)
    n = len(terms)
    loss = T.scale(T.reduce_sum(T.stack(terms)), 1.0 / n)
    return loss, {"loss": loss.item(), "loss_ctc": ctc_sum / n, "loss_mse": mse_sum / n, "acc": correct / n}


def predict_episode(model: FewShotModel, ep: Episode) -> tuple[np.ndarray, list[np.ndarray]]:
    """Predicted episode-local labels and the raw distributions, with no graph recorded."""
    with T.no_grad():
        out = forward_episode(model, ep)
    dists = [d.data for d in out.distributions]
    return np.array([classify_by_likelihood(d)[0] for d in dists]), dists
