"""CTC likelihood over window class trajectories, the per-window MSE term, and decoders.

Distributions are ``T x (K+1)`` probability matrices whose last column is the
blank symbol. All dynamic programming runs in log space; impossible prefixes
carry ``-inf``.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, _accumulate, _result

NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    """The target cannot be emitted in the available number of windows."""


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    use_log_space: bool = True

    def __post_init__(self):
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"MSE weight must be finite and >= 0, got {self.lam}")


def _logsumexp(a: np.ndarray, axis: int = 0) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def extend_with_blanks(target, blank: int) -> tuple[np.ndarray, np.ndarray]:
    """Blank-interleaved target and, per position, whether the skip transition from s-2 is allowed."""
    ext = [blank]
    for c in target:
        ext += [int(c), blank]
    ext = np.array(ext, dtype=np.int64)
    skip = np.zeros(len(ext), dtype=bool)
    for s in range(2, len(ext)):
        skip[s] = ext[s] != blank and ext[s] != ext[s - 2]
    return ext, skip


def min_frames(target) -> int:
    """Fewest windows able to emit ``target`` (repeats need a blank between them)."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _validate(probs: np.ndarray, target) -> int:
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ValueError(f"distribution must be T x (K+1) with K >= 1, got {probs.shape}")
    K = probs.shape[1] - 1
    target = list(target)
    if not target:
        raise ValueError("target sequence must be non-empty")
    if any(not 0 <= c < K for c in target):
        raise ValueError(f"target {target} has labels outside 0..{K - 1}")
    if probs.shape[0] < min_frames(target):
        raise InfeasibleTargetError(
            f"{probs.shape[0]} windows cannot emit target of length {len(target)}")
    return K


def ctc_forward_backward(probs: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` and its gradient with respect to ``probs``.

    The gradient is computed without dividing by the probabilities, so zero
    entries give finite gradients. If no path has positive probability the loss
    is ``inf`` and the gradient is zero.
    """
    probs = np.asarray(probs, dtype=np.float64)
    K = _validate(probs, target)
    ext, skip = extend_with_blanks(target, K)
    Tn, S = probs.shape[0], len(ext)
    with np.errstate(divide="ignore"):
        logp = np.log(probs[:, ext])  # (T, S)

    # incoming[t, s]: log mass arriving at state s at time t, before emitting
    incoming = np.full((Tn, S), NEG_INF)
    alpha = np.full((Tn, S), NEG_INF)
    incoming[0, :2] = 0.0
    alpha[0] = incoming[0] + logp[0]
    for t in range(1, Tn):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate([[NEG_INF], prev[:-1]])
        jump = np.where(skip, np.concatenate([[NEG_INF, NEG_INF], prev[:-2]]), NEG_INF)
        incoming[t] = _logsumexp(np.stack([stay, step, jump]), axis=0)
        alpha[t] = incoming[t] + logp[t]

    # beta[t, s]: log mass of finishing from state s at t, excluding emission at t
    beta = np.full((Tn, S), NEG_INF)
    beta[-1, -1] = 0.0
    beta[-1, -2] = 0.0
    skip_next = np.concatenate([skip[2:], [False, False]])
    for t in range(Tn - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1]
        stay = nxt
        step = np.concatenate([nxt[1:], [NEG_INF]])
        jump = np.where(skip_next, np.concatenate([nxt[2:], [NEG_INF, NEG_INF]]), NEG_INF)
        beta[t] = _logsumexp(np.stack([stay, step, jump]), axis=0)

    log_like = _logsumexp(alpha[-1, -2:], axis=0)
    grad = np.zeros_like(probs)
    if not np.isfinite(log_like):
        return math.inf, grad
    # dP/dp_t(k) = sum over states s with label k of incoming * beta
    occ = np.exp(incoming + beta - log_like)
    for s, k in enumerate(ext):
        grad[:, k] -= occ[:, s]
    return float(-log_like), grad


def ctc_loss_value(probs, target) -> float:
    return ctc_forward_backward(probs, target)[0]


def ctc_loss(dist: Tensor, target) -> Tensor:
    """CTC negative log-likelihood as a differentiable scalar."""
    loss, grad = ctc_forward_backward(dist.data, target)

    def bw(g):
        _accumulate(dist, g * grad)
    return _result(np.asarray(loss), (dist,), bw, "ctc")


def mse_loss(dist: Tensor, target_class: int) -> Tensor:
    """Mean over windows of the squared one-hot error over the K class columns (blank excluded)."""
    p = dist.data
    K = p.shape[1] - 1
    if not 0 <= target_class < K:
        raise ValueError(f"target class {target_class} outside 0..{K - 1}")
    onehot = np.zeros(K)
    onehot[target_class] = 1.0
    diff = p[:, :K] - onehot
    Tn = p.shape[0]

    def bw(g):
        full = np.zeros_like(p)
        full[:, :K] = 2.0 * diff / Tn
        _accumulate(dist, g * full)
    return _result(np.asarray(np.sum(diff * diff) / Tn), (dist,), bw, "mse")


def combined_loss(dist: Tensor, target, cfg: LossConfig = LossConfig()) -> tuple[Tensor, float, float]:
    """``ctc + lam * mse`` for a single-label or sequence target.

    Returns the differentiable total plus the two components as floats. The MSE
    term uses the first target label (episodes carry one label per video).
    """
    target = [target] if np.isscalar(target) else list(target)
    ctc = ctc_loss(dist, target)
    mse = mse_loss(dist, target[0])
    total = T.add(ctc, T.scale(mse, cfg.lam))
    return total, ctc.item(), mse.item()


def classify_by_likelihood(probs) -> tuple[int, np.ndarray]:
    """Pick the class whose single-label CTC likelihood is highest.

    Scores are log-likelihoods; ties go to the lowest class index.
    """
    probs = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    K = probs.shape[1] - 1
    scores = np.array([-ctc_loss_value(probs, [c]) for c in range(K)])
    return int(np.argmax(scores)), scores


def beam_search_decode(probs, beam_width: int = 8) -> list[int]:
    """Prefix beam search over collapsed label sequences.

    Each prefix keeps two log masses: paths ending in blank and paths ending in
    its last label, so repeats separated by a blank are distinguished from
    merged repeats.
    """
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    probs = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    K = probs.shape[1] - 1
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    lse = np.logaddexp
    beams: dict[tuple, tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(probs.shape[0]):
        nxt: dict[tuple, list[float]] = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (pb, pnb) in beams.items():
            total = lse(pb, pnb)
            entry = nxt[prefix]
            entry[0] = lse(entry[0], total + logp[t, K])
            last = prefix[-1] if prefix else None
            for c in range(K):
                lp = logp[t, c]
                if lp == NEG_INF:
                    continue
                if c == last:
                    entry[1] = lse(entry[1], pnb + lp)
                    ext = nxt[prefix + (c,)]
                    ext[1] = lse(ext[1], pb + lp)
                else:
                    ext = nxt[prefix + (c,)]
                    ext[1] = lse(ext[1], total + lp)
        ranked = sorted(nxt.items(), key=lambda kv: (-lse(*kv[1]), kv[0]))
        beams = {k: (v[0], v[1]) for k, v in ranked[:beam_width]}
    # beams is ordered best-first
    return list(next(iter(beams)))


def collapse(path, blank: int) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out, prev = [], None
    for c in path:
        if c != prev and c != blank:
            out.append(int(c))
        prev = c
    return out
