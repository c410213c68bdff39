"""Synthetic motif-composition action dataset, AFSD file I/O, class splits and episode sampling.

A class owns a handful of smooth motifs (its sub-actions). A video strings 2-4
of them together in random order, each time-stretched, separated by
background filler and covered in per-frame noise. Class identity therefore
lives in *which* motifs appear, not in their order.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoder import ConfigError, FrameFeatureSequence

AFSD_MAGIC = b"AFSD"
AFSD_VERSION = 1


class FormatError(ValueError):
    """Malformed dataset, manifest or checkpoint file."""


class SamplingError(ValueError):
    """Not enough classes or videos to draw an episode."""


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 40
    motifs_per_class: int = 4
    videos_per_class: int = 24
    dim: int = 32
    length_range: tuple[int, int] = (48, 128)
    noise_sigma: float = 0.05
    motif_length: int = 16
    motifs_per_video: tuple[int, int] = (2, 4)
    stretch: float = 0.25
    # "heterogeneous": filler cut from a shared pool of random background motifs
    # "homogeneous": one fixed low-amplitude background for every video
    # "none": motifs back to back, T = content length
    filler: str = "heterogeneous"
    background_motifs: int = 16
    min_motif_distance: float = 0.25
    # fraction of each motif's (and background piece's) temporal mean removed;
    # 1.0 leaves no class signal in frame averages
    motif_centering: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if min(self.num_classes, self.motifs_per_class, self.videos_per_class, self.dim, self.motif_length) < 1:
            raise ConfigError("generator sizes must be positive")
        lo, hi = self.length_range
        if not 8 <= lo <= hi <= 512:
            raise ConfigError(f"length_range {self.length_range} must lie within [8, 512]")
        if not 0 <= self.stretch < 1:
            raise ConfigError(f"stretch {self.stretch} must be in [0, 1)")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0 <= self.motif_centering <= 1:
            raise ConfigError("motif_centering must be in [0, 1]")
        if self.filler not in ("heterogeneous", "homogeneous", "none"):
            raise ConfigError(f"unknown filler style {self.filler!r}")
        worst = self.motifs_per_video[1] * int(np.ceil(self.motif_length * (1 + self.stretch)))
        if worst > hi:
            raise ConfigError(f"{self.motifs_per_video[1]} stretched motifs need {worst} frames, above length_range max {hi}")


@dataclass
class MotifBank:
    motifs: np.ndarray  # (num_classes, motifs_per_class, Lm, D)
    background: np.ndarray  # (background_motifs, Lm, D)
    config: GeneratorConfig


@dataclass
class Dataset:
    videos: list[FrameFeatureSequence]
    num_classes: int
    dim: int = 0

    def __post_init__(self):
        if not self.dim and self.videos:
            self.dim = self.videos[0].dim

    def __len__(self):
        return len(self.videos)

    def by_class(self) -> dict[int, list[FrameFeatureSequence]]:
        out: dict[int, list[FrameFeatureSequence]] = {c: [] for c in range(self.num_classes)}
        for v in self.videos:
            out[v.class_id].append(v)
        return out


def _smooth_walk(rng: np.random.Generator, length: int, dim: int, centering: float = 0.0) -> np.ndarray:
    steps = rng.normal(size=(length + 2, dim))
    steps = (steps[:-2] + steps[1:-1] + steps[2:]) / 3.0
    walk = np.cumsum(steps, axis=0)
    walk = walk / max(np.abs(walk).max(), 1e-12)
    return walk - centering * walk.mean(axis=0)


def make_motif_bank(cfg: GeneratorConfig, rng: np.random.Generator) -> MotifBank:
    """Draw class motifs, rejecting any closer than ``min_motif_distance`` (RMS) to an earlier one."""
    accepted: list[np.ndarray] = []
    total = cfg.num_classes * cfg.motifs_per_class
    tries = 0
    while len(accepted) < total:
        m = _smooth_walk(rng, cfg.motif_length, cfg.dim, cfg.motif_centering)
        tries += 1
        if tries > 100 * total:
            raise ConfigError("could not draw sufficiently distinct motifs; lower min_motif_distance")
        if all(np.sqrt(np.mean((m - a) ** 2)) >= cfg.min_motif_distance for a in accepted):
            accepted.append(m)
    motifs = np.stack(accepted).reshape(cfg.num_classes, cfg.motifs_per_class, cfg.motif_length, cfg.dim)
    background = np.stack([_smooth_walk(rng, cfg.motif_length, cfg.dim, cfg.motif_centering)
                           for _ in range(cfg.background_motifs)])
    return MotifBank(motifs, background, cfg)


def _stretch(x: np.ndarray, factor: float) -> np.ndarray:
    n = max(2, int(round(x.shape[0] * factor)))
    src = np.linspace(0, x.shape[0] - 1, n)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, x.shape[0] - 1)
    w = (src - lo)[:, None]
    return (1 - w) * x[lo] + w * x[hi]


def _filler(bank: MotifBank, n: int, rng: np.random.Generator) -> np.ndarray:
    cfg = bank.config
    if n == 0:
        return np.zeros((0, cfg.dim))
    if cfg.filler == "homogeneous":
        return np.tile(0.1 * bank.background[0].mean(axis=0), (n, 1))
    parts, have = [], 0
    while have < n:
        piece = bank.background[rng.integers(len(bank.background))]
        parts.append(piece)
        have += piece.shape[0]
    return np.concatenate(parts)[:n]


def _choose_order(bank: MotifBank, cls: int, rng: np.random.Generator, order: str) -> list[int]:
    cfg = bank.config
    lo, hi = cfg.motifs_per_video
    count = min(int(rng.integers(lo, hi + 1)), cfg.motifs_per_class)
    chosen = rng.choice(cfg.motifs_per_class, size=count, replace=False)
    if order == "random":
        return [int(i) for i in chosen]
    canon = sorted(int(i) for i in chosen)
    if order == "canonical":
        return canon
    if order == "shuffled":
        # any arrangement except the canonical one, when one exists
        others = [list(p) for p in itertools.permutations(canon) if list(p) != canon]
        return others[int(rng.integers(len(others)))] if others else canon
    raise ConfigError(f"unknown motif order {order!r}")


def make_video(bank: MotifBank, cls: int, rng: np.random.Generator, order: str = "random") -> np.ndarray:
    cfg = bank.config
    pieces = []
    for idx in _choose_order(bank, cls, rng, order):
        factor = 1.0 + rng.uniform(-cfg.stretch, cfg.stretch) if cfg.stretch > 0 else 1.0
        m = bank.motifs[cls, idx]
        pieces.append(_stretch(m, factor) if factor != 1.0 else m)
    content = sum(p.shape[0] for p in pieces)
    lo, hi = cfg.length_range
    if cfg.filler == "none":
        frames = np.concatenate(pieces)
    else:
        T = int(rng.integers(max(lo, content), hi + 1))
        gaps = rng.multinomial(T - content, np.full(len(pieces) + 1, 1.0 / (len(pieces) + 1)))
        seq = [_filler(bank, int(gaps[0]), rng)]
        for p, g in zip(pieces, gaps[1:]):
            seq += [p, _filler(bank, int(g), rng)]
        frames = np.concatenate(seq)
    if cfg.noise_sigma > 0:
        frames = frames + rng.normal(0.0, cfg.noise_sigma, size=frames.shape)
    return frames


def generate_dataset(cfg: GeneratorConfig = GeneratorConfig(), **overrides) -> tuple[Dataset, MotifBank]:
    """Build a dataset plus the motif bank it was drawn from; deterministic in ``cfg.seed``."""
    cfg = replace(cfg, **overrides) if overrides else cfg
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    bank = make_motif_bank(cfg, rng)
    ds = regenerate(bank, range(cfg.num_classes), cfg.videos_per_class, seed=cfg.seed + 1)
    return ds, bank


def regenerate(bank: MotifBank, classes, videos_per_class: int, seed: int, order: str = "random") -> Dataset:
    """Fresh videos for ``classes`` from an existing motif bank.

    ``order`` selects how motifs are arranged: ``"random"`` (the training
    distribution), ``"canonical"`` (bank order) or ``"shuffled"`` (any order but
    the canonical one, for permutation stress tests).
    """
    cfg = bank.config
    videos = []
    for cls in classes:
        # per-class stream so classes are reproducible independently
        rng = np.random.default_rng([seed, int(cls)])
        for _ in range(videos_per_class):
            frames = make_video(bank, int(cls), rng, order)
            videos.append(FrameFeatureSequence(frames, video_id=len(videos), class_id=int(cls)))
    return Dataset(videos, cfg.num_classes, cfg.dim)


# ---------------------------------------------------------------------------
# AFSD files


def write_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(AFSD_MAGIC)
        fh.write(struct.pack("<III", AFSD_VERSION, ds.num_classes, len(ds.videos)))
        for v in ds.videos:
            frames = np.ascontiguousarray(v.frames, dtype="<f4")
            fh.write(struct.pack("<III", int(v.class_id), frames.shape[0], frames.shape[1]))
            fh.write(frames.tobytes())


def read_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise FormatError(f"{path}: truncated header at byte offset {len(buf)}")
    if buf[:4] != AFSD_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} at byte offset 0")
    version, num_classes, num_videos = struct.unpack_from("<III", buf, 4)
    if version != AFSD_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    off = 16
    videos = []
    for i in range(num_videos):
        if off + 12 > len(buf):
            raise FormatError(f"{path}: truncated video header {i} at byte offset {off}")
        cls, T, D = struct.unpack_from("<III", buf, off)
        off += 12
        nbytes = 4 * T * D
        if off + nbytes > len(buf):
            raise FormatError(f"{path}: truncated frames of video {i} at byte offset {off}")
        frames = np.frombuffer(buf, dtype="<f4", count=T * D, offset=off).reshape(T, D)
        videos.append(FrameFeatureSequence(frames.astype(np.float64), video_id=i, class_id=cls))
        off += nbytes
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes at byte offset {off}")
    return Dataset(videos, num_classes)


# ---------------------------------------------------------------------------
# splits and episodes


@dataclass
class SplitManifest:
    train: list[int]
    test: list[int]
    seed: int = 0

    def __post_init__(self):
        if set(self.train) & set(self.test):
            raise ConfigError(f"train and test classes overlap: {sorted(set(self.train) & set(self.test))}")

    def write(self, path) -> None:
        Path(path).write_text(
            f"train: {','.join(map(str, self.train))}\n"
            f"test: {','.join(map(str, self.test))}\n"
            f"seed: {self.seed}\n")

    @classmethod
    def read(cls, path) -> "SplitManifest":
        fields: dict[str, str] = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            key, sep, value = line.partition(":")
            if not sep or key.strip() not in ("train", "test", "seed"):
                raise FormatError(f"{path}: line {lineno}: expected 'train:', 'test:' or 'seed:'")
            fields[key.strip()] = value.strip()
        try:
            ids = {k: [int(x) for x in fields.get(k, "").split(",") if x.strip()] for k in ("train", "test")}
            return cls(ids["train"], ids["test"], int(fields.get("seed", "0")))
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None


def make_split(num_classes: int, num_test: int, seed: int = 0) -> SplitManifest:
    perm = np.random.default_rng(seed).permutation(num_classes)
    return SplitManifest(sorted(int(c) for c in perm[num_test:]), sorted(int(c) for c in perm[:num_test]), seed)


@dataclass
class Episode:
    class_ids: list[int]
    support: list[list[FrameFeatureSequence]]  # K lists of N videos
    query: list[FrameFeatureSequence]
    query_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))  # episode-local 0..K-1

    @property
    def K(self) -> int:
        return len(self.class_ids)


def sample_episode(ds: Dataset, split: list[int], K: int, N: int, Qn: int, seed,
                   index: dict[int, list[FrameFeatureSequence]] | None = None) -> Episode:
    """Draw a K-way N-shot episode with Qn queries per class, all without replacement."""
    if len(split) < K:
        raise SamplingError(f"split has {len(split)} classes, episode needs {K}")
    index = ds.by_class() if index is None else index
    rng = np.random.default_rng(seed)
    classes = [int(c) for c in rng.choice(sorted(split), size=K, replace=False)]
    support, query, labels = [], [], []
    for k, c in enumerate(classes):
        pool = index.get(c, [])
        if len(pool) < N + Qn:
            raise SamplingError(f"class {c} has {len(pool)} videos, episode needs {N + Qn}")
        pick = rng.choice(len(pool), size=N + Qn, replace=False)
        support.append([pool[i] for i in pick[:N]])
        query += [pool[i] for i in pick[N:]]
        labels += [k] * Qn
    return Episode(classes, support, query, np.array(labels, dtype=int))


def nearest_prototype_accuracy(ds: Dataset, split: list[int], K: int = 3, N: int = 5, Qn: int = 3,
                               episodes: int = 500, seed: int = 0) -> float:
    """Baseline: classify each query by the nearest class mean of per-video mean frame features."""
    index = ds.by_class()
    correct = total = 0
    for e in range(episodes):
        ep = sample_episode(ds, split, K, N, Qn, seed=[seed, e], index=index)
        protos = np.stack([np.mean([v.frames.mean(axis=0) for v in vids], axis=0) for vids in ep.support])
        for v, y in zip(ep.query, ep.query_labels):
            d = ((protos - v.frames.mean(axis=0)) ** 2).sum(axis=1)
            correct += int(np.argmin(d) == y)
            total += 1
    return correct / total
