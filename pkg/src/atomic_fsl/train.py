"""Pretraining, episodic meta-training, evaluation, gradient checks and ablations."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .contrastive import AugmentationPolicy, MoCoState, pretrain_step
from .ctc import LossConfig
from .data import (Dataset, Episode, GeneratorConfig, MotifBank, SplitManifest, generate_dataset,
                   make_split, read_dataset, sample_episode)
from .encoder import ConfigError, EncoderParams, FrameFeatureSequence, WindowSpec, init_encoder
from .model import FewShotModel, episode_loss, predict_episode
from .optim import SGD
from .relation import init_pooling, init_relation

log = logging.getLogger(__name__)


def generator_config(cfg: RunConfig) -> GeneratorConfig:
    d = cfg.data
    return GeneratorConfig(num_classes=d.num_classes, motifs_per_class=d.motifs_per_class,
                           videos_per_class=d.videos_per_class, dim=d.D,
                           length_range=(d.length_min, d.length_max), noise_sigma=d.noise_sigma,
                           filler=d.filler, motif_centering=d.motif_centering, seed=cfg.seed)


def prepare_data(cfg: RunConfig) -> tuple[Dataset, SplitManifest, MotifBank | None]:
    """Load dataset and split from ``cfg.paths`` when set, otherwise generate them from ``cfg.data``."""
    bank = None
    if cfg.paths.dataset and Path(cfg.paths.dataset).exists():
        ds = read_dataset(cfg.paths.dataset)
    elif cfg.paths.dataset:
        raise FileNotFoundError(f"dataset {cfg.paths.dataset} does not exist (run gen-data first)")
    else:
        ds, bank = generate_dataset(generator_config(cfg))
    if cfg.paths.splits and Path(cfg.paths.splits).exists():
        split = SplitManifest.read(cfg.paths.splits)
    else:
        split = make_split(ds.num_classes, cfg.data.num_test, cfg.seed)
    return ds, split, bank


def _rng(cfg: RunConfig, *stream) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *stream])


def build_model(cfg: RunConfig, input_dim: int) -> FewShotModel:
    rng = _rng(cfg, 0)
    e = cfg.encoder
    encoder = init_encoder(input_dim, e.channels, e.F, e.blocks, e.kernel, e.pool, rng=rng)
    pooling = init_pooling(e.F, cfg.pooling.normalize_weights, cfg.pooling.f1_scale)
    relation = init_relation(e.F, cfg.pooling.H, rng=rng, use_conv_head=cfg.ablation.use_multihead)
    return FewShotModel(encoder, pooling, relation, WindowSpec(cfg.window.length, cfg.window.stride),
                        use_attention_pool=cfg.ablation.use_attention_pool)


def _write_jsonl(path, rows: list[dict]) -> None:
    if not path:
        return
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def model_state(model: FewShotModel, opt: SGD | None = None, step: int = 0) -> dict[str, np.ndarray]:
    named = model.named_tensors()
    state = {k: v.data for k, v in named.items()}
    if opt is not None:
        by_id = {id(t): k for k, t in named.items()}
        for p, v in zip(opt.params, opt.velocity):
            state[f"optim.{by_id[id(p)]}"] = v
    state["step"] = np.asarray(float(step))
    return state


def load_model_state(model: FewShotModel, state: dict[str, np.ndarray], prefix: str = "") -> list[str]:
    """Copy matching tensors into ``model``; returns the names that were loaded."""
    loaded = []
    for name, t in model.named_tensors().items():
        if not name.startswith(prefix) or name not in state:
            continue
        if state[name].shape != t.shape:
            raise ConfigError(f"checkpoint tensor {name} has shape {state[name].shape}, model expects {t.shape}")
        t.data[...] = state[name]
        loaded.append(name)
    return loaded


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    encoder: EncoderParams
    state: MoCoState
    metrics: list[dict] = field(default_factory=list)


def run_pretrain(cfg: RunConfig, dataset: Dataset | None = None, split: SplitManifest | None = None,
                 policy: AugmentationPolicy = AugmentationPolicy()) -> PretrainResult:
    """MoCo pretraining on the training-split videos (labels unused)."""
    if dataset is None:
        dataset, split, _ = prepare_data(cfg)
    elif split is None:
        split = make_split(dataset.num_classes, cfg.data.num_test, cfg.seed)
    model = build_model(cfg, dataset.dim)
    m = cfg.moco
    state = MoCoState.create(model.encoder, m.queue_size, m.m, m.tau, m.lr)
    train_classes = set(split.train)
    pool = [v for v in dataset.videos if v.class_id in train_classes]
    rng = _rng(cfg, 1)
    metrics = []
    for step in range(m.steps):
        pick = rng.choice(len(pool), size=min(m.batch, len(pool)), replace=False)
        row = pretrain_step(state, [pool[i] for i in pick], model.window, policy, seed=[cfg.seed, 1, step])
        metrics.append(row)
        if step % 50 == 0:
            log.info("pretrain step %d loss %.4f pos_sim %.3f", row["step"], row["loss"], row["pos_sim"])
    _write_jsonl(cfg.paths.metrics, metrics)
    if cfg.paths.checkpoint:
        save_checkpoint(cfg.paths.checkpoint, pretrain_state(state))
    return PretrainResult(state.query_params, state, metrics)


def pretrain_state(state: MoCoState) -> dict[str, np.ndarray]:
    out = {f"encoder.{k}": v.data for k, v in state.query_params.named_tensors().items()}
    out.update({f"key_encoder.{k}": v.data for k, v in state.key_params.named_tensors().items()})
    names = list(state.query_params.named_tensors())
    for n, v in zip(names, state.optimizer.velocity):
        out[f"optim.encoder.{n}"] = v
    out["step"] = np.asarray(float(state.step))
    return out


# ---------------------------------------------------------------------------
# episodic meta-training


@dataclass
class TrainResult:
    model: FewShotModel
    optimizer: SGD
    metrics: list[dict] = field(default_factory=list)


def lambda_at(cfg: RunConfig, episode: int) -> float:
    ep = cfg.episodic
    if ep.episodes <= 1:
        return ep.lam
    frac = episode / (ep.episodes - 1)
    return ep.lam + (ep.lambda_decay - ep.lam) * frac


def run_meta_train(cfg: RunConfig, init: dict[str, np.ndarray] | None = None, dataset: Dataset | None = None,
                   split: SplitManifest | None = None) -> TrainResult:
    """Episodic training on the training classes.

    ``init`` is a checkpoint mapping; its ``encoder.*`` tensors seed the encoder
    when ``ablation.use_pretrain`` is on.
    """
    if dataset is None:
        dataset, split, _ = prepare_data(cfg)
    elif split is None:
        split = make_split(dataset.num_classes, cfg.data.num_test, cfg.seed)
    model = build_model(cfg, dataset.dim)
    if init is not None and cfg.ablation.use_pretrain:
        load_model_state(model, init, prefix="encoder.")
    ep_cfg = cfg.episodic
    opt = SGD(model.parameters(), lr=ep_cfg.lr, momentum=0.9, clip_norm=ep_cfg.clip_norm)
    index = dataset.by_class()
    metrics = []
    for e in range(ep_cfg.episodes):
        episode = sample_episode(dataset, split.train, ep_cfg.K, ep_cfg.N, ep_cfg.Qn, seed=[cfg.seed, 2, e],
                                 index=index)
        lam = lambda_at(cfg, e)
        loss, info = episode_loss(model, episode, LossConfig(lam))
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        row = {"episode": e, "lambda": lam, **info}
        metrics.append(row)
        if e % 200 == 0:
            log.info("episode %d loss %.4f ctc %.4f mse %.4f", e, info["loss"], info["loss_ctc"], info["loss_mse"])
    _write_jsonl(cfg.paths.metrics, metrics)
    if cfg.paths.checkpoint:
        save_checkpoint(cfg.paths.checkpoint, model_state(model, opt, ep_cfg.episodes))
    return TrainResult(model, opt, metrics)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    half_width: float
    records: list[dict]
    max_row_error: float

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "ci95": self.half_width, "episodes": len(self.records),
                "max_row_error": self.max_row_error}


def run_eval(cfg: RunConfig, model: FewShotModel, dataset: Dataset | None = None,
             split: SplitManifest | None = None, classes: list[int] | None = None,
             episodes: int | None = None, stream: int = 3) -> EvalResult:
    """Mean test-episode accuracy with a 95% half-width of ``1.96 * std / sqrt(E)``."""
    if dataset is None:
        dataset, split, _ = prepare_data(cfg)
    if classes is None:
        split = split if split is not None else make_split(dataset.num_classes, cfg.data.num_test, cfg.seed)
        classes = split.test
    ep_cfg = cfg.episodic
    E = ep_cfg.eval_episodes if episodes is None else episodes
    index = dataset.by_class()
    records, worst = [], 0.0
    for e in range(E):
        ep = sample_episode(dataset, classes, ep_cfg.K, ep_cfg.N, ep_cfg.Qn, seed=[cfg.seed, stream, e], index=index)
        pred, dists = predict_episode(model, ep)
        row_err = max(float(np.max(np.abs(d.sum(axis=1) - 1.0))) for d in dists)
        if min(float(d.min()) for d in dists) < 0:
            row_err = math.inf
        worst = max(worst, row_err)
        records.append({"episode": e, "acc": float(np.mean(pred == ep.query_labels)), "row_error": row_err})
    accs = np.array([r["acc"] for r in records])
    half = 1.96 * float(accs.std()) / math.sqrt(len(accs))
    if cfg.paths.metrics:
        _write_jsonl(cfg.paths.metrics, records)
    return EvalResult(float(accs.mean()), half, records, worst)


# ---------------------------------------------------------------------------
# gradient check


def micro_config(seed: int = 0) -> RunConfig:
    cfg = RunConfig(seed=seed)
    cfg.window.length, cfg.window.stride = 4, 2
    cfg.encoder.blocks, cfg.encoder.channels, cfg.encoder.F, cfg.encoder.kernel = 2, 8, 8, 3
    cfg.pooling.H = 8
    cfg.pooling.f1_scale = 2.0
    cfg.episodic.K, cfg.episodic.N, cfg.episodic.Qn = 2, 1, 1
    cfg.data.D = 4
    return cfg


def micro_episode(cfg: RunConfig, rng: np.random.Generator) -> Episode:
    """Random K-way episode whose videos yield between 1 and 6 windows."""
    ep = cfg.episodic
    L, s = cfg.window.length, cfg.window.stride
    max_len = L + 5 * s

    def video(i, c):
        return FrameFeatureSequence(rng.normal(size=(int(rng.integers(L, max_len + 1)), cfg.data.D)), i, c)
    support = [[video(k * 10 + j, k) for j in range(ep.N)] for k in range(ep.K)]
    query = [video(100 + k * 10 + j, k) for k in range(ep.K) for j in range(ep.Qn)]
    labels = np.repeat(np.arange(ep.K), ep.Qn)
    return Episode(list(range(ep.K)), support, query, labels)


def kink_margin(out: T.Tensor) -> float:
    """Smallest distance of any relu input in the graph of ``out`` from the kink at zero."""
    margins = [float(np.min(np.abs(n._parents[0].data))) for n in T.Graph.from_output(out).nodes if n.op == "relu"]
    return min(margins, default=math.inf)


@dataclass
class GradcheckReport:
    params: dict[str, float]  # worst relative error per named parameter
    shift_grad: float = 0.0  # largest |gradient| of the softmax-invariant f1 biases (exactly 0 in theory)
    max_abs_grad: float | None = None  # only for the constant-loss check

    @property
    def groups(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for name, err in self.params.items():
            g = name.split(".", 1)[0]
            out[g] = max(out.get(g, 0.0), err)
        return out

    @property
    def worst(self) -> float:
        return max(self.params.values(), default=0.0)

    def failures(self, tol: float = 1e-4) -> list[str]:
        bad = [f"{n} rel err {e:.3e}" for n, e in self.params.items() if not e < tol]
        if self.shift_grad > 1e-10:
            bad.append(f"pooling f1 bias gradient {self.shift_grad:.3e} (expected 0)")
        if self.max_abs_grad:
            bad.append(f"constant loss has gradient {self.max_abs_grad:.3e}")
        return bad


def run_gradcheck(cfg: RunConfig | None = None, freeze_pooling: bool = False, loss_weight: float = 1.0,
                  eps: float = 1e-5, lam: float = 1.0, min_margin: float = 1e-3) -> GradcheckReport:
    """Finite-difference check of the full combined loss on a micro episode.

    Central differences are only an oracle where the loss is smooth, so the
    micro episode is redrawn until every relu input sits at least
    ``min_margin`` from zero. With softmax-normalized pooling weights the
    ``f1`` biases shift whole score rows and cannot change the loss; their
    exact gradient is zero, so they are checked as an absolute value
    (``shift_grad``) instead of a relative error.

    ``freeze_pooling`` excludes pooling parameters from the check (they still
    take part in the forward pass). ``loss_weight=0`` gives the degenerate
    constant-loss case, whose analytic gradients must all be zero.
    """
    cfg = micro_config() if cfg is None else cfg
    model = build_model(cfg, cfg.data.D)
    loss_cfg = LossConfig(lam)
    for attempt in range(100):
        episode = micro_episode(cfg, _rng(cfg, 9, attempt))
        if kink_margin(episode_loss(model, episode, loss_cfg)[0]) >= min_margin:
            break
    else:
        raise RuntimeError(f"no micro episode with relu margin >= {min_margin} in 100 draws")

    def f():
        loss, _ = episode_loss(model, episode, loss_cfg)
        return T.scale(loss, loss_weight)

    named = model.named_tensors()
    shift = []
    if freeze_pooling:
        named = {k: v for k, v in named.items() if not k.startswith("pooling.")}
    elif model.pooling.normalize_weights:
        shift = [named.pop("pooling.f1_bias"), named.pop("pooling.swap_f1_bias")]
    report = GradcheckReport({name: T.grad_check(f, [t], eps=eps) for name, t in named.items()})
    for p in model.parameters():
        p.grad = None
    T.backward(f())
    report.shift_grad = max((abs(float(p.grad)) if p.grad is not None else 0.0 for p in shift), default=0.0)
    if loss_weight == 0.0:
        report.max_abs_grad = max(float(np.max(np.abs(p.grad))) if p.grad is not None else 0.0
                                  for p in model.parameters())
    return report


# ---------------------------------------------------------------------------
# full pipeline and ablations


@dataclass
class PipelineResult:
    eval: EvalResult
    train: TrainResult
    pretrain: PretrainResult | None = None


def run_pipeline(cfg: RunConfig, dataset: Dataset, split: SplitManifest, eval_classes=None,
                 eval_dataset: Dataset | None = None) -> PipelineResult:
    pre = None
    init = None
    if cfg.ablation.use_pretrain and cfg.moco.steps > 0:
        pre = run_pretrain(replace(cfg, paths=replace(cfg.paths, metrics="", checkpoint="")), dataset, split)
        init = {f"encoder.{k}": v.data for k, v in pre.encoder.named_tensors().items()}
    quiet = replace(cfg, paths=replace(cfg.paths, metrics="", checkpoint=""))
    tr = run_meta_train(quiet, init, dataset, split)
    ev = run_eval(quiet, tr.model, eval_dataset or dataset, split, classes=eval_classes)
    return PipelineResult(ev, tr, pre)


ABLATIONS = {
    "full": {},
    "w/o pretraining": {"use_pretrain": False},
    "w/o AP": {"use_attention_pool": False},
    "w/o RN": {"use_multihead": False},
}


def ablation_config(cfg: RunConfig, name: str) -> RunConfig:
    return replace(cfg, ablation=replace(cfg.ablation, **ABLATIONS[name]))


def run_ablation(cfg: RunConfig, dataset: Dataset, split: SplitManifest) -> dict[str, EvalResult]:
    """Train and evaluate the full model and each single-component ablation on identical episodes."""
    return {name: run_pipeline(ablation_config(cfg, name), dataset, split).eval for name in ABLATIONS}
