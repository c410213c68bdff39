"""Command line front end: ``atomic-fsl <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Every subcommand reads and writes plain files under ``--out``:

    dataset.afsd, splits.txt          gen-data
    stress_canonical.afsd,
    stress_shuffled.afsd              gen-data (test classes, fixed vs. shuffled motif order)
    pretrain.afsc, pretrain.jsonl     pretrain
    model.afsc, train.jsonl           meta-train
    eval.jsonl, eval.json             eval
    gradcheck.json                    gradcheck
    ablation.json                     ablate

Failures exit nonzero after printing one line ``error: <category>: <message>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .ctc import InfeasibleTargetError
from .data import (FormatError, SamplingError, generate_dataset, make_split, read_dataset, regenerate,
                   write_dataset)
from .encoder import ConfigError, InputError
from .relation import EpisodeError
from .train import (ABLATIONS, ablation_config, build_model, generator_config, load_model_state, prepare_data,
                    run_eval, micro_config, run_gradcheck, run_meta_train, run_pipeline,
                    run_pretrain)

log = logging.getLogger("atomic_fsl")


class CheckFailed(RuntimeError):
    """A self-check (gradcheck) did not pass."""


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # pick up gen-data output in --out unless the config names its own files;
    # with neither, data is generated in memory from the config
    p = cfg.paths
    if not p.dataset and (out / "dataset.afsd").exists():
        p.dataset = str(out / "dataset.afsd")
    if not p.splits and (out / "splits.txt").exists():
        p.splits = str(out / "splits.txt")
    return cfg.validate()


def _paths(cfg: RunConfig, out: Path, checkpoint: str, metrics: str) -> RunConfig:
    return replace(cfg, paths=replace(cfg.paths, checkpoint=str(out / checkpoint), metrics=str(out / metrics)))


def _dump(obj, path: Path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    path.write_text(text + "\n")
    print(text)


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    ds, bank = generate_dataset(generator_config(cfg))
    split = make_split(ds.num_classes, cfg.data.num_test, cfg.seed)
    write_dataset(out / "dataset.afsd", ds)
    split.write(out / "splits.txt")
    n = cfg.data.videos_per_class
    write_dataset(out / "stress_canonical.afsd", regenerate(bank, split.test, n, cfg.seed + 2, order="canonical"))
    write_dataset(out / "stress_shuffled.afsd", regenerate(bank, split.test, n, cfg.seed + 2, order="shuffled"))
    print(f"wrote {len(ds)} videos, {len(split.train)} train / {len(split.test)} test classes to {out}")


def cmd_pretrain(cfg: RunConfig, out: Path) -> None:
    res = run_pretrain(_paths(cfg, out, "pretrain.afsc", "pretrain.jsonl"))
    last = res.metrics[-1] if res.metrics else {}
    print(json.dumps({"steps": len(res.metrics), **{k: last[k] for k in ("loss", "pos_sim", "retrieval")
                                                    if k in last}}))


def cmd_meta_train(cfg: RunConfig, out: Path) -> None:
    init = None
    if cfg.ablation.use_pretrain and (out / "pretrain.afsc").exists():
        init = load_checkpoint(out / "pretrain.afsc")
        log.info("encoder initialized from %s", out / "pretrain.afsc")
    res = run_meta_train(_paths(cfg, out, "model.afsc", "train.jsonl"), init)
    tail = res.metrics[-100:]
    print(json.dumps({"episodes": len(res.metrics),
                      "last100_acc": sum(m["acc"] for m in tail) / max(len(tail), 1)}))


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    ckpt = Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else out / "model.afsc"
    ds, split, _ = prepare_data(cfg)
    model = build_model(cfg, ds.dim)
    state = load_checkpoint(ckpt)
    missing = set(model.named_tensors()) - set(load_model_state(model, state))
    if missing:
        raise FormatError(f"{ckpt}: missing tensors {sorted(missing)}")
    res = run_eval(_paths(cfg, out, "", "eval.jsonl"), model, ds, split)
    summary = {"test": res.summary()}
    quiet = replace(cfg, paths=replace(cfg.paths, metrics=""))
    for name in ("canonical", "shuffled"):
        path = out / f"stress_{name}.afsd"
        if path.exists():
            stress = read_dataset(path)
            summary[f"stress_{name}"] = run_eval(quiet, model, stress, classes=sorted(split.test)).summary()
    _dump(summary, out / "eval.json")


def cmd_gradcheck(cfg: RunConfig, out: Path) -> None:
    report = run_gradcheck(micro_config(cfg.seed))
    _dump({"groups": report.groups, "params": report.params, "shift_grad": report.shift_grad}, out / "gradcheck.json")
    bad = report.failures()
    if bad:
        raise CheckFailed("; ".join(bad))


def cmd_ablate(cfg: RunConfig, out: Path) -> None:
    ds, split, _ = prepare_data(cfg)
    quiet = replace(cfg, paths=replace(cfg.paths, metrics="", checkpoint=""))
    results = {name: run_pipeline(ablation_config(quiet, name), ds, split).eval.summary() for name in ABLATIONS}
    _dump(results, out / "ablation.json")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic dataset, split manifest and permutation-stress sets"),
    "pretrain": (cmd_pretrain, "momentum-contrast pretraining of the encoder"),
    "meta-train": (cmd_meta_train, "episodic training (initialized from pretrain.afsc when present)"),
    "eval": (cmd_eval, "test-split episode accuracy of model.afsc"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the full loss on a micro episode"),
    "ablate": (cmd_ablate, "full model vs. w/o pretraining, w/o attention pooling, w/o relation head"),
}

ERRORS = [
    (ConfigError, "config", 2),
    (FormatError, "format", 3),
    (FileNotFoundError, "io", 4),
    (OSError, "io", 4),
    (SamplingError, "sampling", 5),
    ((InputError, EpisodeError, InfeasibleTargetError), "input", 6),
    (CheckFailed, "check", 7),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atomic-fsl", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="out", help="directory for data, checkpoints and metrics (default: out)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command][0](cfg, Path(args.out))
    except Exception as exc:
        for kinds, category, code in ERRORS:
            if isinstance(exc, kinds):
                msg = " ".join(str(exc).split())
                print(f"error: {category}: {msg}", file=sys.stderr)
                return code
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
