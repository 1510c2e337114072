"""Command-line entry point: ``ctmos <command> [<subcommand>] [flags]``.

Configuration comes from defaults, then a flat ``key = value`` file (or a
previous run's manifest.json) given with ``--config``, then flags.  Every
run writes ``manifest.json`` into its output directory before starting work.
Failures print one line ``error<TAB>kind<TAB>message`` to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (DEFAULT_NORMALIZATIONS, Recipe, case_study_topk, case_study_tsv,
                       position_statistics, positions_tsv, run_constant_tau_ablation,
                       run_normalization_ablation, temperature_trajectories, trajectories_tsv)
from .checkpoint import load_checkpoint
from .corpus import SPLITS, load_corpus, make_batches, preprocess, preprocess_files
from .errors import ConfigurationError, CTMoSError
from .model import CTMoSModel, MoSConfig, TemperatureConfig
from .objective import LossWeights
from .oracle import SURFACES, gradient_mesh, grid, oracle_agreement
from .trainer import TrainConfig, evaluate_perplexity, fit

log = logging.getLogger("ctmos")

DEFAULTS = {
    # model
    "emb_size": 64, "layer_sizes": "128,128", "mixtures": 3, "latent_size": 0,
    "dropout_input": 0.2, "dropout_hidden": 0.2, "dropout_output": 0.2,
    # temperature
    "head": "contextual", "variant": "softmax", "alpha": 1.0, "beta": 0.5, "lam": 0.0,
    "rank": 0, "constant": 1.0,
    # training
    "lr": 5.0, "clip": 0.25, "epochs": 10, "batch_size": 20, "bptt": 35, "eval_batch_size": 10,
    "seed": 1, "ar": 2.0, "tar": 1.0, "wd": 1.2e-6, "ls_enabled": True, "ls_detached": True,
    "lr_decay": 0.5, "patience": 2, "eval_every": 1,
    # workflows
    "cap": 10000, "topk": 4, "samples": 1000, "taus": "0.5,1,4", "resolution": 41,
    "tokens": 20, "probe_tokens": 2000, "split": "valid",
}

# flag dest -> config key
FLAG_KEYS = {"seed": "seed", "cap": "cap", "alpha": "alpha", "beta": "beta", "variant": "variant",
             "lam": "lam", "mixtures": "mixtures", "rank": "rank", "epochs": "epochs", "lr": "lr",
             "clip": "clip", "bptt": "bptt", "batch": "batch_size", "topk": "topk",
             "samples": "samples", "head": "head", "taus": "taus", "resolution": "resolution",
             "tokens": "tokens", "split": "split"}


def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("1", "true", "yes", "on"):
            return True
        if str(raw).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return type(default)(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key}: cannot parse {raw!r}") from None


def read_config(path) -> dict:
    """Parse a ``key = value`` file (``#`` comments) or a manifest.json."""
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith(".json"):
        data = json.loads(text)
        return dict(data.get("config", data))
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def resolve(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        for k, v in read_config(args.config).items():
            if k not in DEFAULTS:
                raise ConfigurationError(f"unknown configuration key {k!r}")
            cfg[k] = v
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            cfg[key] = v
    return {k: _coerce(k, v) for k, v in cfg.items()}


def model_configs(cfg: dict, vocab_size: int) -> tuple[MoSConfig, TemperatureConfig]:
    mcfg = MoSConfig(vocab_size=vocab_size, emb_size=cfg["emb_size"],
                     layer_sizes=tuple(int(s) for s in cfg["layer_sizes"].split(",")),
                     mixtures=cfg["mixtures"], latent_size=cfg["latent_size"] or None,
                     dropout_input=cfg["dropout_input"], dropout_hidden=cfg["dropout_hidden"],
                     dropout_output=cfg["dropout_output"])
    tcfg = TemperatureConfig(head=cfg["head"], variant=cfg["variant"], alpha=cfg["alpha"],
                             beta=cfg["beta"], lam=cfg["lam"] or None, rank=cfg["rank"] or None,
                             constant=cfg["constant"])
    return mcfg, tcfg


def train_config(cfg: dict) -> TrainConfig:
    weights = LossWeights(cfg["ar"], cfg["tar"], cfg["wd"], cfg["ls_enabled"], cfg["ls_detached"])
    return TrainConfig(lr=cfg["lr"], clip=cfg["clip"], epochs=cfg["epochs"],
                       batch_size=cfg["batch_size"], bptt=cfg["bptt"],
                       eval_batch_size=cfg["eval_batch_size"], seed=cfg["seed"], weights=weights,
                       lr_decay=cfg["lr_decay"], patience=cfg["patience"],
                       eval_every=cfg["eval_every"])


def _digest_paths(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.name == "manifest.json":
                continue
            out[str(f)] = hashlib.sha256(f.read_bytes()).hexdigest()
    return out


def write_manifest(out_dir, command: str, cfg: dict, paths: dict, inputs=()) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "version": __version__, "seed": cfg["seed"],
                "config": cfg, "paths": paths, "input_digests": _digest_paths(inputs)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _need(args, name):
    v = getattr(args, name)
    if v is None:
        raise ConfigurationError(f"--{name.replace('_', '-')} is required")
    return v


# -- commands -------------------------------------------------------------------

def cmd_preprocess(args, cfg):
    src = Path(_need(args, "inp"))
    if src.is_dir():
        inputs = {s: src / f"{s}.txt" for s in SPLITS if (src / f"{s}.txt").exists()}
    else:
        inputs = {"train": src}
    if not all(p.exists() for p in inputs.values()) or not inputs:
        raise ConfigurationError(f"no input text found at {src}")
    write_manifest(args.out, "preprocess", cfg, {"in": str(src), "out": args.out},
                   list(inputs.values()))
    vocab = preprocess_files(inputs, args.out, cfg["cap"])
    print(f"vocab_size\t{len(vocab)}")
    return 0


def _corpus(args):
    vocab, splits = load_corpus(_need(args, "inp"))
    if "train" not in splits:
        raise ConfigurationError("corpus has no train split")
    return vocab, splits


def cmd_train(args, cfg):
    vocab, splits = _corpus(args)
    write_manifest(args.out, "train", cfg, {"in": args.inp, "out": args.out}, [args.inp])
    mcfg, tcfg = model_configs(cfg, len(vocab))
    model = CTMoSModel.create(mcfg, tcfg, cfg["seed"])
    history = fit(model, splits["train"], splits.get("valid"), train_config(cfg),
                  vocab.digest(), args.out)
    print(f"final_valid_ppl\t{history[-1].valid_ppl:.6f}")
    return 0


def cmd_eval(args, cfg):
    vocab, splits = load_corpus(_need(args, "inp"))
    ckpt_path = _need(args, "checkpoint")
    write_manifest(args.out, "eval", cfg, {"in": args.inp, "checkpoint": ckpt_path},
                   [args.inp, ckpt_path])
    model = load_checkpoint(ckpt_path, vocab.digest()).to_model()
    split = cfg["split"]
    if split not in splits:
        raise ConfigurationError(f"corpus has no {split} split")
    ppl = evaluate_perplexity(model, make_batches(splits[split], cfg["eval_batch_size"], cfg["bptt"]))
    print(f"{split}_ppl\t{ppl:.6f}")
    return 0


def cmd_oracle_mesh(args, cfg):
    write_manifest(args.out, "oracle mesh", cfg, {"out": args.out})
    surfaces = SURFACES if args.surface in (None, "all") else [args.surface]
    axis = grid(cfg["resolution"])
    for s in surfaces:
        mesh = gradient_mesh(s, axis, axis)
        (Path(args.out) / f"mesh_{s}.csv").write_text(mesh.to_csv())
    print(f"surfaces\t{','.join(surfaces)}")
    return 0


def cmd_oracle_check(args, cfg):
    write_manifest(args.out, "oracle check", cfg, {"out": args.out})
    res = oracle_agreement(cfg["samples"], cfg["seed"])
    print(f"max_relative_error\t{res['max']:.3e}")
    return 0 if res["max"] < 1e-8 else 1


def _recipe(args, cfg) -> Recipe:
    vocab, splits = _corpus(args)
    if "valid" not in splits:
        raise ConfigurationError("ablations need a valid split")
    mcfg, tcfg = model_configs(cfg, len(vocab))
    return Recipe(mcfg, tcfg, train_config(cfg), splits["train"], splits["valid"],
                  splits.get("test"), vocab.digest())


def cmd_ablate_constant(args, cfg):
    recipe = _recipe(args, cfg)
    write_manifest(args.out, "ablate constant-tau", cfg, {"in": args.inp, "out": args.out},
                   [args.inp])
    taus = [float(t) for t in cfg["taus"].split(",")]
    table = run_constant_tau_ablation(taus, recipe, args.out)
    (Path(args.out) / "constant_tau.tsv").write_text(table.to_tsv())
    sys.stdout.write(table.to_tsv())
    return 0


def cmd_ablate_normalization(args, cfg):
    recipe = _recipe(args, cfg)
    write_manifest(args.out, "ablate normalization", cfg, {"in": args.inp, "out": args.out},
                   [args.inp])
    table = run_normalization_ablation(DEFAULT_NORMALIZATIONS, recipe, args.out)
    (Path(args.out) / "normalization.tsv").write_text(table.to_tsv())
    sys.stdout.write(table.to_tsv())
    return 0


def cmd_analyze_trajectories(args, cfg):
    vocab, splits = load_corpus(_need(args, "inp"))
    run = Path(_need(args, "run"))
    paths = sorted(run.glob("epoch_*.ckpt"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise ConfigurationError(f"no epoch_*.ckpt files in {run}")
    write_manifest(args.out, "analyze trajectories", cfg,
                   {"in": args.inp, "run": str(run), "out": args.out}, [args.inp, *paths])
    ckpts = [load_checkpoint(p) for p in paths]
    probe = splits.get(cfg["split"], splits["train"])[: cfg["probe_tokens"]]
    recs = temperature_trajectories(ckpts, probe, range(min(cfg["tokens"], len(vocab))),
                                    vocab.digest())
    text = trajectories_tsv(recs, vocab)
    (Path(args.out) / "trajectories.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_analyze_positions(args, cfg):
    vocab, splits = load_corpus(_need(args, "inp"))
    ckpt_path = _need(args, "checkpoint")
    write_manifest(args.out, "analyze positions", cfg,
                   {"in": args.inp, "checkpoint": ckpt_path, "out": args.out},
                   [args.inp, ckpt_path])
    model = load_checkpoint(ckpt_path, vocab.digest()).to_model()
    stats = position_statistics(model, splits[cfg["split"]], vocab.eos)
    text = positions_tsv(stats)
    (Path(args.out) / "positions.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_analyze_case(args, cfg):
    vocab, _ = load_corpus(_need(args, "inp"))
    a, b = _need(args, "checkpoint"), _need(args, "checkpoint_b")
    write_manifest(args.out, "analyze case-study", cfg,
                   {"in": args.inp, "checkpoint": a, "checkpoint_b": b, "out": args.out,
                    "context": args.context}, [args.inp, a, b])
    ma = load_checkpoint(a, vocab.digest()).to_model()
    mb = load_checkpoint(b, vocab.digest()).to_model()
    ids = vocab.encode(preprocess(_need(args, "context")))
    if len(ids) == 0:
        raise ConfigurationError("context is empty after preprocessing")
    text = case_study_tsv(case_study_topk(ma, mb, ids, cfg["topk"]), vocab)
    (Path(args.out) / "case_study.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


# -- parser ---------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, default_out: str):
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--in", dest="inp")
    p.add_argument("--out", default=default_out)
    p.add_argument("--checkpoint")


def _model_flags(p):
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--variant", choices=("softmax", "pow-tanh", "tanh-shift"))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--mixtures", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--head", choices=("contextual", "constant", "none"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--bptt", type=int)
    p.add_argument("--batch", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctmos", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="clean raw text and build the vocabulary")
    _common(p, "corpus")
    p.add_argument("--cap", type=int)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a preprocessed corpus")
    _common(p, "run")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus split")
    _common(p, "ctmos_out/eval")
    p.add_argument("--bptt", type=int)
    p.add_argument("--split", choices=SPLITS)
    p.set_defaults(func=cmd_eval)

    oracle = sub.add_parser("oracle", help="closed-form two-class gradients")
    osub = oracle.add_subparsers(dest="action", required=True)
    p = osub.add_parser("mesh", help="write gradient surfaces as CSV")
    _common(p, "ctmos_out/mesh")
    p.add_argument("--surface", choices=(*SURFACES, "all"))
    p.add_argument("--resolution", type=int)
    p.set_defaults(func=cmd_oracle_mesh)
    p = osub.add_parser("check", help="autodiff versus closed forms on random points")
    _common(p, "ctmos_out/oracle_check")
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_oracle_check)

    ablate = sub.add_parser("ablate", help="ablation tables")
    asub = ablate.add_subparsers(dest="action", required=True)
    p = asub.add_parser("constant-tau", help="constant temperatures versus contextual")
    _common(p, "ctmos_out/ablate_constant_tau")
    _model_flags(p)
    p.add_argument("--taus")
    p.set_defaults(func=cmd_ablate_constant)
    p = asub.add_parser("normalization", help="temperature normalizers")
    _common(p, "ctmos_out/ablate_normalization")
    _model_flags(p)
    p.set_defaults(func=cmd_ablate_normalization)

    analyze = sub.add_parser("analyze", help="temperature analyses")
    nsub = analyze.add_subparsers(dest="action", required=True)
    p = nsub.add_parser("trajectories", help="per-token temperature across epochs")
    _common(p, "ctmos_out/trajectories")
    p.add_argument("--run", help="training output directory holding epoch_*.ckpt")
    p.add_argument("--tokens", type=int, help="number of most frequent tokens to track")
    p.add_argument("--split", choices=SPLITS)
    p.set_defaults(func=cmd_analyze_trajectories)
    p = nsub.add_parser("positions", help="temperature by normalized sentence position")
    _common(p, "ctmos_out/positions")
    p.add_argument("--split", choices=SPLITS)
    p.set_defaults(func=cmd_analyze_positions)
    p = nsub.add_parser("case-study", help="top-k predictions of two models side by side")
    _common(p, "ctmos_out/case_study")
    p.add_argument("--checkpoint-b", dest="checkpoint_b")
    p.add_argument("--context")
    p.add_argument("--topk", type=int)
    p.set_defaults(func=cmd_analyze_case)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return args.func(args, cfg)
    except CTMoSError as exc:
        print(f"error\t{exc.kind}\t{exc}".replace("\n", " "), file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error\tio\t{exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
