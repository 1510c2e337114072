"""Deterministic SGD training with global-norm clipping and perplexity evaluation."""

from __future__ import annotations

import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph
from .checkpoint import Checkpoint, save_checkpoint
from .corpus import make_batches
from .errors import ConfigurationError, TrainingDivergedError, ValidationError
from .model import CTMoSModel, sample_masks
from .objective import LOG_FLOOR, LossWeights, total_loss
from .rng import stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5.0
    clip: float = 0.25
    epochs: int = 10
    batch_size: int = 20
    bptt: int = 35
    eval_batch_size: int = 10
    seed: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    lr_decay: float = 0.5
    patience: int = 2
    eval_every: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if not self.clip > 0:
            raise ConfigurationError(f"clip norm must be positive, got {self.clip}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.eval_every < 1:
            raise ConfigurationError("eval cadence must be >= 1")


@dataclass
class OptimizerState:
    lr: float
    steps: int = 0
    best_valid_ppl: float = float("inf")
    bad_evals: int = 0

    def as_dict(self) -> dict:
        return {"lr": self.lr, "steps": self.steps, "best_valid_ppl": self.best_valid_ppl,
                "bad_evals": self.bad_evals}


@dataclass
class EpochMetrics:
    mean_total: float
    mean_ce: float
    batches: int
    log_floor_hits: int
    max_grad_norm: float
    losses: list = field(default_factory=list)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def _dump(model, opt: OptimizerState, batch: int, **terms) -> dict:
    return {"batch": batch, "lr": opt.lr, "steps": opt.steps, **terms,
            "param_norms": {k: float(np.linalg.norm(v)) for k, v in model.params.items()}}


def train_epoch(model: CTMoSModel, batches, config: TrainConfig, opt: OptimizerState,
                dropout_rng: np.random.Generator) -> EpochMetrics:
    """One pass of forward, loss, backward, clip and SGD step per batch.

    Parameters of ``model`` are updated in place.
    """
    if not batches:
        raise ConfigurationError("no batches to train on")
    state = None
    totals, ces, norms = [], [], []
    stats = Counter()
    for i, batch in enumerate(batches):
        graph = Graph()
        masks = sample_masks(model.config, batch.inputs.shape[0], dropout_rng)
        try:
            out = model.forward(batch.inputs, graph, state, masks)
            loss = total_loss(out, batch.targets, config.weights, stats)
        except ValidationError as exc:
            raise TrainingDivergedError(f"non-finite values at batch {i}: {exc}",
                                        _dump(model, opt, i)) from exc
        if not math.isfinite(loss.total):
            raise TrainingDivergedError(
                f"non-finite loss at batch {i}",
                _dump(model, opt, i, ce=loss.ce, ar=loss.ar, tar=loss.tar, wd=loss.wd))
        grads = graph.backward(loss.tensor)
        grads, norm = clip_by_global_norm(grads, config.clip)
        for name, g in grads.items():
            model.params[name] -= opt.lr * g
        opt.steps += 1
        state = out.state
        totals.append(loss.total)
        ces.append(loss.ce)
        norms.append(norm)
    return EpochMetrics(float(np.mean(totals)), float(np.mean(ces)), len(batches),
                        stats["log_floor"], float(max(norms)), totals)


def evaluate_perplexity(model, batches, state=None) -> float:
    """exp of the mean negative log-likelihood over every target in ``batches``.

    No dropout, no loss scaling; the hidden state runs on from batch to batch.
    ``model`` needs only ``forward_probs(inputs, state) -> (probs, state)``.
    """
    nll, count = 0.0, 0
    for batch in batches:
        probs, state = model.forward_probs(batch.inputs, state)
        p = np.take_along_axis(probs, batch.targets[..., None], axis=-1)[..., 0]
        nll += float(-np.log(np.maximum(p, LOG_FLOOR)).sum())
        count += p.size
    return math.exp(nll / count)


@dataclass
class EpochRecord:
    epoch: int
    train_ce: float
    train_total: float
    valid_ppl: float
    seconds: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.train_ce:.6f}\t{self.train_total:.6f}\t"
                f"{self.valid_ppl:.6f}\t{self.seconds:.3f}\n")


def fit(model: CTMoSModel, train_ids, valid_ids, config: TrainConfig, vocab_digest: int = 0,
        out_dir=None, on_epoch=None) -> list[EpochRecord]:
    """Train for ``config.epochs`` epochs, evaluating every ``eval_every`` epochs.

    The learning rate is multiplied by ``lr_decay`` once validation perplexity
    has failed to improve ``patience`` evaluations in a row.  With ``out_dir``
    set, writes ``metrics.tsv``, ``epoch_<k>.ckpt`` and ``best.ckpt``.
    """
    train_batches = make_batches(train_ids, config.batch_size, config.bptt)
    valid_batches = make_batches(valid_ids, config.eval_batch_size, config.bptt) \
        if valid_ids is not None else None
    opt = OptimizerState(config.lr)
    rng = stream(config.seed, "dropout")
    history = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.tsv").write_text("")
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        metrics = train_epoch(model, train_batches, config, opt, rng)
        ppl = float("nan")
        if valid_batches is not None and epoch % config.eval_every == 0:
            ppl = evaluate_perplexity(model, valid_batches)
            if ppl < opt.best_valid_ppl:
                opt.best_valid_ppl, opt.bad_evals = ppl, 0
                if out is not None:
                    save_checkpoint(Checkpoint.from_model(model, vocab_digest, opt.as_dict(),
                                                          epoch, ppl), out / "best.ckpt")
            else:
                opt.bad_evals += 1
                if opt.bad_evals >= config.patience:
                    opt.lr *= config.lr_decay
                    opt.bad_evals = 0
        record = EpochRecord(epoch, metrics.mean_ce, metrics.mean_total, ppl,
                             time.perf_counter() - t0)
        history.append(record)
        log.info("epoch %d ce %.4f total %.4f valid ppl %.3f lr %g", epoch,
                 record.train_ce, record.train_total, ppl, opt.lr)
        if out is not None:
            with open(out / "metrics.tsv", "a") as fh:
                fh.write(record.line())
            save_checkpoint(Checkpoint.from_model(model, vocab_digest, opt.as_dict(), epoch,
                                                  opt.best_valid_ppl), out / f"epoch_{epoch}.ckpt")
        if on_epoch is not None:
            on_epoch(record, model)
    return history

