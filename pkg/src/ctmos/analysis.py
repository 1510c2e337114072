"""Temperature analyses and ablation runs.

All tabular results render as tab-separated text through ``to_tsv``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .corpus import iter_sentences, make_batches
from .errors import CheckpointDigestError, ConfigurationError
from .model import CTMoSModel, MoSConfig, TemperatureConfig, normalize_temperature
from .trainer import TrainConfig, evaluate_perplexity, fit

SLOTS = 15
Z95 = 1.959963984540054


def normalize_temperature_variant(mu, variant: str, lam: float | None = None,
                                  alpha: float = 1.0, beta: float = 0.5):
    """Temperature from logits ``mu`` under one of the three normalizers.

    ``variant`` is ``"pow-tanh"`` (lam ** tanh(mu)), ``"tanh-shift"``
    (tanh(mu) + lam) or ``"softmax"`` ((softmax(mu) + alpha) / beta).  Returns
    a numpy array for array input and a Tensor for Tensor input.
    """
    cfg = TemperatureConfig(variant=variant, lam=lam, alpha=alpha, beta=beta)
    out = normalize_temperature(mu, cfg)
    return out if isinstance(mu, ad.Tensor) else out.value


def _tsv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines) + "\n"


# -- trajectories ------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryRecord:
    token: int
    epoch: int
    temperature: float


def temperature_trajectories(checkpoints: Sequence[Checkpoint], probe_ids, tokens,
                             expected_digest: int | None = None) -> list[TrajectoryRecord]:
    """Each token's temperature, averaged over all probe positions, per checkpoint."""
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise ConfigurationError("token set is empty")
    if not checkpoints:
        return []
    digest = checkpoints[0].vocab_digest if expected_digest is None else expected_digest
    records = []
    for ckpt in checkpoints:
        if ckpt.vocab_digest != digest:
            raise CheckpointDigestError(
                f"checkpoint of epoch {ckpt.epoch} has vocabulary digest "
                f"{ckpt.vocab_digest:016x}, expected {digest:016x}")
        _, tau, _ = ckpt.to_model().predict(probe_ids)
        if tau is None:
            raise ConfigurationError("checkpoint has no temperature head")
        means = tau.mean(axis=0)
        records.extend(TrajectoryRecord(t, ckpt.epoch, float(means[t])) for t in tokens)
    return records


def trajectories_tsv(records, vocab=None) -> str:
    return _tsv(["token", "epoch", "temperature"],
                ((vocab.itos[r.token] if vocab else r.token, r.epoch, r.temperature)
                 for r in records))


# -- position statistics -----------------------------------------------------

@dataclass(frozen=True)
class PositionStats:
    slot: int
    mean: float
    half_width: float
    count: int


def slot_sources(length: int) -> list[int]:
    """Sentence positions that fill the 15 normalized slots: first, middle, last five."""
    mid = (length - 5) // 2
    return [*range(5), *range(mid, mid + 5), *range(length - 5, length)]


def position_statistics(model, ids, eos: int, min_len: int = 15,
                        max_len: int = 25) -> list[PositionStats]:
    """Mean temperature per normalized sentence slot with 95% normal intervals.

    Sentences are the word spans between <eos> tokens with
    ``min_len < length < max_len``.  ``model.temperature_means(inputs)`` must
    return the mean of the temperature vector at every prediction step; the
    stream is fed with a leading <eos> so that step k predicts ``ids[k]``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if min_len < 9:
        raise ConfigurationError("min_len must be >= 9 so the three segments are disjoint")
    spans = [(s, e) for s, e in iter_sentences(ids, eos) if min_len < e - s < max_len]
    if not spans:
        warnings.warn("no sentences satisfy the length filter", stacklevel=2)
        return []
    inputs = np.concatenate([[eos], ids[:-1]])
    means = np.asarray(model.temperature_means(inputs), dtype=np.float64)
    per_slot = [[] for _ in range(SLOTS)]
    for s, e in spans:
        for slot, pos in enumerate(slot_sources(e - s)):
            per_slot[slot].append(float(means[s + pos]))
    out = []
    for slot, vals in enumerate(per_slot):
        n = len(vals)
        mu = math.fsum(vals) / n
        if n > 1:
            var = math.fsum((v - mu) ** 2 for v in vals) / (n - 1)
            hw = Z95 * math.sqrt(var / n)
        else:
            hw = 0.0
        out.append(PositionStats(slot, mu, hw, n))
    return out


def positions_tsv(stats) -> str:
    return _tsv(["slot", "mean_temperature", "half_width_95", "count"],
                ((s.slot, s.mean, s.half_width, s.count) for s in stats))


# -- case study ----------------------------------------------------------------

@dataclass
class CaseRecord:
    position: int
    context_token: int
    target: int | None
    top_a: list          # [(token, prob)], probabilities non-increasing
    top_b: list
    tau_a: dict          # token -> model A temperature (empty without a head)


def _topk(p: np.ndarray, k: int) -> list:
    order = np.argsort(-p, kind="stable")[:k]
    return [(int(i), float(p[i])) for i in order]


def case_study_topk(model_a, model_b, ids, k: int = 4) -> list[CaseRecord]:
    """Per-position top-k predictions of two models plus model A's temperatures."""
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    ids = np.asarray(ids, dtype=np.int64)
    pa, tau_a, _ = model_a.predict(ids)
    pb, _, _ = model_b.predict(ids)
    records = []
    for t in range(len(ids)):
        ta, tb = _topk(pa[t], k), _topk(pb[t], k)
        shown = sorted({i for i, _ in ta} | {i for i, _ in tb})
        taus = {} if tau_a is None else {i: float(tau_a[t, i]) for i in shown}
        target = int(ids[t + 1]) if t + 1 < len(ids) else None
        records.append(CaseRecord(t, int(ids[t]), target, ta, tb, taus))
    return records


def case_study_tsv(records, vocab) -> str:
    def fmt(top):
        return " ".join(f"{vocab.itos[i]}:{p:.4f}" for i, p in top)

    def fmt_tau(taus):
        return " ".join(f"{vocab.itos[i]}:{t:.8f}" for i, t in taus.items())

    return _tsv(["position", "context", "target", "top_a", "top_b", "tau_a"],
                ((r.position, vocab.itos[r.context_token],
                  vocab.itos[r.target] if r.target is not None else "",
                  fmt(r.top_a), fmt(r.top_b), fmt_tau(r.tau_a)) for r in records))


# -- ablations -----------------------------------------------------------------

@dataclass
class Recipe:
    """Everything shared by the runs of one ablation table."""

    model: MoSConfig
    temperature: TemperatureConfig
    train: TrainConfig
    train_ids: np.ndarray
    valid_ids: np.ndarray
    test_ids: np.ndarray | None = None
    vocab_digest: int = 0


@dataclass
class AblationRow:
    label: str
    valid_ppl: float
    test_ppl: float
    losses: list = field(default_factory=list, repr=False)


@dataclass
class AblationTable:
    rows: list

    def to_tsv(self) -> str:
        return _tsv(["model", "valid_ppl", "test_ppl"],
                    ((r.label, r.valid_ppl, r.test_ppl) for r in self.rows))


def run_recipe(recipe: Recipe, temperature: TemperatureConfig, label: str,
               out_dir=None) -> AblationRow:
    """Train one model under ``recipe`` with the given temperature head."""
    model = CTMoSModel.create(recipe.model, temperature, recipe.train.seed)
    losses = []
    fit(model, recipe.train_ids, recipe.valid_ids, recipe.train, recipe.vocab_digest, out_dir,
        on_epoch=lambda rec, m: losses.append((rec.train_total, rec.train_ce)))
    bs, bptt = recipe.train.eval_batch_size, recipe.train.bptt
    valid = evaluate_perplexity(model, make_batches(recipe.valid_ids, bs, bptt))
    test = evaluate_perplexity(model, make_batches(recipe.test_ids, bs, bptt)) \
        if recipe.test_ids is not None else float("nan")
    return AblationRow(label, valid, test, losses)


def run_constant_tau_ablation(taus: Sequence[float], recipe: Recipe, out_dir=None) -> AblationTable:
    """One constant-temperature MoS run per value, then the contextual model."""
    if any(not t > 0 for t in taus):
        raise ConfigurationError("constant temperatures must be positive")
    rows = []
    for t in taus:
        cfg = TemperatureConfig(head="constant", constant=float(t))
        sub = None if out_dir is None else f"{out_dir}/mos_tau_{t:g}"
        rows.append(run_recipe(recipe, cfg, f"MoS(tau={t:g})", sub))
    ct = replace(recipe.temperature, head="contextual")
    rows.append(run_recipe(recipe, ct, "CT-MoS", None if out_dir is None else f"{out_dir}/ct_mos"))
    return AblationTable(rows)


def run_normalization_ablation(settings: Sequence[dict], recipe: Recipe,
                               out_dir=None) -> AblationTable:
    """One contextual-temperature run per normalizer setting.

    Each setting is a dict of TemperatureConfig overrides, e.g.
    ``{"variant": "pow-tanh", "lam": 4.0}``.
    """
    rows = []
    for s in settings:
        cfg = replace(recipe.temperature, head="contextual", **s)
        label = cfg.variant + (f"(lambda={cfg.lam:g})" if cfg.variant != "softmax"
                               else f"(alpha={cfg.alpha:g},beta={cfg.beta:g})")
        sub = None if out_dir is None else f"{out_dir}/{cfg.variant}"
        rows.append(run_recipe(recipe, cfg, label, sub))
    return AblationTable(rows)


DEFAULT_NORMALIZATIONS = (
    {"variant": "pow-tanh", "lam": 4.0},
    {"variant": "tanh-shift", "lam": 3.0},
    {"variant": "softmax", "alpha": 1.0, "beta": 0.5},
)
