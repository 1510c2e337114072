"""Training objective: scaled cross-entropy plus AR, TAR and weight decay.

    total = ls * ce + gamma_ar * AR + gamma_tar * TAR + gamma_wd * WD

``ls`` is the mean temperature (over vocabulary and positions).  AR is the
mean square of the dropout-masked last-layer outputs, TAR the mean square of
their raw step-to-step differences, and WD is half the squared norm of every
parameter, so its gradient is ``gamma_wd * theta``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ShapeError

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    ar: float = 2.0
    tar: float = 1.0
    wd: float = 1.2e-6
    ls_enabled: bool = True
    ls_detached: bool = True

    def __post_init__(self):
        if min(self.ar, self.tar, self.wd) < 0:
            raise ConfigurationError("regularization coefficients must be non-negative")


@dataclass
class LossBreakdown:
    total: float
    ce: float
    ls_factor: float
    ar: float
    tar: float
    wd: float
    floored: int = 0
    tensor: Tensor | None = None


def cross_entropy(probs, targets, stats: Counter | None = None) -> Tensor:
    """Mean of -log P[target] over positions; log floored at 1e-12.

    ``probs`` is (N, |V|) and ``targets`` holds N indices.  Floor hits are
    counted into ``stats["log_floor"]`` when a counter is supplied.
    """
    probs = ad.as_tensor(probs)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if probs.ndim != 2 or probs.shape[0] != targets.size:
        raise ShapeError(f"probs {probs.shape} vs {targets.size} targets")
    picked = ad.pick(probs, targets)
    if stats is not None:
        stats["log_floor"] += int(np.sum(picked.value <= LOG_FLOOR))
    return -ad.mean(ad.log_floor(picked, LOG_FLOOR))


def activation_penalty(hidden) -> Tensor:
    return ad.mean(ad.square(hidden))


def temporal_penalty(hidden) -> Tensor:
    """Mean square of h[:, t+1] - h[:, t] for (batch, time, h) outputs."""
    hidden = ad.as_tensor(hidden)
    if hidden.shape[1] < 2:
        return ad.as_tensor(0.0)
    return ad.mean(ad.square(hidden[:, 1:, :] - hidden[:, :-1, :]))


def weight_penalty(params: dict) -> Tensor:
    total = ad.as_tensor(0.0)
    for p in params.values():
        total = total + 0.5 * ad.sum(ad.square(p))
    return total


def total_loss(outputs, targets, weights: LossWeights, stats: Counter | None = None) -> LossBreakdown:
    """Assemble the objective from a :class:`~ctmos.model.ModelOutput`."""
    ce = cross_entropy(outputs.probs, targets, stats)
    ls = outputs.tau_mean() if weights.ls_enabled else 1.0
    if isinstance(ls, Tensor) and weights.ls_detached:
        ls = ad.detach(ls)
    ar = activation_penalty(outputs.hidden)
    tar = temporal_penalty(outputs.raw_hidden)
    wd = weight_penalty(outputs.params)
    total = ls * ce + weights.ar * ar + weights.tar * tar + weights.wd * wd
    ls_value = ls.item() if isinstance(ls, Tensor) else float(ls)
    return LossBreakdown(total.item(), ce.item(), ls_value, ar.item(), tar.item(), wd.item(),
                         stats["log_floor"] if stats is not None else 0, total)
