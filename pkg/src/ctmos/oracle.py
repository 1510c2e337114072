"""Closed-form gradients of the two-class temperature-scaled cross-entropy.

Setting: two classes, ground truth class 0, loss ``L = -ln p_0`` with

    tau = softmax(z_tau),   u = z / tau,   p = softmax(u).

Then

    dL/dz_0 = (p_0 - 1) / tau_0,       dL/dz_1 = p_1 / tau_1,
    dL/dz_tau0 = p_1 z_0 tau_1 / tau_0 + p_1 z_1 tau_0 / tau_1 = -dL/dz_tau1.

These serve as an oracle for the autodiff engine and generate gradient
surfaces over (p_i, tau_i) grids.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.special import logit

from . import autodiff as ad
from .errors import ConfigurationError


def _softmax2(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


@dataclass(frozen=True)
class TwoClassPoint:
    z: tuple
    z_tau: tuple

    @property
    def tau(self) -> np.ndarray:
        return _softmax2(self.z_tau)

    @property
    def u(self) -> np.ndarray:
        return np.asarray(self.z, dtype=np.float64) / self.tau

    @property
    def p(self) -> np.ndarray:
        return _softmax2(self.u)


def two_class_logit_grads(point: TwoClassPoint, tau=None) -> np.ndarray:
    """(dL/dz_0, dL/dz_1).  ``tau`` overrides the point's softmax temperature."""
    tau = point.tau if tau is None else np.asarray(tau, dtype=np.float64)
    p = _softmax2(np.asarray(point.z, dtype=np.float64) / tau)
    # p_0 - 1 is exactly -p_1; the subtraction would lose a tiny p_1 to rounding
    return np.array([-p[1] / tau[0], p[1] / tau[1]])


def two_class_temperature_grads(point: TwoClassPoint) -> np.ndarray:
    """(dL/dz_tau0, dL/dz_tau1); the two entries are exact negations."""
    z0, z1 = point.z
    t0, t1 = point.tau
    p1 = point.p[1]
    g0 = p1 * z0 * t1 / t0 + p1 * z1 * t0 / t1
    return np.array([g0, -g0])


def autodiff_grads(point: TwoClassPoint) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of -ln softmax(z / softmax(z_tau))_0 through the engine."""
    g = ad.Graph()
    z = g.param(point.z, "z")
    zt = g.param(point.z_tau, "z_tau")
    loss = -ad.log_softmax(z / ad.softmax(zt))[0]
    grads = g.backward(loss)
    return grads["z"], grads["z_tau"]


def random_points(n: int, rng: np.random.Generator, scale: float = 3.0) -> list:
    zs = rng.uniform(-scale, scale, size=(n, 2))
    zts = rng.uniform(-scale, scale, size=(n, 2))
    return [TwoClassPoint(tuple(a), tuple(b)) for a, b in zip(zs, zts)]


def oracle_agreement(n: int = 1000, seed: int = 7) -> dict:
    """Max element-wise relative error between autodiff and closed forms."""
    from .rng import stream

    worst_logit = worst_tau = 0.0
    for pt in random_points(n, stream(seed, "oracle")):
        gz, gt = autodiff_grads(pt)
        worst_logit = max(worst_logit, ad.relative_error(gz, two_class_logit_grads(pt)))
        worst_tau = max(worst_tau, ad.relative_error(gt, two_class_temperature_grads(pt)))
    return {"samples": n, "logit": worst_logit, "temperature": worst_tau,
            "max": max(worst_logit, worst_tau)}


# -- gradient surfaces -------------------------------------------------------

SURFACES = ("logit0", "logit1", "tau0-neg", "tau1-neg", "tau0-pos", "tau1-pos")


@dataclass
class GradientMesh:
    which: str
    p: np.ndarray             # grid over p_i
    tau: np.ndarray           # grid over tau_i
    values: np.ndarray        # (len(tau), len(p)), NaN where absent
    baseline: np.ndarray | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["p", "tau", "gradient", "baseline_gradient"])
        for r, t in enumerate(self.tau):
            for c, p in enumerate(self.p):
                v = self.values[r, c]
                b = self.baseline[r, c] if self.baseline is not None else np.nan
                w.writerow([repr(float(p)), repr(float(t)),
                            "" if np.isnan(v) else repr(float(v)),
                            "" if np.isnan(b) else repr(float(b))])
        return buf.getvalue()


def grid(n: int, lo: float = 0.01, hi: float = 0.99) -> np.ndarray:
    if n < 2:
        raise ConfigurationError("grid resolution must be >= 2")
    if not 0.0 < lo < hi < 1.0:
        raise ConfigurationError("grid range must lie inside (0, 1)")
    return np.linspace(lo, hi, n)


def surface_point(which: str, p_i: float, tau_i: float, z0_magnitude: float = 1.0):
    """Solve the free logit for grid point (p_i, tau_i) and return a TwoClassPoint.

    Logit surfaces fix the other class's logit at 0.  Temperature surfaces fix
    ``z_0 = +-z0_magnitude`` (the panel's sign) and solve ``z_1``.  Returns None
    when no finite logit reaches the requested point.
    """
    i = int(which[-1]) if which.startswith("logit") else int(which[3])
    taus = np.empty(2)
    taus[i], taus[1 - i] = tau_i, 1.0 - tau_i
    p = np.empty(2)
    p[i], p[1 - i] = p_i, 1.0 - p_i
    if not (0 < p[0] < 1 and 0 < taus[0] < 1):
        return None
    # softmax temperature is reproduced by z_tau = log(tau)
    z_tau = tuple(np.log(taus))
    if which.startswith("logit"):
        z = np.zeros(2)
        z[i] = taus[i] * (logit(p[i]))
    else:
        sign = -1.0 if which.endswith("neg") else 1.0
        z0 = sign * z0_magnitude
        z1 = taus[1] * (logit(p[1]) + z0 / taus[0])
        z = np.array([z0, z1])
    if not np.all(np.isfinite(z)):
        return None
    return TwoClassPoint(tuple(z), z_tau)


def gradient_mesh(which: str, p_grid, tau_grid, z0_magnitude: float = 1.0) -> GradientMesh:
    """Evaluate dL/dz_i (``logit<i>``) or dL/dz_tau_i (``tau<i>-<sign of z_0>``).

    Logit surfaces also carry the no-temperature baseline p_i - [i == 0].
    """
    if which not in SURFACES:
        raise ConfigurationError(f"unknown surface {which!r}; choose from {SURFACES}")
    p_grid, tau_grid = np.asarray(p_grid, float), np.asarray(tau_grid, float)
    if len(p_grid) < 2 or len(tau_grid) < 2:
        raise ConfigurationError("grid resolution must be >= 2")
    for g in (p_grid, tau_grid):
        if g.min() <= 0 or g.max() >= 1:
            raise ConfigurationError("grid values must lie inside (0, 1)")
    logit_surface = which.startswith("logit")
    i = int(which[-1]) if logit_surface else int(which[3])
    values = np.full((len(tau_grid), len(p_grid)), np.nan)
    baseline = np.full_like(values, np.nan) if logit_surface else None
    for r, t in enumerate(tau_grid):
        for c, p in enumerate(p_grid):
            pt = surface_point(which, p, t, z0_magnitude)
            if pt is None:
                continue
            if logit_surface:
                v = two_class_logit_grads(pt)[i]
                # tau = 1 for both classes: the logits reproduce p directly
                baseline[r, c] = p - (1.0 if i == 0 else 0.0)
            else:
                v = two_class_temperature_grads(pt)[i]
            if np.isfinite(v):
                values[r, c] = v
    return GradientMesh(which, p_grid, tau_grid, values, baseline)
