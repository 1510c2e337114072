"""LSTM language model with a mixture-of-softmaxes head and contextual temperature.

At every position the last recurrent layer's output ``h`` feeds three heads:

* the mixture head: ``z_m = (h W_latent) W_m`` for m = 1..M and prior
  ``pi = softmax(h W_p)``;
* the temperature head: ``tau = (softmax(h W_tau1 W_tau2) + alpha) / beta``
  (or one of the tanh-based ablation normalizers);
* the output distribution ``P = sum_m pi_m softmax(z_m / tau)``.

A model whose temperature head is ``"constant"`` divides all logits by one
fixed scalar; ``"none"`` is the plain MoS model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .errors import ConfigurationError, ContractError, ShapeError
from .rng import stream

VARIANTS = ("softmax", "pow-tanh", "tanh-shift")
HEADS = ("contextual", "constant", "none")
DEFAULT_LAMBDA = {"pow-tanh": 4.0, "tanh-shift": 3.0}


@dataclass(frozen=True)
class MoSConfig:
    vocab_size: int
    emb_size: int = 64
    layer_sizes: tuple = (128, 128)
    mixtures: int = 3
    latent_size: int | None = None
    dropout_input: float = 0.2
    dropout_hidden: float = 0.2
    dropout_output: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if self.latent_size is None:
            object.__setattr__(self, "latent_size", self.emb_size)
        sizes = (self.vocab_size, self.emb_size, self.mixtures, self.latent_size, *self.layer_sizes)
        if not self.layer_sizes or min(sizes) < 1:
            raise ConfigurationError(f"sizes must be positive: {self}")
        for rate in (self.dropout_input, self.dropout_hidden, self.dropout_output):
            if not 0.0 <= rate < 1.0:
                raise ConfigurationError(f"dropout rate {rate} outside [0, 1)")

    @property
    def hidden_size(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class TemperatureConfig:
    head: str = "contextual"
    variant: str = "softmax"
    alpha: float = 1.0
    beta: float = 0.5
    lam: float | None = None
    rank: int | None = None
    constant: float = 1.0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigurationError(f"unknown temperature head {self.head!r}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown temperature variant {self.variant!r}")
        if self.lam is None and self.variant != "softmax":
            object.__setattr__(self, "lam", DEFAULT_LAMBDA[self.variant])
        if self.variant == "softmax" and self.beta <= 0:
            raise ConfigurationError(f"beta must be positive, got {self.beta}")
        if self.variant != "softmax" and not self.lam > 1.0:
            raise ConfigurationError(f"lambda must exceed 1 for {self.variant}, got {self.lam}")
        if self.head == "constant" and not self.constant > 0:
            raise ConfigurationError(f"constant temperature must be positive, got {self.constant}")
        if self.rank is not None and self.rank < 1:
            raise ConfigurationError("factorization rank must be >= 1")

    def bounds(self) -> tuple[float, float]:
        if self.variant == "softmax":
            return self.alpha / self.beta, (1.0 + self.alpha) / self.beta
        if self.variant == "pow-tanh":
            return 1.0 / self.lam, self.lam
        return self.lam - 1.0, self.lam + 1.0


def normalize_temperature(mu, cfg: TemperatureConfig) -> Tensor:
    """Map temperature logits ``mu`` (..., |V|) into the variant's range.

    softmax:    (softmax(mu) + alpha) / beta, in [alpha/beta, (1+alpha)/beta]
    pow-tanh:   lam ** tanh(mu),             in (1/lam, lam)
    tanh-shift: tanh(mu) + lam,              in (lam-1, lam+1)

    Saturated inputs would land exactly on a bound in float64, so results are
    clamped one ulp inside it.
    """
    if cfg.variant == "softmax":
        tau = (ad.softmax(mu, axis=-1) + cfg.alpha) / cfg.beta
    elif cfg.variant == "pow-tanh":
        tau = ad.exp(ad.tanh(mu) * np.log(cfg.lam))
    else:
        tau = ad.tanh(mu) + cfg.lam
    lo, hi = cfg.bounds()
    return ad.clip(tau, np.nextafter(lo, np.inf), np.nextafter(hi, -np.inf))


def param_shapes(config: MoSConfig, temperature: TemperatureConfig) -> dict:
    V, d, h = config.vocab_size, config.emb_size, config.hidden_size
    shapes = {"embedding": (V, d)}
    fan_in = d
    for l, H in enumerate(config.layer_sizes):
        shapes[f"lstm.{l}.w_ih"] = (fan_in, 4 * H)
        shapes[f"lstm.{l}.w_hh"] = (H, 4 * H)
        shapes[f"lstm.{l}.bias"] = (4 * H,)
        fan_in = H
    shapes["latent"] = (h, config.latent_size)
    shapes["mixture"] = (config.mixtures, config.latent_size, V)
    shapes["prior"] = (h, config.mixtures)
    if temperature.head == "contextual":
        r = temperature.rank or d
        shapes["tau.1"] = (h, r)
        shapes["tau.2"] = (r, V)
    return shapes


def init_params(config: MoSConfig, temperature: TemperatureConfig, seed: int) -> dict:
    """Uniform initialization, one named random stream per tensor."""
    params = {}
    for name, shape in param_shapes(config, temperature).items():
        rng = stream(seed, f"init/{name}")
        if name.startswith("lstm."):
            bound = 1.0 / np.sqrt(shape[-1] // 4)
        elif name == "latent":
            bound = 1.0 / np.sqrt(shape[0])
        else:
            bound = 0.1
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def check_params(params: dict, config: MoSConfig, temperature: TemperatureConfig) -> None:
    expected = param_shapes(config, temperature)
    if set(params) != set(expected):
        raise ShapeError(f"parameter names {sorted(params)} != {sorted(expected)}")
    for name, shape in expected.items():
        if tuple(np.shape(params[name])) != shape:
            raise ShapeError(f"{name}: shape {np.shape(params[name])}, expected {shape}")


def sample_masks(config: MoSConfig, batch_size: int, rng: np.random.Generator) -> dict:
    """Variational dropout masks (one per sequence, shared across time), pre-scaled."""

    def draw(rate, width):
        if rate == 0.0:
            return None
        keep = rng.random((batch_size, 1, width)) >= rate
        return keep / (1.0 - rate)

    return {
        "input": draw(config.dropout_input, config.emb_size),
        "hidden": [draw(config.dropout_hidden, H) for H in config.layer_sizes[:-1]],
        "output": draw(config.dropout_output, config.hidden_size),
    }


def zero_state(config: MoSConfig, batch_size: int) -> list:
    return [(np.zeros((batch_size, H)), np.zeros((batch_size, H))) for H in config.layer_sizes]


def _lstm_layer(steps: list, w_ih, w_hh, bias, state) -> tuple[list, tuple]:
    H = w_hh.shape[0]
    h, c = Tensor(state[0]), Tensor(state[1])
    outputs = []
    for x in steps:
        gates = ad.matmul(x, w_ih) + ad.matmul(h, w_hh) + bias
        act = ad.sigmoid(gates)
        i, f, o = act[:, :H], act[:, H:2 * H], act[:, 3 * H:]
        g = ad.tanh(gates[:, 2 * H:3 * H])
        c = f * c + i * g
        h = o * ad.tanh(c)
        outputs.append(h)
    return outputs, (h.value.copy(), c.value.copy())


def forward_backbone(inputs: np.ndarray, params: dict, config: MoSConfig,
                     state=None, masks=None) -> tuple[Tensor, Tensor, list]:
    """Embed and run the stacked LSTM.

    Returns (raw last-layer outputs, dropout-masked outputs, new state), the
    outputs shaped (batch, time, h).  ``state`` holds plain arrays and is never
    differentiated through.
    """
    inputs = np.asarray(inputs)
    if inputs.ndim != 2:
        raise ShapeError(f"inputs must be (batch, time), got {inputs.shape}")
    B, T = inputs.shape
    if state is None:
        state = zero_state(config, B)
    if len(state) != len(config.layer_sizes) or any(
            s[0].shape != (B, H) for s, H in zip(state, config.layer_sizes)):
        raise ShapeError("hidden state does not match layer sizes")
    masks = masks or {}
    steps = [ad.embedding(params["embedding"], inputs[:, t]) for t in range(T)]
    if masks.get("input") is not None:
        m = masks["input"][:, 0, :]
        steps = [x * m for x in steps]
    new_state = []
    hidden_masks = masks.get("hidden") or [None] * (len(config.layer_sizes) - 1)
    for l in range(len(config.layer_sizes)):
        steps, s = _lstm_layer(steps, params[f"lstm.{l}.w_ih"], params[f"lstm.{l}.w_hh"],
                               params[f"lstm.{l}.bias"], state[l])
        new_state.append(s)
        if l < len(config.layer_sizes) - 1 and hidden_masks[l] is not None:
            m = hidden_masks[l][:, 0, :]
            steps = [x * m for x in steps]
    raw = ad.stack(steps, axis=1)
    dropped = raw * masks["output"] if masks.get("output") is not None else raw
    return raw, dropped, new_state


def mos_head(hidden: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    """Component logits (M, N, |V|) and mixture weights (N, M) for hidden (N, h)."""
    if hidden.shape[-1] != params["prior"].shape[0]:
        raise ShapeError(f"hidden size {hidden.shape[-1]} vs W_p {params['prior'].shape}")
    latent = ad.matmul(hidden, params["latent"])
    N, dl = latent.shape
    logits = ad.matmul(ad.reshape(latent, (1, N, dl)), params["mixture"])
    prior = ad.softmax(ad.matmul(hidden, params["prior"]), axis=-1)
    return logits, prior


def contextual_temperature(hidden: Tensor, params: dict, cfg: TemperatureConfig) -> Tensor:
    """Per-position temperature vector (N, |V|) from the shared backbone output."""
    mu = ad.matmul(ad.matmul(hidden, params["tau.1"]), params["tau.2"])
    return normalize_temperature(mu, cfg)


def ct_mos_distribution(logits, prior, tau=None) -> Tensor:
    """sum_m prior[:, m] * softmax(logits[m] / tau) over the vocabulary axis.

    ``logits`` is (M, N, |V|) or a sequence of M (N, |V|) tensors; ``tau`` is
    an (N, |V|) tensor, a positive scalar, or None for no temperature.
    """
    if isinstance(logits, (list, tuple)):
        logits = ad.stack(logits, axis=0)
    logits, prior = ad.as_tensor(logits), ad.as_tensor(prior)
    M, N, V = logits.shape
    if prior.shape != (N, M):
        raise ShapeError(f"prior shape {prior.shape}, expected {(N, M)}")
    if tau is not None:
        tv = tau.value if isinstance(tau, Tensor) else np.asarray(tau, dtype=np.float64)
        if tv.ndim and tv.shape != (N, V):
            raise ShapeError(f"tau shape {tv.shape}, expected {(N, V)}")
        if np.any(tv <= 0):
            raise ContractError("temperature must be strictly positive")
        logits = logits / tau
    comps = ad.softmax(logits, axis=-1)
    weights = ad.reshape(ad.swapaxes(prior, 0, 1), (M, N, 1))
    return ad.sum(weights * comps, axis=0)


@dataclass
class ModelOutput:
    probs: Tensor              # (N, |V|), rows in (batch, time) order
    tau: object                # (N, |V|) tensor, float, or None
    prior: Tensor
    raw_hidden: Tensor         # (B, T, h)
    hidden: Tensor             # masked (B, T, h)
    state: list
    params: dict = field(repr=False)

    def tau_mean(self):
        """Mean temperature over vocabulary and positions (1.0 without a head)."""
        if self.tau is None:
            return 1.0
        if isinstance(self.tau, Tensor):
            return ad.mean(self.tau)
        return float(self.tau)


class CTMoSModel:
    """Parameters plus configuration; ``forward`` builds (or skips) a graph."""

    def __init__(self, config: MoSConfig, temperature: TemperatureConfig, params: dict):
        check_params(params, config, temperature)
        self.config = config
        self.temperature = temperature
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    @classmethod
    def create(cls, config: MoSConfig, temperature: TemperatureConfig, seed: int):
        return cls(config, temperature, init_params(config, temperature, seed))

    def describe(self) -> dict:
        return {"model": asdict(self.config), "temperature": asdict(self.temperature)}

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def bind(self, graph: Graph | None) -> dict:
        if graph is None:
            return {k: Tensor(v, name=k) for k, v in self.params.items()}
        return {k: graph.param(v, name=k) for k, v in self.params.items()}

    def forward(self, inputs, graph: Graph | None = None, state=None, masks=None) -> ModelOutput:
        params = self.bind(graph)
        raw, dropped, new_state = forward_backbone(inputs, params, self.config, state, masks)
        B, T, h = dropped.shape
        flat = ad.reshape(dropped, (B * T, h))
        logits, prior = mos_head(flat, params)
        cfg = self.temperature
        if cfg.head == "contextual":
            tau = contextual_temperature(flat, params, cfg)
        elif cfg.head == "constant":
            tau = float(cfg.constant)
        else:
            tau = None
        probs = ct_mos_distribution(logits, prior, tau)
        return ModelOutput(probs, tau, prior, raw, dropped, new_state, params)

    def predict(self, ids: Sequence[int], state=None) -> tuple[np.ndarray, np.ndarray | None, list]:
        """Run one sequence without dropout; returns (P (T,V), tau (T,V) or None, state)."""
        out = self.forward(np.asarray(ids, dtype=np.int64)[None, :], None, state)
        tau = out.tau
        if isinstance(tau, Tensor):
            tau = tau.value
        elif tau is not None:
            tau = np.full(out.probs.shape, tau)
        return out.probs.value, tau, out.state

    def forward_probs(self, inputs, state=None) -> tuple[np.ndarray, list]:
        out = self.forward(inputs, None, state)
        B, T = np.shape(inputs)
        return out.probs.value.reshape(B, T, -1), out.state

    def temperature_means(self, ids: Sequence[int], chunk: int = 256) -> np.ndarray:
        """Mean of the temperature vector at each prediction step over ``ids``."""
        ids = np.asarray(ids, dtype=np.int64)
        means, state = [], None
        for s in range(0, len(ids), chunk):
            _, tau, state = self.predict(ids[s:s + chunk], state)
            means.append(np.ones(len(ids[s:s + chunk])) if tau is None else tau.mean(axis=1))
        return np.concatenate(means) if means else np.zeros(0)
