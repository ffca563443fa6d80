"""LAMB optimizer and a linear warmup / linear decay learning-rate schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or Inf; the step was not applied."""


@dataclass
class LambConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    clip_lo: float = 0.0
    clip_hi: float = 10.0
    # when set, layer-norm and bias tensors get no decay and trust ratio 1
    exclude_norm_and_bias: bool = False


def _is_norm_or_bias(path: str) -> bool:
    leaf = path.rsplit(".", 1)[-1]
    return "bias" in leaf or "gamma" in leaf or "beta" in leaf


@dataclass
class OptimizerState:
    config: LambConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def create(cls, params: Mapping[str, np.ndarray], config: LambConfig | None = None) -> "OptimizerState":
        return cls(
            config or LambConfig(),
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"optim.m.{k}"] = self.m[k]
            out[f"optim.v.{k}"] = self.v[k]
        out["optim.step"] = np.array([float(self.step)])
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], config: LambConfig | None = None) -> "OptimizerState":
        state = cls(config or LambConfig())
        for k, a in arrays.items():
            if k.startswith("optim.m."):
                state.m[k[len("optim.m."):]] = np.array(a)
            elif k.startswith("optim.v."):
                state.v[k[len("optim.v."):]] = np.array(a)
        state.step = int(arrays["optim.step"][0]) if "optim.step" in arrays else 0
        return state


def lamb_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> dict[str, float]:
    """Apply one LAMB update in place and return the per-tensor trust ratios.

    Per tensor: Adam moments with bias correction, ``u = m_hat / (sqrt(v_hat) + eps)
    + wd * w``, trust ratio ``||w|| / ||u||`` clipped to [clip_lo, clip_hi]
    (1 when either norm is zero), then ``w -= lr * ratio * u``.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {k}; step {state.step + 1} aborted")
    hp = state.config
    t = state.step + 1
    c1 = 1.0 - hp.beta1 ** t
    c2 = 1.0 - hp.beta2 ** t
    ratios = {}
    for k, w in params.items():
        g = grads[k]
        m = state.m.setdefault(k, np.zeros_like(w))
        v = state.v.setdefault(k, np.zeros_like(w))
        m *= hp.beta1
        m += (1.0 - hp.beta1) * g
        v *= hp.beta2
        v += (1.0 - hp.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + hp.eps)
        plain = hp.exclude_norm_and_bias and _is_norm_or_bias(k)
        if hp.weight_decay and not plain:
            update = update + hp.weight_decay * w
        if plain:
            ratio = 1.0
        else:
            w_norm = float(np.linalg.norm(w))
            u_norm = float(np.linalg.norm(update))
            if w_norm == 0.0 or u_norm == 0.0:
                ratio = 1.0
            else:
                ratio = min(max(w_norm / u_norm, hp.clip_lo), hp.clip_hi)
        w -= (lr * ratio) * update
        ratios[k] = ratio
    state.step = t
    return ratios


@dataclass
class Schedule:
    peak_lr: float = 0.00176
    warmup_steps: int = 100
    total_steps: int = 2000

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")
        if not 0 < self.warmup_steps <= self.total_steps:
            raise ValueError(
                f"need 0 < warmup_steps <= total_steps, got {self.warmup_steps} and {self.total_steps}"
            )


def lr_at_step(s: Schedule, step: int) -> float:
    if step < 0:
        raise ValueError(f"step must be nonnegative, got {step}")
    if step > s.total_steps:
        log.warning("step %d beyond total_steps %d; learning rate clamped to 0", step, s.total_steps)
        return 0.0
    if step <= s.warmup_steps:
        return s.peak_lr * (step / s.warmup_steps)
    if s.total_steps == s.warmup_steps:
        return 0.0
    return s.peak_lr * ((s.total_steps - step) / (s.total_steps - s.warmup_steps))
