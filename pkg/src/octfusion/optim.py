"""Adam with bias-corrected first and second moments."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeMismatch


@dataclass(frozen=True)
class AdamHyperparams:
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if self.alpha < 0 or self.epsilon <= 0:
            raise ConfigError(f"need alpha >= 0 and epsilon > 0, got {self.alpha}, {self.epsilon}")


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    n: dict = field(default_factory=dict)
    # bias-corrected moments of the last step, kept for inspection
    m_hat: dict = field(default_factory=dict)
    n_hat: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            n={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
        )


def adam_step(state: AdamState, grads: dict, hp: AdamHyperparams, params: dict):
    """One Adam update, written into ``params`` in place.

    ``params`` values must be writable numpy arrays (0-d arrays work for
    scalars). Returns ``(params, state)``.
    """
    for name, g in grads.items():
        if name not in params:
            raise ShapeMismatch(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ShapeMismatch(f"{name}: gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])}")
        if name not in state.m:
            state.m[name] = np.zeros(np.shape(g))
            state.n[name] = np.zeros(np.shape(g))
        elif state.m[name].shape != np.shape(g):
            raise ShapeMismatch(f"{name}: optimizer state shape {state.m[name].shape} != gradient shape {np.shape(g)}")

    state.t += 1
    t = state.t
    b1, b2 = hp.beta1, hp.beta2
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = state.m[name]
        n = state.n[name]
        m *= b1
        m += (1.0 - b1) * g
        n *= b2
        n += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        n_hat = n / (1.0 - b2**t)
        state.m_hat[name] = m_hat
        state.n_hat[name] = n_hat
        p = params[name]
        p -= (hp.alpha * m_hat / (np.sqrt(n_hat) + hp.epsilon)).astype(p.dtype, copy=False)
    return params, state
