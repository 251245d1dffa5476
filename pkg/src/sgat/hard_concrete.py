"""Hard-concrete binary gates: sampling, expected-L0 penalty and test-time mask."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DomainError

U_EPS = 1e-8


@dataclass(frozen=True)
class HardConcreteParams:
    beta: float = 2.0 / 3.0
    gamma: float = -0.1
    zeta: float = 1.1

    def __post_init__(self):
        if not (self.gamma < 0 < 1 < self.zeta) or self.beta <= 0:
            raise ConfigError(
                f"need gamma < 0 < 1 < zeta and beta > 0, got "
                f"beta={self.beta}, gamma={self.gamma}, zeta={self.zeta}")

    @property
    def penalty_shift(self) -> float:
        """``beta * log(-gamma / zeta)``: the logit offset inside the L0 penalty."""
        return self.beta * math.log(-self.gamma / self.zeta)


DEFAULT_PARAMS = HardConcreteParams()


def draw_uniform(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform noise for ``n`` gates, kept away from the logit singularities."""
    return np.clip(rng.random((n, 1)), U_EPS, 1.0 - U_EPS)


def sample_gate(log_alpha: Tensor, u, params: HardConcreteParams = DEFAULT_PARAMS) -> Tensor:
    """Reparameterised gate sample ``min(1, max(0, stretched sigmoid))``."""
    u = np.asarray(u, dtype=np.float64).reshape(log_alpha.shape)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise DomainError("hard-concrete noise u must lie strictly inside (0, 1)")
    logistic = np.log(u) - np.log1p(-u)
    s = ag.sigmoid((log_alpha + Tensor(logistic)) * (1.0 / params.beta))
    s = s * (params.zeta - params.gamma) + params.gamma
    return ag.clip(s, 0.0, 1.0)


def l0_penalty(log_alpha: Tensor, params: HardConcreteParams = DEFAULT_PARAMS) -> Tensor:
    """Sum over gates of P(gate != 0); the caller applies lambda."""
    return ag.sum(ag.sigmoid(log_alpha - params.penalty_shift))


def prob_nonzero(log_alpha, params: HardConcreteParams = DEFAULT_PARAMS) -> np.ndarray:
    x = np.asarray(log_alpha, dtype=np.float64) - params.penalty_shift
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def deterministic_mask(log_alpha, params: HardConcreteParams = DEFAULT_PARAMS) -> np.ndarray:
    """Test-time gate values; edges mapped to exactly 0 are removable."""
    la = log_alpha.values if isinstance(log_alpha, Tensor) else np.asarray(log_alpha, dtype=np.float64)
    sig = 0.5 * (1.0 + np.tanh(0.5 * la / params.beta))
    return np.clip(sig * (params.zeta - params.gamma) + params.gamma, 0.0, 1.0)


def init_log_alpha(n: int, rng: np.random.Generator, mean: float = 2.0, std: float = 0.01) -> np.ndarray:
    return rng.normal(mean, std, size=(n, 1))
