"""f-divergences between the uniform distribution and a predictive distribution.

All values are in nats. ``kl`` is the forward direction KL(U||P), ``rkl`` the
reverse KL(P||U) = ln K - H(P), ``jsd`` the Jensen-Shannon divergence, which is
bounded by ln 2.
"""

import math
from enum import Enum
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

from outlierflow.core.errors import ConfigurationError, DomainError

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = math.log(PROB_FLOOR)
LN2 = math.log(2.0)


class DivergenceKind(str, Enum):
    KL = "kl"
    RKL = "rkl"
    JSD = "jsd"


def _kind(kind: Union[str, DivergenceKind]) -> DivergenceKind:
    try:
        return DivergenceKind(kind)
    except ValueError as e:
        raise ConfigurationError(f"Unknown divergence kind {kind!r}") from e


def _from_log_probs(kind: DivergenceKind, log_p: torch.Tensor, p: torch.Tensor, dim: int) -> torch.Tensor:
    k = log_p.shape[dim]
    log_k = math.log(k)
    if kind is DivergenceKind.KL:
        return -log_k - log_p.clamp_min(LOG_PROB_FLOOR).mean(dim)
    if kind is DivergenceKind.RKL:
        return torch.xlogy(p, p).sum(dim) + log_k
    # M = (U + P) / 2
    log_m = torch.logaddexp(torch.full_like(log_p, -log_k), log_p) - LN2
    kl_um = (-log_k - log_m).mean(dim)
    kl_pm = (torch.xlogy(p, p) - p * log_m).sum(dim)
    return 0.5 * kl_um + 0.5 * kl_pm


def divergence_from_logits(
    kind: Union[str, DivergenceKind], logits: torch.Tensor, dim: int = 1, temperature: float = 1.0
) -> torch.Tensor:
    """Per-location divergence of softmax(logits / T) to uniform along ``dim``.

    Differentiable w.r.t. ``logits``; the class dimension is reduced.
    """
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    log_p = F.log_softmax(logits / temperature, dim=dim)
    return _from_log_probs(_kind(kind), log_p, log_p.exp(), dim)


def divergence_to_uniform(
    kind: Union[str, DivergenceKind], probs: Union[np.ndarray, torch.Tensor], tol: float = 1e-6
) -> Union[float, torch.Tensor]:
    """Divergence of probability vector(s) to uniform over the last axis.

    Returns a float for a single vector, otherwise a tensor of per-vector values.
    """
    p = torch.as_tensor(probs, dtype=torch.float64)
    if p.dim() == 0 or p.shape[-1] < 1:
        raise DomainError("Probability vector must have at least one class")
    if (p < 0).any():
        raise DomainError("Probabilities must be non-negative")
    if ((p.sum(-1) - 1.0).abs() > tol).any():
        raise DomainError("Probabilities must sum to 1")
    log_p = torch.log(p.clamp_min(PROB_FLOOR))
    value = _from_log_probs(_kind(kind), log_p, p, dim=-1)
    return float(value) if value.dim() == 0 else value


def divergence_curve(kind: Union[str, DivergenceKind], resolution: int, eps: float = 1e-6) -> np.ndarray:
    """Two-class table of (p, D(U, (p, 1-p))) for p in [eps, 1-eps]; p = 0.5 is always included."""
    if resolution < 2:
        raise ConfigurationError("resolution must be at least 2")
    grid = np.union1d(np.linspace(eps, 1.0 - eps, resolution), [0.5])
    probs = np.stack([grid, 1.0 - grid], axis=-1)
    values = divergence_to_uniform(kind, probs).numpy()
    return np.stack([grid, values], axis=-1)
