"""Score-threshold algebra for matched detector predictions.

All functions operate on torch tensors whose last dimension indexes classes
and broadcast over any leading batch dimensions. Plain Python numbers and
sequences are accepted and promoted to float64 tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch

from .errors import ConfigError, InvalidInputError

DEFAULT_ZETA = 1e-8
# below this non-target mass the concentration penalty is defined as zero
_MASS_FLOOR = 1e-12


@dataclass(frozen=True)
class SurrogateConfig:
    tau: float = 0.25
    beta: float = 1.0
    zeta: float = DEFAULT_ZETA

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie strictly inside (0, 1), got {self.tau}")
        if not self.beta > 0.0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if not self.zeta >= 0.0:
            raise ConfigError(f"zeta must be non-negative, got {self.zeta}")


class ScoreSummary(NamedTuple):
    s_gt: torch.Tensor
    s_oth: torch.Tensor
    s_max: torch.Tensor


class MarginBundle(NamedTuple):
    m_rma: torch.Tensor
    m_oda: torch.Tensor
    m_rec: torch.Tensor
    m_sup: torch.Tensor


def _as_tensor(v) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        return v
    return torch.as_tensor(v, dtype=torch.float64)


def shaped_softplus(t, beta: float = 1.0) -> torch.Tensor:
    """``(1/beta) * log(1 + exp(beta * t))``, overflow-free for large ``|beta*t|``."""
    if not beta > 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    t = _as_tensor(t)
    # logaddexp(0, u) == max(u, 0) + log1p(exp(-|u|)) but keeps the exact
    # derivative sigmoid(u) at u == 0
    return torch.logaddexp(torch.zeros_like(t), beta * t) / beta


def _class_index(y, scores: torch.Tensor) -> torch.Tensor:
    y = torch.as_tensor(y, dtype=torch.long, device=scores.device)
    num_classes = scores.shape[-1]
    if torch.any(y < 0) or torch.any(y >= num_classes):
        raise InvalidInputError(f"class index out of range [0, {num_classes})")
    return y.expand(scores.shape[:-1]) if y.dim() == 0 else y


def summarize_scores(s, y) -> ScoreSummary:
    """Ground-truth score, strongest non-target score and overall max.

    ``s`` has shape ``(..., C)``; ``y`` is a class index (scalar or shaped
    like the leading dimensions of ``s``).
    """
    s = _as_tensor(s)
    if s.shape[-1] < 2:
        raise InvalidInputError("need at least two classes to define a non-target score")
    y = _class_index(y, s)
    onehot = torch.nn.functional.one_hot(y, s.shape[-1]).bool()
    s_gt = (s * onehot).sum(-1)
    s_oth = s.masked_fill(onehot, float("-inf")).amax(-1)
    s_max = s.amax(-1)
    return ScoreSummary(s_gt, s_oth, s_max)


def compute_margins(summary: ScoreSummary, tau) -> MarginBundle:
    """``tau`` may be a scalar or a tensor broadcastable against the summary."""
    t = _as_tensor(tau)
    if not bool(((t > 0.0) & (t < 1.0)).all()):
        raise ConfigError(f"tau must lie strictly inside (0, 1), got {tau}")
    s_gt, s_oth, s_max = (_as_tensor(v) for v in summary)
    return MarginBundle(
        m_rma=s_oth - tau,
        m_oda=tau - s_max,
        m_rec=s_gt - tau,
        m_sup=tau - s_oth,
    )


def concentration_loss(s, y, zeta: float = DEFAULT_ZETA) -> torch.Tensor:
    """Entropy of the normalised non-target scores (zero when they carry no mass)."""
    s = _as_tensor(s)
    y = _class_index(y, s)
    keep = ~torch.nn.functional.one_hot(y, s.shape[-1]).bool()
    nontarget = s * keep
    mass = nontarget.sum(-1, keepdim=True)
    empty = mass < _MASS_FLOOR
    p = nontarget / torch.where(empty, torch.ones_like(mass), mass)
    ent = -torch.xlogy(p, p + zeta).sum(-1)
    return torch.where(empty.squeeze(-1), torch.zeros_like(ent), ent)


def attack_branch_losses(s, y, cfg: SurrogateConfig):
    """Return ``(l_rma, l_oda, l_con)`` for score vectors ``s`` and targets ``y``."""
    summary = summarize_scores(s, y)
    l_rma = shaped_softplus(cfg.tau - summary.s_oth, cfg.beta)
    l_oda = shaped_softplus(summary.s_max - cfg.tau, cfg.beta)
    l_con = concentration_loss(s, y, cfg.zeta)
    return l_rma, l_oda, l_con


def defense_branch_losses(summary: ScoreSummary, cfg: SurrogateConfig):
    """Return ``(l_rec, l_sup)``: recovery of the true class and suppression of the rest."""
    l_rec = shaped_softplus(cfg.tau - _as_tensor(summary.s_gt), cfg.beta)
    l_sup = shaped_softplus(_as_tensor(summary.s_oth) - cfg.tau, cfg.beta)
    return l_rec, l_sup


def max_entropy(num_classes: int) -> float:
    return math.log(num_classes - 1)
