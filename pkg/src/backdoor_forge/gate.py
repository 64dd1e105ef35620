"""Soft two-way branch gate between the misclassification and disappearance losses."""

from __future__ import annotations

import math
from typing import NamedTuple

import torch

from .errors import InvalidInputError


class GatePair(NamedTuple):
    g_rma: torch.Tensor
    g_oda: torch.Tensor


class BranchLosses(NamedTuple):
    a: torch.Tensor  # misclassification branch
    b: torch.Tensor  # disappearance branch
    c: torch.Tensor  # concentration penalty, RMA branch only


def _as_tensor(v) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        return v
    return torch.as_tensor(v, dtype=torch.float64)


def soft_gate(a, b) -> GatePair:
    """Softmax over ``(-a, -b)``: the smaller loss gets the larger weight."""
    a, b = _as_tensor(a), _as_tensor(b)
    if not (torch.isfinite(a).all() and torch.isfinite(b).all()):
        raise InvalidInputError("gate inputs must be finite")
    a, b = torch.broadcast_tensors(a, b)
    g = torch.softmax(torch.stack([-a, -b], dim=-1), dim=-1)
    return GatePair(g[..., 0], g[..., 1])


def adv_loss(bl: BranchLosses, gate=soft_gate) -> torch.Tensor:
    """Gated adversarial loss ``g_rma*(a + c) + g_oda*b``; ``c`` stays out of the gate."""
    a, b, c = (_as_tensor(v) for v in bl)
    g = gate(a, b)
    return g.g_rma * (a + c) + g.g_oda * b


def soft_min(a, b) -> torch.Tensor:
    """``-log(exp(-a) + exp(-b))``."""
    a, b = _as_tensor(a), _as_tensor(b)
    return -torch.logaddexp(-a, -b)


def gate_entropy(g: GatePair) -> torch.Tensor:
    return -(torch.xlogy(g.g_rma, g.g_rma) + torch.xlogy(g.g_oda, g.g_oda))


def lse_decomposition(a, b, gate=soft_gate):
    """Return ``(gated, lse, entropy)`` where ``gated == lse + entropy`` for the true gate.

    The two sides are computed along independent paths so the identity can
    be checked numerically; ``gate`` may be swapped out to test the checker.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    g = gate(a, b)
    gated = g.g_rma * a + g.g_oda * b
    return gated, soft_min(a, b), gate_entropy(g)


LN2 = math.log(2.0)
