"""
Margins, surrogates and the soft branch gate
============================================

Score vectors go in, five margins come out, and each margin has a smooth
surrogate loss. The attack side combines two of them through a soft gate
that leans on whichever branch is cheaper. This script prints a few hand
cases and draws the gate over a grid of branch losses.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from backdoor_forge.gate import BranchLosses, adv_loss, lse_decomposition, soft_gate
from backdoor_forge.margins import (
    SurrogateConfig,
    attack_branch_losses,
    compute_margins,
    defense_branch_losses,
    shaped_softplus,
    summarize_scores,
)

cfg = SurrogateConfig(tau=0.25, beta=1.0)

# a confident, correct prediction of class 0
s = torch.tensor([[0.9, 0.05, 0.02, 0.01]], dtype=torch.float64)
summary = summarize_scores(s, torch.tensor([0]))
print("summary", {k: float(v) for k, v in summary._asdict().items()})
print("margins", {k: round(float(v), 4) for k, v in compute_margins(summary, cfg.tau)._asdict().items()})

a, b, c = attack_branch_losses(s, torch.tensor([0]), cfg)
g = soft_gate(a, b)
print(f"attack branches a={float(a):.3f} b={float(b):.3f} c={float(c):.3f}")
print(f"gate g_rma={float(g.g_rma):.3f} g_oda={float(g.g_oda):.3f}")
print(f"L_ADV={float(adv_loss(BranchLosses(a, b, c))):.3f}")

rec, sup = defense_branch_losses(summary, cfg)
print(f"defence terms l_rec={float(rec):.3f} l_sup={float(sup):.3f}")

# the gated loss equals log-sum-exp plus the gate's entropy
aa = torch.linspace(0, 20, 5, dtype=torch.float64)
gated, lse, ent = lse_decomposition(aa, aa.flip(0))
print("identity residual", float((gated - lse - ent).abs().max()))

# beta sharpens the softplus towards a hinge
t = torch.linspace(-2, 2, 200, dtype=torch.float64)
fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
for beta in (0.5, 1.0, 4.0, 16.0):
    axes[0].plot(t, shaped_softplus(t, beta), label=f"beta={beta:g}")
axes[0].plot(t, t.clamp(min=0), "k--", lw=0.8, label="hinge")
axes[0].set_xlabel("t")
axes[0].legend()

grid = np.linspace(0, 6, 121)
A, B = np.meshgrid(grid, grid)
G = soft_gate(torch.as_tensor(A), torch.as_tensor(B)).g_rma.numpy()
im = axes[1].contourf(A, B, G, levels=21, cmap="coolwarm")
axes[1].set_xlabel("a (RMA branch)")
axes[1].set_ylabel("b (ODA branch)")
fig.colorbar(im, ax=axes[1], label="g_rma")
fig.tight_layout()
fig.savefig("surrogate_losses.png", dpi=120)
print("wrote surrogate_losses.png")
