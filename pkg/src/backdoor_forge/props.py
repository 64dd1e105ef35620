"""Executable checks of the score-level propositions behind the method.

Each suite draws its own deterministic sample, runs the package code on it
and reports a :class:`PropResult`. A failing suite carries a witness: the
first input that violates the property. Suites that involve the branch gate
accept a replacement ``gate`` so the checker itself can be tested against a
deliberately broken gate.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .detector import per_prediction_bce
from .gate import LN2, lse_decomposition, soft_gate, soft_min
from .margins import (
    ScoreSummary,
    SurrogateConfig,
    attack_branch_losses,
    compute_margins,
    concentration_loss,
    defense_branch_losses,
    summarize_scores,
)

# cos = 1/sqrt(1 + r^2) drops below 1 - 1e-3 once r = s_c2/s_c1 exceeds this
A3_RATIO_FLOOR = 0.05


@dataclass
class PropResult:
    name: str
    passed: bool
    checked: int
    seconds: float = 0.0
    witness: dict | None = None
    detail: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=float)


def _first(mask: np.ndarray, **arrays) -> dict | None:
    bad = np.flatnonzero(mask)
    if not len(bad):
        return None
    k = int(bad[0])
    return {name: np.asarray(v)[k].tolist() for name, v in arrays.items()}


def _random_scores(rng, n, num_classes=4):
    return torch.as_tensor(rng.uniform(size=(n, num_classes)))


def check_a1(rng, n=10_000, tau=0.25, beta=1.0, **_) -> PropResult:
    """Order consistency of the four surrogate/margin pairs."""
    cfg = SurrogateConfig(tau=tau, beta=beta)
    y = torch.as_tensor(rng.integers(0, 4, size=n))
    pairs = []
    for s in (_random_scores(rng, n), _random_scores(rng, n)):
        summ = summarize_scores(s, y)
        m = compute_margins(summ, tau)
        l_rma, l_oda, _ = attack_branch_losses(s, y, cfg)
        l_rec, l_sup = defense_branch_losses(summ, cfg)
        pairs.append({"rma": (m.m_rma, l_rma), "oda": (m.m_oda, l_oda),
                      "rec": (m.m_rec, l_rec), "sup": (m.m_sup, l_sup)})
    violations = {}
    witness = None
    for key in ("rma", "oda", "rec", "sup"):
        (m1, l1), (m2, l2) = pairs[0][key], pairs[1][key]
        bad = (torch.sign(m1 - m2) != -torch.sign(l1 - l2)).numpy()
        violations[key] = int(bad.sum())
        if witness is None:
            witness = _first(bad, pair=np.full(n, key), m1=m1, m2=m2, l1=l1, l2=l2)
    return PropResult("A1", witness is None, 4 * n, witness=witness, detail={"violations": violations})


def check_a2(rng, n=1_000, dim=16, **_) -> PropResult:
    """cos(g_tar, g_tar + g_nui) >= (1 - rho)/(1 + beta) on constructed gradient pairs."""
    grid = [(r, b) for r in (0.0, 0.25, 0.5) for b in (0.5, 1.0, 2.0)]
    worst = math.inf
    witness = None
    checked = 0
    for k in range(n):
        rho, beta = grid[k % len(grid)]
        g = rng.normal(size=dim)
        u = rng.normal(size=dim)
        gg = g @ g
        if u @ g < -rho * gg:
            u = u + (-rho * gg - u @ g) / gg * g
        # shrinking keeps the inner-product condition since it only scales towards 0
        cap = beta * math.sqrt(gg) * rng.uniform(0.0, 1.0)
        norm = np.linalg.norm(u)
        if norm > cap:
            u = u * (cap / norm)
        total = g + u
        if not np.linalg.norm(total) > 0:
            continue
        cos = float(g @ total / (np.linalg.norm(g) * np.linalg.norm(total)))
        bound = (1 - rho) / (1 + beta)
        checked += 1
        worst = min(worst, cos - bound)
        if cos < bound - 1e-12 and witness is None:
            witness = {"rho": rho, "beta": beta, "cos": cos, "bound": bound}
    e1, e2 = np.eye(2)
    ortho = float(e1 @ (e1 + e2) / np.linalg.norm(e1 + e2))
    if ortho < 0.5 and witness is None:
        witness = {"rho": 0.0, "beta": 1.0, "cos": ortho, "bound": 0.5}
    return PropResult("A2", witness is None, checked + 1, witness=witness,
                      detail={"orthogonal_cos": ortho, "min_slack": worst})


def _clm_rma_cosine(z0: torch.Tensor):
    """Two non-target classes with logit gradients e1, e2; the true class has none."""
    x = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    logits = (z0 + torch.stack([0.0 * x[0], x[1], x[2]]))[None]
    y = torch.zeros(1, dtype=torch.long)
    (g_clm,) = torch.autograd.grad(per_prediction_bce(logits, y).sum(), x, retain_graph=True)
    (g_rma,) = torch.autograd.grad(summarize_scores(torch.sigmoid(logits), y).s_oth.sum(), x)
    return float(torch.nn.functional.cosine_similarity(g_clm, g_rma, dim=0))


def _clm_oda_cosine(z0: torch.Tensor):
    """True class is the maximum; its logit moves along e1, the competitor along e2."""
    x = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    logits = (z0 + torch.stack([x[1], x[2], 0.0 * x[0]]))[None]
    y = torch.zeros(1, dtype=torch.long)
    (g_clm,) = torch.autograd.grad(per_prediction_bce(logits, y).sum(), x, retain_graph=True)
    (g_max,) = torch.autograd.grad(summarize_scores(torch.sigmoid(logits), y).s_max.sum(), x)
    return float(torch.nn.functional.cosine_similarity(g_clm, -g_max, dim=0))


def check_a3(rng=None, steps=25, **_) -> PropResult:
    """CLM ascent is not collinear with the RMA or ODA score directions."""
    # c1 is the strongest competitor; the configuration is kept away from score ties
    z_head = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    headline = _clm_rma_cosine(z_head)
    witness = None if headline < 1 - 1e-3 else {"z": z_head.tolist(), "cos": headline}
    zs = np.linspace(-6.0, 6.0, steps)
    worst = -math.inf
    checked = 1
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731
    for z1 in zs:
        for z2 in zs:
            if z2 >= z1:
                continue
            z = torch.tensor([-3.0, z1, z2], dtype=torch.float64)
            cos = _clm_rma_cosine(z)
            ratio = sig(z2) / sig(z1)
            limit = 1 - 1e-3 if ratio >= A3_RATIO_FLOOR else 1.0
            checked += 1
            worst = max(worst, cos)
            if not cos < limit and witness is None:
                witness = {"branch": "rma", "z": z.tolist(), "cos": cos, "limit": limit}
            if z1 > -3.0:
                # true class on top for the ODA construction
                zo = torch.tensor([z1, z2, -8.0], dtype=torch.float64)
                cos_o = _clm_oda_cosine(zo)
                checked += 1
                if not cos_o < 1.0 and witness is None:
                    witness = {"branch": "oda", "z": zo.tolist(), "cos": cos_o, "limit": 1.0}
    return PropResult("A3", witness is None, checked, witness=witness,
                      detail={"headline_cos": headline, "max_rma_cos": worst})


def check_a4(rng, n=10_000, zeta=1e-8, **_) -> PropResult:
    """Concentration loss lies in [0, ln(C-1)] and attains both ends."""
    witness = None
    checked = 0
    per_c = n // 4
    for C in (3, 4, 5, 8):
        alpha = rng.choice([0.05, 0.3, 1.0, 5.0])
        s = torch.as_tensor(rng.dirichlet(np.full(C, alpha), size=per_c) * rng.uniform(0.01, 1.0, (per_c, 1)))
        y = torch.as_tensor(rng.integers(0, C, size=per_c))
        l = concentration_loss(s, y, zeta).numpy()
        upper = math.log(C - 1)
        bad = (l < -1e-6) | (l > upper + 1e-6)
        checked += per_c
        if witness is None:
            witness = _first(bad, scores=s.numpy(), y=y.numpy(), l_con=l)
        onehot = torch.zeros(C, dtype=torch.float64)
        onehot[1] = 0.7
        onehot[0] = 0.9
        uniform = torch.full((C,), 0.4, dtype=torch.float64)
        lo = float(concentration_loss(onehot, 0, zeta))
        hi = float(concentration_loss(uniform, 0, zeta))
        checked += 2
        if witness is None and (abs(lo) > 1e-4 or abs(hi - upper) > 1e-4):
            witness = {"C": C, "one_hot": lo, "uniform": hi, "ln_c_minus_1": upper}
    return PropResult("A4", witness is None, checked, witness=witness)


def check_a5(rng, n=10_000, gate=soft_gate, **_) -> PropResult:
    """gated = lse + gate entropy."""
    a = torch.as_tensor(rng.uniform(0, 20, n))
    b = torch.as_tensor(rng.uniform(0, 20, n))
    gated, lse, ent = lse_decomposition(a, b, gate=gate)
    err = (gated - (lse + ent)).abs().numpy()
    bad = err >= 1e-9
    return PropResult("A5", not bad.any(), n, witness=_first(bad, a=a, b=b, error=err),
                      detail={"max_error": float(err.max())})


def check_a5_1(rng, n=10_000, gate=soft_gate, **_) -> PropResult:
    """lse <= gated <= lse + ln 2, and the gated value tends to min(a, b) for large gaps."""
    a = torch.as_tensor(rng.uniform(0, 20, n))
    b = torch.as_tensor(rng.uniform(0, 20, n))
    gated, lse, ent = lse_decomposition(a, b, gate=gate)
    tol = 1e-12
    bad = ((gated < lse - tol) | (gated > lse + LN2 + tol) | (ent < -tol) | (ent > LN2 + tol)).numpy()
    witness = _first(bad, a=a, b=b, gated=gated, lse=lse)
    base = torch.as_tensor(rng.uniform(0, 5, 1000))
    gap = torch.as_tensor(rng.uniform(30, 60, 1000))
    g_far, _, e_far = lse_decomposition(base, base + gap, gate=gate)
    far_bad = ((g_far - base).abs() >= 1e-6).numpy() | (e_far >= 1e-6).numpy()
    if witness is None:
        witness = _first(far_bad, a=base, b=base + gap, gated=g_far)
    lim = float((soft_min(base, base + gap) - base).abs().max())
    return PropResult("A5.1", witness is None, n + 1000, witness=witness, detail={"max_softmin_gap": lim})


def check_a6(rng=None, step=0.01, **_) -> PropResult:
    """Positive repaired margin implies s_gt > tau and s_oth < tau, on an exhaustive grid."""
    k = int(round(1 / step))
    s = torch.arange(k + 1, dtype=torch.float64) * step
    tau = torch.arange(1, k, dtype=torch.float64) * step
    g, o, t = torch.meshgrid(s, s, tau, indexing="ij")
    summ = ScoreSummary(g, o, torch.maximum(g, o))
    m = compute_margins(summ, t)
    repaired = torch.minimum(m.m_rec, m.m_sup) > 0
    bad = (repaired & ~((g > t) & (o < t))).flatten().numpy()
    return PropResult("A6", not bad.any(), int(g.numel()),
                      witness=_first(bad, s_gt=g.flatten(), s_oth=o.flatten(), tau=t.flatten()),
                      detail={"repaired_points": int(repaired.sum())})


def check_a6_1(rng, n=1_000, dim=8, **_) -> PropResult:
    """Perturbations smaller than margin/L keep both repaired inequalities (linear score model)."""
    witness = None
    checked = 0
    for _k in range(n):
        tau = rng.uniform(0.1, 0.9)
        gamma = rng.uniform(0.005, min(1 - tau, tau) * 0.9)
        G = torch.as_tensor(rng.normal(size=(3, dim)))
        L = float(G.norm(dim=1).max())
        s0 = torch.tensor([tau + gamma + rng.uniform(0, 0.05), tau - gamma - rng.uniform(0, 0.05),
                           tau - gamma - rng.uniform(0, 0.2)], dtype=torch.float64)
        radius = gamma / L * rng.uniform(0.0, 0.999)
        d = torch.as_tensor(rng.normal(size=dim))
        # alternate random and worst-case directions for the true-class score
        d = -G[0] if _k % 2 else d
        eta = d / d.norm() * radius
        s = s0 + G @ eta
        summ = summarize_scores(s, 0)
        checked += 1
        ok = float(summ.s_gt) > tau and float(summ.s_oth) < tau
        if not ok and witness is None:
            witness = {"tau": tau, "gamma": gamma, "L": L, "eta_norm": float(eta.norm()), "scores": s.tolist()}
    return PropResult("A6.1", witness is None, checked, witness=witness)


def check_a7(rng, n=1_000, **_) -> PropResult:
    """Confidence weighting never lowers mean informativeness when cov(c, q) >= 0."""
    witness = None
    checked = 0
    c, q = np.array([1.0, 2.0]), np.array([0.2, 0.8])
    hand = float(c @ q / c.sum())
    if not hand >= 0.5:
        witness = {"c": c.tolist(), "q": q.tolist(), "weighted": hand}
    while checked < n:
        m = int(rng.integers(2, 20))
        q = rng.uniform(0, 1, m)
        if checked % 10 == 0:
            c = np.full(m, rng.uniform(0.1, 1.0))
        else:
            c = np.exp(rng.uniform(0, 3) * (q - q.mean()) + rng.normal(0, 0.3, m)) * rng.uniform(0.1, 1.0)
        if np.mean(c * q) - c.mean() * q.mean() < 0:
            continue
        checked += 1
        weighted, uniform = float(c @ q / c.sum()), float(q.mean())
        if weighted < uniform - 1e-12 and witness is None:
            witness = {"c": c.tolist(), "q": q.tolist(), "weighted": weighted, "uniform": uniform}
    return PropResult("A7", witness is None, checked + 1, witness=witness, detail={"hand_case": hand})


SUITES = {
    "A1": check_a1,
    "A2": check_a2,
    "A3": check_a3,
    "A4": check_a4,
    "A5": check_a5,
    "A5.1": check_a5_1,
    "A6": check_a6,
    "A6.1": check_a6_1,
    "A7": check_a7,
}


def run_suite(name: str, seed: int = 0, gate=soft_gate) -> PropResult:
    rng = np.random.default_rng([seed, list(SUITES).index(name)])
    t0 = time.perf_counter()
    res = SUITES[name](rng, gate=gate)
    res.seconds = time.perf_counter() - t0
    return res


def run_all(seed: int = 0, gate=soft_gate, only=None) -> list[PropResult]:
    names = list(SUITES) if only is None else list(only)
    return [run_suite(n, seed, gate) for n in names]


def sign_flipped_gate(a, b):
    """Deliberately wrong gate (weights the larger loss) used to self-test the checker."""
    return soft_gate(-torch.as_tensor(a), -torch.as_tensor(b))
