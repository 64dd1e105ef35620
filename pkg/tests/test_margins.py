import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from backdoor_forge.errors import ConfigError, InvalidInputError
from backdoor_forge.margins import (
    ScoreSummary,
    SurrogateConfig,
    attack_branch_losses,
    compute_margins,
    concentration_loss,
    defense_branch_losses,
    shaped_softplus,
    summarize_scores,
)

from .conftest import autograd_grad, central_difference, rel_error

# reference values computed with mpmath at 50 digits
LN2 = math.log(2)


@pytest.mark.parametrize(
    "t, beta, expected",
    [
        (0.0, 1.0, LN2),
        (0.0, 0.5, 1.3862943611198906),
        (-20.0, 1.0, 2.0611536203143807e-09),
    ],
)
def test_shaped_softplus_values(t, beta, expected):
    assert float(shaped_softplus(t, beta)) == pytest.approx(expected, rel=1e-12)


def test_shaped_softplus_extreme_arguments_are_finite():
    t = torch.tensor([-700.0, 700.0], dtype=torch.float64)
    out = shaped_softplus(t, 1.0)
    assert torch.isfinite(out).all()
    assert float(out[1]) == pytest.approx(700.0)
    assert float(out[0]) >= 0.0


@pytest.mark.parametrize("beta", [0.0, -1.0])
def test_shaped_softplus_rejects_bad_beta(beta):
    with pytest.raises(ConfigError):
        shaped_softplus(0.0, beta)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-30, 30),
    st.floats(0.01, 30),
    st.floats(0.2, 5.0),
)
def test_shaped_softplus_positive_and_increasing(t, dt, beta):
    lo = float(shaped_softplus(t, beta))
    hi = float(shaped_softplus(t + dt, beta))
    assert lo > 0.0
    assert hi > lo


def test_shaped_softplus_approaches_relu_for_large_beta():
    t = torch.cat([torch.linspace(-5, -0.1, 50), torch.linspace(0.1, 5, 50)]).double()
    diff = (shaped_softplus(t, 100.0) - torch.clamp(t, min=0)).abs()
    assert float(diff.max()) < 0.01


@pytest.mark.parametrize(
    "s, y, expected",
    [
        ([0.9, 0.05, 0.02], 0, (0.9, 0.05, 0.9)),
        ([0.3, 0.7, 0.1], 1, (0.7, 0.3, 0.7)),
        ([0.5, 0.5], 0, (0.5, 0.5, 0.5)),
    ],
)
def test_summarize_scores(s, y, expected):
    got = summarize_scores(s, y)
    assert [float(v) for v in got] == pytest.approx(expected)


def test_summarize_scores_batched():
    s = torch.tensor([[0.9, 0.05, 0.02], [0.3, 0.7, 0.1]])
    got = summarize_scores(s, torch.tensor([0, 1]))
    assert got.s_gt.tolist() == pytest.approx([0.9, 0.7])
    assert got.s_oth.tolist() == pytest.approx([0.05, 0.3])


@pytest.mark.parametrize("s, y", [([0.4], 0), ([0.1, 0.2], 2), ([0.1, 0.2], -1)])
def test_summarize_scores_rejects_invalid(s, y):
    with pytest.raises(InvalidInputError):
        summarize_scores(s, y)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=8), st.data())
def test_summary_invariants(scores, data):
    y = data.draw(st.integers(0, len(scores) - 1))
    sm = summarize_scores(scores, y)
    assert float(sm.s_max) >= float(sm.s_gt)
    assert float(sm.s_max) >= float(sm.s_oth)
    assert float(sm.s_max) == max(float(sm.s_gt), float(sm.s_oth))


@pytest.mark.parametrize(
    "summary, tau, expected",
    [
        ((0.9, 0.05, 0.9), 0.25, (-0.20, -0.65, 0.65, 0.20)),
        ((0.3, 0.3, 0.3), 0.3, (0.0, 0.0, 0.0, 0.0)),
        ((1.0, 0.0, 1.0), 0.5, (-0.5, -0.5, 0.5, 0.5)),
    ],
)
def test_compute_margins(summary, tau, expected):
    got = compute_margins(ScoreSummary(*map(torch.tensor, summary)), tau)
    assert [float(v) for v in got] == pytest.approx(expected, abs=1e-7)


def test_margin_relations(rng):
    s = torch.as_tensor(rng.uniform(size=(1000, 5)))
    y = torch.as_tensor(rng.integers(0, 5, size=1000))
    m = compute_margins(summarize_scores(s, y), 0.3)
    assert torch.allclose(m.m_rma, -m.m_sup)
    assert bool((m.m_rec <= -m.m_oda + 1e-12).all())


def test_surrogate_config_validation():
    for kwargs in ({"tau": 0.0}, {"tau": 1.0}, {"beta": 0.0}, {"zeta": -1.0}):
        with pytest.raises(ConfigError):
            SurrogateConfig(**kwargs)


def test_attack_branch_losses_reference():
    cfg = SurrogateConfig(tau=0.25, beta=1.0, zeta=0.0)
    l_rma, l_oda, l_con = attack_branch_losses([0.9, 0.05, 0.02], 0, cfg)
    assert float(l_rma) == pytest.approx(0.7981388693815918, rel=1e-10)
    assert float(l_oda) == pytest.approx(1.0700553357027152, rel=1e-10)
    assert float(l_con) == pytest.approx(0.5982695885852572, rel=1e-10)


def test_concentration_zero_mass_convention():
    cfg = SurrogateConfig(tau=0.5, beta=1.0)
    _, _, l_con = attack_branch_losses([0.0, 1.0, 0.0, 0.0], 1, cfg)
    assert float(l_con) == 0.0


def test_concentration_uniform_is_log_of_nontarget_count():
    l_con = concentration_loss([0.9, 0.2, 0.2, 0.2], 0, zeta=0.0)
    assert float(l_con) == pytest.approx(math.log(3), rel=1e-12)


def test_defense_branch_losses_reference():
    cfg = SurrogateConfig(tau=0.25, beta=1.0)
    l_rec, l_sup = defense_branch_losses(ScoreSummary(*map(torch.tensor, (0.9, 0.05, 0.9))), cfg)
    assert float(l_rec) == pytest.approx(0.4200553357027152, rel=1e-6)
    assert float(l_sup) == pytest.approx(0.5981388693815918, rel=1e-6)


def test_defense_branch_losses_at_threshold():
    cfg = SurrogateConfig(tau=0.4)
    l_rec, l_sup = defense_branch_losses(ScoreSummary(*map(torch.tensor, (0.4, 0.4, 0.4))), cfg)
    assert float(l_rec) == pytest.approx(LN2)
    assert float(l_sup) == pytest.approx(LN2)


def test_defense_branch_losses_saturated():
    cfg = SurrogateConfig(tau=0.5)
    l_rec, l_sup = defense_branch_losses(ScoreSummary(*map(torch.tensor, (1.0, 0.0, 1.0))), cfg)
    assert float(l_rec) == pytest.approx(0.4740769841801067, rel=1e-6)
    assert float(l_sup) == pytest.approx(0.4740769841801067, rel=1e-6)


def _untied_scores(rng, n, c):
    # distinct entries, so max/argmax are differentiable
    while True:
        s = rng.uniform(0.02, 0.98, size=(n, c))
        srt = np.sort(s, axis=1)
        if np.diff(srt, axis=1).min() > 1e-3:
            return torch.as_tensor(s)


@pytest.mark.parametrize("beta", [0.5, 1.0, 2.0])
def test_loss_gradients_match_finite_differences(rng, beta):
    cfg = SurrogateConfig(tau=0.3, beta=beta)
    s = _untied_scores(rng, 4, 5)
    y = torch.tensor([0, 2, 4, 1])
    fns = {
        "l_rma": lambda v: attack_branch_losses(v, y, cfg)[0].sum(),
        "l_oda": lambda v: attack_branch_losses(v, y, cfg)[1].sum(),
        "l_con": lambda v: attack_branch_losses(v, y, cfg)[2].sum(),
        "l_rec": lambda v: defense_branch_losses(summarize_scores(v, y), cfg)[0].sum(),
        "l_sup": lambda v: defense_branch_losses(summarize_scores(v, y), cfg)[1].sum(),
    }
    for name, fn in fns.items():
        err = rel_error(autograd_grad(fn, s), central_difference(fn, s))
        assert err < 1e-5, name
