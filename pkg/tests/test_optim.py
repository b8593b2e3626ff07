import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rgbtfuse import autodiff as ad
from rgbtfuse.autodiff import ContractError, Tensor
from rgbtfuse.optim import AdamW, FreezeRegistry, ParamGroup, adamw_step, digest, verify_frozen


def scalar(v, grad=None):
    t = Tensor(np.array([v]), requires_grad=True)
    if grad is not None:
        t.grad = np.array([grad])
    return t


def test_decay_only_step():
    t = scalar(1.0, 0.0)
    adamw_step([ParamGroup("g", [("t", t)], lr=0.01, weight_decay=0.1)])
    assert t.data[0] == pytest.approx(0.999, abs=1e-15)
    assert t.grad is None


@pytest.mark.parametrize("g", [0.5, -3.0, 1e-3])
def test_first_step_matches_reference(g):
    lr, eps, b1, b2 = 0.01, 1e-8, 0.9, 0.999
    t = scalar(0.0, g)
    adamw_step([ParamGroup("g", [("t", t)], lr=lr, weight_decay=0.0, eps=eps)])
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    assert t.data[0] == pytest.approx(-lr * m_hat / (math.sqrt(v_hat) + eps), rel=1e-12)


def test_reference_over_several_steps(rng):
    grads = rng.normal(size=5)
    t = scalar(0.3)
    grp = ParamGroup("g", [("t", t)], lr=0.05, weight_decay=0.02)
    theta, m, v = 0.3, 0.0, 0.0
    for k, g in enumerate(grads, 1):
        t.grad = np.array([g])
        adamw_step([grp])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.05 * 0.02 * theta
        theta -= 0.05 * (m / (1 - 0.9**k)) / (math.sqrt(v / (1 - 0.999**k)) + 1e-8)
    assert t.data[0] == pytest.approx(theta, rel=1e-12)


def test_missing_gradient_raises():
    with pytest.raises(ContractError, match="no gradient"):
        adamw_step([ParamGroup("g", [("t", scalar(1.0))], lr=0.1)])


def test_parameter_outside_groups_untouched(rng):
    inside, outside = Tensor(rng.normal(size=3), requires_grad=True), Tensor(rng.normal(size=3))
    before = outside.data.copy()
    opt = AdamW([ParamGroup("g", [("in", inside)], lr=0.1)])
    opt.zero_grad()
    ad.backward(ad.sum(inside * outside))
    opt.step()
    assert np.array_equal(outside.data, before)


def test_duplicate_membership_rejected():
    t = scalar(1.0)
    with pytest.raises(ContractError):
        AdamW([ParamGroup("a", [("t", t)], lr=0.1), ParamGroup("b", [("t", t)], lr=0.1)])


def test_group_with_zero_gradient_only_decays(rng):
    a, b = Tensor(rng.normal(size=2), requires_grad=True), Tensor(rng.normal(size=2), requires_grad=True)
    opt = AdamW([ParamGroup("t", [("a", a)], lr=0.1, weight_decay=0.0), ParamGroup("f", [("b", b)], lr=0.1, weight_decay=0.0)])
    before = b.data.copy()
    opt.zero_grad()
    ad.backward(ad.sum(a * a))
    opt.step()
    assert np.array_equal(b.data, before)


@pytest.mark.parametrize("seed", range(10))
def test_step_descends_quadratic_bowl(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(4, 4))
    h = q @ q.T + np.eye(4)
    center = rng.normal(size=4)
    x = Tensor(rng.normal(size=4), requires_grad=True)

    def f():
        d = x.data - center
        return 0.5 * float(d @ h @ d)

    before = f()
    x.grad = h @ (x.data - center)
    adamw_step([ParamGroup("g", [("x", x)], lr=1e-3, weight_decay=0.0)])
    assert f() < before


def test_warmup_scales_lr():
    g = ParamGroup("g", [], lr=1.0, warmup_steps=4)
    g.step = 2
    assert g.current_lr() == 0.5
    g.step = 5
    assert g.current_lr() == 1.0


def test_state_round_trip(rng):
    a = Tensor(rng.normal(size=3), requires_grad=True)
    opt = AdamW([ParamGroup("g", [("a", a)], lr=0.1)])
    a.grad = rng.normal(size=3)
    opt.step()
    other = AdamW([ParamGroup("g", [("a", a)], lr=0.1)])
    other.load_state(opt.state_meta(), opt.state_arrays())
    assert other.groups[0].step == 1
    assert np.array_equal(other.groups[0].m["a"], opt.groups[0].m["a"])


def test_freeze_registry_detects_drift(rng):
    frozen = Tensor(rng.normal(size=(2, 2)))
    reg = FreezeRegistry()
    reg.register([("w", frozen), ("b", Tensor(np.zeros(2)))])
    assert verify_frozen(reg).ok and len(reg) == 2 and "w" in reg
    frozen.data[0, 0] += 1e-12
    rep = verify_frozen(reg)
    assert rep.drifted == ["w"] and rep.checked == 2


def test_registry_refuses_trainable():
    with pytest.raises(ContractError):
        FreezeRegistry().register([("w", scalar(1.0))])


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=6))
def test_digest_sensitive_to_values_and_shape(vals):
    arr = np.array(vals)
    assert digest(arr) == digest(arr.copy())
    assert digest(arr) != digest(arr.reshape(1, -1))
