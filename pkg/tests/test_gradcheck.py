import numpy as np
import pytest

from rgbtfuse import autodiff as ad
from rgbtfuse.autodiff import Tensor
from rgbtfuse.gradcheck import ElementCheck, GradcheckReport, gradcheck


def test_detects_a_wrong_gradient(monkeypatch):
    x = Tensor(np.array([0.3, -1.2, 2.0]))
    good = gradcheck(lambda: ad.sum(ad.exp(x)), [("x", x)], per_param=3)
    assert good.ok and good.nonzero == 3

    # inflate the tape gradient by 1% and the checker must notice
    real_backward = ad.backward

    def bad_backward(loss):
        order = real_backward(loss)
        x.grad = x.grad * 1.01
        return order

    monkeypatch.setattr(ad, "backward", bad_backward)
    bad = gradcheck(lambda: ad.sum(ad.exp(x)), [("x", x)], per_param=3)
    assert not bad.ok and len(bad.failures) == 3


def test_restores_flags_and_values():
    x = Tensor(np.array([1.0, 2.0]))
    before = x.data.copy()
    gradcheck(lambda: ad.sum(x * x), [("x", x)], per_param=2)
    assert not x.requires_grad and x.grad is None
    assert np.array_equal(x.data, before)


@pytest.mark.parametrize(
    "analytic,numeric,ok",
    [(1.0, 1.00005, True), (1.0, 1.001, False), (1e-9, 5e-9, True), (0.0, 0.0, True), (2e-8, 0.0, False)],
)
def test_element_tolerance(analytic, numeric, ok):
    assert ElementCheck("p", (0,), analytic, numeric).passed() is ok


def test_empty_report_is_not_ok():
    assert not GradcheckReport("nothing").ok
