import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtseg.tensor import Tensor
from mtseg.optim import (
    ScheduleConfig,
    adam_step,
    clone_adam,
    consistency_weight_at_epoch,
    init_adam,
    lr_at_epoch,
)


SCHED = ScheduleConfig(alpha_lr=1e-3, rampup_epochs=50, total_epochs=350, gamma_max=10.0)


# -- schedules ----------------------------------------------------------

def test_lr_closed_form_points():
    a = SCHED.alpha_lr
    assert lr_at_epoch(0, SCHED) == pytest.approx(a * math.exp(-5.0), abs=1e-12)
    assert lr_at_epoch(25, SCHED) == pytest.approx(a * math.exp(-1.25), abs=1e-12)
    assert lr_at_epoch(50, SCHED) == pytest.approx(a, abs=1e-12)
    assert lr_at_epoch(200, SCHED) == pytest.approx(a / 2.0, abs=1e-12)
    assert lr_at_epoch(350, SCHED) == pytest.approx(0.0, abs=1e-12)


def test_gamma_closed_form_points():
    g = SCHED.gamma_max
    assert consistency_weight_at_epoch(0, SCHED) == pytest.approx(g * math.exp(-5.0), abs=1e-12)
    assert consistency_weight_at_epoch(25, SCHED) == pytest.approx(g * math.exp(-1.25), abs=1e-12)
    assert consistency_weight_at_epoch(50, SCHED) == pytest.approx(g, abs=1e-12)
    assert consistency_weight_at_epoch(200, SCHED) == pytest.approx(g, abs=1e-12)
    assert consistency_weight_at_epoch(350, SCHED) == pytest.approx(g, abs=1e-12)


def test_lr_continuous_at_ramp_boundary():
    before = lr_at_epoch(SCHED.rampup_epochs - 1e-9, SCHED)
    after = lr_at_epoch(SCHED.rampup_epochs + 1e-9, SCHED)
    assert before == pytest.approx(after, abs=1e-9)
    assert lr_at_epoch(SCHED.rampup_epochs, SCHED) == SCHED.alpha_lr


def test_schedule_rejects_out_of_range_epochs():
    with pytest.raises(ValueError):
        lr_at_epoch(-1, SCHED)
    with pytest.raises(ValueError):
        lr_at_epoch(351, SCHED)
    with pytest.raises(ValueError):
        consistency_weight_at_epoch(-0.5, SCHED)


def test_schedule_config_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(rampup_epochs=0)
    with pytest.raises(ValueError):
        ScheduleConfig(rampup_epochs=80, total_epochs=60)


@given(st.floats(0.0, 350.0))
@settings(max_examples=60)
def test_lr_bounded_by_peak(epoch):
    lr = lr_at_epoch(epoch, SCHED)
    assert 0.0 <= lr <= SCHED.alpha_lr


@given(st.floats(0.0, 350.0), st.floats(0.0, 350.0))
@settings(max_examples=60)
def test_gamma_monotone_nondecreasing(e1, e2):
    lo, hi = sorted((e1, e2))
    assert consistency_weight_at_epoch(lo, SCHED) <= consistency_weight_at_epoch(hi, SCHED) + 1e-15


# -- adam ---------------------------------------------------------------


def params_of(*arrs):
    return {f"p{i}": Tensor(np.asarray(a, dtype=np.float32), requires_grad=True)
            for i, a in enumerate(arrs)}


def test_zero_gradient_no_decay_keeps_parameters():
    params = params_of([1.0, -2.0])
    st_ = init_adam(params, l2_lambda=0.0)
    before = params["p0"].data.copy()
    adam_step(params, st_, lr=0.1)
    assert np.array_equal(params["p0"].data, before)
    assert st_.t == 1


def test_first_step_is_signed_lr():
    # constant gradient c > 0: bias-corrected first step is -lr * c/sqrt(c^2)
    params = params_of([0.0, 0.0])
    st_ = init_adam(params, l2_lambda=0.0)
    params["p0"].grad = np.array([3.0, 0.5], dtype=np.float32)
    adam_step(params, st_, lr=0.01)
    assert np.allclose(params["p0"].data, [-0.01, -0.01], rtol=1e-4)


def test_decay_shrinks_positive_parameter_without_gradient():
    params = params_of([2.0])
    st_ = init_adam(params, l2_lambda=6e-4)
    adam_step(params, st_, lr=0.01)
    assert params["p0"].data[0] < 2.0


def test_step_counter_and_name_check():
    params = params_of([1.0])
    st_ = init_adam(params)
    for _ in range(5):
        adam_step(params, st_, lr=0.0)
    assert st_.t == 5
    with pytest.raises(ValueError):
        adam_step({"other": Tensor(np.zeros(1), requires_grad=True)}, st_, lr=0.1)


def test_adam_converges_on_quadratic():
    target = np.array([3.0, -1.5], dtype=np.float32)
    params = params_of([0.0, 0.0])
    st_ = init_adam(params, beta1=0.9, l2_lambda=0.0)
    for _ in range(400):
        params["p0"].grad = 2.0 * (params["p0"].data - target)
        adam_step(params, st_, lr=0.05)
    assert np.allclose(params["p0"].data, target, atol=0.05)


def test_clone_adam_is_deep():
    params = params_of([1.0, 2.0])
    st_ = init_adam(params)
    params["p0"].grad = np.ones(2, dtype=np.float32)
    adam_step(params, st_, lr=0.01)
    snap = clone_adam(st_)
    adam_step(params, st_, lr=0.01)
    assert snap.t == 1 and st_.t == 2
    assert not np.array_equal(snap.m["p0"], st_.m["p0"])
