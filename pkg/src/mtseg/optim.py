"""Adam with coupled L2 decay, plus the epoch schedules for learning rate
and consistency weight.

The learning rate follows a Gaussian ramp-up exp(-5 * (1 - m)^2) for
m = epoch / rampup, then a cosine ramp-down (cos(pi * r) + 1) / 2 to zero
at the final epoch.  The consistency weight uses the same ramp-up shape
and then stays at its maximum.
"""

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ScheduleConfig:
    alpha_lr: float = 1e-3
    rampup_epochs: int = 15
    total_epochs: int = 60
    gamma_max: float = 10.0

    def __post_init__(self):
        if not 0 < self.rampup_epochs <= self.total_epochs:
            raise ValueError(
                f"need 0 < rampup <= total, got rampup={self.rampup_epochs} "
                f"total={self.total_epochs}")


def _check_epoch(epoch, sched):
    if not 0 <= epoch <= sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.total_epochs}]")


def lr_at_epoch(epoch, sched):
    """Learning rate at an (integer or fractional) epoch position."""
    _check_epoch(epoch, sched)
    if epoch <= sched.rampup_epochs:
        m = epoch / sched.rampup_epochs
        return sched.alpha_lr * math.exp(-5.0 * (1.0 - m) ** 2)
    r = (epoch - sched.rampup_epochs) / (sched.total_epochs - sched.rampup_epochs)
    return sched.alpha_lr * (math.cos(math.pi * r) + 1.0) / 2.0


def consistency_weight_at_epoch(epoch, sched):
    """Consistency weight: Gaussian ramp-up to gamma_max, flat afterwards."""
    _check_epoch(epoch, sched)
    m = min(epoch / sched.rampup_epochs, 1.0)
    return sched.gamma_max * math.exp(-5.0 * (1.0 - m) ** 2)


@dataclass
class AdamState:
    """First/second moment buffers and step count for one parameter set.

    Hyperparameters are fixed at construction; l2_lambda couples weight
    decay into the gradient before the moment updates.
    """
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    l2_lambda: float = 6e-4


def clone_adam(state):
    out = AdamState(t=state.t, beta1=state.beta1, beta2=state.beta2,
                    eps=state.eps, l2_lambda=state.l2_lambda)
    out.m = {n: a.copy() for n, a in state.m.items()}
    out.v = {n: a.copy() for n, a in state.v.items()}
    return out


def init_adam(params, beta1=0.99, beta2=0.999, eps=1e-8, l2_lambda=6e-4):
    state = AdamState(beta1=beta1, beta2=beta2, eps=eps, l2_lambda=l2_lambda)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params, state, lr):
    """One in-place Adam update from the gradients currently stored on the
    parameters.  Missing gradients count as zero; decay still applies."""
    if set(state.m) != set(dict(params.items())):
        raise ValueError("adam_step: parameter names do not match optimizer state")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if state.l2_lambda:
            g = g + state.l2_lambda * p.data
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)
