"""Local optimizers, sharpness-aware two-pass wrappers, and the round LR schedule.

The sharpness-aware step evaluates the gradient twice per batch: once at the
current weights to find the worst-case direction, then at the perturbed point
theta + eps_hat, and applies that second gradient at the ORIGINAL weights.
The perturbed point is never persisted. The adaptive variant rescales the
perturbation per coordinate by |theta| + eta so it is invariant to parameter
scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ZeroGradientError(ValueError):
    """Perturbation direction undefined: the batch gradient is exactly zero."""


@dataclass(frozen=True)
class SamConfig:
    """Two-pass sharpness config. rho=0 degenerates to the wrapped optimizer."""

    rho: float = 0.05
    adaptive: bool = False
    eta: float = 0.01

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.eta <= 0:
            raise ValueError("eta must be positive")


@dataclass(frozen=True)
class LrSchedule:
    """Constant gamma1, then a cyclical taper to gamma2 over the last quarter."""

    gamma1: float = 3e-3
    gamma2: float = 3e-4
    total_rounds: int = 40
    cycle: int = 2
    swa_start_fraction: float = 0.75
    shape: str = "linear"  # or "constant": gamma2 throughout the late phase

    def __post_init__(self):
        if not (self.gamma1 >= self.gamma2 > 0):
            raise ValueError("need gamma1 >= gamma2 > 0")
        if self.cycle < 1:
            raise ValueError("cycle length must be >= 1")
        if not 0 < self.swa_start_fraction < 1:
            raise ValueError("swa_start_fraction must be in (0, 1)")
        if self.shape not in ("linear", "constant"):
            raise ValueError("shape must be 'linear' or 'constant'")

    @property
    def swa_start_round(self) -> int:
        return int(np.ceil(self.swa_start_fraction * self.total_rounds))


def lr_for_round(schedule: LrSchedule, t: int) -> float:
    """Round learning rate: gamma1 early, cyclical decay in the late phase."""
    if not 0 <= t < schedule.total_rounds:
        raise ValueError(f"round {t} outside [0, {schedule.total_rounds})")
    if t < schedule.swa_start_fraction * schedule.total_rounds:
        return schedule.gamma1
    if schedule.shape == "constant" or schedule.cycle == 1:
        return schedule.gamma2
    frac = (t % schedule.cycle) / (schedule.cycle - 1)
    return schedule.gamma1 - (schedule.gamma1 - schedule.gamma2) * frac


def sam_perturbation(grads: np.ndarray, rho: float) -> np.ndarray:
    """eps_hat = rho * g / ||g||_2; raises on an exactly zero gradient."""
    norm = float(np.linalg.norm(grads))
    if norm == 0.0:
        raise ZeroGradientError("gradient norm is zero; perturbation undefined")
    return (rho / norm) * grads


def asam_perturbation(params: np.ndarray, grads: np.ndarray,
                      rho: float, eta: float) -> np.ndarray:
    """Parameter-scaled perturbation: eps_hat = rho * T^2 g / ||T g||_2.

    T = diag(|theta| + eta). With all |theta| equal this reduces to the
    unscaled perturbation direction.
    """
    t = np.abs(params) + eta
    tg = t * grads
    norm = float(np.linalg.norm(tg))
    if norm == 0.0:
        raise ZeroGradientError("scaled gradient norm is zero; perturbation undefined")
    return (rho / norm) * (t * tg)


class Sgd:
    """Plain theta <- theta - lr * g (the local update the protocol writes out)."""

    def step(self, params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
        return params - lr * grads


class MomentumSgd:
    def __init__(self, beta: float = 0.9):
        self.beta = beta
        self.velocity: np.ndarray | None = None

    def step(self, params, grads, lr):
        if self.velocity is None:
            self.velocity = np.zeros_like(params)
        self.velocity = self.beta * self.velocity + grads
        return params - lr * self.velocity


class Adam:
    """Bias-corrected adaptive optimizer (also backs the server-side variant)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.t = 0

    def step(self, params, grads, lr):
        if not np.all(np.isfinite(grads)):
            raise ValueError("non-finite gradient")
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1 - self.beta2) * grads * grads
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(state: Adam, params, grads, lr):
    """Functional wrapper over Adam for callers that track state explicitly."""
    return state, state.step(params, grads, lr)


def make_optimizer(name: str, **kwargs):
    if name == "sgd":
        return Sgd()
    if name == "momentum":
        return MomentumSgd(**kwargs)
    if name == "adam":
        return Adam(**kwargs)
    raise ValueError(f"unknown optimizer {name!r}")


def sam_step(params: np.ndarray, loss_and_grad, inner_optimizer,
             sam: SamConfig, lr: float) -> tuple[np.ndarray, float]:
    """One two-pass update on a fixed batch.

    `loss_and_grad(theta) -> (loss, grad)` must evaluate the same batch both
    times. Returns the updated weights and the first-pass loss. A zero
    first-pass gradient skips the perturbation (plain step); rho=0 is exactly
    the wrapped optimizer's step on the first-pass gradient.
    """
    loss1, g1 = loss_and_grad(params)
    if not np.isfinite(loss1):
        raise FloatingPointError(f"non-finite loss {loss1} at current weights")
    if sam.rho == 0.0:
        return inner_optimizer.step(params, g1, lr), loss1

    try:
        if sam.adaptive:
            eps_hat = asam_perturbation(params, g1, sam.rho, sam.eta)
        else:
            eps_hat = sam_perturbation(g1, sam.rho)
    except ZeroGradientError:
        return inner_optimizer.step(params, g1, lr), loss1

    loss2, g2 = loss_and_grad(params + eps_hat)
    if not np.isfinite(loss2):
        raise FloatingPointError(f"non-finite loss {loss2} at perturbed weights")
    return inner_optimizer.step(params, g2, lr), loss1
