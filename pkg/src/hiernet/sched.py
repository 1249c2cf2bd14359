"""Learning-rate machinery.

Three pieces cooperate here:

* an exponential range test that sweeps the learning rate over a probe
  run and picks ``eta_max`` at the minimum of the smoothed loss curve,
  with the training rate ``eta`` fixed at one tenth of it;
* a cosine-annealing schedule with warm restarts
  (``lr = eta_min + (eta_max - eta_min) * (1 + cos(pi * t/T)) / 2``,
  jumping back to ``eta_max`` whenever a cycle completes);
* the per-group rate policy used for fine-tuning: frozen first layers,
  one fifth rate for the middle, full rate for the last.
"""

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import InsufficientDataError, NumericError
from .nnet import Network, sgd_step


@dataclass(frozen=True)
class LrFinderConfig:
    start_lr: float = 1e-5
    end_lr: float = 10.0
    num_iters: int = 100
    smoothing_beta: float = 0.98
    divergence_factor: float = 4.0

    def __post_init__(self):
        if self.start_lr <= 0 or self.end_lr <= self.start_lr:
            raise ValueError("need 0 < start_lr < end_lr")
        if self.num_iters < 2:
            raise ValueError("num_iters must be >= 2")
        if not 0.0 <= self.smoothing_beta < 1.0:
            raise ValueError("smoothing_beta must be in [0, 1)")
        if self.divergence_factor <= 1.0:
            raise ValueError("divergence_factor must exceed 1")


@dataclass
class LrFinderResult:
    """Sweep curve plus the selected rates (eta = eta_max / 10)."""

    lrs: list
    raw_losses: list
    smoothed_losses: list
    eta_max: float
    eta: float

    def to_csv(self) -> str:
        lines = ["iter,lr,raw_loss,smoothed_loss"]
        for t, (lr, raw, smooth) in enumerate(zip(self.lrs, self.raw_losses, self.smoothed_losses)):
            lines.append(f"{t},{lr:.17e},{raw:.17e},{smooth:.17e}")
        return "\n".join(lines) + "\n"


def lr_at_iter(cfg: LrFinderConfig, t: int) -> float:
    """Exponential interpolation from start_lr to end_lr over the sweep."""
    if not 0 <= t < cfg.num_iters:
        raise ValueError(f"iteration {t} outside [0, {cfg.num_iters})")
    return cfg.start_lr * (cfg.end_lr / cfg.start_lr) ** (t / (cfg.num_iters - 1))


def run_lr_finder_steps(step_fn: Callable[[int, float], float], cfg: LrFinderConfig) -> LrFinderResult:
    """Drive a range test over an arbitrary descent step.

    ``step_fn(t, lr)`` must apply one gradient step at ``lr`` and return
    the loss measured after the step, so each recorded loss is attributed
    to the rate that produced it. The sweep halts once the bias-corrected
    smoothed loss exceeds ``divergence_factor`` times its best value, or
    on a non-finite loss (a non-finite loss at the very first step is an
    error instead, since it means the probe never produced a signal).
    """
    lrs, raws, smooths = [], [], []
    ema = 0.0
    best = math.inf
    beta = cfg.smoothing_beta
    for t in range(cfg.num_iters):
        lr = lr_at_iter(cfg, t)
        raw = float(step_fn(t, lr))
        if not math.isfinite(raw):
            if t == 0:
                raise NumericError("non-finite loss on the first range-test step")
            break
        ema = beta * ema + (1.0 - beta) * raw
        smooth = ema / (1.0 - beta ** (t + 1))
        lrs.append(lr)
        raws.append(raw)
        smooths.append(smooth)
        best = min(best, smooth)
        if smooth > cfg.divergence_factor * best:
            break
    if len(lrs) < 2:
        raise InsufficientDataError(f"range test recorded only {len(lrs)} point(s)")
    idx = int(np.argmin(smooths))
    eta_max = lrs[idx]
    return LrFinderResult(lrs, raws, smooths, eta_max, eta_max / 10.0)


def run_lr_finder(net: Network, batches, cfg: LrFinderConfig, rng: np.random.Generator,
                  policy: "GroupLrPolicy | None" = None) -> LrFinderResult:
    """Range test on a throwaway copy of ``net``.

    ``batches`` is a sequence of ``(x, labels)`` pairs, cycled if shorter
    than the sweep. The probe steps with the same per-group rate policy
    used in fine-tuning so the sweep sees the dynamics training will see;
    the caller's network is never touched.
    """
    if policy is None:
        policy = GroupLrPolicy()
    batches = list(batches)
    if not batches:
        raise InsufficientDataError("range test needs at least one batch")
    probe = net.clone()
    probe.eval()

    def step(t, lr):
        x, y = batches[t % len(batches)]
        _, grads = probe.loss_and_grads(x, y, rng=rng)
        sgd_step(probe, grads, group_lrs(policy, lr))
        # post-step, dropout-free measurement on the same batch
        return probe.loss(x, y)

    return run_lr_finder_steps(step, cfg)


# -- SGDR ---------------------------------------------------------------------


@dataclass(frozen=True)
class SgdrSchedule:
    """Cosine annealing with warm restarts, advanced once per iteration."""

    eta_max: float
    cycle_len: int
    eta_min: float = 0.0
    t_cur: int = 0
    cycle_mult: float = 1.0

    def __post_init__(self):
        if self.eta_min < 0 or self.eta_min >= self.eta_max:
            raise ValueError("need 0 <= eta_min < eta_max")
        if self.cycle_len < 1:
            raise ValueError("cycle_len must be >= 1")
        if not 0 <= self.t_cur < self.cycle_len:
            raise ValueError("t_cur must lie in [0, cycle_len)")
        if self.cycle_mult < 1.0:
            raise ValueError("cycle_mult must be >= 1")


def sgdr_lr(s: SgdrSchedule) -> float:
    return s.eta_min + 0.5 * (s.eta_max - s.eta_min) * (1.0 + math.cos(math.pi * s.t_cur / s.cycle_len))


def sgdr_advance(s: SgdrSchedule) -> SgdrSchedule:
    """Next schedule state; restarts (and grows the cycle) at cycle end."""
    t = s.t_cur + 1
    if t >= s.cycle_len:
        return replace(s, t_cur=0, cycle_len=max(1, round(s.cycle_len * s.cycle_mult)))
    return replace(s, t_cur=t)


# -- discriminative rates -----------------------------------------------------


@dataclass(frozen=True)
class GroupLrPolicy:
    """Scale factors (first, middle, last) applied to the scheduled rate."""

    factors: tuple = (0.0, 1.0 / 5.0, 1.0)

    def __post_init__(self):
        if len(self.factors) != 3 or any(f < 0 for f in self.factors):
            raise ValueError("need three non-negative factors")
        if self.factors[2] != 1.0:
            raise ValueError("last-group factor must be 1")


UNIFORM_POLICY = GroupLrPolicy(factors=(1.0, 1.0, 1.0))
HEAD_ONLY_POLICY = GroupLrPolicy(factors=(0.0, 0.0, 1.0))


def group_lrs(policy: GroupLrPolicy, eta_t: float):
    """Per-group rates for the scheduled value ``eta_t``."""
    if eta_t < 0:
        raise ValueError("learning rate must be non-negative")
    f = policy.factors
    return (f[0] * eta_t, f[1] * eta_t, f[2] * eta_t)
